//! Small dense spectral primitives: one-sided Jacobi SVD, the coupled
//! Newton–Schulz inverse square root and the Procrustes projection built on it.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{matmul, ComplexMatrix};

pub const SVD_MAX_DIM: usize = 256;
pub const NS_DEFAULT_MAX_ITERS: usize = 30;
pub const NS_DEFAULT_TOL: f64 = 1e-7;
/// Relative Tikhonov shift added to a Gram matrix the plain iteration cannot invert.
pub const GRAM_EPSILON: f64 = 1e-7;

const JACOBI_MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `rows x r` with orthonormal columns, `r = min(rows, cols)`.
    pub u: ComplexMatrix,
    /// Descending, nonnegative, length `r`.
    pub singular_values: Vec<f64>,
    /// `cols x r` with orthonormal columns.
    pub v: ComplexMatrix,
}

impl SvdResult {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn sigma_min(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    /// `U diag(s) V^H`
    pub fn reconstruct(&self) -> ComplexMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        matmul(&us, &self.v.adjoint()).expect("svd factors are conformant")
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Column pairs are visited in fixed cyclic order so results are deterministic.
pub fn svd_small(m: &ComplexMatrix) -> Result<SvdResult> {
    if m.rows() > SVD_MAX_DIM || m.cols() > SVD_MAX_DIM {
        return Err(Error::Size(format!(
            "svd_small supports up to {SVD_MAX_DIM}x{SVD_MAX_DIM}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd_small input".into()));
    }
    if m.cols() > m.rows() {
        let t = svd_tall(&m.adjoint());
        return Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    Ok(svd_tall(m))
}

fn svd_tall(m: &ComplexMatrix) -> SvdResult {
    let rows = m.rows();
    let cols = m.cols();
    // column-major working copies
    let mut a: Vec<Vec<Complex64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<Complex64>> = (0..cols)
        .map(|j| {
            let mut e = vec![Complex64::new(0.0, 0.0); cols];
            e[j] = Complex64::new(1.0, 0.0);
            e
        })
        .collect();

    let eps = f64::EPSILON;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha: f64 = a[p].iter().map(|z| z.norm_sqr()).sum();
                let beta: f64 = a[q].iter().map(|z| z.norm_sqr()).sum();
                let gamma: Complex64 = a[p].iter().zip(&a[q]).map(|(x, y)| x.conj() * y).sum();
                let g = gamma.norm();
                if g == 0.0 || g <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s, phase);
                rotate(&mut v, p, q, c, s, phase);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // stable sort keeps ties in column order
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let sigma_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let null_tol = sigma_max * (rows.max(cols) as f64) * eps;

    let mut u_cols: Vec<Vec<Complex64>> = Vec::with_capacity(cols);
    let mut singular_values = Vec::with_capacity(cols);
    let mut v_out = ComplexMatrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singular_values.push(sigma);
        for i in 0..cols {
            v_out[(i, dst)] = v[src][i];
        }
        if sigma > null_tol && sigma > 0.0 {
            u_cols.push(a[src].iter().map(|z| z / sigma).collect());
        } else {
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, rows);

    let mut u = ComplexMatrix::zeros(rows, cols);
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..rows {
            u[(i, j)] = col[i];
        }
    }
    SvdResult {
        u,
        singular_values,
        v: v_out,
    }
}

fn rotate(cols: &mut [Vec<Complex64>], p: usize, q: usize, c: f64, s: f64, phase: Complex64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    let back = phase.conj();
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let yq = back * *y;
        let new_p = *x * c - yq * s;
        let new_q = *x * s + yq * c;
        *x = new_p;
        *y = new_q;
    }
}

/// Fills empty slots with unit vectors orthogonal to every filled slot.
fn complete_orthonormal(cols: &mut [Vec<Complex64>], dim: usize) {
    let mut basis_idx = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        loop {
            assert!(basis_idx < dim, "ran out of basis vectors");
            let mut cand = vec![Complex64::new(0.0, 0.0); dim];
            cand[basis_idx] = Complex64::new(1.0, 0.0);
            basis_idx += 1;
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj: Complex64 = other.iter().zip(&cand).map(|(o, x)| o.conj() * x).sum();
                    for (x, o) in cand.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = cand.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols[j] = cand.into_iter().map(|z| z / norm).collect();
                break;
            }
        }
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &ComplexMatrix) -> Result<f64> {
    Ok(svd_small(m)?.sigma_max())
}

/// One snapshot of the coupled iteration on the trace-normalized matrix.
#[derive(Clone, Debug)]
pub struct NewtonSchulzState {
    pub y: ComplexMatrix,
    pub z: ComplexMatrix,
    pub iteration: usize,
    /// `||Z_k Y_k - I||_F`, which equals `||Z_k A Z_k - I||_F` along the iteration.
    pub residual: f64,
    zy: ComplexMatrix,
}

impl NewtonSchulzState {
    fn start(a: ComplexMatrix) -> Self {
        let n = a.rows();
        let mut state = Self {
            zy: a.clone(),
            y: a,
            z: ComplexMatrix::identity(n),
            iteration: 0,
            residual: f64::INFINITY,
        };
        state.refresh();
        state
    }

    fn refresh(&mut self) {
        self.zy = matmul(&self.z, &self.y).expect("square iterates");
        let n = self.zy.rows();
        self.residual = self
            .zy
            .sub(&ComplexMatrix::identity(n))
            .expect("square")
            .frobenius_norm();
    }

    /// `T = 3I - Z Y`, `Y <- Y T / 2`, `Z <- T Z / 2`.
    fn step(&mut self) {
        let n = self.zy.rows();
        let t = ComplexMatrix::identity(n).scaled(3.0).sub(&self.zy).expect("square");
        self.y = matmul(&self.y, &t).expect("square").scaled(0.5);
        self.z = matmul(&t, &self.z).expect("square").scaled(0.5);
        self.iteration += 1;
        self.refresh();
    }
}

#[derive(Clone, Debug)]
pub struct InvSqrt {
    pub z: ComplexMatrix,
    pub iterations: usize,
    /// `||Z A Z - I||_F` of the returned matrix.
    pub residual: f64,
    /// Residual after each iteration, starting at iteration 0.
    pub history: Vec<f64>,
}

/// Inverse square root of a Hermitian positive definite matrix.
pub fn newton_schulz_inv_sqrt(a: &ComplexMatrix, max_iters: usize, tol: f64) -> Result<ComplexMatrix> {
    newton_schulz_detailed(a, max_iters, tol).map(|r| r.z)
}

/// [`newton_schulz_inv_sqrt`] with iteration count and residual history.
///
/// The input is divided by its trace so every eigenvalue lies in (0, 1];
/// the result is rescaled by `1/sqrt(trace)` on return.
pub fn newton_schulz_detailed(a: &ComplexMatrix, max_iters: usize, tol: f64) -> Result<InvSqrt> {
    if !a.is_square() {
        return Err(Error::dim(format!(
            "inverse square root of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::Numeric("newton-schulz input".into()));
    }
    let scale = a.trace().re;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Singular(format!(
            "trace {scale} is not positive; matrix is not positive definite"
        )));
    }
    let n = a.rows();
    let mut state = NewtonSchulzState::start(a.scaled(1.0 / scale));
    let mut history = vec![state.residual];
    let inv_root = 1.0 / scale.sqrt();
    loop {
        if state.residual <= tol {
            let mut z = state.z.scaled(inv_root);
            hermitian_part(&mut z);
            let check = matmul(&matmul(&z, a)?, &z)?
                .sub(&ComplexMatrix::identity(n))?
                .frobenius_norm();
            if check <= tol {
                return Ok(InvSqrt {
                    z,
                    iterations: state.iteration,
                    residual: check,
                    history,
                });
            }
        }
        if state.iteration >= max_iters || !state.residual.is_finite() {
            return Err(Error::Convergence {
                iterations: state.iteration,
                residual: state.residual,
            });
        }
        state.step();
        history.push(state.residual);
    }
}

fn hermitian_part(z: &mut ComplexMatrix) {
    let n = z.rows();
    for i in 0..n {
        for j in i..n {
            let avg = 0.5 * (z[(i, j)] + z[(j, i)].conj());
            z[(i, j)] = avg;
            z[(j, i)] = avg.conj();
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProcrustesOutcome {
    pub projected: ComplexMatrix,
    pub iterations: usize,
    pub residual: f64,
}

/// Nearest matrix (in Frobenius norm) whose nonzero singular values all equal
/// `sigma_target`: `sigma * P (P^H P)^{-1/2}`.
pub fn procrustes_project(p: &ComplexMatrix, sigma_target: f64) -> Result<ComplexMatrix> {
    procrustes_detailed(p, sigma_target, NS_DEFAULT_MAX_ITERS, NS_DEFAULT_TOL).map(|o| o.projected)
}

/// Uses the smaller of the two Gram matrices: for wide `P` the identity
/// `P (P^H P)^{-1/2} = (P P^H)^{-1/2} P` keeps the inverted matrix full rank.
pub fn procrustes_detailed(
    p: &ComplexMatrix,
    sigma_target: f64,
    max_iters: usize,
    tol: f64,
) -> Result<ProcrustesOutcome> {
    if !(sigma_target > 0.0) || !sigma_target.is_finite() {
        return Err(Error::Config(format!(
            "sigma_target must be positive, got {sigma_target}"
        )));
    }
    let wide = p.cols() > p.rows();
    let gram = if wide {
        matmul(p, &p.adjoint())?
    } else {
        matmul(&p.adjoint(), p)?
    };
    let dim = gram.rows();
    let trace = gram.trace().re;
    if trace == 0.0 {
        return Ok(ProcrustesOutcome {
            projected: ComplexMatrix::zeros(p.rows(), p.cols()),
            iterations: 0,
            residual: 0.0,
        });
    }
    let inv = match newton_schulz_detailed(&gram, max_iters, tol) {
        Ok(inv) => inv,
        Err(Error::Convergence { .. }) | Err(Error::Singular(_)) => {
            // rank-deficient slice: shift the spectrum so the null directions
            // map to ~0 instead of blowing up
            let shift = GRAM_EPSILON * trace / dim as f64;
            let regularized = gram.add(&ComplexMatrix::identity(dim).scaled(shift))?;
            newton_schulz_detailed(&regularized, max_iters, tol)?
        }
        Err(e) => return Err(e),
    };
    let polar = if wide {
        matmul(&inv.z, p)?
    } else {
        matmul(p, &inv.z)?
    };
    Ok(ProcrustesOutcome {
        projected: polar.scaled(sigma_target),
        iterations: inv.iterations,
        residual: inv.residual,
    })
}

/// `(1 - sigma_max(M), 1 + sigma_max(M))`, the interval that contains every
/// singular value of `I + M`.
pub fn lemma1_bounds(m: &ComplexMatrix) -> Result<(f64, f64)> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "singular value sandwich needs square M, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let s = spectral_norm(m)?;
    Ok((1.0 - s, 1.0 + s))
}
