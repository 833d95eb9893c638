use super::Network;
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- m v + (g + wd p)`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<RealTensor>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: net
                .params()
                .iter()
                .map(|p| RealTensor::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[RealTensor], lr: f64) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != grads.len() || grads.len() != self.velocity.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.velocity.len(),
                grads.len(),
                params.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
            for i in 0..pd.len() {
                vd[i] = self.momentum * vd[i] + gd[i] + self.weight_decay * pd[i];
                pd[i] -= lr * vd[i];
            }
        }
        Ok(())
    }
}
