use super::*;
use crate::tensor::Rng;

fn labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

fn tiny_two_block(rng: &mut Rng) -> Network {
    let net = Network {
        input_shape: vec![3, 8, 8],
        head: vec![Layer::Conv(Conv2d::he(3, 4, 3, 1, rng))],
        blocks: vec![
            Block {
                kind: BlockKind::TransitionOriginal,
                entry: vec![],
                branch: vec![
                    Layer::BatchNorm(BatchNorm2d::new(4)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::he(3, 6, 4, 2, rng)),
                ],
                skip: Skip::Conv(Conv2d::he(1, 6, 4, 2, rng)),
            },
            Block {
                kind: BlockKind::ResidualIdentity,
                entry: vec![],
                branch: vec![
                    Layer::BatchNorm(BatchNorm2d::new(6)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::he(3, 6, 6, 1, rng)),
                ],
                skip: Skip::Identity,
            },
        ],
        tail: vec![
            Layer::BatchNorm(BatchNorm2d::new(6)),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(6, 3, rng)),
        ],
    };
    net.validate().unwrap();
    net
}

/// Independent straight-line evaluation with `Vec<Vec<Vec<Vec<f64>>>>`
/// activations indexed `[n][c][y][x]`.
mod straight {
    use crate::spectrum::Kernel4;

    pub type Act = Vec<Vec<Vec<Vec<f64>>>>;

    pub fn from_flat(data: &[f64], n: usize, c: usize, h: usize) -> Act {
        (0..n)
            .map(|b| {
                (0..c)
                    .map(|ch| {
                        (0..h)
                            .map(|y| (0..h).map(|x| data[((b * c + ch) * h + y) * h + x]).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn conv(x: &Act, k: &Kernel4, stride: usize) -> Act {
        let h = x[0][0].len();
        let out = (h + stride - 1) / stride;
        let pad = (k.k() as isize - 1) / 2;
        x.iter()
            .map(|img| {
                (0..k.out_channels())
                    .map(|o| {
                        (0..out)
                            .map(|oy| {
                                (0..out)
                                    .map(|ox| {
                                        let mut acc = 0.0;
                                        for (i, plane) in img.iter().enumerate() {
                                            for r in 0..k.k() {
                                                for s in 0..k.k() {
                                                    let y = (oy * stride) as isize + r as isize - pad;
                                                    let xx = (ox * stride) as isize + s as isize - pad;
                                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < h {
                                                        acc += k.get(r, s, o, i) * plane[y as usize][xx as usize];
                                                    }
                                                }
                                            }
                                        }
                                        acc
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn bn_relu(x: &Act) -> Act {
        let (n, c) = (x.len(), x[0].len());
        let mut out = x.clone();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| x[b][ch].iter().flatten().copied()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            for img in out.iter_mut() {
                for row in img[ch].iter_mut() {
                    for e in row.iter_mut() {
                        *e = ((*e - m) / (v + 1e-5).sqrt()).max(0.0);
                    }
                }
            }
        }
        out
    }

    pub fn add(a: &Act, b: &Act) -> Act {
        a.iter()
            .zip(b)
            .map(|(p, q)| {
                p.iter()
                    .zip(q)
                    .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u.iter().zip(v).map(|(x, y)| x + y).collect()).collect())
                    .collect()
            })
            .collect()
    }
}

#[test]
fn forward_matches_straight_line_evaluation() {
    let mut rng = Rng::new(101);
    let mut net = tiny_two_block(&mut rng);
    let batch = RealTensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
    let y = labels(4, 3, &mut rng);
    let (loss, tape) = net.forward(&batch, &y, Mode::Train).unwrap();

    let conv = |l: &Layer| match l {
        Layer::Conv(c) => c.clone(),
        _ => unreachable!(),
    };
    let x0 = straight::from_flat(batch.data(), 4, 3, 8);
    let x1 = straight::conv(&x0, &conv(&net.head[0]).kernel, 1);
    let b0 = &net.blocks[0];
    let Skip::Conv(skip) = &b0.skip else { unreachable!() };
    let x2 = straight::add(
        &straight::conv(&straight::bn_relu(&x1), &conv(&b0.branch[2]).kernel, 2),
        &straight::conv(&x1, &skip.kernel, 2),
    );
    let x3 = straight::add(
        &straight::conv(&straight::bn_relu(&x2), &conv(&net.blocks[1].branch[2]).kernel, 1),
        &x2,
    );
    let pooled: Vec<Vec<f64>> = straight::bn_relu(&x3)
        .iter()
        .map(|img| img.iter().map(|p| p.iter().flatten().sum::<f64>() / 16.0).collect())
        .collect();
    let Layer::Linear(fc) = &net.tail[3] else { unreachable!() };
    let mut expected = 0.0;
    for (b, feat) in pooled.iter().enumerate() {
        let logits: Vec<f64> = (0..3)
            .map(|o| fc.bias.data()[o] + (0..6).map(|i| fc.weight.data()[o * 6 + i] * feat[i]).sum::<f64>())
            .collect();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        expected += lse - logits[y[b]];
    }
    expected /= 4.0;
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    assert_eq!(tape.boundaries.len(), net.blocks.len() + 1 + 2);
}

#[test]
fn zero_branch_blocks_form_an_identity_chain() {
    let mut rng = Rng::new(102);
    let mut net = corollary_network(3, 4, 6, 3, 3, 0.0, &mut rng).unwrap();
    let batch = RealTensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
    let y = labels(2, 3, &mut rng);
    let (_, tape) = net.forward(&batch, &y, Mode::Train).unwrap();
    let first = &tape.boundaries[1];
    let last = &tape.boundaries[net.blocks.len() + 1];
    assert_eq!(first.data(), last.data());
    let grads = net.backward(&tape).unwrap();
    for pair in grads.boundaries.windows(2) {
        assert_eq!(pair[0].data(), pair[1].data());
    }
}

#[test]
fn residual_gradient_is_pass_through_plus_branch() {
    let mut rng = Rng::new(103);
    let mut net = corollary_network(3, 4, 6, 2, 3, 0.5, &mut rng).unwrap();
    let batch = RealTensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
    let y = labels(2, 3, &mut rng);
    let (_, tape) = net.forward(&batch, &y, Mode::Train).unwrap();
    let grads = net.backward(&tape).unwrap();
    for l in 0..net.blocks.len() {
        let mut branch = net.blocks[l].branch.clone();
        let (_, caches) = run_forward(&mut branch, &tape.boundaries[l + 1], Mode::Train).unwrap();
        let (vjp, _) = run_backward(&branch, &caches, grads.boundaries[l + 1].clone()).unwrap();
        for ((a, b), c) in grads.boundaries[l]
            .data()
            .iter()
            .zip(grads.boundaries[l + 1].data())
            .zip(vjp.data())
        {
            assert!((a - (b + c)).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_without_forward_is_a_state_error() {
    let mut rng = Rng::new(104);
    let net = tiny_two_block(&mut rng);
    assert!(matches!(net.backward(&Tape::default()), Err(Error::State(_))));
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let mut rng = Rng::new(105);
    let mut net = tiny_two_block(&mut rng);
    let batch = RealTensor::zeros(&[2, 3, 6, 6]);
    assert!(matches!(
        net.forward(&batch, &[0, 1], Mode::Train),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn non_finite_activation_names_the_block() {
    let mut rng = Rng::new(106);
    let mut net = corollary_network(3, 4, 6, 3, 3, 1.0, &mut rng).unwrap();
    if let Layer::Conv(c) = &mut net.blocks[1].branch[3] {
        c.kernel.weights_mut().data_mut()[0] = f64::INFINITY;
    }
    let batch = RealTensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
    match net.forward(&batch, &[0, 1], Mode::Train) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("block 2"), "{msg}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

fn spec(arch: Architecture, depth: usize) -> ArchSpec {
    ArchSpec {
        architecture: arch,
        depth,
        widths: vec![16, 32, 64],
        input_size: 8,
        classes: 10,
        input_channels: 3,
        expansion: 4,
        proc_kernel: 3,
    }
}

#[test]
fn depth_accounting_and_transition_layout() {
    let mut rng = Rng::new(107);
    let resnet = build_network(&spec(Architecture::Resnet, 6), &mut rng).unwrap();
    assert_eq!(resnet.blocks.len(), 6);
    assert_eq!(resnet.depth(), 20);
    let kinds: Vec<BlockKind> = resnet.blocks.iter().map(|b| b.kind).collect();
    for (i, k) in kinds.iter().enumerate() {
        let expected = if i % 2 == 0 {
            BlockKind::TransitionOriginal
        } else {
            BlockKind::ResidualIdentity
        };
        assert_eq!(*k, expected, "block {}", i + 1);
    }
    assert_eq!(
        resnet.transition_flags().unwrap(),
        vec![true, false, true, false, true, false]
    );

    let plain = build_network(&spec(Architecture::Plain, 6), &mut rng).unwrap();
    assert_eq!(plain.depth(), 20);
    assert!(plain.blocks.iter().all(|b| b.skip == Skip::None));
    for (p, r) in plain.blocks.iter().zip(&resnet.blocks) {
        let names = |b: &Block| b.branch.iter().map(Layer::name).collect::<Vec<_>>();
        assert_eq!(names(p), names(r));
    }

    let proc = build_network(&spec(Architecture::Procresnet, 6), &mut rng).unwrap();
    assert_eq!(proc.depth(), 22);
    assert!(proc.head.is_empty());
    for i in [0, 2, 4] {
        assert_eq!(proc.blocks[i].kind, BlockKind::TransitionProposed);
        assert_eq!(proc.blocks[i].skip, Skip::Identity);
        assert_eq!(proc.blocks[i].entry[0].name(), "conv*");
    }
}

#[test]
fn conv_star_layers_start_projected() {
    let mut rng = Rng::new(108);
    let net = build_network(&spec(Architecture::Procresnet, 3), &mut rng).unwrap();
    for block in &net.blocks {
        let Layer::Conv(c) = &block.entry[0] else { unreachable!() };
        let p = c.projection.unwrap();
        let full = crate::spectrum::project_kernel_detailed(&c.kernel, p.n, p.sigma).unwrap();
        // re-projecting a truncated kernel moves it, but its own spectrum stays bounded
        assert!(full.max_residual <= 1e-7);
        assert!(crate::spectrum::conv_spectral_norm(&c.kernel, p.n).unwrap() < 2.0 * p.sigma);
    }
}

#[test]
fn inconsistent_spec_is_a_config_error() {
    let mut rng = Rng::new(109);
    let mut bad = spec(Architecture::Resnet, 7);
    assert!(matches!(build_network(&bad, &mut rng), Err(Error::Config(_))));
    bad.depth = 6;
    bad.widths = vec![16, 32];
    assert!(matches!(build_network(&bad, &mut rng), Err(Error::Config(_))));
}

#[test]
fn gradients_match_finite_differences_on_every_architecture() {
    for arch in [Architecture::Plain, Architecture::Resnet, Architecture::Procresnet] {
        let mut rng = Rng::new(110);
        let mut s = spec(arch, 3);
        s.widths = vec![2, 2, 2];
        s.expansion = 2;
        let net = build_network(&s, &mut rng).unwrap();
        let batch = RealTensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
        let y = labels(3, 10, &mut rng);
        let err = grad_check(&net, &batch, &y, 1e-5).unwrap();
        assert!(err <= 1e-4, "{arch:?}: {err}");
    }
}

#[test]
fn linear_only_gradient_is_nearly_exact() {
    let mut rng = Rng::new(111);
    let net = Network {
        input_shape: vec![5, 1, 1],
        head: vec![],
        blocks: vec![],
        tail: vec![Layer::GlobalAvgPool, Layer::Linear(Linear::new(5, 4, &mut rng))],
    };
    let batch = RealTensor::randn(&[6, 5, 1, 1], 1.0, &mut rng);
    let y = labels(6, 4, &mut rng);
    let err = grad_check(&net, &batch, &y, 1e-5).unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn same_seed_gives_identical_losses() {
    let run = || {
        let mut rng = Rng::new(112);
        let mut s = spec(Architecture::Resnet, 3);
        s.widths = vec![2, 2, 2];
        let mut net = build_network(&s, &mut rng).unwrap();
        let batch = RealTensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let mut opt = Sgd::new(&net, 0.9, 1e-4);
        (0..3)
            .map(|_| {
                let (loss, tape) = net.forward(&batch, &[1, 2], Mode::Train).unwrap();
                let g = net.backward(&tape).unwrap();
                opt.step(&mut net, &g.params, 0.1).unwrap();
                loss.to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut rng = Rng::new(113);
    let mut s = spec(Architecture::Procresnet, 3);
    s.widths = vec![2, 2, 2];
    let mut net = build_network(&s, &mut rng).unwrap();
    let batch = RealTensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    net.forward(&batch, &[0, 1], Mode::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_checkpoint(&net, dir.path(), "final").unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, net);
}

#[test]
fn sgd_applies_momentum_and_decay() {
    let mut rng = Rng::new(114);
    let mut net = Network {
        input_shape: vec![1, 1, 1],
        head: vec![],
        blocks: vec![],
        tail: vec![Layer::GlobalAvgPool, Layer::Linear(Linear::new(1, 2, &mut rng))],
    };
    let w0 = net.params()[0].data()[0];
    let mut opt = Sgd::new(&net, 0.9, 0.1);
    let g = vec![
        RealTensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap(),
        RealTensor::zeros(&[2]),
    ];
    opt.step(&mut net, &g, 0.5).unwrap();
    let v1 = 1.0 + 0.1 * w0;
    let w1 = w0 - 0.5 * v1;
    assert!((net.params()[0].data()[0] - w1).abs() < 1e-15);
    opt.step(&mut net, &g, 0.5).unwrap();
    let v2 = 0.9 * v1 + 1.0 + 0.1 * w1;
    assert!((net.params()[0].data()[0] - (w1 - 0.5 * v2)).abs() < 1e-15);
}
