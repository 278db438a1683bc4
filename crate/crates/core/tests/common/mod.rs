#![allow(dead_code)]

use hodcnn::micronet::train::one_hot;
use hodcnn::micronet::{Mode, Network, NetworkSpec, Padding, PoolKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct cross-correlation with zero padding `(ph, pw)`, no activation.
pub fn conv_oracle(x: &Tensor, wt: &Tensor, b: &Tensor, (ph, pw): (usize, usize)) -> Vec<f64> {
    let s = x.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let (cout, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
    let at = |bi: usize, c: usize, y: isize, xx: isize| {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[((bi * cin + c) * h + y as usize) * w + xx as usize]
        }
    };
    let (ho, wo) = (h + 2 * ph + 1 - kh, w + 2 * pw + 1 - kw);
    let mut out = Vec::with_capacity(n * cout * ho * wo);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wt.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                let y = (oy + ky) as isize - ph as isize;
                                let xx = (ox + kx) as isize - pw as isize;
                                acc += wv * at(bi, ci, y, xx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Non-overlapping pooling by direct window scan.
pub fn pool_oracle(x: &Tensor, (fh, fw): (usize, usize), kind: PoolKind) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / fh, w / fw);
    let mut out = Vec::new();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut vals = Vec::new();
                for dy in 0..fh {
                    for dx in 0..fw {
                        vals.push(x.data()[(plane * h + oy * fh + dy) * w + ox * fw + dx]);
                    }
                }
                out.push(match kind {
                    PoolKind::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    PoolKind::Average => vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    out
}

/// A small random structure that fits its input.
pub fn random_spec(rng: &mut impl Rng) -> NetworkSpec {
    loop {
        let size = rng.random_range(5..=9);
        let spec = NetworkSpec {
            input_channels: rng.random_range(1..=2),
            input_height: size,
            input_width: rng.random_range(5..=9),
            kernel_size: [3, 5][rng.random_range(0..2)],
            feature_maps: rng.random_range(1..=3),
            pooling: [PoolKind::Max, PoolKind::Average][rng.random_range(0..2)],
            conv_blocks: rng.random_range(1..=2),
            dense_units: [0, 3][rng.random_range(0..2)],
            num_classes: rng.random_range(2..=3),
            padding: [Padding::Valid, Padding::Same][rng.random_range(0..2)],
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

/// Random network with every learnable tensor and the running statistics
/// perturbed away from their initial values.
pub fn random_network(spec: NetworkSpec, rng: &mut impl Rng) -> Network {
    let mut net = Network::init(spec, rng.random(), 1.0).unwrap();
    for block in &mut net.params.blocks {
        for v in block.bias.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in block.norm.gamma.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in block.norm.beta.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in block.norm.running_mean.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in block.norm.running_var.data_mut() {
            *v = rng.random_range(0.5..2.0);
        }
    }
    if let Some(h) = &mut net.params.hidden {
        for v in h.bias.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    for v in net.params.output.bias.data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    net
}

pub fn random_targets(n: usize, classes: usize, rng: &mut impl Rng) -> Tensor {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    one_hot(&labels, classes)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    /// Perturbations that moved a ReLU, pooling route or clip across its
    /// kink; finite differences are meaningless there.
    pub skipped: usize,
    pub max_rel_error: f64,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of the train-mode loss for every learnable value.
pub fn gradient_check(net: &Network, batch: &Tensor, targets: &Tensor, h: f64) -> GradCheck {
    let (_, grads, cache) = net.loss_and_gradients(batch, targets).unwrap();
    let base = cache.pattern();
    let mut out = GradCheck::default();
    let mut probe = net.clone();
    for (t, grad) in grads.tensors.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.params.learnable()[t].data()[i];
            let eval = |v: f64, probe: &mut Network| {
                probe.params.learnable_mut()[t].data_mut()[i] = v;
                let c = probe.forward_cached(batch, Mode::Train).unwrap();
                let loss = hodcnn::micronet::bce_loss(&c.probabilities, targets).unwrap();
                (loss, c.pattern() == base)
            };
            let (plus, same_plus) = eval(original + h, &mut probe);
            let (minus, same_minus) = eval(original - h, &mut probe);
            probe.params.learnable_mut()[t].data_mut()[i] = original;
            if !(same_plus && same_minus) {
                out.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            out.checked += 1;
            out.max_rel_error = out.max_rel_error.max(rel_error(grad.data()[i], numeric));
        }
    }
    out
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
