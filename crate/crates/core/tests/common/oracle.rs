//! Straight-through surrogate of the training forward pass.
//!
//! Written with plain loops and sharing nothing with the trainer beyond the
//! quantizer tables. Every quantizer is replaced by its surrogate around a
//! frozen point, `q~(v) = q(v0) + (v - v0)·[v0 inside the clip range]`. At
//! `v = v0` the surrogate equals the real forward pass, and its exact
//! derivative is what the straight-through backward pass claims to compute.

use cgsnet::network::{Architecture, Network, BN_EPS};
use cgsnet::rng::DetRng;
use cgsnet::sparsity::CgsConfig;
use cgsnet::trainer::{backward, forward, Mode};
use ndarray::Array2;

pub type Mat = Vec<Vec<f64>>;

/// Frozen points of every quantizer.
pub struct Frozen {
    w: Vec<Mat>,
    y: Vec<Mat>,
}

/// Mean cross-entropy of the surrogate network (train-mode batch norm),
/// plus every layer's batch-norm output.
pub fn surrogate_loss(net: &Network, x: &Mat, labels: &[u8], frozen: &Frozen) -> (f64, Vec<Mat>) {
    let n = x.len();
    let mut a: Mat = x.iter().map(|r| r.iter().map(|&v| (v * 255.0).round() / 255.0).collect()).collect();
    let mut ys = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        let (fi, fo) = (layer.inputs(), layer.outputs());
        let (lo, hi) = layer.wspec.clip_range();
        let mut wq = vec![vec![0.0; fo]; fi];
        for i in 0..fi {
            for j in 0..fo {
                let c = layer.coeff().map_or(1.0, |c| c[[i, j]]);
                let w0 = frozen.w[l][i][j];
                let slope = if (lo..=hi).contains(&w0) { 1.0 } else { 0.0 };
                let q0 = layer.wspec.quantize_value(w0).unwrap();
                wq[i][j] = c * (q0 + (layer.w[[i, j]] - w0) * slope);
            }
        }
        let mut y = vec![vec![0.0; fo]; n];
        for j in 0..fo {
            let xs: Vec<f64> = (0..n)
                .map(|s| (0..fi).map(|i| a[s][i] * wq[i][j]).sum::<f64>() + layer.b[j])
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sigma = var.sqrt() + BN_EPS;
            for s in 0..n {
                y[s][j] = (xs[s] - mean) / sigma * layer.gamma[j] + layer.beta[j];
            }
        }
        if let Some(aspec) = &layer.aspec {
            let (lo, hi) = aspec.clip_range();
            a = (0..n)
                .map(|s| {
                    (0..fo)
                        .map(|j| {
                            let y0 = frozen.y[l][s][j];
                            let slope = if (lo..=hi).contains(&y0) { 1.0 } else { 0.0 };
                            aspec.quantize_value(y0).unwrap() + (y[s][j] - y0) * slope
                        })
                        .collect()
                })
                .collect();
        }
        ys.push(y);
    }
    let logits = ys.last().unwrap();
    let mut loss = 0.0;
    for (row, &t) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        loss += lse - row[t as usize];
    }
    (loss / n as f64, ys)
}

fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// 8-bit toy network with non-trivial biases and batch-norm parameters,
/// plus a 12-sample batch.
pub fn toy(cgs: Option<CgsConfig>, widths: &[usize], seed: u64) -> (Network, Mat, Vec<u8>) {
    let arch = Architecture::mlp(widths, 8, 8, cgs);
    let mut net = Network::init(&arch, seed).unwrap();
    let mut rng = DetRng::new(seed + 100);
    for l in &mut net.layers {
        l.w.mapv_inplace(|w| if w == 0.0 { 0.0 } else { w * 6.0 });
        l.b.mapv_inplace(|_| rng.unit_f64() - 0.5);
        l.gamma.mapv_inplace(|_| 0.5 + rng.unit_f64());
        l.beta.mapv_inplace(|_| rng.unit_f64());
    }
    let x: Mat = (0..12).map(|_| (0..widths[0]).map(|_| rng.unit_f64()).collect()).collect();
    let classes = *widths.last().unwrap() as u64;
    let labels = (0..12).map(|_| rng.below(classes) as u8).collect();
    (net, x, labels)
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

fn fd(net: &Network, x: &Mat, labels: &[u8], frozen: &Frozen, set: impl Fn(&mut Network, f64)) -> f64 {
    let h = 1e-6;
    let mut p = net.clone();
    set(&mut p, h);
    let up = surrogate_loss(&p, x, labels, frozen).0;
    let mut m = net.clone();
    set(&mut m, -h);
    let down = surrogate_loss(&m, x, labels, frozen).0;
    (up - down) / (2.0 * h)
}

/// Worst disagreements between backprop and central differences.
#[derive(Debug, Default)]
pub struct GradErrors {
    /// Relative, over every γ and β.
    pub bn_rel: f64,
    /// Absolute, over every bias. Train-mode batch norm subtracts the batch
    /// mean, so both sides are ~0 and a relative error is meaningless.
    pub bias_abs: f64,
    /// Relative, over every kept weight.
    pub weight_rel: f64,
    /// The surrogate reproduces the real forward pass at the frozen point.
    pub forward_abs: f64,
}

pub fn gradient_errors(net: &Network, x: &Mat, labels: &[u8]) -> GradErrors {
    let xb = Array2::from_shape_vec((x.len(), x[0].len()), x.concat()).unwrap();
    let (logits, cache) = forward(net, &xb, Mode::Train).unwrap();
    let grads = backward(net, &logits, &cache, labels).unwrap();
    let frozen = Frozen {
        w: net.layers.iter().map(|l| to_mat(&l.w)).collect(),
        y: cache.layers.iter().map(|c| to_mat(&c.y)).collect(),
    };
    let mut e = GradErrors::default();
    let (_, ys) = surrogate_loss(net, x, labels, &frozen);
    for (y, c) in ys.iter().zip(&cache.layers) {
        for (s, row) in y.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                e.forward_abs = e.forward_abs.max((v - c.y[[s, j]]).abs());
            }
        }
    }
    for (l, layer) in net.layers.iter().enumerate() {
        for j in 0..layer.outputs() {
            let g = fd(net, x, labels, &frozen, |n, h| n.layers[l].gamma[j] += h);
            e.bn_rel = e.bn_rel.max(rel_err(grads[l].gamma[j], g));
            let g = fd(net, x, labels, &frozen, |n, h| n.layers[l].beta[j] += h);
            e.bn_rel = e.bn_rel.max(rel_err(grads[l].beta[j], g));
            let g = fd(net, x, labels, &frozen, |n, h| n.layers[l].b[j] += h);
            e.bias_abs = e.bias_abs.max((grads[l].b[j] - g).abs());
        }
        for i in 0..layer.inputs() {
            for j in 0..layer.outputs() {
                if layer.coeff().is_some_and(|c| c[[i, j]] == 0.0) {
                    continue;
                }
                let g = fd(net, x, labels, &frozen, |n, h| n.layers[l].w[[i, j]] += h);
                e.weight_rel = e.weight_rel.max(rel_err(grads[l].w[[i, j]], g));
            }
        }
    }
    e
}
