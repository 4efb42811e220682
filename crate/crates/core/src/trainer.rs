//! Quantized forward pass, straight-through backward pass and the
//! CGS-gated momentum update.
//!
//! Every layer sees its input as integer codes times a grid step (`lsb`):
//! pixel codes with step 1/255 for the first layer, activation level indices
//! for the rest. The weighted sum is `x' = (codes · Wq) · lsb`, so the
//! integer-by-dyadic dot product is exact in `f64` and the hardware
//! simulator can reproduce it bit for bit.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mnist::Dataset;
use crate::network::{pixel_lsb, Network, BN_EPS, PIXEL_LEVELS};
use crate::rng::{derive_seed, DetRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight of the previous update direction.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-epoch multiplicative learning-rate factor.
    pub lr_decay: f64,
    pub seed: u64,
    /// Exponential-moving-average factor of the running batch-norm statistics.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 100;
        TrainConfig {
            lr: 0.003,
            momentum: 0.9,
            batch_size: 100,
            epochs,
            // 0.003 -> 3e-6 over the run
            lr_decay: (1e-3f64).powf(1.0 / epochs as f64),
            seed: 1,
            bn_momentum: default_bn_momentum(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size >= 2
            && self.lr_decay > 0.0
            && self.bn_momentum > 0.0
            && self.bn_momentum <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub input_codes: Array2<f64>,
    pub input_lsb: f64,
    pub wq: Array2<f64>,
    pub xhat: Array2<f64>,
    pub mean: Array1<f64>,
    /// `sqrt(var) + eps` (train) or the running std (infer).
    pub sigma: Array1<f64>,
    /// Batch-norm output, the pre-quantization value of the activation.
    pub y: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub mode: Mode,
    pub layers: Vec<LayerCache>,
}

/// Pixel codes of a `[0, 1]` batch.
pub fn pixel_codes(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.raw_dim());
    for (dst, &v) in out.iter_mut().zip(x) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("input value {v} outside [0, 1]")));
        }
        *dst = (v * PIXEL_LEVELS as f64).round();
    }
    Ok(out)
}

/// Quantized forward pass. Returns logits and the per-layer cache.
pub fn forward(net: &Network, batch: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, ForwardCache)> {
    if batch.ncols() != net.input_width() {
        return Err(Error::Shape(format!(
            "batch has {} features, network expects {}",
            batch.ncols(),
            net.input_width()
        )));
    }
    if mode == Mode::Train && batch.nrows() < 2 {
        return Err(Error::Shape("training batches need at least two rows".into()));
    }
    let mut codes = pixel_codes(batch)?;
    let mut lsb = pixel_lsb();
    let mut caches = Vec::with_capacity(net.layers.len());
    let mut logits = None;
    for layer in &net.layers {
        let wq = layer.quantized_weights();
        let mut x = codes.dot(&wq);
        x.mapv_inplace(|s| s * lsb);
        x += &layer.b;
        let (mean, sigma) = match mode {
            Mode::Train => {
                let mean = x.mean_axis(Axis(0)).unwrap();
                let var = (&x - &mean).mapv(|d| d * d).mean_axis(Axis(0)).unwrap();
                (mean, var.mapv(|v| v.sqrt() + BN_EPS))
            }
            Mode::Infer => (layer.running_mean.clone(), layer.running_std.clone()),
        };
        if sigma.iter().any(|s| !(*s >= BN_EPS)) {
            return Err(Error::Numeric("batch-norm standard deviation below epsilon".into()));
        }
        let xhat = (&x - &mean) / &sigma;
        let y = &xhat * &layer.gamma + &layer.beta;
        if y.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in batch-norm output".into()));
        }
        let next = match &layer.aspec {
            Some(a) => {
                let next = y.mapv(|v| a.quantize_index(v) as f64);
                Some((next, a.lsb()))
            }
            None => {
                logits = Some(y.clone());
                None
            }
        };
        caches.push(LayerCache { input_codes: codes, input_lsb: lsb, wq, xhat, mean, sigma, y });
        match next {
            Some((c, l)) => {
                codes = c;
                lsb = l;
            }
            None => break,
        }
    }
    let logits = logits.ok_or_else(|| Error::Contract("network has no output layer".into()))?;
    Ok((logits, ForwardCache { mode, layers: caches }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerGrads {
    fn zeros_like(net: &Network) -> Vec<LayerGrads> {
        net.layers
            .iter()
            .map(|l| LayerGrads {
                w: Array2::zeros(l.w.raw_dim()),
                b: Array1::zeros(l.outputs()),
                gamma: Array1::zeros(l.outputs()),
                beta: Array1::zeros(l.outputs()),
            })
            .collect()
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.mapv(|v| (v - m).exp()).sum().ln() + m;
        total += lse - row[t as usize];
    }
    total / labels.len() as f64
}

/// `∂L/∂logits` of the mean cross-entropy: `(softmax - onehot) / N`.
pub fn logits_grad(logits: &Array2<f64>, labels: &[u8]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = softmax_rows(logits);
    for (mut row, &t) in g.rows_mut().into_iter().zip(labels) {
        row[t as usize] -= 1.0;
        row /= n;
    }
    g
}

/// Backward pass through batch norm (full batch statistics), activation
/// quantizers (straight-through with clip masking) and weight quantizers.
/// Gradients are with respect to the shadow weights.
pub fn backward(net: &Network, logits: &Array2<f64>, cache: &ForwardCache, labels: &[u8]) -> Result<Vec<LayerGrads>> {
    if cache.mode != Mode::Train {
        return Err(Error::Contract("backward needs a train-mode forward cache".into()));
    }
    if cache.layers.len() != net.layers.len() {
        return Err(Error::Contract("cache layer count differs from network".into()));
    }
    let n = logits.nrows();
    if labels.len() != n || cache.layers.iter().any(|c| c.y.nrows() != n) {
        return Err(Error::Contract("labels or cache rows differ from batch size".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&t| t as usize >= net.num_classes()) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }
    let mut grads = LayerGrads::zeros_like(net);
    let mut g_y = logits_grad(logits, labels);
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let c = &cache.layers[l];
        if c.wq.dim() != layer.w.dim() {
            return Err(Error::Contract(format!("cache for layer {l} does not match its weights")));
        }
        if let Some(a) = &layer.aspec {
            Zip::from(&mut g_y).and(&c.y).for_each(|g, &y| {
                if !a.ste_pass(y) {
                    *g = 0.0;
                }
            });
        }
        grads[l].gamma = (&g_y * &c.xhat).sum_axis(Axis(0));
        grads[l].beta = g_y.sum_axis(Axis(0));
        let g_xhat = &g_y * &layer.gamma;
        let mean_g = g_xhat.mean_axis(Axis(0)).unwrap();
        let mean_gx = (&g_xhat * &c.xhat).mean_axis(Axis(0)).unwrap();
        // sigma = s + eps with s = sqrt(var); d sigma / d x_j = (x_j - mu) / (N s)
        let corr = Zip::from(&c.sigma).and(&mean_gx).map_collect(|&sig, &m| {
            let s = sig - BN_EPS;
            if s > 0.0 {
                m * sig / s
            } else {
                0.0
            }
        });
        let mut g_x = &g_xhat - &mean_g - &(&c.xhat * &corr);
        g_x /= &c.sigma;
        grads[l].b = g_x.sum_axis(Axis(0));
        let mut g_w = c.input_codes.t().dot(&g_x);
        g_w.mapv_inplace(|v| v * c.input_lsb);
        let (lo, hi) = layer.wspec.clip_range();
        Zip::from(&mut g_w).and(&layer.w).for_each(|g, &w| {
            if w < lo || w > hi {
                *g = 0.0;
            }
        });
        grads[l].w = g_w;
        if l > 0 {
            g_y = g_x.dot(&c.wq.t());
        }
    }
    Ok(grads)
}

/// Previous update direction `ΔW_{k-1}` per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity(Vec<LayerGrads>);

impl Velocity {
    pub fn new(net: &Network) -> Self {
        Velocity(LayerGrads::zeros_like(net))
    }

    pub fn layers(&self) -> &[LayerGrads] {
        &self.0
    }
}

/// `W += (ΔW_k + m·ΔW_{k-1}) · lr · C` with `ΔW_k = -∂L/∂W`, then clip to the
/// weight clip range. Bias and batch-norm parameters take the same step
/// without `C`.
pub fn update(net: &mut Network, grads: &[LayerGrads], velocity: &mut Velocity, lr: f64, momentum: f64) -> Result<()> {
    if grads.len() != net.layers.len() || velocity.0.len() != net.layers.len() {
        return Err(Error::Shape("gradient/velocity layer count mismatch".into()));
    }
    fn step<D: ndarray::Dimension>(
        p: &mut ndarray::Array<f64, D>,
        g: &ndarray::Array<f64, D>,
        prev: &mut ndarray::Array<f64, D>,
        lr: f64,
        m: f64,
        coeff: Option<&ndarray::Array<f64, D>>,
    ) {
        match coeff {
            Some(c) => Zip::from(p).and(g).and(prev).and(c).for_each(|p, &g, v, &c| {
                let d = -g;
                *p += (d + m * *v) * lr * c;
                *v = d;
            }),
            None => Zip::from(p).and(g).and(prev).for_each(|p, &g, v| {
                let d = -g;
                *p += (d + m * *v) * lr;
                *v = d;
            }),
        }
    }
    for ((layer, g), v) in net.layers.iter_mut().zip(grads).zip(velocity.0.iter_mut()) {
        if g.w.dim() != layer.w.dim() || v.w.dim() != layer.w.dim() {
            return Err(Error::Shape("gradient shape differs from weights".into()));
        }
        let (w, coeff) = layer.weights_mut();
        step(w, &g.w, &mut v.w, lr, momentum, coeff);
        let (lo, hi) = layer.wspec.clip_range();
        layer.w.mapv_inplace(|w| w.clamp(lo, hi));
        step(&mut layer.b, &g.b, &mut v.b, lr, momentum, None);
        step(&mut layer.gamma, &g.gamma, &mut v.gamma, lr, momentum, None);
        step(&mut layer.beta, &g.beta, &mut v.beta, lr, momentum, None);
    }
    Ok(())
}

fn update_running_stats(net: &mut Network, cache: &ForwardCache, alpha: f64) {
    for (layer, c) in net.layers.iter_mut().zip(&cache.layers) {
        Zip::from(&mut layer.running_mean).and(&c.mean).for_each(|r, &m| *r = (1.0 - alpha) * *r + alpha * m);
        Zip::from(&mut layer.running_std).and(&c.sigma).for_each(|r, &s| *r = (1.0 - alpha) * *r + alpha * s);
    }
}

pub fn argmax(row: ndarray::ArrayView1<f64>) -> u8 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}

/// Inference-mode class predictions.
pub fn predict(net: &Network, data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(1000) {
        let (logits, _) = forward(net, &data.batch(chunk), Mode::Infer)?;
        out.extend(logits.rows().into_iter().map(argmax));
    }
    Ok(out)
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(net, data)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy of the folded, packed model, which is what the accelerator runs.
pub fn deployed_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let packed = crate::deploy::pack(net)?;
    let mut hits = 0;
    for start in (0..data.len()).step_by(1000) {
        let end = (start + 1000).min(data.len());
        let pred = crate::deploy::predict_folded(&packed, &data.pixel_matrix(start, end))?;
        hits += pred.iter().zip(&data.labels()[start..end]).filter(|(p, t)| p == t).count();
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Accuracy of the deployed (folded and packed) model.
    pub test_accuracy: f64,
    /// `W ⊙ (1 - C) = 0` held after every update of the epoch.
    pub blocks_zero: bool,
    pub weights_clipped: bool,
}

/// One training step on a mini-batch. Returns the batch loss and hit count.
pub fn train_step(net: &mut Network, velocity: &mut Velocity, batch: &Array2<f64>, labels: &[u8], lr: f64, cfg: &TrainConfig) -> Result<(f64, usize)> {
    let (logits, cache) = forward(net, batch, Mode::Train)?;
    let loss = cross_entropy(&logits, labels);
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &t)| argmax(r.view()) == t)
        .count();
    let grads = backward(net, &logits, &cache, labels)?;
    update(net, &grads, velocity, lr, cfg.momentum)?;
    update_running_stats(net, &cache, cfg.bn_momentum);
    Ok((loss, hits))
}

/// Shuffled mini-batch training; logs test accuracy after every epoch.
/// `on_epoch` sees the network after each epoch.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Network),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut velocity = Velocity::new(net);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        DetRng::new(derive_seed(cfg.seed, 1 << 32 | epoch as u64)).shuffle(&mut order);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        let mut blocks_zero = true;
        let mut clipped = true;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<u8> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let (loss, h) = train_step(net, &mut velocity, &train_set.batch(chunk), &labels, lr, cfg)?;
            loss_sum += loss * chunk.len() as f64;
            hits += h;
            seen += chunk.len();
            blocks_zero &= net.layers.iter().all(|l| l.blocks_zero());
            clipped &= net.layers.iter().all(|l| l.within_clip());
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            test_accuracy: deployed_accuracy(net, test_set)?,
            blocks_zero,
            weights_clipped: clipped,
        };
        log::info!(
            "epoch {:>3} lr {:.2e} loss {:.4} train {:.4} test {:.4}",
            entry.epoch,
            entry.lr,
            entry.train_loss,
            entry.train_accuracy,
            entry.test_accuracy
        );
        on_epoch(&entry, net);
        logs.push(entry);
    }
    Ok(logs)
}
