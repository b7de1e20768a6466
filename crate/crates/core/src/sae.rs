//! BatchTopK sparse autoencoders.
//!
//! Encoding is `z = topk_batch(relu(W_enc (x - b_dec) + b_enc))`, where the top
//! `n * k` activations are kept across the whole batch of `n` rows. Decoding is
//! `W_dec z + b_dec` with unit-norm dictionary rows. At inference time a feature is
//! active when its ReLU pre-activation exceeds the learned threshold `theta`.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{AdamConfig, AdamState, Matrix};
use crate::rng::{Seeds, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    /// Dictionary size `D`.
    pub dict_size: usize,
    /// Target average number of active features per row.
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Re-initialise features that were never selected for this many epochs; 0 disables.
    pub resample_after: usize,
    pub threshold: ThresholdRule,
    /// Fraction of the final training batches whose minima feed the threshold.
    pub threshold_tail: f64,
    /// Standardize every input row by its own mean and deviation before encoding.
    pub unit_norm: bool,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            dict_size: 256,
            k: 4,
            lr: 3e-4,
            epochs: 300,
            batch_size: 256,
            seed: 0,
            resample_after: 5,
            threshold: ThresholdRule::Ema { decay: 0.99 },
            threshold_tail: 0.1,
            unit_norm: true,
        }
    }
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k must be positive"));
        }
        if self.dict_size < self.k {
            return Err(Error::param(format!(
                "dictionary size {} below k = {}",
                self.dict_size, self.k
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::param("batch_size, epochs and lr must be positive"));
        }
        if !(self.threshold_tail > 0.0 && self.threshold_tail <= 1.0) {
            return Err(Error::param("threshold_tail must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// How the per-batch minimum kept activations are folded into `theta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `theta <- decay * theta + (1 - decay) * v`, seeded with the first value.
    Ema { decay: f64 },
    /// Arithmetic mean.
    Mean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeStats {
    /// Mean per-element squared reconstruction error per epoch (training mode).
    pub mse_history: Vec<f64>,
    pub final_mse: f64,
    /// Features never selected during the last epoch.
    pub dead_features: usize,
    pub resampled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeModel {
    /// `m x D`
    pub w_enc: Matrix,
    /// `1 x D`
    pub b_enc: Matrix,
    /// `D x m`, unit-norm rows.
    pub w_dec: Matrix,
    /// `1 x m`
    pub b_dec: Matrix,
    pub theta: f64,
    pub config: SaeConfig,
    pub stats: SaeStats,
}

/// Keeps the largest `min(n * k, #nonzero)` entries across the batch; ties go to the
/// lowest `(row, column)`.
pub fn batch_topk_select(pre_acts: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::param("k must be positive"));
    }
    let mut out = Matrix::zeros(pre_acts.rows(), pre_acts.cols());
    for i in topk_indices(pre_acts.data(), pre_acts.rows() * k) {
        out.data_mut()[i] = pre_acts.data()[i];
    }
    Ok(out)
}

/// Flat indices of the kept entries, in ascending index order.
fn topk_indices(values: &[f64], budget: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    let by_rank = |a: &usize, b: &usize| -> Ordering {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if idx.len() > budget {
        if budget == 0 {
            idx.clear();
        } else {
            idx.select_nth_unstable_by(budget - 1, by_rank);
            idx.truncate(budget);
        }
    }
    idx.sort_unstable();
    idx
}

/// Folds a trace of per-batch minimum kept activations into a threshold.
pub fn estimate_threshold(trace: &[f64], rule: ThresholdRule) -> Result<f64> {
    let (&first, rest) = trace
        .split_first()
        .ok_or_else(|| Error::Estimation("empty activation trace".into()))?;
    Ok(match rule {
        ThresholdRule::Ema { decay } => rest.iter().fold(first, |t, &v| decay * t + (1.0 - decay) * v),
        ThresholdRule::Mean => trace.iter().sum::<f64>() / trace.len() as f64,
    })
}

impl SaeModel {
    pub fn dict_size(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn width(&self) -> usize {
        self.w_enc.rows()
    }

    /// `relu(W_enc (x - b_dec) + b_enc)`, after standardizing `x` when the config asks.
    pub fn encode_relu(&self, x: &[f64]) -> Vec<f64> {
        if self.config.unit_norm {
            encode_into(&self.w_enc, &self.b_enc, &self.b_dec, &standardize(x))
        } else {
            encode_into(&self.w_enc, &self.b_enc, &self.b_dec, x)
        }
    }

    /// Reconstruction from a dense code, in the (possibly standardized) input space.
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.b_dec.data().to_vec();
        for (f, &a) in z.iter().enumerate() {
            if a != 0.0 {
                for (o, d) in out.iter_mut().zip(self.w_dec.row(f)) {
                    *o += a * d;
                }
            }
        }
        out
    }

    /// Inference-mode code: pre-activations above `theta`, others zeroed.
    pub fn encode_thresholded(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.encode_relu(x);
        for v in &mut z {
            if *v <= self.theta {
                *v = 0.0;
            }
        }
        z
    }
}

/// Feature ids whose activation exceeds `theta`, with their activations.
pub fn active_features(model: &SaeModel, embedding: &[f64]) -> Vec<(usize, f64)> {
    model
        .encode_relu(embedding)
        .into_iter()
        .enumerate()
        .filter(|&(_, a)| a > model.theta)
        .collect()
}

/// Centres a vector on its own mean and divides by its sample standard deviation
/// (plus 1e-5), as the BatchTopK reference does with `input_unit_norm`.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sd = var.sqrt() + 1e-5;
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn encode_into(w_enc: &Matrix, b_enc: &Matrix, b_dec: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut z = b_enc.data().to_vec();
    for (r, (&xv, &bd)) in x.iter().zip(b_dec.data()).enumerate() {
        let c = xv - bd;
        if c == 0.0 {
            continue;
        }
        for (o, w) in z.iter_mut().zip(w_enc.row(r)) {
            *o += c * w;
        }
    }
    for v in &mut z {
        *v = v.max(0.0);
    }
    z
}

/// Loss and gradients for one batch under a kept set; `mask` fixes the kept flat
/// indices (straight-through), otherwise they are selected from the batch.
pub(crate) struct BatchPass {
    pub loss: f64,
    pub kept: Vec<usize>,
    pub min_kept: Option<f64>,
    pub grads: [Matrix; 4],
}

pub(crate) fn batch_pass(
    params: [&Matrix; 4],
    rows: &[&[f64]],
    k: usize,
    mask: Option<&[usize]>,
) -> BatchPass {
    let [w_enc, b_enc, w_dec, b_dec] = params;
    let (m, d) = w_enc.shape();
    let n = rows.len();
    let mut pre = Vec::with_capacity(n * d);
    for x in rows {
        pre.extend(encode_into(w_enc, b_enc, b_dec, x));
    }
    let kept = match mask {
        Some(mk) => mk.to_vec(),
        None => topk_indices(&pre, n * k),
    };
    let min_kept = kept
        .iter()
        .map(|&i| pre[i])
        .filter(|&v| v > 0.0)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
    let mut recon: Vec<Vec<f64>> = (0..n).map(|_| b_dec.data().to_vec()).collect();
    for &i in &kept {
        let (r, f) = (i / d, i % d);
        let a = pre[i];
        for (o, w) in recon[r].iter_mut().zip(w_dec.row(f)) {
            *o += a * w;
        }
    }
    let scale = 1.0 / (n * m) as f64;
    let mut loss = 0.0;
    let mut dx_hat: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (x, xh) in rows.iter().zip(&recon) {
        let mut g = Vec::with_capacity(m);
        for (&a, &b) in xh.iter().zip(x.iter()) {
            let e = a - b;
            loss += e * e;
            g.push(2.0 * scale * e);
        }
        dx_hat.push(g);
    }
    loss *= scale;
    let mut g_wenc = Matrix::zeros(m, d);
    let mut g_benc = Matrix::zeros(1, d);
    let mut g_wdec = Matrix::zeros(d, m);
    let mut g_bdec = Matrix::zeros(1, m);
    for g in &dx_hat {
        g_bdec.add_scaled(&Matrix::from_vec(1, m, g.clone()).expect("finite"), 1.0);
    }
    for &i in &kept {
        let (r, f) = (i / d, i % d);
        let a = pre[i];
        let g = &dx_hat[r];
        for (gw, &gv) in g_wdec.row_mut(f).iter_mut().zip(g) {
            *gw += a * gv;
        }
        // straight-through: a kept entry passes gradient even if its relu is zero
        let dpre: f64 = if a > 0.0 || mask.is_some() {
            g.iter().zip(w_dec.row(f)).map(|(x, y)| x * y).sum()
        } else {
            0.0
        };
        if dpre == 0.0 {
            continue;
        }
        g_benc.data_mut()[f] += dpre;
        for (c, (&xv, &bd)) in rows[r].iter().zip(b_dec.data()).enumerate() {
            let centred = xv - bd;
            let cur = g_wenc.get(c, f);
            g_wenc.set(c, f, cur + centred * dpre);
            g_bdec.data_mut()[c] -= w_enc.get(c, f) * dpre;
        }
    }
    BatchPass {
        loss,
        kept,
        min_kept,
        grads: [g_wenc, g_benc, g_wdec, g_bdec],
    }
}

/// Reconstruction loss of one batch and its gradient for `[w_enc, b_enc, w_dec, b_dec]`.
/// With `mask`, the kept flat indices are fixed instead of selected from the batch.
/// Also returns the kept indices.
pub fn sae_loss_and_gradient(
    model: &SaeModel,
    rows: &[&[f64]],
    k: usize,
    mask: Option<&[usize]>,
) -> (f64, Vec<usize>, [Matrix; 4]) {
    let pass = batch_pass([&model.w_enc, &model.b_enc, &model.w_dec, &model.b_dec], rows, k, mask);
    (pass.loss, pass.kept, pass.grads)
}

fn normalize_rows(w: &mut Matrix) {
    for r in 0..w.rows() {
        let row = w.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Trains a BatchTopK SAE on the rows of `embeddings`.
pub fn sae_train(embeddings: &Matrix, config: &SaeConfig) -> Result<SaeModel> {
    config.validate()?;
    let (n, m) = embeddings.shape();
    if n < config.batch_size {
        return Err(Error::param(format!(
            "{n} rows but batch size {}",
            config.batch_size
        )));
    }
    if !embeddings.is_finite() {
        return Err(Error::Numeric("SAE training data".into()));
    }
    let prepared;
    let embeddings = if config.unit_norm {
        let rows: Vec<Vec<f64>> = (0..n).map(|r| standardize(embeddings.row(r))).collect();
        prepared = Matrix::from_rows(&rows)?;
        &prepared
    } else {
        embeddings
    };
    let d = config.dict_size;
    let seeds = Seeds::new(config.seed);
    let mut init_rng = seeds.stream(Stream::Sae, 0);
    let mut w_dec = Matrix::zeros(d, m);
    for v in w_dec.data_mut() {
        *v = init_rng.random_range(-1.0..1.0);
    }
    normalize_rows(&mut w_dec);
    let mut w_enc = w_dec.transpose();
    let mut b_enc = Matrix::zeros(1, d);
    let mut b_dec = Matrix::zeros(1, m);
    for r in 0..n {
        for (b, v) in b_dec.data_mut().iter_mut().zip(embeddings.row(r)) {
            *b += v / n as f64;
        }
    }
    let shapes = vec![w_enc.clone(), b_enc.clone(), w_dec.clone(), b_dec.clone()];
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &shapes);
    let mut shuffle_rng = seeds.stream(Stream::Shuffle, 0);
    let mut resample_rng = seeds.stream(Stream::Resample, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_batches = batches_per_epoch * config.epochs;
    let tail = ((total_batches as f64 * config.threshold_tail).ceil() as usize).max(1);
    let mut trace = Vec::with_capacity(tail);
    let mut idle_epochs = vec![0usize; d];
    let mut stats = SaeStats::default();
    let mut batch_no = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut fired = vec![false; d];
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&r| embeddings.row(r)).collect();
            let pass = batch_pass([&w_enc, &b_enc, &w_dec, &b_dec], &rows, config.k, None);
            epoch_loss += pass.loss * rows.len() as f64;
            for &i in &pass.kept {
                fired[i % d] = true;
            }
            if batch_no + tail >= total_batches {
                if let Some(v) = pass.min_kept {
                    trace.push(v);
                }
            }
            batch_no += 1;
            let grads: Vec<&Matrix> = pass.grads.iter().collect();
            adam.update(&mut [&mut w_enc, &mut b_enc, &mut w_dec, &mut b_dec], &grads)?;
            normalize_rows(&mut w_dec);
        }
        stats.mse_history.push(epoch_loss / n as f64);
        for (f, idle) in idle_epochs.iter_mut().enumerate() {
            *idle = if fired[f] { 0 } else { *idle + 1 };
        }
        stats.dead_features = fired.iter().filter(|f| !**f).count();
        let last_epoch = epoch + 1 == config.epochs;
        if config.resample_after > 0 && !last_epoch {
            let dead: Vec<usize> = (0..d).filter(|&f| idle_epochs[f] >= config.resample_after).collect();
            if !dead.is_empty() {
                let model = SaeModel {
                    w_enc: w_enc.clone(),
                    b_enc: b_enc.clone(),
                    w_dec: w_dec.clone(),
                    b_dec: b_dec.clone(),
                    theta: 0.0,
                    config: config.clone(),
                    stats: SaeStats::default(),
                };
                let residuals = batched_residuals(&model, embeddings, config.batch_size);
                let enc_norm = live_encoder_norm(&w_enc, &dead);
                for &f in &dead {
                    resample_feature(&mut w_enc, &mut b_enc, &mut w_dec, f, enc_norm, &residuals, &mut resample_rng);
                    let col: Vec<(usize, usize)> = (0..m).map(|c| (c, f)).collect();
                    let row: Vec<(usize, usize)> = (0..m).map(|c| (f, c)).collect();
                    adam.reset_entries(0, &col);
                    adam.reset_entries(1, &[(0, f)]);
                    adam.reset_entries(2, &row);
                    idle_epochs[f] = 0;
                }
                stats.resampled += dead.len();
            }
        }
    }
    let theta = estimate_threshold(&trace, config.threshold)?.max(0.0);
    let mut model = SaeModel {
        w_enc,
        b_enc,
        w_dec,
        b_dec,
        theta,
        config: config.clone(),
        stats,
    };
    model.stats.final_mse = *model.stats.mse_history.last().expect("at least one epoch");
    Ok(model)
}

/// Residuals `x - x_hat` under batch selection, in row order.
fn batched_residuals(model: &SaeModel, data: &Matrix, batch: usize) -> Vec<Vec<f64>> {
    let n = data.rows();
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch) {
        let pre: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&r| encode_into(&model.w_enc, &model.b_enc, &model.b_dec, data.row(r)))
            .collect();
        let flat: Vec<f64> = pre.concat();
        let kept = topk_indices(&flat, chunk.len() * model.config.k);
        let d = model.dict_size();
        let mut codes = vec![vec![0.0; d]; chunk.len()];
        for i in kept {
            codes[i / d][i % d] = flat[i];
        }
        for (c, &r) in codes.iter().zip(chunk) {
            let xh = model.decode(c);
            out.push(data.row(r).iter().zip(&xh).map(|(a, b)| a - b).collect());
        }
    }
    out
}

/// Points a dead feature at a residual drawn with probability proportional to its
/// squared norm. The encoder column gets a fifth of the mean live encoder norm, so the
/// new feature does not crowd out live ones while it settles.
fn resample_feature(
    w_enc: &mut Matrix,
    b_enc: &mut Matrix,
    w_dec: &mut Matrix,
    f: usize,
    enc_norm: f64,
    residuals: &[Vec<f64>],
    rng: &mut crate::rng::Rng,
) {
    let weights: Vec<f64> = residuals.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let total: f64 = weights.iter().sum();
    let pick = if total > 0.0 {
        let mut u = rng.random::<f64>() * total;
        let mut chosen = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                chosen = i;
                break;
            }
            u -= w;
        }
        residuals[chosen].clone()
    } else {
        (0..w_dec.cols()).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let norm = pick.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for (c, v) in pick.iter().enumerate() {
        w_dec.set(f, c, v / norm);
        w_enc.set(c, f, 0.2 * enc_norm * v / norm);
    }
    b_enc.data_mut()[f] = 0.0;
}

/// Mean encoder column norm over the features not in `dead`.
fn live_encoder_norm(w_enc: &Matrix, dead: &[usize]) -> f64 {
    let (m, d) = w_enc.shape();
    let live: Vec<usize> = (0..d).filter(|f| !dead.contains(f)).collect();
    if live.is_empty() {
        return 1.0;
    }
    live.iter()
        .map(|&f| (0..m).map(|c| w_enc.get(c, f).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / live.len() as f64
}
