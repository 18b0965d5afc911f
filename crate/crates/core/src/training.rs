//! Client-side local updates.
//!
//! Clean clients (and everyone during warm-up) run minibatch SGD on
//! logit-adjusted cross entropy. Detected noisy clients additionally carry
//! per-sample label logits `ỹ` that are trained jointly with the model under
//! the triplet loss `L_c + α·L_comp + β·L_e`, then fused with the model's
//! prediction at the end of each local update.

use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{backward_accumulate, forward, predict_logits, sgd_step, ModelParams, OptimizerState};
use crate::numerics::{clamped_ln, cross_entropy_unchecked, entropy, softmax, softmax_into, ProbVector, SeedSpec};

/// Label-logit scale used to initialize `ỹ = K·ŷ`.
pub const DEFAULT_K: f64 = 10.0;

/// Per-sample learnable label logits for one client, aligned with the
/// client's index list.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelState {
    pub logits: Vec<Vec<f64>>,
    pub k: f64,
}

impl LabelState {
    /// `ỹ = K·one_hot(observed_label)` for every local sample.
    pub fn init(ds: &Dataset, indices: &[usize], k: f64) -> Self {
        let m = ds.class_count;
        let logits = indices
            .iter()
            .map(|&i| {
                let mut v = vec![0.0; m];
                v[ds.samples[i].observed_label] = k;
                v
            })
            .collect();
        Self { logits, k }
    }

    /// Current soft labels `softmax(ỹ)`.
    pub fn estimates(&self) -> Vec<ProbVector> {
        self.logits
            .iter()
            .map(|l| softmax(l).expect("label logits stay finite"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub prior: ProbVector,
    /// Present only for noisy clients once correction has started.
    pub label_state: Option<LabelState>,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, prior: ProbVector) -> Self {
        Self {
            id,
            indices,
            prior,
            label_state: None,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }
}

/// Model-side SGD settings for one local update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// How a sample's `ỹ` gradient is scaled before the `η` step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStep {
    /// Gradient of the minibatch-mean loss, i.e. the per-sample gradient
    /// divided by the batch size. This is the scale `η = 1000` was tuned for.
    BatchMean,
    /// Raw per-sample gradient. At `η = 1000` the compatibility term throws
    /// saturated logits back and forth and labels stay put.
    PerSample,
}

impl FromStr for LabelStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_mean" => Ok(Self::BatchMean),
            "per_sample" => Ok(Self::PerSample),
            other => Err(invalid(format!("unknown label step `{other}` (expected batch_mean or per_sample)"))),
        }
    }
}

/// Label-correction settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correction {
    /// Step size for `ỹ`.
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    pub label_step: LabelStep,
}

impl Default for Correction {
    fn default() -> Self {
        Self {
            eta: 1000.0,
            alpha: 0.2,
            beta: 0.5,
            k: DEFAULT_K,
            label_step: LabelStep::BatchMean,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub mean_loss: f64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct CorrectionOutcome {
    pub params: ModelParams,
    /// `softmax(ỹ)` after fusion, one per local sample.
    pub estimates: Vec<ProbVector>,
    pub mean_loss: f64,
    /// Largest `|∂L/∂ỹ|` coordinate seen, for tuning `η`.
    pub max_label_grad: f64,
    pub elapsed: Duration,
}

/// The three correction terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub compatibility: f64,
    pub entropy: f64,
    pub total: f64,
}

fn check_lengths(p: &[f64], observed: &[f64], label_logits: &[f64]) -> Result<()> {
    if p.len() != observed.len() || p.len() != label_logits.len() || p.is_empty() {
        return Err(invalid(format!(
            "correction inputs disagree in length: p={}, ŷ={}, ỹ={}",
            p.len(),
            observed.len(),
            label_logits.len()
        )));
    }
    Ok(())
}

/// `L_c = CE(p, softmax(ỹ))`, `L_comp = −Σ ŷ_m ln softmax(ỹ)_m`,
/// `L_e = H(p)`, `total = L_c + α·L_comp + β·L_e`.
pub fn correction_loss(p: &[f64], observed: &[f64], label_logits: &[f64], alpha: f64, beta: f64) -> Result<LossBreakdown> {
    check_lengths(p, observed, label_logits)?;
    let soft = softmax(label_logits)?;
    Ok(breakdown(p, observed, &soft, alpha, beta))
}

fn breakdown(p: &[f64], observed: &[f64], soft: &[f64], alpha: f64, beta: f64) -> LossBreakdown {
    let classification = cross_entropy_unchecked(p, soft);
    let compatibility = cross_entropy_unchecked(soft, observed);
    let entropy = entropy(p);
    LossBreakdown {
        classification,
        compatibility,
        entropy,
        total: classification + alpha * compatibility + beta * entropy,
    }
}

/// `∂(L_c + α·L_comp)/∂ỹ`.
///
/// With `y = softmax(ỹ)` and `c_m = −ln p_m`:
/// `∂L_c/∂ỹ_j = y_j (c_j − Σ_m y_m c_m)` and `∂L_comp/∂ỹ_j = y_j − ŷ_j`.
pub fn grad_label_logits(p: &[f64], observed: &[f64], label_logits: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_lengths(p, observed, label_logits)?;
    let soft = softmax(label_logits)?;
    Ok(label_grad(p, observed, &soft, alpha))
}

fn label_grad(p: &[f64], observed: &[f64], soft: &[f64], alpha: f64) -> Vec<f64> {
    let costs: Vec<f64> = p.iter().map(|pm| -clamped_ln(*pm)).collect();
    let lc: f64 = soft.iter().zip(&costs).map(|(y, c)| y * c).sum();
    soft.iter()
        .zip(&costs)
        .zip(observed)
        .map(|((y, c), yh)| y * (c - lc) + alpha * (y - yh))
        .collect()
}

/// `∂(L_c + β·L_e)/∂z` for model logits `z` with `p = softmax(z)`:
/// `p − y^d − β·p ⊙ (ln p + H(p))`.
pub fn triplet_logit_grad(p: &[f64], soft_label: &[f64], beta: f64) -> Vec<f64> {
    let h = entropy(p);
    p.iter()
        .zip(soft_label)
        .map(|(pm, ym)| pm - ym - beta * pm * (clamped_ln(*pm) + h))
        .collect()
}

/// End-of-update fusion: `ỹ ← K·(P_model + softmax(ỹ))/2`, returning the new
/// logits and `softmax` of them.
pub fn fuse_label(p_model: &[f64], label_logits: &[f64], k: f64) -> Result<(Vec<f64>, ProbVector)> {
    if p_model.len() != label_logits.len() {
        return Err(invalid("fusion inputs disagree in length"));
    }
    let soft = softmax(label_logits)?;
    let fused: Vec<f64> = p_model.iter().zip(soft.iter()).map(|(a, b)| k * (a + b) / 2.0).collect();
    let estimate = softmax(&fused)?;
    Ok((fused, estimate))
}

fn one_hot(m: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[class] = 1.0;
    v
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}

/// Minibatch SGD on (optionally logit-adjusted) hard-label cross entropy.
pub fn local_update_vanilla(
    client: &ClientState,
    ds: &Dataset,
    global: &ModelParams,
    hyper: &LocalTraining,
    use_logit_adjust: bool,
    seed: SeedSpec,
) -> Result<LocalOutcome> {
    if client.indices.is_empty() {
        return Err(invalid(format!("client {} has no samples", client.id)));
    }
    let start = Instant::now();
    let m = ds.class_count;
    let log_prior: Vec<f64> = if use_logit_adjust {
        if client.prior.iter().any(|p| !(*p > 0.0)) {
            return Err(invalid(format!(
                "client {} prior has a zero entry; smooth it before logit adjustment",
                client.id
            )));
        }
        client.prior.iter().map(|p| p.ln()).collect()
    } else {
        vec![0.0; m]
    };

    let mut params = global.clone();
    let mut opt = OptimizerState::new(&params, hyper.learning_rate, hyper.momentum, hyper.weight_decay);
    let mut rng = seed.rng();
    let mut order: Vec<usize> = (0..client.indices.len()).collect();
    let mut grad = ModelParams::zeros_like(&params);
    let mut probs = vec![0.0; m];
    let mut loss_sum = 0.0;
    let mut batch_count = 0usize;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in batches(&order, hyper.batch_size).enumerate() {
            grad.as_mut_slice().fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &local in batch {
                let sample = &ds.samples[client.indices[local]];
                let (mut logits, cache) = forward(&params, &sample.features)?;
                for (z, lp) in logits.iter_mut().zip(&log_prior) {
                    *z += lp;
                }
                softmax_into(&logits, &mut probs);
                batch_loss -= clamped_ln(probs[sample.observed_label]);
                probs[sample.observed_label] -= 1.0;
                backward_accumulate(&params, &cache, &probs, scale, &mut grad)?;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at client {}, epoch {epoch}, batch {b}",
                    client.id
                )));
            }
            sgd_step(&mut params, &grad, &mut opt).map_err(|_| {
                Error::Divergence(format!(
                    "non-finite gradient at client {}, epoch {epoch}, batch {b}",
                    client.id
                ))
            })?;
            loss_sum += batch_loss;
            batch_count += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence(format!("client {} produced non-finite parameters", client.id)));
    }
    Ok(LocalOutcome {
        params,
        mean_loss: if batch_count == 0 { 0.0 } else { loss_sum / batch_count as f64 },
        elapsed: start.elapsed(),
    })
}

/// Joint model and label-logit training for a detected noisy client.
///
/// Initializes `client.label_state` on first use; the state persists across
/// rounds and is overwritten with the fused logits on return.
pub fn local_update_correct(
    client: &mut ClientState,
    ds: &Dataset,
    global: &ModelParams,
    hyper: &LocalTraining,
    corr: &Correction,
    seed: SeedSpec,
) -> Result<CorrectionOutcome> {
    if client.indices.is_empty() {
        return Err(invalid(format!("client {} has no samples", client.id)));
    }
    let start = Instant::now();
    let m = ds.class_count;
    let mut labels = client
        .label_state
        .take()
        .unwrap_or_else(|| LabelState::init(ds, &client.indices, corr.k));
    if labels.logits.len() != client.indices.len() {
        return Err(Error::Contract(format!(
            "client {} label state covers {} samples, client holds {}",
            client.id,
            labels.logits.len(),
            client.indices.len()
        )));
    }

    let mut params = global.clone();
    let mut opt = OptimizerState::new(&params, hyper.learning_rate, hyper.momentum, hyper.weight_decay);
    let mut rng = seed.rng();
    let mut order: Vec<usize> = (0..client.indices.len()).collect();
    let mut grad = ModelParams::zeros_like(&params);
    let mut probs = vec![0.0; m];
    let mut soft = vec![0.0; m];
    let mut loss_sum = 0.0;
    let mut batch_count = 0usize;
    let mut max_label_grad = 0.0f64;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in batches(&order, hyper.batch_size).enumerate() {
            grad.as_mut_slice().fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            let label_rate = match corr.label_step {
                LabelStep::BatchMean => corr.eta * scale,
                LabelStep::PerSample => corr.eta,
            };
            let mut batch_loss = 0.0;
            for &local in batch {
                let sample = &ds.samples[client.indices[local]];
                let observed = one_hot(m, sample.observed_label);
                let (logits, cache) = forward(&params, &sample.features)?;
                softmax_into(&logits, &mut probs);
                let y_tilde = &mut labels.logits[local];
                softmax_into(y_tilde, &mut soft);

                batch_loss += breakdown(&probs, &observed, &soft, corr.alpha, corr.beta).total;
                let dlogits = triplet_logit_grad(&probs, &soft, corr.beta);
                backward_accumulate(&params, &cache, &dlogits, scale, &mut grad)?;

                let g = label_grad(&probs, &observed, &soft, corr.alpha);
                for (y, gj) in y_tilde.iter_mut().zip(&g) {
                    max_label_grad = max_label_grad.max(gj.abs());
                    *y -= label_rate * gj;
                }
                if y_tilde.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "label logits became non-finite at client {}, epoch {epoch}; reduce η (currently {})",
                        client.id, corr.eta
                    )));
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite correction loss at client {}, epoch {epoch}, batch {b}",
                    client.id
                )));
            }
            sgd_step(&mut params, &grad, &mut opt).map_err(|_| {
                Error::Divergence(format!(
                    "non-finite gradient at client {}, epoch {epoch}, batch {b}",
                    client.id
                ))
            })?;
            loss_sum += batch_loss;
            batch_count += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence(format!("client {} produced non-finite parameters", client.id)));
    }

    let mut estimates = Vec::with_capacity(client.indices.len());
    for (local, &idx) in client.indices.iter().enumerate() {
        let logits = predict_logits(&params, &ds.samples[idx].features)?;
        let p_model = softmax(&logits)?;
        let (fused, estimate) = fuse_label(&p_model, &labels.logits[local], labels.k)?;
        labels.logits[local] = fused;
        estimates.push(estimate);
    }
    client.label_state = Some(labels);

    Ok(CorrectionOutcome {
        params,
        estimates,
        mean_loss: if batch_count == 0 { 0.0 } else { loss_sum / batch_count as f64 },
        max_label_grad,
        elapsed: start.elapsed(),
    })
}

/// Per-class mean losses of one client under a fixed model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassLosses {
    pub values: Vec<f64>,
    /// Classes absent from the client, filled with the mean of present ones.
    pub missing: Vec<usize>,
}

/// Mean (optionally logit-adjusted) cross entropy per observed class.
pub fn per_class_loss(client: &ClientState, ds: &Dataset, global: &ModelParams, use_logit_adjust: bool) -> Result<ClassLosses> {
    let m = ds.class_count;
    if client.indices.is_empty() {
        return Err(invalid(format!("client {} has no samples", client.id)));
    }
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    let mut probs = vec![0.0; m];
    for &i in &client.indices {
        let sample = &ds.samples[i];
        let mut logits = predict_logits(global, &sample.features)?;
        if use_logit_adjust {
            for (z, p) in logits.iter_mut().zip(client.prior.iter()) {
                *z += clamped_ln(*p);
            }
        }
        softmax_into(&logits, &mut probs);
        sums[sample.observed_label] -= clamped_ln(probs[sample.observed_label]);
        counts[sample.observed_label] += 1;
    }
    let mut values = vec![0.0; m];
    let mut missing = Vec::new();
    let mut present_total = 0.0;
    let mut present = 0usize;
    for c in 0..m {
        if counts[c] == 0 {
            missing.push(c);
        } else {
            values[c] = sums[c] / counts[c] as f64;
            present_total += values[c];
            present += 1;
        }
    }
    let fill = present_total / present as f64;
    for &c in &missing {
        values[c] = fill;
    }
    Ok(ClassLosses { values, missing })
}
