//! The federated round loop.
//!
//! Rounds `1..=T_w` train every selected client with the vanilla objective
//! and combine them with the warm-up aggregator (FedAvg by default). After
//! round `T_w` all `N` clients report per-class losses under the current
//! global model and the GMM splits them into clean and noisy groups. The
//! remaining rounds run label correction on selected noisy clients and
//! aggregate with the configured rule.

use std::path::PathBuf;
use std::time::Duration;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{aggregate, AggregationInput, Aggregator, ClientUpdate, RobustSettings};
use crate::data::{class_prior, dirichlet_partition, gen_blobs, load_csv, Dataset, Partition, DEFAULT_PRIOR_SMOOTHING};
use crate::detection::{detect, Detection, GmmOptions};
use crate::error::{config, Error, Result};
use crate::metrics::{classification_metrics, correction_accuracy, ClassificationMetrics, ConfusionMatrix};
use crate::model::{init_params, predict_logits, ArchSpec, ModelParams};
use crate::noise::{apply_noise, NoisePlan, NoiseScenario};
use crate::numerics::{argmax, Purpose, SeedSpec};
use crate::training::{local_update_correct, local_update_vanilla, per_class_loss, ClassLosses, ClientState, Correction, LocalTraining};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs {
        classes: usize,
        feature_dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
        noise_std: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

impl DatasetSource {
    /// Desk-scale blob benchmark: 10 classes in 32 dimensions, 600 train and
    /// 100 test samples per class, centers 6σ apart.
    pub fn benchmark_blobs() -> Self {
        DatasetSource::Blobs {
            classes: 10,
            feature_dim: 32,
            train_per_class: 600,
            test_per_class: 100,
            separation: 6.0,
            noise_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub warmup_rounds: usize,
    pub local: LocalTraining,
    pub correction: Correction,
    pub gamma: f64,
    pub min_size: usize,
    pub prior_smoothing: f64,
    pub noise: NoiseScenario,
    pub noise_max: f64,
    pub aggregator: Aggregator,
    pub warmup_aggregator: Aggregator,
    pub robust: RobustSettings,
    pub use_correction: bool,
    pub logit_adjust: bool,
    /// Logit-adjust the per-class losses used for detection. Off by default:
    /// the prior term inflates rare-class losses on non-IID clients and
    /// drowns the noise signal.
    pub detection_logit_adjust: bool,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub dataset: Option<DatasetSource>,
    pub gmm: GmmOptions,
    /// Planned rate at or above which a client counts as truly noisy when
    /// scoring detection; `None` means `0.5·noise_max`.
    pub detection_threshold: Option<f64>,
    pub workers: usize,
    pub dump_correction: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_clients: 100,
            clients_per_round: 10,
            rounds: 120,
            warmup_rounds: 20,
            local: LocalTraining::default(),
            correction: Correction::default(),
            gamma: 1.0,
            min_size: 64,
            prior_smoothing: DEFAULT_PRIOR_SMOOTHING,
            noise: NoiseScenario::Symmetric,
            noise_max: 0.4,
            aggregator: Aggregator::Da,
            warmup_aggregator: Aggregator::FedAvg,
            robust: RobustSettings::default(),
            use_correction: true,
            logit_adjust: true,
            detection_logit_adjust: false,
            seed: 1,
            hidden: vec![64],
            dataset: None,
            gmm: GmmOptions::default(),
            detection_threshold: None,
            workers: 1,
            dump_correction: true,
        }
    }
}

impl ExperimentConfig {
    /// Small benchmark: blobs, 20 clients, 10 per round, 60 rounds, 15 warm-up.
    pub fn benchmark() -> Self {
        Self {
            n_clients: 20,
            clients_per_round: 10,
            rounds: 60,
            warmup_rounds: 15,
            dataset: Some(DatasetSource::benchmark_blobs()),
            ..Self::default()
        }
    }

    pub fn detection_threshold(&self) -> f64 {
        self.detection_threshold.unwrap_or(0.5 * self.noise_max)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(config(m));
        if self.n_clients == 0 {
            return fail("n_clients must be ≥ 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return fail(format!(
                "clients_per_round={} must lie in [1, n_clients={}]",
                self.clients_per_round, self.n_clients
            ));
        }
        if self.warmup_rounds > self.rounds {
            return fail(format!(
                "t_w={} exceeds t={}; the warm-up cannot outlast the run",
                self.warmup_rounds, self.rounds
            ));
        }
        if self.local.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        for (name, v) in [
            ("lr", self.local.learning_rate),
            ("weight_decay", self.local.weight_decay),
            ("eta", self.correction.eta),
            ("alpha", self.correction.alpha),
            ("beta", self.correction.beta),
            ("prior_smoothing", self.prior_smoothing),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name}={v} must be finite and ≥ 0"));
            }
        }
        if !(0.0..1.0).contains(&self.local.momentum) {
            return fail(format!("momentum={} must lie in [0, 1)", self.local.momentum));
        }
        if !(self.correction.k > 0.0) || !self.correction.k.is_finite() {
            return fail(format!("k={} must be positive", self.correction.k));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return fail(format!("gamma={} must be positive", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.noise_max) {
            return fail(format!("noise_max={} must lie in [0, 1]", self.noise_max));
        }
        if (self.logit_adjust || self.detection_logit_adjust) && self.prior_smoothing == 0.0 {
            return fail("logit_adjust needs prior_smoothing > 0".into());
        }
        if !(0.0..1.0).contains(&self.robust.krum_kappa) {
            return fail(format!("krum_kappa={} must lie in [0, 1)", self.robust.krum_kappa));
        }
        if self.hidden.contains(&0) {
            return fail("hidden layer widths must be ≥ 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be ≥ 1".into());
        }
        if self.gmm.max_iter == 0 || !(self.gmm.var_floor > 0.0) || !(self.gmm.tol >= 0.0) || !(self.gmm.min_gap >= 0.0) {
            return fail("gmm_max_iter ≥ 1, gmm_var_floor > 0, gmm_tol ≥ 0 and gmm_min_gap ≥ 0 required".into());
        }
        if let Some(t) = self.detection_threshold {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("detection_threshold={t} must lie in [0, 1]"));
            }
        }
        match &self.dataset {
            None => return fail("missing required key `dataset` (blobs or csv)".into()),
            Some(DatasetSource::Blobs { classes, feature_dim, train_per_class, test_per_class, separation, noise_std }) => {
                if *classes < 2 || *feature_dim == 0 || *train_per_class == 0 || *test_per_class == 0 {
                    return fail("blobs need classes ≥ 2 and positive feature_dim/train_per_class/test_per_class".into());
                }
                if !(*separation > 0.0) || !(*noise_std >= 0.0) {
                    return fail("blobs need separation > 0 and noise_std ≥ 0".into());
                }
            }
            Some(DatasetSource::Csv { .. }) => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Correction,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Correction => "correction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub stage: Stage,
    pub selected: Vec<usize>,
    pub mean_train_loss: f64,
    pub metrics: ClassificationMetrics,
    /// Accuracy of the current label estimates over all detected-noisy
    /// samples; only during correction.
    pub correction_accuracy: Option<f64>,
    pub aggregator: Aggregator,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientNoise {
    pub client: usize,
    pub samples: usize,
    pub planned_rate: f64,
    pub realized_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectionRecord {
    pub round: usize,
    pub client: usize,
    pub sample: usize,
    pub estimate: usize,
    pub observed: usize,
    pub truth: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timing {
    pub vanilla_updates: usize,
    pub vanilla_mean_secs: f64,
    pub correction_updates: usize,
    pub correction_mean_secs: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub final_params: ModelParams,
    pub rounds: Vec<RoundLog>,
    pub detection: Option<Detection>,
    pub class_losses: Vec<ClassLosses>,
    pub plan: NoisePlan,
    pub client_noise: Vec<ClientNoise>,
    pub corrections: Vec<CorrectionRecord>,
    pub timing: Timing,
    /// Largest `|∂L/∂ỹ|` seen across all correction updates.
    pub max_label_grad: f64,
}

impl ExperimentOutcome {
    pub fn final_metrics(&self) -> ClassificationMetrics {
        self.rounds.last().map(|r| r.metrics).unwrap_or_default()
    }

    /// Round with the highest test accuracy (earliest on ties).
    pub fn best_round(&self) -> Option<&RoundLog> {
        self.rounds.iter().fold(None, |best: Option<&RoundLog>, r| match best {
            Some(b) if b.metrics.accuracy >= r.metrics.accuracy => Some(b),
            _ => Some(r),
        })
    }
}

/// Uniform sample without replacement, sorted, deterministic per
/// `(seed, round)`.
pub fn select_clients(round: usize, n: usize, per_round: usize, seed: u64) -> Result<Vec<usize>> {
    if per_round > n {
        return Err(config(format!("cannot select {per_round} of {n} clients")));
    }
    let mut rng = SeedSpec::new(seed, Purpose::Selection).round(round).rng();
    let mut picked = sample(&mut rng, n, per_round).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Training and test data for a config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.as_ref().ok_or_else(|| config("missing required key `dataset`"))? {
        DatasetSource::Blobs { classes, feature_dim, train_per_class, test_per_class, separation, noise_std } => Ok((
            gen_blobs(*classes, *feature_dim, *train_per_class, *separation, *noise_std, SeedSpec::new(cfg.seed, Purpose::Data))?,
            gen_blobs(*classes, *feature_dim, *test_per_class, *separation, *noise_std, SeedSpec::new(cfg.seed, Purpose::TestData))?,
        )),
        DatasetSource::Csv { train, test } => {
            let tr = load_csv(train)?;
            let te = load_csv(test)?;
            if tr.feature_dim() != te.feature_dim() {
                return Err(config("train and test CSVs differ in feature count"));
            }
            let m = tr.class_count.max(te.class_count);
            Ok((Dataset::new(tr.samples, m)?, Dataset::new(te.samples, m)?))
        }
    }
}

/// Partitions the training set and injects label noise per client.
pub fn prepare_clients(cfg: &ExperimentConfig, train: &mut Dataset) -> Result<(Partition, NoisePlan, Vec<ClientNoise>)> {
    let partition = dirichlet_partition(train, cfg.n_clients, cfg.gamma, cfg.min_size, SeedSpec::new(cfg.seed, Purpose::Partition))?;
    let plan = NoisePlan::for_scenario(cfg.noise, cfg.n_clients, cfg.noise_max);
    let mut reports = Vec::with_capacity(cfg.n_clients);
    for (entry, indices) in plan.entries.iter().zip(&partition.clients) {
        let matrix = entry.pattern.matrix(entry.rate, train.class_count)?;
        let rep = apply_noise(train, indices, &matrix, SeedSpec::new(cfg.seed, Purpose::Noise).client(entry.client))?;
        reports.push(ClientNoise {
            client: entry.client,
            samples: rep.samples,
            planned_rate: entry.rate,
            realized_rate: rep.realized_rate(),
        });
    }
    Ok((partition, plan, reports))
}

fn evaluate(params: &ModelParams, test: &Dataset) -> Result<ClassificationMetrics> {
    let mut cm = ConfusionMatrix::new(test.class_count);
    for s in &test.samples {
        let logits = predict_logits(params, &s.features)?;
        cm.record(s.true_label, argmax(&logits));
    }
    Ok(classification_metrics(&cm))
}

enum Update {
    Vanilla { params: ModelParams, loss: f64, elapsed: Duration },
    Corrected { params: ModelParams, loss: f64, elapsed: Duration, estimates: Vec<usize>, max_grad: f64 },
}

fn with_context(round: usize, client: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Context {
        round,
        client,
        source: Box::new(e),
    }
}

/// Runs one complete seeded experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_rounds(cfg))
}

fn run_rounds(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (mut train, test) = load_datasets(cfg)?;
    let (partition, plan, client_noise) = prepare_clients(cfg, &mut train)?;
    let train = train;

    let mut clients: Vec<ClientState> = partition
        .clients
        .iter()
        .enumerate()
        .map(|(id, idx)| Ok(ClientState::new(id, idx.clone(), class_prior(&train, idx, cfg.prior_smoothing)?)))
        .collect::<Result<_>>()?;

    let arch = ArchSpec::new(train.feature_dim(), cfg.hidden.clone(), train.class_count);
    let mut global = init_params(&arch, SeedSpec::new(cfg.seed, Purpose::Init))?;

    let mut detection: Option<Detection> = None;
    let mut class_losses = Vec::new();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut corrections = Vec::new();
    let mut timing = Timing::default();
    let (mut vanilla_secs, mut correction_secs) = (0.0, 0.0);
    let mut max_label_grad = 0.0f64;

    let run_detection = |global: &ModelParams, clients: &[ClientState]| -> Result<(Detection, Vec<ClassLosses>)> {
        let losses: Vec<ClassLosses> = clients
            .par_iter()
            .map(|c| per_class_loss(c, &train, global, cfg.detection_logit_adjust).map_err(with_context(cfg.warmup_rounds, c.id)))
            .collect::<Result<_>>()?;
        let vectors: Vec<Vec<f64>> = losses.iter().map(|l| l.values.clone()).collect();
        Ok((detect(&vectors, &cfg.gmm)?, losses))
    };

    if cfg.warmup_rounds == 0 && cfg.rounds > 0 {
        let (d, l) = run_detection(&global, &clients)?;
        detection = Some(d);
        class_losses = l;
    }

    for round in 1..=cfg.rounds {
        let stage = if round <= cfg.warmup_rounds { Stage::Warmup } else { Stage::Correction };
        let selected = select_clients(round, cfg.n_clients, cfg.clients_per_round, cfg.seed)?;
        let noisy = |id: usize| detection.as_ref().is_some_and(|d| d.assignment.is_noisy(id));
        let correct_noisy = stage == Stage::Correction && cfg.use_correction;

        let updates: Vec<(usize, Update)> = clients
            .par_iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .map(|client| {
                let seed = SeedSpec::new(cfg.seed, Purpose::Shuffle).round(round).client(client.id);
                let ctx = with_context(round, client.id);
                let update = if correct_noisy && noisy(client.id) {
                    let out = local_update_correct(client, &train, &global, &cfg.local, &cfg.correction, seed).map_err(ctx)?;
                    Update::Corrected {
                        params: out.params,
                        loss: out.mean_loss,
                        elapsed: out.elapsed,
                        estimates: out.estimates.iter().map(|e| e.argmax()).collect(),
                        max_grad: out.max_label_grad,
                    }
                } else {
                    let out = local_update_vanilla(client, &train, &global, &cfg.local, cfg.logit_adjust, seed).map_err(ctx)?;
                    Update::Vanilla { params: out.params, loss: out.mean_loss, elapsed: out.elapsed }
                };
                Ok((client.id, update))
            })
            .collect::<Result<_>>()?;

        let mut agg_updates = Vec::with_capacity(updates.len());
        let mut loss_total = 0.0;
        for (id, update) in updates {
            let clean = stage == Stage::Warmup || !noisy(id);
            let samples = clients[id].sample_count();
            let params = match update {
                Update::Vanilla { params, loss, elapsed } => {
                    loss_total += loss;
                    timing.vanilla_updates += 1;
                    vanilla_secs += elapsed.as_secs_f64();
                    params
                }
                Update::Corrected { params, loss, elapsed, estimates, max_grad } => {
                    loss_total += loss;
                    timing.correction_updates += 1;
                    correction_secs += elapsed.as_secs_f64();
                    max_label_grad = max_label_grad.max(max_grad);
                    if cfg.dump_correction {
                        for (&sample, estimate) in clients[id].indices.iter().zip(estimates) {
                            let s = &train.samples[sample];
                            corrections.push(CorrectionRecord {
                                round,
                                client: id,
                                sample,
                                estimate,
                                observed: s.observed_label,
                                truth: s.true_label,
                            });
                        }
                    }
                    params
                }
            };
            agg_updates.push(ClientUpdate { client: id, params, samples, clean });
        }
        let mean_train_loss = loss_total / agg_updates.len() as f64;

        let rule = match stage {
            Stage::Warmup => cfg.warmup_aggregator,
            Stage::Correction => cfg.aggregator,
        };
        let input = AggregationInput::new(agg_updates)?;
        global = aggregate(rule, &input, &cfg.robust)?;
        if !global.is_finite() {
            return Err(Error::Divergence(format!("global model became non-finite in round {round}")));
        }

        if round == cfg.warmup_rounds && cfg.warmup_rounds < cfg.rounds {
            let (d, l) = run_detection(&global, &clients)?;
            log::info!(
                "detection after round {round}: {} of {} clients noisy",
                d.assignment.noisy_clients().len(),
                cfg.n_clients
            );
            detection = Some(d);
            class_losses = l;
        }

        let correction_acc = if stage == Stage::Correction && cfg.use_correction {
            detection.as_ref().and_then(|d| noisy_group_accuracy(&d.assignment.noisy_clients(), &clients, &train))
        } else {
            None
        };
        let metrics = evaluate(&global, &test)?;
        log::debug!("round {round} ({}) acc={:.4} f1={:.4}", stage.as_str(), metrics.accuracy, metrics.macro_f1);
        rounds.push(RoundLog {
            round,
            stage,
            selected,
            mean_train_loss,
            metrics,
            correction_accuracy: correction_acc,
            aggregator: rule,
        });
    }

    if timing.vanilla_updates > 0 {
        timing.vanilla_mean_secs = vanilla_secs / timing.vanilla_updates as f64;
    }
    if timing.correction_updates > 0 {
        timing.correction_mean_secs = correction_secs / timing.correction_updates as f64;
    }
    Ok(ExperimentOutcome {
        final_params: global,
        rounds,
        detection,
        class_losses,
        plan,
        client_noise,
        corrections,
        timing,
        max_label_grad,
    })
}

/// Label-estimate accuracy over every sample held by the given clients;
/// clients not yet corrected contribute their observed labels.
fn noisy_group_accuracy(noisy: &[usize], clients: &[ClientState], train: &Dataset) -> Option<f64> {
    if noisy.is_empty() {
        return None;
    }
    let mut estimates: Vec<usize> = Vec::new();
    let mut truths = Vec::new();
    for &id in noisy {
        let c = &clients[id];
        match &c.label_state {
            Some(ls) => estimates.extend(ls.logits.iter().map(|l| argmax(l))),
            None => estimates.extend(c.indices.iter().map(|&i| train.samples[i].observed_label)),
        }
        truths.extend(c.indices.iter().map(|&i| train.samples[i].true_label));
    }
    let m = train.class_count;
    let one_hot: Vec<Vec<f64>> = estimates
        .iter()
        .map(|&e| {
            let mut v = vec![0.0; m];
            v[e] = 1.0;
            v
        })
        .collect();
    correction_accuracy(&one_hot, &truths).ok()
}
