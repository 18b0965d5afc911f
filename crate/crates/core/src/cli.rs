//! Experiment runner: flat `key = value` configs, flag overrides, and the
//! per-seed artifact layout `<out>/<run-name>/<seed>/`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;
use serde_json::json;

use crate::data::write_atomic;
use crate::detection::Group;
use crate::error::{config, Error, Result};
use crate::metrics::detection_metrics;
use crate::orchestrator::{run_experiment, DatasetSource, ExperimentConfig, ExperimentOutcome, RoundLog};

pub const ROUNDS_HEADER: [&str; 8] = [
    "round",
    "stage",
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "mean_train_loss",
    "correction_accuracy",
];

type Setter = fn(&mut ExperimentConfig, &mut DatasetKeys, &str) -> Result<()>;

/// Every recognised config key with its help text and setter.
const KEYS: &[(&str, &str, Setter)] = &[
    ("n_clients", "number of clients N", |c, _, v| set(&mut c.n_clients, "n_clients", v)),
    ("clients_per_round", "clients selected per round", |c, _, v| set(&mut c.clients_per_round, "clients_per_round", v)),
    ("t", "total global rounds T", |c, _, v| set(&mut c.rounds, "t", v)),
    ("t_w", "warm-up rounds before detection", |c, _, v| set(&mut c.warmup_rounds, "t_w", v)),
    ("epochs", "local epochs E", |c, _, v| set(&mut c.local.epochs, "epochs", v)),
    ("batch", "local batch size", |c, _, v| set(&mut c.local.batch_size, "batch", v)),
    ("lr", "learning rate", |c, _, v| set(&mut c.local.learning_rate, "lr", v)),
    ("momentum", "SGD momentum", |c, _, v| set(&mut c.local.momentum, "momentum", v)),
    ("weight_decay", "L2 weight decay", |c, _, v| set(&mut c.local.weight_decay, "weight_decay", v)),
    ("eta", "label-logit step size", |c, _, v| set(&mut c.correction.eta, "eta", v)),
    ("alpha", "compatibility loss weight", |c, _, v| set(&mut c.correction.alpha, "alpha", v)),
    ("beta", "entropy loss weight", |c, _, v| set(&mut c.correction.beta, "beta", v)),
    ("k", "label-logit scale K", |c, _, v| set(&mut c.correction.k, "k", v)),
    ("label_step", "batch_mean | per_sample scaling of the label-logit gradient", |c, _, v| {
        set(&mut c.correction.label_step, "label_step", v)
    }),
    ("gamma", "Dirichlet concentration", |c, _, v| set(&mut c.gamma, "gamma", v)),
    ("min_size", "minimum samples per client", |c, _, v| set(&mut c.min_size, "min_size", v)),
    ("prior_smoothing", "class-prior smoothing", |c, _, v| set(&mut c.prior_smoothing, "prior_smoothing", v)),
    ("noise", "none | symmetric | asymmetric | mixed", |c, _, v| set(&mut c.noise, "noise", v)),
    ("noise_max", "largest per-client noise rate", |c, _, v| set(&mut c.noise_max, "noise_max", v)),
    ("aggregator", "fedavg | da | krum | median | trimmed_mean", |c, _, v| set(&mut c.aggregator, "aggregator", v)),
    ("warmup_aggregator", "aggregator for warm-up rounds", |c, _, v| set(&mut c.warmup_aggregator, "warmup_aggregator", v)),
    ("krum_kappa", "Krum tolerated fraction", |c, _, v| set(&mut c.robust.krum_kappa, "krum_kappa", v)),
    ("trim", "trimmed-mean count per side", |c, _, v| set(&mut c.robust.trim_count, "trim", v)),
    ("correction", "run label correction on noisy clients", |c, _, v| set_bool(&mut c.use_correction, "correction", v)),
    ("logit_adjust", "logit-adjusted local loss", |c, _, v| set_bool(&mut c.logit_adjust, "logit_adjust", v)),
    ("detection_logit_adjust", "logit-adjust the detection losses", |c, _, v| {
        set_bool(&mut c.detection_logit_adjust, "detection_logit_adjust", v)
    }),
    ("seed", "experiment seed", |c, _, v| set(&mut c.seed, "seed", v)),
    ("hidden", "comma-separated hidden widths (empty for none)", |c, _, v| {
        c.hidden = parse_list("hidden", v)?;
        Ok(())
    }),
    ("dataset", "blobs | csv", |_, d, v| {
        d.kind = Some(v.to_string());
        Ok(())
    }),
    ("classes", "blobs: class count", |_, d, v| set(&mut d.classes, "classes", v)),
    ("feature_dim", "blobs: feature dimension", |_, d, v| set(&mut d.feature_dim, "feature_dim", v)),
    ("train_per_class", "blobs: training samples per class", |_, d, v| set(&mut d.train_per_class, "train_per_class", v)),
    ("test_per_class", "blobs: test samples per class", |_, d, v| set(&mut d.test_per_class, "test_per_class", v)),
    ("separation", "blobs: center separation", |_, d, v| set(&mut d.separation, "separation", v)),
    ("noise_std", "blobs: per-coordinate std", |_, d, v| set(&mut d.noise_std, "noise_std", v)),
    ("train_csv", "csv: training file", |_, d, v| {
        d.train = Some(PathBuf::from(v));
        Ok(())
    }),
    ("test_csv", "csv: test file", |_, d, v| {
        d.test = Some(PathBuf::from(v));
        Ok(())
    }),
    ("gmm_max_iter", "EM iteration cap", |c, _, v| set(&mut c.gmm.max_iter, "gmm_max_iter", v)),
    ("gmm_tol", "EM convergence tolerance", |c, _, v| set(&mut c.gmm.tol, "gmm_tol", v)),
    ("gmm_var_floor", "GMM variance floor", |c, _, v| set(&mut c.gmm.var_floor, "gmm_var_floor", v)),
    ("gmm_min_gap", "smallest mean-loss gap between GMM components that counts as a split", |c, _, v| {
        set(&mut c.gmm.min_gap, "gmm_min_gap", v)
    }),
    ("detection_threshold", "planned rate counted as truly noisy (default 0.5*noise_max)", |c, _, v| {
        c.detection_threshold = Some(parse_value("detection_threshold", v)?);
        Ok(())
    }),
    ("workers", "parallel client workers", |c, _, v| set(&mut c.workers, "workers", v)),
    ("dump_correction", "write correction.csv", |c, _, v| set_bool(&mut c.dump_correction, "dump_correction", v)),
];

struct DatasetKeys {
    kind: Option<String>,
    classes: usize,
    feature_dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    separation: f64,
    noise_std: f64,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
}

impl Default for DatasetKeys {
    fn default() -> Self {
        match DatasetSource::benchmark_blobs() {
            DatasetSource::Blobs { classes, feature_dim, train_per_class, test_per_class, separation, noise_std } => Self {
                kind: None,
                classes,
                feature_dim,
                train_per_class,
                test_per_class,
                separation,
                noise_std,
                train: None,
                test: None,
            },
            DatasetSource::Csv { .. } => unreachable!(),
        }
    }
}

impl DatasetKeys {
    fn resolve(self) -> Result<Option<DatasetSource>> {
        match self.kind.as_deref() {
            None => Ok(None),
            Some("blobs") => Ok(Some(DatasetSource::Blobs {
                classes: self.classes,
                feature_dim: self.feature_dim,
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
                separation: self.separation,
                noise_std: self.noise_std,
            })),
            Some("csv") => match (self.train, self.test) {
                (Some(train), Some(test)) => Ok(Some(DatasetSource::Csv { train, test })),
                _ => Err(config("dataset=csv needs both train_csv and test_csv")),
            },
            Some(other) => Err(config(format!("dataset: unknown source `{other}` (expected blobs or csv)"))),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn set<T: FromStr>(slot: &mut T, key: &str, v: &str) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    *slot = parse_value(key, v)?;
    Ok(())
}

fn set_bool(slot: &mut bool, key: &str, v: &str) -> Result<()> {
    *slot = match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => true,
        "false" | "0" | "no" | "off" => false,
        _ => return Err(config(format!("{key}: expected a boolean, got `{v}`"))),
    };
    Ok(())
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parses a flat config file. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let line_no = i as u64 + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if !is_known(key) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unknown config key `{key}`"),
            });
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate config key `{key}`"),
            });
        }
    }
    Ok(out)
}

/// Builds a validated config from resolved key/value pairs on top of the
/// defaults.
pub fn build_config(values: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut ds = DatasetKeys::default();
    for (key, value) in values {
        let (_, _, setter) = KEYS
            .iter()
            .find(|(k, _, _)| k == key)
            .ok_or_else(|| config(format!("unknown config key `{key}`")))?;
        setter(&mut cfg, &mut ds, value)?;
    }
    cfg.dataset = ds.resolve()?;
    cfg.validate()?;
    Ok(cfg)
}

/// File keys first, then overrides (later wins).
pub fn parse_config(file: Option<&str>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut values = match file {
        Some(text) => parse_config_text(text)?,
        None => BTreeMap::new(),
    };
    for (k, v) in overrides {
        if !is_known(k) {
            return Err(config(format!("unknown config key `{k}`")));
        }
        values.insert(k.clone(), v.clone());
    }
    build_config(&values)
}

pub fn command() -> Command {
    let mut cmd = Command::new("fedelc")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Federated learning with noisy-client detection and label correction")
        .args_override_self(true)
        .arg(Arg::new("config").long("config").value_name("PATH").help("flat key = value config file"))
        .arg(Arg::new("out").long("out").value_name("DIR").default_value("runs").help("output root"))
        .arg(Arg::new("run-name").long("run-name").value_name("NAME").help("run directory name (default: config file stem)"))
        .arg(Arg::new("seeds").long("seeds").value_name("LIST").help("comma-separated seeds (default: the `seed` key)"))
        .arg(Arg::new("no-correction").long("no-correction").action(ArgAction::SetTrue).help("disable label correction"))
        .arg(Arg::new("no-logit-adjust").long("no-logit-adjust").action(ArgAction::SetTrue).help("disable logit adjustment"))
        .arg(Arg::new("dry-run").long("dry-run").action(ArgAction::SetTrue).help("validate and write the manifest only"));
    for (key, help, _) in KEYS {
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").help(*help);
        if key.contains('_') {
            arg = arg.alias(key.replace('_', "-"));
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

/// Everything needed to execute and locate one invocation's artifacts.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub run_name: String,
    pub artifacts: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir().join(seed.to_string())
    }
}

pub fn manifest_from_matches(m: &ArgMatches) -> Result<RunManifest> {
    let config_path = m.get_one::<String>("config").map(PathBuf::from);
    let text = match &config_path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| config(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|(k, _, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    if m.get_flag("no-correction") {
        overrides.push(("correction".into(), "false".into()));
    }
    if m.get_flag("no-logit-adjust") {
        overrides.push(("logit_adjust".into(), "false".into()));
    }
    let cfg = parse_config(text.as_deref(), &overrides)?;
    let seeds = match m.get_one::<String>("seeds") {
        Some(list) => {
            let s: Vec<u64> = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_value("seeds", s))
                .collect::<Result<_>>()?;
            if s.is_empty() {
                return Err(config("--seeds must list at least one seed"));
            }
            s
        }
        None => vec![cfg.seed],
    };
    let run_name = match m.get_one::<String>("run-name") {
        Some(n) => n.clone(),
        None => config_path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into()),
    };
    Ok(RunManifest {
        config_path,
        config: cfg,
        seeds,
        output_dir: PathBuf::from(m.get_one::<String>("out").expect("has default")),
        run_name,
        artifacts: Vec::new(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn rounds_csv(rounds: &[RoundLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| config(format!("csv write failed: {e}"));
    w.write_record(ROUNDS_HEADER).map_err(csv_err)?;
    for r in rounds {
        w.write_record([
            r.round.to_string(),
            r.stage.as_str().to_string(),
            fmt_f64(r.metrics.accuracy),
            fmt_f64(r.metrics.macro_precision),
            fmt_f64(r.metrics.macro_recall),
            fmt_f64(r.metrics.macro_f1),
            fmt_f64(r.mean_train_loss),
            r.correction_accuracy.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| config(format!("csv flush failed: {e}")))
}

fn correction_csv(out: &ExperimentOutcome) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| config(format!("csv write failed: {e}"));
    w.write_record(["round", "client", "sample", "estimate", "observed", "truth"]).map_err(csv_err)?;
    for r in &out.corrections {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| config(format!("csv flush failed: {e}")))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| config(format!("json encode failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn detection_json(cfg: &ExperimentConfig, out: &ExperimentOutcome) -> Option<serde_json::Value> {
    let d = out.detection.as_ref()?;
    let clients: Vec<_> = d
        .assignment
        .groups
        .iter()
        .enumerate()
        .map(|(client, g)| {
            json!({
                "client": client,
                "group": if *g == Group::Noisy { "noisy" } else { "clean" },
                "noisy_responsibility": d.assignment.noisy_responsibility[client],
                "planned_rate": out.plan.rate(client),
                "realized_rate": out.client_noise.get(client).map(|c| c.realized_rate),
                "class_losses": out.class_losses.get(client).map(|l| &l.values),
                "missing_classes": out.class_losses.get(client).map(|l| &l.missing),
            })
        })
        .collect();
    Some(json!({
        "after_round": cfg.warmup_rounds,
        "degenerate": d.assignment.degenerate,
        "em_iterations": d.fit.iterations,
        "log_likelihoods": d.fit.log_likelihoods,
        "model": d.fit.model,
        "clients": clients,
    }))
}

fn summary_json(cfg: &ExperimentConfig, seed: u64, out: &ExperimentOutcome) -> Result<serde_json::Value> {
    let detection = match &out.detection {
        Some(d) => Some(detection_metrics(&d.assignment, &out.plan, cfg.detection_threshold())?),
        None => None,
    };
    let best = out.best_round().map(|r| json!({ "round": r.round, "metrics": r.metrics }));
    Ok(json!({
        "seed": seed,
        "config": cfg,
        "final": out.final_metrics(),
        "best": best,
        "detection": detection,
        "noisy_clients": out.detection.as_ref().map(|d| d.assignment.noisy_clients()),
        "final_correction_accuracy": out.rounds.last().and_then(|r| r.correction_accuracy),
        "max_label_grad": out.max_label_grad,
        "timing": out.timing,
        "client_noise": out.client_noise,
    }))
}

/// Runs one seed and writes its artifacts; returns the names written.
pub fn run_seed(manifest: &RunManifest, seed: u64) -> Result<(ExperimentOutcome, Vec<String>)> {
    let cfg = ExperimentConfig { seed, ..manifest.config.clone() };
    let out = run_experiment(&cfg)?;
    let dir = manifest.seed_dir(seed);
    fs::create_dir_all(&dir)?;
    let mut written: Vec<String> = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&dir.join(name), &bytes)?;
        written.push(name.to_string());
        Ok(())
    };
    emit("rounds.csv", rounds_csv(&out.rounds)?)?;
    emit("summary.json", to_json(&summary_json(&cfg, seed, &out)?)?)?;
    if let Some(d) = detection_json(&cfg, &out) {
        emit("detection.json", to_json(&d)?)?;
    }
    if cfg.dump_correction && out.detection.is_some() && cfg.use_correction {
        emit("correction.csv", correction_csv(&out)?)?;
    }
    let mut model = Vec::new();
    out.final_params.write_binary(&mut model)?;
    emit("model.bin", model)?;
    let mut seed_manifest = manifest.clone();
    seed_manifest.config = cfg;
    seed_manifest.seeds = vec![seed];
    seed_manifest.artifacts = written;
    seed_manifest.artifacts.push("manifest.json".into());
    write_atomic(&dir.join("manifest.json"), &to_json(&seed_manifest)?)?;
    Ok((out, seed_manifest.artifacts))
}

/// Executes a parsed manifest: writes the run-level manifest and, unless
/// `dry_run`, every seed's artifacts.
pub fn execute(manifest: &mut RunManifest, dry_run: bool) -> Result<()> {
    let run_dir = manifest.run_dir();
    fs::create_dir_all(&run_dir)?;
    if !dry_run {
        for &seed in &manifest.seeds.clone() {
            let (out, _) = run_seed(manifest, seed)?;
            let f = out.final_metrics();
            let noisy = out.detection.as_ref().map(|d| d.assignment.noisy_clients().len());
            println!(
                "seed {seed}: accuracy={:.4} macro_f1={:.4} noisy_clients={} -> {}",
                f.accuracy,
                f.macro_f1,
                noisy.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
                manifest.seed_dir(seed).display()
            );
        }
        manifest.artifacts = manifest.seeds.iter().map(|s| format!("{s}/")).collect();
    }
    manifest.artifacts.push("manifest.json".into());
    write_atomic(&run_dir.join("manifest.json"), &to_json(manifest)?)?;
    if dry_run {
        println!("config ok; manifest written to {}", run_dir.join("manifest.json").display());
    }
    Ok(())
}

/// Full command-line entry point.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            std::process::exit(0)
        }
        _ => config(e.to_string().trim_start_matches("error: ").trim_end().to_string()),
    })?;
    let mut manifest = manifest_from_matches(&matches)?;
    execute(&mut manifest, matches.get_flag("dry-run"))
}

/// Reads a rounds.csv back and returns the metric columns (everything but
/// `round` and `stage`) row by row.
pub fn metric_columns(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| config(format!("{}: {e}", path.display())))?;
            Ok(rec.iter().skip(2).map(str::to_string).collect())
        })
        .collect()
}
