//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use fedelc::aggregation::{coordinate_median, da_aggregate, fedavg, krum, krum_select, trimmed_mean, AggregationInput, Aggregator, ClientUpdate};
use fedelc::cli;
use fedelc::data::{dirichlet_partition, gen_blobs};
use fedelc::detection::{fit_gmm_2, GmmOptions, LossMatrix};
use fedelc::metrics::detection_metrics;
use fedelc::model::{backward, forward, predict_logits, random_params, ArchSpec, ModelParams};
use fedelc::noise::{apply_noise, symmetric_matrix, NoisePlan, NoiseScenario};
use fedelc::numerics::{softmax, Purpose, SeedSpec};
use fedelc::orchestrator::{run_experiment, ExperimentConfig, ExperimentOutcome};
use fedelc::training::{correction_loss, grad_label_logits, triplet_logit_grad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const SLACK: f64 = 0.01;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn triplet_total(params: &ModelParams, x: &[f64], observed: &[f64], label_logits: &[f64], alpha: f64, beta: f64) -> f64 {
    let p = softmax(&predict_logits(params, x).unwrap()).unwrap();
    correction_loss(&p, observed, label_logits, alpha, beta).unwrap().total
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst_model: f64 = 0.0;
    let mut worst_label: f64 = 0.0;
    let instances = 120;
    for _ in 0..instances {
        let m = rng.random_range(2..6);
        let d = rng.random_range(1..5);
        let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..5)).collect();
        // Random biases keep pre-activations off the ReLU kink, which zero
        // biases behind a dead unit would sit on exactly.
        let shapes = ArchSpec::new(d, hidden, m).layer_shapes().unwrap();
        let params = random_params(shapes, 1.0, &mut rng);
        let x = random_vec(&mut rng, d, 2.0);
        let mut observed = vec![0.0; m];
        observed[rng.random_range(0..m)] = 1.0;
        let label_logits = random_vec(&mut rng, m, 3.0);
        let alpha = rng.random_range(0.0..1.0);
        let beta = rng.random_range(0.0..1.0);

        let (logits, cache) = forward(&params, &x).unwrap();
        let p = softmax(&logits).unwrap();
        let soft = softmax(&label_logits).unwrap();
        let analytic = backward(&params, &cache, &triplet_logit_grad(&p, &soft, beta)).unwrap();
        for k in 0..params.len() {
            let mut up = params.clone();
            up.as_mut_slice()[k] += h;
            let mut down = params.clone();
            down.as_mut_slice()[k] -= h;
            let numeric = (triplet_total(&up, &x, &observed, &label_logits, alpha, beta)
                - triplet_total(&down, &x, &observed, &label_logits, alpha, beta))
                / (2.0 * h);
            worst_model = worst_model.max(rel_err(analytic.as_slice()[k], numeric));
        }

        let g = grad_label_logits(&p, &observed, &label_logits, alpha).unwrap();
        for j in 0..m {
            let mut up = label_logits.clone();
            up[j] += h;
            let mut down = label_logits.clone();
            down[j] -= h;
            let numeric = (correction_loss(&p, &observed, &up, alpha, beta).unwrap().total
                - correction_loss(&p, &observed, &down, alpha, beta).unwrap().total)
                / (2.0 * h);
            worst_label = worst_label.max(rel_err(g[j], numeric));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst_model < 1e-4 && worst_label < 1e-4 && within(elapsed, 30.0),
        format!(
            "{instances} instances, max rel err model={worst_model:.2e} label={worst_label:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn noise_fidelity() -> Verdict {
    let start = Instant::now();
    let mut ds = gen_blobs(10, 4, 5_000, 6.0, 1.0, SeedSpec::new(21, Purpose::Data)).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let rep = apply_noise(&mut ds, &all, &symmetric_matrix(0.4, 10).unwrap(), SeedSpec::new(21, Purpose::Noise)).unwrap();
    let overall = rep.realized_rate();
    let overall_ok = (0.39..=0.41).contains(&overall);

    let mut ds = gen_blobs(10, 4, 5_000, 6.0, 1.0, SeedSpec::new(22, Purpose::Data)).unwrap();
    let part = dirichlet_partition(&ds, 40, 1.0, 200, SeedSpec::new(22, Purpose::Partition)).unwrap();
    let plan = NoisePlan::for_scenario(NoiseScenario::Symmetric, 40, 0.8);
    let mut checked = 0;
    let mut violations = Vec::new();
    for (entry, idx) in plan.entries.iter().zip(&part.clients) {
        let matrix = entry.pattern.matrix(entry.rate, 10).unwrap();
        let r = apply_noise(&mut ds, idx, &matrix, SeedSpec::new(22, Purpose::Noise).client(entry.client)).unwrap();
        if r.samples >= 200 {
            checked += 1;
            let eps = entry.rate;
            let bound = 3.0 * (eps * (1.0 - eps) / r.samples as f64).sqrt();
            if (r.realized_rate() - eps).abs() > bound {
                violations.push(entry.client);
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        overall_ok && violations.is_empty() && checked > 0 && within(elapsed, 5.0),
        format!(
            "overall rate {overall:.4} on 50000 labels, {checked} clients checked, 3σ violations {violations:?}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_krum(vals: &[Vec<f64>], kappa: f64) -> usize {
    let n = vals.len();
    let f = (kappa * n as f64).floor() as usize;
    let k = n - f - 2;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for i in 0..n {
        let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq(&vals[i], &vals[j])).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s: f64 = d[..k].iter().sum();
        if s < best_score {
            best_score = s;
            best = i;
        }
    }
    best
}

fn oracle_coordinate(vals: &[Vec<f64>], reduce: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..vals[0].len())
        .map(|c| {
            let mut col: Vec<f64> = vals.iter().map(|v| v[c]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            reduce(&col)
        })
        .collect()
}

fn aggregation_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shapes = [vec![(1, 1)], vec![(2, 1)], vec![(1, 2)], vec![(3, 1)], vec![(4, 1)]];
    let mut failures = Vec::new();
    let mut max_mean_err: f64 = 0.0;
    let mut max_da_err: f64 = 0.0;
    let trials = 1000;
    for t in 0..trials {
        let n = rng.random_range(3..=7);
        let shape = shapes[rng.random_range(0..shapes.len())].clone();
        let len = shape.iter().map(|(i, o)| i * o + o).sum::<usize>();
        let integer = rng.random_bool(0.3);
        let vals: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..len)
                    .map(|_| if integer { rng.random_range(-2i32..=2) as f64 } else { rng.random_range(-5.0..5.0) })
                    .collect()
            })
            .collect();
        let updates: Vec<ClientUpdate> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| ClientUpdate {
                client: i,
                params: ModelParams::unflatten(shape.clone(), v.clone()).unwrap(),
                samples: rng.random_range(1..100),
                clean: true,
            })
            .collect();
        let inp = AggregationInput::new(updates).unwrap();

        let want = oracle_krum(&vals, 0.3);
        if krum_select(&inp, 0.3).unwrap() != want || krum(&inp, 0.3).unwrap().as_slice() != vals[want].as_slice() {
            failures.push(format!("krum#{t}"));
        }
        let med = oracle_coordinate(&vals, |c| {
            let k = c.len();
            if k % 2 == 1 {
                c[k / 2]
            } else {
                (c[k / 2 - 1] + c[k / 2]) / 2.0
            }
        });
        for (a, b) in coordinate_median(&inp).as_slice().iter().zip(&med) {
            max_mean_err = max_mean_err.max((a - b).abs());
        }
        let tm = oracle_coordinate(&vals, |c| {
            let kept = &c[1..c.len() - 1];
            kept.iter().sum::<f64>() / kept.len() as f64
        });
        for (a, b) in trimmed_mean(&inp, 1).unwrap().as_slice().iter().zip(&tm) {
            max_mean_err = max_mean_err.max((a - b).abs());
        }
        for (a, b) in da_aggregate(&inp).params.as_slice().iter().zip(fedavg(&inp).as_slice()) {
            max_da_err = max_da_err.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures.is_empty() && max_mean_err <= 1e-12 && max_da_err <= 1e-15 && within(elapsed, 30.0),
        format!(
            "{trials} instances, selection mismatches {}, max mean err {max_mean_err:.1e}, max da-vs-fedavg err {max_da_err:.1e}, {:.2}s",
            failures.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn em_soundness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let opts = GmmOptions::default();
    let mut worst_drop: f64 = 0.0;
    let fits = 100;
    for _ in 0..fits {
        let n = rng.random_range(4..40);
        let m = rng.random_range(1..11);
        let shift = rng.random_range(0.0..3.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let bump = if rng.random_bool(0.4) { shift } else { 0.0 };
                (0..m).map(|_| bump + rng.random_range(0.0..1.5)).collect()
            })
            .collect();
        let fit = fit_gmm_2(&LossMatrix::new(rows).unwrap(), &opts).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    let mut rows = vec![vec![0.0; 6]; 10];
    rows.extend(vec![vec![10.0; 6]; 10]);
    let fit = fit_gmm_2(&LossMatrix::new(rows).unwrap(), &opts).unwrap();
    let mut means: Vec<&Vec<f64>> = fit.model.components.iter().map(|c| &c.mean).collect();
    means.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
    let recovered = means[0].iter().all(|v| v.abs() < 0.1) && means[1].iter().all(|v| (v - 10.0).abs() < 0.1);
    let elapsed = start.elapsed();
    verdict(
        worst_drop <= 1e-9 && recovered && within(elapsed, 10.0),
        format!(
            "{fits} fits, largest log-likelihood drop {worst_drop:.1e}, two-cluster means recovered: {recovered}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn benchmark(noise_max: f64) -> ExperimentConfig {
    ExperimentConfig {
        noise: NoiseScenario::Symmetric,
        noise_max,
        ..ExperimentConfig::benchmark()
    }
}

fn fedavg_baseline(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        aggregator: Aggregator::FedAvg,
        use_correction: false,
        logit_adjust: false,
        ..cfg.clone()
    }
}

fn krum_baseline(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        aggregator: Aggregator::Krum,
        warmup_aggregator: Aggregator::Krum,
        use_correction: false,
        logit_adjust: false,
        ..cfg.clone()
    }
}

struct SeededRuns {
    outcomes: Vec<ExperimentOutcome>,
    secs: Vec<f64>,
}

fn run_seeds(cfg: &ExperimentConfig) -> SeededRuns {
    let mut outcomes = Vec::new();
    let mut secs = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        outcomes.push(run_experiment(&ExperimentConfig { seed, ..cfg.clone() }).expect("benchmark run"));
        secs.push(start.elapsed().as_secs_f64());
    }
    SeededRuns { outcomes, secs }
}

fn mean_f1(runs: &SeededRuns) -> f64 {
    runs.outcomes.iter().map(|o| o.final_metrics().macro_f1).sum::<f64>() / runs.outcomes.len() as f64
}

fn detection_quality(full: &SeededRuns, cfg: &ExperimentConfig) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (o, secs) in full.outcomes.iter().zip(&full.secs) {
        let Some(d) = o.detection.as_ref() else {
            pass = false;
            parts.push("no detection".to_string());
            continue;
        };
        let m = detection_metrics(&d.assignment, &o.plan, 0.4).unwrap();
        pass &= m.recall >= 0.8 && m.noisy_mean_rate > m.clean_mean_rate && *secs < 180.0;
        parts.push(format!(
            "recall {:.2} noisy/clean mean rate {:.3}/{:.3} ({secs:.1}s)",
            m.recall, m.noisy_mean_rate, m.clean_mean_rate
        ));
    }
    verdict(pass, format!("threshold {}: {}", cfg.detection_threshold(), parts.join("; ")))
}

fn correction_efficacy(runs: &SeededRuns, cfg: &ExperimentConfig) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for o in &runs.outcomes {
        let first = o.rounds.iter().find(|r| r.round == cfg.warmup_rounds + 1).and_then(|r| r.correction_accuracy);
        let last = o.rounds.last().and_then(|r| r.correction_accuracy);
        match (first, last) {
            (Some(a), Some(b)) => {
                pass &= b - a >= 0.10 && b >= 0.80;
                parts.push(format!("{a:.3} -> {b:.3}"));
            }
            _ => {
                pass = false;
                parts.push("no correction curve".into());
            }
        }
    }
    verdict(pass, format!("round {} -> {}: {}", cfg.warmup_rounds + 1, cfg.rounds, parts.join(", ")))
}

fn method_ordering(full: &SeededRuns, fedavg: &SeededRuns, krum: &SeededRuns, elapsed: Duration) -> Verdict {
    let (a, b, c) = (mean_f1(full), mean_f1(fedavg), mean_f1(krum));
    verdict(
        a >= b - SLACK && a >= c - SLACK && within(elapsed, 600.0),
        format!(
            "mean macro-F1 FedELC {a:.4}, FedAvg {b:.4}, Krum {c:.4}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_ordering(full: &SeededRuns, no_da: &SeededRuns, no_la: &SeededRuns) -> Verdict {
    let (a, b, c) = (mean_f1(full), mean_f1(no_da), mean_f1(no_la));
    verdict(
        a >= b - SLACK && a >= c - SLACK,
        format!("mean macro-F1 full {a:.4}, without DA {b:.4}, without logit adjustment {c:.4}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().to_string_lossy().into_owned();
    let run = |name: &str, workers: &str| {
        cli::run([
            "fedelc", "--out", &out, "--run-name", name, "--dataset", "blobs", "--n_clients", "20", "--t", "30", "--t_w", "10",
            "--noise", "symmetric", "--noise_max", "0.8", "--seeds", "7", "--workers", workers,
        ])
        .expect("cli run");
        cli::metric_columns(&Path::new(&out).join(name).join("7").join("rounds.csv")).expect("rounds.csv")
    };
    let one = run("w1", "1");
    let four = run("w4", "4");
    let bytes = |name: &str| std::fs::read(Path::new(&out).join(name).join("7").join("rounds.csv")).unwrap();
    let identical = one == four && bytes("w1") == bytes("w4");
    verdict(identical && !one.is_empty(), format!("{} rounds, workers 1 vs 4 identical: {identical}", one.len()))
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "noise-injection fidelity", noise_fidelity()),
        (3, "aggregation oracles", aggregation_oracles()),
        (4, "EM soundness", em_soundness()),
    ];

    let started = Instant::now();
    let sym08 = benchmark(0.8);
    let full = run_seeds(&sym08);
    let fedavg_runs = run_seeds(&fedavg_baseline(&sym08));
    let krum_runs = run_seeds(&krum_baseline(&sym08));
    let ordering_time = started.elapsed();
    let no_da = run_seeds(&ExperimentConfig { aggregator: Aggregator::FedAvg, ..sym08.clone() });
    let no_la = run_seeds(&ExperimentConfig { logit_adjust: false, ..sym08.clone() });
    let sym04 = benchmark(0.4);
    let corr = run_seeds(&sym04);

    results.push((5, "detection quality", detection_quality(&full, &sym08)));
    results.push((6, "correction efficacy", correction_efficacy(&corr, &sym04)));
    results.push((7, "method ordering", method_ordering(&full, &fedavg_runs, &krum_runs, ordering_time)));
    results.push((8, "ablation ordering", ablation_ordering(&full, &no_da, &no_la)));
    results.push((9, "determinism across worker counts", determinism()));

    let mut failed = 0;
    for (n, name, v) in &results {
        println!("criterion {n} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
