//! Datasets, synthetic blobs, CSV I/O, Dirichlet partitioning and class
//! priors.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{config, invalid, Error, Result};
use crate::numerics::{ProbVector, SeedSpec};

/// Default prior smoothing `ε_s`.
pub const DEFAULT_PRIOR_SMOOTHING: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub observed_label: usize,
    /// Ground truth, used only for evaluation.
    pub true_label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_count: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        if class_count == 0 {
            return Err(invalid("dataset needs at least one class"));
        }
        let dim = samples[0].features.len();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(invalid(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.observed_label >= class_count || s.true_label >= class_count {
                return Err(invalid(format!(
                    "sample {i} has a label outside [0, {class_count})"
                )));
            }
        }
        Ok(Self {
            samples,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// Writes `f0,...,f{d-1},label,true_label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        let mut header: Vec<String> = (0..self.feature_dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("true_label".into());
        w.write_record(&header).map_err(csv_io)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
            row.push(s.observed_label.to_string());
            row.push(s.true_label.to_string());
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Class centers at pairwise distance `separation`.
///
/// With `feature_dim ≥ M` the centers are `separation/√2 · e_m`. In one
/// dimension they sit on a line, otherwise on a circle in the first two
/// coordinates; either way adjacent centers are `separation` apart.
pub fn blob_centers(m: usize, feature_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|c| {
            let mut center = vec![0.0; feature_dim];
            if feature_dim >= m {
                center[c] = separation / std::f64::consts::SQRT_2;
            } else if feature_dim == 1 {
                center[0] = separation * c as f64;
            } else {
                let radius = separation / (2.0 * (std::f64::consts::PI / m as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / m as f64;
                center[0] = radius * angle.cos();
                if feature_dim > 1 {
                    center[1] = radius * angle.sin();
                }
            }
            center
        })
        .collect()
}

/// Isotropic Gaussian blobs, `n_per_class` samples per class, class-major
/// order.
pub fn gen_blobs(
    m: usize,
    feature_dim: usize,
    n_per_class: usize,
    class_separation: f64,
    noise_std: f64,
    seed: SeedSpec,
) -> Result<Dataset> {
    if m < 2 {
        return Err(invalid("blobs need at least two classes"));
    }
    if n_per_class == 0 || feature_dim == 0 {
        return Err(invalid("blobs need n_per_class ≥ 1 and feature_dim ≥ 1"));
    }
    if !(class_separation > 0.0) || !class_separation.is_finite() {
        return Err(invalid("class_separation must be positive"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(invalid("noise_std must be non-negative"));
    }
    let centers = blob_centers(m, feature_dim, class_separation);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = seed.rng();
    let mut samples = Vec::with_capacity(m * n_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let features = center
                .iter()
                .map(|c| c + noise_std * normal.sample(&mut rng))
                .collect();
            samples.push(Sample {
                features,
                observed_label: label,
                true_label: label,
            });
        }
    }
    Dataset::new(samples, m)
}

/// Reads `f0,...,f{d-1},label[,true_label]`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let label_col = cols
        .iter()
        .position(|c| *c == "label")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing column `label`".into(),
        })?;
    for (i, c) in cols[..label_col].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column `f{i}` (found `{c}`)"),
            });
        }
    }
    if label_col == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "missing column `f0`".into(),
        });
    }
    let has_true = match &cols[label_col + 1..] {
        [] => false,
        ["true_label"] => true,
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected trailing columns {other:?}"),
            })
        }
    };

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", cols.len(), record.len()),
            });
        }
        let features = record
            .iter()
            .take(label_col)
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad feature value `{f}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let parse_label = |f: &str| {
            f.parse::<usize>().map_err(|_| Error::Parse {
                line,
                message: format!("bad label `{f}`"),
            })
        };
        let observed_label = parse_label(&record[label_col])?;
        let true_label = if has_true {
            parse_label(&record[label_col + 1])?
        } else {
            observed_label
        };
        samples.push(Sample {
            features,
            observed_label,
            true_label,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let class_count = samples
        .iter()
        .map(|s| s.observed_label.max(s.true_label))
        .max()
        .unwrap_or(0)
        + 1;
    Dataset::new(samples, class_count)
}

/// Per-client index lists over a parent dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }
}

const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Per-class symmetric Dirichlet(γ) split over `n_clients`, redrawn until
/// every client holds at least `min_size` samples.
pub fn dirichlet_partition(
    ds: &Dataset,
    n_clients: usize,
    gamma: f64,
    min_size: usize,
    seed: SeedSpec,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(invalid("need at least one client"));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid("Dirichlet concentration must be positive"));
    }
    if n_clients * min_size.max(1) > ds.len() {
        return Err(config(format!(
            "cannot give {n_clients} clients {} samples each from {} samples",
            min_size.max(1),
            ds.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.observed_label].push(i);
    }
    let gamma_dist = Gamma::new(gamma, 1.0).map_err(|e| invalid(e.to_string()))?;
    let mut rng = seed.rng();
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let mut props: Vec<f64> = (0..n_clients).map(|_| gamma_dist.sample(&mut rng)).collect();
            let total: f64 = props.iter().sum();
            if !(total > 0.0) {
                // Every gamma draw underflowed; give the class to one client.
                props.iter_mut().for_each(|p| *p = 0.0);
                props[0] = 1.0;
            } else {
                props.iter_mut().for_each(|p| *p /= total);
            }
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == n_clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                clients[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= min_size.max(1)) {
            for c in clients.iter_mut() {
                c.sort_unstable();
            }
            return Ok(Partition { clients });
        }
    }
    Err(config(format!(
        "no Dirichlet(γ={gamma}) draw gave all {n_clients} clients ≥ {min_size} samples after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

/// Smoothed observed-label distribution `(count_m + ε_s) / (n + M·ε_s)`.
pub fn class_prior(ds: &Dataset, indices: &[usize], smoothing: f64) -> Result<ProbVector> {
    if indices.is_empty() {
        return Err(invalid("class prior of an empty slice"));
    }
    let m = ds.class_count;
    let mut counts = vec![0.0; m];
    for &i in indices {
        counts[ds.samples[i].observed_label] += 1.0;
    }
    let denom = indices.len() as f64 + m as f64 * smoothing;
    Ok(ProbVector::from_unchecked(
        counts.into_iter().map(|c| (c + smoothing) / denom).collect(),
    ))
}

/// Total-variation distance between two distributions.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Purpose;
    use proptest::prelude::*;

    fn seed(s: u64) -> SeedSpec {
        SeedSpec::new(s, Purpose::Data)
    }

    fn nearest_center_accuracy(ds: &Dataset, centers: &[Vec<f64>]) -> f64 {
        let hits = ds
            .samples
            .iter()
            .filter(|s| {
                let best = centers
                    .iter()
                    .enumerate()
                    .map(|(c, ctr)| {
                        let d: f64 = ctr.iter().zip(&s.features).map(|(a, b)| (a - b).powi(2)).sum();
                        (c, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                best == s.true_label
            })
            .count();
        hits as f64 / ds.len() as f64
    }

    #[test]
    fn zero_noise_blobs_sit_on_centers() {
        let ds = gen_blobs(3, 4, 5, 2.0, 0.0, seed(1)).unwrap();
        let centers = blob_centers(3, 4, 2.0);
        for s in &ds.samples {
            assert_eq!(s.features, centers[s.true_label]);
            assert_eq!(s.observed_label, s.true_label);
        }
    }

    #[test]
    fn centers_are_separated() {
        for (m, d) in [(10, 32), (5, 2), (4, 1)] {
            let c = blob_centers(m, d, 3.0);
            for i in 0..m {
                for j in 0..i {
                    let dist: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(dist > 1e-9);
                }
            }
        }
        let c = blob_centers(10, 32, 3.0);
        let dist: f64 = c[0].iter().zip(&c[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((dist - 3.0).abs() < 1e-12);
    }

    #[test]
    fn well_separated_blobs_are_nearly_classifiable() {
        let ds = gen_blobs(10, 32, 200, 10.0, 1.0, seed(2)).unwrap();
        assert!(nearest_center_accuracy(&ds, &blob_centers(10, 32, 10.0)) >= 0.99);
    }

    #[test]
    fn blobs_are_deterministic_and_validated() {
        assert_eq!(gen_blobs(3, 2, 4, 1.0, 0.5, seed(3)).unwrap(), gen_blobs(3, 2, 4, 1.0, 0.5, seed(3)).unwrap());
        assert!(gen_blobs(3, 2, 4, 0.0, 0.5, seed(3)).is_err());
        assert!(gen_blobs(1, 2, 4, 1.0, 0.5, seed(3)).is_err());
        assert!(gen_blobs(3, 2, 0, 1.0, 0.5, seed(3)).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = gen_blobs(3, 2, 10, 1.0, 0.5, seed(4)).unwrap();
        let p = dirichlet_partition(&ds, 1, 0.5, 1, SeedSpec::new(4, Purpose::Partition)).unwrap();
        assert_eq!(p.clients[0], (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn huge_concentration_approaches_iid() {
        let ds = gen_blobs(10, 2, 300, 1.0, 0.5, seed(5)).unwrap();
        let p = dirichlet_partition(&ds, 10, 1e6, 10, SeedSpec::new(5, Purpose::Partition)).unwrap();
        let global = class_prior(&ds, &(0..ds.len()).collect::<Vec<_>>(), 0.0).unwrap();
        let tv: f64 = p
            .clients
            .iter()
            .map(|c| total_variation(&class_prior(&ds, c, 0.0).unwrap(), &global))
            .sum::<f64>()
            / p.client_count() as f64;
        assert!(tv < 0.05, "mean TV {tv}");
    }

    #[test]
    fn infeasible_min_size_is_a_config_error() {
        let ds = gen_blobs(2, 2, 10, 1.0, 0.5, seed(6)).unwrap();
        let err = dirichlet_partition(&ds, 5, 1.0, 10, SeedSpec::new(6, Purpose::Partition)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(dirichlet_partition(&ds, 0, 1.0, 1, SeedSpec::new(6, Purpose::Partition)).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.0, 1, SeedSpec::new(6, Purpose::Partition)).is_err());
    }

    fn max_share(ds: &Dataset, p: &Partition) -> f64 {
        p.clients
            .iter()
            .map(|c| class_prior(ds, c, 0.0).unwrap().iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / p.client_count() as f64
    }

    #[test]
    fn lower_concentration_means_more_skew() {
        let ds = gen_blobs(10, 2, 300, 1.0, 0.5, seed(7)).unwrap();
        let (mut low, mut high) = (0.0, 0.0);
        for s in 0..10 {
            let ps = SeedSpec::new(s, Purpose::Partition);
            low += max_share(&ds, &dirichlet_partition(&ds, 20, 0.5, 10, ps).unwrap());
            high += max_share(&ds, &dirichlet_partition(&ds, 20, 1.0, 10, ps).unwrap());
        }
        assert!(low > high, "γ=0.5 skew {low} vs γ=1 skew {high}");
    }

    #[test]
    fn prior_formula() {
        let mut samples = Vec::new();
        for label in [0, 0, 0, 1] {
            samples.push(Sample { features: vec![0.0], observed_label: label, true_label: label });
        }
        let ds = Dataset::new(samples, 2).unwrap();
        assert_eq!(&*class_prior(&ds, &[0, 1, 2, 3], 0.0).unwrap(), &[0.75, 0.25]);
        assert_eq!(&*class_prior(&ds, &[0, 1], 0.0).unwrap(), &[1.0, 0.0]);
        let smoothed = class_prior(&ds, &[0, 1], 1e-3).unwrap();
        assert!(smoothed.iter().all(|p| *p > 0.0));
        assert_eq!(&*class_prior(&ds, &[2, 3], 0.0).unwrap(), &[0.5, 0.5]);
        assert!(class_prior(&ds, &[], 0.0).is_err());
    }

    #[test]
    fn csv_round_trip_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(
            vec![
                Sample { features: vec![0.1, -2.5], observed_label: 1, true_label: 0 },
                Sample { features: vec![3.0, 1e-7], observed_label: 0, true_label: 0 },
            ],
            2,
        )
        .unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), ds);

        let no_true = dir.path().join("n.csv");
        std::fs::write(&no_true, "f0,f1,label\n1.0,2.0,1\n0.5,0.5,0\n").unwrap();
        let loaded = load_csv(&no_true).unwrap();
        assert!(loaded.samples.iter().all(|s| s.true_label == s.observed_label));
    }

    #[test]
    fn csv_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "f0,f1,target\n1,2,0\n").unwrap();
        let msg = load_csv(&p).unwrap_err().to_string();
        assert!(msg.contains("label"), "{msg}");

        std::fs::write(&p, "f0,f1,label\n1,2,0\n1,x,1\n").unwrap();
        match load_csv(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }

        std::fs::write(&p, "f0,f1,label\n1,2,0\n1,1\n").unwrap();
        assert!(matches!(load_csv(&p).unwrap_err(), Error::Parse { line: 3, .. }));
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_deterministic(s in 0u64..50, n in 1usize..8, gamma in 0.1f64..5.0) {
            let ds = gen_blobs(4, 2, 40, 1.0, 0.5, seed(s)).unwrap();
            let ps = SeedSpec::new(s, Purpose::Partition);
            let p = dirichlet_partition(&ds, n, gamma, 2, ps).unwrap();
            prop_assert_eq!(&p, &dirichlet_partition(&ds, n, gamma, 2, ps).unwrap());
            let mut seen = vec![false; ds.len()];
            for c in &p.clients {
                prop_assert!(c.len() >= 2);
                for &i in c {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
        }

        #[test]
        fn smoothed_prior_is_a_distribution(labels in proptest::collection::vec(0usize..5, 1..50), eps in 1e-6f64..1.0) {
            let samples = labels.iter().map(|&l| Sample { features: vec![0.0], observed_label: l, true_label: l }).collect();
            let ds = Dataset::new(samples, 5).unwrap();
            let idx: Vec<usize> = (0..ds.len()).collect();
            let pi = class_prior(&ds, &idx, eps).unwrap();
            prop_assert!(ProbVector::new(pi.to_vec()).is_ok());
            prop_assert!(pi.iter().all(|p| *p > 0.0));
        }
    }
}
