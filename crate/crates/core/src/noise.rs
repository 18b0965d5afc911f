//! Label corruption: transition matrices, linear per-client rate schedules
//! and the symmetric / asymmetric / mixed scenarios.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::numerics::SeedSpec;

const ROW_TOL: f64 = 1e-12;

/// Row-stochastic `M × M` matrix; entry `(i, j)` is the probability that a
/// sample of true class `i` is observed as class `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    m: usize,
    rows: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(invalid("transition matrix must be square"));
        }
        let t = Self {
            m,
            rows: rows.into_iter().flatten().collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity(m: usize) -> Self {
        let mut rows = vec![0.0; m * m];
        for i in 0..m {
            rows[i * m + i] = 1.0;
        }
        Self { m, rows }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.m..(i + 1) * self.m]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i * self.m + j]
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.m {
            let row = self.row(i);
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(invalid(format!("transition row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(invalid(format!("transition row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

fn check_rate(eps: f64, m: usize) -> Result<()> {
    if m < 2 {
        return Err(invalid("label noise needs at least two classes"));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(invalid(format!("noise rate {eps} outside [0, 1]")));
    }
    Ok(())
}

/// Diagonal `1 − ε`, every wrong class `ε / (M − 1)`.
pub fn symmetric_matrix(eps: f64, m: usize) -> Result<TransitionMatrix> {
    check_rate(eps, m)?;
    let off = eps / (m - 1) as f64;
    let mut rows = vec![off; m * m];
    for i in 0..m {
        rows[i * m + i] = 1.0 - eps;
    }
    Ok(TransitionMatrix { m, rows })
}

/// Pairwise flip: class `i` keeps `1 − ε` and sends `ε` to `(i + 1) mod M`.
pub fn asymmetric_matrix(eps: f64, m: usize) -> Result<TransitionMatrix> {
    check_rate(eps, m)?;
    let mut rows = vec![0.0; m * m];
    for i in 0..m {
        rows[i * m + i] = 1.0 - eps;
        rows[i * m + (i + 1) % m] = eps;
    }
    Ok(TransitionMatrix { m, rows })
}

/// `rate_k = ε_max · k / (N − 1)` for zero-based client `k`.
pub fn linear_rates(n: usize, eps_max: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n).map(|k| eps_max * k as f64 / (n - 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipPattern {
    Symmetric,
    Asymmetric,
}

impl FlipPattern {
    pub fn matrix(self, eps: f64, m: usize) -> Result<TransitionMatrix> {
        match self {
            FlipPattern::Symmetric => symmetric_matrix(eps, m),
            FlipPattern::Asymmetric => asymmetric_matrix(eps, m),
        }
    }
}

/// Scenario selector used by experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScenario {
    None,
    Symmetric,
    Asymmetric,
    Mixed,
}

impl FromStr for NoiseScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "symmetric" | "sym" => Ok(Self::Symmetric),
            "asymmetric" | "asym" => Ok(Self::Asymmetric),
            "mixed" => Ok(Self::Mixed),
            other => Err(invalid(format!("unknown noise scenario `{other}`"))),
        }
    }
}

impl fmt::Display for NoiseScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Symmetric => "symmetric",
            Self::Asymmetric => "asymmetric",
            Self::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanEntry {
    pub client: usize,
    pub pattern: FlipPattern,
    pub rate: f64,
}

/// One entry per client, indexed by client id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoisePlan {
    pub entries: Vec<PlanEntry>,
}

impl NoisePlan {
    pub fn uniform_pattern(n: usize, eps_max: f64, pattern: FlipPattern) -> Self {
        Self {
            entries: linear_rates(n, eps_max)
                .into_iter()
                .enumerate()
                .map(|(client, rate)| PlanEntry { client, pattern, rate })
                .collect(),
        }
    }

    pub fn for_scenario(scenario: NoiseScenario, n: usize, eps_max: f64) -> Self {
        match scenario {
            NoiseScenario::None => Self::uniform_pattern(n, 0.0, FlipPattern::Symmetric),
            NoiseScenario::Symmetric => Self::uniform_pattern(n, eps_max, FlipPattern::Symmetric),
            NoiseScenario::Asymmetric => Self::uniform_pattern(n, eps_max, FlipPattern::Asymmetric),
            NoiseScenario::Mixed => mixed_plan(n, eps_max),
        }
    }

    pub fn rate(&self, client: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.client == client).map(|e| e.rate)
    }
}

/// First `⌈N/2⌉` clients symmetric, the rest asymmetric, linear rates.
pub fn mixed_plan(n: usize, eps_max: f64) -> NoisePlan {
    let half = n.div_ceil(2);
    NoisePlan {
        entries: linear_rates(n, eps_max)
            .into_iter()
            .enumerate()
            .map(|(client, rate)| PlanEntry {
                client,
                pattern: if client < half {
                    FlipPattern::Symmetric
                } else {
                    FlipPattern::Asymmetric
                },
                rate,
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InjectionReport {
    pub samples: usize,
    pub flips: usize,
}

impl InjectionReport {
    pub fn realized_rate(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.flips as f64 / self.samples as f64
        }
    }
}

/// Redraws each listed sample's observed label from its true label's row.
pub fn apply_noise(
    ds: &mut Dataset,
    indices: &[usize],
    matrix: &TransitionMatrix,
    seed: SeedSpec,
) -> Result<InjectionReport> {
    if matrix.dim() != ds.class_count {
        return Err(invalid(format!(
            "transition matrix is {0}×{0}, dataset has {1} classes",
            matrix.dim(),
            ds.class_count
        )));
    }
    matrix.validate()?;
    let mut rng = seed.rng();
    let mut flips = 0;
    for &i in indices {
        let sample = ds
            .samples
            .get_mut(i)
            .ok_or_else(|| invalid(format!("sample index {i} out of range")))?;
        let row = matrix.row(sample.true_label);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut drawn = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                drawn = j;
                break;
            }
        }
        // Guard the rounding tail: never land on a zero-probability class.
        while row[drawn] == 0.0 && drawn > 0 {
            drawn -= 1;
        }
        sample.observed_label = drawn;
        if drawn != sample.true_label {
            flips += 1;
        }
    }
    Ok(InjectionReport {
        samples: indices.len(),
        flips,
    })
}
