//! Server-side aggregation rules.
//!
//! FedAvg and distance-aware aggregation weight clients by sample count;
//! Krum, coordinate-wise median and trimmed mean are count-agnostic.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{config, invalid, Error, Result};
use crate::model::{squared_distance, ModelParams};

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: ModelParams,
    pub samples: usize,
    pub clean: bool,
}

/// Nonempty, same-shaped client models.
#[derive(Clone, Debug)]
pub struct AggregationInput {
    updates: Vec<ClientUpdate>,
}

impl AggregationInput {
    pub fn new(updates: Vec<ClientUpdate>) -> Result<Self> {
        let first = updates.first().ok_or_else(|| invalid("nothing to aggregate"))?;
        if updates.iter().any(|u| !u.params.same_shape(&first.params)) {
            return Err(invalid("client models differ in shape"));
        }
        if updates.iter().any(|u| u.samples == 0) {
            return Err(invalid("client sample counts must be ≥ 1"));
        }
        Ok(Self { updates })
    }

    pub fn updates(&self) -> &[ClientUpdate] {
        &self.updates
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    fn template(&self) -> &ModelParams {
        &self.updates[0].params
    }
}

fn weighted_mean(inp: &AggregationInput, weights: &[f64]) -> ModelParams {
    let mut out = ModelParams::zeros_like(inp.template());
    for (u, w) in inp.updates.iter().zip(weights) {
        out.add_scaled(&u.params, *w);
    }
    out
}

fn sample_weights(inp: &AggregationInput) -> Vec<f64> {
    let total: f64 = inp.updates.iter().map(|u| u.samples as f64).sum();
    inp.updates.iter().map(|u| u.samples as f64 / total).collect()
}

/// Sample-count weighted mean.
pub fn fedavg(inp: &AggregationInput) -> ModelParams {
    weighted_mean(inp, &sample_weights(inp))
}

#[derive(Clone, Debug)]
pub struct DaOutcome {
    pub params: ModelParams,
    /// Normalized aggregation weights in input order.
    pub weights: Vec<f64>,
    /// Normalized distances `D(i)`.
    pub distances: Vec<f64>,
    pub fell_back: bool,
}

/// Distance-aware aggregation.
///
/// Clean clients get `d = 0`; a noisy client's `d` is its L2 distance to the
/// nearest clean model. With `D = d / max d`, client weights are
/// `n_i·e^{−D(i)}` renormalized. Without any clean client this falls back to
/// FedAvg.
pub fn da_aggregate(inp: &AggregationInput) -> DaOutcome {
    let clean: Vec<&ClientUpdate> = inp.updates.iter().filter(|u| u.clean).collect();
    if clean.is_empty() {
        log::warn!("distance-aware aggregation without clean clients; using FedAvg");
        let weights = sample_weights(inp);
        return DaOutcome {
            params: weighted_mean(inp, &weights),
            weights,
            distances: vec![0.0; inp.len()],
            fell_back: true,
        };
    }
    let raw: Vec<f64> = inp
        .updates
        .iter()
        .map(|u| {
            if u.clean {
                0.0
            } else {
                clean
                    .iter()
                    .map(|c| squared_distance(u.params.as_slice(), c.params.as_slice()))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            }
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    let distances: Vec<f64> = raw.iter().map(|d| if max > 0.0 { d / max } else { 0.0 }).collect();
    let unnorm: Vec<f64> = inp
        .updates
        .iter()
        .zip(&distances)
        .map(|(u, d)| if *d == 0.0 { u.samples as f64 } else { u.samples as f64 * (-d).exp() })
        .collect();
    let total: f64 = unnorm.iter().sum();
    let weights: Vec<f64> = unnorm.iter().map(|w| w / total).collect();
    DaOutcome {
        params: weighted_mean(inp, &weights),
        weights,
        distances,
        fell_back: false,
    }
}

/// Krum: with `f = ⌊κ·n⌋`, score each model by the summed squared distance
/// to its `n − f − 2` nearest others and return the lowest-scoring model
/// (ties to the lowest client id).
pub fn krum(inp: &AggregationInput, kappa: f64) -> Result<ModelParams> {
    Ok(inp.updates[krum_select(inp, kappa)?].params.clone())
}

/// Index into the input of the model Krum selects.
#[allow(clippy::needless_range_loop)]
pub fn krum_select(inp: &AggregationInput, kappa: f64) -> Result<usize> {
    let n = inp.len();
    if n < 3 {
        return Err(config(format!("Krum needs at least 3 clients, got {n}")));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(config(format!("Krum κ={kappa} outside [0, 1)")));
    }
    let f = (kappa * n as f64).floor() as usize;
    let neighbours = n.checked_sub(f + 2).filter(|k| *k >= 1).ok_or_else(|| {
        config(format!("Krum with n={n}, f={f} leaves no neighbours (n − f − 2 < 1)"))
    })?;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(inp.updates[i].params.as_slice(), inp.updates[j].params.as_slice());
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        others.sort_by(f64::total_cmp);
        let score: f64 = others[..neighbours].iter().sum();
        let id = inp.updates[i].client;
        let better = match best {
            None => true,
            Some((s, bid, _)) => score < s || (score == s && id < bid),
        };
        if better {
            best = Some((score, id, i));
        }
    }
    Ok(best.expect("n ≥ 3").2)
}

fn per_coordinate<F: Fn(&mut [f64]) -> f64>(inp: &AggregationInput, reduce: F) -> ModelParams {
    let mut out = ModelParams::zeros_like(inp.template());
    let mut column = vec![0.0; inp.len()];
    for (c, slot) in out.as_mut_slice().iter_mut().enumerate() {
        for (v, u) in column.iter_mut().zip(&inp.updates) {
            *v = u.params.as_slice()[c];
        }
        column.sort_by(f64::total_cmp);
        *slot = reduce(&mut column);
    }
    out
}

/// Coordinate-wise median; even counts average the two middle values.
pub fn coordinate_median(inp: &AggregationInput) -> ModelParams {
    per_coordinate(inp, |sorted| {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        }
    })
}

/// Coordinate-wise mean after dropping the `trim` largest and smallest values.
pub fn trimmed_mean(inp: &AggregationInput, trim: usize) -> Result<ModelParams> {
    if inp.len() <= 2 * trim {
        return Err(config(format!(
            "trimmed mean drops {} of {} values per coordinate",
            2 * trim,
            inp.len()
        )));
    }
    Ok(per_coordinate(inp, |sorted| {
        let kept = &sorted[trim..sorted.len() - trim];
        kept.iter().sum::<f64>() / kept.len() as f64
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    FedAvg,
    Da,
    Krum,
    Median,
    TrimmedMean,
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Self::FedAvg),
            "da" => Ok(Self::Da),
            "krum" => Ok(Self::Krum),
            "median" => Ok(Self::Median),
            "trimmed_mean" => Ok(Self::TrimmedMean),
            other => Err(invalid(format!(
                "unknown aggregator `{other}` (expected fedavg, da, krum, median or trimmed_mean)"
            ))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FedAvg => "fedavg",
            Self::Da => "da",
            Self::Krum => "krum",
            Self::Median => "median",
            Self::TrimmedMean => "trimmed_mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RobustSettings {
    pub krum_kappa: f64,
    pub trim_count: usize,
}

impl Default for RobustSettings {
    fn default() -> Self {
        Self {
            krum_kappa: 0.3,
            trim_count: 1,
        }
    }
}

pub fn aggregate(rule: Aggregator, inp: &AggregationInput, robust: &RobustSettings) -> Result<ModelParams> {
    match rule {
        Aggregator::FedAvg => Ok(fedavg(inp)),
        Aggregator::Da => Ok(da_aggregate(inp).params),
        Aggregator::Krum => krum(inp, robust.krum_kappa),
        Aggregator::Median => Ok(coordinate_median(inp)),
        Aggregator::TrimmedMean => trimmed_mean(inp, robust.trim_count),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(client: usize, v: f64, samples: usize, clean: bool) -> ClientUpdate {
        ClientUpdate {
            client,
            params: ModelParams::unflatten(vec![(1, 1)], vec![v, 0.0]).unwrap(),
            samples,
            clean,
        }
    }

    fn scalars(vals: &[f64]) -> AggregationInput {
        AggregationInput::new(vals.iter().enumerate().map(|(i, v)| scalar(i, *v, 1, true)).collect()).unwrap()
    }

    fn first(p: &ModelParams) -> f64 {
        p.as_slice()[0]
    }

    #[test]
    fn fedavg_cases() {
        assert_eq!(first(&fedavg(&scalars(&[2.0, 4.0]))), 3.0);
        assert_eq!(first(&fedavg(&scalars(&[7.5]))), 7.5);
        let inp = AggregationInput::new(vec![scalar(0, 0.0, 1, true), scalar(1, 4.0, 3, true)]).unwrap();
        assert_eq!(first(&fedavg(&inp)), 3.0);
    }

    #[test]
    fn input_validation() {
        assert!(AggregationInput::new(vec![]).is_err());
        let odd = ClientUpdate { client: 1, params: ModelParams::zeros(vec![(2, 1)]), samples: 1, clean: true };
        assert!(AggregationInput::new(vec![scalar(0, 1.0, 1, true), odd]).is_err());
        assert!(AggregationInput::new(vec![scalar(0, 1.0, 0, true)]).is_err());
    }

    #[test]
    fn da_three_client_hand_example() {
        // clean {0, 1}, noisy {5}: d = [0, 0, 4], D = [0, 0, 1],
        // weights ∝ [1, 1, e^{-1}].
        let inp = AggregationInput::new(vec![scalar(0, 0.0, 10, true), scalar(1, 1.0, 10, true), scalar(2, 5.0, 10, false)]).unwrap();
        let out = da_aggregate(&inp);
        let e = (-1.0f64).exp();
        let z = 2.0 + e;
        let want = [1.0 / z, 1.0 / z, e / z];
        for (w, t) in out.weights.iter().zip(want) {
            assert!((w - t).abs() < 1e-12);
        }
        assert!((first(&out.params) - (1.0 + 5.0 * e) / z).abs() < 1e-12);
        assert_eq!(out.distances, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn da_scales_farthest_noisy_client_by_inverse_e() {
        let inp = AggregationInput::new(vec![
            scalar(0, 0.0, 2, true),
            scalar(1, 3.0, 5, false),
            scalar(2, 1.0, 3, false),
        ])
        .unwrap();
        let out = da_aggregate(&inp);
        // Unnormalized: 2, 5·e^{-1}, 3·e^{-1/3}; ratio noisy/clean fixed by that.
        let ratio = out.weights[1] / out.weights[0];
        assert!((ratio - 5.0 * (-1.0f64).exp() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn da_without_clean_clients_is_fedavg() {
        let inp = AggregationInput::new(vec![scalar(0, 0.0, 1, false), scalar(1, 4.0, 3, false)]).unwrap();
        let out = da_aggregate(&inp);
        assert!(out.fell_back);
        assert_eq!(first(&out.params), 3.0);
    }

    #[test]
    fn krum_picks_a_near_zero_model() {
        let inp = scalars(&[0.0, 0.1, 10.0]);
        let idx = krum_select(&inp, 0.3).unwrap();
        // f = 0, one neighbour: scores 0.01, 0.01, 98.01 → tie, lowest id.
        assert_eq!(idx, 0);
        assert_eq!(krum(&inp, 0.3).unwrap(), inp.updates()[0].params);
    }

    #[test]
    fn krum_ties_go_to_lowest_id() {
        let updates = vec![scalar(4, 1.0, 1, true), scalar(2, 1.0, 1, true), scalar(9, 1.0, 1, true)];
        let inp = AggregationInput::new(updates).unwrap();
        assert_eq!(inp.updates()[krum_select(&inp, 0.0).unwrap()].client, 2);
    }

    #[test]
    fn krum_rejects_infeasible_configs() {
        assert!(krum(&scalars(&[0.0, 1.0]), 0.3).is_err());
        assert!(matches!(krum(&scalars(&[0.0, 1.0, 2.0]), 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn median_and_trimmed_cases() {
        assert_eq!(first(&coordinate_median(&scalars(&[1.0, 2.0, 100.0]))), 2.0);
        assert_eq!(first(&coordinate_median(&scalars(&[1.0, 2.0, 3.0, 100.0]))), 2.5);
        assert_eq!(first(&trimmed_mean(&scalars(&[1.0, 2.0, 100.0]), 1).unwrap()), 2.0);
        assert_eq!(first(&trimmed_mean(&scalars(&[1.0, 2.0, 6.0]), 0).unwrap()), 3.0);
        assert!(trimmed_mean(&scalars(&[1.0, 2.0]), 1).is_err());
    }

    #[test]
    fn aggregator_names_round_trip() {
        for a in [Aggregator::FedAvg, Aggregator::Da, Aggregator::Krum, Aggregator::Median, Aggregator::TrimmedMean] {
            assert_eq!(a.to_string().parse::<Aggregator>().unwrap(), a);
        }
        assert!("mean".parse::<Aggregator>().is_err());
    }

    fn updates_strategy() -> impl Strategy<Value = Vec<(Vec<f64>, usize, bool)>> {
        (1usize..6, 3usize..8).prop_flat_map(|(dim, n)| {
            proptest::collection::vec(
                (proptest::collection::vec(-10.0f64..10.0, dim), 1usize..50, any::<bool>()),
                n,
            )
        })
    }

    fn build(raw: &[(Vec<f64>, usize, bool)]) -> AggregationInput {
        AggregationInput::new(
            raw.iter()
                .enumerate()
                .map(|(i, (v, n, c))| ClientUpdate {
                    client: i,
                    params: ModelParams::unflatten(vec![(v.len(), 1)], {
                        let mut d = v.clone();
                        d.push(0.0);
                        d
                    })
                    .unwrap(),
                    samples: *n,
                    clean: *c,
                })
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn da_weights_are_a_distribution(raw in updates_strategy()) {
            let inp = build(&raw);
            let out = da_aggregate(&inp);
            let s: f64 = out.weights.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(out.weights.iter().all(|w| *w > 0.0));
            let clean: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].2).collect();
            for w in clean.windows(2) {
                let (a, b) = (w[0], w[1]);
                let lhs = out.weights[a] / out.weights[b];
                let rhs = raw[a].1 as f64 / raw[b].1 as f64;
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
            }
        }

        #[test]
        fn robust_rules_stay_within_bounds(raw in updates_strategy()) {
            let inp = build(&raw);
            let med = coordinate_median(&inp);
            let tm = trimmed_mean(&inp, 1).unwrap();
            for c in 0..med.len() {
                let col: Vec<f64> = inp.updates().iter().map(|u| u.params.as_slice()[c]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in [med.as_slice()[c], tm.as_slice()[c]] {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn rules_are_permutation_invariant(raw in updates_strategy(), rot in 0usize..8) {
            let inp = build(&raw);
            let mut rotated: Vec<ClientUpdate> = inp.updates().to_vec();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let rinp = AggregationInput::new(rotated).unwrap();
            let close = |a: &ModelParams, b: &ModelParams| a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() < 1e-12);
            prop_assert!(close(&fedavg(&inp), &fedavg(&rinp)));
            prop_assert!(close(&da_aggregate(&inp).params, &da_aggregate(&rinp).params));
            prop_assert_eq!(coordinate_median(&inp), coordinate_median(&rinp));
            prop_assert!(close(&trimmed_mean(&inp, 1).unwrap(), &trimmed_mean(&rinp, 1).unwrap()));
            prop_assert_eq!(krum(&inp, 0.3).unwrap(), krum(&rinp, 0.3).unwrap());
        }
    }
}
