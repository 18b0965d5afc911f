//! Noisy-client detection from the per-client, per-class loss matrix with a
//! two-component diagonal Gaussian mixture fitted by EM.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{invalid, Result};

/// `N × M` per-client per-class mean losses, rows in client-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMatrix {
    rows: Vec<Vec<f64>>,
}

impl LossMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(invalid("loss matrix has no columns"));
        }
        if rows.iter().any(|r| r.len() != m) {
            return Err(invalid("loss matrix rows differ in length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("loss matrix has a non-finite entry"));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Component {
    fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mu), var) in x.iter().zip(&self.mean).zip(&self.variance) {
            let d = xi - mu;
            acc += -0.5 * ((2.0 * PI * var).ln() + d * d / var);
        }
        acc
    }

    fn mean_level(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GmmModel {
    pub components: [Component; 2],
}

impl GmmModel {
    /// Per-row posterior over the two components.
    pub fn responsibilities(&self, x: &[f64]) -> [f64; 2] {
        let l0 = self.components[0].weight.ln() + self.components[0].log_density(x);
        let l1 = self.components[1].weight.ln() + self.components[1].log_density(x);
        let top = l0.max(l1);
        let e0 = (l0 - top).exp();
        let e1 = (l1 - top).exp();
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }

    fn row_log_likelihood(&self, x: &[f64]) -> f64 {
        let l0 = self.components[0].weight.ln() + self.components[0].log_density(x);
        let l1 = self.components[1].weight.ln() + self.components[1].log_density(x);
        let top = l0.max(l1);
        top + ((l0 - top).exp() + (l1 - top).exp()).ln()
    }

    pub fn log_likelihood(&self, l: &LossMatrix) -> f64 {
        l.rows.iter().map(|r| self.row_log_likelihood(r)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GmmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub var_floor: f64,
    /// Smallest gap between the two components' average mean loss that
    /// still counts as a real split; anything closer is degenerate.
    pub min_gap: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            var_floor: 1e-6,
            min_gap: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// A mixing weight fell below `1e-6`.
    Collapsed,
    /// Component means coincide.
    EqualMeans,
    /// Component mean levels differ by less than `min_gap`.
    SmallGap,
    /// Every client fell into the same component.
    OneSidedAssignment,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Log-likelihood before each M-step and after the last one.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub degenerate: Option<Degeneracy>,
}

const COLLAPSE_WEIGHT: f64 = 1e-6;

fn component_from(rows: &[&Vec<f64>], weights: &[f64], total_weight: f64, n: usize, floor: f64) -> Component {
    let m = rows[0].len();
    let mut mean = vec![0.0; m];
    for (r, w) in rows.iter().zip(weights) {
        for (mu, x) in mean.iter_mut().zip(r.iter()) {
            *mu += w * x;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= total_weight);
    let mut variance = vec![0.0; m];
    for (r, w) in rows.iter().zip(weights) {
        for ((v, x), mu) in variance.iter_mut().zip(r.iter()).zip(&mean) {
            *v += w * (x - mu) * (x - mu);
        }
    }
    variance.iter_mut().for_each(|v| *v = (*v / total_weight).max(floor));
    Component {
        weight: total_weight / n as f64,
        mean,
        variance,
    }
}

/// EM for a two-component diagonal GMM.
///
/// Components start from the lower and upper halves of the rows sorted by
/// row mean (ties by row index), so the fit is deterministic.
pub fn fit_gmm_2(l: &LossMatrix, opts: &GmmOptions) -> Result<GmmFit> {
    let n = l.n_rows();
    if n < 2 {
        return Err(invalid("GMM detection needs at least two clients"));
    }
    let all: Vec<&Vec<f64>> = l.rows.iter().collect();
    let mut order: Vec<usize> = (0..n).collect();
    let row_mean = |r: &Vec<f64>| r.iter().sum::<f64>() / r.len() as f64;
    order.sort_by(|&a, &b| row_mean(&l.rows[a]).total_cmp(&row_mean(&l.rows[b])).then(a.cmp(&b)));
    let half = n / 2;
    let init = |idx: &[usize]| {
        let rows: Vec<&Vec<f64>> = idx.iter().map(|&i| &l.rows[i]).collect();
        let ones = vec![1.0; rows.len()];
        component_from(&rows, &ones, rows.len() as f64, n, opts.var_floor)
    };
    let mut model = GmmModel {
        components: [init(&order[..half]), init(&order[half..])],
    };

    let mut lls = Vec::new();
    let mut iterations = 0;
    let mut degenerate = None;
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..opts.max_iter {
        // E-step.
        let mut ll = 0.0;
        let mut resp = vec![[0.0; 2]; n];
        for (r, row) in resp.iter_mut().zip(&l.rows) {
            *r = model.responsibilities(row);
            ll += model.row_log_likelihood(row);
        }
        lls.push(ll);
        if ll - prev < opts.tol && iterations > 0 {
            break;
        }
        prev = ll;
        // M-step.
        let mut next = Vec::with_capacity(2);
        for c in 0..2 {
            let w: Vec<f64> = resp.iter().map(|r| r[c]).collect();
            let total: f64 = w.iter().sum();
            if total / (n as f64) < COLLAPSE_WEIGHT {
                degenerate = Some(Degeneracy::Collapsed);
                break;
            }
            next.push(component_from(&all, &w, total, n, opts.var_floor));
        }
        if degenerate.is_some() {
            break;
        }
        let c1 = next.pop().expect("two components");
        let c0 = next.pop().expect("two components");
        model = GmmModel { components: [c0, c1] };
        iterations += 1;
    }
    if degenerate.is_none() {
        let ll_final = model.log_likelihood(l);
        if lls.last() != Some(&ll_final) {
            lls.push(ll_final);
        }
        let [a, b] = &model.components;
        if a.weight < COLLAPSE_WEIGHT || b.weight < COLLAPSE_WEIGHT {
            degenerate = Some(Degeneracy::Collapsed);
        } else if a.mean.iter().zip(&b.mean).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs())) {
            degenerate = Some(Degeneracy::EqualMeans);
        } else if (a.mean_level() - b.mean_level()).abs() < opts.min_gap {
            degenerate = Some(Degeneracy::SmallGap);
        }
    }
    Ok(GmmFit {
        model,
        log_likelihoods: lls,
        iterations,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Clean,
    Noisy,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupAssignment {
    /// Indexed by row (client) order.
    pub groups: Vec<Group>,
    /// Posterior of the noisy component per client; zero on fallback.
    pub noisy_responsibility: Vec<f64>,
    pub degenerate: Option<Degeneracy>,
}

impl GroupAssignment {
    pub fn all_clean(n: usize, reason: Degeneracy) -> Self {
        Self {
            groups: vec![Group::Clean; n],
            noisy_responsibility: vec![0.0; n],
            degenerate: Some(reason),
        }
    }

    pub fn is_noisy(&self, client: usize) -> bool {
        self.groups.get(client) == Some(&Group::Noisy)
    }

    pub fn noisy_clients(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&c| self.is_noisy(c)).collect()
    }
}

/// Tags each row with its max-responsibility component; the component with
/// the higher average mean coordinate is the noisy one.
pub fn assign_groups(fit: &GmmFit, l: &LossMatrix) -> GroupAssignment {
    let n = l.n_rows();
    if let Some(reason) = fit.degenerate {
        log::warn!("degenerate client split ({reason:?}); treating every client as clean");
        return GroupAssignment::all_clean(n, reason);
    }
    let [a, b] = &fit.model.components;
    let noisy = if b.mean_level() > a.mean_level() {
        1
    } else if a.mean_level() > b.mean_level() {
        0
    } else {
        log::warn!("GMM components have equal mean loss; treating every client as clean");
        return GroupAssignment::all_clean(n, Degeneracy::EqualMeans);
    };
    let mut groups = Vec::with_capacity(n);
    let mut resp = Vec::with_capacity(n);
    for row in &l.rows {
        let r = fit.model.responsibilities(row);
        groups.push(if r[noisy] > r[1 - noisy] { Group::Noisy } else { Group::Clean });
        resp.push(r[noisy]);
    }
    if groups.iter().all(|g| *g == groups[0]) {
        log::warn!("every client landed in one GMM component; treating every client as clean");
        return GroupAssignment::all_clean(n, Degeneracy::OneSidedAssignment);
    }
    GroupAssignment {
        groups,
        noisy_responsibility: resp,
        degenerate: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub fit: GmmFit,
    pub assignment: GroupAssignment,
}

/// Loss vectors → loss matrix → GMM fit → clean/noisy split.
pub fn detect(loss_vectors: &[Vec<f64>], opts: &GmmOptions) -> Result<Detection> {
    let l = LossMatrix::new(loss_vectors.to_vec())?;
    let fit = fit_gmm_2(&l, opts)?;
    let assignment = assign_groups(&fit, &l);
    Ok(Detection { fit, assignment })
}
