//! Combinatorial optimisation and factorial HMM reference disaggregators.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::Activation;

pub const CO_MAX_COMBINATIONS: usize = 1_000_000;
pub const FHMM_MAX_JOINT_STATES: usize = 4096;
pub const MIN_EMISSION_STD: f64 = 10.0;
const KMEANS_MAX_ITER: usize = 200;

pub fn default_state_count(appliance: &str) -> usize {
    match appliance {
        "washing_machine" | "dish_washer" => 3,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceStateModel {
    pub appliance_id: String,
    /// Ascending; state 0 is off at 0 W.
    pub state_powers: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub emission_std: Vec<f64>,
}

impl ApplianceStateModel {
    pub fn num_states(&self) -> usize {
        self.state_powers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_states();
        let bad = |m: &str| Err(Error::InvalidParams(format!("{}: {m}", self.appliance_id)));
        if k == 0 || self.state_powers[0] != 0.0 {
            return bad("state 0 must be 0 W");
        }
        if self.transition.len() != k || self.initial.len() != k || self.emission_std.len() != k {
            return bad("model tables disagree on the number of states");
        }
        for row in &self.transition {
            if row.len() != k || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("transition rows must be distributions");
            }
        }
        if (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("initial distribution must sum to 1");
        }
        if self.emission_std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return bad("emission std must be positive");
        }
        Ok(())
    }
}

/// 1-D k-means seeded at quantiles of the distinct values; returns ascending
/// centroids and each point's cluster.
pub fn kmeans_1d(values: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = k.min(distinct.len());
    if k == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut centroids: Vec<f64> = (0..k)
        .map(|i| {
            let q = ((i as f64 + 0.5) * distinct.len() as f64 / k as f64 - 0.5).round();
            distinct[(q.max(0.0) as usize).min(distinct.len() - 1)]
        })
        .collect();
    let nearest = |c: &[f64], v: f64| {
        let mut best = 0;
        for (j, &cj) in c.iter().enumerate() {
            if (v - cj).abs() < (v - c[best]).abs() {
                best = j;
            }
        }
        best
    };
    let mut labels = vec![0; values.len()];
    for _ in 0..KMEANS_MAX_ITER {
        for (l, &v) in labels.iter_mut().zip(values) {
            *l = nearest(&centroids, v);
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&l, &v) in labels.iter().zip(values) {
            sums[l] += v;
            counts[l] += 1;
        }
        let next: Vec<f64> = (0..k)
            .map(|j| if counts[j] == 0 { centroids[j] } else { sums[j] / counts[j] as f64 })
            .collect();
        if next == centroids {
            break;
        }
        centroids = next;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let mut rank = vec![0; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    (
        order.iter().map(|&j| centroids[j]).collect(),
        labels.iter().map(|&l| rank[l]).collect(),
    )
}

/// Fits `k` states (including off) from one appliance's activations.
///
/// Transitions count each activation's quantised sequence bracketed by off
/// samples, plus off-to-off steps across the gaps between consecutive
/// activations (sorted by offset). Counts are add-one smoothed.
pub fn fit_states(appliance_id: &str, activations: &[Activation], k: usize) -> Result<ApplianceStateModel> {
    if k < 2 {
        return Err(Error::InvalidParams("need at least two states including off".into()));
    }
    if activations.is_empty() {
        return Err(Error::Empty(format!("no activations to fit {appliance_id} states from")));
    }
    let on: Vec<f64> = activations.iter().flat_map(|a| a.values.iter().copied()).filter(|&v| v > 0.0).collect();
    if on.is_empty() {
        return Err(Error::Empty(format!("{appliance_id} activations hold no positive samples")));
    }
    let (centroids, labels) = kmeans_1d(&on, k - 1);
    if centroids.len() < k - 1 {
        warn!(
            "{appliance_id}: only {} distinct on-power values, using {} states instead of {k}",
            centroids.len(),
            centroids.len() + 1
        );
    }
    let n = centroids.len() + 1;
    let mut state_powers = vec![0.0];
    state_powers.extend(&centroids);

    let mut emission_std = vec![MIN_EMISSION_STD; n];
    for (j, std) in emission_std.iter_mut().enumerate().skip(1) {
        let members: Vec<f64> = on.iter().zip(&labels).filter(|(_, &l)| l + 1 == j).map(|(&v, _)| v).collect();
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        let var = members.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / members.len() as f64;
        *std = var.sqrt().max(MIN_EMISSION_STD);
    }

    let quantise = |v: f64| {
        let mut best = 0;
        for (j, &p) in state_powers.iter().enumerate() {
            if (v - p).abs() < (v - state_powers[best]).abs() {
                best = j;
            }
        }
        best
    };
    let mut counts = vec![vec![1.0; n]; n];
    let mut occupancy = vec![1.0; n];
    let mut sorted: Vec<&Activation> = activations.iter().collect();
    sorted.sort_by_key(|a| a.source_offset);
    let mut prev_end: Option<usize> = None;
    for a in sorted {
        if let Some(end) = prev_end {
            if a.source_offset > end {
                let gap = (a.source_offset - end) as f64;
                counts[0][0] += gap - 1.0;
                occupancy[0] += gap;
            }
        }
        let mut prev = 0;
        for &v in &a.values {
            let s = quantise(v);
            counts[prev][s] += 1.0;
            occupancy[s] += 1.0;
            prev = s;
        }
        counts[prev][0] += 1.0;
        prev_end = Some(prev_end.map_or(a.end(), |e| e.max(a.end())));
    }
    let transition = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.into_iter().map(|c| c / total).collect()
        })
        .collect();
    let total: f64 = occupancy.iter().sum();
    Ok(ApplianceStateModel {
        appliance_id: appliance_id.into(),
        state_powers,
        transition,
        initial: occupancy.into_iter().map(|c| c / total).collect(),
        emission_std,
    })
}

/// Mixed-radix joint state space; appliance 0 is the most significant digit,
/// so ascending joint index is lexicographic state order.
#[derive(Debug, Clone)]
pub struct JointSpace {
    radices: Vec<usize>,
    size: usize,
}

impl JointSpace {
    pub fn new(models: &[ApplianceStateModel], limit: usize, hint: &str) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Empty("no appliance models".into()));
        }
        let mut size: usize = 1;
        for m in models {
            m.validate()?;
            size = size
                .checked_mul(m.num_states())
                .filter(|&s| s <= limit)
                .ok_or_else(|| Error::Guard(format!("more than {limit} joint states; {hint}")))?;
        }
        Ok(JointSpace {
            radices: models.iter().map(|m| m.num_states()).collect(),
            size,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn decompose(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.radices.len()];
        for (slot, &r) in out.iter_mut().zip(&self.radices).rev() {
            *slot = index % r;
            index /= r;
        }
        out
    }
}

fn joint_power(models: &[ApplianceStateModel], states: &[usize]) -> f64 {
    models.iter().zip(states).map(|(m, &s)| m.state_powers[s]).sum()
}

fn per_appliance(models: &[ApplianceStateModel], paths: &[Vec<usize>]) -> Vec<Vec<f64>> {
    models
        .iter()
        .enumerate()
        .map(|(i, m)| paths.iter().map(|s| m.state_powers[s[i]]).collect())
        .collect()
}

/// Per-timestep joint state minimising `|aggregate - Σ power|`, ties to the
/// lowest total power and then the lexicographically first assignment.
pub fn co_states(aggregate: &[f64], models: &[ApplianceStateModel]) -> Result<Vec<Vec<usize>>> {
    let space = JointSpace::new(models, CO_MAX_COMBINATIONS, "use fewer states per appliance")?;
    let mut combos: Vec<(f64, usize)> = (0..space.size())
        .map(|j| (joint_power(models, &space.decompose(j)), j))
        .collect();
    combos.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(aggregate
        .iter()
        .map(|&y| {
            let hi = combos.partition_point(|c| c.0 < y);
            let upper = combos.get(hi);
            let lower = hi.checked_sub(1).map(|i| {
                let s = combos[i].0;
                &combos[combos.partition_point(|c| c.0 < s)]
            });
            let pick = match (lower, upper) {
                (Some(l), Some(u)) => {
                    if y - l.0 <= u.0 - y {
                        l
                    } else {
                        u
                    }
                }
                (Some(l), None) => l,
                (None, Some(u)) => u,
                (None, None) => unreachable!("joint space is never empty"),
            };
            space.decompose(pick.1)
        })
        .collect())
}

/// Per-appliance state-power estimates from combinatorial optimisation.
pub fn co_disaggregate(aggregate: &[f64], models: &[ApplianceStateModel]) -> Result<Vec<Vec<f64>>> {
    Ok(per_appliance(models, &co_states(aggregate, models)?))
}

/// Precomputed log-space tables for the joint chain.
pub struct Fhmm<'a> {
    models: &'a [ApplianceStateModel],
    space: JointSpace,
    digits: Vec<Vec<usize>>,
    mean: Vec<f64>,
    var: Vec<f64>,
    log_initial: Vec<f64>,
    log_trans: Vec<Vec<Vec<f64>>>,
}

impl<'a> Fhmm<'a> {
    pub fn new(models: &'a [ApplianceStateModel]) -> Result<Self> {
        let space = JointSpace::new(models, FHMM_MAX_JOINT_STATES, "use CO or fewer states")?;
        let digits: Vec<Vec<usize>> = (0..space.size()).map(|j| space.decompose(j)).collect();
        let mean = digits.iter().map(|d| joint_power(models, d)).collect();
        let var = digits
            .iter()
            .map(|d| models.iter().zip(d).map(|(m, &s)| m.emission_std[s].powi(2)).sum())
            .collect();
        let log_initial = digits
            .iter()
            .map(|d| models.iter().zip(d).map(|(m, &s)| m.initial[s].ln()).sum())
            .collect();
        let log_trans = models
            .iter()
            .map(|m| m.transition.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect())
            .collect();
        Ok(Fhmm {
            models,
            space,
            digits,
            mean,
            var,
            log_initial,
            log_trans,
        })
    }

    pub fn joint_states(&self) -> usize {
        self.space.size()
    }

    pub fn decompose(&self, joint: usize) -> &[usize] {
        &self.digits[joint]
    }

    pub fn log_emission(&self, joint: usize, y: f64) -> f64 {
        let v = self.var[joint];
        -0.5 * ((y - self.mean[joint]).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln())
    }

    pub fn log_transition(&self, from: usize, to: usize) -> f64 {
        let (a, b) = (&self.digits[from], &self.digits[to]);
        self.log_trans.iter().enumerate().map(|(i, t)| t[a[i]][b[i]]).sum()
    }

    pub fn log_initial(&self, joint: usize) -> f64 {
        self.log_initial[joint]
    }

    /// Joint log-probability of `path` together with `aggregate`.
    pub fn path_log_prob(&self, aggregate: &[f64], path: &[usize]) -> f64 {
        let mut lp = 0.0;
        for (t, (&y, &s)) in aggregate.iter().zip(path).enumerate() {
            lp += if t == 0 { self.log_initial(s) } else { self.log_transition(path[t - 1], s) };
            lp += self.log_emission(s, y);
        }
        lp
    }

    /// Exact Viterbi over the joint chain; ties go to the lowest joint index.
    pub fn viterbi(&self, aggregate: &[f64]) -> (Vec<usize>, f64) {
        let k = self.joint_states();
        if aggregate.is_empty() {
            return (Vec::new(), 0.0);
        }
        let mut delta: Vec<f64> = (0..k).map(|j| self.log_initial(j) + self.log_emission(j, aggregate[0])).collect();
        let mut back: Vec<Vec<u32>> = Vec::with_capacity(aggregate.len());
        let trans: Option<Vec<f64>> = (k <= 1024).then(|| {
            let mut m = vec![0.0; k * k];
            for from in 0..k {
                for to in 0..k {
                    m[from * k + to] = self.log_transition(from, to);
                }
            }
            m
        });
        for &y in &aggregate[1..] {
            let mut next = vec![f64::NEG_INFINITY; k];
            let mut arg = vec![0u32; k];
            for to in 0..k {
                let (mut best, mut best_from) = (f64::NEG_INFINITY, 0);
                for (from, &d) in delta.iter().enumerate() {
                    let lt = match &trans {
                        Some(m) => m[from * k + to],
                        None => self.log_transition(from, to),
                    };
                    let score = d + lt;
                    if score > best {
                        best = score;
                        best_from = from;
                    }
                }
                next[to] = best + self.log_emission(to, y);
                arg[to] = best_from as u32;
            }
            back.push(arg);
            delta = next;
        }
        let mut last = 0;
        for (j, &d) in delta.iter().enumerate() {
            if d > delta[last] {
                last = j;
            }
        }
        let score = delta[last];
        let mut path = vec![last; aggregate.len()];
        for t in (1..aggregate.len()).rev() {
            path[t - 1] = back[t - 1][path[t]] as usize;
        }
        (path, score)
    }

    pub fn models(&self) -> &[ApplianceStateModel] {
        self.models
    }
}

/// Per-appliance state-power estimates from the decoded FHMM path.
pub fn fhmm_disaggregate(aggregate: &[f64], models: &[ApplianceStateModel]) -> Result<Vec<Vec<f64>>> {
    let fhmm = Fhmm::new(models)?;
    let (path, _) = fhmm.viterbi(aggregate);
    let states: Vec<Vec<usize>> = path.iter().map(|&j| fhmm.decompose(j).to_vec()).collect();
    Ok(per_appliance(models, &states))
}
