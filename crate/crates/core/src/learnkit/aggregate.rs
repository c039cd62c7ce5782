//! Server-side combination rules: weighted averaging, a robust selection
//! rule, parameter-subset exchange, and additive noise on outgoing deltas.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LearnError, ParamVector};

/// One buffered contribution: a delta plus its weighting inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateEntry {
    pub delta: ParamVector,
    pub num_samples: u64,
    /// Multiplier applied on top of `num_samples`, one for fresh updates.
    pub staleness_weight: f64,
}

/// Weighted model averaging: `base + sum(w_i * delta_i) / sum(w_i)` with
/// `w_i = num_samples_i * staleness_weight_i`.
pub fn fedavg_aggregate(
    base: &ParamVector,
    entries: &[AggregateEntry],
) -> Result<ParamVector, LearnError> {
    if entries.is_empty() {
        return Err(LearnError::EmptyAggregation);
    }
    let mut total = 0.0;
    let mut acc = base.zeros_like();
    for entry in entries {
        if entry.staleness_weight < 0.0 || !entry.staleness_weight.is_finite() {
            return Err(LearnError::Config(format!(
                "staleness weight {} is not a finite non-negative number",
                entry.staleness_weight
            )));
        }
        let w = entry.num_samples as f64 * entry.staleness_weight;
        if w == 0.0 {
            continue;
        }
        acc.add_scaled(&entry.delta, w)?;
        total += w;
    }
    if total == 0.0 {
        return Err(LearnError::EmptyAggregation);
    }
    acc.scale(1.0 / total);
    let mut out = base.clone();
    out.add_scaled(&acc, 1.0)?;
    Ok(out)
}

/// Robust selection: returns the update whose summed squared distance to its
/// `n - f - 2` nearest peers is smallest, lowest index on ties.
///
/// Requires `n >= f + 3` so every score covers at least one neighbor.
pub fn krum_aggregate(updates: &[ParamVector], f: usize) -> Result<ParamVector, LearnError> {
    let n = updates.len();
    if n < f + 3 {
        return Err(LearnError::InsufficientUpdates { n, f });
    }
    let keep = n - f - 2;
    let mut best: Option<(f64, usize)> = None;
    for i in 0..n {
        let mut dists = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j != i {
                dists.push(updates[i].l2_distance_sq(&updates[j])?);
            }
        }
        dists.sort_by(f64::total_cmp);
        let score: f64 = dists[..keep].iter().sum();
        match best {
            Some((s, _)) if score >= s => {}
            _ => best = Some((score, i)),
        }
    }
    let (_, idx) = best.expect("n >= 3 checked above");
    Ok(updates[idx].clone())
}

/// Keeps only the groups named in `share_list`, in the vector's own order.
pub fn filter_shared(
    params: &ParamVector,
    share_list: &BTreeSet<String>,
) -> Result<ParamVector, LearnError> {
    if share_list.is_empty() {
        return Err(LearnError::Config("share list is empty".into()));
    }
    for name in share_list {
        if params.group(name).is_none() {
            return Err(LearnError::Config(format!(
                "share list names unknown group `{name}`"
            )));
        }
    }
    ParamVector::new(
        params
            .groups()
            .iter()
            .filter(|(name, _)| share_list.contains(name))
            .cloned()
            .collect(),
    )
}

/// Writes the groups of `shared` over the matching groups of `full`,
/// leaving unshared groups untouched.
pub fn merge_shared(full: &ParamVector, shared: &ParamVector) -> Result<ParamVector, LearnError> {
    let mut out = full.clone();
    for (name, vals) in shared.groups() {
        match out.group_mut(name) {
            Some(dst) if dst.len() == vals.len() => dst.copy_from_slice(vals),
            Some(_) => {
                return Err(LearnError::ShapeMismatch {
                    expected: full.shape_desc(),
                    got: shared.shape_desc(),
                })
            }
            None => {
                return Err(LearnError::Config(format!(
                    "shared payload names unknown group `{name}`"
                )))
            }
        }
    }
    Ok(out)
}

/// Adds iid Gaussian noise of the given standard deviation to every entry.
/// A zero sigma returns the delta unchanged.
pub fn inject_dp_noise<R: Rng>(
    delta: &ParamVector,
    sigma: f64,
    rng: &mut R,
) -> Result<ParamVector, LearnError> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(LearnError::Config(format!(
            "dp sigma {sigma} is not a finite non-negative number"
        )));
    }
    if sigma == 0.0 {
        return Ok(delta.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated above");
    let mut out = delta.clone();
    let names: Vec<String> = out.groups().iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        for x in out.group_mut(name).expect("name from this vector") {
            *x += normal.sample(rng);
        }
    }
    Ok(out)
}
