//! Client sampling for broadcast rounds.

use std::collections::BTreeSet;

use rand::Rng;

use super::{FedCoreError, SamplerKind};
use crate::msgflow::ParticipantId;
use crate::simnet::ClientProfile;

/// Draw `k` distinct idle clients.
///
/// `profiles` covers the whole population in slot order; `idle` holds the
/// eligible ids. `version` picks the quantile bucket for the grouped
/// sampler, so repeated calls within one server version stay in one group.
pub fn sample_clients<R: Rng>(
    sampler: &SamplerKind,
    profiles: &[ClientProfile],
    idle: &BTreeSet<ParticipantId>,
    k: usize,
    version: u64,
    rng: &mut R,
) -> Result<Vec<ParticipantId>, FedCoreError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if idle.len() < k {
        return Err(FedCoreError::InsufficientClients {
            requested: k,
            idle: idle.len(),
        });
    }
    match *sampler {
        SamplerKind::Uniform => {
            let pool: Vec<ParticipantId> = idle.iter().copied().collect();
            Ok(draw_uniform(pool, k, rng))
        }
        SamplerKind::ResponsivenessRelated => {
            let mut pool: Vec<(ParticipantId, f64)> = idle
                .iter()
                .map(|&id| (id, profile_of(profiles, id).speed_score()))
                .collect();
            let mut picked = Vec::with_capacity(k);
            for _ in 0..k {
                let total: f64 = pool.iter().map(|(_, w)| w).sum();
                let mut ticket = rng.random_range(0.0..total);
                let mut chosen = pool.len() - 1;
                for (i, (_, w)) in pool.iter().enumerate() {
                    if ticket < *w {
                        chosen = i;
                        break;
                    }
                    ticket -= w;
                }
                picked.push(pool.swap_remove(chosen).0);
            }
            Ok(picked)
        }
        SamplerKind::Grouped { num_groups } => {
            let buckets = speed_buckets(profiles, num_groups);
            // Round-robin by version; scan forward when the preferred
            // bucket cannot supply k idle clients.
            for offset in 0..num_groups {
                let b = (version as usize + offset) % num_groups;
                let pool: Vec<ParticipantId> = buckets[b]
                    .iter()
                    .copied()
                    .filter(|id| idle.contains(id))
                    .collect();
                if pool.len() >= k {
                    return Ok(draw_uniform(pool, k, rng));
                }
            }
            Err(FedCoreError::InsufficientClients {
                requested: k,
                idle: idle.len(),
            })
        }
    }
}

/// Contiguous speed-score buckets over the whole population, slowest first.
/// Ties break by id so the bucketing is stable across runs.
fn speed_buckets(profiles: &[ClientProfile], num_groups: usize) -> Vec<Vec<ParticipantId>> {
    let mut order: Vec<&ClientProfile> = profiles.iter().collect();
    order.sort_by(|a, b| {
        a.speed_score()
            .total_cmp(&b.speed_score())
            .then(a.id.cmp(&b.id))
    });
    let n = order.len();
    let mut buckets = Vec::with_capacity(num_groups);
    for b in 0..num_groups {
        let lo = b * n / num_groups;
        let hi = (b + 1) * n / num_groups;
        buckets.push(order[lo..hi].iter().map(|p| p.id).collect());
    }
    buckets
}

fn draw_uniform<R: Rng>(mut pool: Vec<ParticipantId>, k: usize, rng: &mut R) -> Vec<ParticipantId> {
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.random_range(0..pool.len());
        picked.push(pool.swap_remove(i));
    }
    picked
}

fn profile_of(profiles: &[ClientProfile], id: ParticipantId) -> &ClientProfile {
    profiles
        .iter()
        .find(|p| p.id == id)
        .expect("sampled id has a profile")
}
