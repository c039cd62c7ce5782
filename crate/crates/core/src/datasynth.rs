//! Synthetic classification pools, IID and Dirichlet partitions, and the
//! coupling of rare labels to slow clients.
//!
//! All generation is seed-deterministic: two calls with the same arguments
//! yield identical bytes.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::learnkit::{Dataset, Splits};
use crate::simnet::{ClientProfile, SeededRng};

#[derive(Error, Debug)]
pub enum DataError {
    #[error("partition error: {0}")]
    Partition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid pool: {0}")]
    Pool(String),
}

/// A shared instance pool that partitions index into.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    num_classes: usize,
}

impl LabeledPool {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if features.len() != labels.len() {
            return Err(DataError::Pool(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.is_empty() {
            return Err(DataError::Pool("pool is empty".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|r| r.len() != dim) {
            return Err(DataError::Pool("ragged feature rows".into()));
        }
        if num_classes < 2 {
            return Err(DataError::Pool("num_classes must be >= 2".into()));
        }
        let mut seen = vec![false; num_classes];
        for &label in &labels {
            let c = label as usize;
            if label.fract() != 0.0 || label < 0.0 || c >= num_classes {
                return Err(DataError::Pool(format!(
                    "label {label} is not a class index"
                )));
            }
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DataError::Pool(format!("class {missing} has no instances")));
        }
        Ok(LabeledPool {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    /// Copies the given pool rows into a `Dataset`, split in list order.
    pub fn materialize(
        &self,
        train: &[usize],
        validation: &[usize],
        test: &[usize],
    ) -> Result<Dataset, DataError> {
        let mut features = Vec::with_capacity(train.len() + validation.len() + test.len());
        let mut labels = Vec::with_capacity(features.capacity());
        for &i in train.iter().chain(validation).chain(test) {
            if i >= self.len() {
                return Err(DataError::Pool(format!("row {i} out of range")));
            }
            features.push(self.features[i].clone());
            labels.push(self.labels[i]);
        }
        let splits = Splits {
            train: (0..train.len()).collect(),
            validation: (train.len()..train.len() + validation.len()).collect(),
            test: (train.len() + validation.len()..labels.len()).collect(),
        };
        Dataset::new(features, labels, self.num_classes, splits)
            .map_err(|e| DataError::Pool(e.to_string()))
    }
}

/// Disjoint covering assignment of pool rows to clients, by client slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    lists: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.lists.len()
    }

    pub fn client(&self, slot: usize) -> &[usize] {
        &self.lists[slot]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    /// Asserts the disjoint-cover invariant against a pool of `n` rows.
    pub fn check_cover(&self, n: usize) -> Result<(), DataError> {
        let mut seen = vec![false; n];
        let mut covered = 0usize;
        for (slot, list) in self.lists.iter().enumerate() {
            for &i in list {
                if i >= n {
                    return Err(DataError::Partition(format!(
                        "client {slot} holds out-of-range row {i}"
                    )));
                }
                if seen[i] {
                    return Err(DataError::Partition(format!(
                        "row {i} assigned to two clients"
                    )));
                }
                seen[i] = true;
                covered += 1;
            }
        }
        if covered != n {
            return Err(DataError::Partition(format!(
                "partition covers {covered} of {n} rows"
            )));
        }
        Ok(())
    }
}

/// Class-conditional unit Gaussians with means at `separation * e_c`.
///
/// Requires `dim >= num_classes` so every class has its own axis; instance
/// counts are split evenly with earlier classes taking the remainder.
pub fn gen_classification(
    num_classes: usize,
    dim: usize,
    n_total: usize,
    separation: f64,
    seed: u64,
) -> LabeledPool {
    assert!(num_classes >= 2, "need at least two classes");
    assert!(
        dim >= num_classes,
        "need dim >= num_classes for simplex means"
    );
    assert!(
        n_total >= num_classes,
        "need at least one instance per class"
    );
    assert!(separation >= 0.0 && separation.is_finite());

    let seeds = SeededRng::new(seed);
    let mut features = Vec::with_capacity(n_total);
    let mut labels = Vec::with_capacity(n_total);
    for c in 0..num_classes {
        let count = n_total / num_classes + usize::from(c < n_total % num_classes);
        let mut rng = seeds.stream("datagen", c as u64, 0);
        for _ in 0..count {
            let mut row = vec![0.0; dim];
            for x in &mut row {
                *x = StandardNormal.sample(&mut rng);
            }
            row[c] += separation;
            features.push(row);
            labels.push(c as f64);
        }
    }
    LabeledPool::new(features, labels, num_classes).expect("generated pool is well-formed")
}

fn check_partition_args(
    pool: &LabeledPool,
    num_clients: usize,
    min_size: usize,
) -> Result<usize, DataError> {
    if num_clients == 0 {
        return Err(DataError::Partition("need at least one client".into()));
    }
    let min_size = min_size.max(1);
    if pool.len() < num_clients * min_size {
        return Err(DataError::Partition(format!(
            "pool of {} rows cannot give {} clients {} rows each",
            pool.len(),
            num_clients,
            min_size
        )));
    }
    Ok(min_size)
}

/// Shuffles the pool and deals rows round-robin, so client sizes differ by
/// at most one.
pub fn partition_iid(
    pool: &LabeledPool,
    num_clients: usize,
    min_size: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    check_partition_args(pool, num_clients, min_size)?;
    let seeds = SeededRng::new(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seeds.stream("iid", 0, 0));
    let mut lists = vec![Vec::new(); num_clients];
    for (pos, idx) in order.into_iter().enumerate() {
        lists[pos % num_clients].push(idx);
    }
    Ok(Partition { lists })
}

/// Label-skewed partition: for every class, a Dirichlet(alpha) proportion
/// vector across clients decides how that class's rows are split.
///
/// Proportions are resampled up to 100 times until every client holds at
/// least `min_size` rows; after that, rows are moved from the largest
/// clients round-robin until the guard holds.
pub fn partition_dirichlet(
    pool: &LabeledPool,
    num_clients: usize,
    alpha: f64,
    min_size: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    let min_size = check_partition_args(pool, num_clients, min_size)?;
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(DataError::Config(format!("alpha {alpha} must be positive")));
    }
    let seeds = SeededRng::new(seed);
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated above");

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.num_classes()];
    for i in 0..pool.len() {
        by_class[pool.label(i) as usize].push(i);
    }

    let mut lists = Vec::new();
    for attempt in 0..100u64 {
        let mut rng = seeds.stream("dirichlet", 0, attempt);
        lists = vec![Vec::new(); num_clients];
        for rows in &by_class {
            let mut weights: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            if total <= 0.0 || total.is_nan() {
                weights = vec![1.0; num_clients];
            }
            let total: f64 = weights.iter().sum();
            let mut cursor = 0usize;
            let mut cum = 0.0;
            for (slot, w) in weights.iter().enumerate() {
                cum += w / total;
                let end = if slot + 1 == num_clients {
                    rows.len()
                } else {
                    ((cum * rows.len() as f64).round() as usize).clamp(cursor, rows.len())
                };
                lists[slot].extend_from_slice(&rows[cursor..end]);
                cursor = end;
            }
        }
        if lists.iter().all(|l| l.len() >= min_size) {
            return Ok(Partition { lists });
        }
    }

    // Top-up: feasibility is guaranteed by the N >= M * min_size check.
    while let Some(poor) = lists.iter().position(|l| l.len() < min_size) {
        let rich = (0..lists.len())
            .max_by_key(|&i| lists[i].len())
            .expect("at least one client");
        let moved = lists[rich].pop().expect("largest client is non-empty");
        lists[poor].push(moved);
    }
    Ok(Partition { lists })
}

/// Moves every instance of the rare classes onto the slowest clients
/// (bottom `slow_fraction` by speed score), swapping a non-rare instance
/// back for each move so client sizes stay close to the original partition.
pub fn couple_rare_labels(
    pool: &LabeledPool,
    partition: &Partition,
    profiles: &[ClientProfile],
    rare_labels: &[usize],
    slow_fraction: f64,
) -> Result<Partition, DataError> {
    if profiles.len() != partition.num_clients() {
        return Err(DataError::Config(format!(
            "{} profiles for {} clients",
            profiles.len(),
            partition.num_clients()
        )));
    }
    for &c in rare_labels {
        if c >= pool.num_classes() {
            return Err(DataError::Config(format!("rare label {c} is not a class")));
        }
    }
    if rare_labels.len() >= pool.num_classes() {
        return Err(DataError::Config(
            "rare labels must be a proper subset".into(),
        ));
    }
    if rare_labels.is_empty() {
        return Ok(partition.clone());
    }
    if !(0.0..=1.0).contains(&slow_fraction) {
        return Err(DataError::Config(format!(
            "slow_fraction {slow_fraction} outside [0, 1]"
        )));
    }
    let m = partition.num_clients();
    let slow_count = (slow_fraction * m as f64).floor() as usize;
    if slow_count == 0 {
        return Err(DataError::Config(
            "slow_fraction leaves no slow clients to hold the rare labels".into(),
        ));
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        profiles[a]
            .speed_score()
            .total_cmp(&profiles[b].speed_score())
            .then(a.cmp(&b))
    });
    let mut is_slow = vec![false; m];
    for &slot in &order[..slow_count] {
        is_slow[slot] = true;
    }

    let is_rare = |idx: usize| rare_labels.contains(&(pool.label(idx) as usize));
    let mut lists = partition.lists.clone();
    let mut wheel = 0usize;
    let slow_slots: Vec<usize> = (0..m).filter(|&s| is_slow[s]).collect();
    for donor in 0..m {
        if is_slow[donor] {
            continue;
        }
        let moved: Vec<usize> = lists[donor]
            .iter()
            .copied()
            .filter(|&i| is_rare(i))
            .collect();
        lists[donor].retain(|&i| !is_rare(i));
        for idx in moved {
            let target = slow_slots[wheel % slow_slots.len()];
            wheel += 1;
            lists[target].push(idx);
            // Swap one non-rare instance back to keep sizes steady.
            if let Some(pos) = lists[target].iter().rposition(|&i| !is_rare(i)) {
                let returned = lists[target].remove(pos);
                lists[donor].push(returned);
            }
        }
    }
    Ok(Partition { lists })
}

/// Mean over clients of the Shannon entropy (nats) of their label mix.
pub fn mean_label_entropy(pool: &LabeledPool, partition: &Partition) -> f64 {
    let mut total = 0.0;
    for list in &partition.lists {
        if list.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; pool.num_classes()];
        for &i in list {
            counts[pool.label(i) as usize] += 1;
        }
        let n = list.len() as f64;
        let entropy: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        total += entropy;
    }
    total / partition.num_clients() as f64
}

/// Tab-separated pool dump: `label` column then one column per feature.
pub fn pool_to_tsv(pool: &LabeledPool) -> String {
    let mut out = String::from("label");
    for j in 0..pool.dim() {
        out.push_str(&format!("\tx{j}"));
    }
    out.push('\n');
    for i in 0..pool.len() {
        out.push_str(&format!("{}", pool.label(i) as usize));
        for x in pool.row(i) {
            out.push_str(&format!("\t{x}"));
        }
        out.push('\n');
    }
    out
}

/// Tab-separated assignment dump: one `client  pool_index` row per instance.
pub fn partition_to_tsv(partition: &Partition) -> String {
    let mut out = String::from("client\tpool_index\n");
    for (slot, list) in partition.lists.iter().enumerate() {
        for &i in list {
            out.push_str(&format!("{slot}\t{i}\n"));
        }
    }
    out
}
