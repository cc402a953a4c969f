//! Dataset ingestion, leave-last-out splitting, and a synthetic generator
//! with a planted cluster-level causal DAG.
//!
//! Interaction files are UTF-8 TSV with columns
//! `user_id<TAB>item_id<TAB>timestamp` (integer timestamp), one interaction
//! per line. Rows sharing a user and timestamp merge into one multi-hot step;
//! steps are ordered by ascending timestamp. Sequences shorter than three
//! steps are dropped (the split needs train/valid/test per user).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::causal_graph::BinaryDag;
use crate::error::{Error, Result};
use crate::item_space::FeatureTable;

/// Minimum steps a sequence needs to survive ingestion.
pub const MIN_SEQUENCE_LEN: usize = 3;

/// Per-user, time-ordered item-set sequences over a fixed vocabulary.
///
/// Users and items are referenced by dense indices; the id tables map back
/// to the external identifiers. Steps hold sorted, deduplicated item indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub sequences: Vec<Vec<Vec<usize>>>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// All items a user interacted with, deduplicated.
    pub fn user_item_set(&self, user: usize) -> Vec<usize> {
        let mut items: Vec<usize> = self.sequences[user].iter().flatten().copied().collect();
        items.sort_unstable();
        items.dedup();
        items
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadStats {
    /// Sequences discarded for having fewer than [`MIN_SEQUENCE_LEN`] steps.
    pub dropped_short_sequences: usize,
}

/// Parses a TSV interaction file. Malformed lines report their 1-based line
/// number. Items appearing only in dropped sequences are excluded from the
/// vocabulary.
pub fn load_sequences(path: &Path) -> Result<(InteractionDataset, LoadStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_sequences(&text)
}

pub fn parse_sequences(text: &str) -> Result<(InteractionDataset, LoadStats)> {
    // user -> timestamp -> item ids
    let mut per_user: BTreeMap<String, BTreeMap<i64, Vec<String>>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected user<TAB>item<TAB>timestamp, got {} fields", fields.len()),
            });
        }
        let ts: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad timestamp {:?}", fields[2]),
        })?;
        per_user
            .entry(fields[0].to_string())
            .or_default()
            .entry(ts)
            .or_default()
            .push(fields[1].to_string());
    }

    let mut stats = LoadStats::default();
    let mut kept: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    for (user, by_ts) in per_user {
        let steps: Vec<Vec<String>> = by_ts.into_values().collect();
        if steps.len() < MIN_SEQUENCE_LEN {
            stats.dropped_short_sequences += 1;
        } else {
            kept.push((user, steps));
        }
    }

    // Vocabulary from retained sequences, in lexical id order.
    let mut item_ids: Vec<String> = kept
        .iter()
        .flat_map(|(_, steps)| steps.iter().flatten().cloned())
        .collect();
    item_ids.sort();
    item_ids.dedup();
    let index_of: BTreeMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut user_ids = Vec::with_capacity(kept.len());
    let mut sequences = Vec::with_capacity(kept.len());
    for (user, steps) in kept {
        user_ids.push(user);
        sequences.push(
            steps
                .into_iter()
                .map(|items| {
                    let mut step: Vec<usize> =
                        items.iter().map(|id| index_of[id.as_str()]).collect();
                    step.sort_unstable();
                    step.dedup();
                    step
                })
                .collect(),
        );
    }

    Ok((InteractionDataset { user_ids, item_ids, sequences }, stats))
}

/// Writes a dataset back to the TSV interaction format with synthetic
/// ascending timestamps (step index within each user).
pub fn write_sequences(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (u, seq) in ds.sequences.iter().enumerate() {
        for (t, step) in seq.iter().enumerate() {
            for &item in step {
                out.push_str(&format!(
                    "{}\t{}\t{}\n",
                    ds.user_ids[u], ds.item_ids[item], t
                ));
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Leave-last-out split: per user, the last step is held out for testing,
/// the second-last for validation, and the remainder trains.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: InteractionDataset,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

pub fn split_leave_last(ds: &InteractionDataset) -> Result<SplitDataset> {
    let mut train_seqs = Vec::with_capacity(ds.sequences.len());
    let mut valid = Vec::with_capacity(ds.sequences.len());
    let mut test = Vec::with_capacity(ds.sequences.len());
    for (u, seq) in ds.sequences.iter().enumerate() {
        if seq.len() < MIN_SEQUENCE_LEN {
            return Err(Error::Usage(format!(
                "user {} has only {} steps; split needs at least {MIN_SEQUENCE_LEN}",
                ds.user_ids[u],
                seq.len()
            )));
        }
        let n = seq.len();
        train_seqs.push(seq[..n - 2].to_vec());
        valid.push(seq[n - 2].clone());
        test.push(seq[n - 1].clone());
    }
    Ok(SplitDataset {
        train: InteractionDataset {
            user_ids: ds.user_ids.clone(),
            item_ids: ds.item_ids.clone(),
            sequences: train_seqs,
        },
        valid,
        test,
    })
}

/// Recipe for a synthetic benchmark with a planted cluster-level DAG.
///
/// Sequences start from an item of a root cluster. Each later step draws,
/// with probability `trigger_p`, an item from a cluster that has a parent
/// cluster already present in the history (uniform over such clusters, then
/// uniform over the cluster's items; a uniform item when none is eligible),
/// and otherwise a uniform noise item. Independently, `noise_p` replaces the
/// drawn item with a uniform one. Lengths are `MIN_SEQUENCE_LEN` plus a
/// geometric tail with mean `mean_len`.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub dag: BinaryDag,
    pub items_per_cluster: usize,
    pub users: usize,
    pub trigger_p: f64,
    pub noise_p: f64,
    pub mean_len: f64,
    pub seed: u64,
    /// Raw feature dimension for [`gen_features`].
    pub feature_dim: usize,
    /// Noise scale around each cluster centroid; zero gives identical
    /// features within a cluster.
    pub feature_noise: f64,
}

impl SyntheticSpec {
    pub fn k(&self) -> usize {
        self.dag.n()
    }

    pub fn n_items(&self) -> usize {
        self.k() * self.items_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("trigger_p", self.trigger_p), ("noise_p", self.noise_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.items_per_cluster == 0 || self.users == 0 {
            return Err(Error::Config("items_per_cluster and users must be positive".into()));
        }
        if self.mean_len < MIN_SEQUENCE_LEN as f64 {
            return Err(Error::Config(format!(
                "mean_len must be >= {MIN_SEQUENCE_LEN}, got {}",
                self.mean_len
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generated benchmark: the dataset, the planted cluster DAG, and the true
/// item-to-cluster assignment.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: InteractionDataset,
    pub ground_truth: BinaryDag,
    pub assignments: Vec<usize>,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let k = spec.k();
    let n_items = spec.n_items();
    let cluster_of = |item: usize| item / spec.items_per_cluster;
    let roots: Vec<usize> = (0..k)
        .filter(|&c| spec.dag.parents_of(c).is_empty())
        .collect();
    if roots.is_empty() {
        return Err(Error::Usage("planted DAG has no root cluster".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geom_p = 1.0 / (spec.mean_len - MIN_SEQUENCE_LEN as f64 + 1.0);

    let mut sequences = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let extra = sample_geometric(&mut rng, geom_p);
        let len = MIN_SEQUENCE_LEN + extra;
        let mut seq: Vec<Vec<usize>> = Vec::with_capacity(len);

        let root = roots[rng.gen_range(0..roots.len())];
        let first = root * spec.items_per_cluster + rng.gen_range(0..spec.items_per_cluster);
        seq.push(vec![first]);
        let mut present = vec![false; k];
        present[cluster_of(first)] = true;

        for _ in 1..len {
            let item = if rng.gen_bool(spec.trigger_p) {
                let eligible: Vec<usize> = (0..k)
                    .filter(|&c| spec.dag.parents_of(c).iter().any(|&p| present[p]))
                    .collect();
                if eligible.is_empty() {
                    rng.gen_range(0..n_items)
                } else {
                    let c = eligible[rng.gen_range(0..eligible.len())];
                    c * spec.items_per_cluster + rng.gen_range(0..spec.items_per_cluster)
                }
            } else {
                rng.gen_range(0..n_items)
            };
            let item = if spec.noise_p > 0.0 && rng.gen_bool(spec.noise_p) {
                rng.gen_range(0..n_items)
            } else {
                item
            };
            seq.push(vec![item]);
            present[cluster_of(item)] = true;
        }
        sequences.push(seq);
    }

    let dataset = InteractionDataset {
        user_ids: (0..spec.users).map(|u| format!("u{u:05}")).collect(),
        item_ids: (0..n_items).map(|i| synthetic_item_id(i, spec.items_per_cluster)).collect(),
        sequences,
    };
    Ok(SyntheticData {
        dataset,
        ground_truth: spec.dag.clone(),
        assignments: (0..n_items).map(cluster_of).collect(),
    })
}

/// Item ids carry their planted cluster for readability: `c<cluster>_i<slot>`.
fn synthetic_item_id(item: usize, items_per_cluster: usize) -> String {
    format!("c{}_i{:03}", item / items_per_cluster, item % items_per_cluster)
}

/// Failures before the first success of a Bernoulli(p) chain.
fn sample_geometric(rng: &mut ChaCha8Rng, p: f64) -> usize {
    let mut count = 0;
    while !rng.gen_bool(p.clamp(1e-9, 1.0)) {
        count += 1;
        if count > 10_000 {
            break;
        }
    }
    count
}

/// Cluster-shifted raw features: one centroid per cluster (standard normal
/// coordinates) plus i.i.d. noise of scale `noise`. Deterministic by seed.
pub fn gen_features(
    item_ids: &[String],
    assignments: &[usize],
    k: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<FeatureTable> {
    if dim == 0 {
        return Err(Error::Config("feature dim must be >= 1".into()));
    }
    if item_ids.len() != assignments.len() {
        return Err(Error::Dimension(format!(
            "{} items but {} assignments",
            item_ids.len(),
            assignments.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut data = crate::diffnum::Matrix::zeros(item_ids.len(), dim);
    for (i, &c) in assignments.iter().enumerate() {
        if c >= k {
            return Err(Error::Usage(format!("assignment {c} out of range for k={k}")));
        }
        for j in 0..dim {
            let n: f64 = StandardNormal.sample(&mut rng);
            data.set(i, j, centroids[c][j] + noise * n);
        }
    }
    FeatureTable::new(item_ids.to_vec(), data)
}

/// Ground-truth sidecar: `item_id,cluster_id` rows.
pub fn write_assignments(ids: &[String], assignments: &[usize], path: &Path) -> Result<()> {
    let mut out = String::from("item_id,cluster_id\n");
    for (id, c) in ids.iter().zip(assignments.iter()) {
        out.push_str(&format!("{id},{c}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_assignments(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if lineno == 1 || line.trim().is_empty() {
            continue;
        }
        let (id, c) = line.split_once(',').ok_or(Error::Parse {
            line: lineno,
            msg: "expected item_id,cluster_id".into(),
        })?;
        let cluster: usize = c.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad cluster id {c:?}"),
        })?;
        out.push((id.to_string(), cluster));
    }
    Ok(out)
}
