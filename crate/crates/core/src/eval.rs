//! Ranking metrics, Markov-equivalence comparison, structural error, and
//! explanation ranking.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::causal_graph::BinaryDag;
use crate::error::{Error, Result};
use crate::model::{CauserModel, EvalCache};
use crate::seq_model::{filter_history, Ablation};

/// A ranked recommendation list against the held-out ground truth.
#[derive(Debug, Clone)]
pub struct RankResult {
    pub user: usize,
    /// Top-Z items, best first, all distinct.
    pub ranked: Vec<usize>,
    pub truth: BTreeSet<usize>,
    pub z: usize,
}

/// Harmonic mean of precision@Z and recall@Z; zero when nothing hits.
pub fn f1_at_z(result: &RankResult) -> Result<f64> {
    if result.z == 0 {
        return Err(Error::Usage("f1_at_z needs Z >= 1".into()));
    }
    if result.truth.is_empty() {
        return Err(Error::Usage("f1_at_z on an empty ground-truth set".into()));
    }
    let hits = result
        .ranked
        .iter()
        .filter(|i| result.truth.contains(i))
        .count() as f64;
    if hits == 0.0 {
        return Ok(0.0);
    }
    let precision = hits / result.z as f64;
    let recall = hits / result.truth.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// DCG over the ranked list divided by the ideal DCG for this truth set.
pub fn ndcg_at_z(result: &RankResult) -> Result<f64> {
    if result.z == 0 {
        return Err(Error::Usage("ndcg_at_z needs Z >= 1".into()));
    }
    if result.truth.is_empty() {
        return Err(Error::Usage("ndcg_at_z on an empty ground-truth set".into()));
    }
    let dcg: f64 = result
        .ranked
        .iter()
        .enumerate()
        .map(|(idx, item)| {
            if result.truth.contains(item) {
                1.0 / ((idx + 2) as f64).log2()
            } else {
                0.0
            }
        })
        .sum();
    let ideal: f64 = (0..result.truth.len().min(result.z))
        .map(|idx| 1.0 / ((idx + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

/// Scores every vocabulary item and returns the Z best; ties break toward
/// the lower item index.
pub fn rank_items(
    model: &CauserModel,
    cache: &EvalCache,
    history: &[Vec<usize>],
    user: usize,
    truth: &BTreeSet<usize>,
    z: usize,
    ablation: Ablation,
) -> Result<RankResult> {
    let n = model.n_items();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(n);
    for item in 0..n {
        let p = model.predict(history, user, item, cache, ablation)?;
        scored.push((item, p));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then(a.0.cmp(&b.0))
    });
    Ok(RankResult {
        user,
        ranked: scored.into_iter().take(z).map(|(i, _)| i).collect(),
        truth: truth.clone(),
        z,
    })
}

/// Metrics report over an evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub z: usize,
    pub f1: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
}

/// Evaluates held-out steps: for each user, the target step is ranked
/// against the full vocabulary given that user's preceding history. Users
/// with an empty target set are skipped and excluded from the denominator.
pub fn evaluate_heldout(
    model: &CauserModel,
    cache: &EvalCache,
    histories: &[Vec<Vec<usize>>],
    targets: &[Vec<usize>],
    z: usize,
    ablation: Ablation,
) -> Result<MetricsReport> {
    if histories.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} histories vs {} target steps",
            histories.len(),
            targets.len()
        )));
    }
    let mut f1_total = 0.0;
    let mut ndcg_total = 0.0;
    let mut evaluated = 0usize;
    for (user, (history, target)) in histories.iter().zip(targets.iter()).enumerate() {
        if target.is_empty() || history.is_empty() {
            continue;
        }
        let truth: BTreeSet<usize> = target.iter().copied().collect();
        let result = rank_items(model, cache, history, user, &truth, z, ablation)?;
        f1_total += f1_at_z(&result)?;
        ndcg_total += ndcg_at_z(&result)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Usage("no users were evaluable".into()));
    }
    Ok(MetricsReport {
        z,
        f1: f1_total / evaluated as f64,
        ndcg: ndcg_total / evaluated as f64,
        users_evaluated: evaluated,
    })
}

/// Undirected skeleton as a set of ordered pairs (i < j).
fn skeleton(dag: &BinaryDag) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for (i, j) in dag.edges() {
        out.insert((i.min(j), i.max(j)));
    }
    out
}

/// V-structures `i -> k <- j` with non-adjacent i, j, stored as
/// (min(i,j), k, max(i,j)).
fn v_structures(dag: &BinaryDag) -> BTreeSet<(usize, usize, usize)> {
    let adjacent = skeleton(dag);
    let mut out = BTreeSet::new();
    for k in 0..dag.n() {
        let parents = dag.parents_of(k);
        for a in 0..parents.len() {
            for b in a + 1..parents.len() {
                let (i, j) = (parents[a].min(parents[b]), parents[a].max(parents[b]));
                if !adjacent.contains(&(i, j)) {
                    out.insert((i, k, j));
                }
            }
        }
    }
    out
}

/// Same skeleton and same v-structures.
pub fn mec_equivalent(g1: &BinaryDag, g2: &BinaryDag) -> Result<bool> {
    if g1.n() != g2.n() {
        return Err(Error::Usage(format!(
            "mec_equivalent needs equal node counts, got {} and {}",
            g1.n(),
            g2.n()
        )));
    }
    Ok(skeleton(g1) == skeleton(g2) && v_structures(g1) == v_structures(g2))
}

/// Skeleton and v-structure differences between two DAGs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MecReport {
    pub equivalent: bool,
    pub skeleton_only_left: Vec<(usize, usize)>,
    pub skeleton_only_right: Vec<(usize, usize)>,
    pub v_structures_only_left: Vec<(usize, usize, usize)>,
    pub v_structures_only_right: Vec<(usize, usize, usize)>,
    pub shd: usize,
}

pub fn mec_report(g1: &BinaryDag, g2: &BinaryDag) -> Result<MecReport> {
    let equivalent = mec_equivalent(g1, g2)?;
    let (s1, s2) = (skeleton(g1), skeleton(g2));
    let (v1, v2) = (v_structures(g1), v_structures(g2));
    Ok(MecReport {
        equivalent,
        skeleton_only_left: s1.difference(&s2).copied().collect(),
        skeleton_only_right: s2.difference(&s1).copied().collect(),
        v_structures_only_left: v1.difference(&v2).copied().collect(),
        v_structures_only_right: v2.difference(&v1).copied().collect(),
        shd: shd(g1, g2)?,
    })
}

/// Structural Hamming distance: one count per node pair whose edge state
/// (absent, forward, backward) differs; a reversal costs one.
pub fn shd(g1: &BinaryDag, g2: &BinaryDag) -> Result<usize> {
    if g1.n() != g2.n() {
        return Err(Error::Usage(format!(
            "shd needs equal node counts, got {} and {}",
            g1.n(),
            g2.n()
        )));
    }
    let n = g1.n();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            let a = (g1.has_edge(i, j), g1.has_edge(j, i));
            let b = (g2.has_edge(i, j), g2.has_edge(j, i));
            if a != b {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// One explained history item with its contribution score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainEntry {
    pub item: usize,
    /// Original position of the step the item occurred in.
    pub step: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub entries: Vec<ExplainEntry>,
    /// True when every history step was masked away for this target.
    pub fully_skipped: bool,
}

/// Ranks the kept history items by their step's explanation score for a
/// target: causal effect times attention weight (one factor dropped under
/// the matching ablation). Ties break toward earlier steps, then lower item
/// indices.
pub fn explain(
    model: &CauserModel,
    cache: &EvalCache,
    history: &[Vec<usize>],
    user: usize,
    target: usize,
    n: usize,
    ablation: Ablation,
) -> Result<Explanation> {
    if history.is_empty() {
        return Err(Error::Usage("explain on an empty history".into()));
    }
    let filtered = filter_history(history, target, &cache.w_item, model.graph.epsilon);
    if filtered.is_fully_skipped() {
        return Ok(Explanation { entries: Vec::new(), fully_skipped: true });
    }

    // Re-run the kept-step recurrence to recover the attention weights.
    use crate::seq_model::{attention_weights, cell_step, CellState};
    let mut state = CellState::zero(model.cell_kind(), model.seq.d_h);
    let mut hidden = Vec::with_capacity(filtered.kept.len());
    for step in &filtered.kept {
        let x = model.seq.step_input(&step.items, &cache.vstar, user);
        state = cell_step(&state, &x, &model.seq)?;
        hidden.push(state.h.clone());
    }
    let alphas = attention_weights(&hidden, &model.seq.attn)?;

    let col: Vec<f64> = (0..model.n_items())
        .map(|i| cache.w_item.get(i, target))
        .collect();
    let mut entries = Vec::new();
    for (t, step) in filtered.kept.iter().enumerate() {
        let w_hat = crate::causal_graph::causal_effect(&step.items, &col, model.graph.epsilon);
        let score = match (ablation.no_att, ablation.no_causal) {
            (false, false) => w_hat * alphas[t],
            (true, false) => w_hat,
            (false, true) => alphas[t],
            (true, true) => 1.0,
        };
        for &item in &step.items {
            entries.push(ExplainEntry { item, step: step.index, score });
        }
    }
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.step.cmp(&b.step))
            .then(a.item.cmp(&b.item))
    });
    entries.truncate(n);
    Ok(Explanation { entries, fully_skipped: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rr(ranked: Vec<usize>, truth: Vec<usize>, z: usize) -> RankResult {
        RankResult {
            user: 0,
            ranked,
            truth: truth.into_iter().collect(),
            z,
        }
    }

    #[test]
    fn f1_single_hit() {
        // P = 0.2, R = 1 -> F1 = 1/3.
        let r = rr(vec![9, 1, 2, 3, 4], vec![9], 5);
        assert!((f1_at_z(&r).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_no_hits_is_zero() {
        let r = rr(vec![1, 2, 3, 4, 5], vec![9], 5);
        assert_eq!(f1_at_z(&r).unwrap(), 0.0);
    }

    #[test]
    fn f1_partial_truth() {
        // |A and B| = 1, Z = 5, |B| = 2 -> 2 * 0.2 * 0.5 / 0.7.
        let r = rr(vec![9, 1, 2, 3, 4], vec![9, 8], 5);
        assert!((f1_at_z(&r).unwrap() - 0.285_714_285_714).abs() < 1e-9);
    }

    #[test]
    fn f1_rejects_empty_truth() {
        let r = rr(vec![1], vec![], 1);
        assert!(f1_at_z(&r).is_err());
    }

    #[test]
    fn ndcg_closed_forms() {
        let top = rr(vec![9, 1, 2, 3, 4], vec![9], 5);
        assert!((ndcg_at_z(&top).unwrap() - 1.0).abs() < 1e-15);

        let third = rr(vec![1, 2, 9, 3, 4], vec![9], 5);
        assert!((ndcg_at_z(&third).unwrap() - 0.5).abs() < 1e-15);

        // Hits at ranks 2 and 4 with two relevant items.
        let two = rr(vec![1, 9, 2, 8, 3], vec![8, 9], 5);
        let expect = (1.0 / 3f64.log2() + 1.0 / 5f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg_at_z(&two).unwrap() - expect).abs() < 1e-12);
        assert!((ndcg_at_z(&two).unwrap() - 0.651).abs() < 1e-3);
    }

    #[test]
    fn mec_chain_reversal_is_equivalent() {
        let g1 = BinaryDag::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let g2 = BinaryDag::from_edges(3, &[(2, 1), (1, 0)]).unwrap();
        assert!(mec_equivalent(&g1, &g2).unwrap());
    }

    #[test]
    fn mec_v_structure_differs() {
        let collider = BinaryDag::from_edges(3, &[(0, 1), (2, 1)]).unwrap();
        let chain = BinaryDag::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert!(!mec_equivalent(&collider, &chain).unwrap());
    }

    #[test]
    fn shd_counts_pair_differences() {
        let g1 = BinaryDag::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(shd(&g1, &g1).unwrap(), 0);
        let reversed = BinaryDag::from_edges(3, &[(1, 0), (1, 2)]).unwrap();
        assert_eq!(shd(&g1, &reversed).unwrap(), 1);
        let missing = BinaryDag::from_edges(3, &[(0, 1)]).unwrap();
        assert_eq!(shd(&g1, &missing).unwrap(), 1);
    }

    #[test]
    fn mec_report_lists_differences() {
        let g1 = BinaryDag::from_edges(3, &[(0, 1), (2, 1)]).unwrap();
        let g2 = BinaryDag::from_edges(3, &[(0, 1)]).unwrap();
        let report = mec_report(&g1, &g2).unwrap();
        assert!(!report.equivalent);
        assert_eq!(report.skeleton_only_left, vec![(1, 2)]);
        assert_eq!(report.v_structures_only_left, vec![(0, 1, 2)]);
        assert_eq!(report.shd, 1);
    }
}
