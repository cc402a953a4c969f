//! Joint loss and the augmented Lagrangian training loop.
//!
//! Each epoch recomputes the item relation matrix from the current cluster
//! matrix and assignments, freezes the keep/drop filtering decisions on it,
//! and resamples negative labels. Inner iterations run plain gradient
//! descent on the joint loss; the multiplier update
//! `beta1 += beta2 * b(Wc)` and the penalty escalation
//! `beta2 *= kappa1 when |b| >= kappa2 * |b_prev|` run per inner iteration
//! by default, or once per epoch when `lagrangian_per_epoch` is set.

mod tape_loss;

pub use tape_loss::{GradSet, LabelPlan};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::InteractionDataset;
use crate::diffnum::{dag_penalty, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::item_space::FeatureTable;
use crate::model::{CauserModel, ModelDims};
use crate::seq_model::{Ablation, CellKind};

/// Augmented Lagrangian state and every training hyperparameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Lagrange multiplier.
    pub beta1: f64,
    /// Quadratic penalty weight, > 0.
    pub beta2: f64,
    /// Penalty growth factor, > 1.
    pub kappa1: f64,
    /// Required violation shrink factor, in (0, 1).
    pub kappa2: f64,
    /// Gradient descent step, > 0.
    pub gamma: f64,
    pub epochs: usize,
    pub inner_iters: usize,
    /// L1 sparsity weight on the cluster matrix.
    pub lambda: f64,
    /// Filtering threshold.
    pub epsilon: f64,
    /// Uniform negatives sampled per positive label.
    pub negatives: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Update the clustering parameters and the cluster matrix only every
    /// k-th epoch when set.
    pub slow_lane: Option<usize>,
    /// Epochs at the start during which the cluster matrix stays frozen
    /// while the clustering settles and the predictor learns base rates.
    /// The multiplier schedule also pauses, since the constraint cannot
    /// make progress on a frozen matrix.
    pub warmup_epochs: usize,
    /// Move the multiplier/penalty update from inner-iteration to epoch
    /// granularity.
    pub lagrangian_per_epoch: bool,
    /// Diagnostic switch: freeze beta1 = beta2 = 0 (no acyclicity pressure).
    pub constrained: bool,
    /// Fix gradient reduction and batch order so reruns are bit-identical.
    pub reproducible: bool,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            beta1: 0.0,
            beta2: 1.0,
            kappa1: 10.0,
            kappa2: 0.25,
            gamma: 1e-3,
            epochs: 30,
            inner_iters: 5,
            lambda: 1e-2,
            epsilon: 0.3,
            negatives: 4,
            batch_size: 128,
            seed: 0,
            slow_lane: None,
            warmup_epochs: 0,
            lagrangian_per_epoch: false,
            constrained: true,
            reproducible: true,
        }
    }
}

impl OptimizerState {
    pub fn validate(&self) -> Result<()> {
        if self.kappa1 <= 1.0 {
            return Err(Error::Config(format!("kappa1 must be > 1, got {}", self.kappa1)));
        }
        if !(0.0 < self.kappa2 && self.kappa2 < 1.0) {
            return Err(Error::Config(format!(
                "kappa2 must lie in (0, 1), got {}",
                self.kappa2
            )));
        }
        if self.beta2 <= 0.0 {
            return Err(Error::Config(format!("beta2 must be > 0, got {}", self.beta2)));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(0.0 < self.epsilon && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(k) = self.slow_lane {
            if k == 0 {
                return Err(Error::Config("slow_lane period must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Structural configuration of the model being trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub cell_kind: CellKind,
    /// Assignment softmax temperature.
    pub eta: f64,
    /// Uniform initialization range for the off-diagonal cluster matrix.
    pub wc_init: (f64, f64),
}

/// `-(y log p + (1-y) log(1-p))` with the probability clamped at
/// [`PROB_FLOOR`].
pub fn bce_term(pred: f64, label: bool) -> Result<f64> {
    if !pred.is_finite() {
        return Err(Error::Numeric(format!("bce_term on non-finite prediction {pred}")));
    }
    let p = pred.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if label {
        Ok(-p.ln())
    } else {
        Ok(-(1.0 - p).ln())
    }
}

/// One multiplier/penalty update:
/// `beta1 += beta2 * b_now`; `beta2 *= kappa1` iff `|b_now| >= kappa2 * |b_prev|`.
pub fn lagrangian_update(state: &OptimizerState, b_now: f64, b_prev: f64) -> OptimizerState {
    let mut next = state.clone();
    next.beta1 = state.beta1 + state.beta2 * b_now;
    if b_now.abs() >= state.kappa2 * b_prev.abs() {
        next.beta2 = state.beta2 * state.kappa1;
    }
    next
}

/// Per-epoch log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dag_penalty: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// Per-update log record for replaying the multiplier schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub b_prev: f64,
    pub b_now: f64,
    pub beta1_before: f64,
    pub beta1_after: f64,
    pub beta2_before: f64,
    pub beta2_after: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub iterations: Vec<IterRecord>,
}

impl TrainLog {
    pub fn epochs_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }

    pub fn iterations_jsonl(&self) -> String {
        self.iterations
            .iter()
            .map(|r| serde_json::to_string(r).expect("iteration record serializes"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }
}

/// Deterministic per-epoch RNG: same seed, separate stream per purpose.
fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1_000_003).wrapping_add(epoch as u64 + 1));
    rng
}

/// Builds the epoch's label plan: every item present at a predicted step is
/// a positive; each positive draws `negatives` uniform items the user never
/// interacted with.
pub fn label_plan(
    dataset: &InteractionDataset,
    state: &OptimizerState,
    epoch: usize,
) -> LabelPlan {
    let n_items = dataset.n_items();
    let mut rng = epoch_rng(state.seed, epoch, 1);
    let mut plan = Vec::with_capacity(dataset.sequences.len());
    for (u, seq) in dataset.sequences.iter().enumerate() {
        let interacted = dataset.user_item_set(u);
        let mut per_seq = Vec::new();
        for j in 1..seq.len() {
            let mut labels: Vec<(usize, bool)> = Vec::new();
            for &pos in &seq[j] {
                labels.push((pos, true));
                if interacted.len() >= n_items {
                    continue;
                }
                let mut drawn = 0;
                while drawn < state.negatives {
                    let cand = rng.gen_range(0..n_items);
                    if interacted.binary_search(&cand).is_err() {
                        labels.push((cand, false));
                        drawn += 1;
                    }
                }
            }
            if !labels.is_empty() {
                per_seq.push((j, labels));
            }
        }
        plan.push(per_seq);
    }
    plan
}

/// Joint loss over a batch of sequence indices, with the epoch's label plan
/// and filtering derived deterministically from the state. Forward only.
pub fn total_loss(
    model: &CauserModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    state: &OptimizerState,
    epoch: usize,
    ablation: Ablation,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("total_loss on an empty batch".into()));
    }
    let plan = label_plan(dataset, state, epoch);
    let cache = model.eval_cache()?;
    let (graph, root) = tape_loss::build_loss(
        model,
        dataset,
        batch,
        &plan,
        &cache.w_item,
        state.epsilon,
        state.lambda,
        if state.constrained { state.beta1 } else { 0.0 },
        if state.constrained { state.beta2 } else { 0.0 },
        ablation,
    )?;
    Ok(graph.tape.scalar(root))
}

/// Like [`total_loss`] but also returns the reverse-mode gradient of every
/// parameter tensor.
pub fn total_loss_with_grads(
    model: &CauserModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    state: &OptimizerState,
    epoch: usize,
    ablation: Ablation,
) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::Usage("total_loss on an empty batch".into()));
    }
    let plan = label_plan(dataset, state, epoch);
    let cache = model.eval_cache()?;
    loss_and_grads(
        model,
        dataset,
        batch,
        &plan,
        &cache.w_item,
        state,
        if state.constrained { state.beta1 } else { 0.0 },
        if state.constrained { state.beta2 } else { 0.0 },
        ablation,
    )
}

/// Loss and leaf gradients for one iteration.
#[allow(clippy::too_many_arguments)]
fn loss_and_grads(
    model: &CauserModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    plan: &LabelPlan,
    w_cached: &crate::diffnum::Matrix,
    state: &OptimizerState,
    beta1: f64,
    beta2: f64,
    ablation: Ablation,
) -> Result<(f64, GradSet)> {
    let (graph, root) = tape_loss::build_loss(
        model, dataset, batch, plan, w_cached, state.epsilon, state.lambda, beta1, beta2,
        ablation,
    )?;
    let loss = graph.tape.scalar(root);
    let grads = graph.tape.backward(root)?;
    Ok((loss, graph.grads(&grads)))
}

/// Trains a fresh model on the given (train-split) dataset.
///
/// Features are reordered to the dataset vocabulary. Divergence (non-finite
/// loss) aborts with the offending epoch.
pub fn train(
    dataset: &InteractionDataset,
    features: &FeatureTable,
    model_cfg: &ModelConfig,
    state: &OptimizerState,
    ablation: Ablation,
) -> Result<(CauserModel, TrainLog)> {
    state.validate()?;
    let features = features.reordered(&dataset.item_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    let mut model = CauserModel::init(
        model_cfg.dims,
        model_cfg.cell_kind,
        features,
        dataset.item_ids.clone(),
        dataset.user_ids.clone(),
        model_cfg.eta,
        state.lambda,
        state.epsilon,
        model_cfg.wc_init,
        &mut rng,
    )?;

    let mut log = TrainLog::default();
    let mut beta1 = if state.constrained { state.beta1 } else { 0.0 };
    let mut beta2 = if state.constrained { state.beta2 } else { 0.0 };
    let mut b_epoch_prev = dag_penalty(&model.graph.wc)?;
    let n_seqs = dataset.sequences.len();

    for epoch in 0..state.epochs {
        let cache = model.eval_cache()?;
        let plan = label_plan(dataset, state, epoch);
        let mut order: Vec<usize> = (0..n_seqs).collect();
        order.shuffle(&mut epoch_rng(state.seed, epoch, 2));

        let in_warmup = epoch < state.warmup_epochs;
        let slow_lane_frozen = state.slow_lane.map(|k| epoch % k != 0).unwrap_or(false);

        let mut epoch_losses = Vec::with_capacity(state.inner_iters);
        let mut b_now = b_epoch_prev;
        for iter in 0..state.inner_iters {
            let batch: Vec<usize> = (0..state.batch_size.min(n_seqs))
                .map(|i| order[(iter * state.batch_size + i) % n_seqs])
                .collect();

            let (loss, grads) = loss_and_grads(
                &model, dataset, &batch, &plan, &cache.w_item, state, beta1, beta2, ablation,
            )?;
            if !loss.is_finite() {
                let b = dag_penalty(&model.graph.wc).unwrap_or(f64::NAN);
                return Err(Error::Training {
                    epoch,
                    msg: format!(
                        "loss became {loss} at inner iteration {iter} \
                         (b={b:.3e}, beta1={beta1:.3e}, beta2={beta2:.3e}, \
                         |wc|={:.3e}, |v4|={:.3e}, |out_emb|={:.3e})",
                        model.graph.wc.inf_norm(),
                        model.cluster.v4.inf_norm(),
                        model.seq.out_emb.inf_norm()
                    ),
                });
            }
            epoch_losses.push(loss);

            let b_prev = dag_penalty(&model.graph.wc)?;
            for name in model.param_names() {
                if slow_lane_frozen && CauserModel::is_slow_lane_param(name) {
                    continue;
                }
                if in_warmup && name == "wc" {
                    continue;
                }
                let g = grads.get(name).expect("gradient for every parameter");
                model.param_mut(name).add_assign_scaled(g, -state.gamma);
            }
            // Self-loops stay pinned at zero.
            for i in 0..model.dims.k {
                model.graph.wc.set(i, i, 0.0);
            }
            if !model.graph.wc.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("cluster matrix became non-finite at inner iteration {iter}"),
                });
            }

            b_now = dag_penalty(&model.graph.wc)?;
            if state.constrained && !state.lagrangian_per_epoch && !slow_lane_frozen && !in_warmup {
                let (beta1_before, beta2_before) = (beta1, beta2);
                beta1 += beta2 * b_now;
                if b_now.abs() >= state.kappa2 * b_prev.abs() {
                    beta2 *= state.kappa1;
                }
                log.iterations.push(IterRecord {
                    epoch,
                    iter,
                    b_prev,
                    b_now,
                    beta1_before,
                    beta1_after: beta1,
                    beta2_before,
                    beta2_after: beta2,
                });
            }
        }

        if state.constrained && state.lagrangian_per_epoch && !slow_lane_frozen && !in_warmup {
            let (beta1_before, beta2_before) = (beta1, beta2);
            beta1 += beta2 * b_now;
            if b_now.abs() >= state.kappa2 * b_epoch_prev.abs() {
                beta2 *= state.kappa1;
            }
            log.iterations.push(IterRecord {
                epoch,
                iter: state.inner_iters,
                b_prev: b_epoch_prev,
                b_now,
                beta1_before,
                beta1_after: beta1,
                beta2_before,
                beta2_after: beta2,
            });
            b_epoch_prev = b_now;
        }

        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            loss: mean_loss,
            dag_penalty: b_now,
            beta1,
            beta2,
        });
    }

    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_graph::BinaryDag;
    use crate::data_io::{gen_features, gen_synthetic, SyntheticSpec};

    #[test]
    fn bce_matches_closed_forms() {
        assert!((bce_term(0.5, true).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_term(0.5, true).unwrap() - 0.693_147).abs() < 1e-6);
        assert!(bce_term(1.0 - 1e-12, true).unwrap() < 1e-11);
        assert!((bce_term(0.9, false).unwrap() - 2.302_585).abs() < 1e-6);
        assert!(bce_term(f64::NAN, true).is_err());
    }

    #[test]
    fn lagrangian_update_rules() {
        let state = OptimizerState {
            beta1: 0.0,
            beta2: 1.0,
            kappa1: 10.0,
            kappa2: 0.25,
            ..OptimizerState::default()
        };
        // b_now = 0: multiplier unchanged; penalty grows only when b_prev = 0.
        let s = lagrangian_update(&state, 0.0, 0.5);
        assert_eq!(s.beta1, 0.0);
        assert_eq!(s.beta2, 1.0);
        let s = lagrangian_update(&state, 0.0, 0.0);
        assert_eq!(s.beta2, 10.0);

        let s = lagrangian_update(&state, 0.5, 10.0);
        assert_eq!(s.beta1, 0.5);
        assert_eq!(s.beta2, 1.0);

        // 0.3 >= 0.25 * 1.0, so the penalty escalates.
        let s = lagrangian_update(&state, 0.3, 1.0);
        assert!((s.beta2 - 10.0).abs() < 1e-15);
    }

    #[test]
    fn optimizer_state_validation() {
        let mut s = OptimizerState::default();
        assert!(s.validate().is_ok());
        s.kappa1 = 1.0;
        assert!(s.validate().is_err());
        s = OptimizerState { kappa2: 1.5, ..OptimizerState::default() };
        assert!(s.validate().is_err());
        s = OptimizerState { beta2: 0.0, ..OptimizerState::default() };
        assert!(s.validate().is_err());
        s = OptimizerState { gamma: -1.0, ..OptimizerState::default() };
        assert!(s.validate().is_err());
    }

    pub(crate) fn tiny_benchmark(seed: u64) -> (InteractionDataset, FeatureTable) {
        let spec = SyntheticSpec {
            dag: BinaryDag::from_edges(2, &[(0, 1)]).unwrap(),
            items_per_cluster: 3,
            users: 20,
            trigger_p: 0.8,
            noise_p: 0.1,
            mean_len: 6.0,
            seed,
            feature_dim: 4,
            feature_noise: 0.1,
        };
        let data = gen_synthetic(&spec).unwrap();
        let features = gen_features(
            &data.dataset.item_ids,
            &data.assignments,
            2,
            4,
            0.1,
            seed + 1,
        )
        .unwrap();
        (data.dataset, features)
    }

    fn tiny_config() -> (ModelConfig, OptimizerState) {
        let cfg = ModelConfig {
            dims: ModelDims { d: 4, d1: 4, d2: 4, k: 2, d_e: 4, d_h: 4 },
            cell_kind: CellKind::Gru,
            eta: 1.0,
            wc_init: (0.35, 0.55),
        };
        let state = OptimizerState {
            epochs: 2,
            inner_iters: 2,
            batch_size: 8,
            negatives: 2,
            gamma: 1e-3,
            seed: 5,
            ..OptimizerState::default()
        };
        (cfg, state)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (dataset, features) = tiny_benchmark(3);
        let (cfg, mut state) = tiny_config();
        state.epochs = 0;
        let (model, log) = train(&dataset, &features, &cfg, &state, Ablation::default()).unwrap();
        assert!(log.epochs.is_empty());

        // A fresh init with the same seed must agree parameter-for-parameter.
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        let fresh = CauserModel::init(
            cfg.dims,
            cfg.cell_kind,
            features.reordered(&dataset.item_ids).unwrap(),
            dataset.item_ids.clone(),
            dataset.user_ids.clone(),
            cfg.eta,
            state.lambda,
            state.epsilon,
            cfg.wc_init,
            &mut rng,
        )
        .unwrap();
        for name in model.param_names() {
            assert_eq!(model.param(name), fresh.param(name), "{name}");
        }
    }

    #[test]
    fn training_runs_are_bitwise_reproducible() {
        let (dataset, features) = tiny_benchmark(7);
        let (cfg, state) = tiny_config();
        let (m1, l1) = train(&dataset, &features, &cfg, &state, Ablation::default()).unwrap();
        let (m2, l2) = train(&dataset, &features, &cfg, &state, Ablation::default()).unwrap();
        assert_eq!(l1.epochs_jsonl(), l2.epochs_jsonl());
        assert_eq!(l1.iterations_jsonl(), l2.iterations_jsonl());
        for name in m1.param_names() {
            assert_eq!(m1.param(name), m2.param(name), "{name}");
        }
        assert_eq!(
            l1.epochs.last().unwrap().loss.to_bits(),
            l2.epochs.last().unwrap().loss.to_bits()
        );
    }

    #[test]
    fn beta2_is_non_decreasing_and_beta1_follows_rule() {
        let (dataset, features) = tiny_benchmark(11);
        let (cfg, mut state) = tiny_config();
        state.epochs = 3;
        let (_, log) = train(&dataset, &features, &cfg, &state, Ablation::default()).unwrap();
        assert!(!log.iterations.is_empty());
        let mut prev_beta2 = state.beta2;
        for rec in &log.iterations {
            assert!((rec.beta1_after - (rec.beta1_before + rec.beta2_before * rec.b_now)).abs() < 1e-12);
            let should_grow = rec.b_now.abs() >= state.kappa2 * rec.b_prev.abs();
            let expect_beta2 = if should_grow {
                rec.beta2_before * state.kappa1
            } else {
                rec.beta2_before
            };
            assert_eq!(rec.beta2_after, expect_beta2);
            assert!(rec.beta2_after >= prev_beta2);
            prev_beta2 = rec.beta2_after;
        }
    }

    #[test]
    fn label_plan_negatives_avoid_interacted_items() {
        let (dataset, _) = tiny_benchmark(13);
        let state = OptimizerState { negatives: 3, ..OptimizerState::default() };
        let plan = label_plan(&dataset, &state, 0);
        for (u, per_seq) in plan.iter().enumerate() {
            let interacted = dataset.user_item_set(u);
            for (_, labels) in per_seq {
                for &(item, label) in labels {
                    if !label {
                        assert!(interacted.binary_search(&item).is_err());
                    }
                }
            }
        }
    }
}
