//! Recurrent sequential predictor with causal history filtering, per-step
//! skipping, attention over the kept steps, and a sigmoid scoring head.
//!
//! For a target item `b`, each history step is masked by the binarized target
//! column of the item relation matrix; steps left with no items are skipped
//! entirely. The cell consumes the surviving steps, attention weights their
//! hidden states against the last one, each state is additionally scaled by
//! the step's total causal effect on `b`, and the pooled state is scored
//! against the target's output embedding.

use serde::{Deserialize, Serialize};

use crate::causal_graph::{binarize_column, causal_effect};
use crate::diffnum::{sigmoid, softmax_vec, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

/// Uniform init range for the sequence-model tensors. Wide enough that the
/// scoring path carries usable gradient from the first epochs; the gates
/// keep the hidden state bounded regardless.
const INIT_SCALE: f64 = 0.3;
const INIT_SCALE_NEG: f64 = -INIT_SCALE;

/// One gate: `w x + u h + b`.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Matrix,
}

impl GateParams {
    fn init(d_h: usize, d_in: usize, rng: &mut impl rand::Rng) -> GateParams {
        GateParams {
            w: Matrix::from_fn(d_h, d_in, |_, _| rng.gen_range(INIT_SCALE_NEG..INIT_SCALE)),
            u: Matrix::from_fn(d_h, d_h, |_, _| rng.gen_range(INIT_SCALE_NEG..INIT_SCALE)),
            b: Matrix::zeros(d_h, 1),
        }
    }

    fn affine(&self, x: &Matrix, h: &Matrix) -> Matrix {
        self.w.matmul(x).add(&self.u.matmul(h)).add(&self.b)
    }
}

#[derive(Debug, Clone)]
pub enum CellParams {
    Gru {
        update: GateParams,
        reset: GateParams,
        candidate: GateParams,
    },
    Lstm {
        input: GateParams,
        forget: GateParams,
        output: GateParams,
        candidate: GateParams,
    },
}

impl CellParams {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Gru { .. } => CellKind::Gru,
            CellParams::Lstm { .. } => CellKind::Lstm,
        }
    }
}

/// Hidden state; LSTM additionally carries its cell vector.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Matrix,
    pub c: Option<Matrix>,
}

impl CellState {
    pub fn zero(kind: CellKind, d_h: usize) -> CellState {
        CellState {
            h: Matrix::zeros(d_h, 1),
            c: match kind {
                CellKind::Gru => None,
                CellKind::Lstm => Some(Matrix::zeros(d_h, 1)),
            },
        }
    }
}

/// Recurrent predictor parameters.
///
/// The step input is built from the item embeddings of the (masked) step
/// concatenated with the user embedding, then mapped to `d_e` by
/// `input_proj`. `attn` scores hidden-state pairs, `adapter` maps the pooled
/// hidden state back to embedding space, and `out_emb`/`user_emb` hold one
/// row per item/user.
#[derive(Debug, Clone)]
pub struct SeqModel {
    pub cell: CellParams,
    pub d_h: usize,
    pub d_e: usize,
    pub input_proj: Matrix,
    pub attn: Matrix,
    pub adapter: Matrix,
    pub out_emb: Matrix,
    pub user_emb: Matrix,
}

impl SeqModel {
    pub fn init(
        kind: CellKind,
        d_h: usize,
        d_e: usize,
        d_item: usize,
        n_items: usize,
        n_users: usize,
        rng: &mut impl rand::Rng,
    ) -> SeqModel {
        let cell = match kind {
            CellKind::Gru => CellParams::Gru {
                update: GateParams::init(d_h, d_e, rng),
                reset: GateParams::init(d_h, d_e, rng),
                candidate: GateParams::init(d_h, d_e, rng),
            },
            CellKind::Lstm => CellParams::Lstm {
                input: GateParams::init(d_h, d_e, rng),
                forget: GateParams::init(d_h, d_e, rng),
                output: GateParams::init(d_h, d_e, rng),
                candidate: GateParams::init(d_h, d_e, rng),
            },
        };
        SeqModel {
            cell,
            d_h,
            d_e,
            input_proj: Matrix::from_fn(d_e, d_item + d_e, |_, _| rng.gen_range(INIT_SCALE_NEG..INIT_SCALE)),
            attn: Matrix::from_fn(d_h, d_h, |_, _| rng.gen_range(INIT_SCALE_NEG..INIT_SCALE)),
            adapter: Matrix::from_fn(d_e, d_h, |_, _| rng.gen_range(INIT_SCALE_NEG..INIT_SCALE)),
            out_emb: Matrix::from_fn(n_items, d_e, |_, _| rng.gen_range(INIT_SCALE_NEG..INIT_SCALE)),
            user_emb: Matrix::from_fn(n_users, d_e, |_, _| rng.gen_range(INIT_SCALE_NEG..INIT_SCALE)),
        }
    }

    /// Step input: sum of member-item embeddings concatenated with the user
    /// embedding, then the learned linear map to `d_e`.
    pub fn step_input(&self, items: &[usize], vstar_rows: &Matrix, user: usize) -> Matrix {
        let d_item = vstar_rows.cols();
        let mut item_sum = Matrix::zeros(d_item, 1);
        for &i in items {
            item_sum.add_assign_scaled(&vstar_rows.row_as_column(i), 1.0);
        }
        let mut concat = item_sum.data().to_vec();
        concat.extend_from_slice(self.user_emb.row(user));
        self.input_proj.matmul(&Matrix::column(&concat))
    }
}

/// Variant switches mirroring the model's ablations.
///
/// `no_causal` drops the causal pathway of the scorer entirely: the history
/// is not filtered and each step's causal-effect weight becomes one.
/// `no_att` replaces attention with uniform weights over the kept steps.
/// `no_clus`/`no_rec` drop the corresponding training-loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub no_clus: bool,
    #[serde(default)]
    pub no_rec: bool,
    #[serde(default)]
    pub no_att: bool,
    #[serde(default)]
    pub no_causal: bool,
}

/// One GRU or LSTM update.
pub fn cell_step(state: &CellState, x: &Matrix, model: &SeqModel) -> Result<CellState> {
    if x.rows() != model.d_e || x.cols() != 1 {
        return Err(Error::Usage(format!(
            "cell input must be {}x1, got {}x{}",
            model.d_e,
            x.rows(),
            x.cols()
        )));
    }
    if state.h.rows() != model.d_h || state.h.cols() != 1 {
        return Err(Error::Usage(format!(
            "hidden state must be {}x1, got {}x{}",
            model.d_h,
            state.h.rows(),
            state.h.cols()
        )));
    }
    match &model.cell {
        CellParams::Gru { update, reset, candidate } => {
            let z = update.affine(x, &state.h).map(sigmoid);
            let r = reset.affine(x, &state.h).map(sigmoid);
            let rh = r.hadamard(&state.h);
            let cand = candidate.affine(x, &rh).map(f64::tanh);
            // h' = (1 - z) o h + z o cand
            let h = state
                .h
                .sub(&z.hadamard(&state.h))
                .add(&z.hadamard(&cand));
            Ok(CellState { h, c: None })
        }
        CellParams::Lstm { input, forget, output, candidate } => {
            let c_prev = state
                .c
                .as_ref()
                .ok_or_else(|| Error::Usage("LSTM step without a cell state".into()))?;
            let i = input.affine(x, &state.h).map(sigmoid);
            let f = forget.affine(x, &state.h).map(sigmoid);
            let o = output.affine(x, &state.h).map(sigmoid);
            let g = candidate.affine(x, &state.h).map(f64::tanh);
            let c = f.hadamard(c_prev).add(&i.hadamard(&g));
            let h = o.hadamard(&c.map(f64::tanh));
            Ok(CellState { h, c: Some(c) })
        }
    }
}

/// One surviving history step: its original index and the items that passed
/// the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeptStep {
    pub index: usize,
    pub items: Vec<usize>,
}

/// History after masking against a target item. Steps masked to empty are
/// dropped; their count is retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilteredHistory {
    pub kept: Vec<KeptStep>,
    pub skipped: usize,
}

impl FilteredHistory {
    pub fn is_fully_skipped(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Masks each step by the binarized target column of `w_item` and drops the
/// steps that end up empty. Original indices are retained so causal-effect
/// and attention weights stay aligned.
pub fn filter_history(
    history: &[Vec<usize>],
    target: usize,
    w_item: &Matrix,
    epsilon: f64,
) -> FilteredHistory {
    let col: Vec<f64> = (0..w_item.rows()).map(|i| w_item.get(i, target)).collect();
    let mask = binarize_column(&col, epsilon);
    filter_with_mask(history, &mask)
}

pub(crate) fn filter_with_mask(history: &[Vec<usize>], mask: &[bool]) -> FilteredHistory {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for (index, step) in history.iter().enumerate() {
        let items: Vec<usize> = step.iter().copied().filter(|&i| mask[i]).collect();
        if items.is_empty() {
            skipped += 1;
        } else {
            kept.push(KeptStep { index, items });
        }
    }
    FilteredHistory { kept, skipped }
}

/// Attention over hidden states, queried by the last one:
/// `alpha = softmax_t(h_t^T A h_last)`.
pub fn attention_weights(hidden: &[Matrix], attn: &Matrix) -> Result<Vec<f64>> {
    if hidden.is_empty() {
        return Err(Error::Usage("attention over an empty hidden list".into()));
    }
    let query = attn.matmul(hidden.last().expect("non-empty"));
    let sims: Vec<f64> = hidden.iter().map(|h| h.dot(&query)).collect();
    Ok(softmax_vec(&sims))
}

/// Everything [`predict`] needs besides the sequence model itself.
#[derive(Debug, Clone, Copy)]
pub struct PredictContext<'a> {
    /// Item embeddings, one row per item.
    pub vstar: &'a Matrix,
    /// Item-level causal relation matrix.
    pub w_item: &'a Matrix,
    pub epsilon: f64,
    pub ablation: Ablation,
}

/// Interaction probability for `target` given the history, per the filtered
/// recurrent scorer. Falls back to the unfiltered history with unit causal
/// weights when every step is masked away, so ranking always has a defined
/// score.
pub fn predict(
    history: &[Vec<usize>],
    user: usize,
    target: usize,
    ctx: &PredictContext,
    model: &SeqModel,
) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Usage("predict on an empty history".into()));
    }

    let filtered = if ctx.ablation.no_causal {
        all_kept(history)
    } else {
        filter_history(history, target, ctx.w_item, ctx.epsilon)
    };
    let (steps, causal_weights) = if filtered.is_fully_skipped() {
        (all_kept(history).kept, None)
    } else if ctx.ablation.no_causal {
        (filtered.kept, None)
    } else {
        let col: Vec<f64> = (0..ctx.w_item.rows())
            .map(|i| ctx.w_item.get(i, target))
            .collect();
        let weights: Vec<f64> = filtered
            .kept
            .iter()
            .map(|s| causal_effect(&s.items, &col, ctx.epsilon))
            .collect();
        (filtered.kept, Some(weights))
    };

    let mut state = CellState::zero(model.cell.kind(), model.d_h);
    let mut hidden = Vec::with_capacity(steps.len());
    for step in &steps {
        let x = model.step_input(&step.items, ctx.vstar, user);
        state = cell_step(&state, &x, model)?;
        hidden.push(state.h.clone());
    }

    let alphas = if ctx.ablation.no_att {
        vec![1.0 / hidden.len() as f64; hidden.len()]
    } else {
        attention_weights(&hidden, &model.attn)?
    };

    let mut pooled = Matrix::zeros(model.d_h, 1);
    for (t, h) in hidden.iter().enumerate() {
        let w_hat = causal_weights.as_ref().map_or(1.0, |w| w[t]);
        pooled.add_assign_scaled(h, w_hat * alphas[t]);
    }
    let adapted = model.adapter.matmul(&pooled);
    let score = model.out_emb.row_as_column(target).dot(&adapted);
    Ok(sigmoid(score))
}

fn all_kept(history: &[Vec<usize>]) -> FilteredHistory {
    FilteredHistory {
        kept: history
            .iter()
            .enumerate()
            .map(|(index, step)| KeptStep { index, items: step.clone() })
            .collect(),
        skipped: 0,
    }
}
