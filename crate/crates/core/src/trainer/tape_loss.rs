//! Tape construction for the joint training loss.
//!
//! One tape carries the full iteration: the vocabulary-wide reconstruction
//! and clustering terms, the L1 and Lagrangian terms on the cluster matrix,
//! and the filtered recurrent cross-entropy over a minibatch of sequences.
//! Step keep/drop decisions come from the epoch-cached item relation matrix;
//! the causal-effect magnitudes are live tape nodes so the cross-entropy
//! shapes the cluster matrix and the assignments.

use std::collections::BTreeMap;

use crate::data_io::InteractionDataset;
use crate::diffnum::{Gradients, Matrix, NodeId, Tape};
use crate::error::Result;
use crate::model::CauserModel;
use crate::seq_model::{Ablation, CellParams};

/// Gradient per named parameter tensor, in a deterministic order.
#[derive(Debug, Clone, Default)]
pub struct GradSet(pub BTreeMap<&'static str, Matrix>);

impl GradSet {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }
}

/// Label plan for one epoch: per sequence, per predicted step index, the
/// (target, label) pairs to score. Step index `j` means the step at that
/// 0-based position is predicted from the steps before it.
pub type LabelPlan = Vec<Vec<(usize, Vec<(usize, bool)>)>>;

pub(crate) struct LossGraph<'m> {
    pub tape: Tape,
    model: &'m CauserModel,
    leaves: BTreeMap<&'static str, NodeId>,
    vstar: Vec<Option<NodeId>>,
    vbar: Vec<Option<NodeId>>,
    /// `Wc * vbar_b` per target item, shared across pair weights.
    wc_vbar: Vec<Option<NodeId>>,
    /// Live pair weight `vbar_i^T Wc vbar_b`.
    pair_w: BTreeMap<(usize, usize), NodeId>,
    user_rows: Vec<Option<NodeId>>,
}

impl<'m> LossGraph<'m> {
    pub fn new(model: &'m CauserModel) -> LossGraph<'m> {
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        for name in model.param_names() {
            leaves.insert(name, tape.leaf(model.param(name).clone()));
        }
        let n_items = model.n_items();
        LossGraph {
            tape,
            model,
            leaves,
            vstar: vec![None; n_items],
            vbar: vec![None; n_items],
            wc_vbar: vec![None; n_items],
            pair_w: BTreeMap::new(),
            user_rows: vec![None; model.n_users()],
        }
    }

    /// Encoder output `v*` for an item, built once per tape.
    fn vstar(&mut self, item: usize) -> NodeId {
        if let Some(id) = self.vstar[item] {
            return id;
        }
        let raw = self.tape.constant(self.model.features.raw(item));
        let v1x = self.tape.matmul(self.leaves["v1"], raw);
        let pre = self.tape.add(v1x, self.leaves["b1"]);
        let hidden = self.tape.sigmoid(pre);
        let v2h = self.tape.matmul(self.leaves["v2"], hidden);
        let out = self.tape.add(v2h, self.leaves["b2"]);
        self.vstar[item] = Some(out);
        out
    }

    /// Soft cluster assignment for an item, built once per tape.
    fn vbar(&mut self, item: usize) -> NodeId {
        if let Some(id) = self.vbar[item] {
            return id;
        }
        let logits = self.tape.row_as_col(self.leaves["assign_logits"], item);
        let scaled = self.tape.scale(logits, 1.0 / self.model.cluster.eta);
        let out = self.tape.softmax(scaled);
        self.vbar[item] = Some(out);
        out
    }

    fn wc_vbar(&mut self, target: usize) -> NodeId {
        if let Some(id) = self.wc_vbar[target] {
            return id;
        }
        let vb = self.vbar(target);
        let out = self.tape.matmul(self.leaves["wc"], vb);
        self.wc_vbar[target] = Some(out);
        out
    }

    /// Live item-pair relation `W_ib`.
    fn pair_weight(&mut self, item: usize, target: usize) -> NodeId {
        if let Some(&id) = self.pair_w.get(&(item, target)) {
            return id;
        }
        let vb_i = self.vbar(item);
        let wcb = self.wc_vbar(target);
        let out = self.tape.dot(vb_i, wcb);
        self.pair_w.insert((item, target), out);
        out
    }

    fn user_row(&mut self, user: usize) -> NodeId {
        if let Some(id) = self.user_rows[user] {
            return id;
        }
        let out = self.tape.row_as_col(self.leaves["user_emb"], user);
        self.user_rows[user] = Some(out);
        out
    }

    /// Step input: summed member embeddings, user embedding, linear map.
    fn step_input(&mut self, items: &[usize], user: usize) -> NodeId {
        let embs: Vec<NodeId> = items.iter().map(|&i| self.vstar(i)).collect();
        let item_sum = self.tape.add_n(&embs);
        let u = self.user_row(user);
        let cat = self.tape.concat_rows(item_sum, u);
        self.tape.matmul(self.leaves["input_proj"], cat)
    }

    fn gate(&mut self, w: &'static str, u: &'static str, b: &'static str, x: NodeId, h: NodeId) -> NodeId {
        let wx = self.tape.matmul(self.leaves[w], x);
        let uh = self.tape.matmul(self.leaves[u], h);
        let sum = self.tape.add(wx, uh);
        self.tape.add(sum, self.leaves[b])
    }

    /// One recurrent update; returns (h', c').
    fn cell_step(&mut self, h: NodeId, c: Option<NodeId>, x: NodeId) -> (NodeId, Option<NodeId>) {
        match self.model.seq.cell {
            CellParams::Gru { .. } => {
                let z_pre = self.gate("gru_z_w", "gru_z_u", "gru_z_b", x, h);
                let z = self.tape.sigmoid(z_pre);
                let r_pre = self.gate("gru_r_w", "gru_r_u", "gru_r_b", x, h);
                let r = self.tape.sigmoid(r_pre);
                let rh = self.tape.hadamard(r, h);
                let cand_pre = self.gate("gru_h_w", "gru_h_u", "gru_h_b", x, rh);
                let cand = self.tape.tanh(cand_pre);
                let zh = self.tape.hadamard(z, h);
                let zc = self.tape.hadamard(z, cand);
                let keep = self.tape.sub(h, zh);
                (self.tape.add(keep, zc), None)
            }
            CellParams::Lstm { .. } => {
                let c = c.expect("LSTM state carries a cell vector");
                let i_pre = self.gate("lstm_i_w", "lstm_i_u", "lstm_i_b", x, h);
                let i = self.tape.sigmoid(i_pre);
                let f_pre = self.gate("lstm_f_w", "lstm_f_u", "lstm_f_b", x, h);
                let f = self.tape.sigmoid(f_pre);
                let o_pre = self.gate("lstm_o_w", "lstm_o_u", "lstm_o_b", x, h);
                let o = self.tape.sigmoid(o_pre);
                let g_pre = self.gate("lstm_g_w", "lstm_g_u", "lstm_g_b", x, h);
                let g = self.tape.tanh(g_pre);
                let fc = self.tape.hadamard(f, c);
                let ig = self.tape.hadamard(i, g);
                let c_next = self.tape.add(fc, ig);
                let tc = self.tape.tanh(c_next);
                (self.tape.hadamard(o, tc), Some(c_next))
            }
        }
    }

    /// Scored probability node for one (history, user, target) triple.
    ///
    /// `w_cached` supplies the frozen keep/drop decisions; the causal-effect
    /// magnitudes are rebuilt as live nodes.
    pub fn prediction(
        &mut self,
        history: &[Vec<usize>],
        user: usize,
        target: usize,
        w_cached: &Matrix,
        epsilon: f64,
        ablation: Ablation,
    ) -> Result<NodeId> {
        // Keep/drop decisions from the cached relation matrix.
        let mut kept: Vec<Vec<usize>> = Vec::new();
        if !ablation.no_causal {
            for step in history {
                let items: Vec<usize> = step
                    .iter()
                    .copied()
                    .filter(|&i| w_cached.get(i, target) > epsilon)
                    .collect();
                if !items.is_empty() {
                    kept.push(items);
                }
            }
        }
        let fallback = ablation.no_causal || kept.is_empty();
        let steps: Vec<Vec<usize>> = if fallback {
            history.to_vec()
        } else {
            kept
        };

        // Recurrent pass over the surviving steps.
        let kind_lstm = matches!(self.model.seq.cell, CellParams::Lstm { .. });
        let d_h = self.model.seq.d_h;
        let mut h = self.tape.constant(Matrix::zeros(d_h, 1));
        let mut c = if kind_lstm {
            Some(self.tape.constant(Matrix::zeros(d_h, 1)))
        } else {
            None
        };
        let mut hidden: Vec<NodeId> = Vec::with_capacity(steps.len());
        for items in &steps {
            let x = self.step_input(items, user);
            let (h_next, c_next) = self.cell_step(h, c, x);
            h = h_next;
            c = c_next;
            hidden.push(h);
        }

        // Live causal-effect weights for the kept steps.
        let causal_w: Option<Vec<NodeId>> = if fallback {
            None
        } else {
            Some(
                steps
                    .iter()
                    .map(|items| {
                        let parts: Vec<NodeId> = items
                            .iter()
                            .map(|&i| self.pair_weight(i, target))
                            .collect();
                        self.tape.add_n(&parts)
                    })
                    .collect(),
            )
        };

        // Attention over the hidden states, queried by the last one.
        let alphas: Option<Vec<NodeId>> = if ablation.no_att {
            None
        } else {
            let last = *hidden.last().expect("history is non-empty");
            let query = self.tape.matmul(self.leaves["attn"], last);
            let sims: Vec<NodeId> = hidden.iter().map(|&ht| self.tape.dot(ht, query)).collect();
            let stacked = self.tape.stack(&sims);
            let soft = self.tape.softmax(stacked);
            Some((0..hidden.len()).map(|t| self.tape.index(soft, t)).collect())
        };

        let uniform = 1.0 / hidden.len() as f64;
        let mut terms: Vec<NodeId> = Vec::with_capacity(hidden.len());
        for (t, &ht) in hidden.iter().enumerate() {
            let weighted = match (&alphas, &causal_w) {
                (Some(a), Some(w)) => {
                    let aw = self.tape.mul_scalar(a[t], ht);
                    self.tape.mul_scalar(w[t], aw)
                }
                (Some(a), None) => self.tape.mul_scalar(a[t], ht),
                (None, Some(w)) => {
                    let scaled = self.tape.scale(ht, uniform);
                    self.tape.mul_scalar(w[t], scaled)
                }
                (None, None) => self.tape.scale(ht, uniform),
            };
            terms.push(weighted);
        }
        let pooled = self.tape.add_n(&terms);
        let adapted = self.tape.matmul(self.leaves["adapter"], pooled);
        let e_b = self.tape.row_as_col(self.leaves["out_emb"], target);
        let score = self.tape.dot(e_b, adapted);
        Ok(self.tape.sigmoid(score))
    }

    /// Vocabulary-wide reconstruction + clustering terms (1x1 nodes).
    pub fn autoencoder_terms(&mut self, ablation: Ablation) -> (Option<NodeId>, Option<NodeId>) {
        let n = self.model.n_items();
        let mut cluster_parts = Vec::with_capacity(n);
        let mut recon_parts = Vec::with_capacity(n);
        for item in 0..n {
            let vs = self.vstar(item);
            if !ablation.no_clus {
                let vb = self.vbar(item);
                let mix = self.tape.matmul(self.leaves["centers"], vb);
                let diff = self.tape.sub(vs, mix);
                cluster_parts.push(self.tape.dot(diff, diff));
            }
            if !ablation.no_rec {
                let v3s = self.tape.matmul(self.leaves["v3"], vs);
                let pre = self.tape.add(v3s, self.leaves["b3"]);
                let hidden = self.tape.sigmoid(pre);
                let v4h = self.tape.matmul(self.leaves["v4"], hidden);
                let vhat = self.tape.add(v4h, self.leaves["b4"]);
                let raw = self.tape.constant(self.model.features.raw(item));
                let diff = self.tape.sub(vhat, raw);
                recon_parts.push(self.tape.dot(diff, diff));
            }
        }
        let cluster = (!cluster_parts.is_empty()).then(|| self.tape.add_n(&cluster_parts));
        let recon = (!recon_parts.is_empty()).then(|| self.tape.add_n(&recon_parts));
        (cluster, recon)
    }

    /// `lambda * |Wc|_1 + beta1 * b(Wc) + (beta2 / 2) * b(Wc)^2`.
    pub fn graph_terms(&mut self, lambda: f64, beta1: f64, beta2: f64) -> Result<NodeId> {
        let wc = self.leaves["wc"];
        let l1 = self.tape.abs_sum(wc);
        let l1_term = self.tape.scale(l1, lambda);
        let b = self.tape.dag_penalty(wc)?;
        let lin = self.tape.scale(b, beta1);
        let b_sq = self.tape.hadamard(b, b);
        let quad = self.tape.scale(b_sq, beta2 / 2.0);
        Ok(self.tape.add_n(&[l1_term, lin, quad]))
    }

    /// Collects leaf gradients (zeros for untouched leaves).
    pub fn grads(&self, gradients: &Gradients) -> GradSet {
        let mut out = BTreeMap::new();
        for (&name, &id) in &self.leaves {
            let p = self.model.param(name);
            out.insert(name, gradients.wrt_or_zeros(id, p.rows(), p.cols()));
        }
        GradSet(out)
    }
}

/// Full joint loss over a minibatch, as one tape.
///
/// Returns the tape, the root node, and the graph builder for gradient
/// collection.
pub(crate) fn build_loss<'m>(
    model: &'m CauserModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    plan: &LabelPlan,
    w_cached: &Matrix,
    epsilon: f64,
    lambda: f64,
    beta1: f64,
    beta2: f64,
    ablation: Ablation,
) -> Result<(LossGraph<'m>, NodeId)> {
    let mut graph = LossGraph::new(model);
    let mut terms: Vec<NodeId> = Vec::new();

    for &seq_idx in batch {
        let seq = &dataset.sequences[seq_idx];
        for &(step_j, ref labels) in &plan[seq_idx] {
            let history = &seq[..step_j];
            for &(target, label) in labels {
                let pred =
                    graph.prediction(history, seq_idx, target, w_cached, epsilon, ablation)?;
                terms.push(graph.tape.bce(pred, label));
            }
        }
    }

    let (cluster, recon) = graph.autoencoder_terms(ablation);
    if let Some(c) = cluster {
        terms.push(c);
    }
    if let Some(r) = recon {
        terms.push(r);
    }
    terms.push(graph.graph_terms(lambda, beta1, beta2)?);

    let root = graph.tape.add_n(&terms);
    Ok((graph, root))
}
