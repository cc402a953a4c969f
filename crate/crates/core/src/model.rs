//! The assembled model stack: clustering autoencoder, cluster-level causal
//! graph, and the recurrent predictor, plus the checkpoint file format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal_graph::{item_matrix, CausalGraph};
use crate::diffnum::Matrix;
use crate::error::{Error, Result};
use crate::item_space::{ClusterDims, ClusterModel, FeatureTable};
use crate::seq_model::{predict, Ablation, CellKind, CellParams, PredictContext, SeqModel};

/// All structural sizes of the stack.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelDims {
    /// Raw feature dimension.
    pub d: usize,
    /// Encoder hidden width (the decoder mirrors it).
    pub d1: usize,
    /// Item embedding width.
    pub d2: usize,
    /// Number of latent clusters.
    pub k: usize,
    /// Output/user embedding width.
    pub d_e: usize,
    /// Recurrent hidden width.
    pub d_h: usize,
}

/// Cluster model, causal graph, and sequence model over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct CauserModel {
    pub cluster: ClusterModel,
    pub graph: CausalGraph,
    pub seq: SeqModel,
    pub features: FeatureTable,
    pub item_ids: Vec<String>,
    pub user_ids: Vec<String>,
    pub dims: ModelDims,
}

/// Derived read-only state for scoring: item embeddings, assignments, and
/// the item-level relation matrix. Rebuilt whenever parameters change.
#[derive(Debug, Clone)]
pub struct EvalCache {
    pub vstar: Matrix,
    pub vbar: Matrix,
    pub w_item: Matrix,
}

impl CauserModel {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        dims: ModelDims,
        cell_kind: CellKind,
        features: FeatureTable,
        item_ids: Vec<String>,
        user_ids: Vec<String>,
        eta: f64,
        lambda: f64,
        epsilon: f64,
        wc_init: (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Result<CauserModel> {
        if features.len() != item_ids.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} items",
                features.len(),
                item_ids.len()
            )));
        }
        let cluster = ClusterModel::init(
            ClusterDims { d: dims.d, d1: dims.d1, d2: dims.d2, k: dims.k },
            &features,
            eta,
            rng,
        )?;
        let (lo, hi) = wc_init;
        if !(lo <= hi) {
            return Err(Error::Config(format!("wc_init range [{lo}, {hi}] is empty")));
        }
        let mut wc = Matrix::from_fn(dims.k, dims.k, |i, j| {
            if i == j {
                0.0
            } else {
                rng.gen_range(lo..=hi)
            }
        });
        for i in 0..dims.k {
            wc.set(i, i, 0.0);
        }
        let graph = CausalGraph::new(wc, lambda, epsilon)?;
        let seq = SeqModel::init(
            cell_kind,
            dims.d_h,
            dims.d_e,
            dims.d2,
            item_ids.len(),
            user_ids.len(),
            rng,
        );
        Ok(CauserModel { cluster, graph, seq, features, item_ids, user_ids, dims })
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn cell_kind(&self) -> CellKind {
        self.seq.cell.kind()
    }

    /// Recomputes embeddings, assignments, and the item relation matrix from
    /// the current parameters.
    pub fn eval_cache(&self) -> Result<EvalCache> {
        let vstar = self.cluster.embedding_matrix(&self.features)?;
        let vbar = self.cluster.assignment_matrix()?;
        let w_item = item_matrix(&vbar, &self.graph.wc)?;
        Ok(EvalCache { vstar, vbar, w_item })
    }

    /// Interaction probability via the filtered recurrent scorer.
    pub fn predict(
        &self,
        history: &[Vec<usize>],
        user: usize,
        target: usize,
        cache: &EvalCache,
        ablation: Ablation,
    ) -> Result<f64> {
        let ctx = PredictContext {
            vstar: &cache.vstar,
            w_item: &cache.w_item,
            epsilon: self.graph.epsilon,
            ablation,
        };
        predict(history, user, target, &ctx, &self.seq)
    }

    /// Names of every trainable tensor, in a fixed update order.
    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec![
            "v1", "b1", "v2", "b2", "v3", "b3", "v4", "b4", "centers", "assign_logits",
        ];
        match self.seq.cell {
            CellParams::Gru { .. } => {
                names.extend(["gru_z_w", "gru_z_u", "gru_z_b", "gru_r_w", "gru_r_u", "gru_r_b",
                    "gru_h_w", "gru_h_u", "gru_h_b"]);
            }
            CellParams::Lstm { .. } => {
                names.extend([
                    "lstm_i_w", "lstm_i_u", "lstm_i_b", "lstm_f_w", "lstm_f_u", "lstm_f_b",
                    "lstm_o_w", "lstm_o_u", "lstm_o_b", "lstm_g_w", "lstm_g_u", "lstm_g_b",
                ]);
            }
        }
        names.extend(["input_proj", "attn", "adapter", "out_emb", "user_emb", "wc"]);
        names
    }

    /// Tensors belonging to the clustering autoencoder (updated on the slow
    /// lane together with `wc` when that mode is enabled).
    pub fn is_slow_lane_param(name: &str) -> bool {
        matches!(
            name,
            "v1" | "b1" | "v2" | "b2" | "v3" | "b3" | "v4" | "b4" | "centers"
                | "assign_logits" | "wc"
        )
    }

    pub fn param(&self, name: &str) -> &Matrix {
        self.param_ref(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Matrix {
        match name {
            "v1" => &mut self.cluster.v1,
            "b1" => &mut self.cluster.b1,
            "v2" => &mut self.cluster.v2,
            "b2" => &mut self.cluster.b2,
            "v3" => &mut self.cluster.v3,
            "b3" => &mut self.cluster.b3,
            "v4" => &mut self.cluster.v4,
            "b4" => &mut self.cluster.b4,
            "centers" => &mut self.cluster.centers,
            "assign_logits" => &mut self.cluster.assign_logits,
            "input_proj" => &mut self.seq.input_proj,
            "attn" => &mut self.seq.attn,
            "adapter" => &mut self.seq.adapter,
            "out_emb" => &mut self.seq.out_emb,
            "user_emb" => &mut self.seq.user_emb,
            "wc" => &mut self.graph.wc,
            _ => match &mut self.seq.cell {
                CellParams::Gru { update, reset, candidate } => match name {
                    "gru_z_w" => &mut update.w,
                    "gru_z_u" => &mut update.u,
                    "gru_z_b" => &mut update.b,
                    "gru_r_w" => &mut reset.w,
                    "gru_r_u" => &mut reset.u,
                    "gru_r_b" => &mut reset.b,
                    "gru_h_w" => &mut candidate.w,
                    "gru_h_u" => &mut candidate.u,
                    "gru_h_b" => &mut candidate.b,
                    _ => panic!("unknown parameter {name}"),
                },
                CellParams::Lstm { input, forget, output, candidate } => match name {
                    "lstm_i_w" => &mut input.w,
                    "lstm_i_u" => &mut input.u,
                    "lstm_i_b" => &mut input.b,
                    "lstm_f_w" => &mut forget.w,
                    "lstm_f_u" => &mut forget.u,
                    "lstm_f_b" => &mut forget.b,
                    "lstm_o_w" => &mut output.w,
                    "lstm_o_u" => &mut output.u,
                    "lstm_o_b" => &mut output.b,
                    "lstm_g_w" => &mut candidate.w,
                    "lstm_g_u" => &mut candidate.u,
                    "lstm_g_b" => &mut candidate.b,
                    _ => panic!("unknown parameter {name}"),
                },
            },
        }
    }

    fn param_ref(&self, name: &str) -> Option<&Matrix> {
        Some(match name {
            "v1" => &self.cluster.v1,
            "b1" => &self.cluster.b1,
            "v2" => &self.cluster.v2,
            "b2" => &self.cluster.b2,
            "v3" => &self.cluster.v3,
            "b3" => &self.cluster.b3,
            "v4" => &self.cluster.v4,
            "b4" => &self.cluster.b4,
            "centers" => &self.cluster.centers,
            "assign_logits" => &self.cluster.assign_logits,
            "input_proj" => &self.seq.input_proj,
            "attn" => &self.seq.attn,
            "adapter" => &self.seq.adapter,
            "out_emb" => &self.seq.out_emb,
            "user_emb" => &self.seq.user_emb,
            "wc" => &self.graph.wc,
            _ => match &self.seq.cell {
                CellParams::Gru { update, reset, candidate } => match name {
                    "gru_z_w" => &update.w,
                    "gru_z_u" => &update.u,
                    "gru_z_b" => &update.b,
                    "gru_r_w" => &reset.w,
                    "gru_r_u" => &reset.u,
                    "gru_r_b" => &reset.b,
                    "gru_h_w" => &candidate.w,
                    "gru_h_u" => &candidate.u,
                    "gru_h_b" => &candidate.b,
                    _ => return None,
                },
                CellParams::Lstm { input, forget, output, candidate } => match name {
                    "lstm_i_w" => &input.w,
                    "lstm_i_u" => &input.u,
                    "lstm_i_b" => &input.b,
                    "lstm_f_w" => &forget.w,
                    "lstm_f_u" => &forget.u,
                    "lstm_f_b" => &forget.b,
                    "lstm_o_w" => &output.w,
                    "lstm_o_u" => &output.u,
                    "lstm_o_b" => &output.b,
                    "lstm_g_w" => &candidate.w,
                    "lstm_g_u" => &candidate.u,
                    "lstm_g_b" => &candidate.b,
                    _ => return None,
                },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for name in self.param_names() {
            tensors.insert(name.to_string(), self.param(name).clone());
        }
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            cell_kind: self.cell_kind(),
            dims: self.dims,
            eta: self.cluster.eta,
            lambda: self.graph.lambda,
            epsilon: self.graph.epsilon,
            item_ids: self.item_ids.clone(),
            user_ids: self.user_ids.clone(),
            features: self.features.matrix().clone(),
            tensors,
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::Usage(format!("checkpoint serialization failed: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<CauserModel> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("bad checkpoint: {e}"),
        })?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Usage(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let features = FeatureTable::new(file.item_ids.clone(), file.features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = CauserModel::init(
            file.dims,
            file.cell_kind,
            features,
            file.item_ids,
            file.user_ids,
            file.eta,
            file.lambda,
            file.epsilon,
            (0.0, 0.0),
            &mut rng,
        )?;
        for name in model.param_names() {
            let tensor = file
                .tensors
                .get(name)
                .ok_or_else(|| Error::Usage(format!("checkpoint missing tensor {name}")))?;
            let slot = model.param_mut(name);
            if !slot.same_shape(tensor) {
                return Err(Error::Dimension(format!(
                    "checkpoint tensor {name} is {}x{}, expected {}x{}",
                    tensor.rows(),
                    tensor.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: every parameter tensor under a named key, plus the
/// structural metadata needed to rebuild the stack. The version field is
/// mandatory.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    cell_kind: CellKind,
    dims: ModelDims,
    eta: f64,
    lambda: f64,
    epsilon: f64,
    item_ids: Vec<String>,
    user_ids: Vec<String>,
    features: Matrix,
    tensors: BTreeMap<String, Matrix>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_model(seed: u64, cell: CellKind) -> CauserModel {
        let dims = ModelDims { d: 3, d1: 4, d2: 3, k: 2, d_e: 3, d_h: 3 };
        let item_ids: Vec<String> = (0..4).map(|i| format!("i{i}")).collect();
        let user_ids: Vec<String> = (0..2).map(|u| format!("u{u}")).collect();
        let features = FeatureTable::random(item_ids.clone(), dims.d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CauserModel::init(
            dims,
            cell,
            features,
            item_ids,
            user_ids,
            1.0,
            0.01,
            0.3,
            (-0.05, 0.05),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn param_registry_is_consistent() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let mut model = tiny_model(1, cell);
            for name in model.param_names() {
                let shape = (model.param(name).rows(), model.param(name).cols());
                let via_mut = model.param_mut(name);
                assert_eq!((via_mut.rows(), via_mut.cols()), shape, "{name}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let model = tiny_model(2, CellKind::Gru);
        let dir = std::env::temp_dir().join("causer_test_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        model.save(&path).unwrap();
        let loaded = CauserModel::load(&path).unwrap();
        for name in model.param_names() {
            assert_eq!(model.param(name), loaded.param(name), "{name}");
        }
        assert_eq!(model.item_ids, loaded.item_ids);
        assert_eq!(model.features.matrix(), loaded.features.matrix());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_without_version_is_rejected() {
        let dir = std::env::temp_dir().join("causer_test_ckpt_nov");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, "{\"cell_kind\":\"gru\"}").unwrap();
        assert!(CauserModel::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wc_diagonal_starts_at_zero() {
        let model = tiny_model(3, CellKind::Gru);
        for i in 0..model.dims.k {
            assert_eq!(model.graph.wc.get(i, i), 0.0);
        }
    }
}
