//! Item raw features, the encoder/decoder pair, and differentiable soft
//! clustering.
//!
//! Each item `v` carries a raw feature vector which the encoder maps to an
//! embedding `v*`. A free per-item logit vector, pushed through a temperature
//! softmax, yields the cluster assignment `v_bar` on the simplex. The decoder
//! reconstructs the raw features from `v*`; the clustering loss ties `v*` to a
//! convex combination of shared cluster centers.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffnum::{sigmoid, softmax_vec, Matrix};
use crate::error::{Error, Result};

/// Raw features for a fixed item vocabulary; one row per item.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    ids: Vec<String>,
    data: Matrix,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, data: Matrix) -> Result<Self> {
        if ids.len() != data.rows() {
            return Err(Error::Dimension(format!(
                "{} item ids but {} feature rows",
                ids.len(),
                data.rows()
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("non-finite feature entries".into()));
        }
        Ok(FeatureTable { ids, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn raw(&self, item: usize) -> Matrix {
        self.data.row_as_column(item)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    /// Row index of an item id, if present.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Reorders rows to match `order` (a list of item ids). Errors if any id
    /// is missing from the table.
    pub fn reordered(&self, order: &[String]) -> Result<FeatureTable> {
        let mut data = Matrix::zeros(order.len(), self.dim());
        for (i, id) in order.iter().enumerate() {
            let src = self.index_of(id).ok_or_else(|| {
                Error::Usage(format!("item {id} has no row in the feature table"))
            })?;
            for j in 0..self.dim() {
                data.set(i, j, self.data.get(src, j));
            }
        }
        FeatureTable::new(order.to_vec(), data)
    }

    /// I.i.d. standard-normal features for items without a feature file.
    pub fn random(ids: Vec<String>, dim: usize, seed: u64) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ids.len();
        let data = Matrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut rng));
        FeatureTable { ids, data }
    }
}

/// Parses the item-feature CSV: header `item_id,f0,...,f{d-1}`, one row per
/// item. Parse failures report the 1-based line number.
pub fn load_features(path: &Path) -> Result<FeatureTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_features(&text)
}

pub fn parse_features(text: &str) -> Result<FeatureTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty feature file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"item_id") || cols.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header item_id,f0,...; got {header:?}"),
        });
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{j}, got {c:?}"),
            });
        }
    }
    let dim = cols.len() - 1;

    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        ids.push(fields[0].to_string());
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad number {f:?}"),
            })?;
            data.push(v);
        }
    }
    let n = ids.len();
    FeatureTable::new(ids, Matrix::from_vec(n, dim, data))
}

pub fn write_features(table: &FeatureTable, path: &Path) -> Result<()> {
    let mut out = String::from("item_id");
    for j in 0..table.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, id) in table.ids().iter().enumerate() {
        out.push_str(id);
        for j in 0..table.dim() {
            out.push_str(&format!(",{}", table.matrix().get(i, j)));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Encoder/decoder weights, cluster centers, and per-item assignment logits.
///
/// Shapes: encoder `v1 (d1 x d)`, `v2 (d2 x d1)`; decoder mirrors it with
/// hidden width `d3 = d1`; `centers (d2 x k)`; `assign_logits (|V| x k)`,
/// one row per item.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub v1: Matrix,
    pub b1: Matrix,
    pub v2: Matrix,
    pub b2: Matrix,
    pub v3: Matrix,
    pub b3: Matrix,
    pub v4: Matrix,
    pub b4: Matrix,
    pub centers: Matrix,
    pub assign_logits: Matrix,
    pub eta: f64,
}

/// Embedding/cluster dimensions used to build a [`ClusterModel`].
#[derive(Debug, Clone, Copy)]
pub struct ClusterDims {
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
}

impl ClusterModel {
    /// Weights uniform in [-0.1, 0.1]; centers sampled from encoded items;
    /// assignment logits zero (uniform soft assignment).
    pub fn init(
        dims: ClusterDims,
        features: &FeatureTable,
        eta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ClusterModel> {
        if dims.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", dims.k)));
        }
        if eta <= 0.0 {
            return Err(Error::Config(format!("eta must be > 0, got {eta}")));
        }
        if features.dim() != dims.d {
            return Err(Error::Dimension(format!(
                "feature dim {} != configured d {}",
                features.dim(),
                dims.d
            )));
        }
        let mut uniform = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.gen_range(-0.1..0.1));
        let mut model = ClusterModel {
            v1: uniform(dims.d1, dims.d),
            b1: uniform(dims.d1, 1),
            v2: uniform(dims.d2, dims.d1),
            b2: uniform(dims.d2, 1),
            v3: uniform(dims.d1, dims.d2),
            b3: uniform(dims.d1, 1),
            v4: uniform(dims.d, dims.d1),
            b4: uniform(dims.d, 1),
            centers: Matrix::zeros(dims.d2, dims.k),
            assign_logits: Matrix::zeros(features.len(), dims.k),
            eta,
        };
        // Seed centers with encoded items, chosen farthest-first so every
        // feature mode gets covered even when K is small.
        let encoded: Vec<Matrix> = (0..features.len())
            .map(|v| model.encode(&features.raw(v)))
            .collect::<Result<_>>()?;
        let mut chosen: Vec<usize> = vec![rng.gen_range(0..features.len())];
        while chosen.len() < dims.k {
            let far = (0..features.len())
                .max_by(|&a, &b| {
                    let da = min_dist(&encoded[a], &chosen, &encoded);
                    let db = min_dist(&encoded[b], &chosen, &encoded);
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("non-empty item set");
            chosen.push(far);
        }
        for (k, &item) in chosen.iter().enumerate() {
            for r in 0..dims.d2 {
                model.centers.set(r, k, encoded[item].get(r, 0));
            }
        }
        // Start each item's assignment in its nearest center's basin rather
        // than at the uniform saddle, where the clustering loss has no grip.
        let logit = eta * (9.0 * (dims.k - 1) as f64).ln();
        for (v, enc) in encoded.iter().enumerate() {
            let nearest = (0..dims.k)
                .min_by(|&a, &b| {
                    let da = center_dist(enc, &model.centers, a);
                    let db = center_dist(enc, &model.centers, b);
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("k >= 2");
            model.assign_logits.set(v, nearest, logit);
        }
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.centers.cols()
    }

    pub fn d2(&self) -> usize {
        self.centers.rows()
    }

    /// `v* = V2 sigma(V1 raw + b1) + b2`.
    pub fn encode(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.rows() != self.v1.cols() || raw.cols() != 1 {
            return Err(Error::Usage(format!(
                "encode expects a {}x1 input, got {}x{}",
                self.v1.cols(),
                raw.rows(),
                raw.cols()
            )));
        }
        let hidden = self.v1.matmul(raw).add(&self.b1).map(sigmoid);
        Ok(self.v2.matmul(&hidden).add(&self.b2))
    }

    /// `v_hat = V4 sigma(V3 v* + b3) + b4`.
    pub fn decode(&self, v_star: &Matrix) -> Result<Matrix> {
        if v_star.rows() != self.v3.cols() || v_star.cols() != 1 {
            return Err(Error::Usage(format!(
                "decode expects a {}x1 input, got {}x{}",
                self.v3.cols(),
                v_star.rows(),
                v_star.cols()
            )));
        }
        let hidden = self.v3.matmul(v_star).add(&self.b3).map(sigmoid);
        Ok(self.v4.matmul(&hidden).add(&self.b4))
    }

    /// Cluster assignment of one item from its stored logits.
    pub fn assignment(&self, item: usize) -> Result<Matrix> {
        assign(&self.assign_logits.row_as_column(item), self.eta)
    }

    /// All assignment vectors stacked as rows (|V| x k).
    pub fn assignment_matrix(&self) -> Result<Matrix> {
        let n = self.assign_logits.rows();
        let mut out = Matrix::zeros(n, self.k());
        for v in 0..n {
            let a = self.assignment(v)?;
            for k in 0..self.k() {
                out.set(v, k, a.get(k, 0));
            }
        }
        Ok(out)
    }

    /// Embeddings of every item stacked as rows (|V| x d2).
    pub fn embedding_matrix(&self, features: &FeatureTable) -> Result<Matrix> {
        let n = features.len();
        let mut out = Matrix::zeros(n, self.d2());
        for v in 0..n {
            let e = self.encode(&features.raw(v))?;
            for j in 0..self.d2() {
                out.set(v, j, e.get(j, 0));
            }
        }
        Ok(out)
    }
}

fn center_dist(point: &Matrix, centers: &Matrix, k: usize) -> f64 {
    (0..centers.rows())
        .map(|r| (point.get(r, 0) - centers.get(r, k)).powi(2))
        .sum()
}

fn min_dist(point: &Matrix, chosen: &[usize], encoded: &[Matrix]) -> f64 {
    chosen
        .iter()
        .map(|&c| {
            let diff = point.sub(&encoded[c]);
            diff.dot(&diff)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Temperature softmax `v_bar_k = exp(a_k / eta) / sum_j exp(a_j / eta)`,
/// computed with max-subtraction. Positive components summing to one.
pub fn assign(logits: &Matrix, eta: f64) -> Result<Matrix> {
    if eta <= 0.0 {
        return Err(Error::Usage(format!("temperature must be > 0, got {eta}")));
    }
    if logits.cols() != 1 {
        return Err(Error::Usage("assign expects a column vector".into()));
    }
    let scaled: Vec<f64> = logits.data().iter().map(|&a| a / eta).collect();
    Ok(Matrix::column(&softmax_vec(&scaled)))
}

/// Clustering and reconstruction sums over the whole vocabulary:
/// `sum_v ||v* - sum_k vbar_k m_k||^2` and `sum_v ||v_hat - v~||^2`.
pub fn autoencoder_losses(features: &FeatureTable, model: &ClusterModel) -> Result<(f64, f64)> {
    if features.is_empty() {
        return Err(Error::Usage("autoencoder_losses on an empty item set".into()));
    }
    let mut cluster_loss = 0.0;
    let mut recon_loss = 0.0;
    for v in 0..features.len() {
        let raw = features.raw(v);
        let v_star = model.encode(&raw)?;
        let v_bar = model.assignment(v)?;
        let mixture = model.centers.matmul(&v_bar);
        let cdiff = v_star.sub(&mixture);
        cluster_loss += cdiff.dot(&cdiff);
        let v_hat = model.decode(&v_star)?;
        let rdiff = v_hat.sub(&raw);
        recon_loss += rdiff.dot(&rdiff);
    }
    Ok((cluster_loss, recon_loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_features(n: usize, d: usize, seed: u64) -> FeatureTable {
        FeatureTable::random((0..n).map(|i| format!("i{i}")).collect(), d, seed)
    }

    fn toy_model(dims: ClusterDims, features: &FeatureTable, seed: u64) -> ClusterModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClusterModel::init(dims, features, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn encode_zero_weights_gives_zero() {
        let features = toy_features(3, 4, 1);
        let dims = ClusterDims { d: 4, d1: 5, d2: 6, k: 2 };
        let mut model = toy_model(dims, &features, 2);
        model.v1 = Matrix::zeros(5, 4);
        model.b1 = Matrix::zeros(5, 1);
        model.v2 = Matrix::zeros(6, 5);
        model.b2 = Matrix::zeros(6, 1);
        let out = model.encode(&features.raw(0)).unwrap();
        assert_eq!(out, Matrix::zeros(6, 1));
    }

    #[test]
    fn encode_sigmoid_midpoint() {
        // V1 = 0 makes the hidden layer sigma(0) = 0.5 everywhere; with
        // V2 = I the output is 0.5 + c per coordinate.
        let features = toy_features(2, 3, 3);
        let dims = ClusterDims { d: 3, d1: 3, d2: 3, k: 2 };
        let mut model = toy_model(dims, &features, 4);
        model.v1 = Matrix::zeros(3, 3);
        model.b1 = Matrix::zeros(3, 1);
        model.v2 = Matrix::identity(3);
        model.b2 = Matrix::column(&[0.25, 0.25, 0.25]);
        let out = model.encode(&features.raw(1)).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_matches_reference_evaluation() {
        let features = toy_features(5, 4, 5);
        let dims = ClusterDims { d: 4, d1: 3, d2: 2, k: 2 };
        let model = toy_model(dims, &features, 6);
        for v in 0..5 {
            let raw = features.raw(v);
            // Independent scalar-loop evaluation of the same composition.
            let mut hidden = vec![0.0; 3];
            for i in 0..3 {
                let mut acc = model.b1.get(i, 0);
                for j in 0..4 {
                    acc += model.v1.get(i, j) * raw.get(j, 0);
                }
                hidden[i] = 1.0 / (1.0 + (-acc).exp());
            }
            let mut expect = vec![0.0; 2];
            for i in 0..2 {
                let mut acc = model.b2.get(i, 0);
                for j in 0..3 {
                    acc += model.v2.get(i, j) * hidden[j];
                }
                expect[i] = acc;
            }
            let got = model.encode(&raw).unwrap();
            for i in 0..2 {
                assert!((got.get(i, 0) - expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_saturated_hidden() {
        let features = toy_features(2, 3, 7);
        let dims = ClusterDims { d: 3, d1: 3, d2: 3, k: 2 };
        let mut model = toy_model(dims, &features, 8);
        model.v3 = Matrix::zeros(3, 3);
        model.b3 = Matrix::column(&[40.0, 40.0, 40.0]);
        model.v4 = Matrix::identity(3);
        model.b4 = Matrix::zeros(3, 1);
        let out = model.decode(&Matrix::column(&[0.1, 0.2, 0.3])).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn assign_symmetry_and_temperature_limit() {
        let even = assign(&Matrix::column(&[0.0, 0.0]), 2.5).unwrap();
        assert!((even.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((even.get(1, 0) - 0.5).abs() < 1e-15);

        // eta -> 0 approaches the hard assignment.
        let hard = assign(&Matrix::column(&[1.0, 0.0]), 1e-4).unwrap();
        assert!(hard.get(0, 0) > 1.0 - 1e-12);

        let soft = assign(&Matrix::column(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        assert!((soft.get(0, 0) - 0.09003).abs() < 1e-5);
        assert!((soft.get(1, 0) - 0.24473).abs() < 1e-5);
        assert!((soft.get(2, 0) - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn assign_rejects_bad_temperature() {
        assert!(assign(&Matrix::column(&[0.0]), 0.0).is_err());
        assert!(assign(&Matrix::column(&[0.0]), -1.0).is_err());
    }

    #[test]
    fn cluster_loss_zero_when_on_center() {
        let features = toy_features(1, 3, 9);
        let dims = ClusterDims { d: 3, d1: 2, d2: 2, k: 2 };
        let mut model = toy_model(dims, &features, 10);
        // Pin the single item's embedding onto center 0 via a near-one-hot
        // assignment.
        let v_star = model.encode(&features.raw(0)).unwrap();
        for r in 0..2 {
            model.centers.set(r, 0, v_star.get(r, 0));
        }
        model.assign_logits.set(0, 0, 60.0);
        let (cluster_loss, _) = autoencoder_losses(&features, &model).unwrap();
        assert!(cluster_loss < 1e-12, "cluster_loss = {cluster_loss}");
    }

    #[test]
    fn losses_match_brute_force() {
        let features = toy_features(3, 4, 11);
        let dims = ClusterDims { d: 4, d1: 3, d2: 2, k: 2 };
        let model = toy_model(dims, &features, 12);
        let (cl, rl) = autoencoder_losses(&features, &model).unwrap();

        let mut expect_cl = 0.0;
        let mut expect_rl = 0.0;
        for v in 0..3 {
            let raw = features.raw(v);
            let vs = model.encode(&raw).unwrap();
            let vb = model.assignment(v).unwrap();
            for r in 0..2 {
                let mut mix = 0.0;
                for k in 0..2 {
                    mix += vb.get(k, 0) * model.centers.get(r, k);
                }
                expect_cl += (vs.get(r, 0) - mix).powi(2);
            }
            let vh = model.decode(&vs).unwrap();
            for r in 0..4 {
                expect_rl += (vh.get(r, 0) - raw.get(r, 0)).powi(2);
            }
        }
        assert!((cl - expect_cl).abs() < 1e-12);
        assert!((rl - expect_rl).abs() < 1e-12);
    }

    #[test]
    fn losses_reject_empty_items() {
        let features = FeatureTable::new(vec![], Matrix::zeros(0, 3)).unwrap();
        let full = toy_features(2, 3, 13);
        let dims = ClusterDims { d: 3, d1: 2, d2: 2, k: 2 };
        let model = toy_model(dims, &full, 14);
        assert!(autoencoder_losses(&features, &model).is_err());
    }

    #[test]
    fn feature_csv_roundtrip_and_errors() {
        let text = "item_id,f0,f1\npen,0.5,1.5\nink,-1,2\n";
        let table = parse_features(text).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.dim(), 2);
        assert_eq!(table.raw(1).data(), &[-1.0, 2.0]);

        let bad = "item_id,f0,f1\npen,0.5\n";
        match parse_features(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let bad_num = "item_id,f0\npen,abc\n";
        match parse_features(bad_num) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
