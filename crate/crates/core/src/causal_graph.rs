//! The cluster-level causal matrix, its projection to item-level relations,
//! thresholding, causal-effect aggregation, and basic graph algebra.

use serde::{Deserialize, Serialize};

use crate::diffnum::Matrix;
use crate::error::{Error, Result};

/// Continuous cluster-level causal matrix plus the knobs that act on it.
///
/// Entries are unconstrained reals during optimization; acyclicity is driven
/// by the trainer through the smooth penalty and verified afterwards. The
/// diagonal is kept at zero by the trainer's gradient mask.
#[derive(Debug, Clone)]
pub struct CausalGraph {
    pub wc: Matrix,
    /// L1 sparsity weight, >= 0.
    pub lambda: f64,
    /// Filtering threshold in (0, 1).
    pub epsilon: f64,
}

impl CausalGraph {
    pub fn new(wc: Matrix, lambda: f64, epsilon: f64) -> Result<Self> {
        if !wc.is_square() || wc.rows() < 2 {
            return Err(Error::Dimension(format!(
                "cluster matrix must be square with K >= 2, got {}x{}",
                wc.rows(),
                wc.cols()
            )));
        }
        if lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(0.0 < epsilon && epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        Ok(CausalGraph { wc, lambda, epsilon })
    }

    pub fn k(&self) -> usize {
        self.wc.rows()
    }
}

/// Bilinear projection of a cluster pair onto two items:
/// `W_ab = sum_ij abar_i Wc_ij bbar_j`.
pub fn item_causal(a_bar: &Matrix, b_bar: &Matrix, wc: &Matrix) -> Result<f64> {
    let k = wc.rows();
    if !wc.is_square() || a_bar.rows() != k || b_bar.rows() != k
        || a_bar.cols() != 1 || b_bar.cols() != 1
    {
        return Err(Error::Usage(format!(
            "item_causal dims: wc {}x{}, a {}x{}, b {}x{}",
            wc.rows(), wc.cols(), a_bar.rows(), a_bar.cols(), b_bar.rows(), b_bar.cols()
        )));
    }
    let mut total = 0.0;
    for i in 0..k {
        let ai = a_bar.get(i, 0);
        if ai == 0.0 {
            continue;
        }
        for j in 0..k {
            total += ai * wc.get(i, j) * b_bar.get(j, 0);
        }
    }
    Ok(total)
}

/// Full item-level relation matrix `W = R Wc R^T`, where row `v` of the
/// assignment matrix `R` is the cluster assignment of item `v`.
pub fn item_matrix(assignments: &Matrix, wc: &Matrix) -> Result<Matrix> {
    if !wc.is_square() || assignments.cols() != wc.rows() {
        return Err(Error::Usage(format!(
            "item_matrix dims: assignments {}x{}, wc {}x{}",
            assignments.rows(),
            assignments.cols(),
            wc.rows(),
            wc.cols()
        )));
    }
    Ok(assignments.matmul(wc).matmul(&assignments.transpose()))
}

/// Strict threshold mask: `mask_i = w_i > epsilon`.
pub fn binarize_column(w_col: &[f64], epsilon: f64) -> Vec<bool> {
    w_col.iter().map(|&w| w > epsilon).collect()
}

/// Total causal effect from the items present at one step onto a target:
/// the sum of the target column's entries that exceed the threshold, over
/// the items in the step.
pub fn causal_effect(step_items: &[usize], w_col: &[f64], epsilon: f64) -> f64 {
    step_items
        .iter()
        .map(|&i| {
            let w = w_col[i];
            if w > epsilon {
                w
            } else {
                0.0
            }
        })
        .sum()
}

/// Sum of absolute values of all entries.
pub fn l1_penalty(m: &Matrix) -> f64 {
    m.abs_sum()
}

/// Kahn's algorithm: true iff the topological sort consumes every node.
pub fn is_acyclic(n: usize, adj: &[bool]) -> bool {
    assert_eq!(adj.len(), n * n, "adjacency must be n x n");
    let mut indegree = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if adj[i * n + j] {
                indegree[j] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&j| indegree[j] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop() {
        seen += 1;
        for j in 0..n {
            if adj[i * n + j] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push(j);
                }
            }
        }
    }
    seen == n
}

/// A validated directed acyclic 0/1 graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDag {
    n: usize,
    adj: Vec<bool>,
}

impl BinaryDag {
    pub fn try_new(n: usize, adj: Vec<bool>) -> Result<Self> {
        if adj.len() != n * n {
            return Err(Error::Dimension(format!(
                "adjacency length {} != {n}x{n}",
                adj.len()
            )));
        }
        if !is_acyclic(n, &adj) {
            return Err(Error::Usage("graph contains a directed cycle".into()));
        }
        Ok(BinaryDag { n, adj })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![false; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Usage(format!("edge ({i},{j}) out of range for n={n}")));
            }
            adj[i * n + j] = true;
        }
        BinaryDag::try_new(n, adj)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adj
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.adj[i * self.n + j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn parents_of(&self, j: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.has_edge(i, j)).collect()
    }

    pub fn children_of(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(i, j)).collect()
    }
}

/// Absolute-value binarization of a weighted matrix, for graph export.
pub fn threshold_abs(m: &Matrix, threshold: f64) -> (usize, Vec<bool>) {
    assert!(m.is_square(), "threshold_abs expects a square matrix");
    let n = m.rows();
    let mut adj = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            adj[i * n + j] = m.get(i, j).abs() > threshold;
        }
    }
    (n, adj)
}

/// JSON export of a weighted graph: entries above the export threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphExport {
    pub k: usize,
    pub edges: Vec<EdgeExport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeExport {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

impl GraphExport {
    pub fn from_matrix(m: &Matrix, threshold: f64) -> GraphExport {
        assert!(m.is_square());
        let n = m.rows();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = m.get(i, j);
                if w.abs() > threshold {
                    edges.push(EdgeExport { src: i, dst: j, weight: w });
                }
            }
        }
        GraphExport { k: n, edges }
    }

    pub fn to_dag(&self) -> Result<BinaryDag> {
        let pairs: Vec<(usize, usize)> =
            self.edges.iter().map(|e| (e.src, e.dst)).collect();
        BinaryDag::from_edges(self.k, &pairs)
    }
}

/// Item-level export with item identifiers instead of indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemGraphExport {
    pub items: Vec<String>,
    pub edges: Vec<ItemEdgeExport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemEdgeExport {
    pub src: String,
    pub dst: String,
    pub weight: f64,
}

impl ItemGraphExport {
    pub fn from_matrix(m: &Matrix, ids: &[String], threshold: f64) -> ItemGraphExport {
        assert!(m.is_square() && m.rows() == ids.len());
        let mut edges = Vec::new();
        for i in 0..ids.len() {
            for j in 0..ids.len() {
                let w = m.get(i, j);
                if w.abs() > threshold {
                    edges.push(ItemEdgeExport {
                        src: ids[i].clone(),
                        dst: ids[j].clone(),
                        weight: w,
                    });
                }
            }
        }
        ItemGraphExport { items: ids.to_vec(), edges }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::dag_penalty;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(k: usize, i: usize) -> Matrix {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        Matrix::column(&v)
    }

    #[test]
    fn item_causal_hard_assignment_picks_entry() {
        let wc = Matrix::from_rows(&[&[0.0, 0.7], &[0.2, 0.0]]);
        for i in 0..2 {
            for j in 0..2 {
                let w = item_causal(&one_hot(2, i), &one_hot(2, j), &wc).unwrap();
                assert_eq!(w, wc.get(i, j));
            }
        }
    }

    #[test]
    fn item_causal_uniform_mix() {
        let wc = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let half = Matrix::column(&[0.5, 0.5]);
        assert!((item_causal(&half, &half, &wc).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn item_causal_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let wc = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let simplex = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                Matrix::column(&raw.iter().map(|v| v / s).collect::<Vec<_>>())
            };
            let a = simplex(&mut rng);
            let b = simplex(&mut rng);
            let got = item_causal(&a, &b, &wc).unwrap();
            let mut expect = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    expect += a.get(i, 0) * wc.get(i, j) * b.get(j, 0);
                }
            }
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn item_causal_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wc = Matrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let mk = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Matrix::column(&raw.iter().map(|v| v / s).collect::<Vec<_>>())
        };
        let a1 = mk(&mut rng);
        let a2 = mk(&mut rng);
        let b = mk(&mut rng);
        let alpha = 0.37;
        let blend = a1.scale(alpha).add(&a2.scale(1.0 - alpha));
        let lhs = item_causal(&blend, &b, &wc).unwrap();
        let rhs = alpha * item_causal(&a1, &b, &wc).unwrap()
            + (1.0 - alpha) * item_causal(&a2, &b, &wc).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn item_matrix_zero_and_hard_cases() {
        let assignments = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zero = item_matrix(&assignments, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(zero, Matrix::zeros(2, 2));

        let wc = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let w = item_matrix(&assignments, &wc).unwrap();
        assert_eq!(w, wc);
    }

    #[test]
    fn item_matrix_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 3;
        let n = 5;
        let mut assignments = Matrix::zeros(n, k);
        for v in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (j, r) in raw.iter().enumerate() {
                assignments.set(v, j, r / s);
            }
        }
        let wc = Matrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
        let w = item_matrix(&assignments, &wc).unwrap();
        for a in 0..n {
            for b in 0..n {
                let expect = item_causal(
                    &assignments.row_as_column(a),
                    &assignments.row_as_column(b),
                    &wc,
                )
                .unwrap();
                assert!((w.get(a, b) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize_column(&[0.05, 0.5, 0.9], 0.4), vec![false, true, true]);
        assert_eq!(binarize_column(&[0.4, 0.4], 0.4), vec![false, false]);
    }

    #[test]
    fn causal_effect_cases() {
        assert_eq!(causal_effect(&[], &[0.5, 0.5], 0.3), 0.0);
        assert_eq!(causal_effect(&[0], &[0.8, 0.1], 0.3), 0.8);
        // Sub-threshold weights are masked out before summing.
        let got = causal_effect(&[0, 1], &[0.2, 0.6], 0.3);
        let mask_then_dot = [0.2, 0.6]
            .iter()
            .zip([0.0, 1.0].iter())
            .map(|(w, m)| w * m)
            .sum::<f64>();
        assert_eq!(got, mask_then_dot);
        assert_eq!(got, 0.6);
    }

    #[test]
    fn l1_penalty_cases() {
        assert_eq!(l1_penalty(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(
            l1_penalty(&Matrix::from_rows(&[&[0.0, -1.0], &[2.0, 0.0]])),
            3.0
        );
    }

    #[test]
    fn acyclicity_of_chain_and_cycle() {
        let chain = BinaryDag::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(chain.edges(), vec![(0, 1), (1, 2)]);
        let mut cyc = vec![false; 4];
        cyc[1] = true; // 0 -> 1
        cyc[2] = true; // 1 -> 0
        assert!(!is_acyclic(2, &cyc));
        assert!(BinaryDag::try_new(2, cyc).is_err());
    }

    #[test]
    fn penalty_and_topological_sort_agree_on_four_nodes() {
        // Exhaustive cross-check over every 0/1 pattern on 4 nodes.
        let n = 4;
        let off_diag: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j)
            .collect();
        let m = off_diag.len();
        for bits in 0u32..(1 << m) {
            let mut adj = vec![false; n * n];
            let mut w = Matrix::zeros(n, n);
            for (b, &(i, j)) in off_diag.iter().enumerate() {
                if bits >> b & 1 == 1 {
                    adj[i * n + j] = true;
                    w.set(i, j, 1.0);
                }
            }
            let b = dag_penalty(&w).unwrap();
            if is_acyclic(n, &adj) {
                assert!(b < 1e-9, "acyclic pattern {bits:b} got penalty {b}");
            } else {
                assert!(b > 1e-6, "cyclic pattern {bits:b} got penalty {b}");
            }
        }
    }

    #[test]
    fn export_thresholds_by_absolute_value() {
        let m = Matrix::from_rows(&[&[0.0, 0.5], &[-0.4, 0.0]]);
        let export = GraphExport::from_matrix(&m, 0.3);
        assert_eq!(export.edges.len(), 2);
        let (n, adj) = threshold_abs(&m, 0.45);
        assert!(is_acyclic(n, &adj));
    }
}
