//! Scratch harness for tuning the synthetic benchmark training settings.

use causer_core::causal_graph::{threshold_abs, BinaryDag, GraphExport};
use causer_core::data_io::{gen_features, gen_synthetic, split_leave_last, SyntheticSpec};
use causer_core::eval::{evaluate_heldout, mec_report};
use causer_core::model::ModelDims;
use causer_core::seq_model::{Ablation, CellKind};
use causer_core::trainer::{train, ModelConfig, OptimizerState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let users: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12);
    let inner: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let gamma: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let lambda: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let eta: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let per_epoch: bool = args.get(8).map(|s| s == "epoch").unwrap_or(true);
    let kappa1: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let kappa2: f64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let batch: usize = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(128);
    let wc_lo: f64 = args.get(13).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    let wc_hi: f64 = args.get(14).and_then(|s| s.parse().ok()).unwrap_or(0.55);

    let planted = BinaryDag::from_edges(5, &[(0, 2), (1, 2), (2, 3), (3, 4)]).unwrap();
    let spec = SyntheticSpec {
        dag: planted.clone(),
        items_per_cluster: args.get(16).and_then(|s| s.parse().ok()).unwrap_or(10),
        users,
        trigger_p: 0.8,
        noise_p: args.get(18).and_then(|s| s.parse().ok()).unwrap_or(0.1),
        mean_len: 8.0,
        seed,
        feature_dim: 8,
        feature_noise: args.get(17).and_then(|s| s.parse().ok()).unwrap_or(0.05),
    };
    let data = gen_synthetic(&spec).unwrap();
    let ipc = spec.items_per_cluster;
    let _ = ipc;
    let features = gen_features(&data.dataset.item_ids, &data.assignments, 5, 8, spec.feature_noise, seed + 999).unwrap();
    let split = split_leave_last(&data.dataset).unwrap();

    let cfg = ModelConfig {
        dims: ModelDims { d: 8, d1: 16, d2: 16, k: 5, d_e: 16, d_h: 16 },
        cell_kind: CellKind::Gru,
        eta,
        wc_init: (wc_lo, wc_hi),
    };
    let state = OptimizerState {
        epochs,
        inner_iters: inner,
        batch_size: batch,
        negatives: args.get(15).and_then(|s| s.parse().ok()).unwrap_or(2),
        gamma,
        lambda,
        epsilon: args.get(12).and_then(|s| s.parse().ok()).unwrap_or(0.1),
        seed,
        lagrangian_per_epoch: per_epoch,
        warmup_epochs: args.get(19).and_then(|s| s.parse().ok()).unwrap_or(0),
        kappa1,
        kappa2,
        ..OptimizerState::default()
    };

    // Gradient-path diagnostic: how strongly does the cross-entropy reach wc
    // at init, versus the L1 + penalty terms?
    {
        use causer_core::trainer::total_loss_with_grads;
        use rand::SeedableRng;
        let feats = features.reordered(&split.train.item_ids).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let probe_model = causer_core::model::CauserModel::init(
            cfg.dims, cfg.cell_kind, feats, split.train.item_ids.clone(),
            split.train.user_ids.clone(), cfg.eta, state.lambda, state.epsilon,
            cfg.wc_init, &mut rng,
        ).unwrap();
        let batch_ids: Vec<usize> = (0..state.batch_size.min(split.train.sequences.len())).collect();
        let bce_only = OptimizerState { constrained: false, lambda: 0.0, ..state.clone() };
        let (_, g_bce) = total_loss_with_grads(&probe_model, &split.train, &batch_ids, &bce_only, 0, Ablation::default()).unwrap();
        let (_, g_full) = total_loss_with_grads(&probe_model, &split.train, &batch_ids, &state, 0, Ablation::default()).unwrap();
        println!(
            "wc grad inf-norm: bce-only {:.3e}, full {:.3e}; logits grad: bce-only {:.3e}, full {:.3e}",
            g_bce.get("wc").unwrap().inf_norm(),
            g_full.get("wc").unwrap().inf_norm(),
            g_bce.get("assign_logits").unwrap().inf_norm(),
            g_full.get("assign_logits").unwrap().inf_norm(),
        );
    }

    let t0 = std::time::Instant::now();
    let (model, log) = match train(&split.train, &features, &cfg, &state, Ablation::default()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("TRAIN FAILED: {e}");
            std::process::exit(3);
        }
    };
    let train_secs = t0.elapsed().as_secs_f64();

    for rec in &log.epochs {
        println!(
            "epoch {:2}  loss {:12.3}  b {:10.3e}  beta1 {:10.3e}  beta2 {:10.3e}",
            rec.epoch, rec.loss, rec.dag_penalty, rec.beta1, rec.beta2
        );
    }
    println!("train time: {train_secs:.1}s");

    println!("wc =");
    for i in 0..5 {
        let row: Vec<String> = (0..5).map(|j| format!("{:7.3}", model.graph.wc.get(i, j))).collect();
        println!("  [{}]", row.join(", "));
    }

    // Cluster recovery: majority-vote mapping learned->planted.
    let cache = model.eval_cache().unwrap();
    let n_items = model.n_items();
    let learned: Vec<usize> = (0..n_items)
        .map(|v| {
            let mut best = 0;
            for k in 0..5 {
                if cache.vbar.get(v, k) > cache.vbar.get(v, best) {
                    best = k;
                }
            }
            best
        })
        .collect();
    // assignment hardness
    let mut max_mass = 0.0;
    for v in 0..n_items {
        let m = (0..5).map(|k| cache.vbar.get(v, k)).fold(0.0, f64::max);
        max_mass += m / n_items as f64;
    }
    println!("mean max assignment mass: {max_mass:.3}");

    // best permutation
    let perms = permutations(5);
    let mut best_perm = None;
    let mut best_score = 0;
    for p in &perms {
        let score = (0..n_items)
            .filter(|&v| p[learned[v]] == data.assignments[v])
            .count();
        if score > best_score {
            best_score = score;
            best_perm = Some(p.clone());
        }
    }
    let perm = best_perm.unwrap();
    println!("cluster agreement: {best_score}/{n_items} via {perm:?}");

    // relabel wc and threshold
    let mut relabeled = causer_core::diffnum::Matrix::zeros(5, 5);
    for i in 0..5 {
        for j in 0..5 {
            relabeled.set(perm[i], perm[j], model.graph.wc.get(i, j));
        }
    }
    println!("relabeled wc =");
    for i in 0..5 {
        let row: Vec<String> = (0..5).map(|j| format!("{:7.3}", relabeled.get(i, j))).collect();
        println!("  [{}]", row.join(", "));
    }
    let export = GraphExport::from_matrix(&relabeled, 0.3);
    let (n, adj) = threshold_abs(&relabeled, 0.3);
    println!("thresholded edges: {:?}", export.edges.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>());
    if !causer_core::causal_graph::is_acyclic(n, &adj) {
        println!("CYCLIC after threshold!");
    } else {
        let learned_dag = export.to_dag().unwrap();
        let report = mec_report(&learned_dag, &planted).unwrap();
        println!("MEC equivalent: {}  shd: {}", report.equivalent, report.shd);
    }

    // matured gradient reach on wc
    {
        use causer_core::trainer::total_loss_with_grads;
        let batch_ids: Vec<usize> = (0..state.batch_size.min(split.train.sequences.len())).collect();
        let bce_only = OptimizerState { constrained: false, lambda: 0.0, ..state.clone() };
        let (_, g_bce) = total_loss_with_grads(&model, &split.train, &batch_ids, &bce_only, state.epochs, Ablation::default()).unwrap();
        let g = g_bce.get("wc").unwrap();
        println!("matured bce wc-grad inf-norm {:.3e}", g.inf_norm());
        for i in 0..5 {
            let row: Vec<String> = (0..5).map(|j| format!("{:7.3}", g.get(i, j))).collect();
            println!("  g[{}] = [{}]", i, row.join(", "));
        }
    }

    // item mask stats
    let eps = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let mut above = 0usize;
    for a in 0..n_items {
        for b in 0..n_items {
            if cache.w_item.get(a, b) > eps {
                above += 1;
            }
        }
    }
    println!("item pairs above eps: {} / {}", above, n_items * n_items);

    // quick eval
    let t1 = std::time::Instant::now();
    let histories: Vec<Vec<Vec<usize>>> = (0..split.train.n_users())
        .map(|u| {
            let mut h = split.train.sequences[u].clone();
            h.push(split.valid[u].clone());
            h
        })
        .collect();
    let full = evaluate_heldout(&model, &cache, &histories, &split.test, 5, Ablation::default()).unwrap();
    println!("full   NDCG@5 {:.4} F1@5 {:.4} ({:.1}s)", full.ndcg, full.f1, t1.elapsed().as_secs_f64());
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..k).collect();
    permute(&mut items, 0, &mut out);
    out
}

fn permute(items: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
    if start == items.len() {
        out.push(items.clone());
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, out);
        items.swap(start, i);
    }
}
