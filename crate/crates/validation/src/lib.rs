//! Benchmark scenarios used by the acceptance suite, and helpers to read
//! recall and oracle consistency off query records.

use std::collections::BTreeMap;

use duoloc_bench::{BenchConfig, QueryRecord, Threshold};

/// Threshold of the fine-grained recall comparisons.
pub const FINE: Threshold = Threshold::new(0.05, 2.0);
/// Threshold of the coarse recall comparisons.
pub const COARSE: Threshold = Threshold::new(0.5, 5.0);

/// Street of 200 db images and 200 queries, 1 px noise, 20% outliers,
/// exact structure; only the seed varies.
fn street(seed: u64) -> BenchConfig {
    BenchConfig {
        seed,
        num_db: 200,
        num_points: 6000,
        num_queries: 200,
        depth_min: 1.5,
        depth_max: 10.0,
        pixel_sigma: 1.0,
        outlier_ratio: 0.2,
        retrieval_k: 10,
        ..BenchConfig::default()
    }
}

fn methods(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Both baselines over a thinning sweep of the database.
pub fn sparsity(seed: u64) -> BenchConfig {
    BenchConfig {
        scene_id: format!("sparsity_{seed}"),
        grid_keep_every_n: vec![1, 5, 10, 20],
        methods: methods(&["p3p", "e5p1", "oracle"]),
        ..street(seed)
    }
}

/// Ten times more 2D-2D than 2D-3D matches, 40% wrong 3D points, every
/// tenth db image kept; baselines and three scoring functions.
pub fn scoring(seed: u64) -> BenchConfig {
    BenchConfig {
        scene_id: format!("scoring_{seed}"),
        drop_3d_fraction: 0.85,
        lift_outlier_ratio: 0.4,
        keep_every_n: 10,
        methods: methods(&[
            "p3p",
            "e5p1",
            "adaptive:mult_msac:hybrid",
            "adaptive:sum_msac:hybrid",
            "adaptive:sum_inl:hybrid",
            "oracle",
        ]),
        ..street(seed)
    }
}

/// Wider street with far structure; exact and depth-biased geometry, each
/// with and without point filtering.
pub fn filtering(seed: u64) -> BenchConfig {
    BenchConfig {
        scene_id: format!("filtering_{seed}"),
        spacing: 1.0,
        depth_min: 4.0,
        depth_max: 30.0,
        max_view_depth: 60.0,
        query_offset: 2.0,
        keep_every_n: 10,
        grid_depth_bias: vec![0.0, 0.1],
        grid_filter: vec![false, true],
        methods: methods(&["p3p", "e5p1", "adaptive:sum_msac:hybrid", "select:0.8", "oracle"]),
        ..street(seed)
    }
}

/// Every twentieth db image kept; the hybrid MultMsac estimator.
pub fn continuous(seed: u64) -> BenchConfig {
    BenchConfig {
        scene_id: format!("continuous_{seed}"),
        keep_every_n: 20,
        methods: methods(&["adaptive:mult_msac:hybrid"]),
        continuous_method: "adaptive:mult_msac:hybrid".into(),
        ..street(seed)
    }
}

/// Small multi-cell sweep for reproducibility checks.
pub fn determinism(seed: u64) -> BenchConfig {
    BenchConfig {
        scene_id: format!("determinism_{seed}"),
        num_db: 60,
        num_points: 2000,
        num_queries: 30,
        retrieval_k: 8,
        grid_keep_every_n: vec![1, 5],
        grid_depth_bias: vec![0.0, 0.1],
        grid_filter: vec![false, true],
        ..street(seed)
    }
}

/// Fraction of records of `(cell_id, method)` within `t`, pooled over all
/// given records.
pub fn recall(records: &[QueryRecord], cell_id: &str, method: &str, t: &Threshold) -> f64 {
    let errors: Vec<_> =
        records.iter().filter(|r| r.cell_id == cell_id && r.method == method).map(|r| r.error()).collect();
    duoloc_bench::metrics::recall(&errors, t)
}

/// Combined error `max(100 t, deg)`, infinite for failures.
pub fn combined_error(r: &QueryRecord) -> f64 {
    if !r.success {
        return f64::INFINITY;
    }
    (100.0 * r.trans_err_m).max(r.rot_err_deg)
}

/// Queries whose oracle error exceeds the smaller baseline error, as
/// `(scene_id, cell_id, query_index)`; `checked` counts compared queries.
pub fn oracle_violations(records: &[QueryRecord]) -> (usize, Vec<(String, String, usize)>) {
    let mut by_query: BTreeMap<(&str, &str, usize), BTreeMap<&str, f64>> = BTreeMap::new();
    for r in records {
        by_query.entry((&r.scene_id, &r.cell_id, r.query_index)).or_default().insert(&r.method, combined_error(r));
    }
    let mut checked = 0;
    let mut bad = Vec::new();
    for ((scene, cell, q), errs) in by_query {
        let (Some(o), Some(p), Some(e)) = (errs.get("oracle"), errs.get("p3p"), errs.get("e5p1")) else {
            continue;
        };
        checked += 1;
        if *o > p.min(*e) {
            bad.push((scene.to_string(), cell.to_string(), q));
        }
    }
    (checked, bad)
}
