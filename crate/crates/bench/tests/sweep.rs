use std::collections::BTreeMap;

use duoloc_bench::experiment::{run_continuous_detailed, RunOutput};
use duoloc_bench::io::{write_report, write_results};
use duoloc_bench::{run_continuous, run_sweep, BenchConfig, Mode, DEFAULT_THRESHOLDS};
use duoloc_core::sim::{generate_scene, sparsify, SparsityConfig};

fn small() -> BenchConfig {
    BenchConfig {
        seed: 5,
        num_db: 40,
        num_points: 1500,
        num_queries: 16,
        depth_min: 1.5,
        depth_max: 10.0,
        retrieval_k: 6,
        ..BenchConfig::default()
    }
}

fn csv_bytes(out: &RunOutput) -> (Vec<u8>, Vec<u8>) {
    let mut results = Vec::new();
    let mut report = Vec::new();
    write_results(&out.records, &mut results).unwrap();
    write_report(&out.report, &mut report).unwrap();
    (results, report)
}

#[test]
fn oracle_dominates_baselines_in_every_cell() {
    let cfg = BenchConfig { grid_keep_every_n: vec![1, 5], pixel_sigma: 1.0, outlier_ratio: 0.3, ..small() };
    let out = run_sweep(&cfg).unwrap();
    for row in out.report.rows.iter().filter(|r| r.method == "oracle") {
        for base in ["p3p", "e5p1"] {
            let other = out.report.row(&row.cell_id, base).unwrap();
            for (o, b) in row.recalls.iter().zip(&other.recalls) {
                assert!(o >= b, "{}: oracle {o} < {base} {b}", row.cell_id);
            }
        }
    }
}

#[test]
fn noise_free_dense_scene_localizes_everything() {
    let cfg = BenchConfig {
        pixel_sigma: 0.0,
        outlier_ratio: 0.0,
        methods: ["p3p", "e5p1", "adaptive:mult_msac:hybrid", "adaptive:sum_inl:split", "select:0.8", "oracle"]
            .map(String::from)
            .to_vec(),
        ..small()
    };
    let out = run_sweep(&cfg).unwrap();
    assert_eq!(out.report.rows.len(), 6);
    let loosest = DEFAULT_THRESHOLDS.len() - 1;
    for row in &out.report.rows {
        assert_eq!(row.queries, cfg.num_queries);
        assert_eq!(row.recalls[loosest], 1.0, "{}", row.method);
    }
}

#[test]
fn reports_are_monotone_and_complete() {
    let cfg = BenchConfig { grid_point_noise: vec![0.0, 0.05], ..small() };
    let out = run_sweep(&cfg).unwrap();
    for row in &out.report.rows {
        assert!(row.recalls.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
        assert!(row.recalls.iter().all(|r| (0.0..=1.0).contains(r)));
    }
    let (_, report) = csv_bytes(&out);
    let text = String::from_utf8(report).unwrap();
    for line in text.lines().skip(1) {
        for key in ["seed=5", "t3d=", "t2d=", "max_iterations=", "confidence=", "retrieval_k="] {
            assert!(line.contains(key), "missing {key} in {line}");
        }
    }
}

#[test]
fn methods_share_identical_matches() {
    let cfg = BenchConfig { grid_filter: vec![false, true], ..small() };
    let out = run_sweep(&cfg).unwrap();
    let mut hashes: BTreeMap<(String, usize), Vec<&str>> = BTreeMap::new();
    for r in &out.records {
        hashes.entry((r.cell_id.clone(), r.query_index)).or_default().push(&r.match_hash);
    }
    for (key, hs) in hashes {
        assert_eq!(hs.len(), cfg.methods.len());
        assert!(hs.iter().all(|h| *h == hs[0] && h.len() == 64), "{key:?}");
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = BenchConfig { grid_keep_every_n: vec![1, 3], ..small() };
    let a = csv_bytes(&run_sweep(&cfg).unwrap());
    let b = csv_bytes(&run_sweep(&cfg).unwrap());
    assert_eq!(a, b);
    let c = csv_bytes(&run_sweep(&BenchConfig { seed: 6, ..cfg }).unwrap());
    assert_ne!(a.0, c.0);
}

#[test]
fn continuous_single_query_equals_static() {
    let cfg = BenchConfig { num_queries: 1, ..small() };
    let s = run_continuous(&cfg, Mode::Static).unwrap();
    let c = run_continuous(&cfg, Mode::Continuous).unwrap();
    assert_eq!(s.records.len(), 1);
    let strip = |o: &RunOutput| o.records.iter().map(|r| (r.success, r.trans_err_m, r.rot_err_deg)).collect::<Vec<_>>();
    assert_eq!(strip(&s), strip(&c));
}

#[test]
fn continuous_database_grows_by_successes() {
    let cfg = BenchConfig { keep_every_n: 4, ..small() };
    let run = run_continuous_detailed(&cfg, Mode::Continuous).unwrap();
    let successes = run.output.records.iter().filter(|r| r.success).count();
    assert!(successes > 0);
    assert_eq!(run.extended.len(), successes);

    let base = sparsify(&generate_scene(&cfg.scene_spec().unwrap()).unwrap(), &SparsityConfig { keep_every_n: 4 });
    assert_eq!(run.order, base.processing_order());
    for e in &run.extended {
        assert!(base.db_image(e.id).is_none(), "extended id collides with the database");
        assert_eq!(e.id.0 as usize, base.queries[e.query_index].capture_index);
    }
    let stat = run_continuous_detailed(&cfg, Mode::Static).unwrap();
    assert!(stat.extended.is_empty());
}
