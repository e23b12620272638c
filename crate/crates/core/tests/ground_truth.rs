use duoloc_core::estimator::{pose_difference, ransac_e5p1, ransac_p3p, EstimatorConfig};
use duoloc_core::sim::{corrupt, generate_matches, generate_scene, retrieve, CorruptionModel, SceneSpec};

fn check(spec: SceneSpec) {
    let base = generate_scene(&spec).unwrap();
    let scene = corrupt(&base, &CorruptionModel::default(), 1);
    assert_eq!(scene.points_obs.iter().flatten().count(), scene.available_points());
    let db = scene.database();
    let cfg = EstimatorConfig::default();
    for q in 0..scene.queries.len() {
        let retrieved = retrieve(&scene, q, 8);
        let m = generate_matches(&scene, q, &retrieved, &CorruptionModel::default(), q as u64);
        let gt = &scene.queries[q].pose;
        let k = &scene.queries[q].intrinsics;
        let p = ransac_p3p(&m.m3d, k, &cfg);
        let e = ransac_e5p1(&m.m2d, &db, k, &cfg);
        assert!(p.success && e.success, "query {q}");
        let (tp, rp) = pose_difference(&p.pose, gt);
        let (te, re) = pose_difference(&e.pose, gt);
        assert!(tp < 1e-5 && rp.to_radians() < 1e-5, "query {q}: p3p {tp} {rp}");
        assert!(te < 1e-5 && re.to_radians() < 1e-5, "query {q}: e5p1 {te} {re}");
    }
}

#[test]
fn exact_street_scene_is_localized_exactly() {
    check(SceneSpec::street(30, 1500, 10, 3));
}

#[test]
fn exact_room_scene_is_localized_exactly() {
    check(SceneSpec::room(20, 1200, 8, 4));
}
