//! Monte-Carlo checks of detector and optimizer behaviour on simulated
//! scenes. One trial is the first timestamp of one seeded scenario.

use redloc_core::harness::{frame_fix, localize_ml};
use redloc_core::{
    detect, dispersion_after_removal, gd_configuration_dispersion, gd_optimize, generate_ranges,
    generate_truth, per_node_error, per_node_spread, AnomalyConfig, AnomalyMode, DetectorParams,
    FusionParams, GdParams, Point2, RangeTable, SimScenario,
};

const TRIALS: u64 = 100;
const ANOMALY: usize = 5;

fn scenario(seed: u64, sigma: f64, bias: Option<f64>) -> SimScenario {
    SimScenario {
        duration: 1,
        noise_sigma: sigma,
        nlos: None,
        anomaly: bias.map(|bias| AnomalyConfig {
            node: ANOMALY,
            bias,
            mode: AnomalyMode::ConstantBias,
        }),
        seed,
        ..SimScenario::default()
    }
}

fn first_table(sc: &SimScenario) -> (Vec<Point2>, RangeTable) {
    let truth = generate_truth(sc).unwrap();
    let table = generate_ranges(&truth, sc).unwrap().remove(0);
    (truth.frames[0].clone(), table)
}

fn fraction(hits: usize) -> f64 {
    hits as f64 / TRIALS as f64
}

#[test]
fn biased_node_has_maximal_error() {
    let hits = (0..TRIALS)
        .filter(|&seed| {
            let sc = scenario(seed, 0.05, Some(1.5));
            let (_, table) = first_table(&sc);
            let (aligned, fused) = localize_ml(&table, sc.default_frame(), &FusionParams::default()).unwrap();
            let e: Vec<f64> = per_node_error(&aligned, &fused).into_iter().map(Option::unwrap).collect();
            (0..e.len()).all(|i| i == ANOMALY || e[i] < e[ANOMALY])
        })
        .count();
    assert!(fraction(hits) >= 0.95, "strictly maximal in {hits}/{TRIALS}");
}

#[test]
fn removing_biased_node_leaves_least_spread() {
    let params = DetectorParams::default();
    let hits = (0..TRIALS)
        .filter(|&seed| {
            let sc = scenario(seed, 0.05, Some(1.5));
            let (_, table) = first_table(&sc);
            let (aligned, _) = localize_ml(&table, sc.default_frame(), &FusionParams::default()).unwrap();
            assert_eq!(aligned.layouts.iter().filter(|l| !l.involves(ANOMALY)).count(), 21);
            let sd: Vec<f64> = (0..8)
                .map(|k| dispersion_after_removal(&aligned, k, &params).unwrap())
                .collect();
            (0..8).all(|k| k == ANOMALY || sd[ANOMALY] < sd[k])
        })
        .count();
    assert!(fraction(hits) >= 0.95, "lowest spread in {hits}/{TRIALS}");
}

fn confirmed(seed: u64, bias: Option<f64>) -> Vec<usize> {
    let sc = scenario(seed, 0.05, bias);
    let (_, table) = first_table(&sc);
    let fusion = FusionParams::default();
    let (aligned, fused) = localize_ml(&table, sc.default_frame(), &fusion).unwrap();
    detect(&aligned, &fused, &fusion, &DetectorParams::default())
        .unwrap()
        .confirmed
}

#[test]
fn clean_scenes_confirm_nothing() {
    let hits = (0..TRIALS).filter(|&s| confirmed(s, None).is_empty()).count();
    assert!(fraction(hits) >= 0.95, "empty in {hits}/{TRIALS}");
}

#[test]
fn biased_node_is_confirmed_alone() {
    let hits = (0..TRIALS)
        .filter(|&s| confirmed(s, Some(1.5)) == vec![ANOMALY])
        .count();
    assert!(fraction(hits) >= 0.90, "exactly the biased node in {hits}/{TRIALS}");
}

fn rmse(est: &[Point2], gt: &[Point2], sc: &SimScenario) -> f64 {
    let frame = sc.default_frame();
    let est: Vec<Option<Point2>> = est.iter().copied().map(Some).collect();
    let fixed = frame_fix(&est, gt, &frame).unwrap();
    let truth = frame.canonicalize_points(gt).unwrap();
    let sum: f64 = fixed.iter().zip(&truth).map(|(p, q)| p.unwrap().distance_squared(q)).sum();
    (sum / gt.len() as f64).sqrt()
}

#[test]
fn gradient_descent_refines_noisy_fusion() {
    let (mut ml, mut gd) = (0.0, 0.0);
    for seed in 0..TRIALS {
        let sc = scenario(seed, 0.1, None);
        let (gt, table) = first_table(&sc);
        let frame = sc.default_frame();
        let (_, fused) = localize_ml(&table, frame, &FusionParams::default()).unwrap();
        let init = fused.positions_or_origin();
        let refined = gd_optimize(&init, &table, &frame, &GdParams::default()).unwrap();
        ml += rmse(&init, &gt, &sc);
        gd += rmse(&refined.positions, &gt, &sc);
    }
    assert!(gd <= ml, "mean GD {} vs ML {}", gd / TRIALS as f64, ml / TRIALS as f64);
}

fn max_over_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let median = (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0;
    s[s.len() - 1] / median
}

#[test]
fn gradient_descent_masks_the_biased_node() {
    // Mean ratio over fewer seeds: every trial runs one optimization per layout.
    let trials = 30;
    let (mut raw_ratio, mut gd_ratio) = (0.0, 0.0);
    for seed in 0..trials {
        let sc = scenario(seed, 0.05, Some(1.5));
        let (_, table) = first_table(&sc);
        let (aligned, _) = localize_ml(&table, sc.default_frame(), &FusionParams::default()).unwrap();
        raw_ratio += max_over_median(&per_node_spread(&aligned));
        gd_ratio += max_over_median(&gd_configuration_dispersion(&aligned, &table, &GdParams::default()).unwrap());
    }
    assert!(gd_ratio < raw_ratio, "GD {} vs raw {}", gd_ratio / trials as f64, raw_ratio / trials as f64);
}
