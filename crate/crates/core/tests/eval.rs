use apsel_core::eval::{
    auc, average_precision, cluster_recall_ceiling, pr_curve, precision_recall, proximity_baseline, roc_curve,
    trapezoid_area,
};
use apsel_core::graph::{label_edges, GraphParams, ProximityOrder};
use apsel_core::scenario::{build_rsrp_table, Scenario, ScenarioConfig};
use apsel_core::trainer::{make_dataset, DatasetSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_auc(s: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(p, _) in s.iter().filter(|x| x.1) {
        for &(n, _) in s.iter().filter(|x| !x.1) {
            pairs += 1.0;
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Mean, over positives, of the precision among items scoring at least as
/// high as that positive.
fn brute_ap(s: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = s.iter().filter(|x| x.1).map(|x| x.0).collect();
    pos.iter()
        .map(|&t| {
            let above = s.iter().filter(|x| x.0 >= t).count() as f64;
            let hits = s.iter().filter(|x| x.0 >= t && x.1).count() as f64;
            hits / above
        })
        .sum::<f64>()
        / pos.len() as f64
}

/// Scores on a coarse grid so ties are common.
fn score_set() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec(((0u32..20).prop_map(|v| v as f64 / 20.0), any::<bool>()), 2..200)
        .prop_filter("needs both classes", |v| {
            v.iter().any(|x| x.1) && v.iter().any(|x| !x.1)
        })
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(s in score_set()) {
        prop_assert!((auc(&s).unwrap() - brute_auc(&s)).abs() < 1e-9);
    }

    #[test]
    fn average_precision_matches_brute_force(s in score_set()) {
        prop_assert!((average_precision(&s).unwrap() - brute_ap(&s)).abs() < 1e-9);
    }

    #[test]
    fn auc_equals_trapezoidal_roc_area(s in score_set()) {
        let roc = roc_curve(&s).unwrap();
        prop_assert!((auc(&s).unwrap() - trapezoid_area(&roc)).abs() < 1e-9);
    }

    #[test]
    fn metrics_ignore_monotone_transforms(s in score_set()) {
        let t: Vec<(f64, bool)> = s.iter().map(|&(c, y)| ((3.0 * c).exp() - 7.0, y)).collect();
        prop_assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
        prop_assert_eq!(average_precision(&s).unwrap(), average_precision(&t).unwrap());
    }

    #[test]
    fn lowering_the_threshold_trades_precision_for_recall(s in score_set(), outside in 0usize..20) {
        let mut last_recall = -1.0;
        for step in (0..=21).rev() {
            let t = step as f64 / 20.0 - 0.025;
            let pr = precision_recall(&s, outside, t);
            let r = pr.recall.unwrap();
            prop_assert!(r >= last_recall);
            last_recall = r;
        }
        // Precision along the sweep of distinct scores is not monotone in
        // general; the confusion counts are.
        let hi = precision_recall(&s, outside, 0.6).confusion;
        let lo = precision_recall(&s, outside, 0.3).confusion;
        prop_assert!(lo.tp >= hi.tp && lo.fp >= hi.fp);
    }

    #[test]
    fn pr_curve_recall_is_non_decreasing(s in score_set()) {
        let c = pr_curve(&s).unwrap();
        prop_assert!(c.windows(2).all(|w| w[1].recall >= w[0].recall));
        prop_assert_eq!(c.last().unwrap().recall, 1.0);
    }
}

#[test]
fn oracles_agree_on_continuous_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let mut s: Vec<(f64, bool)> = (0..n).map(|_| (rng.random::<f64>(), rng.random_bool(0.3))).collect();
        s[0].1 = true;
        s[1].1 = false;
        assert!((auc(&s).unwrap() - brute_auc(&s)).abs() < 1e-9);
        assert!((average_precision(&s).unwrap() - brute_ap(&s)).abs() < 1e-9);
    }
}

#[test]
fn independent_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s: Vec<(f64, bool)> = (0..20_000)
        .map(|_| (rng.random::<f64>(), rng.random_bool(0.5)))
        .collect();
    assert!((auc(&s).unwrap() - 0.5).abs() < 0.02);
}

fn dense_positions(seed: u64) -> (ScenarioConfig, Scenario) {
    let config = ScenarioConfig::dense(seed);
    let s = Scenario::generate(&config).unwrap();
    (config, s)
}

#[test]
fn removing_shadowing_raises_baseline_precision() {
    let (config, shadowed) = dense_positions(14);
    let flat = Scenario::without_shadowing(config, shadowed.ap_positions().to_vec()).unwrap();
    let prox = ProximityOrder::new(shadowed.ap_positions());
    let ues = shadowed.place_ues(&mut ChaCha8Rng::seed_from_u64(3), 2000).unwrap();
    let a = proximity_baseline(&build_rsrp_table(&shadowed, &ues).unwrap(), &prox, 10.0, 3).unwrap();
    let b = proximity_baseline(&build_rsrp_table(&flat, &ues).unwrap(), &prox, 10.0, 3).unwrap();
    // The baseline ranks APs by distance to the master, not to the UE, so
    // even without shadowing its picks are not the strongest links.
    assert!(
        b.precision > a.precision,
        "flat {} shadowed {}",
        b.precision,
        a.precision
    );
    assert!(b.positive_fraction > a.positive_fraction);
}

#[test]
fn full_cluster_has_no_ceiling_and_recall_respects_it() {
    let (_, s) = dense_positions(14);
    let prox = ProximityOrder::new(s.ap_positions());
    let ues = s.place_ues(&mut ChaCha8Rng::seed_from_u64(4), 50).unwrap();
    let rsrp = build_rsrp_table(&s, &ues).unwrap();
    let full = GraphParams {
        c_ue: 99,
        ..GraphParams::default()
    };
    let g = apsel_core::graph::build_graph(&rsrp, &prox, &full).unwrap();
    let labels = label_edges(&rsrp, &g, 10.0).unwrap();
    assert_eq!(cluster_recall_ceiling([&labels]).unwrap(), 0.0);

    let data = make_dataset(&s, &DatasetSpec::validation(4, 3)).unwrap();
    let ceiling = cluster_recall_ceiling(data.iter().map(|d| &d.labels)).unwrap();
    for d in &data {
        // Even a classifier that selects every candidate link cannot beat
        // the ceiling.
        let scores: Vec<(f64, bool)> = d.labels.edges.iter().map(|e| (1.0, e.positive)).collect();
        let r = precision_recall(&scores, d.labels.total_out_of_cluster_positives(), 0.5)
            .recall
            .unwrap();
        let own = cluster_recall_ceiling([&d.labels]).unwrap();
        assert!(r <= 1.0 - own + 1e-12);
    }
    assert!(ceiling > 0.0 && ceiling < 0.5);
}
