use sitegp_core::active::{run_campaign, score_all, select_next_touchdown, CampaignOptions, CampaignState, FrozenScorer, Strategy};
use sitegp_core::{DieCoord, GpModel, GpOptions, Measurement, MeasurementSet, SiteId, TouchdownLayout, WaferGeometry};

fn field(c: DieCoord) -> f64 {
    (f64::from(c.x) / 3.0).sin() + 0.5 * (f64::from(c.y) / 4.0).cos()
}

fn single_site_wafer(w: i32, h: i32) -> MeasurementSet {
    let g = WaferGeometry::rect(0, 0, w, h).unwrap();
    let recs = g.dies().into_iter().map(|c| Measurement { coord: c, site: SiteId(0), value: field(c), lot: 1, wafer: 1 }).collect();
    MeasurementSet::new(recs, TouchdownLayout::single_site(), g).unwrap()
}

fn opts() -> CampaignOptions {
    CampaignOptions { gp: GpOptions { grid: [5, 5, 3], ..GpOptions::default() }, ..CampaignOptions::default() }
}

#[test]
fn frozen_scores_match_brute_force_refactorization() {
    let truth = single_site_wafer(8, 8);
    let measured = truth.filter(|r| (r.coord.x + 3 * r.coord.y) % 5 == 0);
    let state = CampaignState::new(measured.clone(), &truth.coords(), opts()).unwrap();
    let params = state.prediction().group_params()[0].expect("site 0 has its own GP");
    let before = GpModel::fit_centered(&measured.coords(), &measured.values(), params, 1e-8).unwrap();

    let scores = score_all(&state).unwrap();
    assert_eq!(scores.len(), state.remaining().len());
    for s in &scores {
        let mut xs = measured.coords();
        let mut ys = measured.values();
        xs.push(s.anchor);
        ys.push(0.0);
        let after = GpModel::fit_centered(&xs, &ys, params, 1e-8).unwrap();
        let others: Vec<DieCoord> = state.test_coords().iter().copied().filter(|&c| c != s.anchor).collect();
        let vb = before.predict(&others).variances;
        let va = after.predict(&others).variances;
        let brute = vb.iter().zip(&va).map(|(b, a)| (b - a) * (b - a)).sum::<f64>().sqrt();
        assert!((brute - s.delta_var).abs() < 1e-6 * (1.0 + brute), "{:?}: {brute} vs {}", s.anchor, s.delta_var);
    }
}

#[test]
fn dense_region_scores_below_empty_region() {
    let truth = single_site_wafer(16, 8);
    // left half measured except one hole; right half untouched but for a corner
    let hole = DieCoord::new(3, 4);
    let measured = truth.filter(|r| (r.coord.x < 8 && r.coord != hole) || r.coord == DieCoord::new(15, 0));
    let state = CampaignState::new(measured, &truth.coords(), opts()).unwrap();
    let scorer = FrozenScorer::new(&state).unwrap();
    let dense = scorer.score(hole).unwrap().delta_var;
    let sparse = scorer.score(DieCoord::new(12, 4)).unwrap().delta_var;
    assert!(sparse > dense, "{sparse} <= {dense}");
    assert!(select_next_touchdown(&state).unwrap().x >= 8);
}

#[test]
fn isolated_candidate_scores_zero() {
    // the measured dies between them screen the two ends of the strip off
    let truth = single_site_wafer(40, 1);
    let a = DieCoord::new(0, 0);
    let b = DieCoord::new(39, 0);
    let measured = truth.filter(|r| r.coord != a && r.coord != b);
    let state = CampaignState::new(measured, &truth.coords(), opts()).unwrap();
    let scorer = FrozenScorer::new(&state).unwrap();
    let theta1 = state.prediction().group_params()[0].unwrap().theta1;
    assert!(scorer.score(a).unwrap().delta_var < 1e-6 * theta1);
    assert!(scorer.score(b).unwrap().delta_var < 1e-6 * theta1);
}

#[test]
fn campaign_is_reproducible_and_budgeted() {
    let truth = single_site_wafer(6, 6);
    let o = opts();
    let a = run_campaign(&truth, Strategy::Active, 5, 4, &o).unwrap();
    let b = run_campaign(&truth, Strategy::Active, 5, 4, &o).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 5);
    let r = run_campaign(&truth, Strategy::Random, 5, 4, &o).unwrap();
    assert_eq!(r.rows[0].anchor, a.rows[0].anchor);
    let all = run_campaign(&truth, Strategy::Random, 100, 4, &o).unwrap();
    assert!(all.truncated);
    assert_eq!(all.rows.len(), 36);
}
