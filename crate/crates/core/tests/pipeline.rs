use hte_sieve::basis::{project, AffineMap, TensorBasis};
use hte_sieve::density::{c_hat, OracleDensities};
use hte_sieve::dgp::{known_marginal, simulate, true_ate, true_e_y1_given_y0, true_phi, DgpConfig};
use hte_sieve::hte::{ate_direct, ate_from_curve, e_y1_given_y0, GridSpec, HteCurve, Integrator};
use hte_sieve::mechanism::reexpress;
use hte_sieve::numerics::gauss_legendre;
use hte_sieve::series::{fit_series, prepare_stage_two, DensityMode, PreparedStage, SeriesModel, SeriesSettings};

fn prepared(seed: u64, mode: DensityMode, settings: SeriesSettings) -> (DgpConfig, PreparedStage) {
    let cfg = DgpConfig::default();
    let data = simulate(&cfg, seed).unwrap().observed;
    let prep = prepare_stage_two(&data, &cfg.mechanism, &settings, mode).unwrap();
    (cfg, prep)
}

#[test]
fn treated_conditional_density_integrates_to_one() {
    let cfg = DgpConfig::default();
    let data = simulate(&cfg, 3).unwrap().observed;
    let prep = prepare_stage_two(&data, &cfg.mechanism, &SeriesSettings::default(), DensityMode::Kde).unwrap();
    let mut treated_x: Vec<f64> = data.treated().map(|(x, _)| x).collect();
    treated_x.sort_by(f64::total_cmp);
    let median = treated_x[treated_x.len() / 2];

    let rule = gauss_legendre(400).unwrap();
    let d = prep.densities.as_ref();
    let mech = &prep.mechanism;
    let v = prep.basis.map_x.forward(median);
    let c = c_hat(v, mech, d).unwrap();
    let mass = rule.integrate_interval(-1.6, 1.6, |u| c * mech.outcome_term(u).exp() * d.joint_control(u, v));
    assert!((mass - 1.0).abs() < 0.1, "x = {median}: mass {mass}");
}

#[test]
fn true_curve_injection_reproduces_true_ate() {
    let cfg = DgpConfig::default();
    let map_y0 = AffineMap::from_interval(-5.0, 5.0).unwrap();
    let map_x = AffineMap::from_interval(-8.0, 8.0).unwrap();
    let basis = TensorBasis::new(3, map_y0, map_x);
    let densities = OracleDensities::new(&cfg, map_y0, map_x, 3).unwrap();
    let mechanism = reexpress(&cfg.mechanism, &map_y0, &map_x).unwrap();
    let model = SeriesModel {
        basis,
        map_y1: AffineMap::IDENTITY,
        gamma: project(&basis, 8, |y0, x| true_phi(&cfg, y0, x)).unwrap(),
        b_gamma: 1.0,
        lambda: 0.0,
        norm: 0.0,
        objective: 0.0,
        mechanism,
        bandwidths: None,
        rows_used: 0,
        dropped_rows: 0,
    };
    let marginal = known_marginal(&cfg);
    let ate = ate_from_curve(&model, &densities, &marginal, 64).unwrap();
    assert!((ate - true_ate(&cfg)).abs() < 1e-6, "{ate}");
    let direct = ate_direct(&model, &densities, &marginal, 64).unwrap();
    assert!((direct - 0.9).abs() < 0.01, "{direct}");
}

#[test]
fn quadrature_refinement_is_stable() {
    let (cfg, prep) = prepared(4, DensityMode::Kde, SeriesSettings::default());
    let marginal = known_marginal(&cfg);
    let model = fit_series(&prep, 25.0).unwrap();
    for y0 in [-0.4, -0.1, 0.2] {
        let a = e_y1_given_y0(&model, prep.densities.as_ref(), &marginal, y0, 64).unwrap();
        let b = e_y1_given_y0(&model, prep.densities.as_ref(), &marginal, y0, 128).unwrap();
        assert!((a - b).abs() < 1e-6, "y0 = {y0}: {a} vs {b}");
    }
}

#[test]
fn integrator_matches_free_functions() {
    let (cfg, prep) = prepared(6, DensityMode::Kde, SeriesSettings::default());
    let marginal = known_marginal(&cfg);
    let grid = GridSpec::central(&marginal, 0.9, 7).unwrap();
    let model = fit_series(&prep, 15.0).unwrap();
    let integ = Integrator::new(&prep.basis, &prep.mechanism, prep.densities.as_ref(), &marginal, &grid.points().unwrap(), 64)
        .unwrap();
    let free = hte_sieve::hte::hte_curve(&model, prep.densities.as_ref(), &marginal, &grid, 64).unwrap();
    assert_eq!(integ.curve(&model).unwrap(), free);
    let a = integ.ate_from_curve(&model).unwrap();
    let b = ate_from_curve(&model, prep.densities.as_ref(), &marginal, 64).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ate_functionals_agree() {
    // Calibrated on seeds 0..3: largest gap 0.015.
    for seed in 0..3 {
        let (cfg, prep) = prepared(seed, DensityMode::Kde, SeriesSettings::default());
        let marginal = known_marginal(&cfg);
        for b in [10.0, 25.0] {
            let model = fit_series(&prep, b).unwrap();
            let a = ate_from_curve(&model, prep.densities.as_ref(), &marginal, 64).unwrap();
            let d = ate_direct(&model, prep.densities.as_ref(), &marginal, 64).unwrap();
            assert!((a - d).abs() < 0.02, "seed {seed}, B {b}: {a} vs {d}");
        }
    }
}

#[test]
fn oracle_fit_tracks_true_regression_function() {
    // Frozen from one oracle-density run at seed 0, B = 25 (measured 0.288).
    let cfg = DgpConfig::default();
    let sim = simulate(&cfg, 0).unwrap();
    let prep = prepare_stage_two(&sim.observed, &cfg.mechanism, &SeriesSettings::default(), DensityMode::Oracle(cfg)).unwrap();
    let model = fit_series(&prep, 25.0).unwrap();
    let (lo, hi) = known_marginal(&cfg).central_interval(0.8).unwrap();
    let sq: Vec<f64> = sim
        .complete
        .iter()
        .filter(|r| r.y0 >= lo && r.y0 <= hi)
        .map(|r| (model.phi(r.y0, r.x) - true_phi(&cfg, r.y0, r.x)).powi(2))
        .collect();
    let rms = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
    assert!(rms < 0.30, "{rms}");
}

#[test]
fn outcome_scaling_is_undone_in_predictions() {
    let (_, prep) = prepared(2, DensityMode::Kde, SeriesSettings::default());
    assert_ne!(prep.map_y1, AffineMap::IDENTITY);
    let model = fit_series(&prep, 25.0).unwrap();
    for (y0, x) in [(-0.3, 0.1), (0.2, -1.0)] {
        let (u, v) = (prep.basis.map_y0.forward(y0), prep.basis.map_x.forward(x));
        let raw = prep.basis.eval_transformed(&model.gamma, u, v);
        assert_eq!(model.phi(y0, x), prep.map_y1.inverse(raw));
    }
}

#[test]
fn serialized_shapes() {
    let (cfg, prep) = prepared(1, DensityMode::Kde, SeriesSettings::default());
    let model = fit_series(&prep, 10.0).unwrap();
    let json = serde_json::to_value(&model).unwrap();
    for key in ["basis", "map_y1", "gamma", "b_gamma", "lambda", "mechanism", "bandwidths", "dropped_rows"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["gamma"].as_array().unwrap().len(), 16);
    assert_eq!(json["mechanism"]["frame"], "transformed");
    let back: SeriesModel = serde_json::from_value(json).unwrap();
    assert_eq!(back, model);

    let curve = HteCurve::from_values(vec![-0.5, 0.0], vec![Some(0.7), None]).with_truth(|y| true_e_y1_given_y0(&cfg, y));
    let mut buf = Vec::new();
    curve.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("y0,e_y1,hte,truth"));
    assert!(lines.next().unwrap().starts_with("-0.5,0.7,1.2"));
}
