use dnode_core::cli::forecast_years;
use dnode_core::data::{synthetic_panel, TimeScale};
use dnode_core::model::{ModelConfig, PovertyModel};
use dnode_core::odeint::SolverConfig;
use dnode_core::train::{fit, TrainConfig};

#[test]
fn five_district_panel_fits_in_300_epochs() {
    let panel = synthetic_panel(5, 0);
    let ts = TimeScale::default();
    let config = ModelConfig {
        n_districts: 5,
        ..ModelConfig::default()
    };
    let model = PovertyModel::new(config, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        ..TrainConfig::default()
    };
    let solver = SolverConfig::default();
    let (model, log) = fit(model, &panel, &ts, &cfg, &solver, |_| {}).unwrap();
    let initial = log.losses()[0];
    let last = model.batch_loss(&panel, &ts, &solver).unwrap().loss;
    assert!(last < 1e-2, "final loss {last}");
    assert!(last < initial);
}

#[test]
fn forecast_at_observed_years_reproduces_fit() {
    let panel = synthetic_panel(4, 2);
    let ts = TimeScale::default();
    let solver = SolverConfig::default();
    let model = PovertyModel::new(ModelConfig::small(4), 5).unwrap();
    let report = model.batch_loss(&panel, &ts, &solver).unwrap();
    let forecasts = forecast_years(&model, &panel, &ts, &[2007, 2020, 2026], &solver).unwrap();
    let (nt, ni) = (panel.n_times(), panel.n_indicators());
    for (f, t_index) in forecasts.iter().take(2).zip([0, nt - 1]) {
        for d in 0..4 {
            let fitted = &report.predictions[(d * nt + t_index) * ni..(d * nt + t_index + 1) * ni];
            assert_eq!(f.values[d].as_slice(), fitted, "year {}", f.year);
        }
    }
    // requesting 2026 alongside does not perturb the others
    let alone = forecast_years(&model, &panel, &ts, &[2020], &solver).unwrap();
    assert_eq!(alone[0].values, forecasts[1].values);
}
