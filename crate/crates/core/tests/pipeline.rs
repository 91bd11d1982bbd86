use approx::assert_relative_eq;
use capbound::capacity::{feature_radius_bound, vc_bound_mlp, vc_bound_resnet};
use capbound::margins::{margin_report, robust_objective, train, Objective, RobustConfig, Schedule, TrainConfig};
use capbound::model_spec::{network_spec_to_text, parse_spec_document, DataStats, SpecDocument};
use capbound::net_engine::{empirical_01, init_net, MaskPolicy};
use capbound::oracle::ball_points;
use capbound::{Data, Net, Report};

const SPEC: &str = r#"
input_dim = 2
output_max_norm = 2.0

[data]
radius = 1.0

[[layer]]
width = 6
activation = "tanh"
max_norm = 2.0
keep_prob = 0.9

[[layer]]
width = 4
activation = "relu"
max_norm = 1.5
"#;

fn parsed() -> (capbound::model_spec::NetworkSpec, DataStats) {
    match parse_spec_document(SPEC).unwrap() {
        SpecDocument::Network { spec, data } => (spec, data.unwrap()),
        other => panic!("unexpected {other:?}"),
    }
}

/// Quadrant labels: positive iff both coordinates share a sign.
fn xor_data(m: usize, seed: u64) -> Data {
    let x = ball_points(2, m, 1.0, seed);
    let y = x.rows().into_iter().map(|r| if r[0] * r[1] >= 0.0 { 1.0 } else { -1.0 }).collect();
    Data::new(x, y).unwrap()
}

#[test]
fn spec_text_round_trip_preserves_bound() {
    let (spec, data) = parsed();
    let again = match parse_spec_document(&network_spec_to_text(&spec, Some(data))).unwrap() {
        SpecDocument::Network { spec, .. } => spec,
        other => panic!("unexpected {other:?}"),
    };
    assert_eq!(spec, again);
    let report: Report = vc_bound_mlp(&spec, &data).unwrap();
    // 1 * 4 * (1 * 6 * 4) * (1 * 4 * 2.25)
    assert_relative_eq!(report.value, 864.0, max_relative = 1e-12);
    let r2: f64 = feature_radius_bound(&spec, &data, None).unwrap();
    assert_relative_eq!(r2 * 4.0, report.value, max_relative = 1e-12);
}

#[test]
fn resnet_document_bound() {
    let text = r#"
kind = "resnet"
activation = "relu"
output_max_norm = 1.0

[data]
radius = 1.0

[stem]
max_norm = 1.0
filters = 2
filter_size = 1

[[block]]
units = 1
max_norm = 1.0
filters = 2
filter_size = 1
keep_prob = 0.5

[[fc]]
width = 2
activation = "relu"
max_norm = 1.0
"#;
    let SpecDocument::ResNet { spec, data } = parse_spec_document(text).unwrap() else {
        panic!("expected resnet");
    };
    let r: Report = vc_bound_resnet(&spec, &data.unwrap()).unwrap();
    assert_relative_eq!(r.value, 16.0, max_relative = 1e-12);
}

#[test]
fn dropout_training_stays_feasible_and_learns() {
    let (spec, _) = parsed();
    let data = xor_data(64, 1);
    let mut cfg = TrainConfig::new(Schedule::new(150, 0.05, 8, 2));
    cfg.mask_policy = MaskPolicy::Dropout;
    let net: Net = init_net(&spec, 3).unwrap();
    let before = empirical_01(&net, &data).unwrap();
    let (net, history) = train(net, &data, &cfg).unwrap();
    assert!(net.is_feasible());
    assert_eq!(history.records.len(), 150);
    let after = empirical_01(&net, &data).unwrap();
    assert!(after < before && after <= 0.2, "0-1 risk {before} -> {after}");
}

#[test]
fn robust_training_lowers_the_robust_objective() {
    let (spec, _) = parsed();
    let data = xor_data(48, 4);
    let c = 0.05;
    let net: Net = init_net(&spec, 5).unwrap();
    let rc = RobustConfig::for_net(&net, c);
    let start = robust_objective(&net, &data, &rc).unwrap();
    let mut cfg = TrainConfig::new(Schedule::new(80, 0.05, 8, 6));
    cfg.objective = Objective::Robust { noise_radius: c };
    let (net, history) = train(net, &data, &cfg).unwrap();
    let end = robust_objective(&net, &data, &rc).unwrap();
    assert!(end < start, "robust objective {start} -> {end}");
    assert!(history.records.iter().all(|r| r.penalty.is_some()));
}

#[test]
fn margin_report_on_trained_net() {
    let (spec, data_stats) = parsed();
    let data = xor_data(32, 7);
    let (net, _) = train(init_net(&spec, 8).unwrap(), &data, &TrainConfig::new(Schedule::new(100, 0.05, 8, 9))).unwrap();
    let mut cfg = RobustConfig::for_net(&net, 0.0);
    cfg.ball_samples = 32;
    let report = margin_report(&net, &data, data_stats.radius, &cfg).unwrap();
    assert_eq!(report.samples.len(), 32);
    let tol = report.bisection_tol;
    for s in &report.samples {
        assert!(s.input_margin_certificate <= s.input_margin_upper + tol, "{s:?}");
        assert!(s.output_margin >= 0.0);
    }
    assert!(report.input_margin_certificate.mean <= report.input_margin_upper.mean + tol);
}

#[test]
fn f32_nets_share_the_f64_pipeline() {
    let (spec, _) = parsed();
    let a: capbound::net_engine::DenseNet<f32> = init_net(&spec, 10).unwrap();
    let b: Net = init_net(&spec, 10).unwrap();
    let x32 = ndarray::arr1(&[0.3f32, -0.4]);
    let x64 = ndarray::arr1(&[0.3f64, -0.4]);
    assert_relative_eq!(a.score(x32.view()).unwrap() as f64, b.score(x64.view()).unwrap(), epsilon = 1e-5);
}
