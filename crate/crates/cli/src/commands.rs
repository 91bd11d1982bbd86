use std::fs;
use std::process::ExitCode;

use anyhow::Context;
use capbound::capacity::{
    feature_radius_bound, vc_bound_dropconnect, vc_bound_dropout, vc_bound_fixed_width, vc_bound_mlp,
    vc_bound_resnet, vc_bound_robust,
};
use capbound::margins::{margin_report, train_checkpointed, MarginReport, Objective, RobustConfig, Schedule, TrainConfig};
use capbound::model_spec::{parse_spec_document, SpecDocument};
use capbound::model_spec::{validate, DataStats, NetworkSpec};
use capbound::net_engine::{init_net, MaskPolicy};
use capbound::oracle::{run_suite, OracleResult, SuiteConfig, SUITE_ORACLES};
use capbound::{Net, Report};
use serde::Serialize;

use crate::io::{load_spec, read_dataset, read_model, sha256_hex, write_model};
use crate::report::{emit, fmt_f64, render, Meta, Tabular};
use crate::{resolve_seed, BoundArgs, ConfigError, MarginsArgs, MaskArg, ObjectiveArg, TrainArgs, VerifyArgs};

pub const DEMO_SPEC: &str = include_str!("../../../data/demo_spec.toml");

fn config(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError::new(e.to_string()).into()
}

#[derive(Serialize)]
struct BoundBody {
    radius: f64,
    noise_radius: Option<f64>,
    /// Bound on `max ‖φ_P(x)‖²` (fully connected specs only).
    feature_radius_bound: Option<f64>,
    bounds: Vec<Report>,
}

impl Tabular for BoundBody {
    fn title(&self) -> &'static str {
        "Capacity bounds"
    }

    fn headers(&self) -> Vec<&'static str> {
        vec!["theorem", "value", "value_floor", "log10_value", "saturated", "factors"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.bounds
            .iter()
            .map(|b| {
                let factors: Vec<String> = b.factors.iter().map(|f| format!("{}={}", f.label, fmt_f64(f.value))).collect();
                vec![
                    b.theorem.label().to_string(),
                    fmt_f64(b.value),
                    b.value_floor.to_string(),
                    fmt_f64(b.log10_value),
                    b.saturated.to_string(),
                    factors.join(" "),
                ]
            })
            .collect()
    }

    fn summary(&self) -> Vec<String> {
        let mut out = vec![format!("R = {}", self.radius)];
        if let Some(c) = self.noise_radius {
            out.push(format!("c = {c}"));
        }
        if let Some(r) = self.feature_radius_bound {
            out.push(format!("feature radius bound = {r}"));
        }
        out
    }
}

/// Same width and activation in every hidden layer.
fn uniform_width(spec: &NetworkSpec) -> Option<usize> {
    let first = spec.hidden.first()?;
    spec.hidden
        .iter()
        .all(|l| l.width == first.width && l.activation == first.activation)
        .then_some(first.width)
}

pub fn bound(a: &BoundArgs) -> anyhow::Result<ExitCode> {
    let loaded = load_spec(&a.spec)?;
    let declared = loaded.doc.data();
    let radius = a
        .radius
        .or(declared.map(|d| d.radius))
        .ok_or_else(|| config("no data radius: add a [data] section or pass --radius"))?;
    let noise = a.robust.or(declared.map(|d| d.noise_radius).filter(|&c| c > 0.0));
    let mut stats = DataStats::new(radius);
    if let Some(c) = noise {
        stats = stats.with_noise(c);
    }
    stats.validate().map_err(config)?;
    let seed = resolve_seed(0)?;

    let mut bounds = Vec::new();
    let mut feature = None;
    match &loaded.doc {
        SpecDocument::Network { spec, .. } => {
            validate(spec).map_err(config)?;
            bounds.push(vc_bound_mlp(spec, &stats)?);
            if let Some(h) = uniform_width(spec) {
                let mut norms: Vec<f64> = spec.hidden.iter().map(|l| l.max_norm).collect();
                norms.push(spec.output_max_norm);
                let lip = spec.hidden[0].activation.lipschitz();
                bounds.push(vc_bound_fixed_width(spec.depth(), h, &norms, lip, radius)?);
            }
            if spec.uses_dropout() {
                bounds.push(vc_bound_dropout(spec, &stats)?);
            }
            if spec.uses_dropconnect() {
                bounds.push(vc_bound_dropconnect(spec, &stats)?);
            }
            if noise.is_some() {
                bounds.push(vc_bound_robust(spec, &stats)?);
            }
            feature = Some(feature_radius_bound(spec, &DataStats::new(radius), None)?);
        }
        SpecDocument::ResNet { spec, .. } => {
            spec.validate().map_err(config)?;
            bounds.push(vc_bound_resnet(spec, &stats)?);
            if noise.is_some() {
                eprintln!("warning: the robust bound applies to fully connected specs only; ignoring c");
            }
        }
    }
    let body = BoundBody {
        radius,
        noise_radius: noise,
        feature_radius_bound: feature,
        bounds,
    };
    let text = render(&Meta::new("bound", loaded.hash, seed), &body, a.out.format)?;
    emit(&text, a.out.output.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn history_csv(records: &[capbound::margins::EpochRecord], robust: bool) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut headers = vec!["epoch", "hinge", "zero_one", "mean_gamma_op"];
    if robust {
        headers.push("penalty");
    }
    w.write_record(&headers)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), fmt_f64(r.hinge), fmt_f64(r.zero_one), fmt_f64(r.mean_gamma_op)];
        if robust {
            row.push(r.penalty.map_or_else(String::new, fmt_f64));
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn train(a: &TrainArgs) -> anyhow::Result<ExitCode> {
    let loaded = load_spec(&a.spec)?;
    let SpecDocument::Network { spec, data: declared } = &loaded.doc else {
        return Err(config("training supports fully connected specs only"));
    };
    validate(spec).map_err(config)?;
    let data = read_dataset(&a.data)?;
    if data.dim() != spec.input_dim {
        return Err(config(format!(
            "dataset has {} features but the spec expects input_dim = {}",
            data.dim(),
            spec.input_dim
        )));
    }
    if a.batch == 0 || !(a.lr > 0.0) || !a.lr.is_finite() {
        return Err(config("--batch must be ≥ 1 and --lr a positive number"));
    }
    let measured = data.radius();
    let radius = match declared {
        Some(d) if measured > d.radius => {
            eprintln!(
                "warning: dataset radius {measured} exceeds declared radius {}; using the measured value",
                d.radius
            );
            measured
        }
        Some(d) => d.radius,
        None => measured,
    };
    let objective = match a.objective {
        ObjectiveArg::Hinge => Objective::Hinge,
        ObjectiveArg::Robust => {
            if !(a.c >= 0.0) || !a.c.is_finite() {
                return Err(config("--c must be a finite value ≥ 0"));
            }
            Objective::Robust { noise_radius: a.c }
        }
    };
    let mask_policy = match a.mask {
        MaskArg::None => MaskPolicy::None,
        MaskArg::Dropout => MaskPolicy::Dropout,
        MaskArg::Dropconnect => MaskPolicy::Dropconnect,
    };
    let seed = resolve_seed(a.seed)?;
    let net: Net = init_net(spec, seed)?;
    let cfg = TrainConfig {
        schedule: Schedule::new(a.epochs, a.lr, a.batch, seed),
        objective,
        mask_policy,
        margin_every: None,
    };
    let run = train_checkpointed(net, &data, &cfg);
    write_model(&a.model_out, &run.net, radius)?;
    let csv = history_csv(&run.history.records, matches!(objective, Objective::Robust { .. }))?;
    fs::write(&a.history_out, csv).with_context(|| format!("writing {}", a.history_out.display()))?;
    if let Some(e) = run.error {
        return Err(anyhow::Error::new(e).context(format!(
            "training stopped; last good checkpoint written to {}",
            a.model_out.display()
        )));
    }
    if let Some(last) = run.history.last() {
        eprintln!(
            "epoch {}: hinge {} zero-one {} mean output margin {}",
            last.epoch, last.hinge, last.zero_one, last.mean_gamma_op
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MarginsBody(MarginReport);

impl Tabular for MarginsBody {
    fn title(&self) -> &'static str {
        "Margins"
    }

    fn headers(&self) -> Vec<&'static str> {
        vec![
            "index",
            "label",
            "score",
            "output_margin",
            "input_margin_upper",
            "input_margin_certificate",
            "jacobian_sup",
            "bracket_width",
            "flag",
        ]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.0
            .samples
            .iter()
            .map(|s| {
                vec![
                    s.index.to_string(),
                    fmt_f64(s.label),
                    fmt_f64(s.score),
                    fmt_f64(s.output_margin),
                    fmt_f64(s.input_margin_upper),
                    fmt_f64(s.input_margin_certificate),
                    fmt_f64(s.jacobian_sup),
                    fmt_f64(s.bracket_width),
                    serde_json::to_value(s.flag).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                ]
            })
            .collect()
    }

    fn summary(&self) -> Vec<String> {
        let r = &self.0;
        vec![
            format!("mean / min output margin: {} / {}", r.output_margin.mean, r.output_margin.min),
            format!("mean / min input margin upper: {} / {}", r.input_margin_upper.mean, r.input_margin_upper.min),
            format!(
                "mean / min sampled certificate: {} / {}",
                r.input_margin_certificate.mean, r.input_margin_certificate.min
            ),
            format!("misclassified: {}, unbounded: {}", r.misclassified, r.unbounded),
            format!("certificate samples per point: {}", r.certificate_samples),
        ]
    }
}

pub fn margins(a: &MarginsArgs) -> anyhow::Result<ExitCode> {
    let model = read_model(&a.model)?;
    let net = model.to_net()?;
    let data = read_dataset(&a.data)?;
    if data.dim() != net.input_dim() {
        return Err(config(format!(
            "dataset has {} features but the model expects {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let radius = a.radius.unwrap_or_else(|| model.data_radius.max(data.radius()));
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(config("search radius must be positive"));
    }
    let seed = resolve_seed(a.seed)?;
    let mut cfg = RobustConfig::for_net(&net, 0.0);
    cfg.ball_samples = a.ball_samples;
    cfg.bisection_tol = a.tol;
    cfg.seed = seed;
    let report = margin_report(&net, &data, radius, &cfg)?;
    let text = render(&Meta::new("margins", model.spec_hash(), seed), &MarginsBody(report), a.out.format)?;
    emit(&text, a.out.output.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VerifyBody {
    passed: bool,
    results: Vec<OracleResult>,
}

impl Tabular for VerifyBody {
    fn title(&self) -> &'static str {
        "Oracle suite"
    }

    fn headers(&self) -> Vec<&'static str> {
        vec!["name", "kind", "passed", "statistic", "threshold", "samples", "note"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.results
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    format!("{:?}", r.kind).to_lowercase(),
                    r.passed.to_string(),
                    fmt_f64(r.statistic),
                    fmt_f64(r.threshold),
                    r.samples.to_string(),
                    r.note.clone().unwrap_or_default(),
                ]
            })
            .collect()
    }

    fn summary(&self) -> Vec<String> {
        let failed = self.results.iter().filter(|r| !r.passed).count();
        vec![format!("{} oracles, {} failed", self.results.len(), failed)]
    }
}

pub fn verify(a: &VerifyArgs) -> anyhow::Result<ExitCode> {
    let (doc, hash) = match &a.spec {
        Some(p) => {
            let l = load_spec(p)?;
            (l.doc, l.hash)
        }
        None => (
            parse_spec_document(DEMO_SPEC).map_err(config)?,
            sha256_hex(DEMO_SPEC.as_bytes()),
        ),
    };
    let data = doc.data().unwrap_or_else(|| DataStats::new(1.0));
    let SpecDocument::Network { spec, .. } = doc else {
        return Err(config("verify needs a fully connected spec"));
    };
    validate(&spec).map_err(config)?;
    if let Some(f) = &a.only {
        if !SUITE_ORACLES.iter().any(|n| n.contains(f.as_str())) {
            return Err(config(format!("--only `{f}` matches no oracle; known: {}", SUITE_ORACLES.join(", "))));
        }
    }
    let seed = resolve_seed(a.seed)?;
    let cfg = SuiteConfig {
        seed,
        trials: a.trials,
        nets: a.nets,
        fd_probes: a.fd_probes,
        shatter_max_m: a.shatter_max_m,
        only: a.only.clone(),
        ..SuiteConfig::default()
    };
    let results = run_suite(&spec, &data, &cfg)?;
    let passed = results.iter().all(|r| r.passed);
    let body = VerifyBody { passed, results };
    let text = render(&Meta::new("verify", hash, seed), &body, a.out.format)?;
    emit(&text, a.out.output.as_deref())?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
