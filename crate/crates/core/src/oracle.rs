//! Empirical checks of the inequalities behind the capacity bounds.
//!
//! Every oracle is deterministic given its seed and reports the statistic it
//! measured together with the threshold it was held to.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::capacity::{feature_radius_bound, vc_bound_mlp};
use crate::error::{Error, Result};
use crate::margins::{
    input_margin_certificate, robust_objective, robust_objective_grad, train, RobustConfig, Schedule,
    TrainConfig,
};
use crate::model_spec::{lipschitz_constant, ActivationKind, DataStats, NetworkSpec};
use crate::net_engine::rng::{purpose, stream_key, stream_rng};
use crate::net_engine::{
    empirical_hinge, grad_hinge, init_net, jacobian, Dataset, DenseNet, JacobianTarget, MaskSample,
};

/// Slack for comparisons that hold exactly in real arithmetic.
pub const EXACT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Deterministic inequality, any violation is a failure.
    Exact,
    /// Monte Carlo estimate held to a 4σ threshold.
    Statistical,
    /// Search that can only refute, never confirm.
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub kind: OracleKind,
    pub passed: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl OracleResult {
    fn new(name: impl Into<String>, kind: OracleKind, statistic: f64, threshold: f64, samples: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            kind,
            passed: statistic <= threshold,
            statistic,
            threshold,
            samples,
            seed,
            note: None,
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

fn oracle_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut key = vec![purpose::ORACLE];
    key.extend_from_slice(parts);
    stream_rng(seed, &key)
}

fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut key = vec![purpose::ORACLE, seed];
    key.extend_from_slice(parts);
    stream_key(&key)
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Monte Carlo estimate of `E‖u ⊙ v‖²` over Bernoulli(p) masks against
/// `p‖v‖²`.
pub fn mc_masked_norm(v: &[f64], p: f64, trials: usize, seed: u64) -> OracleResult {
    let trials = trials.max(1);
    let exact = p * v.iter().map(|x| x * x).sum::<f64>();
    let mut rng = oracle_rng(seed, &[1, v.len() as u64, p.to_bits()]);
    let draws: Vec<f64> = (0..trials)
        .map(|_| v.iter().filter(|_| rng.gen::<f64>() < p).map(|x| x * x).sum())
        .collect();
    let (est, sd) = mean_and_sd(&draws);
    let threshold = 4.0 * sd / (trials as f64).sqrt() + EXACT_SLACK * exact.max(1.0);
    OracleResult::new("masked_norm", OracleKind::Statistical, (est - exact).abs(), threshold, trials, seed)
        .with_note(format!("estimate {est}, expected {exact}"))
}

/// Monte Carlo over uniform ±1 labelings: `E[y_i y_j]` is 1 on the diagonal
/// and 0 off it.
pub fn mc_label_orthogonality(m: usize, trials: usize, seed: u64) -> Result<OracleResult> {
    if m < 2 {
        return Err(Error::Model("label orthogonality needs m ≥ 2".into()));
    }
    let trials = trials.max(1);
    let mut rng = oracle_rng(seed, &[2, m as u64]);
    let mut sums = Array2::<f64>::zeros((m, m));
    let mut y = vec![0.0; m];
    for _ in 0..trials {
        for v in y.iter_mut() {
            *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        for i in 0..m {
            for j in 0..m {
                sums[[i, j]] += y[i] * y[j];
            }
        }
    }
    let n = trials as f64;
    let diagonal_ok = (0..m).all(|i| sums[[i, i]] / n == 1.0);
    let worst = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (sums[[i, j]] / n).abs())
        .fold(0.0, f64::max);
    let mut r = OracleResult::new(
        "label_orthogonality",
        OracleKind::Statistical,
        worst,
        4.0 / n.sqrt(),
        trials,
        seed,
    );
    if !diagonal_ok {
        r.passed = false;
        r = r.with_note("diagonal mean differs from 1");
    }
    Ok(r)
}

/// Exact `E[y_i y_j]` by enumerating all `2^m` labelings.
pub fn enumerate_label_orthogonality(m: usize) -> Result<OracleResult> {
    if !(2..=20).contains(&m) {
        return Err(Error::Model("enumeration needs 2 ≤ m ≤ 20".into()));
    }
    let total = 1usize << m;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let s: i64 = (0..total)
                .map(|b| {
                    let yi = if b >> i & 1 == 1 { 1 } else { -1 };
                    let yj = if b >> j & 1 == 1 { 1 } else { -1 };
                    yi * yj
                })
                .sum();
            worst = worst.max((s as f64 / total as f64).abs());
        }
    }
    Ok(OracleResult::new("label_orthogonality_exact", OracleKind::Exact, worst, 0.0, total, 0))
}

/// Random pairs in `[−10, 10]^dim` tested against `‖σ(a)−σ(b)‖ ≤ L‖a−b‖`
/// and, for activations through the origin, `‖σ(z)‖ ≤ L‖z‖`. The statistic
/// is the largest excess.
pub fn lipschitz_check(activation: ActivationKind, lipschitz: f64, dim: usize, trials: usize, seed: u64) -> OracleResult {
    let dim = dim.max(1);
    let mut rng = oracle_rng(seed, &[3, dim as u64, lipschitz.to_bits()]);
    let norm = |v: &Array1<f64>| v.dot(v).sqrt();
    let act = |v: &Array1<f64>| v.mapv(|z| activation.apply(z));
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    for _ in 0..trials {
        let a: Array1<f64> = (0..dim).map(|_| rng.gen_range(-10.0..=10.0)).collect();
        let b: Array1<f64> = (0..dim).map(|_| rng.gen_range(-10.0..=10.0)).collect();
        let mut excess = norm(&(act(&a) - act(&b))) - lipschitz * norm(&(&a - &b));
        if activation.passes_through_origin() {
            excess = excess.max(norm(&act(&a)) - lipschitz * norm(&a));
        }
        if excess > worst {
            worst = excess;
            witness = Some((a, b));
        }
    }
    let mut r = OracleResult::new(
        format!("lipschitz[{}]", activation.name()),
        OracleKind::Exact,
        worst,
        EXACT_SLACK,
        trials,
        seed,
    );
    if !r.passed {
        if let Some((a, b)) = witness {
            r = r.with_note(format!("counterexample z1={a}, z2={b} with L={lipschitz}"));
        }
    }
    r
}

/// A feasible net whose incoming vectors mostly sit on their caps.
pub fn random_feasible_net(spec: &NetworkSpec, seed: u64) -> Result<DenseNet<f64>> {
    let mut net: DenseNet<f64> = init_net(spec, seed)?;
    let mut rng = stream_rng(seed, &[purpose::ORACLE, 99]);
    for w in &mut net.weights {
        let s = rng.gen_range(1.0..4.0);
        w.mapv_inplace(|v| v * s);
    }
    net.project_in_place();
    Ok(net)
}

/// `m` points drawn uniformly in the ball of the given radius.
pub fn ball_points(dim: usize, m: usize, radius: f64, seed: u64) -> Array2<f64> {
    let mut rng = oracle_rng(seed, &[5, dim as u64, m as u64]);
    let mut out = Array2::zeros((m, dim));
    for mut row in out.rows_mut() {
        let g: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = g.dot(&g).sqrt().max(f64::MIN_POSITIVE);
        let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
        row.assign(&g.mapv(|v| v * r / n));
    }
    out
}

/// Points on the sphere of the given radius.
pub fn sphere_points(dim: usize, m: usize, radius: f64, seed: u64) -> Array2<f64> {
    let mut rng = oracle_rng(seed, &[6, dim as u64, m as u64]);
    let mut out = Array2::zeros((m, dim));
    for mut row in out.rows_mut() {
        let g: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = g.dot(&g).sqrt().max(f64::MIN_POSITIVE);
        row.assign(&g.mapv(|v| v * radius / n));
    }
    out
}

fn sq_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v)
}

/// `max_i ‖φ_P(x_i)‖²` over `nets` random feasible nets, as a fraction of the
/// feature radius bound.
pub fn feature_radius_check(spec: &NetworkSpec, data: &Dataset<f64>, radius: f64, nets: usize, seed: u64) -> Result<OracleResult> {
    data.check_radius(radius)?;
    let bound: f64 = feature_radius_bound(spec, &DataStats::new(radius), None)?;
    let mut worst = 0.0f64;
    for n in 0..nets {
        let net = random_feasible_net(spec, sub_seed(seed, &[7, n as u64]))?;
        for (x, _) in data.iter() {
            worst = worst.max(sq_norm(net.features(x)?.view()));
        }
    }
    let ratio = if bound > 0.0 { worst / bound } else { worst };
    Ok(
        OracleResult::new("feature_radius", OracleKind::Exact, ratio, 1.0 + EXACT_SLACK, nets * data.len(), seed)
            .with_note(format!("max measured {worst}, bound {bound}")),
    )
}

/// Expected `‖u_P ⊙ φ_P‖²` under dropout masks, per net and sample, against
/// the keep-probability-weighted bound. The statistic is the worst
/// `(mean − bound) / (4σ̂/√K)`.
pub fn feature_radius_dropout_check(
    spec: &NetworkSpec,
    data: &Dataset<f64>,
    radius: f64,
    nets: usize,
    mask_trials: usize,
    seed: u64,
) -> Result<OracleResult> {
    data.check_radius(radius)?;
    let probs: Vec<f64> = (0..=spec.depth()).map(|k| spec.keep_prob_of(k)).collect();
    let bound: f64 = feature_radius_bound(spec, &DataStats::new(radius), Some(&probs))?;
    let k = mask_trials.max(2);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_mean = 0.0;
    for n in 0..nets {
        let net = random_feasible_net(spec, sub_seed(seed, &[8, n as u64]))?;
        for (i, (x, _)) in data.iter().enumerate() {
            let draws = (0..k)
                .map(|t| {
                    let m = MaskSample::dropout(spec, seed, &[n as u64, i as u64, t as u64]);
                    net.forward_masked(x, &m).map(|tr| sq_norm(tr.layer_inputs[spec.depth()].view()))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, sd) = mean_and_sd(&draws);
            let scale = 4.0 * sd / (k as f64).sqrt() + EXACT_SLACK * bound.max(1.0);
            let z = (mean - bound) / scale;
            if z > worst {
                worst = z;
                worst_mean = mean;
            }
        }
    }
    Ok(OracleResult::new(
        "feature_radius_dropout",
        OracleKind::Statistical,
        worst,
        1.0,
        nets * data.len() * k,
        seed,
    )
    .with_note(format!("bound {bound}, mean at worst probe {worst_mean}")))
}

/// Rank-one relu construction whose features reach the feature radius bound
/// exactly. Returns the measured-to-bound ratio, which should be 1.
pub fn feature_radius_tightness(spec: &NetworkSpec, radius: f64) -> Result<OracleResult> {
    if spec
        .hidden
        .iter()
        .any(|l| !matches!(l.activation, ActivationKind::Relu | ActivationKind::LeakyRelu { .. }) || l.activation.lipschitz() != 1.0)
    {
        return Err(Error::Model("tightness probe needs relu-type units with L = 1".into()));
    }
    let widths = spec.widths();
    let d = widths[0];
    let x = Array1::from_elem(d, radius / (d as f64).sqrt());
    let mut weights = Vec::with_capacity(widths.len() - 1);
    for k in 0..widths.len() - 1 {
        let a = spec.max_norm_into(k + 1);
        let col = a / (widths[k] as f64).sqrt();
        weights.push(Array2::from_elem((widths[k], widths[k + 1]), col));
    }
    let net = DenseNet::from_weights(spec.clone(), weights)?;
    let measured = sq_norm(net.features(x.view())?.view());
    let bound: f64 = feature_radius_bound(spec, &DataStats::new(radius), None)?;
    let rel = (measured / bound - 1.0).abs();
    Ok(OracleResult::new("feature_radius_tightness", OracleKind::Exact, rel, EXACT_SLACK, 1, 0)
        .with_note(format!("measured {measured}, bound {bound}")))
}

/// Features of perturbed inputs `x + Δ`, `‖Δ‖ = c`, against `(R + c)²·F`
/// where `F` is the feature radius bound at unit radius. Whether the
/// `(R² + c²)·F` form also held is reported in the note. Candidates are
/// `K` random directions plus the direction of `x` itself.
pub fn robust_radius_check(
    spec: &NetworkSpec,
    data: &Dataset<f64>,
    radius: f64,
    c: f64,
    nets: usize,
    perturbations: usize,
    seed: u64,
) -> Result<OracleResult> {
    data.check_radius(radius)?;
    if !(c >= 0.0) {
        return Err(Error::Model("noise radius must be ≥ 0".into()));
    }
    let unit: f64 = feature_radius_bound(spec, &DataStats::new(1.0), None)?;
    let sound = (radius + c).powi(2) * unit;
    let stated = (radius * radius + c * c) * unit;
    let d = data.dim();
    let mut worst = 0.0f64;
    for n in 0..nets {
        let net = random_feasible_net(spec, sub_seed(seed, &[9, n as u64]))?;
        let dirs = sphere_points(d, perturbations, 1.0, sub_seed(seed, &[10, n as u64]));
        for (x, _) in data.iter() {
            let xn = x.dot(&x).sqrt();
            let aligned = (xn > 0.0).then(|| x.mapv(|v| v / xn));
            for dir in dirs.rows().into_iter().map(|r| r.to_owned()).chain(aligned) {
                let z = &x + &dir.mapv(|v| v * c);
                worst = worst.max(sq_norm(net.features(z.view())?.view()));
            }
        }
    }
    let stated_holds = worst <= stated * (1.0 + EXACT_SLACK);
    let statistic = if sound > 0.0 { worst / sound } else { worst };
    Ok(OracleResult::new(
        "robust_radius",
        OracleKind::Exact,
        statistic,
        1.0 + EXACT_SLACK,
        nets * data.len() * (perturbations + 1),
        seed,
    )
    .with_note(format!(
        "max measured {worst}; (R+c)^2 form {sound}; (R^2+c^2) form {stated} {}",
        if stated_holds { "holds" } else { "violated" }
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerBudget {
    pub epochs: usize,
    pub lr: f64,
    pub restarts: usize,
}

impl Default for TrainerBudget {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 0.05,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShatteringOutcome {
    pub result: OracleResult,
    pub realized: usize,
    pub labelings: usize,
    pub bound: f64,
}

const SHATTER_CHUNK: usize = 100;

fn realizes(net: &DenseNet<f64>, data: &Dataset<f64>) -> Result<bool> {
    for (x, y) in data.iter() {
        if y * net.score(x)? < 1.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Tries to realize every labeling of `m` points near the sphere of radius
/// `R` with margin 1 inside the constrained class. A fully shattered set
/// with `m` above the bound refutes the bound; anything less is
/// inconclusive.
pub fn shattering_probe(
    spec: &NetworkSpec,
    data: &DataStats,
    m: usize,
    budget: TrainerBudget,
    seed: u64,
) -> Result<ShatteringOutcome> {
    if m == 0 || m > 12 {
        return Err(Error::Model(format!("shattering probe needs 1 ≤ m ≤ 12, got {m}")));
    }
    let bound = vc_bound_mlp::<f64>(spec, data)?.value;
    let points = sphere_points(spec.input_dim, m, data.radius * (1.0 - 1e-12), sub_seed(seed, &[11, m as u64]));
    let labelings = 1usize << m;
    let mut realized = 0;
    for code in 0..labelings {
        let labels: Vec<f64> = (0..m).map(|i| if code >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let set = Dataset::new(points.clone(), labels)?;
        let mut done = false;
        for restart in 0..budget.restarts.max(1) {
            let mut net = init_net(spec, sub_seed(seed, &[12, code as u64, restart as u64]))?;
            let mut spent = 0;
            while spent < budget.epochs {
                let chunk = SHATTER_CHUNK.min(budget.epochs - spent);
                let cfg = TrainConfig::new(Schedule::new(chunk, budget.lr, m, sub_seed(seed, &[13, spent as u64])));
                net = train(net, &set, &cfg)?.0;
                spent += chunk;
                if realizes(&net, &set)? {
                    done = true;
                    break;
                }
            }
            if done {
                break;
            }
        }
        if done {
            realized += 1;
        }
    }
    let shattered = realized == labelings;
    let statistic = if shattered { m as f64 } else { 0.0 };
    let note = if shattered {
        format!("all {labelings} labelings realized with margin 1; bound {bound}")
    } else {
        format!("inconclusive: {realized} of {labelings} labelings realized; bound {bound}")
    };
    Ok(ShatteringOutcome {
        result: OracleResult::new(format!("shattering[m={m}]"), OracleKind::Probe, statistic, bound, labelings, seed)
            .with_note(note),
        realized,
        labelings,
        bound,
    })
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_WORST_TOL: f64 = 1e-2;
pub const FD_PASS_FRACTION: f64 = 0.95;
/// Relu probes whose preactivations come this close to a kink are skipped.
pub const FD_KINK_GUARD: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Jacobian,
    Hinge,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub probes: usize,
    pub skipped: usize,
    pub within_tol: usize,
    pub worst: f64,
    pub per_kind: Vec<(ProbeKind, usize, usize)>,
}

impl FdReport {
    pub fn fraction_within(&self) -> f64 {
        if self.probes == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.probes as f64
        }
    }

    pub fn results(&self, seed: u64) -> Vec<OracleResult> {
        vec![
            OracleResult::new(
                "finite_diff",
                OracleKind::Exact,
                1.0 - self.fraction_within(),
                1.0 - FD_PASS_FRACTION,
                self.probes,
                seed,
            )
            .with_note(format!("{} probes, {} skipped near kinks", self.probes, self.skipped)),
            OracleResult::new("finite_diff_worst", OracleKind::Exact, self.worst, FD_WORST_TOL, self.probes, seed),
        ]
    }
}

fn fd_inventory(seed: u64) -> Result<Vec<(DenseNet<f64>, Dataset<f64>)>> {
    use crate::model_spec::LayerSpec;
    let mut out = Vec::new();
    let shapes: [(usize, &[usize]); 3] = [(3, &[4, 3]), (2, &[5]), (4, &[3, 3, 2])];
    for (i, (d, hs)) in shapes.iter().enumerate() {
        for act in [ActivationKind::Tanh, ActivationKind::Relu] {
            let hidden = hs.iter().map(|&h| LayerSpec::new(h, act, 1.5)).collect();
            let spec = NetworkSpec::new(*d, hidden, 2.0);
            let s = sub_seed(seed, &[14, i as u64, act.has_kink() as u64]);
            let net = init_net(&spec, s)?;
            let x = ball_points(*d, 4, 1.0, s);
            let labels = (0..4).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
            out.push((net, Dataset::new(x, labels)?));
        }
    }
    Ok(out)
}

fn near_kink(net: &DenseNet<f64>, data: &Dataset<f64>) -> Result<bool> {
    for (x, y) in data.iter() {
        let t = net.forward(x)?;
        if t.min_kink_distance(&net.spec) < FD_KINK_GUARD || (1.0 - y * t.output).abs() < FD_KINK_GUARD {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Central differences against the analytic input Jacobian, hinge gradient
/// and robust objective gradient on tanh nets and relu nets at generic
/// points.
pub fn finite_diff_suite(probes: usize, seed: u64) -> Result<FdReport> {
    let inventory = fd_inventory(seed)?;
    let mut rng = oracle_rng(seed, &[15]);
    let mut report = FdReport {
        probes: 0,
        skipped: 0,
        within_tol: 0,
        worst: 0.0,
        per_kind: vec![(ProbeKind::Jacobian, 0, 0), (ProbeKind::Hinge, 0, 0), (ProbeKind::Robust, 0, 0)],
    };
    let h = FD_STEP;
    let mut attempts = 0;
    while report.probes < probes && attempts < probes * 20 {
        attempts += 1;
        let (net, data) = &inventory[rng.gen_range(0..inventory.len())];
        let kind = [ProbeKind::Jacobian, ProbeKind::Hinge, ProbeKind::Robust][rng.gen_range(0..3)];
        let (analytic, numeric) = match kind {
            ProbeKind::Jacobian => {
                let i = rng.gen_range(0..data.len());
                let x = data.row_owned(i);
                if net.forward(x.view())?.min_kink_distance(&net.spec) < FD_KINK_GUARD {
                    report.skipped += 1;
                    continue;
                }
                let j = jacobian(net, x.view(), JacobianTarget::Features)?.matrix;
                let (r, c) = (rng.gen_range(0..j.nrows()), rng.gen_range(0..j.ncols()));
                let mut xp = x.clone();
                xp[c] += h;
                let mut xm = x.clone();
                xm[c] -= h;
                let num = (net.features(xp.view())?[r] - net.features(xm.view())?[r]) / (2.0 * h);
                (j[[r, c]], num)
            }
            ProbeKind::Hinge | ProbeKind::Robust => {
                if near_kink(net, data)? {
                    report.skipped += 1;
                    continue;
                }
                let cfg = RobustConfig::for_net(net, 0.2);
                let k = rng.gen_range(0..net.weights.len());
                let (a, b) = net.weights[k].dim();
                let idx = (rng.gen_range(0..a), rng.gen_range(0..b));
                let eval = |n: &DenseNet<f64>| -> Result<f64> {
                    match kind {
                        ProbeKind::Hinge => empirical_hinge(n, data),
                        _ => robust_objective(n, data, &cfg),
                    }
                };
                let g = match kind {
                    ProbeKind::Hinge => grad_hinge(net, data, None)?,
                    _ => robust_objective_grad(net, data, &cfg)?.1,
                };
                let mut p = net.clone();
                p.weights[k][idx] += h;
                let mut m = net.clone();
                m.weights[k][idx] -= h;
                (g.weights[k][idx], (eval(&p)? - eval(&m)?) / (2.0 * h))
            }
        };
        let err = relative_error(analytic, numeric);
        report.probes += 1;
        report.worst = report.worst.max(err);
        let slot = report.per_kind.iter_mut().find(|e| e.0 == kind).expect("kind listed");
        slot.1 += 1;
        if err <= FD_REL_TOL {
            report.within_tol += 1;
            slot.2 += 1;
        }
    }
    Ok(report)
}

/// Counts probes where the sampled certificate exceeds the ray upper
/// estimate by more than the bisection tolerance. Misclassified samples are
/// skipped.
pub fn margin_inequality_check(
    cases: &[(DenseNet<f64>, Dataset<f64>)],
    radius: f64,
    cfg: &RobustConfig,
) -> Result<OracleResult> {
    let tol = cfg.tol_for(radius);
    let (mut probes, mut skipped, mut violations) = (0, 0, 0);
    let mut worst = f64::NEG_INFINITY;
    for (net, data) in cases {
        for (x, y) in data.iter() {
            if !(y * net.score(x)? > 0.0) {
                skipped += 1;
                continue;
            }
            let c = input_margin_certificate(net, x, radius, cfg)?;
            probes += 1;
            let gap = c.value - c.upper.distance;
            worst = worst.max(gap);
            if gap > tol {
                violations += 1;
            }
        }
    }
    Ok(OracleResult::new("margin_inequality", OracleKind::Exact, violations as f64, 0.0, probes, cfg.seed)
        .with_note(format!("{skipped} misclassified skipped; largest certificate − upper {worst}")))
}

/// Brute-force distance from `x` to the nearest point of a square grid
/// (`n × n` over `[−half, half]²`) whose score sign differs from `f(x)`.
/// Accurate to about one grid pitch. Returns `(distance, pitch)`.
pub fn grid_margin_2d(net: &DenseNet<f64>, x: ArrayView1<'_, f64>, half: f64, n: usize) -> Result<(f64, f64)> {
    if net.input_dim() != 2 || n < 2 {
        return Err(Error::Model("grid margin needs a 2-d input and n ≥ 2".into()));
    }
    let s0 = net.score(x)?.signum();
    let pitch = 2.0 * half / (n - 1) as f64;
    let mut best = f64::INFINITY;
    let mut z = Array1::zeros(2);
    for i in 0..n {
        z[0] = -half + i as f64 * pitch;
        let dx = z[0] - x[0];
        if dx.abs() >= best {
            continue;
        }
        for j in 0..n {
            z[1] = -half + j as f64 * pitch;
            let dy = z[1] - x[1];
            let dist = dx.hypot(dy);
            if dist >= best {
                continue;
            }
            if net.score(z.view())? * s0 <= 0.0 {
                best = dist;
            }
        }
    }
    Ok((best, pitch))
}

/// Which oracles [`run_suite`] runs and at what size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub trials: usize,
    pub nets: usize,
    pub points: usize,
    pub noise_radius: f64,
    pub fd_probes: usize,
    pub shatter_max_m: usize,
    pub budget: TrainerBudget,
    /// Substring filter on oracle names.
    pub only: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100_000,
            nets: 50,
            points: 64,
            noise_radius: 0.1,
            fd_probes: 500,
            shatter_max_m: 3,
            budget: TrainerBudget::default(),
            only: None,
        }
    }
}

pub const SUITE_ORACLES: &[&str] = &[
    "lipschitz",
    "masked_norm",
    "label_orthogonality",
    "feature_radius",
    "robust_radius",
    "finite_diff",
    "margin_inequality",
    "shattering",
];

/// Runs the oracle suite against a network spec and its data radius.
pub fn run_suite(spec: &NetworkSpec, data: &DataStats, cfg: &SuiteConfig) -> Result<Vec<OracleResult>> {
    let wanted = |name: &str| cfg.only.as_deref().map_or(true, |f| name.contains(f));
    let seed = cfg.seed;
    let mut out = Vec::new();
    if wanted("lipschitz") {
        let acts = [
            ActivationKind::Relu,
            ActivationKind::leaky_relu(),
            ActivationKind::Tanh,
            ActivationKind::Sigmoid,
        ];
        for a in acts {
            out.push(lipschitz_check(a, lipschitz_constant(a), 1, cfg.trials.min(10_000), seed));
        }
    }
    if wanted("masked_norm") {
        out.push(mc_masked_norm(&[1.0; 4], 0.5, cfg.trials, seed));
        let widths = spec.widths();
        out.push(mc_masked_norm(&vec![0.5; widths[0]], spec.keep_prob_of(0), cfg.trials, seed));
    }
    if wanted("label_orthogonality") {
        out.push(mc_label_orthogonality(4, cfg.trials, seed)?);
        out.push(enumerate_label_orthogonality(2)?);
    }
    let points = Dataset::new(
        ball_points(spec.input_dim, cfg.points, data.radius, sub_seed(seed, &[16])),
        vec![1.0; cfg.points],
    )?;
    if wanted("feature_radius") {
        out.push(feature_radius_check(spec, &points, data.radius, cfg.nets, seed)?);
        if spec.uses_dropout() {
            out.push(feature_radius_dropout_check(spec, &points, data.radius, cfg.nets.min(10), 200, seed)?);
        }
    }
    if wanted("robust_radius") {
        let c = if data.noise_radius > 0.0 { data.noise_radius } else { cfg.noise_radius };
        out.push(robust_radius_check(spec, &points, data.radius, c, cfg.nets.min(20), 8, seed)?);
    }
    if wanted("finite_diff") {
        out.extend(finite_diff_suite(cfg.fd_probes, seed)?.results(seed));
    }
    if wanted("margin_inequality") {
        let mut cases = Vec::new();
        for n in 0..cfg.nets.min(10) {
            let net = random_feasible_net(spec, sub_seed(seed, &[17, n as u64]))?;
            let sub = points.subset(&(0..points.len().min(8)).collect::<Vec<_>>());
            let labels = sub
                .iter()
                .map(|(x, _)| net.score(x).map(|s| if s >= 0.0 { 1.0 } else { -1.0 }))
                .collect::<Result<Vec<_>>>()?;
            cases.push((net, Dataset::new(sub.samples().clone(), labels)?));
        }
        let mut rc = RobustConfig::new(spec.output_max_norm, 0.0);
        rc.seed = seed;
        rc.ball_samples = 64;
        out.push(margin_inequality_check(&cases, data.radius, &rc)?);
    }
    if wanted("shattering") {
        for m in 1..=cfg.shatter_max_m.min(12) {
            out.push(shattering_probe(spec, data, m, cfg.budget, seed)?.result);
        }
    }
    Ok(out)
}
