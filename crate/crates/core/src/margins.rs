//! Output and input margins, the Jacobian margin certificate, robust
//! objectives and a projected-SGD trainer.

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_engine::grad::{backward_jacobian_frobenius, backward_output, jacobian_chain};
use crate::net_engine::rng::{purpose, stream_rng};
use crate::net_engine::{
    frobenius_norm, grad_hinge, hinge_loss, jacobian, spectral_norm, Dataset, DenseNet, Gradient,
    JacobianTarget, MaskPolicy, MaskSample,
};
use crate::scalar::Scalar;

/// Evenly spaced evaluations along the search ray before bisection.
pub const RAY_SCAN_STEPS: usize = 512;
/// Search cap as a multiple of the data radius.
pub const SEARCH_RADIUS_FACTOR: f64 = 4.0;
pub const DEFAULT_BALL_SAMPLES: usize = 256;
/// Default bisection tolerance relative to the data radius.
pub const DEFAULT_RELATIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    /// `c`, the bound on `‖Δ‖₂`.
    pub noise_radius: f64,
    /// `A_{P+1}`.
    pub output_max_norm: f64,
    pub ball_samples: usize,
    /// Absolute bisection tolerance; `None` means `1e-6·R`.
    pub bisection_tol: Option<f64>,
    pub seed: u64,
}

impl RobustConfig {
    pub fn new(net_output_max_norm: f64, noise_radius: f64) -> Self {
        Self {
            noise_radius,
            output_max_norm: net_output_max_norm,
            ball_samples: DEFAULT_BALL_SAMPLES,
            bisection_tol: None,
            seed: 0,
        }
    }

    pub fn for_net<T>(net: &DenseNet<T>, noise_radius: f64) -> Self {
        Self::new(net.spec.output_max_norm, noise_radius)
    }

    /// `c·A_{P+1}`.
    pub fn penalty_weight(&self) -> f64 {
        self.noise_radius * self.output_max_norm
    }

    pub fn tol_for(&self, radius: f64) -> f64 {
        self.bisection_tol.unwrap_or(DEFAULT_RELATIVE_TOL * radius)
    }

    fn check(&self) -> Result<()> {
        if !(self.noise_radius >= 0.0) || !self.noise_radius.is_finite() {
            return Err(Error::Model(format!(
                "noise radius must be a finite value ≥ 0, got {}",
                self.noise_radius
            )));
        }
        Ok(())
    }
}

/// `|φ_P(x)·w| / ‖w‖₂`, the distance of the feature vector to the output
/// hyperplane.
pub fn output_margin<T: Scalar>(net: &DenseNet<T>, x: ArrayView1<'_, T>) -> Result<T> {
    let w = net.output_weights();
    let norm = w.dot(&w).sqrt();
    if !(norm > T::zero()) {
        return Err(Error::ZeroNorm);
    }
    let trace = net.forward(x)?;
    Ok(trace.output.abs() / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginFlag {
    Finite,
    /// No sign change within the search cap.
    Unbounded,
    /// `f(x) = 0`.
    OnBoundary,
    /// `sign(f(x)) ≠ y`; margins are reported as 0.
    Misclassified,
}

/// Result of the ray search for the nearest sign change.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMargin<T> {
    /// Upper end of the final bracket (`+∞` when unbounded).
    pub distance: T,
    pub lo: T,
    pub hi: T,
    pub flag: MarginFlag,
    /// Unit search direction, absent when `∇f(x) = 0` or `f(x) = 0`.
    pub direction: Option<Array1<T>>,
}

impl<T: Scalar> RayMargin<T> {
    pub fn width(&self) -> T {
        self.hi - self.lo
    }

    fn flagged(flag: MarginFlag, d: T) -> Self {
        Self {
            distance: d,
            lo: d,
            hi: d,
            flag,
            direction: None,
        }
    }
}

/// Distance from `x` to the first sign change of `f` along the steepest
/// score-descent ray `−sign(f(x))·∇f(x)`, searched out to `4·radius` and
/// bisected to `tol`. An upper bound on the distance to the decision
/// boundary.
pub fn input_margin_upper<T: Scalar>(
    net: &DenseNet<T>,
    x: ArrayView1<'_, T>,
    radius: f64,
    tol: f64,
) -> Result<RayMargin<T>> {
    let f0 = net.score(x)?;
    if f0 == T::zero() {
        return Ok(RayMargin::flagged(MarginFlag::OnBoundary, T::zero()));
    }
    let g = jacobian(net, x, JacobianTarget::Output)?.matrix.row(0).to_owned();
    let gn = g.dot(&g).sqrt();
    if !(gn > T::zero()) {
        return Ok(RayMargin::flagged(MarginFlag::Unbounded, T::infinity()));
    }
    let sign = f0.signum();
    let dir = g.mapv(|v| -sign * v / gn);
    let cap = T::of(SEARCH_RADIUS_FACTOR * radius);
    let crosses = |t: T| -> Result<bool> {
        let z = &x + &dir.mapv(|v| v * t);
        Ok(net.score(z.view())? * sign <= T::zero())
    };

    let step = cap / T::of(RAY_SCAN_STEPS as f64);
    let mut lo = T::zero();
    let mut hi = None;
    for i in 1..=RAY_SCAN_STEPS {
        let t = step * T::of(i as f64);
        if crosses(t)? {
            hi = Some(t);
            break;
        }
        lo = t;
    }
    let Some(mut hi) = hi else {
        return Ok(RayMargin {
            distance: T::infinity(),
            lo: cap,
            hi: T::infinity(),
            flag: MarginFlag::Unbounded,
            direction: Some(dir),
        });
    };
    let tol = T::of(tol);
    while hi - lo > tol {
        let mid = lo + (hi - lo) / T::of(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        if crosses(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(RayMargin {
        distance: hi,
        lo,
        hi,
        flag: MarginFlag::Finite,
        direction: Some(dir),
    })
}

/// `γ_op / Ĵ` for a given output margin and sampled Jacobian sup; `+∞` when
/// `Ĵ = 0`.
pub fn certificate_from<T: Scalar>(output_margin: T, jacobian_sup: T) -> T {
    if jacobian_sup > T::zero() {
        output_margin / jacobian_sup
    } else {
        T::infinity()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate<T> {
    pub value: T,
    pub jacobian_sup: T,
    pub samples: usize,
    pub upper: RayMargin<T>,
}

/// Sampled certificate `γ_op(x) / Ĵ` with `Ĵ` estimating
/// `sup_z ‖∂φ_P/∂x (z)‖₂`. The points `z` cover the search segment up to the
/// boundary point found by [`input_margin_upper`] and segments toward
/// random points of the ball of that radius around `x`. Along the search
/// segment `Ĵ` also takes difference quotients of `φ_P` between neighbouring
/// points, which keeps the certificate below the upper estimate.
pub fn input_margin_certificate<T: Scalar>(
    net: &DenseNet<T>,
    x: ArrayView1<'_, T>,
    radius: f64,
    cfg: &RobustConfig,
) -> Result<Certificate<T>> {
    let upper = input_margin_upper(net, x, radius, cfg.tol_for(radius))?;
    let gamma = output_margin(net, x)?;
    let n = cfg.ball_samples.max(1);
    let reach = if upper.hi.is_finite() {
        upper.hi
    } else {
        T::of(SEARCH_RADIUS_FACTOR * radius)
    };
    let jnorm = |z: ArrayView1<'_, T>| -> Result<T> {
        Ok(spectral_norm(&jacobian(net, z, JacobianTarget::Features)?.matrix).value)
    };

    let mut sup = jnorm(x)?;
    let mut count = 1;
    if let Some(dir) = &upper.direction {
        // difference quotients between neighbours also bound sup ‖J‖ from
        // below and catch linear pieces narrower than the sample spacing
        let mut prev: Option<(Array1<T>, Array1<T>)> = None;
        for i in 0..=n {
            let t = reach * T::of(i as f64 / n as f64);
            let z = &x + &dir.mapv(|v| v * t);
            sup = sup.max(jnorm(z.view())?);
            let phi = net.features(z.view())?;
            if let Some((pz, pphi)) = &prev {
                let dz = &z - pz;
                let dist = dz.dot(&dz).sqrt();
                if dist > T::zero() {
                    let dphi = &phi - pphi;
                    sup = sup.max(dphi.dot(&dphi).sqrt() / dist);
                }
            }
            prev = Some((z, phi));
            count += 1;
        }
    }
    let d = x.len();
    let mut rng = stream_rng(cfg.seed, &[purpose::MARGIN, d as u64]);
    for _ in 0..n {
        let mut u: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let un = u.dot(&u).sqrt();
        if un > 0.0 {
            u /= un;
        }
        // uniform point of the ball, then a uniform fraction of the segment to it
        let r = rng.gen::<f64>().powf(1.0 / d as f64) * rng.gen::<f64>();
        let z = &x + &u.mapv(|v| T::of(v * r) * reach);
        sup = sup.max(jnorm(z.view())?);
        count += 1;
    }
    Ok(Certificate {
        value: certificate_from(gamma, sup),
        jacobian_sup: sup,
        samples: count,
        upper,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMargin {
    pub index: usize,
    pub label: f64,
    pub score: f64,
    pub output_margin: f64,
    pub input_margin_upper: f64,
    pub input_margin_certificate: f64,
    pub jacobian_sup: f64,
    pub bracket_width: f64,
    pub flag: MarginFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub mean: f64,
    pub min: f64,
}

fn summarize(values: impl Iterator<Item = f64>) -> MarginSummary {
    let (mut sum, mut n, mut min) = (0.0, 0usize, f64::INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        sum += v;
        n += 1;
        min = min.min(v);
    }
    if n == 0 {
        return MarginSummary { mean: 0.0, min: 0.0 };
    }
    MarginSummary {
        mean: sum / n as f64,
        min,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub samples: Vec<SampleMargin>,
    pub output_margin: MarginSummary,
    pub input_margin_upper: MarginSummary,
    pub input_margin_certificate: MarginSummary,
    pub misclassified: usize,
    pub unbounded: usize,
    /// Points at which `‖J‖₂` was evaluated per sample.
    pub certificate_samples: usize,
    pub bisection_tol: f64,
    pub search_radius: f64,
}

/// Per-sample margins over a dataset. Misclassified samples carry zero
/// margins and a flag; unbounded ones are excluded from the summaries.
pub fn margin_report<T: Scalar>(
    net: &DenseNet<T>,
    data: &Dataset<T>,
    radius: f64,
    cfg: &RobustConfig,
) -> Result<MarginReport> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    cfg.check()?;
    let mut samples = Vec::with_capacity(data.len());
    let mut cert_samples = 0;
    for (i, (x, y)) in data.iter().enumerate() {
        let score = net.score(x)?;
        let correct = y * score > T::zero();
        let row = if correct {
            let c = input_margin_certificate(net, x, radius, cfg)?;
            cert_samples = cert_samples.max(c.samples);
            SampleMargin {
                index: i,
                label: y.as_f64(),
                score: score.as_f64(),
                output_margin: output_margin(net, x)?.as_f64(),
                input_margin_upper: c.upper.distance.as_f64(),
                input_margin_certificate: c.value.as_f64(),
                jacobian_sup: c.jacobian_sup.as_f64(),
                bracket_width: c.upper.width().as_f64(),
                flag: c.upper.flag,
            }
        } else {
            SampleMargin {
                index: i,
                label: y.as_f64(),
                score: score.as_f64(),
                output_margin: 0.0,
                input_margin_upper: 0.0,
                input_margin_certificate: 0.0,
                jacobian_sup: 0.0,
                bracket_width: 0.0,
                flag: if score == T::zero() {
                    MarginFlag::OnBoundary
                } else {
                    MarginFlag::Misclassified
                },
            }
        };
        samples.push(row);
    }
    Ok(MarginReport {
        output_margin: summarize(samples.iter().map(|s| s.output_margin)),
        input_margin_upper: summarize(samples.iter().map(|s| s.input_margin_upper)),
        input_margin_certificate: summarize(samples.iter().map(|s| s.input_margin_certificate)),
        misclassified: samples
            .iter()
            .filter(|s| matches!(s.flag, MarginFlag::Misclassified | MarginFlag::OnBoundary))
            .count(),
        unbounded: samples.iter().filter(|s| s.flag == MarginFlag::Unbounded).count(),
        samples,
        certificate_samples: cert_samples,
        bisection_tol: cfg.tol_for(radius),
        search_radius: SEARCH_RADIUS_FACTOR * radius,
    })
}

/// Mean `‖∂φ_P/∂x‖_F` over the batch.
pub fn mean_jacobian_frobenius<T: Scalar>(net: &DenseNet<T>, data: &Dataset<T>) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut total = T::zero();
    for (x, _) in data.iter() {
        total += frobenius_norm(&jacobian(net, x, JacobianTarget::Features)?.matrix);
    }
    Ok(total / T::of(data.len() as f64))
}

/// Robust objective value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustValue<T> {
    pub hinge: T,
    /// `c·A_{P+1}·mean ‖J_P‖_F`.
    pub penalty: T,
}

impl<T: Scalar> RobustValue<T> {
    pub fn total(&self) -> T {
        self.hinge + self.penalty
    }
}

fn robust_parts<T: Scalar>(
    net: &DenseNet<T>,
    data: &Dataset<T>,
    cfg: &RobustConfig,
    grads: Option<&mut Gradient<T>>,
) -> Result<RobustValue<T>> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    cfg.check()?;
    let inv_m = T::one() / T::of(data.len() as f64);
    let weight = T::of(cfg.penalty_weight());
    let (mut hinge, mut pen) = (T::zero(), T::zero());
    let mut grads = grads;
    for (x, y) in data.iter() {
        let trace = net.forward(x)?;
        let chain = jacobian_chain(net, &trace);
        hinge += hinge_loss(trace.output, y);
        pen += frobenius_norm(&chain[net.depth()]);
        if let Some(g) = grads.as_deref_mut() {
            if T::one() - y * trace.output > T::zero() {
                backward_output(net, &trace, None, -y * inv_m, g);
            }
            backward_jacobian_frobenius(net, &trace, &chain, weight * inv_m, g);
        }
    }
    Ok(RobustValue {
        hinge: hinge * inv_m,
        penalty: weight * pen * inv_m,
    })
}

/// Mean hinge plus `c·A_{P+1}` times the mean Frobenius norm of the feature
/// Jacobian.
pub fn robust_objective<T: Scalar>(net: &DenseNet<T>, data: &Dataset<T>, cfg: &RobustConfig) -> Result<T> {
    robust_parts(net, data, cfg, None).map(|v| v.total())
}

/// Value and gradient of [`robust_objective`]. The penalty gradient holds the
/// relu activation pattern fixed.
pub fn robust_objective_grad<T: Scalar>(
    net: &DenseNet<T>,
    data: &Dataset<T>,
    cfg: &RobustConfig,
) -> Result<(RobustValue<T>, Gradient<T>)> {
    let mut g = Gradient::zeros_like(net);
    let v = robust_parts(net, data, cfg, Some(&mut g))?;
    Ok((v, g))
}

/// Worst-case hinge under the first-order adversary: per sample the larger of
/// the exact hinge at `x` and at `x + Δ*`, with
/// `Δ* = −c·y·(Jᵀw)/‖Jᵀw‖₂`.
pub fn robust_hinge_explicit<T: Scalar>(net: &DenseNet<T>, data: &Dataset<T>, cfg: &RobustConfig) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    cfg.check()?;
    let c = T::of(cfg.noise_radius);
    let mut total = T::zero();
    for (x, y) in data.iter() {
        let base = hinge_loss(net.score(x)?, y);
        let v = jacobian(net, x, JacobianTarget::Output)?.matrix.row(0).to_owned();
        let vn = v.dot(&v).sqrt();
        let worst = if c > T::zero() && vn > T::zero() {
            let shifted = &x + &v.mapv(|e| -c * y * e / vn);
            base.max(hinge_loss(net.score(shifted.view())?, y))
        } else {
            base
        };
        total += worst;
    }
    Ok(total / T::of(data.len() as f64))
}

/// First-order robust hinge: mean `max(0, 1 − y·f(x) + c‖Jᵀw‖₂)`, the inner
/// maximum of the linearized network over `‖Δ‖ ≤ c`. Unlike
/// [`robust_hinge_explicit`] it never exceeds [`robust_objective`].
pub fn robust_hinge_first_order<T: Scalar>(net: &DenseNet<T>, data: &Dataset<T>, cfg: &RobustConfig) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    cfg.check()?;
    let c = T::of(cfg.noise_radius);
    let mut total = T::zero();
    for (x, y) in data.iter() {
        let v = jacobian(net, x, JacobianTarget::Output)?.matrix.row(0).to_owned();
        total += (T::one() - y * net.score(x)? + c * v.dot(&v).sqrt()).max(T::zero());
    }
    Ok(total / T::of(data.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Hinge,
    Robust { noise_radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Schedule {
    pub fn new(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub hinge: f64,
    pub zero_one: f64,
    pub mean_gamma_op: f64,
    /// Present for the robust objective.
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub margin_reports: Vec<(usize, MarginReport)>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub objective: Objective,
    pub mask_policy: MaskPolicy,
    /// Attach a margin report every `k` epochs.
    pub margin_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            schedule,
            objective: Objective::Hinge,
            mask_policy: MaskPolicy::None,
            margin_every: None,
        }
    }
}

fn epoch_record<T: Scalar>(
    net: &DenseNet<T>,
    data: &Dataset<T>,
    epoch: usize,
    objective: Objective,
) -> Result<EpochRecord> {
    let (mut hinge, mut wrong, mut gamma) = (0.0, 0usize, 0.0);
    let w = net.output_weights();
    let wn = w.dot(&w).sqrt().as_f64();
    for (x, y) in data.iter() {
        let s = net.score(x)?;
        hinge += hinge_loss(s, y).as_f64();
        if y * s > T::zero() {
            if wn > 0.0 {
                gamma += s.abs().as_f64() / wn;
            }
        } else {
            wrong += 1;
        }
    }
    let m = data.len() as f64;
    let penalty = match objective {
        Objective::Hinge => None,
        Objective::Robust { noise_radius } => {
            let cfg = RobustConfig::for_net(net, noise_radius);
            Some(cfg.penalty_weight() * mean_jacobian_frobenius(net, data)?.as_f64())
        }
    };
    Ok(EpochRecord {
        epoch,
        hinge: hinge / m,
        zero_one: wrong as f64 / m,
        mean_gamma_op: gamma / m,
        penalty,
    })
}

fn diverged<T: Scalar>(net: &DenseNet<T>) -> bool {
    net.weights.iter().any(|w| w.iter().any(|v| !v.is_finite()))
}

/// Outcome of a training run that may have stopped early.
#[derive(Debug)]
pub struct TrainRun<T> {
    /// Weights after the last completed epoch (the initial net if none).
    pub net: DenseNet<T>,
    /// Records of the completed epochs.
    pub history: History,
    pub error: Option<Error>,
}

fn sgd_epoch<T: Scalar>(
    net: &mut DenseNet<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    robust: Option<&RobustConfig>,
    epoch: usize,
) -> Result<()> {
    let sched = cfg.schedule;
    let lr = T::of(sched.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(sched.seed, &[purpose::SHUFFLE, epoch as u64]));
    for (b, chunk) in order.chunks(sched.batch_size).enumerate() {
        let batch = data.subset(chunk);
        let masks: Option<Vec<MaskSample<T>>> = match cfg.mask_policy {
            MaskPolicy::None => None,
            policy => Some(
                chunk
                    .iter()
                    .map(|&i| {
                        MaskSample::sample(policy, &net.spec, sched.seed, &[epoch as u64, b as u64, i as u64])
                            .expect("policy is not None")
                    })
                    .collect(),
            ),
        };
        let mut g = grad_hinge(net, &batch, masks.as_deref())?;
        if let Some(rc) = robust {
            let weight = T::of(rc.penalty_weight()) / T::of(batch.len() as f64);
            for (x, _) in batch.iter() {
                let trace = net.forward(x)?;
                let chain = jacobian_chain(net, &trace);
                backward_jacobian_frobenius(net, &trace, &chain, weight, &mut g);
            }
        }
        for (w, gw) in net.weights.iter_mut().zip(&g.weights) {
            w.scaled_add(-lr, gw);
        }
        net.project_in_place();
        if diverged(net) {
            return Err(Error::Divergence {
                epoch,
                reason: "non-finite weights after update".into(),
            });
        }
    }
    Ok(())
}

/// Projected minibatch SGD inside the max-norm class. Shuffles and masks are
/// drawn from per-epoch, per-sample streams of `schedule.seed`. On failure
/// the run keeps the last completed epoch.
pub fn train_checkpointed<T: Scalar>(net: DenseNet<T>, data: &Dataset<T>, cfg: &TrainConfig) -> TrainRun<T> {
    let mut run = TrainRun {
        net,
        history: History::default(),
        error: None,
    };
    if let Err(e) = train_into(&mut run, data, cfg) {
        run.error = Some(e);
    }
    run
}

fn train_into<T: Scalar>(run: &mut TrainRun<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    if data.dim() != run.net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: run.net.input_dim(),
            got: data.dim(),
        });
    }
    let sched = cfg.schedule;
    if sched.batch_size == 0 || !(sched.lr > 0.0) || !sched.lr.is_finite() {
        return Err(Error::Model("schedule needs batch_size ≥ 1 and a positive finite lr".into()));
    }
    let robust = match cfg.objective {
        Objective::Hinge => None,
        Objective::Robust { noise_radius } => {
            let rc = RobustConfig::for_net(&run.net, noise_radius);
            rc.check()?;
            Some(rc)
        }
    };
    let radius = data.radius().as_f64();
    for epoch in 1..=sched.epochs {
        let mut next = run.net.clone();
        sgd_epoch(&mut next, data, cfg, robust.as_ref(), epoch)?;
        let rec = epoch_record(&next, data, epoch, cfg.objective)?;
        if !rec.hinge.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "loss is not finite".into(),
            });
        }
        run.net = next;
        run.history.records.push(rec);
        if let Some(k) = cfg.margin_every.filter(|&k| k > 0) {
            if epoch % k == 0 || epoch == sched.epochs {
                let mc = RobustConfig::for_net(&run.net, 0.0);
                let report = margin_report(&run.net, data, radius, &mc)?;
                run.history.margin_reports.push((epoch, report));
            }
        }
    }
    Ok(())
}

/// [`train_checkpointed`] that discards the checkpoint on failure.
pub fn train<T: Scalar>(net: DenseNet<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<(DenseNet<T>, History)> {
    let run = train_checkpointed(net, data, cfg);
    match run.error {
        Some(e) => Err(e),
        None => Ok((run.net, run.history)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{ActivationKind, LayerSpec, NetworkSpec};
    use crate::net_engine::{empirical_hinge, init_net};
    use ndarray::array;

    fn linear(w: Array1<f64>, cap: f64) -> DenseNet<f64> {
        let d = w.len();
        let spec = NetworkSpec::new(d, vec![], cap);
        DenseNet::from_weights(spec, vec![w.insert_axis(ndarray::Axis(1))]).unwrap()
    }

    #[test]
    fn output_margin_examples() {
        let net = linear(array![3.0, 4.0], 10.0);
        assert!((output_margin(&net, array![1.0, 0.0].view()).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(output_margin(&net, array![4.0, -3.0].view()).unwrap(), 0.0);
        let scaled = linear(array![6.0, 8.0], 10.0);
        assert!((output_margin(&scaled, array![1.0, 0.0].view()).unwrap() - 0.6).abs() < 1e-15);
        let zero = linear(array![0.0, 0.0], 10.0);
        assert!(matches!(output_margin(&zero, array![1.0, 0.0].view()), Err(Error::ZeroNorm)));
    }

    #[test]
    fn linear_ray_search_is_exact() {
        let net = linear(array![1.0, 0.0], 1.0);
        let x = array![0.5, 7.0];
        let r = input_margin_upper(&net, x.view(), 8.0, 1e-9).unwrap();
        assert_eq!(r.flag, MarginFlag::Finite);
        assert!(r.hi >= 0.5 && r.hi - 0.5 <= 1e-9);
        let coarse = input_margin_upper(&net, x.view(), 8.0, 1e-4).unwrap();
        let fine = input_margin_upper(&net, x.view(), 8.0, 0.5e-4).unwrap();
        assert!((fine.width() - coarse.width() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn on_boundary_and_unbounded() {
        let net = linear(array![1.0, 0.0], 1.0);
        let r = input_margin_upper(&net, array![0.0, 1.0].view(), 1.0, 1e-6).unwrap();
        assert_eq!(r.flag, MarginFlag::OnBoundary);
        assert_eq!(r.distance, 0.0);
        let far = input_margin_upper(&net, array![5.0, 0.0].view(), 1.0, 1e-6).unwrap();
        assert_eq!(far.flag, MarginFlag::Unbounded);
        assert!(far.distance.is_infinite());
    }

    #[test]
    fn linear_certificate_equals_margin() {
        let net = linear(array![2.0, -1.0, 0.5], 3.0);
        let x = array![0.3, 0.2, -0.1];
        let cfg = RobustConfig::for_net(&net, 0.0);
        let c = input_margin_certificate(&net, x.view(), 1.0, &cfg).unwrap();
        let exact = (2.0 * 0.3 - 0.2 - 0.05f64).abs() / (4.0 + 1.0 + 0.25f64).sqrt();
        assert!((c.value - exact).abs() < 1e-12);
        assert!(c.upper.hi - c.value <= cfg.tol_for(1.0) + 1e-15);
        assert!(c.value <= c.upper.hi);
    }

    #[test]
    fn certificate_homogeneity() {
        assert_eq!(certificate_from(1.0, 2.0), 0.5);
        assert_eq!(certificate_from(1.0, 4.0), 0.25);
        assert!(certificate_from(1.0, 0.0f64).is_infinite());
    }

    #[test]
    fn robust_objective_identities() {
        let spec = NetworkSpec::new(
            3,
            vec![LayerSpec::new(5, ActivationKind::Relu, 1.5), LayerSpec::new(4, ActivationKind::Relu, 1.5)],
            2.0,
        );
        let net: DenseNet<f64> = init_net(&spec, 3).unwrap();
        let data = Dataset::from_rows(&[vec![0.2, 0.4, -0.1], vec![-0.5, 0.1, 0.3]], &[1.0, -1.0]).unwrap();
        let zero = RobustConfig::for_net(&net, 0.0);
        assert_eq!(robust_objective(&net, &data, &zero).unwrap(), empirical_hinge(&net, &data).unwrap());
        assert_eq!(robust_hinge_explicit(&net, &data, &zero).unwrap(), empirical_hinge(&net, &data).unwrap());

        let cfg = RobustConfig::for_net(&net, 0.3);
        assert_eq!(cfg.penalty_weight(), 0.3 * 2.0);
        let base = robust_objective(&net, &data, &cfg).unwrap();
        let mut half = net.clone();
        for w in &mut half.weights[..2] {
            w.mapv_inplace(|v| v * 0.5);
        }
        let pen = |n: &DenseNet<f64>| mean_jacobian_frobenius(n, &data).unwrap();
        assert!(pen(&half) < pen(&net));
        assert!(base >= robust_objective(&net, &data, &RobustConfig::for_net(&net, 0.1)).unwrap());
    }

    #[test]
    fn identity_jacobian_penalty_is_constant() {
        let net = linear(array![1.0, -1.0, 2.0, 0.0], 3.0);
        let data = Dataset::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]], &[1.0]).unwrap();
        let cfg = RobustConfig::for_net(&net, 0.5);
        let v = robust_objective(&net, &data, &cfg).unwrap();
        let h = empirical_hinge(&net, &data).unwrap();
        assert!((v - h - 0.5 * 3.0 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn linear_robust_hinge_closed_form() {
        let w = array![0.7, -1.2];
        let net = linear(w.clone(), 5.0);
        let rows = vec![vec![0.3, 0.4], vec![-1.0, 0.2], vec![2.0, 1.0]];
        let labels = [1.0, -1.0, 1.0];
        let data = Dataset::from_rows(&rows, &labels).unwrap();
        let c = 0.35;
        let cfg = RobustConfig::for_net(&net, c);
        let wn = w.dot(&w).sqrt();
        let expect: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| (1.0 - y * (w[0] * r[0] + w[1] * r[1]) + c * wn).max(0.0))
            .sum::<f64>()
            / 3.0;
        assert!((robust_hinge_explicit(&net, &data, &cfg).unwrap() - expect).abs() < 1e-12);
        assert!((robust_hinge_first_order(&net, &data, &cfg).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_training_separates_two_points() {
        let net = linear(array![0.0, 0.0], 10.0);
        let data = Dataset::from_rows(&[vec![1.0, 0.2], vec![-0.3, -1.0]], &[1.0, -1.0]).unwrap();
        let cfg = TrainConfig::new(Schedule::new(500, 0.1, 2, 1));
        let (trained, hist) = train(net, &data, &cfg).unwrap();
        assert_eq!(hist.last().unwrap().hinge, 0.0);
        assert!(trained.is_feasible());
    }

    #[test]
    fn dropout_with_unit_keep_matches_plain_training() {
        let spec = NetworkSpec::new(2, vec![LayerSpec::new(6, ActivationKind::Tanh, 2.0)], 2.0);
        let net: DenseNet<f64> = init_net(&spec, 9).unwrap();
        let data = Dataset::from_rows(
            &[vec![0.5, 0.1], vec![-0.4, 0.3], vec![0.2, -0.9], vec![-0.7, -0.2]],
            &[1.0, -1.0, 1.0, -1.0],
        )
        .unwrap();
        let mut cfg = TrainConfig::new(Schedule::new(30, 0.05, 3, 4));
        let (a, ha) = train(net.clone(), &data, &cfg).unwrap();
        cfg.mask_policy = MaskPolicy::Dropout;
        let (b, hb) = train(net.clone(), &data, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(ha, hb);
        cfg.mask_policy = MaskPolicy::None;
        let (c, _) = train(net, &data, &cfg).unwrap();
        assert_eq!(a.weights, c.weights);
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = linear(array![1.0, 1.0], 1.0);
        net.spec.output_max_norm = f64::INFINITY;
        let data = Dataset::from_rows(&[vec![1e300, 1e300]], &[-1.0]).unwrap();
        let cfg = TrainConfig::new(Schedule::new(5, 1e10, 1, 0));
        assert!(matches!(train(net.clone(), &data, &cfg), Err(Error::Divergence { .. })));
        let run = train_checkpointed(net.clone(), &data, &cfg);
        assert_eq!(run.net, net);
        assert!(run.history.records.is_empty());
    }

    #[test]
    fn report_flags_misclassified() {
        let net = linear(array![1.0, 0.0], 2.0);
        let data = Dataset::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.3]], &[1.0, -1.0]).unwrap();
        let r = margin_report(&net, &data, 1.0, &RobustConfig::for_net(&net, 0.0)).unwrap();
        assert_eq!(r.misclassified, 1);
        assert_eq!(r.samples[1].flag, MarginFlag::Misclassified);
        assert_eq!(r.samples[1].input_margin_upper, 0.0);
        assert!((r.samples[0].input_margin_certificate - 0.5).abs() < 1e-12);
    }
}
