//! Dense, bias-free feed-forward runtime.
//!
//! `weights[k]` is `W_{k,k+1}` with shape `(h_k, h_{k+1})` for `k = 0..=P`;
//! the last matrix has a single column, the output weight vector `w`.
//! Column `t` of `W_{k,k+1}` is the incoming weight vector of neuron `t` in
//! layer `k+1`, and the max-norm constraint applies to these columns.

mod data;
pub(crate) mod grad;
mod masks;
pub mod rng;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_spec::NetworkSpec;
use crate::scalar::Scalar;

pub use data::Dataset;
pub use grad::{
    empirical_01, empirical_hinge, frobenius_norm, grad_hinge, hinge_loss, jacobian,
    jacobian_frobenius, jacobian_spectral, spectral_norm, Gradient, Jacobian, JacobianTarget,
    SpectralNorm,
};
pub use masks::{MaskKind, MaskPolicy, MaskSample};

/// Slack allowed on the max-norm constraint after projection.
pub const FEASIBILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet<T> {
    pub spec: NetworkSpec,
    pub weights: Vec<Array2<T>>,
}

/// Layer-by-layer record of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// `φ_0 = x, φ_1, …, φ_P` (before any dropout mask).
    pub phis: Vec<Array1<T>>,
    /// Preactivations `z_1 … z_P`; `preacts[k-1] = z_k`.
    pub preacts: Vec<Array1<T>>,
    /// Vector multiplied into `W_{k,k+1}`: `u_k ⊙ φ_k` under dropout, else `φ_k`.
    pub layer_inputs: Vec<Array1<T>>,
    /// `φ_{P+1}(x)`, the network score.
    pub output: T,
    /// Some piecewise-linear unit sits exactly on its kink.
    pub at_kink: bool,
}

impl<T: Scalar> ForwardTrace<T> {
    /// `φ_P(x)`.
    pub fn features(&self) -> &Array1<T> {
        self.phis.last().expect("trace always holds φ_0")
    }

    /// Smallest `|z|` over units with a kink, `+∞` if there are none.
    pub fn min_kink_distance(&self, spec: &NetworkSpec) -> T {
        let mut best = T::infinity();
        for (z, layer) in self.preacts.iter().zip(&spec.hidden) {
            if layer.activation.has_kink() {
                for &v in z {
                    best = best.min(v.abs());
                }
            }
        }
        best
    }
}

impl<T: Scalar> DenseNet<T> {
    /// Build from explicit weights, checking the shape chain.
    pub fn from_weights(spec: NetworkSpec, weights: Vec<Array2<T>>) -> Result<Self> {
        spec.validate_structure()?;
        let widths = spec.widths();
        if weights.len() != widths.len() - 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} weight matrices, got {}",
                widths.len() - 1,
                weights.len()
            )));
        }
        for (k, w) in weights.iter().enumerate() {
            if w.dim() != (widths[k], widths[k + 1]) {
                return Err(Error::ShapeMismatch(format!(
                    "W_{{{k},{}}} has shape {:?}, expected ({}, {})",
                    k + 1,
                    w.dim(),
                    widths[k],
                    widths[k + 1]
                )));
            }
        }
        Ok(Self { spec, weights })
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Output weight vector `w_{P,P+1}`.
    pub fn output_weights(&self) -> ArrayView1<'_, T> {
        self.weights.last().expect("at least one layer").column(0)
    }

    fn check_input(&self, x: &ArrayView1<'_, T>) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<'_, T>) -> Result<ForwardTrace<T>> {
        self.check_input(&x)?;
        Ok(self.run(x, None))
    }

    pub fn forward_masked(
        &self,
        x: ArrayView1<'_, T>,
        mask: &MaskSample<T>,
    ) -> Result<ForwardTrace<T>> {
        self.check_input(&x)?;
        mask.check_shape(&self.spec)?;
        Ok(self.run(x, Some(mask)))
    }

    /// Network score `f(x)`.
    pub fn score(&self, x: ArrayView1<'_, T>) -> Result<T> {
        self.forward(x).map(|t| t.output)
    }

    /// `φ_P(x)`.
    pub fn features(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        self.forward(x).map(|mut t| t.phis.pop().expect("φ_0"))
    }

    pub(crate) fn run(&self, x: ArrayView1<'_, T>, mask: Option<&MaskSample<T>>) -> ForwardTrace<T> {
        let depth = self.depth();
        let mut phis = Vec::with_capacity(depth + 1);
        let mut preacts = Vec::with_capacity(depth);
        let mut layer_inputs = Vec::with_capacity(depth + 1);
        let mut at_kink = false;
        phis.push(x.to_owned());
        for k in 0..=depth {
            let phi = &phis[k];
            let input = match mask.map(|m| &m.kind) {
                Some(MaskKind::Dropout(units)) => phi * &units[k],
                _ => phi.clone(),
            };
            if k == depth {
                layer_inputs.push(input);
                break;
            }
            let z = match mask.map(|m| &m.kind) {
                Some(MaskKind::Dropconnect(u)) => input.dot(&(&self.weights[k] * &u[k])),
                _ => input.dot(&self.weights[k]),
            };
            let act = self.spec.hidden[k].activation;
            if act.has_kink() && z.iter().any(|&v| v == T::zero()) {
                at_kink = true;
            }
            let next = z.mapv(|v| act.apply(v));
            layer_inputs.push(input);
            preacts.push(z);
            phis.push(next);
        }
        let out_w = match mask.map(|m| &m.kind) {
            Some(MaskKind::Dropconnect(u)) => &self.weights[depth] * &u[depth],
            _ => self.weights[depth].clone(),
        };
        let output = layer_inputs[depth].dot(&out_w.column(0));
        ForwardTrace {
            phis,
            preacts,
            layer_inputs,
            output,
            at_kink,
        }
    }

    /// Rescale every incoming weight vector whose norm exceeds its cap onto
    /// the cap; all other columns are left untouched.
    pub fn max_norm_project(&self) -> Self {
        let mut out = self.clone();
        out.project_in_place();
        out
    }

    pub fn project_in_place(&mut self) {
        for k in 0..self.weights.len() {
            let cap = T::of(self.spec.max_norm_into(k + 1));
            for mut col in self.weights[k].axis_iter_mut(Axis(1)) {
                let norm = col.dot(&col).sqrt();
                if norm > cap {
                    let scale = cap / norm;
                    col.mapv_inplace(|v| v * scale);
                }
            }
        }
    }

    /// Largest `‖w^t‖₂ / A` over all neurons.
    pub fn max_norm_ratio(&self) -> T {
        let mut worst = T::zero();
        for (k, w) in self.weights.iter().enumerate() {
            let cap = T::of(self.spec.max_norm_into(k + 1));
            for col in w.axis_iter(Axis(1)) {
                worst = worst.max(col.dot(&col).sqrt() / cap);
            }
        }
        worst
    }

    /// Every incoming vector satisfies `‖w^t‖₂ ≤ A + slack`.
    pub fn is_feasible(&self) -> bool {
        self.weights.iter().enumerate().all(|(k, w)| {
            let cap = T::of(self.spec.max_norm_into(k + 1) + FEASIBILITY_SLACK);
            w.axis_iter(Axis(1)).all(|c| c.dot(&c).sqrt() <= cap)
        })
    }
}

/// Random feasible network: entries uniform in `[−a, a]` with
/// `a = A_k / √h_{k−1}`, then max-norm projected.
pub fn init_net<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<DenseNet<T>> {
    spec.validate_structure()?;
    let widths = spec.widths();
    let weights = (0..widths.len() - 1)
        .map(|k| {
            let (rows, cols) = (widths[k], widths[k + 1]);
            let a = spec.max_norm_into(k + 1) / (rows as f64).sqrt();
            let mut rng = rng::stream_rng(seed, &[rng::purpose::INIT, k as u64]);
            Array2::from_shape_fn((rows, cols), |_| T::of(rng.gen_range(-a..=a)))
        })
        .collect();
    let mut net = DenseNet {
        spec: spec.clone(),
        weights,
    };
    net.project_in_place();
    Ok(net)
}
