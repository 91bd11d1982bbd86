//! Declarative architecture descriptions and data statistics.
//!
//! Every network here is bias-free: the hypothesis class maps the origin to
//! the origin, which is what lets the norm recursion in the capacity bounds
//! go through. Weight `W_k` (k = 1..=P+1) has shape `(h_{k-1}, h_k)` and its
//! column `t` is the incoming weight vector of neuron `t` in layer `k`.

mod config;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Result};
use crate::scalar::Scalar;

pub use config::{
    network_spec_to_text, parse_network_spec, parse_resnet_spec, parse_spec_document,
    resnet_spec_to_text, SpecDocument,
};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Elementwise activation of a hidden layer. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

impl ActivationKind {
    pub fn leaky_relu() -> Self {
        ActivationKind::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu { .. } => "leaky_relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
        }
    }

    pub fn lipschitz(&self) -> f64 {
        lipschitz_constant(*self)
    }

    /// `σ(0) = 0`.
    pub fn passes_through_origin(&self) -> bool {
        !matches!(self, ActivationKind::Sigmoid)
    }

    /// Piecewise-linear activations have a kink at zero.
    pub fn has_kink(&self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::LeakyRelu { .. })
    }

    #[inline]
    pub fn apply<T: Scalar>(&self, z: T) -> T {
        match *self {
            ActivationKind::Relu => {
                if z > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if z > T::zero() {
                    z
                } else {
                    T::of(slope) * z
                }
            }
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    /// First derivative; the subderivative at a relu kink is 0.
    #[inline]
    pub fn derivative<T: Scalar>(&self, z: T) -> T {
        match *self {
            ActivationKind::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if z > T::zero() {
                    T::one()
                } else if z < T::zero() {
                    T::of(slope)
                } else {
                    T::zero()
                }
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
            ActivationKind::Sigmoid => {
                let s = self.apply(z);
                s * (T::one() - s)
            }
        }
    }

    /// Second derivative; zero for piecewise-linear activations.
    #[inline]
    pub fn second_derivative<T: Scalar>(&self, z: T) -> T {
        match *self {
            ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => T::zero(),
            ActivationKind::Tanh => {
                let t = z.tanh();
                -T::of(2.0) * t * (T::one() - t * t)
            }
            ActivationKind::Sigmoid => {
                let s = self.apply(z);
                s * (T::one() - s) * (T::one() - T::of(2.0) * s)
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::LeakyRelu { slope } => write!(f, "leaky_relu({slope})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Lipschitz constant of an activation: 1 for relu and tanh, `max(1, slope)`
/// for leaky relu, 1/4 for sigmoid.
pub fn lipschitz_constant(a: ActivationKind) -> f64 {
    match a {
        ActivationKind::Relu | ActivationKind::Tanh => 1.0,
        ActivationKind::LeakyRelu { slope } => slope.abs().max(1.0),
        ActivationKind::Sigmoid => 0.25,
    }
}

/// One hidden layer: width `h_k`, max-norm `A_k` and keep probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: ActivationKind,
    pub max_norm: f64,
    pub keep_prob: f64,
    pub dc_keep_prob: f64,
}

impl LayerSpec {
    pub fn new(width: usize, activation: ActivationKind, max_norm: f64) -> Self {
        Self {
            width,
            activation,
            max_norm,
            keep_prob: 1.0,
            dc_keep_prob: 1.0,
        }
    }

    pub fn with_keep_prob(mut self, p: f64) -> Self {
        self.keep_prob = p;
        self
    }

    pub fn with_dc_keep_prob(mut self, p: f64) -> Self {
        self.dc_keep_prob = p;
        self
    }

    fn check(&self, path: &str, out: &mut Vec<Diagnostic>) {
        if self.width < 1 {
            out.push(Diagnostic::new(format!("{path}.width"), "width must be >= 1"));
        }
        check_positive(&format!("{path}.max_norm"), "max_norm", self.max_norm, out);
        check_prob(&format!("{path}.keep_prob"), self.keep_prob, out);
        check_prob(&format!("{path}.dc_keep_prob"), self.dc_keep_prob, out);
        if let ActivationKind::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                out.push(Diagnostic::new(
                    format!("{path}.slope"),
                    "leaky relu slope must be finite",
                ));
            }
        }
    }
}

/// Fully connected, bias-free network with a single linear output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub input_keep_prob: f64,
    pub input_dc_keep_prob: f64,
    pub hidden: Vec<LayerSpec>,
    pub output_max_norm: f64,
}

impl NetworkSpec {
    /// Spec with no dropout or dropconnect anywhere.
    pub fn new(input_dim: usize, hidden: Vec<LayerSpec>, output_max_norm: f64) -> Self {
        Self {
            input_dim,
            input_keep_prob: 1.0,
            input_dc_keep_prob: 1.0,
            hidden,
            output_max_norm,
        }
    }

    /// `P`, the number of hidden layers.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// `(h_0, h_1, ..., h_P, 1)`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(self.hidden.iter().map(|l| l.width));
        w.push(1);
        w
    }

    /// Max-norm of the weights feeding layer `k` for `k = 1..=P+1`.
    pub fn max_norm_into(&self, k: usize) -> f64 {
        if k == self.hidden.len() + 1 {
            self.output_max_norm
        } else {
            self.hidden[k - 1].max_norm
        }
    }

    /// Dropout keep probability applied to the output of layer `k`, `k = 0..=P`.
    pub fn keep_prob_of(&self, k: usize) -> f64 {
        if k == 0 {
            self.input_keep_prob
        } else {
            self.hidden[k - 1].keep_prob
        }
    }

    /// Dropconnect keep probability of `W_{k,k+1}`, `k = 0..=P`.
    pub fn dc_keep_prob_of(&self, k: usize) -> f64 {
        if k == 0 {
            self.input_dc_keep_prob
        } else {
            self.hidden[k - 1].dc_keep_prob
        }
    }

    pub fn uses_dropout(&self) -> bool {
        (0..=self.depth()).any(|k| self.keep_prob_of(k) < 1.0)
    }

    pub fn uses_dropconnect(&self) -> bool {
        (0..=self.depth()).any(|k| self.dc_keep_prob_of(k) < 1.0)
    }

    /// Structural checks only: widths, norms, probabilities.
    pub fn structural_diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.input_dim < 1 {
            out.push(Diagnostic::new("input_dim", "input_dim must be >= 1"));
        }
        check_prob("input_keep_prob", self.input_keep_prob, &mut out);
        check_prob("input_dc_keep_prob", self.input_dc_keep_prob, &mut out);
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.check(&format!("layer[{i}]"), &mut out);
        }
        check_positive("output_max_norm", "output_max_norm", self.output_max_norm, &mut out);
        out
    }

    pub fn validate_structure(&self) -> Result<()> {
        into_result(self.structural_diagnostics())
    }
}

/// Validate a network spec for use with the capacity bounds: all structural
/// invariants plus the origin-passing requirement on every hidden activation.
pub fn validate(spec: &NetworkSpec) -> Result<()> {
    let mut out = spec.structural_diagnostics();
    for (i, layer) in spec.hidden.iter().enumerate() {
        check_origin(&format!("layer[{i}].activation"), layer.activation, &mut out);
    }
    into_result(out)
}

/// Stem convolution of a residual network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvStem {
    pub max_norm: f64,
    pub filters: usize,
    pub filter_size: usize,
}

/// One residual block: `units` residual units sharing filters and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub units: usize,
    pub max_norm: f64,
    pub filters: usize,
    pub filter_size: usize,
    /// Stored for completeness; the capacity bound does not depend on it.
    pub stride: usize,
    pub keep_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub stem: ConvStem,
    pub blocks: Vec<ResBlock>,
    pub activation: ActivationKind,
    pub fc_tail: Vec<LayerSpec>,
    pub output_max_norm: f64,
}

impl ResNetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut out = Vec::new();
        check_positive("stem.max_norm", "max_norm", self.stem.max_norm, &mut out);
        if self.stem.filters < 1 {
            out.push(Diagnostic::new("stem.filters", "filters must be >= 1"));
        }
        if self.stem.filter_size < 1 {
            out.push(Diagnostic::new("stem.filter_size", "filter_size must be >= 1"));
        }
        if self.blocks.is_empty() {
            out.push(Diagnostic::new("block", "T ≥ 1 required"));
        }
        for (r, b) in self.blocks.iter().enumerate() {
            let path = format!("block[{r}]");
            if b.units < 1 {
                out.push(Diagnostic::new(format!("{path}.units"), "T' ≥ 1 required"));
            }
            check_positive(&format!("{path}.max_norm"), "max_norm", b.max_norm, &mut out);
            if b.filters < 1 {
                out.push(Diagnostic::new(format!("{path}.filters"), "filters must be >= 1"));
            }
            if b.filter_size < 1 {
                out.push(Diagnostic::new(
                    format!("{path}.filter_size"),
                    "filter_size must be >= 1",
                ));
            }
            if b.stride < 1 {
                out.push(Diagnostic::new(format!("{path}.stride"), "stride must be >= 1"));
            }
            check_prob(&format!("{path}.keep_prob"), b.keep_prob, &mut out);
        }
        check_origin("activation", self.activation, &mut out);
        for (i, layer) in self.fc_tail.iter().enumerate() {
            let path = format!("fc[{i}]");
            layer.check(&path, &mut out);
            check_origin(&format!("{path}.activation"), layer.activation, &mut out);
        }
        check_positive("output_max_norm", "output_max_norm", self.output_max_norm, &mut out);
        into_result(out)
    }
}

/// Data radius `R` and admissible input noise radius `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub radius: f64,
    pub noise_radius: f64,
}

impl DataStats {
    pub fn new(radius: f64) -> Self {
        Self {
            radius,
            noise_radius: 0.0,
        }
    }

    pub fn with_noise(mut self, c: f64) -> Self {
        self.noise_radius = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut out = Vec::new();
        check_positive("data.radius", "radius", self.radius, &mut out);
        if !(self.noise_radius >= 0.0 && self.noise_radius.is_finite()) {
            out.push(Diagnostic::new(
                "data.noise_radius",
                "noise radius must be finite and >= 0",
            ));
        }
        into_result(out)
    }
}

/// Output margin `γ = 1 / ‖w_{P,P+1}‖₂` of a margin-1 shattering.
pub fn output_margin_gamma(output_weight_norm: f64) -> Result<f64> {
    if !(output_weight_norm > 0.0) || !output_weight_norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(1.0 / output_weight_norm)
}

fn into_result(diags: Vec<Diagnostic>) -> Result<()> {
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(diags))
    }
}

fn check_prob(path: &str, p: f64, out: &mut Vec<Diagnostic>) {
    if !(p > 0.0 && p <= 1.0) {
        out.push(Diagnostic::new(path, "keep probability must be in (0,1]"));
    }
}

fn check_positive(path: &str, what: &str, x: f64, out: &mut Vec<Diagnostic>) {
    if !(x > 0.0 && x.is_finite()) {
        out.push(Diagnostic::new(path, format!("{what} must be finite and > 0")));
    }
}

fn check_origin(path: &str, a: ActivationKind, out: &mut Vec<Diagnostic>) {
    if !a.passes_through_origin() {
        out.push(Diagnostic::new(
            path,
            format!(
                "{} does not pass through the origin (σ(0) ≠ 0); hidden activations must satisfy σ(0) = 0",
                a.name()
            ),
        ));
    }
}
