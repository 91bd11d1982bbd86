//! Radius-margin VC-dimension upper bounds.
//!
//! Every bound is a product of nonnegative factors. A [`BoundReport`] keeps the
//! factors in evaluation order so the value can be audited term by term. The
//! per-layer Lipschitz constants enter individually (`L_1² … L_P²`), which
//! coincides with `L^{2P}` when all hidden layers share one activation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_spec::{validate, DataStats, LayerSpec, NetworkSpec, ResNetSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Theorem {
    /// Plain max-norm network.
    T1,
    /// Uniform hidden width `h`.
    T1FixedWidth,
    T2Dropout,
    T3Dropconnect,
    T4Resnet,
    /// Inputs perturbed by noise of norm at most `c`.
    T5Robust,
}

impl Theorem {
    pub fn label(&self) -> &'static str {
        match self {
            Theorem::T1 => "T1",
            Theorem::T1FixedWidth => "T1_fixed_width",
            Theorem::T2Dropout => "T2_dropout",
            Theorem::T3Dropconnect => "T3_dropconnect",
            Theorem::T4Resnet => "T4_resnet",
            Theorem::T5Robust => "T5_robust",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor<T> {
    pub label: String,
    pub value: T,
}

/// A computed bound with its multiplicative breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport<T> {
    pub theorem: Theorem,
    /// The bound before flooring. Infinite if the product overflowed.
    pub value: T,
    /// `floor(value)`, saturating at `u64::MAX`.
    pub value_floor: u64,
    /// `log10(value)`, always finite for positive factors.
    pub log10_value: f64,
    /// True when the product left the representable range and was
    /// recomputed in log space.
    pub saturated: bool,
    pub factors: Vec<Factor<T>>,
}

impl<T: Scalar> BoundReport<T> {
    /// Product of the factors, recomputed in evaluation order.
    pub fn factor_product(&self) -> T {
        self.factors.iter().fold(T::one(), |acc, f| acc * f.value)
    }
}

struct FactorChain<T> {
    factors: Vec<Factor<T>>,
}

impl<T: Scalar> FactorChain<T> {
    fn new() -> Self {
        Self {
            factors: Vec::new(),
        }
    }

    fn push(&mut self, label: impl Into<String>, value: T) -> &mut Self {
        self.factors.push(Factor {
            label: label.into(),
            value,
        });
        self
    }

    fn finish(self, theorem: Theorem) -> BoundReport<T> {
        let mut value = T::one();
        let mut saturated = false;
        let limit = T::of(T::SATURATION);
        for f in &self.factors {
            value = value * f.value;
            if value.abs() > limit {
                saturated = true;
            }
        }
        let log10_value: f64 = self
            .factors
            .iter()
            .map(|f| f.value.as_f64().log10())
            .sum();
        if saturated {
            let ln: f64 = self.factors.iter().map(|f| f.value.as_f64().ln()).sum();
            value = T::of(ln.exp());
        }
        let v = value.as_f64();
        let value_floor = if v.is_finite() && v < u64::MAX as f64 {
            v.floor().max(0.0) as u64
        } else {
            u64::MAX
        };
        BoundReport {
            theorem,
            value,
            value_floor,
            log10_value,
            saturated,
            factors: self.factors,
        }
    }
}

fn checked(spec: &NetworkSpec, data: &DataStats) -> Result<()> {
    validate(spec)?;
    data.validate()
}

fn sq<T: Scalar>(x: f64) -> T {
    let x = T::of(x);
    x * x
}

/// Which keep probabilities multiply into the hidden-layer factors.
#[derive(Clone, Copy)]
enum Keep {
    None,
    Dropout,
    Dropconnect,
}

fn push_hidden<T: Scalar>(chain: &mut FactorChain<T>, layers: &[LayerSpec], keep: Keep) {
    for (i, layer) in layers.iter().enumerate() {
        let k = i + 1;
        chain.push(format!("L_{k}^2"), sq(layer.activation.lipschitz()));
        match keep {
            Keep::None => {}
            Keep::Dropout => {
                chain.push(format!("p_{k}"), T::of(layer.keep_prob));
            }
            Keep::Dropconnect => {
                chain.push(format!("p_{{{k},{}}}", k + 1), T::of(layer.dc_keep_prob));
            }
        }
        chain.push(format!("h_{k}"), T::of(layer.width as f64));
        chain.push(format!("A_{k}^2"), sq(layer.max_norm));
    }
}

fn mlp_chain<T: Scalar>(
    spec: &NetworkSpec,
    radius_sq: (String, T),
    keep: Keep,
) -> FactorChain<T> {
    let mut chain = FactorChain::new();
    chain.push(radius_sq.0, radius_sq.1);
    match keep {
        Keep::None => {}
        Keep::Dropout => {
            chain.push("p_0", T::of(spec.input_keep_prob));
        }
        Keep::Dropconnect => {
            chain.push("p_{0,1}", T::of(spec.input_dc_keep_prob));
        }
    }
    chain.push("A_out^2", sq(spec.output_max_norm));
    push_hidden(&mut chain, &spec.hidden, keep);
    chain
}

/// `R² A²_{P+1} ∏_k L_k² h_k A_k²`.
pub fn vc_bound_mlp<T: Scalar>(spec: &NetworkSpec, data: &DataStats) -> Result<BoundReport<T>> {
    checked(spec, data)?;
    Ok(mlp_chain(spec, ("R^2".into(), sq(data.radius)), Keep::None).finish(Theorem::T1))
}

/// Uniform-width form `R² A²_{P+1} L^{2P} h^P ∏ A_k²`; `max_norms` lists
/// `A_1 … A_P` followed by `A_{P+1}`.
pub fn vc_bound_fixed_width<T: Scalar>(
    depth: usize,
    width: usize,
    max_norms: &[f64],
    lipschitz: f64,
    radius: f64,
) -> Result<BoundReport<T>> {
    if max_norms.len() != depth + 1 {
        return Err(Error::LengthMismatch {
            expected: depth + 1,
            got: max_norms.len(),
        });
    }
    if width < 1 {
        return Err(Error::Invalid(vec![crate::error::Diagnostic::new(
            "width",
            "width must be >= 1",
        )]));
    }
    let mut chain = FactorChain::new();
    chain.push("R^2", sq(radius));
    chain.push("A_out^2", sq(max_norms[depth]));
    for (i, &a) in max_norms[..depth].iter().enumerate() {
        let k = i + 1;
        chain.push(format!("L_{k}^2"), sq(lipschitz));
        chain.push(format!("h_{k}"), T::of(width as f64));
        chain.push(format!("A_{k}^2"), sq(a));
    }
    Ok(chain.finish(Theorem::T1FixedWidth))
}

/// Dropout on the input and every hidden layer:
/// `p_0 R² A²_{P+1} ∏ L_k² p_k h_k A_k²`.
pub fn vc_bound_dropout<T: Scalar>(
    spec: &NetworkSpec,
    data: &DataStats,
) -> Result<BoundReport<T>> {
    checked(spec, data)?;
    Ok(mlp_chain(spec, ("R^2".into(), sq(data.radius)), Keep::Dropout).finish(Theorem::T2Dropout))
}

/// Dropconnect on every weight matrix:
/// `p_{0,1} R² A²_{P+1} ∏ L_k² p_{k,k+1} h_k A_k²`.
pub fn vc_bound_dropconnect<T: Scalar>(
    spec: &NetworkSpec,
    data: &DataStats,
) -> Result<BoundReport<T>> {
    checked(spec, data)?;
    Ok(
        mlp_chain(spec, ("R^2".into(), sq(data.radius)), Keep::Dropconnect)
            .finish(Theorem::T3Dropconnect),
    )
}

/// Input-noise robust class: the [`vc_bound_mlp`] product with `R²` replaced by `R² + c²`.
pub fn vc_bound_robust<T: Scalar>(spec: &NetworkSpec, data: &DataStats) -> Result<BoundReport<T>> {
    checked(spec, data)?;
    let r2 = sq::<T>(data.radius) + sq::<T>(data.noise_radius);
    Ok(mlp_chain(spec, ("R^2+c^2".into(), r2), Keep::None).finish(Theorem::T5Robust))
}

/// Residual network bound:
/// `R² A²_{P+1} (∏ L_k² p_k h_k A_k²) (A_0 N_0 v_0²) ∏_r (A_r N_r v_r²)^{3T'} L^{4T'} p_r^{T'}`.
pub fn vc_bound_resnet<T: Scalar>(
    rspec: &ResNetSpec,
    data: &DataStats,
) -> Result<BoundReport<T>> {
    rspec.validate()?;
    data.validate()?;
    let mut chain = FactorChain::new();
    chain.push("R^2", sq(data.radius));
    chain.push("A_out^2", sq(rspec.output_max_norm));
    push_hidden(&mut chain, &rspec.fc_tail, Keep::Dropout);
    chain.push("A_0", T::of(rspec.stem.max_norm));
    chain.push("N_0", T::of(rspec.stem.filters as f64));
    chain.push("v_0^2", sq(rspec.stem.filter_size as f64));
    let lip = T::of(rspec.activation.lipschitz());
    for (i, b) in rspec.blocks.iter().enumerate() {
        let r = i + 1;
        let units = b.units as i32;
        let base = T::of(b.max_norm) * T::of(b.filters as f64) * sq::<T>(b.filter_size as f64);
        chain.push(format!("(A_{r} N_{r} v_{r}^2)^{}", 3 * units), base.powi(3 * units));
        chain.push(format!("L^{}", 4 * units), lip.powi(4 * units));
        chain.push(format!("p_{r}^{units}"), T::of(b.keep_prob).powi(units));
    }
    Ok(chain.finish(Theorem::T4Resnet))
}

/// Bound on the squared feature radius `max_i ‖φ_P(x_i)‖²`:
/// `R² ∏ L_k² h_k A_k²`, times `p_0 … p_P` when keep probabilities are given.
///
/// `keep_probs`, if present, lists `p_0, …, p_P`.
pub fn feature_radius_bound<T: Scalar>(
    spec: &NetworkSpec,
    data: &DataStats,
    keep_probs: Option<&[f64]>,
) -> Result<T> {
    checked(spec, data)?;
    let depth = spec.depth();
    if let Some(p) = keep_probs {
        if p.len() != depth + 1 {
            return Err(Error::LengthMismatch {
                expected: depth + 1,
                got: p.len(),
            });
        }
    }
    let mut r = sq::<T>(data.radius);
    if let Some(p) = keep_probs {
        r = r * T::of(p[0]);
    }
    for (i, layer) in spec.hidden.iter().enumerate() {
        r = r * sq::<T>(layer.activation.lipschitz());
        if let Some(p) = keep_probs {
            r = r * T::of(p[i + 1]);
        }
        r = r * T::of(layer.width as f64) * sq::<T>(layer.max_norm);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{ActivationKind, ConvStem, ResBlock};
    use proptest::prelude::*;

    fn relu(width: usize, a: f64) -> LayerSpec {
        LayerSpec::new(width, ActivationKind::Relu, a)
    }

    fn p2_spec() -> NetworkSpec {
        NetworkSpec::new(2, vec![relu(2, 1.0), relu(2, 1.0)], 1.0)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn mlp_bound_examples() {
        let r: BoundReport<f64> =
            vc_bound_mlp(&NetworkSpec::new(3, vec![], 1.0), &DataStats::new(1.0)).unwrap();
        assert_eq!(r.value, 1.0);
        let r: BoundReport<f64> = vc_bound_mlp(&p2_spec(), &DataStats::new(1.0)).unwrap();
        assert_eq!(r.value, 4.0);
        assert_eq!(r.value_floor, 4);
        assert_eq!(r.factor_product(), r.value);
    }

    #[test]
    fn sigmoid_hidden_layer_rejected_by_mlp_bound() {
        let spec = NetworkSpec::new(2, vec![LayerSpec::new(4, ActivationKind::Sigmoid, 2.0)], 3.0);
        assert!(vc_bound_mlp::<f64>(&spec, &DataStats::new(2.0)).is_err());
    }

    #[test]
    fn fixed_width_examples() {
        let r: BoundReport<f64> = vc_bound_fixed_width(3, 1, &[1.0; 4], 1.0, 1.0).unwrap();
        assert_eq!(r.value, 1.0);
        let r: BoundReport<f64> = vc_bound_fixed_width(2, 2, &[1.0; 3], 1.0, 1.0).unwrap();
        assert_eq!(r.value, 4.0);
        let r: BoundReport<f64> = vc_bound_fixed_width(1, 10, &[0.1, 1.0], 1.0, 1.0).unwrap();
        assert!(close(r.value, 0.1));
        // 4 * 9 * (1/16) * (4 * 4)
        let r: BoundReport<f64> = vc_bound_fixed_width(1, 4, &[2.0, 3.0], 0.25, 2.0).unwrap();
        assert_eq!(r.value, 36.0);
        assert!(matches!(
            vc_bound_fixed_width::<f64>(2, 2, &[1.0; 2], 1.0, 1.0),
            Err(Error::LengthMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn dropout_examples() {
        let data = DataStats::new(1.0);
        let mut spec = p2_spec();
        let plain: BoundReport<f64> = vc_bound_mlp(&spec, &data).unwrap();
        let d: BoundReport<f64> = vc_bound_dropout(&spec, &data).unwrap();
        assert_eq!(plain.value.to_bits(), d.value.to_bits());
        spec.input_keep_prob = 0.5;
        spec.hidden[0].keep_prob = 0.5;
        spec.hidden[1].keep_prob = 0.5;
        assert_eq!(vc_bound_dropout::<f64>(&spec, &data).unwrap().value, 0.5);

        let mut lin = NetworkSpec::new(2, vec![], 1.0);
        lin.input_keep_prob = 0.8;
        assert_eq!(vc_bound_dropout::<f64>(&lin, &data).unwrap().value, 0.8);
    }

    #[test]
    fn dropconnect_examples() {
        let data = DataStats::new(1.0);
        let mut spec = p2_spec();
        assert_eq!(vc_bound_dropconnect::<f64>(&spec, &data).unwrap().value, 4.0);
        spec.input_dc_keep_prob = 0.5;
        spec.hidden.iter_mut().for_each(|l| l.dc_keep_prob = 0.5);
        assert_eq!(vc_bound_dropconnect::<f64>(&spec, &data).unwrap().value, 0.5);
    }

    #[test]
    fn robust_examples() {
        let lin = NetworkSpec::new(2, vec![], 1.0);
        let data = DataStats::new(1.0).with_noise(1.0);
        assert_eq!(vc_bound_robust::<f64>(&lin, &data).unwrap().value, 2.0);
        assert_eq!(vc_bound_robust::<f64>(&p2_spec(), &data).unwrap().value, 8.0);
        let clean = DataStats::new(1.0);
        assert_eq!(
            vc_bound_robust::<f64>(&p2_spec(), &clean).unwrap().value.to_bits(),
            vc_bound_mlp::<f64>(&p2_spec(), &clean).unwrap().value.to_bits()
        );
    }

    fn unit_resnet(units: usize) -> ResNetSpec {
        ResNetSpec {
            stem: ConvStem {
                max_norm: 1.0,
                filters: 2,
                filter_size: 1,
            },
            blocks: vec![ResBlock {
                units,
                max_norm: 1.0,
                filters: 2,
                filter_size: 1,
                stride: 1,
                keep_prob: 0.5,
            }],
            activation: ActivationKind::Relu,
            fc_tail: vec![relu(2, 1.0)],
            output_max_norm: 1.0,
        }
    }

    #[test]
    fn resnet_examples() {
        let data = DataStats::new(1.0);
        let r: BoundReport<f64> = vc_bound_resnet(&unit_resnet(1), &data).unwrap();
        assert_eq!(r.value, 16.0);

        let mut ones = unit_resnet(3);
        ones.stem.filters = 1;
        ones.blocks[0].filters = 1;
        ones.blocks[0].keep_prob = 1.0;
        ones.fc_tail = vec![relu(1, 1.0); 2];
        assert_eq!(vc_bound_resnet::<f64>(&ones, &data).unwrap().value, 1.0);

        for units in 1..=3 {
            let base = unit_resnet(units);
            let mut wide = base.clone();
            wide.blocks[0].filter_size = 2;
            let a = vc_bound_resnet::<f64>(&base, &data).unwrap().value;
            let b = vc_bound_resnet::<f64>(&wide, &data).unwrap().value;
            assert_eq!(b / a, 4f64.powi(3 * units as i32));
        }
    }

    #[test]
    fn feature_radius_examples() {
        let data = DataStats::new(1.5);
        let lin = NetworkSpec::new(2, vec![], 1.0);
        assert_eq!(feature_radius_bound::<f64>(&lin, &data, None).unwrap(), 2.25);
        let d1 = DataStats::new(1.0);
        assert_eq!(feature_radius_bound::<f64>(&p2_spec(), &d1, None).unwrap(), 4.0);
        assert_eq!(
            feature_radius_bound::<f64>(&p2_spec(), &d1, Some(&[0.5, 0.5, 0.5])).unwrap(),
            0.5
        );
    }

    #[test]
    fn f32_matches_f64_on_small_examples() {
        let r: BoundReport<f32> = vc_bound_mlp(&p2_spec(), &DataStats::new(1.0)).unwrap();
        assert_eq!(r.value, 4.0f32);
    }

    #[test]
    fn overflow_switches_to_log_space() {
        let spec = NetworkSpec::new(2, vec![relu(1000, 1e20); 10], 1.0);
        let r: BoundReport<f64> = vc_bound_mlp(&spec, &DataStats::new(1.0)).unwrap();
        assert!(r.saturated);
        assert!(r.value.is_infinite());
        assert_eq!(r.value_floor, u64::MAX);
        assert!((r.log10_value - 10.0 * (3.0 + 40.0)).abs() < 1e-9);
    }

    #[test]
    fn depth_effect() {
        let data = DataStats::new(1.0);
        let base = p2_spec();
        let before = vc_bound_mlp::<f64>(&base, &data).unwrap().value;
        let mut shrink = base.clone();
        shrink.hidden.push(relu(2, 0.5)); // h A^2 = 0.5
        assert!(vc_bound_mlp::<f64>(&shrink, &data).unwrap().value < before);
        let mut grow = base.clone();
        grow.hidden.push(relu(3, 1.0)); // h A^2 = 3
        assert!(vc_bound_mlp::<f64>(&grow, &data).unwrap().value > before);
    }

    fn arb_spec() -> impl Strategy<Value = NetworkSpec> {
        let layer = (1usize..16, 0.05f64..4.0, 0.05f64..=1.0, 0.05f64..=1.0, 0usize..3).prop_map(
            |(w, a, p, q, act)| {
                let activation = match act {
                    0 => ActivationKind::Relu,
                    1 => ActivationKind::Tanh,
                    _ => ActivationKind::leaky_relu(),
                };
                LayerSpec::new(w, activation, a).with_keep_prob(p).with_dc_keep_prob(q)
            },
        );
        (1usize..8, prop::collection::vec(layer, 0..5), 0.05f64..4.0, 0.05f64..=1.0, 0.05f64..=1.0)
            .prop_map(|(d, hidden, out, p0, q0)| NetworkSpec {
                input_dim: d,
                input_keep_prob: p0,
                input_dc_keep_prob: q0,
                hidden,
                output_max_norm: out,
            })
    }

    proptest! {
        #[test]
        fn factor_product_reproduces_value(spec in arb_spec(), r in 0.01f64..10.0, c in 0.0f64..3.0) {
            let data = DataStats::new(r).with_noise(c);
            for rep in [
                vc_bound_mlp::<f64>(&spec, &data).unwrap(),
                vc_bound_dropout::<f64>(&spec, &data).unwrap(),
                vc_bound_dropconnect::<f64>(&spec, &data).unwrap(),
                vc_bound_robust::<f64>(&spec, &data).unwrap(),
            ] {
                let prod = rep.factors.iter().fold(1.0, |a, f| a * f.value);
                prop_assert!((prod - rep.value).abs() <= 1e-12 * rep.value.abs());
                prop_assert_eq!(rep.value_floor, rep.value.floor() as u64);
            }
        }

        #[test]
        fn feature_radius_times_output_norm_is_the_bound(spec in arb_spec(), r in 0.01f64..10.0) {
            let data = DataStats::new(r);
            let bound = vc_bound_mlp::<f64>(&spec, &data).unwrap().value;
            let radius = feature_radius_bound::<f64>(&spec, &data, None).unwrap();
            let a2 = spec.output_max_norm * spec.output_max_norm;
            prop_assert!(close(radius * a2, bound));
        }

        #[test]
        fn dropconnect_equals_dropout_when_probabilities_agree(spec in arb_spec(), r in 0.01f64..10.0) {
            let mut s = spec.clone();
            s.input_dc_keep_prob = s.input_keep_prob;
            for l in &mut s.hidden { l.dc_keep_prob = l.keep_prob; }
            let data = DataStats::new(r);
            prop_assert_eq!(
                vc_bound_dropout::<f64>(&s, &data).unwrap().value.to_bits(),
                vc_bound_dropconnect::<f64>(&s, &data).unwrap().value.to_bits()
            );
        }
    }
}
