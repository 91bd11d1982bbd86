use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::{purpose, stream_rng};
use crate::error::{Error, Result};
use crate::model_spec::NetworkSpec;
use crate::scalar::Scalar;

/// Which Bernoulli masks, if any, training samples per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    #[default]
    None,
    Dropout,
    Dropconnect,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind<T> {
    /// `u_0 … u_P`, one 0/1 vector per layer output.
    Dropout(Vec<Array1<T>>),
    /// `U_{0,1} … U_{P,P+1}`, shaped like the weights.
    Dropconnect(Vec<Array2<T>>),
}

/// One draw of Bernoulli keep-masks for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample<T> {
    pub kind: MaskKind<T>,
    pub seed: u64,
}

fn bernoulli<T: Scalar, R: Rng>(rng: &mut R, p: f64) -> T {
    if rng.gen::<f64>() < p {
        T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> MaskSample<T> {
    /// Dropout masks with keep probability `p_k` on the output of layer `k`.
    pub fn dropout(spec: &NetworkSpec, seed: u64, stream: &[u64]) -> Self {
        let widths = spec.widths();
        let units = (0..=spec.depth())
            .map(|k| {
                let mut rng = stream_rng(seed, &layer_key(stream, k));
                let p = spec.keep_prob_of(k);
                Array1::from_shape_fn(widths[k], |_| bernoulli(&mut rng, p))
            })
            .collect();
        Self {
            kind: MaskKind::Dropout(units),
            seed,
        }
    }

    /// Dropconnect masks with keep probability `p_{k,k+1}` on `W_{k,k+1}`.
    pub fn dropconnect(spec: &NetworkSpec, seed: u64, stream: &[u64]) -> Self {
        let widths = spec.widths();
        let weights = (0..=spec.depth())
            .map(|k| {
                let mut rng = stream_rng(seed, &layer_key(stream, k));
                let p = spec.dc_keep_prob_of(k);
                Array2::from_shape_fn((widths[k], widths[k + 1]), |_| bernoulli(&mut rng, p))
            })
            .collect();
        Self {
            kind: MaskKind::Dropconnect(weights),
            seed,
        }
    }

    pub fn sample(policy: MaskPolicy, spec: &NetworkSpec, seed: u64, stream: &[u64]) -> Option<Self> {
        match policy {
            MaskPolicy::None => None,
            MaskPolicy::Dropout => Some(Self::dropout(spec, seed, stream)),
            MaskPolicy::Dropconnect => Some(Self::dropconnect(spec, seed, stream)),
        }
    }

    /// Masks that keep everything.
    pub fn ones(policy: MaskPolicy, spec: &NetworkSpec) -> Option<Self> {
        let widths = spec.widths();
        let kind = match policy {
            MaskPolicy::None => return None,
            MaskPolicy::Dropout => MaskKind::Dropout(
                (0..=spec.depth()).map(|k| Array1::ones(widths[k])).collect(),
            ),
            MaskPolicy::Dropconnect => MaskKind::Dropconnect(
                (0..=spec.depth())
                    .map(|k| Array2::ones((widths[k], widths[k + 1])))
                    .collect(),
            ),
        };
        Some(Self { kind, seed: 0 })
    }

    pub fn check_shape(&self, spec: &NetworkSpec) -> Result<()> {
        let widths = spec.widths();
        let ok = match &self.kind {
            MaskKind::Dropout(u) => {
                u.len() == widths.len() - 1 && u.iter().enumerate().all(|(k, v)| v.len() == widths[k])
            }
            MaskKind::Dropconnect(u) => {
                u.len() == widths.len() - 1
                    && u
                        .iter()
                        .enumerate()
                        .all(|(k, m)| m.dim() == (widths[k], widths[k + 1]))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("mask shapes do not match the network".into()))
        }
    }
}

fn layer_key(stream: &[u64], layer: usize) -> Vec<u64> {
    let mut key = Vec::with_capacity(stream.len() + 2);
    key.push(purpose::MASK);
    key.extend_from_slice(stream);
    key.push(layer as u64);
    key
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{ActivationKind, LayerSpec};
    use crate::net_engine::{init_net, DenseNet};
    use ndarray::{array, Axis};

    fn spec(p: f64) -> NetworkSpec {
        let mut s = NetworkSpec::new(
            3,
            vec![LayerSpec::new(4, ActivationKind::Tanh, 1.0).with_keep_prob(p).with_dc_keep_prob(p); 2],
            1.0,
        );
        s.input_keep_prob = p;
        s.input_dc_keep_prob = p;
        s
    }

    #[test]
    fn all_ones_mask_equals_plain_forward() {
        let s = spec(0.5);
        let net: DenseNet<f64> = init_net(&s, 1).unwrap();
        let x = array![0.3, -0.2, 0.9];
        let plain = net.forward(x.view()).unwrap();
        for policy in [MaskPolicy::Dropout, MaskPolicy::Dropconnect] {
            let m = MaskSample::ones(policy, &s).unwrap();
            let t = net.forward_masked(x.view(), &m).unwrap();
            assert_eq!(t.output, plain.output);
            assert_eq!(t.phis, plain.phis);
        }
    }

    #[test]
    fn keep_prob_one_draws_all_ones() {
        let s = spec(1.0);
        let m = MaskSample::<f64>::dropout(&s, 11, &[0, 0]);
        assert_eq!(Some(m.kind), MaskSample::ones(MaskPolicy::Dropout, &s).map(|m| m.kind));
    }

    #[test]
    fn zero_input_mask_zeroes_output() {
        let s = spec(0.5);
        let net: DenseNet<f64> = init_net(&s, 2).unwrap();
        let Some(MaskSample { kind: MaskKind::Dropout(mut u), .. }) = MaskSample::ones(MaskPolicy::Dropout, &s) else {
            panic!()
        };
        u[0].fill(0.0);
        let m = MaskSample { kind: MaskKind::Dropout(u), seed: 0 };
        let t = net.forward_masked(array![1.0, 2.0, 3.0].view(), &m).unwrap();
        assert_eq!(t.output, 0.0);
    }

    #[test]
    fn dropping_a_neuron_equals_zeroing_its_outgoing_row() {
        let s = spec(0.5);
        let net: DenseNet<f64> = init_net(&s, 4).unwrap();
        let Some(MaskSample { kind: MaskKind::Dropout(mut u), .. }) = MaskSample::ones(MaskPolicy::Dropout, &s) else {
            panic!()
        };
        u[1][2] = 0.0;
        let m = MaskSample { kind: MaskKind::Dropout(u), seed: 0 };
        let x = array![0.4, 0.1, -0.7];
        let masked = net.forward_masked(x.view(), &m).unwrap();
        let mut cut = net.clone();
        cut.weights[1].row_mut(2).fill(0.0);
        assert_eq!(masked.output, cut.forward(x.view()).unwrap().output);
    }

    #[test]
    fn rank_one_dropconnect_equals_dropout() {
        let s = spec(0.5);
        let net: DenseNet<f64> = init_net(&s, 8).unwrap();
        let drop = MaskSample::<f64>::dropout(&s, 5, &[1]);
        let MaskKind::Dropout(units) = &drop.kind else { panic!() };
        let widths = s.widths();
        let dc: Vec<_> = (0..units.len())
            .map(|k| {
                let col = units[k].clone().insert_axis(Axis(1));
                col.broadcast((widths[k], widths[k + 1])).unwrap().to_owned()
            })
            .collect();
        let dcm = MaskSample { kind: MaskKind::Dropconnect(dc), seed: 0 };
        let x = array![0.5, -0.5, 0.25];
        let a = net.forward_masked(x.view(), &drop).unwrap().output;
        let b = net.forward_masked(x.view(), &dcm).unwrap().output;
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_detected() {
        let s = spec(0.5);
        let other = NetworkSpec::new(3, vec![], 1.0);
        let m = MaskSample::<f64>::dropout(&other, 1, &[]);
        let net: DenseNet<f64> = init_net(&s, 1).unwrap();
        assert!(net.forward_masked(array![1.0, 1.0, 1.0].view(), &m).is_err());
    }
}
