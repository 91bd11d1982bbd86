//! Hinge loss, subgradient backpropagation and input Jacobians.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;

use super::rng::{purpose, stream_rng};
use super::{Dataset, DenseNet, ForwardTrace, MaskKind, MaskSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `max(0, 1 − y·score)`.
#[inline]
pub fn hinge_loss<T: Scalar>(score: T, label: T) -> T {
    (T::one() - label * score).max(T::zero())
}

/// Mean hinge loss over a dataset.
pub fn empirical_hinge<T: Scalar>(net: &DenseNet<T>, data: &Dataset<T>) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut total = T::zero();
    for (x, y) in data.iter() {
        total += hinge_loss(net.score(x)?, y);
    }
    Ok(total / T::of(data.len() as f64))
}

/// Fraction of samples with `sign(f(x)) ≠ y`; a zero score counts as an error.
pub fn empirical_01<T: Scalar>(net: &DenseNet<T>, data: &Dataset<T>) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut wrong = 0usize;
    for (x, y) in data.iter() {
        if !(y * net.score(x)? > T::zero()) {
            wrong += 1;
        }
    }
    Ok(T::of(wrong as f64 / data.len() as f64))
}

/// Gradient with the same shapes as [`DenseNet::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub weights: Vec<Array2<T>>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&v| v == T::zero()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * s);
        }
    }

    pub fn norm(&self) -> T {
        self.weights
            .iter()
            .map(|w| w.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }
}

fn add_outer<T: Scalar>(acc: &mut Array2<T>, left: &Array1<T>, right: &Array1<T>, scale: T) {
    for (i, &l) in left.iter().enumerate() {
        if l == T::zero() {
            continue;
        }
        let li = l * scale;
        let mut row = acc.row_mut(i);
        Zip::from(&mut row).and(right).for_each(|a, &r| *a += li * r);
    }
}

/// Accumulate `output_adjoint · ∂f/∂W` for one forward trace into `grads`.
pub(crate) fn backward_output<T: Scalar>(
    net: &DenseNet<T>,
    trace: &ForwardTrace<T>,
    mask: Option<&MaskSample<T>>,
    output_adjoint: T,
    grads: &mut Gradient<T>,
) {
    if output_adjoint == T::zero() {
        return;
    }
    let depth = net.depth();
    let effective = |k: usize| -> Array2<T> {
        match mask.map(|m| &m.kind) {
            Some(MaskKind::Dropconnect(u)) => &net.weights[k] * &u[k],
            _ => net.weights[k].clone(),
        }
    };
    let dc = |k: usize| -> Option<&Array2<T>> {
        match mask.map(|m| &m.kind) {
            Some(MaskKind::Dropconnect(u)) => Some(&u[k]),
            _ => None,
        }
    };

    // output layer
    let w_out = effective(depth);
    let mut g_out = Array2::zeros(w_out.dim());
    add_outer(
        &mut g_out,
        &trace.layer_inputs[depth],
        &Array1::from_elem(1, T::one()),
        output_adjoint,
    );
    if let Some(u) = dc(depth) {
        g_out = g_out * u;
    }
    grads.weights[depth] += &g_out;
    let mut adj_input = w_out.column(0).mapv(|v| v * output_adjoint);

    for k in (1..=depth).rev() {
        let mut adj_phi = adj_input;
        if let Some(MaskKind::Dropout(u)) = mask.map(|m| &m.kind) {
            adj_phi = adj_phi * &u[k];
        }
        let act = net.spec.hidden[k - 1].activation;
        let adj_z = Zip::from(&adj_phi)
            .and(&trace.preacts[k - 1])
            .map_collect(|&a, &z| a * act.derivative(z));
        let w = effective(k - 1);
        let mut g = Array2::zeros(w.dim());
        add_outer(&mut g, &trace.layer_inputs[k - 1], &adj_z, T::one());
        if let Some(u) = dc(k - 1) {
            g = g * u;
        }
        grads.weights[k - 1] += &g;
        adj_input = w.dot(&adj_z);
    }
}

/// Subgradient of the mean hinge loss over `data`. `masks`, when given,
/// holds one mask per sample. The subgradient is 0 at the hinge corner and
/// at relu kinks.
pub fn grad_hinge<T: Scalar>(
    net: &DenseNet<T>,
    data: &Dataset<T>,
    masks: Option<&[MaskSample<T>]>,
) -> Result<Gradient<T>> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(m) = masks {
        if m.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} masks for {} samples",
                m.len(),
                data.len()
            )));
        }
    }
    let inv_m = T::one() / T::of(data.len() as f64);
    let mut grads = Gradient::zeros_like(net);
    for (i, (x, y)) in data.iter().enumerate() {
        let mask = masks.map(|m| &m[i]);
        let trace = match mask {
            Some(m) => net.forward_masked(x, m)?,
            None => net.forward(x)?,
        };
        if T::one() - y * trace.output > T::zero() {
            backward_output(net, &trace, mask, -y * inv_m, &mut grads);
        }
    }
    Ok(grads)
}

/// `J_0 = I, J_k = D_k W_kᵀ J_{k−1}`: Jacobians of every `φ_k` w.r.t. the input.
pub(crate) fn jacobian_chain<T: Scalar>(net: &DenseNet<T>, trace: &ForwardTrace<T>) -> Vec<Array2<T>> {
    let d = net.input_dim();
    let mut chain = Vec::with_capacity(net.depth() + 1);
    chain.push(Array2::eye(d));
    for k in 1..=net.depth() {
        let act = net.spec.hidden[k - 1].activation;
        let mut m = net.weights[k - 1].t().dot(&chain[k - 1]);
        for (mut row, &z) in m.axis_iter_mut(Axis(0)).zip(&trace.preacts[k - 1]) {
            let s = act.derivative(z);
            row.mapv_inplace(|v| v * s);
        }
        chain.push(m);
    }
    chain
}

/// Accumulate `scale · ∂‖J_P(x)‖_F / ∂W` into `grads`, for an unmasked trace.
/// Piecewise-linear units contribute through their fixed activation pattern.
pub(crate) fn backward_jacobian_frobenius<T: Scalar>(
    net: &DenseNet<T>,
    trace: &ForwardTrace<T>,
    chain: &[Array2<T>],
    scale: T,
    grads: &mut Gradient<T>,
) {
    let depth = net.depth();
    let jp = &chain[depth];
    let f = frobenius_norm(jp);
    if depth == 0 || f == T::zero() || scale == T::zero() {
        return;
    }
    let mut g_adj = jp.mapv(|v| v * scale / f);
    let mut r = Array1::<T>::zeros(jp.nrows());
    for k in (1..=depth).rev() {
        let act = net.spec.hidden[k - 1].activation;
        let z = &trace.preacts[k - 1];
        let d1 = z.mapv(|v| act.derivative(v));
        let d2 = z.mapv(|v| act.second_derivative(v));
        let w = &net.weights[k - 1];
        let m = w.t().dot(&chain[k - 1]);
        let mut a = g_adj.clone();
        for (mut row, &s) in a.axis_iter_mut(Axis(0)).zip(&d1) {
            row.mapv_inplace(|v| v * s);
        }
        let gbar = Zip::from(g_adj.rows())
            .and(m.rows())
            .map_collect(|g, mm| g.dot(&mm));
        let a_z = Zip::from(&r)
            .and(&d1)
            .and(&gbar)
            .and(&d2)
            .map_collect(|&rv, &s1, &gb, &s2| rv * s1 + gb * s2);
        grads.weights[k - 1] += &chain[k - 1].dot(&a.t());
        add_outer(&mut grads.weights[k - 1], &trace.phis[k - 1], &a_z, T::one());
        g_adj = w.dot(&a);
        r = w.dot(&a_z);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianTarget {
    /// `∂f/∂x`, a `1 × d` row.
    Output,
    /// `∂φ_P/∂x`, an `h_P × d` matrix.
    Features,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian<T> {
    pub matrix: Array2<T>,
    /// Evaluated at a relu kink, where the subderivative 0 was used.
    pub at_kink: bool,
}

/// Input Jacobian `D_P W_Pᵀ … D_1 W_1ᵀ` (optionally times `wᵀ`).
pub fn jacobian<T: Scalar>(
    net: &DenseNet<T>,
    x: ArrayView1<'_, T>,
    target: JacobianTarget,
) -> Result<Jacobian<T>> {
    let trace = net.forward(x)?;
    let mut chain = jacobian_chain(net, &trace);
    let jp = chain.pop().expect("J_0");
    let matrix = match target {
        JacobianTarget::Features => jp,
        JacobianTarget::Output => net.output_weights().dot(&jp).insert_axis(Axis(0)),
    };
    Ok(Jacobian {
        matrix,
        at_kink: trace.at_kink,
    })
}

pub fn frobenius_norm<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum::<T>().sqrt()
}

pub fn jacobian_frobenius<T: Scalar>(
    net: &DenseNet<T>,
    x: ArrayView1<'_, T>,
    target: JacobianTarget,
) -> Result<T> {
    Ok(frobenius_norm(&jacobian(net, x, target)?.matrix))
}

/// Power-iteration estimate of the largest singular value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm<T> {
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

pub const POWER_ITERATION_TOL: f64 = 1e-10;
pub const POWER_ITERATION_MAX: usize = 10_000;

/// Largest singular value of `m` by power iteration on the smaller Gram
/// matrix, from a fixed seeded start vector.
pub fn spectral_norm<T: Scalar>(m: &Array2<T>) -> SpectralNorm<T> {
    let gram = if m.nrows() < m.ncols() {
        m.dot(&m.t())
    } else {
        m.t().dot(m)
    };
    let n = gram.nrows();
    if n == 0 || gram.iter().all(|&v| v == T::zero()) {
        return SpectralNorm {
            value: T::zero(),
            iterations: 0,
            converged: true,
        };
    }
    if n == 1 {
        return SpectralNorm {
            value: gram[[0, 0]].sqrt(),
            iterations: 0,
            converged: true,
        };
    }
    let tol = T::of(POWER_ITERATION_TOL).max(T::epsilon() * T::of(16.0));
    let mut rng = stream_rng(0, &[purpose::POWER_ITERATION, n as u64]);
    let mut v = Array1::from_shape_fn(n, |_| T::of(rng.gen_range(0.5..1.5)));
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|e| e / norm);
    let mut lambda = T::zero();
    for it in 1..=POWER_ITERATION_MAX {
        let w = gram.dot(&v);
        let next = w.dot(&w).sqrt();
        if next == T::zero() {
            return SpectralNorm {
                value: T::zero(),
                iterations: it,
                converged: true,
            };
        }
        v = w.mapv(|e| e / next);
        if (next - lambda).abs() <= tol * next {
            return SpectralNorm {
                value: next.sqrt(),
                iterations: it,
                converged: true,
            };
        }
        lambda = next;
    }
    SpectralNorm {
        value: lambda.sqrt(),
        iterations: POWER_ITERATION_MAX,
        converged: false,
    }
}

pub fn jacobian_spectral<T: Scalar>(
    net: &DenseNet<T>,
    x: ArrayView1<'_, T>,
    target: JacobianTarget,
) -> Result<SpectralNorm<T>> {
    Ok(spectral_norm(&jacobian(net, x, target)?.matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{ActivationKind, LayerSpec, NetworkSpec};
    use crate::net_engine::init_net;
    use ndarray::array;

    fn relu_identity() -> DenseNet<f64> {
        let spec = NetworkSpec::new(2, vec![LayerSpec::new(2, ActivationKind::Relu, 2.0)], 2.0);
        DenseNet::from_weights(spec, vec![Array2::eye(2), array![[1.0], [1.0]]]).unwrap()
    }

    fn tanh_net(seed: u64) -> DenseNet<f64> {
        let spec = NetworkSpec::new(
            3,
            vec![
                LayerSpec::new(4, ActivationKind::Tanh, 2.0),
                LayerSpec::new(3, ActivationKind::Tanh, 2.0),
            ],
            2.0,
        );
        init_net(&spec, seed).unwrap()
    }

    #[test]
    fn hinge_values() {
        assert_eq!(hinge_loss(2.0, 1.0), 0.0);
        assert_eq!(hinge_loss(0.5, 1.0), 0.5);
        assert_eq!(hinge_loss(0.5, -1.0), 1.5);
        for s in [-2.0, -0.1, 0.0, 0.3, 1.0, 3.0] {
            for y in [-1.0, 1.0] {
                let zero_one = if y * s > 0.0 { 0.0 } else { 1.0 };
                assert!(zero_one <= hinge_loss(s, y));
            }
        }
    }

    #[test]
    fn flat_region_gives_zero_gradient() {
        let net = relu_identity();
        let data = Dataset::from_rows(&[vec![2.0, 1.0], vec![-3.0, -1.0]], &[1.0, -1.0]).unwrap();
        // f = relu sum: 3 for the first, 0 for the second -> the second violates
        let g = grad_hinge(&net, &data.subset(&[0]), None).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn linear_gradient_closed_form() {
        let spec = NetworkSpec::new(2, vec![], 5.0);
        let net = DenseNet::from_weights(spec, vec![array![[0.1], [0.2]]]).unwrap();
        let data = Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]], &[1.0, -1.0]).unwrap();
        // margins: 0.5 (violates), -(-0.3)=... y f = -0.3 (violates)
        let g = grad_hinge(&net, &data, None).unwrap();
        let expect: Array2<f64> = array![[(-1.0 * 1.0 + 1.0 * 3.0) / 2.0], [(-1.0 * 2.0 + 0.0) / 2.0]];
        assert!((&g.weights[0] - &expect).iter().all(|v: &f64| v.abs() < 1e-15));

        let one = data.subset(&[0]);
        let g = grad_hinge(&net, &one, None).unwrap();
        assert_eq!(g.weights[0], array![[-1.0], [-2.0]]);
    }

    fn fd_weights<F: Fn(&DenseNet<f64>) -> f64>(net: &DenseNet<f64>, f: F) -> Vec<Array2<f64>> {
        let h = 1e-5;
        let mut out = Vec::new();
        for k in 0..net.weights.len() {
            let mut g = Array2::zeros(net.weights[k].dim());
            for idx in ndarray::indices(net.weights[k].dim()) {
                let mut p = net.clone();
                p.weights[k][idx] += h;
                let mut m = net.clone();
                m.weights[k][idx] -= h;
                g[idx] = (f(&p) - f(&m)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let net = tanh_net(3);
        let data = Dataset::from_rows(
            &[vec![0.5, -0.2, 0.1], vec![-0.3, 0.8, 0.4], vec![0.9, 0.1, -0.6]],
            &[1.0, -1.0, 1.0],
        )
        .unwrap();
        let g = grad_hinge(&net, &data, None).unwrap();
        let fd = fd_weights(&net, |n| empirical_hinge(n, &data).unwrap());
        for (a, b) in g.weights.iter().zip(&fd) {
            for (x, y) in a.iter().zip(b) {
                assert!(rel(*x, *y) < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        let mut spec = tanh_net(0).spec;
        spec.input_keep_prob = 0.7;
        spec.hidden.iter_mut().for_each(|l| {
            l.keep_prob = 0.6;
            l.dc_keep_prob = 0.6;
        });
        spec.input_dc_keep_prob = 0.7;
        let net: DenseNet<f64> = init_net(&spec, 21).unwrap();
        let data = Dataset::from_rows(&[vec![0.5, -0.2, 0.1], vec![-0.3, 0.8, 0.4]], &[1.0, -1.0]).unwrap();
        for (s, maker) in [
            (1u64, MaskSample::<f64>::dropout as fn(&NetworkSpec, u64, &[u64]) -> MaskSample<f64>),
            (2, MaskSample::<f64>::dropconnect),
        ] {
            let masks: Vec<_> = (0..2).map(|i| maker(&spec, s, &[i])).collect();
            let g = grad_hinge(&net, &data, Some(&masks)).unwrap();
            let loss = |n: &DenseNet<f64>| {
                data.iter()
                    .zip(&masks)
                    .map(|((x, y), m)| hinge_loss(n.forward_masked(x, m).unwrap().output, y))
                    .sum::<f64>()
                    / 2.0
            };
            let fd = fd_weights(&net, loss);
            for (a, b) in g.weights.iter().zip(&fd) {
                for (x, y) in a.iter().zip(b) {
                    assert!(rel(*x, *y) < 1e-4, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn hand_relu_jacobian() {
        let net = relu_identity();
        let j = jacobian(&net, array![1.0, 1.0].view(), JacobianTarget::Output).unwrap();
        assert_eq!(j.matrix, array![[1.0, 1.0]]);
        assert!(!j.at_kink);
        let f = frobenius_norm(&j.matrix);
        assert!((f - 2f64.sqrt()).abs() < 1e-15);
        let s = spectral_norm(&j.matrix);
        assert!((s.value - 2f64.sqrt()).abs() < 1e-12);
        let kink = jacobian(&net, array![0.0, 1.0].view(), JacobianTarget::Output).unwrap();
        assert!(kink.at_kink);
    }

    #[test]
    fn linear_jacobian_is_constant() {
        let spec = NetworkSpec::new(3, vec![], 5.0);
        let net = DenseNet::from_weights(spec, vec![array![[1.0], [-2.0], [0.5]]]).unwrap();
        for x in [array![0.0, 0.0, 0.0], array![3.0, -1.0, 2.0]] {
            let j = jacobian(&net, x.view(), JacobianTarget::Output).unwrap();
            assert_eq!(j.matrix, array![[1.0, -2.0, 0.5]]);
            let jf = jacobian(&net, x.view(), JacobianTarget::Features).unwrap();
            assert_eq!(jf.matrix, Array2::eye(3));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = tanh_net(7);
        let x = array![0.3, -0.4, 0.2];
        let j = jacobian(&net, x.view(), JacobianTarget::Features).unwrap().matrix;
        let h = 1e-5;
        for c in 0..3 {
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let d = (net.features(xp.view()).unwrap() - net.features(xm.view()).unwrap()) / (2.0 * h);
            for r in 0..d.len() {
                assert!(rel(j[[r, c]], d[r]) < 1e-4);
            }
        }
    }

    #[test]
    fn frobenius_penalty_gradient_matches_finite_differences() {
        let net = tanh_net(11);
        let x = array![0.6, -0.1, 0.3];
        let pen = |n: &DenseNet<f64>| jacobian_frobenius(n, x.view(), JacobianTarget::Features).unwrap();
        let trace = net.forward(x.view()).unwrap();
        let chain = jacobian_chain(&net, &trace);
        let mut g = Gradient::zeros_like(&net);
        backward_jacobian_frobenius(&net, &trace, &chain, 1.0, &mut g);
        let fd = fd_weights(&net, pen);
        for (a, b) in g.weights.iter().zip(&fd) {
            for (u, v) in a.iter().zip(b) {
                assert!(rel(*u, *v) < 1e-4, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn spectral_norm_properties() {
        assert_eq!(spectral_norm(&Array2::<f64>::zeros((2, 3))).value, 0.0);
        let m: Array2<f64> = array![[3.0, 0.0], [0.0, -4.0], [0.0, 0.0]];
        let s = spectral_norm(&m);
        assert!(s.converged);
        assert!((s.value - 4.0).abs() < 1e-8);
        let net = tanh_net(2);
        let j = jacobian(&net, array![0.1, 0.2, 0.3].view(), JacobianTarget::Features).unwrap().matrix;
        assert!(spectral_norm(&j).value <= frobenius_norm(&j) + 1e-12);
    }
}
