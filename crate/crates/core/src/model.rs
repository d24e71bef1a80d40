//! Fully connected regression networks over flat parameter vectors.
//!
//! Layer `l` with `in → out` units occupies `in·out` row-major weights
//! followed by `out` biases, so `M = Σ (in+1)·out`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Loss, ParamVector, Scalar, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "a model needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        Ok(ModelSpec {
            layer_sizes,
            activation,
        })
    }

    /// The 1-40-40-1 ReLU regressor used for the sine benchmark.
    pub fn sine_regressor() -> Self {
        ModelSpec {
            layer_sizes: vec![1, 40, 40, 1],
            activation: Activation::Relu,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| (i + 1) * o).sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|p| (p[0], p[1]))
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            w.push(rng.random_range(-limit..=limit));
        }
        w.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(w)
}

fn check_params(spec: &ModelSpec, w: &ParamVector) -> Result<()> {
    if w.dim() != spec.param_count() {
        return Err(Error::dims(spec.param_count(), w.dim()));
    }
    Ok(())
}

/// Evaluates the network on `n` row-major inputs, returning `n×out` outputs.
pub fn forward_batch(spec: &ModelSpec, w: &ParamVector, xs: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, w)?;
    let d_in = spec.input_dim();
    if xs.len() % d_in != 0 {
        return Err(Error::dims(d_in, xs.len() % d_in));
    }
    let n = xs.len() / d_in;
    let mut h = xs.to_vec();
    let mut offset = 0;
    let depth = spec.layer_sizes.len() - 1;
    for (l, (fi, fo)) in spec.layers().enumerate() {
        let weights = &w[offset..offset + fi * fo];
        let bias = &w[offset + fi * fo..offset + fi * fo + fo];
        offset += (fi + 1) * fo;
        let mut next = vec![0.0; n * fo];
        for r in 0..n {
            let out = &mut next[r * fo..(r + 1) * fo];
            for k in 0..fi {
                let x = h[r * fi + k];
                for (o, &wkj) in out.iter_mut().zip(&weights[k * fo..(k + 1) * fo]) {
                    *o += x * wkj;
                }
            }
            for (o, b) in out.iter_mut().zip(bias) {
                *o += b;
                if l + 1 < depth && spec.activation == Activation::Relu {
                    *o = o.max(0.0);
                }
            }
        }
        h = next;
    }
    Ok(h)
}

/// Single-input evaluation.
pub fn forward(spec: &ModelSpec, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.input_dim() {
        return Err(Error::dims(spec.input_dim(), x.len()));
    }
    forward_batch(spec, w, x)
}

/// Plain mean of squared errors over all outputs (no ½ factor).
pub fn mse_loss(spec: &ModelSpec, w: &ParamVector, xs: &[f64], ys: &[f64]) -> Result<f64> {
    let pred = forward_batch(spec, w, xs)?;
    if pred.len() != ys.len() {
        return Err(Error::dims(pred.len(), ys.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let s: f64 = pred.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(s / pred.len() as f64)
}

/// MSE of the network on a fixed batch, as a differentiable [`Loss`].
#[derive(Clone, Copy, Debug)]
pub struct MseLoss<'a> {
    pub spec: &'a ModelSpec,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
}

impl Loss for MseLoss<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn record<S: Scalar>(&self, tape: &mut Tape<S>, w: Var) -> Result<Var> {
        let d_in = self.spec.input_dim();
        if self.xs.is_empty() || self.xs.len() % d_in != 0 {
            return Err(Error::dims(d_in, self.xs.len()));
        }
        let n = self.xs.len() / d_in;
        if self.ys.len() != n * self.spec.output_dim() {
            return Err(Error::dims(n * self.spec.output_dim(), self.ys.len()));
        }
        let mut h = tape.constant(self.xs, n, d_in)?;
        let depth = self.spec.layer_sizes.len() - 1;
        let mut offset = 0;
        for (l, (fi, fo)) in self.spec.layers().enumerate() {
            let weights = tape.slice(w, offset, fi, fo)?;
            let bias = tape.slice(w, offset + fi * fo, 1, fo)?;
            offset += (fi + 1) * fo;
            let z = tape.matmul(h, weights)?;
            h = tape.add_row(z, bias)?;
            if l + 1 < depth && self.spec.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        let y = tape.constant(self.ys, n, self.spec.output_dim())?;
        let err = tape.sub(h, y)?;
        let sq = tape.square(err)?;
        tape.mean(sq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff;

    fn linear() -> ModelSpec {
        ModelSpec::new(vec![1, 1], Activation::Identity).unwrap()
    }

    #[test]
    fn sine_regressor_parameter_count() {
        assert_eq!(ModelSpec::sine_regressor().param_count(), 1761);
    }

    #[test]
    fn linear_init_has_zero_bias() {
        let w = init_params(&linear(), 17);
        assert_eq!(w.dim(), 2);
        assert_eq!(w[1], 0.0);
        assert!(w[0].abs() <= (6.0f64 / 2.0).sqrt());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let s = ModelSpec::sine_regressor();
        assert_eq!(init_params(&s, 5), init_params(&s, 5));
        assert_ne!(init_params(&s, 5), init_params(&s, 6));
    }

    #[test]
    fn glorot_bounds_per_layer() {
        let s = ModelSpec::sine_regressor();
        let w = init_params(&s, 1);
        let lim1 = (6.0f64 / 41.0).sqrt();
        assert!(w[..40].iter().all(|x| x.abs() <= lim1));
        assert!(w[40..80].iter().all(|&x| x == 0.0));
        let lim2 = (6.0f64 / 80.0).sqrt();
        assert!(w[80..1680].iter().all(|x| x.abs() <= lim2));
    }

    #[test]
    fn affine_forward() {
        let w = ParamVector::new(vec![2.0, 1.0]);
        assert_eq!(forward(&linear(), &w, &[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_relu_network_outputs_zero() {
        let s = ModelSpec::sine_regressor();
        let w = ParamVector::zeros(s.param_count());
        assert_eq!(forward(&s, &w, &[1.234]).unwrap(), vec![0.0]);
    }

    #[test]
    fn hand_evaluated_relu_net() {
        let s = ModelSpec::new(vec![1, 2, 1], Activation::Relu).unwrap();
        let w = ParamVector::new(vec![1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(forward(&s, &w, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let s = linear();
        assert!(matches!(
            forward(&s, &ParamVector::zeros(3), &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(forward(&s, &ParamVector::zeros(2), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_examples() {
        let s = linear();
        // identity map: weight 1, bias 0
        let w = ParamVector::new(vec![1.0, 0.0]);
        assert_eq!(mse_loss(&s, &w, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&s, &w, &[1.0], &[3.0]).unwrap(), 4.0);
        assert_eq!(mse_loss(&s, &w, &[0.0, 0.0], &[1.0, -3.0]).unwrap(), 5.0);
        assert!(mse_loss(&s, &w, &[], &[]).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let s = ModelSpec::sine_regressor();
        let w = init_params(&s, 3);
        let xs = [-2.0, 0.5, 3.0, 4.5];
        let ys = [0.1, -0.3, 1.2, 0.0];
        let plain = mse_loss(&s, &w, &xs, &ys).unwrap();
        let taped = autodiff::value(&MseLoss { spec: &s, xs: &xs, ys: &ys }, &w).unwrap();
        assert!((plain - taped).abs() <= 1e-14 * plain.abs().max(1.0));
    }

    #[test]
    fn relu_net_is_positively_homogeneous_without_bias() {
        let s = ModelSpec::new(vec![2, 5, 3], Activation::Relu).unwrap();
        let w = init_params(&s, 9);
        let x = [0.7, -1.3];
        let a = forward(&s, &w, &x).unwrap();
        let b = forward(&s, &w, &[2.5 * x[0], 2.5 * x[1]]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((2.5 * p - q).abs() < 1e-12);
        }
    }
}
