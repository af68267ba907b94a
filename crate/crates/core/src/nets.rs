//! Fully connected tanh networks whose output is a diagonal Gaussian.
//!
//! An [`Mlp`] is a layout, not a parameter store: it knows where its weights
//! sit inside the experiment's flat parameter vector and reads them from the
//! slice passed to [`Mlp::forward`]. The final layer has width `2d` and is
//! split into a mean head and a log-std head; `std = exp(log_std)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, ParamVector, Real};
use crate::distributions::{DiagGaussian, DistError};

/// Bias of the log-std head at initialisation.
pub const LOG_STD_INIT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("network needs at least an input and an output width, got {0:?}")]
    TooFewLayers(Vec<usize>),
    #[error("layer widths must be at least 1, got {0:?}")]
    ZeroWidth(Vec<usize>),
    #[error("output width {0} is not 2 x target dimension")]
    OddOutput(usize),
    #[error("input has {got} entries, network expects {expected}")]
    InputMismatch { expected: usize, got: usize },
    #[error("parameter slice has {got} entries, network needs up to index {needed}")]
    ParamsTooShort { needed: usize, got: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Param(#[from] AdError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    prefix: String,
    widths: Vec<usize>,
    offset: usize,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>, offset: usize) -> Result<Self, NetError> {
        if widths.len() < 2 {
            return Err(NetError::TooFewLayers(widths));
        }
        if widths.contains(&0) {
            return Err(NetError::ZeroWidth(widths));
        }
        let out = *widths.last().unwrap();
        if !out.is_multiple_of(2) {
            return Err(NetError::OddOutput(out));
        }
        Ok(Self {
            prefix: prefix.into(),
            widths,
            offset,
        })
    }

    /// Widths for a net mapping `input` to a Gaussian over `target` dims.
    pub fn shape(input: usize, hidden: &[usize], target: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(hidden);
        w.push(2 * target);
        w
    }

    /// Append freshly initialised parameters to `pv` and return the layout.
    pub fn register(
        pv: &mut ParamVector,
        prefix: &str,
        widths: Vec<usize>,
        seed: u64,
    ) -> Result<Self, NetError> {
        let net = Self::new(prefix, widths, pv.len())?;
        for (name, value) in net.param_names().into_iter().zip(net.init_values(seed)) {
            pv.push(name, value)?;
        }
        Ok(net)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn target_dim(&self) -> usize {
        self.widths[self.widths.len() - 1] / 2
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn is_affine(&self) -> bool {
        self.n_layers() == 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_start(&self, layer: usize) -> usize {
        self.offset
            + self.widths[..=layer]
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum::<usize>()
    }

    /// Absolute position of weight `(out, inp)` of `layer`.
    pub fn weight_index(&self, layer: usize, out: usize, inp: usize) -> usize {
        self.layer_start(layer) + out * self.widths[layer] + inp
    }

    /// Absolute position of bias `out` of `layer`.
    pub fn bias_index(&self, layer: usize, out: usize) -> usize {
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        self.layer_start(layer) + fan_in * fan_out + out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_params());
        for (l, w) in self.widths.windows(2).enumerate() {
            for o in 0..w[1] {
                for i in 0..w[0] {
                    names.push(format!("{}.l{l}.w[{o},{i}]", self.prefix));
                }
            }
            for o in 0..w[1] {
                names.push(format!("{}.l{l}.b[{o}]", self.prefix));
            }
        }
        names
    }

    /// Weights `~ N(0, 1/fan_in)`, biases 0, log-std head bias [`LOG_STD_INIT`].
    pub fn init_values(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.n_params());
        let last = self.n_layers() - 1;
        let d = self.target_dim();
        for (l, w) in self.widths.windows(2).enumerate() {
            let normal = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("valid std");
            values.extend((0..w[0] * w[1]).map(|_| normal.sample(&mut rng)));
            values.extend((0..w[1]).map(|o| if l == last && o >= d { LOG_STD_INIT } else { 0.0 }));
        }
        values
    }

    /// Pre-activations of every layer; the last entry is the raw output.
    fn layers<T: Real>(&self, params: &[T], input: &[T]) -> Result<Vec<T>, NetError> {
        if input.len() != self.input_dim() {
            return Err(NetError::InputMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let needed = self.offset + self.n_params();
        if params.len() < needed {
            return Err(NetError::ParamsTooShort {
                needed,
                got: params.len(),
            });
        }
        let last = self.n_layers() - 1;
        let mut act: Vec<T> = input.to_vec();
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let start = self.layer_start(l);
            let weights = &params[start..start + fan_in * fan_out];
            let biases = &params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
            act = (0..fan_out)
                .map(|o| {
                    let pre = T::dot(&weights[o * fan_in..(o + 1) * fan_in], &act) + biases[o];
                    if l == last {
                        pre
                    } else {
                        pre.tanh()
                    }
                })
                .collect();
        }
        Ok(act)
    }

    /// Gaussian over the target, differentiable in `params` and `input`.
    pub fn forward<T: Real>(&self, params: &[T], input: &[T]) -> Result<DiagGaussian<T>, NetError> {
        let out = self.layers(params, input)?;
        let d = self.target_dim();
        let mean = out[..d].to_vec();
        let std = out[d..].iter().map(|&s| s.exp()).collect();
        Ok(DiagGaussian::new(mean, std)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check, Var};

    fn values_for(net: &Mlp, f: impl Fn(&str) -> f64) -> Vec<f64> {
        let mut v = vec![0.0; net.offset()];
        v.extend(net.param_names().iter().map(|n| f(n)));
        v
    }

    #[test]
    fn shape_validation() {
        assert!(Mlp::new("q", vec![3], 0).is_err());
        assert!(Mlp::new("q", vec![3, 0, 2], 0).is_err());
        assert_eq!(Mlp::new("q", vec![3, 5], 0), Err(NetError::OddOutput(5)));
        let net = Mlp::new("q", Mlp::shape(2, &[4], 3), 0).unwrap();
        assert_eq!(net.widths(), &[2, 4, 6]);
        assert_eq!(net.n_params(), 2 * 4 + 4 + 4 * 6 + 6);
        assert_eq!(net.param_names().len(), net.n_params());
        assert_eq!(net.bias_index(1, 5) + 1, net.n_params());
    }

    #[test]
    fn constant_net() {
        let net = Mlp::new("q", Mlp::shape(2, &[3], 1), 0).unwrap();
        let p = values_for(&net, |n| match n {
            "q.l1.b[0]" => 0.7,
            "q.l1.b[1]" => -0.4,
            _ => 0.0,
        });
        for input in [[0.0, 0.0], [3.0, -2.0], [-5.0, 5.0]] {
            let g = net.forward(&p, &input).unwrap();
            assert_eq!(g.mean(), &[0.7]);
            assert_eq!(g.std(), &[(-0.4f64).exp()]);
        }
    }

    #[test]
    fn affine_net() {
        let net = Mlp::new("r", Mlp::shape(2, &[], 1), 4).unwrap();
        let mut p = vec![0.0; 4 + net.n_params()];
        p[net.weight_index(0, 0, 0)] = 2.0;
        p[net.weight_index(0, 0, 1)] = -1.0;
        p[net.bias_index(0, 0)] = 0.5;
        p[net.bias_index(0, 1)] = 0.1;
        let g = net.forward(&p, &[1.5, 4.0]).unwrap();
        assert_eq!(g.mean(), &[2.0 * 1.5 - 4.0 + 0.5]);
        assert_eq!(g.std(), &[0.1f64.exp()]);
        assert!(net.forward(&p, &[1.0]).is_err());
        assert!(net.forward(&p[..5], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_biased() {
        let net = Mlp::new("q", Mlp::shape(2, &[8], 2), 0).unwrap();
        assert_eq!(net.init_values(11), net.init_values(11));
        assert_ne!(net.init_values(11), net.init_values(12));
        let v = net.init_values(11);
        assert_eq!(v[net.bias_index(1, 0)], 0.0);
        assert_eq!(v[net.bias_index(1, 2)], LOG_STD_INIT);
        assert_eq!(v[net.bias_index(1, 3)], LOG_STD_INIT);
        assert_eq!(v[net.bias_index(0, 4)], 0.0);
    }

    #[test]
    fn fan_in_scaling_preserves_variance() {
        // Pre-activations of the first layer have variance ≈ input variance.
        let width = 64;
        let net = Mlp::new("q", vec![width, width, 2], 0).unwrap();
        let p = net.init_values(5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let input_std = 1.5;
        let normal = Normal::new(0.0, input_std).unwrap();
        let mut pre = Vec::new();
        for _ in 0..200 {
            let x: Vec<f64> = (0..width).map(|_| normal.sample(&mut rng)).collect();
            for o in 0..width {
                let w = &p[net.weight_index(0, o, 0)..net.weight_index(0, o, 0) + width];
                pre.push(f64::dot(w, &x));
            }
        }
        let var = pre.iter().map(|v| v * v).sum::<f64>() / pre.len() as f64;
        let ratio = var / (input_std * input_std);
        assert!((0.5..2.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_seed_net_is_finite_on_box() {
        let net = Mlp::new("q", Mlp::shape(2, &[32], 2), 0).unwrap();
        let p = net.init_values(0);
        for i in 0..=20 {
            for j in 0..=20 {
                let x = [-5.0 + 0.5 * i as f64, -5.0 + 0.5 * j as f64];
                let g = net.forward(&p, &x).unwrap();
                assert!(g.mean().iter().chain(g.std()).all(|v| v.is_finite()));
                assert!(g.std().iter().all(|&s| s > 0.0));
            }
        }
    }

    #[test]
    fn gradient_matches_fd() {
        let mut pv = ParamVector::new();
        let net = Mlp::register(&mut pv, "q", Mlp::shape(2, &[5], 2), 3).unwrap();
        let worst = fd_check(
            |_, p| {
                let g = net
                    .forward(p, &[Var::constant(0.3), Var::constant(-1.1)])
                    .unwrap();
                g.logpdf(&[Var::constant(0.5), Var::constant(0.2)]).unwrap()
            },
            &pv,
            1e-5,
        )
        .unwrap();
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Mlp::new("q", Mlp::shape(1, &[6], 1), 0).unwrap();
        let p = net.init_values(2);
        assert_eq!(net.forward(&p, &[0.4]).unwrap(), net.forward(&p, &[0.4]).unwrap());
    }
}
