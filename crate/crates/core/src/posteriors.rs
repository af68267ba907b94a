//! Variational families: a plain diagonal Gaussian, the hierarchical
//! mixture `Q(λ) Q(z|λ,θ)` and the auxiliary density `R(λ | z[, x], φ)`.
//!
//! Parameters live in the experiment's flat [`ParamVector`]; θ entries are
//! named `theta.*`, φ entries `phi.*`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Real};
use crate::distributions::{DiagGaussian, NoiseDraw};
use crate::error::{Error, Result};
use crate::nets::Mlp;
use crate::oracle::{log_integrate, Grid};

pub const THETA_PREFIX: &str = "theta.";
pub const PHI_PREFIX: &str = "phi.";

/// `Q(z|θ) = N(mean, exp(log_std)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplePosterior {
    dim: usize,
    offset: usize,
}

impl SimplePosterior {
    /// Append `theta.mean[i]` and `theta.log_std[i]` entries to `pv`.
    pub fn register(pv: &mut ParamVector, mean: &[f64], log_std: &[f64]) -> Result<Self> {
        Error::dim("log_std", mean.len(), log_std.len())?;
        if mean.is_empty() {
            return Err(Error::InvalidParameter("posterior dimension must be at least 1".into()));
        }
        let offset = pv.len();
        for (i, &m) in mean.iter().enumerate() {
            pv.push(format!("theta.mean[{i}]"), m)?;
        }
        for (i, &s) in log_std.iter().enumerate() {
            pv.push(format!("theta.log_std[{i}]"), s)?;
        }
        Ok(Self {
            dim: mean.len(),
            offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn dist<T: Real>(&self, params: &[T]) -> Result<DiagGaussian<T>> {
        let needed = self.offset + 2 * self.dim;
        if params.len() < needed {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: needed,
                got: params.len(),
            });
        }
        let mean = params[self.offset..self.offset + self.dim].to_vec();
        let std = params[self.offset + self.dim..needed]
            .iter()
            .map(|&s| s.exp())
            .collect();
        Ok(DiagGaussian::new(mean, std)?)
    }
}

/// Ancestral sample of the hierarchical family with its joint log-density.
#[derive(Debug, Clone)]
pub struct JointSample<T> {
    pub lambda: Vec<T>,
    pub z: Vec<T>,
    pub log_q: T,
}

/// `Q(z, λ | θ) = N(λ | 0, I) ∏ N(z_i | μ_i(λ;θ), σ_i²(λ;θ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPosterior {
    lambda_dim: usize,
    cond_net: Mlp,
}

impl HierarchicalPosterior {
    pub fn new(lambda_dim: usize, cond_net: Mlp) -> Result<Self> {
        Error::dim("conditional net input", lambda_dim, cond_net.input_dim())?;
        Ok(Self {
            lambda_dim,
            cond_net,
        })
    }

    /// Register a freshly initialised conditional net `λ ↦ Q(z|λ)` in `pv`.
    pub fn register(
        pv: &mut ParamVector,
        lambda_dim: usize,
        z_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let net = Mlp::register(pv, "theta.q", Mlp::shape(lambda_dim, hidden, z_dim), seed)?;
        Self::new(lambda_dim, net)
    }

    pub fn lambda_dim(&self) -> usize {
        self.lambda_dim
    }

    pub fn z_dim(&self) -> usize {
        self.cond_net.target_dim()
    }

    pub fn cond_net(&self) -> &Mlp {
        &self.cond_net
    }

    pub fn prior<T: Real>(&self) -> DiagGaussian<T> {
        DiagGaussian::standard(self.lambda_dim).expect("lambda_dim >= 1")
    }

    pub fn conditional<T: Real>(&self, params: &[T], lambda: &[T]) -> Result<DiagGaussian<T>> {
        Ok(self.cond_net.forward(params, lambda)?)
    }

    /// `log Q(z, λ | θ)`
    pub fn log_joint_density<T: Real>(&self, params: &[T], z: &[T], lambda: &[T]) -> Result<T> {
        let prior = self.prior::<T>().logpdf(lambda)?;
        let cond = self.conditional(params, lambda)?.logpdf(z)?;
        Ok(prior + cond)
    }

    /// Draw `λ` then `z | λ` by reparametrization.
    pub fn sample_joint<T: Real>(
        &self,
        params: &[T],
        noise_lambda: &NoiseDraw,
        noise_z: &NoiseDraw,
    ) -> Result<JointSample<T>> {
        Error::dim("lambda noise", self.lambda_dim, noise_lambda.dim())?;
        Error::dim("z noise", self.z_dim(), noise_z.dim())?;
        let lambda: Vec<T> = noise_lambda.eps.iter().map(|&e| T::cst(e)).collect();
        let cond = self.conditional(params, &lambda)?;
        let z = cond.reparam_sample(&noise_z.eps)?;
        let log_q = self.prior::<T>().logpdf(&lambda)? + cond.logpdf(&z)?;
        Ok(JointSample { lambda, z, log_q })
    }

    /// `log Q(z|θ) = log ∫ Q(z, λ|θ) dλ` by trapezoid quadrature over `lambda_grid`.
    pub fn marginal_q_oracle(&self, params: &[f64], z: &[f64], lambda_grid: &Grid) -> Result<f64> {
        if self.lambda_dim > 2 {
            return Err(Error::OracleInfeasible(format!(
                "marginal over {} auxiliary dimensions",
                self.lambda_dim
            )));
        }
        Error::dim("lambda grid", self.lambda_dim, lambda_grid.dim())?;
        Error::dim("latent", self.z_dim(), z.len())?;
        Ok(log_integrate(lambda_grid, |lam| {
            self.log_joint_density(params, z, lam).unwrap_or(f64::NEG_INFINITY)
        }))
    }

    /// Affine scalar coefficients `(a, b, s)` with `Q(z|λ) = N(aλ + b, s²)`.
    pub fn affine_coefficients(&self, params: &[f64]) -> Result<(f64, f64, f64)> {
        let net = &self.cond_net;
        if !net.is_affine() {
            return Err(Error::NotAffine(format!("conditional net has widths {:?}", net.widths())));
        }
        if self.lambda_dim != 1 || self.z_dim() != 1 {
            return Err(Error::NotAffine(format!(
                "need scalar λ and z, got m = {}, n = {}",
                self.lambda_dim,
                self.z_dim()
            )));
        }
        let log_std_slope = params[net.weight_index(0, 1, 0)];
        if log_std_slope != 0.0 {
            return Err(Error::NotAffine(format!(
                "log-std depends on λ (slope {log_std_slope})"
            )));
        }
        let a = params[net.weight_index(0, 0, 0)];
        let b = params[net.bias_index(0, 0)];
        let s = params[net.bias_index(0, 1)].exp();
        Ok((a, b, s))
    }

    /// Exact `Q(λ | z, θ)` for the affine scalar family.
    pub fn exact_aux_posterior(&self, params: &[f64], z: f64) -> Result<DiagGaussian<f64>> {
        let (a, b, s) = self.affine_coefficients(params)?;
        let denom = a * a + s * s;
        Ok(DiagGaussian::new(
            vec![a * (z - b) / denom],
            vec![(s * s / denom).sqrt()],
        )?)
    }
}

/// `R(λ | z[, x], φ)`. Evaluated only; nothing ever samples from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxPosterior {
    r_net: Mlp,
    conditions_on_x: bool,
}

impl AuxPosterior {
    pub fn new(r_net: Mlp, conditions_on_x: bool) -> Self {
        Self {
            r_net,
            conditions_on_x,
        }
    }

    /// Register a freshly initialised net `z[, x] ↦ R(λ|·)` in `pv`.
    pub fn register(
        pv: &mut ParamVector,
        z_dim: usize,
        x_dim: Option<usize>,
        lambda_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let input = z_dim + x_dim.unwrap_or(0);
        let net = Mlp::register(pv, "phi.r", Mlp::shape(input, hidden, lambda_dim), seed)?;
        Ok(Self::new(net, x_dim.is_some()))
    }

    /// Register an x-conditioned `R` whose x weights are zero and whose other
    /// weights equal those [`AuxPosterior::register`] draws without x for the
    /// same seed, so it starts out computing exactly the plain `R`.
    pub fn register_x_detached(
        pv: &mut ParamVector,
        z_dim: usize,
        x_dim: usize,
        lambda_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let aux = Self::register(pv, z_dim, Some(x_dim), lambda_dim, hidden, seed)?;
        let plain = Mlp::new("phi.r", Mlp::shape(z_dim, hidden, lambda_dim), 0)?;
        for (name, value) in plain.param_names().iter().zip(plain.init_values(seed)) {
            pv.set(name, value);
        }
        for i in aux.x_weight_positions(z_dim) {
            pv.values_mut()[i] = 0.0;
        }
        Ok(aux)
    }

    /// Positions of the first-layer weights reading `x` (empty without x).
    pub fn x_weight_positions(&self, z_dim: usize) -> Vec<usize> {
        if !self.conditions_on_x {
            return Vec::new();
        }
        let net = &self.r_net;
        let width = net.widths()[1];
        (0..width)
            .flat_map(|o| (z_dim..net.input_dim()).map(move |i| net.weight_index(0, o, i)))
            .collect()
    }

    pub fn r_net(&self) -> &Mlp {
        &self.r_net
    }

    pub fn conditions_on_x(&self) -> bool {
        self.conditions_on_x
    }

    pub fn lambda_dim(&self) -> usize {
        self.r_net.target_dim()
    }

    pub fn dist<T: Real>(&self, params: &[T], z: &[T], x: &[f64]) -> Result<DiagGaussian<T>> {
        let mut input = z.to_vec();
        if self.conditions_on_x {
            input.extend(x.iter().map(|&v| T::cst(v)));
        }
        Ok(self.r_net.forward(params, &input)?)
    }

    /// `log R(λ | z[, x], φ)`
    pub fn log_density<T: Real>(&self, params: &[T], lambda: &[T], z: &[T], x: &[f64]) -> Result<T> {
        Ok(self.dist(params, z, x)?.logpdf(lambda)?)
    }

    /// Set `R` to the affine net reproducing `g(z) = N(c z + d, t²)` for
    /// scalar `z` and `λ` (no x input).
    pub fn set_affine(&self, params: &mut [f64], slope: f64, intercept: f64, std: f64) -> Result<()> {
        let net = &self.r_net;
        if !net.is_affine() || net.input_dim() != 1 || net.target_dim() != 1 {
            return Err(Error::NotAffine(format!("R net has widths {:?}", net.widths())));
        }
        params[net.weight_index(0, 0, 0)] = slope;
        params[net.bias_index(0, 0)] = intercept;
        params[net.weight_index(0, 1, 0)] = 0.0;
        params[net.bias_index(0, 1)] = std.ln();
        Ok(())
    }
}

/// Set an affine hierarchical family to `Q(z|λ) = N(aλ + b, s²)`.
pub fn set_affine_conditional(h: &HierarchicalPosterior, params: &mut [f64], a: f64, b: f64, s: f64) -> Result<()> {
    let net = h.cond_net();
    if !net.is_affine() || h.lambda_dim() != 1 || h.z_dim() != 1 {
        return Err(Error::NotAffine(format!("conditional net has widths {:?}", net.widths())));
    }
    params[net.weight_index(0, 0, 0)] = a;
    params[net.bias_index(0, 0)] = b;
    params[net.weight_index(0, 1, 0)] = 0.0;
    params[net.bias_index(0, 1)] = s.ln();
    Ok(())
}
