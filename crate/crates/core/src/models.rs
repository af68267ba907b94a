//! Generative test models with evaluatable joints and evidence oracles.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::distributions::{DiagGaussian, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::nets::Mlp;
use crate::oracle::{log_integrate, Grid};

fn normal_logpdf<T: Real>(x: T, mean: T, var: f64) -> T {
    let r = x - mean;
    T::cst(-HALF_LN_2PI - 0.5 * var.ln()) - r.square() * T::cst(0.5 / var)
}

/// A joint `P(x, z) = P(x|z) P(z)` with frozen parameters.
///
/// Both built-ins factorize over dimensions: `z_i` generates `x_i`
/// independently, so evidence in `d` dimensions is a sum of 1-D terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum GenerativeModel {
    /// `z ~ N(0, prior_var)`, `x | z ~ N(z, lik_var)`.
    Conjugate {
        prior_var: f64,
        lik_var: f64,
        dim: usize,
    },
    /// `z ~ N(0, 1)`, `x | z ~ N(z², lik_std²)`. The posterior splits into two
    /// modes near `±√x`; `sep` is the intended mode location, so
    /// `x = sep²` is the canonical observation.
    Bimodal { sep: f64, lik_std: f64, dim: usize },
}

/// 1-D conjugate model.
pub fn conjugate_gaussian_model(prior_var: f64, lik_var: f64) -> Result<GenerativeModel> {
    GenerativeModel::conjugate(prior_var, lik_var, 1)
}

/// 1-D bimodal model.
pub fn bimodal_model(sep: f64, lik_std: f64) -> Result<GenerativeModel> {
    GenerativeModel::bimodal(sep, lik_std, 1)
}

impl GenerativeModel {
    pub fn conjugate(prior_var: f64, lik_var: f64, dim: usize) -> Result<Self> {
        let model = GenerativeModel::Conjugate {
            prior_var,
            lik_var,
            dim,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn bimodal(sep: f64, lik_std: f64, dim: usize) -> Result<Self> {
        let model = GenerativeModel::Bimodal { sep, lik_std, dim };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            GenerativeModel::Conjugate {
                prior_var,
                lik_var,
                ..
            } => {
                positive("prior_var", prior_var)?;
                positive("lik_var", lik_var)?;
            }
            GenerativeModel::Bimodal { sep, lik_std, .. } => {
                positive("lik_std", lik_std)?;
                if !sep.is_finite() {
                    return Err(Error::InvalidParameter(format!("sep must be finite, got {sep}")));
                }
            }
        }
        if self.z_dim() == 0 {
            return Err(Error::InvalidParameter("dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn z_dim(&self) -> usize {
        match *self {
            GenerativeModel::Conjugate { dim, .. } | GenerativeModel::Bimodal { dim, .. } => dim,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.z_dim()
    }

    pub fn label(&self) -> &'static str {
        match self {
            GenerativeModel::Conjugate { .. } => "conjugate",
            GenerativeModel::Bimodal { .. } => "bimodal",
        }
    }

    /// `log P(x, z)`, differentiable in `z`.
    pub fn log_joint<T: Real>(&self, x: &[f64], z: &[T]) -> Result<T> {
        Error::dim("observation", self.x_dim(), x.len())?;
        Error::dim("latent", self.z_dim(), z.len())?;
        let terms: Vec<T> = x
            .iter()
            .zip(z)
            .map(|(&xi, &zi)| match *self {
                GenerativeModel::Conjugate {
                    prior_var, lik_var, ..
                } => normal_logpdf(zi, T::cst(0.0), prior_var) + normal_logpdf(T::cst(xi), zi, lik_var),
                GenerativeModel::Bimodal { lik_std, .. } => {
                    normal_logpdf(zi, T::cst(0.0), 1.0)
                        + normal_logpdf(T::cst(xi), zi.square(), lik_std * lik_std)
                }
            })
            .collect();
        Ok(T::sum(&terms))
    }

    /// `log P(x)`: closed form for the conjugate model, 1-D quadrature per
    /// dimension for the bimodal one.
    pub fn oracle_log_evidence(&self, x: &[f64]) -> Result<f64> {
        Error::dim("observation", self.x_dim(), x.len())?;
        match *self {
            GenerativeModel::Conjugate {
                prior_var, lik_var, ..
            } => Ok(x
                .iter()
                .map(|&xi| normal_logpdf(xi, 0.0, prior_var + lik_var))
                .sum()),
            GenerativeModel::Bimodal { lik_std, .. } => {
                let grid = Grid::default_latent(1)?;
                let one = GenerativeModel::Bimodal {
                    sep: 0.0,
                    lik_std,
                    dim: 1,
                };
                Ok(x
                    .iter()
                    .map(|&xi| log_integrate(&grid, |z| one.log_joint(&[xi], z).unwrap()))
                    .sum())
            }
        }
    }

    /// Exact posterior when it is Gaussian.
    pub fn oracle_posterior(&self, x: &[f64]) -> Option<DiagGaussian<f64>> {
        match *self {
            GenerativeModel::Conjugate {
                prior_var, lik_var, ..
            } if x.len() == self.x_dim() => {
                let shrink = prior_var / (prior_var + lik_var);
                let std = (prior_var * lik_var / (prior_var + lik_var)).sqrt();
                DiagGaussian::new(
                    x.iter().map(|&xi| xi * shrink).collect(),
                    vec![std; x.len()],
                )
                .ok()
            }
            _ => None,
        }
    }
}

/// `P(x, z, λ | φ) = P(x|z) P(z) P(λ | z[, x], φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedModel {
    base: GenerativeModel,
    aux_net: Mlp,
    condition_on_x: bool,
}

/// Extend `base` with the auxiliary factor computed by `r_net`.
pub fn extend(base: GenerativeModel, r_net: Mlp, condition_on_x: bool) -> Result<ExtendedModel> {
    let expected = base.z_dim() + if condition_on_x { base.x_dim() } else { 0 };
    Error::dim("auxiliary net input", expected, r_net.input_dim())?;
    Ok(ExtendedModel {
        base,
        aux_net: r_net,
        condition_on_x,
    })
}

impl ExtendedModel {
    pub fn base(&self) -> &GenerativeModel {
        &self.base
    }

    pub fn aux_net(&self) -> &Mlp {
        &self.aux_net
    }

    pub fn conditions_on_x(&self) -> bool {
        self.condition_on_x
    }

    pub fn lambda_dim(&self) -> usize {
        self.aux_net.target_dim()
    }

    /// `P(λ | z[, x], φ)`
    pub fn aux_conditional<T: Real>(&self, params: &[T], x: &[f64], z: &[T]) -> Result<DiagGaussian<T>> {
        let mut input = z.to_vec();
        if self.condition_on_x {
            input.extend(x.iter().map(|&v| T::cst(v)));
        }
        Ok(self.aux_net.forward(params, &input)?)
    }

    /// `log P(x, z, λ | φ)`
    pub fn log_joint_ext<T: Real>(&self, params: &[T], x: &[f64], z: &[T], lambda: &[T]) -> Result<T> {
        let base = self.base.log_joint(x, z)?;
        let aux = self.aux_conditional(params, x, z)?.logpdf(lambda)?;
        Ok(base + aux)
    }
}
