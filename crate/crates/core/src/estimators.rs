//! Monte Carlo ELBO estimators, the HVM/ADGM equivalence check and the
//! gradient-ascent training loop.
//!
//! Sample `k` of an estimate seeded with `seed` draws its noise from the
//! stream keyed by `(seed, k)`: λ-noise first, then z-noise. Per-sample
//! terms may be computed in parallel; every reduction runs in sample order.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Real, Tape, Var};
use crate::distributions::{derive_seed, NoiseDraw};
use crate::error::{Error, Result};
use crate::models::{extend, ExtendedModel, GenerativeModel};
use crate::posteriors::{AuxPosterior, HierarchicalPosterior, SimplePosterior, PHI_PREFIX, THETA_PREFIX};

/// Default samples per gradient step.
pub const DEFAULT_SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub mean: f64,
    pub per_sample_terms: Vec<f64>,
    /// Sample standard deviation over `√N`; zero when `N = 1`.
    pub std_error: f64,
    pub n: usize,
}

impl ElboEstimate {
    pub fn from_terms(terms: Vec<f64>) -> Self {
        let n = terms.len();
        let mean = terms.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            per_sample_terms: terms,
            std_error,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Standard,
    Hvm,
    Adgm,
    HvmX,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Standard => "standard",
            EstimatorKind::Hvm => "hvm",
            EstimatorKind::Adgm => "adgm",
            EstimatorKind::HvmX => "hvm_x",
        }
    }
}

/// A per-sample ELBO term together with everything needed to evaluate it.
#[derive(Debug, Clone)]
pub enum Objective {
    /// `log P(x, z) − log Q(z|θ)`
    Standard {
        model: GenerativeModel,
        q: SimplePosterior,
        x: Vec<f64>,
    },
    /// `log P(x, z) + log R(λ|z[,x]) − log Q(z, λ|θ)`. Covers both the
    /// plain and the x-conditioned auxiliary density.
    Hvm {
        model: GenerativeModel,
        h: HierarchicalPosterior,
        r: AuxPosterior,
        x: Vec<f64>,
    },
    /// `log P(x, z, λ|φ) − log Q(z, λ|θ)`
    Adgm {
        ext: ExtendedModel,
        h: HierarchicalPosterior,
        x: Vec<f64>,
    },
}

impl Objective {
    pub fn standard(model: GenerativeModel, q: SimplePosterior, x: Vec<f64>) -> Result<Self> {
        Error::dim("posterior", model.z_dim(), q.dim())?;
        Error::dim("observation", model.x_dim(), x.len())?;
        Ok(Objective::Standard { model, q, x })
    }

    pub fn hvm(model: GenerativeModel, h: HierarchicalPosterior, r: AuxPosterior, x: Vec<f64>) -> Result<Self> {
        Self::check_hier(&model, &h, &x)?;
        Error::dim("R target", h.lambda_dim(), r.lambda_dim())?;
        let input = model.z_dim() + if r.conditions_on_x() { model.x_dim() } else { 0 };
        Error::dim("R input", input, r.r_net().input_dim())?;
        Ok(Objective::Hvm { model, h, r, x })
    }

    pub fn adgm(ext: ExtendedModel, h: HierarchicalPosterior, x: Vec<f64>) -> Result<Self> {
        Self::check_hier(ext.base(), &h, &x)?;
        Error::dim("auxiliary target", h.lambda_dim(), ext.lambda_dim())?;
        Ok(Objective::Adgm { ext, h, x })
    }

    fn check_hier(model: &GenerativeModel, h: &HierarchicalPosterior, x: &[f64]) -> Result<()> {
        Error::dim("posterior", model.z_dim(), h.z_dim())?;
        Error::dim("observation", model.x_dim(), x.len())
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Objective::Standard { .. } => EstimatorKind::Standard,
            Objective::Hvm { r, .. } if r.conditions_on_x() => EstimatorKind::HvmX,
            Objective::Hvm { .. } => EstimatorKind::Hvm,
            Objective::Adgm { .. } => EstimatorKind::Adgm,
        }
    }

    fn noise_dims(&self) -> Vec<usize> {
        match self {
            Objective::Standard { q, .. } => vec![q.dim()],
            Objective::Hvm { h, .. } | Objective::Adgm { h, .. } => vec![h.lambda_dim(), h.z_dim()],
        }
    }

    /// Term for sample `k` of the estimate seeded with `seed`.
    pub fn term<T: Real>(&self, params: &[T], seed: u64, k: usize) -> Result<T> {
        let noise = NoiseDraw::blocks(seed, k as u64, &self.noise_dims());
        match self {
            Objective::Standard { model, q, x } => {
                let dist = q.dist(params)?;
                let z = dist.reparam_sample(&noise[0].eps)?;
                Ok(model.log_joint(x, &z)? - dist.logpdf(&z)?)
            }
            Objective::Hvm { model, h, r, x } => {
                let s = h.sample_joint(params, &noise[0], &noise[1])?;
                let log_p = model.log_joint(x, &s.z)?;
                let log_r = r.log_density(params, &s.lambda, &s.z, x)?;
                Ok(log_p + log_r - s.log_q)
            }
            Objective::Adgm { ext, h, x } => {
                let s = h.sample_joint(params, &noise[0], &noise[1])?;
                Ok(ext.log_joint_ext(params, x, &s.z, &s.lambda)? - s.log_q)
            }
        }
    }

    /// Plain-number estimate from `n` samples.
    pub fn estimate(&self, params: &[f64], n: usize, seed: u64) -> Result<ElboEstimate> {
        if n == 0 {
            return Err(Error::ZeroSamples);
        }
        let terms: Vec<Result<f64>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let t = self.term(params, seed, k)?;
                if t.is_finite() {
                    Ok(t)
                } else {
                    Err(Error::NonFiniteTerm {
                        sample: k,
                        detail: format!("term evaluated to {t}"),
                    })
                }
            })
            .collect();
        Ok(ElboEstimate::from_terms(terms.into_iter().collect::<Result<_>>()?))
    }

    /// Estimate plus the gradient of its mean with respect to `params`.
    ///
    /// Each sample is differentiated on its own tape; gradients are summed in
    /// sample order.
    pub fn estimate_with_grad(&self, params: &[f64], n: usize, seed: u64) -> Result<(ElboEstimate, Vec<f64>)> {
        if n == 0 {
            return Err(Error::ZeroSamples);
        }
        let per_sample: Vec<Result<(f64, Vec<f64>)>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let tape = Tape::new();
                let leaves: Vec<Var<'_>> = params.iter().map(|&v| tape.var(v)).collect();
                let term = self.term(&leaves, seed, k)?;
                let fail = |detail: String| Error::NonFiniteTerm { sample: k, detail };
                if let Some(fault) = tape.fault() {
                    return Err(fail(fault.to_string()));
                }
                if !term.value().is_finite() {
                    return Err(fail(format!("term evaluated to {}", term.value())));
                }
                let grad = tape.backward(term).map_err(|e| fail(e.to_string()))?;
                Ok((term.value(), grad.wrt_all(&leaves)))
            })
            .collect();
        let mut terms = Vec::with_capacity(n);
        let mut grad = vec![0.0; params.len()];
        for item in per_sample {
            let (t, g) = item?;
            terms.push(t);
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        for g in &mut grad {
            *g /= n as f64;
        }
        Ok((ElboEstimate::from_terms(terms), grad))
    }
}

/// Standard ELBO estimate.
pub fn elbo_standard(
    model: &GenerativeModel,
    q: &SimplePosterior,
    params: &ParamVector,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    Objective::standard(model.clone(), q.clone(), x.to_vec())?.estimate(params.values(), n, seed)
}

/// Modified ELBO estimate with `R(λ|z)`.
pub fn elbo_hvm(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &ParamVector,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    if r.conditions_on_x() {
        return Err(Error::InvalidParameter(
            "elbo_hvm takes an R without x input; use elbo_hvm_x".into(),
        ));
    }
    Objective::hvm(model.clone(), h.clone(), r.clone(), x.to_vec())?.estimate(params.values(), n, seed)
}

/// Modified ELBO estimate with `R(λ|z, x)`.
pub fn elbo_hvm_x(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &ParamVector,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    if !r.conditions_on_x() {
        return Err(Error::InvalidParameter(
            "elbo_hvm_x needs an R that conditions on x".into(),
        ));
    }
    Objective::hvm(model.clone(), h.clone(), r.clone(), x.to_vec())?.estimate(params.values(), n, seed)
}

/// Standard ELBO of the extended model.
pub fn elbo_adgm(
    ext: &ExtendedModel,
    h: &HierarchicalPosterior,
    params: &ParamVector,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    Objective::adgm(ext.clone(), h.clone(), x.to_vec())?.estimate(params.values(), n, seed)
}

/// Largest per-sample difference between the modified ELBO with `R` and the
/// extended-model ELBO built by renaming `R` to a generative factor.
pub fn check_equivalence(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &ParamVector,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<f64> {
    check_equivalence_seeds(model, h, r, params, x, n, seed, seed)
}

/// As [`check_equivalence`] with separate seeds for the two paths.
#[allow(clippy::too_many_arguments)]
pub fn check_equivalence_seeds(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &ParamVector,
    x: &[f64],
    n: usize,
    seed_hvm: u64,
    seed_adgm: u64,
) -> Result<f64> {
    let hvm = Objective::hvm(model.clone(), h.clone(), r.clone(), x.to_vec())?;
    let ext = extend(model.clone(), r.r_net().clone(), r.conditions_on_x())?;
    let adgm = Objective::adgm(ext, h.clone(), x.to_vec())?;
    let a = hvm.estimate(params.values(), n, seed_hvm)?;
    let b = adgm.estimate(params.values(), n, seed_adgm)?;
    Ok(a.per_sample_terms
        .iter()
        .zip(&b.per_sample_terms)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Which parameter groups move on a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// θ and φ together every step.
    #[default]
    Joint,
    /// θ on even steps, φ on odd steps.
    Alternate,
    ThetaOnly,
    PhiOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_samples: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            steps: 2000,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            schedule: Schedule::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config {
                field: "train.n_samples".into(),
                reason: "must be at least 1".into(),
            });
        }
        // Zero is allowed: it replays the estimates without moving anything.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                field: "train.learning_rate".into(),
                reason: format!("must be non-negative, got {}", self.learning_rate),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub elbo_mc: f64,
    pub std_error: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    /// Set when training stopped early; `trace` holds the rows before it.
    pub failure: Option<Error>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step on the entries flagged in `mask`.
    fn step(&mut self, values: &mut [f64], grad: &[f64], lr: f64, mask: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..values.len() {
            if !mask[i] {
                continue;
            }
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn group_masks(params: &ParamVector) -> (Vec<bool>, Vec<bool>) {
    let theta = params.names().iter().map(|n| n.starts_with(THETA_PREFIX)).collect();
    let phi = params.names().iter().map(|n| n.starts_with(PHI_PREFIX)).collect();
    (theta, phi)
}

/// Gradient ascent on the Monte Carlo ELBO. Step `s` uses noise seeded with
/// `derive_seed(cfg.seed, s)`; each row records the estimate and gradient
/// norm at the parameters before that step's update.
pub fn train(
    objective: &Objective,
    params: &mut ParamVector,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let all = vec![true; params.len()];
    let (theta, phi) = group_masks(params);
    let has_phi = phi.iter().any(|&b| b);
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let seed = derive_seed(cfg.seed, step as u64);
        let (est, grad) = match objective.estimate_with_grad(params.values(), cfg.n_samples, seed) {
            Ok(v) => v,
            Err(e) => {
                return Ok(TrainOutcome {
                    trace,
                    failure: Some(Error::NonFiniteGradient {
                        step,
                        detail: e.to_string(),
                    }),
                })
            }
        };
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            let bad = grad.iter().position(|g| !g.is_finite()).unwrap_or(0);
            return Ok(TrainOutcome {
                trace,
                failure: Some(Error::NonFiniteGradient {
                    step,
                    detail: format!("d/d{} = {}", params.names()[bad], grad[bad]),
                }),
            });
        }
        let row = TraceRow {
            step,
            elbo_mc: est.mean,
            std_error: est.std_error,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_row(&row);
        trace.push(row);

        let mask = match cfg.schedule {
            Schedule::Joint => &all,
            Schedule::Alternate if has_phi => {
                if step % 2 == 0 {
                    &theta
                } else {
                    &phi
                }
            }
            Schedule::Alternate => &all,
            Schedule::ThetaOnly => &theta,
            Schedule::PhiOnly => &phi,
        };
        match cfg.optimizer {
            OptimizerKind::Adam => adam.step(params.values_mut(), &grad, cfg.learning_rate, mask),
            OptimizerKind::Sgd => {
                for ((v, g), &on) in params.values_mut().iter_mut().zip(&grad).zip(mask.iter()) {
                    if on {
                        *v += cfg.learning_rate * g;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        trace,
        failure: None,
    })
}
