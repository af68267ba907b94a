//! Brute-force trapezoid quadrature for the quantities variational methods
//! treat as intractable: evidence, the hierarchical marginal `Q(z|θ)`,
//! exact `L(θ)`, exact `L(θ, φ)` and the expected KL gap between them.
//!
//! All sums run over fixed chunks of the flattened grid and are combined in
//! chunk order, so results do not depend on thread count.
//!
//! Grids are truncated: values are only trustworthy when the densities put
//! negligible mass outside the box (the default is `[-12, 12]` per axis).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::GenerativeModel;
use crate::posteriors::{AuxPosterior, HierarchicalPosterior, SimplePosterior};

pub const MIN_POINTS: usize = 101;
pub const MAX_TOTAL_POINTS: usize = 10_000_000;
pub const DEFAULT_BOUND: f64 = 12.0;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!("grid bounds [{lo}, {hi}]")));
        }
        if count < MIN_POINTS || count.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "grid point count must be odd and >= {MIN_POINTS}, got {count}"
            )));
        }
        Ok(Self { lo, hi, count })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + self.step() * i as f64
    }

    pub fn log_weight(&self, i: usize) -> f64 {
        let end = i == 0 || i == self.count - 1;
        (if end { 0.5 } else { 1.0 } * self.step()).ln()
    }
}

/// Tensor-product trapezoid grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidParameter("grid needs at least one axis".into()));
        }
        let total = axes
            .iter()
            .try_fold(1usize, |acc, a| acc.checked_mul(a.count))
            .filter(|&t| t <= MAX_TOTAL_POINTS);
        if total.is_none() {
            return Err(Error::OracleInfeasible(format!(
                "grid exceeds {MAX_TOTAL_POINTS} points"
            )));
        }
        Ok(Self { axes })
    }

    /// `dim` copies of `[−12, 12]` with `count` points each.
    pub fn uniform(dim: usize, count: usize) -> Result<Self> {
        Grid::new(vec![Axis::new(-DEFAULT_BOUND, DEFAULT_BOUND, count)?; dim])
    }

    /// Evidence grid for `dim`-dimensional z: 4001 points in 1-D, 401² in 2-D.
    pub fn default_latent(dim: usize) -> Result<Self> {
        match dim {
            1 => Grid::uniform(1, 4001),
            2 => Grid::uniform(2, 401),
            d => Err(Error::OracleInfeasible(format!("{d}-dimensional latent"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn total_points(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    /// Same bounds, `2·count − 1` points per axis (halved spacing).
    pub fn refined(&self) -> Result<Self> {
        Grid::new(
            self.axes
                .iter()
                .map(|a| Axis::new(a.lo, a.hi, 2 * a.count - 1))
                .collect::<Result<_>>()?,
        )
    }

    /// Point and log trapezoid weight at flat index `flat` (last axis fastest).
    pub fn point(&self, mut flat: usize, out: &mut [f64]) -> f64 {
        let mut lw = 0.0;
        for (k, axis) in self.axes.iter().enumerate().rev() {
            let i = flat % axis.count;
            flat /= axis.count;
            out[k] = axis.point(i);
            lw += axis.log_weight(i);
        }
        lw
    }

    pub fn points(&self) -> impl Iterator<Item = (Vec<f64>, f64)> + '_ {
        (0..self.total_points()).map(move |i| {
            let mut p = vec![0.0; self.dim()];
            let lw = self.point(i, &mut p);
            (p, lw)
        })
    }
}

/// Default `(z, λ)` grids for the hierarchical oracles: the same odd count on
/// every axis, at most 2001, with the joint total within budget.
pub fn joint_grids(z_dim: usize, lambda_dim: usize) -> Result<(Grid, Grid)> {
    let axes = z_dim + lambda_dim;
    if z_dim == 0 || lambda_dim == 0 || z_dim > 2 || lambda_dim > 2 {
        return Err(Error::OracleInfeasible(format!(
            "z dim {z_dim}, λ dim {lambda_dim}"
        )));
    }
    let mut count = (MAX_TOTAL_POINTS as f64).powf(1.0 / axes as f64).floor() as usize;
    count = count.min(2001);
    while count.checked_pow(axes as u32).is_none_or(|t| t > MAX_TOTAL_POINTS) {
        count -= 1;
    }
    if count.is_multiple_of(2) {
        count -= 1;
    }
    if count < MIN_POINTS {
        return Err(Error::OracleInfeasible(format!(
            "joint grid over {axes} dimensions exceeds {MAX_TOTAL_POINTS} points"
        )));
    }
    Ok((Grid::uniform(z_dim, count)?, Grid::uniform(lambda_dim, count)?))
}

fn log_add(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    // (max, Σ exp(v − max))
    let (ma, sa) = a;
    let (mb, sb) = b;
    if sa == 0.0 {
        return b;
    }
    if sb == 0.0 {
        return a;
    }
    if ma >= mb {
        (ma, sa + sb * (mb - ma).exp())
    } else {
        (mb, sb + sa * (ma - mb).exp())
    }
}

/// `log ∫ exp(f)` over `grid`.
pub fn log_integrate<F>(grid: &Grid, log_f: F) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let total = grid.total_points();
    let n_chunks = total.div_ceil(CHUNK);
    let partials: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut p = vec![0.0; grid.dim()];
            let mut acc = (f64::NEG_INFINITY, 0.0);
            for i in c * CHUNK..((c + 1) * CHUNK).min(total) {
                let lw = grid.point(i, &mut p);
                let v = lw + log_f(&p);
                if v > f64::NEG_INFINITY {
                    acc = log_add(acc, (v, 1.0));
                }
            }
            acc
        })
        .collect();
    let (m, s) = partials
        .into_iter()
        .fold((f64::NEG_INFINITY, 0.0), log_add);
    if s == 0.0 {
        f64::NEG_INFINITY
    } else {
        m + s.ln()
    }
}

/// `∫ f` over `grid`.
pub fn integrate<F>(grid: &Grid, f: F) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let total = grid.total_points();
    let n_chunks = total.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut p = vec![0.0; grid.dim()];
            let mut acc = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(total) {
                let lw = grid.point(i, &mut p);
                acc += lw.exp() * f(&p);
            }
            acc
        })
        .collect();
    partials.into_iter().sum()
}

fn check_latent(model: &GenerativeModel, grid: &Grid) -> Result<()> {
    if model.z_dim() > 2 {
        return Err(Error::OracleInfeasible(format!(
            "{}-dimensional latent",
            model.z_dim()
        )));
    }
    Error::dim("z grid", model.z_dim(), grid.dim())
}

/// `log P(x) = log ∫ P(x, z) dz`
pub fn quad_evidence(model: &GenerativeModel, x: &[f64], grid: &Grid) -> Result<f64> {
    check_latent(model, grid)?;
    Error::dim("observation", model.x_dim(), x.len())?;
    Ok(log_integrate(grid, |z| model.log_joint(x, z).expect("dims checked")))
}

/// `∫ q(z) [log P(x, z) − log q(z)] dz` for a density given by `log_q`.
pub fn quad_elbo_density<F>(model: &GenerativeModel, x: &[f64], log_q: F, grid: &Grid) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check_latent(model, grid)?;
    Error::dim("observation", model.x_dim(), x.len())?;
    Ok(integrate(grid, |z| {
        let lq = log_q(z);
        let q = lq.exp();
        if q == 0.0 {
            0.0
        } else {
            q * (model.log_joint(x, z).expect("dims checked") - lq)
        }
    }))
}

/// Exact `L(θ)` for the simple family.
pub fn quad_elbo_simple(
    model: &GenerativeModel,
    q: &SimplePosterior,
    params: &[f64],
    x: &[f64],
    grid: &Grid,
) -> Result<f64> {
    Error::dim("posterior", model.z_dim(), q.dim())?;
    let dist = q.dist(params)?;
    quad_elbo_density(model, x, |z| dist.logpdf(z).expect("dims checked"), grid)
}

/// The three hierarchical oracle values from one pass over the `(z, λ)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierQuantities {
    /// `L(θ)` of the induced marginal `Q(z|θ)`.
    pub l_marginal: f64,
    /// `L(θ, φ)`
    pub l_modified: f64,
    /// `E_{Q(z)} KL(Q(λ|z) ‖ R(λ|z))`
    pub kl_gap: f64,
}

pub fn hier_quantities(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &[f64],
    x: &[f64],
    z_grid: &Grid,
    lambda_grid: &Grid,
) -> Result<HierQuantities> {
    check_latent(model, z_grid)?;
    Error::dim("posterior", model.z_dim(), h.z_dim())?;
    Error::dim("λ grid", h.lambda_dim(), lambda_grid.dim())?;
    Error::dim("R target", h.lambda_dim(), r.lambda_dim())?;
    Error::dim("observation", model.x_dim(), x.len())?;
    if h.lambda_dim() > 2 {
        return Err(Error::OracleInfeasible(format!(
            "{}-dimensional λ",
            h.lambda_dim()
        )));
    }
    let joint_total = z_grid.total_points().saturating_mul(lambda_grid.total_points());
    if joint_total > MAX_TOTAL_POINTS {
        return Err(Error::OracleInfeasible(format!(
            "joint grid of {joint_total} points exceeds {MAX_TOTAL_POINTS}"
        )));
    }

    struct LambdaPoint {
        lambda: Vec<f64>,
        log_w: f64,
        log_prior: f64,
        cond: crate::distributions::DiagGaussian<f64>,
    }
    let prior = h.prior::<f64>();
    let lambdas: Vec<LambdaPoint> = lambda_grid
        .points()
        .map(|(lambda, log_w)| {
            Ok(LambdaPoint {
                log_prior: prior.logpdf(&lambda)?,
                cond: h.conditional(params, &lambda)?,
                lambda,
                log_w,
            })
        })
        .collect::<Result<_>>()?;

    let total = z_grid.total_points();
    let n_chunks = total.div_ceil(64);
    let partials: Vec<Result<[f64; 3]>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut z = vec![0.0; z_grid.dim()];
            let mut lq = vec![0.0; lambdas.len()];
            let mut acc = [0.0; 3];
            for i in c * 64..((c + 1) * 64).min(total) {
                let log_wz = z_grid.point(i, &mut z);
                let mut lse = (f64::NEG_INFINITY, 0.0);
                for (j, lp) in lambdas.iter().enumerate() {
                    lq[j] = lp.log_prior + lp.cond.logpdf(&z)?;
                    lse = log_add(lse, (lp.log_w + lq[j], 1.0));
                }
                if lse.1 == 0.0 {
                    continue;
                }
                let log_qz = lse.0 + lse.1.ln();
                let log_p = model.log_joint(x, &z)?;
                let rdist = r.dist(params, &z, x)?;
                let qz = (log_wz + log_qz).exp();
                if qz > 0.0 {
                    acc[0] += qz * (log_p - log_qz);
                }
                for (j, lp) in lambdas.iter().enumerate() {
                    let wq = (log_wz + lp.log_w + lq[j]).exp();
                    if wq == 0.0 {
                        continue;
                    }
                    let log_r = rdist.logpdf(&lp.lambda)?;
                    acc[1] += wq * (log_p + log_r - lq[j]);
                    acc[2] += wq * (lq[j] - log_qz - log_r);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut sums = [0.0; 3];
    for p in partials {
        let p = p?;
        for k in 0..3 {
            sums[k] += p[k];
        }
    }
    Ok(HierQuantities {
        l_marginal: sums[0],
        l_modified: sums[1],
        kl_gap: sums[2],
    })
}

/// Exact `L(θ, φ)`.
pub fn quad_elbo_hier(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &[f64],
    x: &[f64],
    z_grid: &Grid,
    lambda_grid: &Grid,
) -> Result<f64> {
    Ok(hier_quantities(model, h, r, params, x, z_grid, lambda_grid)?.l_modified)
}

/// Exact `L(θ)` of the hierarchical marginal.
pub fn quad_elbo_marginal(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &[f64],
    x: &[f64],
    z_grid: &Grid,
    lambda_grid: &Grid,
) -> Result<f64> {
    Ok(hier_quantities(model, h, r, params, x, z_grid, lambda_grid)?.l_marginal)
}

/// Exact `E_{Q(z)} KL(Q(λ|z) ‖ R(λ|z))`. The model only supplies dimensions.
pub fn kl_gap(
    model: &GenerativeModel,
    h: &HierarchicalPosterior,
    r: &AuxPosterior,
    params: &[f64],
    x: &[f64],
    z_grid: &Grid,
    lambda_grid: &Grid,
) -> Result<f64> {
    Ok(hier_quantities(model, h, r, params, x, z_grid, lambda_grid)?.kl_gap)
}

/// `log P(x) ≥ L(θ) ≥ L(θ, φ)` with the slack of each link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundChain {
    pub log_evidence: f64,
    pub l_theta: f64,
    pub l_theta_phi: Option<f64>,
}

impl BoundChain {
    /// `log P(x) − L(θ)`
    pub fn evidence_slack(&self) -> f64 {
        self.log_evidence - self.l_theta
    }

    /// `L(θ) − L(θ, φ)`
    pub fn gap_slack(&self) -> Option<f64> {
        self.l_theta_phi.map(|l| self.l_theta - l)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.evidence_slack() >= -tol && self.gap_slack().is_none_or(|g| g >= -tol)
    }
}
