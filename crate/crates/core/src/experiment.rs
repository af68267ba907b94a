//! Experiment configuration, the training run with its artifacts, and bound
//! certification of checkpoints.
//!
//! A run writes into its output directory:
//!
//! * `trace.csv` — one row per step, flushed as it is produced,
//! * `summary.json` — final estimate, oracle chain, diagnostics, failure,
//! * `elbo.svg` — training curve,
//! * `posterior.svg` — for 1-D latents: true posterior, learned marginal and
//!   a histogram of posterior samples,
//! * `checkpoint_init.txt` / `checkpoint.txt` — parameters before and after.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::checkpoint;
use crate::distributions::{derive_seed, NoiseDraw};
use crate::error::{Error, Result};
use crate::estimators::{check_equivalence, train, EstimatorKind, Objective, TraceRow, TrainConfig};
use crate::models::{extend, GenerativeModel};
use crate::oracle::{hier_quantities, joint_grids, quad_elbo_simple, BoundChain, Grid};
use crate::plot::Chart;
use crate::posteriors::{AuxPosterior, HierarchicalPosterior, SimplePosterior};
use crate::stats::{dip_test, histogram, DipTest};

pub const TRACE_HEADER: &str = "step,elbo_mc,std_error,grad_norm,wall_ms";
/// Slack allowed in each link of the certified bound chain.
pub const ORACLE_TOL: f64 = 1e-6;
pub const FINAL_SAMPLES: usize = 10_000;
const EQUIVALENCE_SAMPLES: usize = 256;
const POSTERIOR_SAMPLES: usize = 2000;
const DIP_REPS: usize = 200;
const DIP_ALPHA: f64 = 0.05;

// Initialisation and diagnostics draw from the run seed at indices no
// training step reaches.
const STREAM_THETA_INIT: u64 = u64::MAX;
const STREAM_PHI_INIT: u64 = u64::MAX - 1;
const STREAM_FINAL: u64 = u64::MAX - 2;
const STREAM_SAMPLES: u64 = u64::MAX - 3;
const STREAM_DIP: u64 = u64::MAX - 4;
const STREAM_EQUIVALENCE: u64 = u64::MAX - 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Conjugate,
    Bimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: ModelName,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lik_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sep: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lik_std: Option<f64>,
    /// Observation; defaults to 1 (conjugate) or `sep²` (bimodal) per dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(config_err(field, format!("must be positive and finite, got {v}")))
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<GenerativeModel> {
        if self.dim == 0 {
            return Err(config_err("model.dim", "must be at least 1"));
        }
        let foreign = |fields: [(&str, Option<f64>); 2], model: &str| {
            for (f, v) in fields {
                if v.is_some() {
                    return Err(config_err(&format!("model.{f}"), format!("not a parameter of the {model} model")));
                }
            }
            Ok(())
        };
        match self.name {
            ModelName::Conjugate => {
                foreign([("sep", self.sep), ("lik_std", self.lik_std)], "conjugate")?;
                GenerativeModel::conjugate(
                    positive("model.prior_var", self.prior_var.unwrap_or(1.0))?,
                    positive("model.lik_var", self.lik_var.unwrap_or(1.0))?,
                    self.dim,
                )
            }
            ModelName::Bimodal => {
                foreign([("prior_var", self.prior_var), ("lik_var", self.lik_var)], "bimodal")?;
                let sep = self.sep.unwrap_or(1.0);
                if !sep.is_finite() {
                    return Err(config_err("model.sep", format!("must be finite, got {sep}")));
                }
                GenerativeModel::bimodal(sep, positive("model.lik_std", self.lik_std.unwrap_or(0.3))?, self.dim)
            }
        }
    }

    pub fn observation(&self) -> Result<Vec<f64>> {
        match &self.x {
            Some(x) if x.len() != self.dim => Err(config_err(
                "model.x",
                format!("expected {} values, got {}", self.dim, x.len()),
            )),
            Some(x) if x.iter().any(|v| !v.is_finite()) => Err(config_err("model.x", "values must be finite")),
            Some(x) => Ok(x.clone()),
            None => {
                let v = match self.name {
                    ModelName::Conjugate => 1.0,
                    ModelName::Bimodal => self.sep.unwrap_or(1.0).powi(2),
                };
                Ok(vec![v; self.dim])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Simple,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorSection {
    pub family: Family,
    pub estimator: EstimatorKind,
    /// Auxiliary dimension `m`.
    #[serde(default = "one")]
    pub lambda_dim: usize,
    /// Hidden widths of the conditional net `λ ↦ Q(z|λ)`.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Hidden widths of the `R` net.
    #[serde(default = "default_hidden")]
    pub r_hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_log_std: Option<Vec<f64>>,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub oracle: bool,
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            oracle: true,
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub posterior: PosteriorSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub no_oracle: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Checkpoint(format!("cannot serialize config: {e}")))
    }

    pub fn apply(&mut self, opts: &RunOptions) {
        if let Some(seed) = opts.seed {
            self.train.seed = seed;
        }
        if let Some(dir) = &opts.out_dir {
            self.output.dir = dir.clone();
        }
        if opts.no_oracle {
            self.output.oracle = false;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        self.model.observation()?;
        let p = &self.posterior;
        match (p.family, p.estimator) {
            (Family::Simple, EstimatorKind::Standard) => {
                for (field, v) in [("posterior.init_mean", &p.init_mean), ("posterior.init_log_std", &p.init_log_std)] {
                    match v {
                        Some(v) if v.len() != model.z_dim() => {
                            return Err(config_err(field, format!("expected {} values, got {}", model.z_dim(), v.len())))
                        }
                        Some(v) if v.iter().any(|a| !a.is_finite()) => {
                            return Err(config_err(field, "values must be finite"))
                        }
                        _ => {}
                    }
                }
            }
            (Family::Simple, kind) => {
                return Err(config_err(
                    "posterior.estimator",
                    format!("`{}` needs the hierarchical family; the simple family uses `standard`", kind.name()),
                ))
            }
            (Family::Hierarchical, EstimatorKind::Standard) => {
                return Err(config_err(
                    "posterior.estimator",
                    "`standard` needs the simple family; use hvm, adgm or hvm_x",
                ))
            }
            (Family::Hierarchical, _) => {
                if p.lambda_dim == 0 {
                    return Err(config_err("posterior.lambda_dim", "must be at least 1"));
                }
                for (field, widths) in [("posterior.hidden", &p.hidden), ("posterior.r_hidden", &p.r_hidden)] {
                    if widths.contains(&0) {
                        return Err(config_err(field, "hidden widths must be positive"));
                    }
                }
                for (field, v) in [("posterior.init_mean", &p.init_mean), ("posterior.init_log_std", &p.init_log_std)] {
                    if v.is_some() {
                        return Err(config_err(field, "only used by the simple family"));
                    }
                }
            }
        }
        self.train.validate()
    }
}

/// Turn a TOML error into a field-named diagnostic.
fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim().to_string();
    let quoted = |prefix: &str| {
        msg.strip_prefix(prefix)
            .and_then(|r| r.split('`').next())
            .map(str::to_string)
    };
    let (section, key) = match e.span() {
        Some(span) => {
            let start = span.start.min(text.len());
            let line_end = text[start..].find('\n').map_or(text.len(), |i| start + i);
            let before = &text[..start];
            let section = text[..line_end]
                .lines()
                .rev()
                .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
                .map(|s| s.trim().to_string());
            let line_start = before.rfind('\n').map_or(0, |i| i + 1);
            let line = text[line_start..].lines().next().unwrap_or("");
            let key = line
                .split_once('=')
                .map(|(k, _)| k.trim().to_string())
                .filter(|k| !k.is_empty() && !k.starts_with('['));
            (section, key)
        }
        None => (None, None),
    };
    let key = quoted("missing field `").or(quoted("unknown field `")).or(key);
    let field = match (section, key) {
        (Some(s), Some(k)) if !s.contains(&k) => format!("{s}.{k}"),
        (Some(s), _) => s,
        (None, Some(k)) => k,
        (None, None) => "<config>".into(),
    };
    config_err(&field, msg)
}

/// A built experiment: model, objective and parameter vector.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: GenerativeModel,
    pub x: Vec<f64>,
    pub objective: Objective,
    pub params: ParamVector,
}

impl Experiment {
    /// Build with freshly initialised parameters derived from the train seed.
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model.build()?;
        let x = config.model.observation()?;
        let seed = config.train.seed;
        let p = &config.posterior;
        let dim = model.z_dim();
        let mut params = ParamVector::new();
        let objective = match p.estimator {
            EstimatorKind::Standard => {
                let mean = p.init_mean.clone().unwrap_or_else(|| vec![0.0; dim]);
                let log_std = p.init_log_std.clone().unwrap_or_else(|| vec![0.0; dim]);
                let q = SimplePosterior::register(&mut params, &mean, &log_std)?;
                Objective::standard(model.clone(), q, x.clone())?
            }
            kind => {
                let h = HierarchicalPosterior::register(
                    &mut params,
                    p.lambda_dim,
                    dim,
                    &p.hidden,
                    derive_seed(seed, STREAM_THETA_INIT),
                )?;
                let r_seed = derive_seed(seed, STREAM_PHI_INIT);
                let r = if kind == EstimatorKind::HvmX {
                    AuxPosterior::register_x_detached(&mut params, dim, model.x_dim(), p.lambda_dim, &p.r_hidden, r_seed)?
                } else {
                    AuxPosterior::register(&mut params, dim, None, p.lambda_dim, &p.r_hidden, r_seed)?
                };
                if kind == EstimatorKind::Adgm {
                    let ext = extend(model.clone(), r.r_net().clone(), false)?;
                    Objective::adgm(ext, h, x.clone())?
                } else {
                    Objective::hvm(model.clone(), h, r, x.clone())?
                }
            }
        };
        Ok(Self {
            config,
            model,
            x,
            objective,
            params,
        })
    }

    /// Build the layout of `config` and load `params` into it.
    pub fn with_params(config: ExperimentConfig, params: &ParamVector) -> Result<Self> {
        let mut exp = Self::build(config)?;
        if exp.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} parameters, checkpoint has {}",
                exp.params.len(),
                params.len()
            )));
        }
        if let Some((want, got)) = exp.params.names().iter().zip(params.names()).find(|(a, b)| a != b) {
            return Err(Error::Checkpoint(format!("expected parameter `{want}`, found `{got}`")));
        }
        exp.params.values_mut().copy_from_slice(params.values());
        Ok(exp)
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint) -> Result<Self> {
        Self::with_params(ck.config, &ck.params)
    }

    pub fn kind(&self) -> EstimatorKind {
        self.objective.kind()
    }

    /// `(Q(z, λ|θ), R)` for the hierarchical estimators.
    pub fn hierarchical(&self) -> Option<(&HierarchicalPosterior, AuxPosterior)> {
        match &self.objective {
            Objective::Standard { .. } => None,
            Objective::Hvm { h, r, .. } => Some((h, r.clone())),
            Objective::Adgm { ext, h, .. } => Some((h, AuxPosterior::new(ext.aux_net().clone(), ext.conditions_on_x()))),
        }
    }

    /// Exact bound chain and expected-KL gap, or an error when infeasible.
    pub fn oracle_chain(&self) -> Result<(BoundChain, Option<f64>)> {
        let log_evidence = self.model.oracle_log_evidence(&self.x)?;
        let v = self.params.values();
        match &self.objective {
            Objective::Standard { q, .. } => {
                let grid = Grid::default_latent(self.model.z_dim())?;
                let l_theta = quad_elbo_simple(&self.model, q, v, &self.x, &grid)?;
                Ok((
                    BoundChain {
                        log_evidence,
                        l_theta,
                        l_theta_phi: None,
                    },
                    None,
                ))
            }
            _ => {
                let (h, r) = self.hierarchical().expect("hierarchical objective");
                let (zg, lg) = joint_grids(h.z_dim(), h.lambda_dim())?;
                let hq = hier_quantities(&self.model, h, &r, v, &self.x, &zg, &lg)?;
                Ok((
                    BoundChain {
                        log_evidence,
                        l_theta: hq.l_marginal,
                        l_theta_phi: Some(hq.l_modified),
                    },
                    Some(hq.kl_gap),
                ))
            }
        }
    }

    pub fn certify(&self) -> OracleReport {
        match self.oracle_chain() {
            Ok((chain, kl_gap)) => OracleReport::from_chain(chain, kl_gap),
            Err(e) => OracleReport::uncertified(e.to_string()),
        }
    }

    /// `n` draws of `z` from the learned posterior (the marginal for the
    /// hierarchical family).
    pub fn sample_z(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let v = self.params.values();
        (0..n as u64)
            .map(|k| match &self.objective {
                Objective::Standard { q, .. } => {
                    let noise = NoiseDraw::blocks(seed, k, &[q.dim()]);
                    Ok(q.dist(v)?.reparam_sample(&noise[0].eps)?)
                }
                Objective::Hvm { h, .. } | Objective::Adgm { h, .. } => {
                    let noise = NoiseDraw::blocks(seed, k, &[h.lambda_dim(), h.z_dim()]);
                    Ok(h.sample_joint(v, &noise[0], &noise[1])?.z)
                }
            })
            .collect()
    }

    /// Learned (marginal) log-density of a 1-D `z`, by quadrature over λ for
    /// the hierarchical family.
    fn learned_log_density(&self, z: f64) -> Result<f64> {
        let v = self.params.values();
        match &self.objective {
            Objective::Standard { q, .. } => Ok(q.dist(v)?.logpdf(&[z])?),
            Objective::Hvm { h, .. } | Objective::Adgm { h, .. } => {
                let grid = match h.lambda_dim() {
                    1 => Grid::uniform(1, 2001)?,
                    m => Grid::uniform(m, 201)?,
                };
                h.marginal_q_oracle(v, &[z], &grid)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertStatus {
    /// Chain holds within [`ORACLE_TOL`].
    Certified,
    /// Chain computed and violated.
    Violated,
    /// Oracle infeasible for these dimensions (or failed).
    Uncertified,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub status: CertStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub log_evidence: Option<f64>,
    pub l_theta: Option<f64>,
    pub l_theta_phi: Option<f64>,
    pub kl_gap: Option<f64>,
    /// `log P(x) − L(θ)`
    pub evidence_slack: Option<f64>,
    /// `L(θ) − L(θ, φ)`
    pub gap_slack: Option<f64>,
}

impl OracleReport {
    pub fn from_chain(chain: BoundChain, kl_gap: Option<f64>) -> Self {
        Self {
            status: if chain.holds(ORACLE_TOL) {
                CertStatus::Certified
            } else {
                CertStatus::Violated
            },
            reason: None,
            log_evidence: Some(chain.log_evidence),
            l_theta: Some(chain.l_theta),
            l_theta_phi: chain.l_theta_phi,
            kl_gap,
            evidence_slack: Some(chain.evidence_slack()),
            gap_slack: chain.gap_slack(),
        }
    }

    fn empty(status: CertStatus, reason: Option<String>) -> Self {
        Self {
            status,
            reason,
            log_evidence: None,
            l_theta: None,
            l_theta_phi: None,
            kl_gap: None,
            evidence_slack: None,
            gap_slack: None,
        }
    }

    pub fn uncertified(reason: String) -> Self {
        Self::empty(CertStatus::Uncertified, Some(reason))
    }

    pub fn disabled() -> Self {
        Self::empty(CertStatus::Disabled, None)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.9}"));
        match self.status {
            CertStatus::Disabled => return writeln!(f, "oracle: disabled"),
            CertStatus::Uncertified if self.log_evidence.is_none() => {
                return writeln!(f, "status: uncertified ({})", self.reason.as_deref().unwrap_or("oracle unavailable"))
            }
            _ => {}
        }
        writeln!(f, "log P(x)        = {}", opt(self.log_evidence))?;
        writeln!(f, "L(theta)        = {}   slack {}", opt(self.l_theta), opt(self.evidence_slack))?;
        if self.l_theta_phi.is_some() {
            writeln!(f, "L(theta, phi)   = {}   slack {}", opt(self.l_theta_phi), opt(self.gap_slack))?;
            writeln!(f, "E_Q KL(Q || R)  = {}", opt(self.kl_gap))?;
        }
        let status = match self.status {
            CertStatus::Certified => "certified",
            CertStatus::Violated => "VIOLATED",
            _ => "uncertified",
        };
        writeln!(f, "status: {status} (tolerance {ORACLE_TOL:e})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalElbo {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub step: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub estimator: String,
    pub seed: u64,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub final_elbo: Option<FinalElbo>,
    pub oracle: OracleReport,
    /// Largest per-sample |HVM − ADGM| term difference (hierarchical runs).
    pub equivalence_discrepancy: Option<f64>,
    /// Dip test of posterior samples (1-D latents).
    pub dip: Option<DipTest>,
    pub dip_multimodal: Option<bool>,
    pub wall_ms: f64,
    pub failure: Option<FailureRecord>,
}

fn write_row(w: &mut impl Write, r: &TraceRow) -> std::io::Result<()> {
    writeln!(w, "{},{},{},{},{}", r.step, r.elbo_mc, r.std_error, r.grad_norm, r.wall_ms)?;
    w.flush()
}

/// Train, certify and write every artifact into `config.output.dir`.
///
/// Training aborts are not errors: the partial trace stays on disk and the
/// summary carries a [`FailureRecord`].
pub fn run(config: ExperimentConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let mut exp = Experiment::build(config)?;
    let cfg = exp.config.clone();
    let dir = cfg.output.dir.clone();
    let seed = cfg.train.seed;
    fs::create_dir_all(&dir)?;
    checkpoint::write(&dir.join("checkpoint_init.txt"), &cfg, &exp.params)?;

    let mut csv = BufWriter::new(File::create(dir.join("trace.csv"))?);
    writeln!(csv, "{TRACE_HEADER}")?;
    csv.flush()?;
    let mut io_error = None;
    let outcome = train(&exp.objective, &mut exp.params, &cfg.train, |row| {
        if io_error.is_none() {
            io_error = write_row(&mut csv, row).err();
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    drop(csv);

    let mut failure = outcome.failure.map(|e| FailureRecord {
        step: match e {
            Error::NonFiniteGradient { step, .. } => step,
            _ => outcome.trace.len(),
        },
        detail: e.to_string(),
    });

    let log_evidence = if cfg.output.oracle {
        exp.model.oracle_log_evidence(&exp.x).ok()
    } else {
        None
    };
    write_elbo_plot(&dir.join("elbo.svg"), &outcome.trace, log_evidence)?;
    checkpoint::write(&dir.join("checkpoint.txt"), &cfg, &exp.params)?;

    let mut summary = RunSummary {
        model: exp.model.label().into(),
        estimator: exp.kind().name().into(),
        seed,
        steps_requested: cfg.train.steps,
        steps_completed: outcome.trace.len(),
        final_elbo: None,
        oracle: OracleReport::disabled(),
        equivalence_discrepancy: None,
        dip: None,
        dip_multimodal: None,
        wall_ms: 0.0,
        failure: None,
    };

    if failure.is_none() {
        match exp
            .objective
            .estimate(exp.params.values(), FINAL_SAMPLES, derive_seed(seed, STREAM_FINAL))
        {
            Ok(e) => {
                summary.final_elbo = Some(FinalElbo {
                    mean: e.mean,
                    std_error: e.std_error,
                    n: e.n,
                })
            }
            Err(e) if e.is_numerical() => {
                failure = Some(FailureRecord {
                    step: outcome.trace.len(),
                    detail: format!("final estimate: {e}"),
                })
            }
            Err(e) => return Err(e),
        }
    }

    if failure.is_none() {
        if cfg.output.oracle {
            summary.oracle = exp.certify();
        }
        if let Some((h, r)) = exp.hierarchical() {
            summary.equivalence_discrepancy = Some(check_equivalence(
                &exp.model,
                h,
                &r,
                &exp.params,
                &exp.x,
                EQUIVALENCE_SAMPLES,
                derive_seed(seed, STREAM_EQUIVALENCE),
            )?);
        }
        if exp.model.z_dim() == 1 {
            let zs: Vec<f64> = exp
                .sample_z(POSTERIOR_SAMPLES, derive_seed(seed, STREAM_SAMPLES))?
                .into_iter()
                .map(|z| z[0])
                .collect();
            let dip = dip_test(&zs, DIP_REPS, derive_seed(seed, STREAM_DIP));
            summary.dip_multimodal = Some(dip.is_multimodal(DIP_ALPHA));
            summary.dip = Some(dip);
            write_posterior_plot(&dir.join("posterior.svg"), &exp, &zs, summary.oracle.log_evidence)?;
        }
    }

    if failure.is_some() && cfg.output.oracle {
        summary.oracle.reason = Some("skipped: training aborted".into());
    }
    summary.failure = failure;
    summary.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.into()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

fn write_elbo_plot(path: &Path, trace: &[TraceRow], log_evidence: Option<f64>) -> Result<()> {
    let mut chart = Chart::new("Training curve", "step", "ELBO").line(
        "MC ELBO",
        trace.iter().map(|r| (r.step as f64, r.elbo_mc)).collect(),
    );
    if let (Some(ev), Some(last)) = (log_evidence, trace.last()) {
        chart = chart.line("log P(x)", vec![(0.0, ev), (last.step as f64, ev)]);
    }
    fs::write(path, chart.to_svg())?;
    Ok(())
}

fn write_posterior_plot(path: &Path, exp: &Experiment, zs: &[f64], log_evidence: Option<f64>) -> Result<()> {
    const BINS: usize = 40;
    const CURVE_POINTS: usize = 301;
    let (lo, hi) = zs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &z| (l.min(z), h.max(z)));
    let pad = 0.1 * (hi - lo).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let width = (hi - lo) / BINS as f64;
    let edges: Vec<f64> = (0..=BINS).map(|i| lo + width * i as f64).collect();
    let heights: Vec<f64> = histogram(zs, lo, hi, BINS)
        .into_iter()
        .map(|c| c as f64 / (zs.len() as f64 * width))
        .collect();
    let grid: Vec<f64> = (0..CURVE_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64)
        .collect();

    let mut chart = Chart::new("Posterior over z", "z", "density").histogram("samples", edges, heights);
    if let Some(ev) = log_evidence {
        let truth = grid
            .iter()
            .map(|&z| Ok((z, (exp.model.log_joint(&exp.x, &[z])? - ev).exp())))
            .collect::<Result<Vec<_>>>()?;
        chart = chart.line("true posterior", truth);
        let learned = grid
            .iter()
            .map(|&z| Ok((z, exp.learned_log_density(z)?.exp())))
            .collect::<Result<Vec<_>>>()?;
        chart = chart.line("learned Q(z)", learned);
    }
    fs::write(path, chart.to_svg())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub model: String,
    pub estimator: String,
    pub n_params: usize,
    pub oracle: OracleReport,
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {} / estimator {} / {} parameters", self.model, self.estimator, self.n_params)?;
        write!(f, "{}", self.oracle)
    }
}

/// Recompute every oracle quantity for a checkpoint.
pub fn verify(path: &Path) -> Result<VerifyReport> {
    let exp = Experiment::from_checkpoint(checkpoint::read(path)?)?;
    Ok(VerifyReport {
        model: exp.model.label().into(),
        estimator: exp.kind().name().into(),
        n_params: exp.params.len(),
        oracle: exp.certify(),
    })
}
