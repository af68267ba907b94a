//! Quick invariant suite behind `auxvi selftest`.
//!
//! Each check is small enough to run in a second or two; together they cover
//! gradients, oracles, the bound chain, the gap identity and the equivalence
//! of the modified and extended-model ELBOs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{fd_check, ParamVector, Real, Tape, Var};
use crate::estimators::{check_equivalence, Objective};
use crate::models::{bimodal_model, conjugate_gaussian_model, extend, GenerativeModel};
use crate::oracle::{hier_quantities, joint_grids, quad_elbo_simple, quad_evidence, Grid};
use crate::posteriors::{set_affine_conditional, AuxPosterior, HierarchicalPosterior, SimplePosterior};

const CONJ_LOG_EVIDENCE: f64 = -1.515_512_1;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> crate::Result<(bool, String)>;

const CHECKS: [(&str, Check); 8] = [
    ("autodiff_matches_finite_differences", autodiff_fd),
    ("conjugate_evidence_oracle", conjugate_evidence),
    ("simple_elbo_tight_at_exact_posterior", simple_tight),
    ("bound_chain_random_configs", bound_chain),
    ("equality_case_affine_family", equality_case),
    ("gap_identity", gap_identity),
    ("hvm_adgm_equivalence", equivalence),
    ("hvm_x_zero_weights_reproduce_hvm", hvm_x_detached),
];

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn autodiff_fd() -> crate::Result<(bool, String)> {
    fn f<'t>(_: &'t Tape, v: &[Var<'t>]) -> Var<'t> {
        let (a, b, c) = (v[0], v[1], v[2]);
        (a * b).tanh() + (c.square() + a).ln() - b / c.exp()
    }
    let at = ParamVector::from_pairs([("a", 0.3), ("b", -1.2), ("c", 0.7)])?;
    let err = fd_check(f, &at, 1e-6)?;
    Ok((err <= 1e-4, format!("max relative error {err:.2e}")))
}

fn conjugate_evidence() -> crate::Result<(bool, String)> {
    let model = conjugate_gaussian_model(1.0, 1.0)?;
    let q = quad_evidence(&model, &[1.0], &Grid::default_latent(1)?)?;
    let closed = model.oracle_log_evidence(&[1.0])?;
    let err = (q - CONJ_LOG_EVIDENCE).abs().max((closed - CONJ_LOG_EVIDENCE).abs());
    Ok((err <= 1e-6, format!("quadrature {q:.9}, closed form {closed:.9}")))
}

fn simple_tight() -> crate::Result<(bool, String)> {
    let model = conjugate_gaussian_model(1.0, 1.0)?;
    let mut pv = ParamVector::new();
    let q = SimplePosterior::register(&mut pv, &[0.5], &[0.5f64.sqrt().ln()])?;
    let l = quad_elbo_simple(&model, &q, pv.values(), &[1.0], &Grid::default_latent(1)?)?;
    let gap = (l - CONJ_LOG_EVIDENCE).abs();
    Ok((gap <= 1e-6, format!("|L − log P(x)| = {gap:.2e}")))
}

fn random_hier(model_seed: u64) -> crate::Result<(HierarchicalPosterior, AuxPosterior, ParamVector)> {
    let mut pv = ParamVector::new();
    let h = HierarchicalPosterior::register(&mut pv, 1, 1, &[4], model_seed)?;
    let r = AuxPosterior::register(&mut pv, 1, None, 1, &[4], model_seed + 1000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
    for v in pv.values_mut() {
        *v += 0.3 * (rng.random::<f64>() - 0.5);
    }
    Ok((h, r, pv))
}

fn models() -> crate::Result<[GenerativeModel; 2]> {
    Ok([conjugate_gaussian_model(1.0, 1.0)?, bimodal_model(1.0, 0.5)?])
}

fn bound_chain() -> crate::Result<(bool, String)> {
    let (zg, lg) = joint_grids(1, 1)?;
    let mut worst = f64::INFINITY;
    for model in models()? {
        for seed in 0..2 {
            let (h, r, pv) = random_hier(seed)?;
            let q = hier_quantities(&model, &h, &r, pv.values(), &[1.0], &zg, &lg)?;
            let ev = model.oracle_log_evidence(&[1.0])?;
            worst = worst.min(ev - q.l_marginal).min(q.l_marginal - q.l_modified);
        }
    }
    Ok((worst >= -1e-6, format!("smallest slack {worst:.3e}")))
}

fn equality_case() -> crate::Result<(bool, String)> {
    let model = conjugate_gaussian_model(1.0, 1.0)?;
    let mut pv = ParamVector::new();
    let h = HierarchicalPosterior::register(&mut pv, 1, 1, &[], 0)?;
    let r = AuxPosterior::register(&mut pv, 1, None, 1, &[], 1)?;
    let (a, b, s) = (0.6, 0.4, 0.5);
    set_affine_conditional(&h, pv.values_mut(), a, b, s)?;
    // Q(λ|z) = N(a(z − b)/(a² + s²), s²/(a² + s²))
    let d = a * a + s * s;
    r.set_affine(pv.values_mut(), a / d, -a * b / d, (s * s / d).sqrt())?;
    let (zg, lg) = joint_grids(1, 1)?;
    let q = hier_quantities(&model, &h, &r, pv.values(), &[1.0], &zg, &lg)?;
    let diff = (q.l_marginal - q.l_modified).abs();
    Ok((diff <= 1e-6, format!("|L(θ) − L(θ,φ)| = {diff:.2e}")))
}

fn gap_identity() -> crate::Result<(bool, String)> {
    let (zg, lg) = joint_grids(1, 1)?;
    let model = bimodal_model(1.0, 0.5)?;
    let mut worst = 0.0f64;
    for seed in 10..12 {
        let (h, r, pv) = random_hier(seed)?;
        let q = hier_quantities(&model, &h, &r, pv.values(), &[1.0], &zg, &lg)?;
        worst = worst.max((q.l_marginal - q.l_modified - q.kl_gap).abs());
    }
    Ok((worst <= 1e-5, format!("max |ΔL − E KL| = {worst:.2e}")))
}

fn equivalence() -> crate::Result<(bool, String)> {
    let mut worst = 0.0f64;
    for model in models()? {
        for seed in 20..23 {
            let (h, r, pv) = random_hier(seed)?;
            worst = worst.max(check_equivalence(&model, &h, &r, &pv, &[1.0], 64, seed)?);
        }
    }
    Ok((worst <= 1e-12, format!("max per-sample discrepancy {worst:.2e}")))
}

fn hvm_x_detached() -> crate::Result<(bool, String)> {
    let model = bimodal_model(1.0, 0.5)?;
    let mut plain = ParamVector::new();
    let h = HierarchicalPosterior::register(&mut plain, 1, 1, &[4], 5)?;
    let r = AuxPosterior::register(&mut plain, 1, None, 1, &[4], 6)?;
    let mut with_x = ParamVector::new();
    let hx = HierarchicalPosterior::register(&mut with_x, 1, 1, &[4], 5)?;
    let rx = AuxPosterior::register_x_detached(&mut with_x, 1, 1, 1, &[4], 6)?;
    let a = Objective::hvm(model.clone(), h, r, vec![1.0])?.estimate(plain.values(), 64, 9)?;
    let b = Objective::hvm(model.clone(), hx.clone(), rx.clone(), vec![1.0])?.estimate(with_x.values(), 64, 9)?;
    let ext = extend(model, rx.r_net().clone(), true)?;
    let c = Objective::adgm(ext, hx, vec![1.0])?.estimate(with_x.values(), 64, 9)?;
    let same = a.per_sample_terms.iter().zip(&b.per_sample_terms).all(|(u, v)| u.to_bits() == v.to_bits())
        && b.per_sample_terms == c.per_sample_terms;
    Ok((same, format!("mean {:.12} vs {:.12}", a.mean, b.mean)))
}
