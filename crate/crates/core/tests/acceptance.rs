//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown
//! under `cargo test`.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use auxvi::autodiff::{fd_check, ParamVector, Real, Var};
use auxvi::distributions::NoiseDraw;
use auxvi::estimators::{
    check_equivalence, elbo_hvm, elbo_hvm_x, train, Objective, Schedule, TraceRow, TrainConfig,
};
use auxvi::experiment::{self, CertStatus, ExperimentConfig, RunOptions};
use auxvi::models::{bimodal_model, conjugate_gaussian_model, extend, GenerativeModel};
use auxvi::nets::Mlp;
use auxvi::oracle::{
    hier_quantities, joint_grids, log_integrate, quad_elbo_simple, Axis, Grid, HierQuantities,
};
use auxvi::posteriors::{set_affine_conditional, AuxPosterior, HierarchicalPosterior, SimplePosterior};

/// log N(1; 0, 2): evidence of the unit conjugate model at x = 1.
const CONJ_LOG_EVIDENCE: f64 = -1.515_512_1;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

type Outcome = (bool, String);

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 bound sandwich", c1_bound_sandwich),
        ("2 equality case", c2_equality_case),
        ("3 gap identity", c3_gap_identity),
        ("4 HVM = ADGM", c4_equivalence),
        ("5 extended-model evidence", c5_extended_evidence),
        ("6 estimator correctness", c6_estimators),
        ("7 end-to-end optimality", c7_conjugate_training),
        ("8 flexibility", c8_flexibility),
        ("9 x-conditioned R", c9_x_conditioned),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (ok, detail) = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failed += usize::from(!ok);
        println!(
            "[{}] criterion {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn models() -> [(GenerativeModel, Vec<f64>); 2] {
    [
        (conjugate_gaussian_model(1.0, 1.0).unwrap(), vec![1.0]),
        (bimodal_model(1.0, 0.3).unwrap(), vec![1.0]),
    ]
}

/// Hierarchical family with randomly drawn (θ, φ): a fresh initialisation
/// plus Gaussian jitter on every parameter.
fn random_hier(seed: u64, cond_x: bool, hidden: usize, jitter: f64) -> (HierarchicalPosterior, AuxPosterior, ParamVector) {
    let mut pv = ParamVector::new();
    let h = HierarchicalPosterior::register(&mut pv, 1, 1, &[hidden], 2 * seed).unwrap();
    let r = AuxPosterior::register(&mut pv, 1, cond_x.then_some(1), 1, &[hidden], 2 * seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = Normal::new(0.0, jitter).unwrap();
    for v in pv.values_mut() {
        *v += n.sample(&mut rng);
    }
    (h, r, pv)
}

fn quantities(model: &GenerativeModel, h: &HierarchicalPosterior, r: &AuxPosterior, pv: &ParamVector, x: &[f64]) -> HierQuantities {
    let (zg, lg) = joint_grids(1, 1).unwrap();
    hier_quantities(model, h, r, pv.values(), x, &zg, &lg).unwrap()
}

fn cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    }
}

fn c1_bound_sandwich() -> Outcome {
    let start = Instant::now();
    let mut worst_ev = f64::INFINITY;
    let mut worst_gap = f64::INFINITY;
    let mut checked = 0;
    for (mi, (model, x)) in models().into_iter().enumerate() {
        let log_ev = model.oracle_log_evidence(&x).unwrap();
        for s in 0..20 {
            let (h, r, pv) = random_hier(100 * mi as u64 + s, s % 3 == 0, 8, 0.3);
            let q = quantities(&model, &h, &r, &pv, &x);
            worst_ev = worst_ev.min(log_ev - q.l_marginal);
            worst_gap = worst_gap.min(q.l_marginal - q.l_modified);
            checked += 1;
        }
        // trained hierarchical and simple posteriors
        let (h, r, mut pv) = random_hier(50 + mi as u64, false, 16, 0.0);
        let obj = Objective::hvm(model.clone(), h.clone(), r.clone(), x.clone()).unwrap();
        train(&obj, &mut pv, &cfg(1500, 3), |_| {}).unwrap();
        let q = quantities(&model, &h, &r, &pv, &x);
        worst_ev = worst_ev.min(log_ev - q.l_marginal);
        worst_gap = worst_gap.min(q.l_marginal - q.l_modified);
        let mut pv = ParamVector::new();
        let qs = SimplePosterior::register(&mut pv, &[0.3], &[-0.5]).unwrap();
        let obj = Objective::standard(model.clone(), qs.clone(), x.clone()).unwrap();
        train(&obj, &mut pv, &cfg(1500, 4), |_| {}).unwrap();
        let l = quad_elbo_simple(&model, &qs, pv.values(), &x, &Grid::default_latent(1).unwrap()).unwrap();
        worst_ev = worst_ev.min(log_ev - l);
        checked += 2;
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst_ev >= -1e-6 && worst_gap >= -1e-6 && secs < 60.0;
    (
        ok,
        format!("{checked} configurations, min log P(x) − L(θ) = {worst_ev:.3e}, min L(θ) − L(θ,φ) = {worst_gap:.3e}, {secs:.1} s of 60"),
    )
}

fn c2_equality_case() -> Outcome {
    let mut worst = 0.0f64;
    let mut n = 0;
    for (model, x) in models() {
        for &(a, b, s) in &[(0.6, 0.4, 0.5), (-1.2, 0.0, 0.3), (0.2, -0.7, 1.1)] {
            let mut pv = ParamVector::new();
            let h = HierarchicalPosterior::register(&mut pv, 1, 1, &[], 0).unwrap();
            let r = AuxPosterior::register(&mut pv, 1, None, 1, &[], 1).unwrap();
            set_affine_conditional(&h, pv.values_mut(), a, b, s).unwrap();
            // Q(λ|z) ∝ N(λ; 0, 1) N(z; aλ + b, s²) = N(a(z−b)/(a²+s²), s²/(a²+s²))
            let d = a * a + s * s;
            r.set_affine(pv.values_mut(), a / d, -a * b / d, (s * s / d).sqrt()).unwrap();
            let q = quantities(&model, &h, &r, &pv, &x);
            worst = worst.max((q.l_marginal - q.l_modified).abs());
            n += 1;
        }
    }
    (worst <= 1e-6, format!("{n} affine families, max |L(θ) − L(θ,φ)| = {worst:.2e}"))
}

/// `E_{Q(z)} KL(Q(λ|z) ‖ R(λ|z))` by nested quadrature on grids unrelated to
/// the oracle's: `Q(z)` from `marginal_q_oracle`, `Q(λ|z)` as the normalised
/// Bayes quotient on a separate λ grid.
fn nested_expected_kl(h: &HierarchicalPosterior, r: &AuxPosterior, pv: &ParamVector, x: &[f64]) -> f64 {
    let zg = Grid::new(vec![Axis::new(-11.0, 11.0, 1101).unwrap()]).unwrap();
    let lg_marg = Grid::new(vec![Axis::new(-11.5, 11.5, 1501).unwrap()]).unwrap();
    let lam_axis = Axis::new(-10.0, 10.0, 1201).unwrap();
    let p = pv.values();
    let mut total = 0.0;
    for i in 0..zg.axes()[0].count {
        let z = zg.axes()[0].point(i);
        let log_qz = h.marginal_q_oracle(p, &[z], &lg_marg).unwrap();
        let qz_w = (zg.axes()[0].log_weight(i) + log_qz).exp();
        if qz_w < 1e-300 {
            continue;
        }
        let rd = r.dist(p, &[z], x).unwrap();
        let lq: Vec<f64> = (0..lam_axis.count)
            .map(|j| h.log_joint_density(p, &[z], &[lam_axis.point(j)]).unwrap())
            .collect();
        let m = lq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm = m + (0..lam_axis.count)
            .map(|j| (lam_axis.log_weight(j) + lq[j] - m).exp())
            .sum::<f64>()
            .ln();
        let kl: f64 = (0..lam_axis.count)
            .map(|j| {
                let log_post = lq[j] - norm;
                let w = (lam_axis.log_weight(j) + log_post).exp();
                if w == 0.0 {
                    0.0
                } else {
                    w * (log_post - rd.logpdf(&[lam_axis.point(j)]).unwrap())
                }
            })
            .sum();
        total += qz_w * kl;
    }
    total
}

fn c3_gap_identity() -> Outcome {
    let mut worst = 0.0f64;
    let mut min_kl = f64::INFINITY;
    for s in 0..10u64 {
        let (model, x) = &models()[(s % 2) as usize];
        let (h, r, pv) = random_hier(200 + s, s % 4 == 1, 6, 0.3);
        let q = quantities(model, &h, &r, &pv, x);
        let kl = nested_expected_kl(&h, &r, &pv, x);
        worst = worst.max(((q.l_marginal - q.l_modified) - kl).abs());
        min_kl = min_kl.min(kl);
    }
    (
        worst <= 1e-5 && min_kl >= -1e-9,
        format!("10 configurations, max |(L(θ) − L(θ,φ)) − E KL| = {worst:.2e}, min E KL = {min_kl:.3e}"),
    )
}

/// Test-only reimplementation of the extended-model term
/// `log P(x, z) + log P(λ|z[,x], φ) − log Q(z, λ|θ)` reading weights by name.
mod reference {
    use super::LN_2PI;
    use auxvi::autodiff::ParamVector;

    pub fn normal_logpdf(v: f64, mean: f64, std: f64) -> f64 {
        let u = (v - mean) / std;
        -0.5 * u * u - std.ln() - 0.5 * LN_2PI
    }

    /// tanh MLP with a (mean, log-std) head; `widths` as in the library.
    pub fn mlp(pv: &ParamVector, prefix: &str, widths: &[usize], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = input.to_vec();
        let layers = widths.len() - 1;
        for l in 0..layers {
            let mut out = vec![0.0; widths[l + 1]];
            for (o, v) in out.iter_mut().enumerate() {
                let mut acc = pv.get(&format!("{prefix}.l{l}.b[{o}]")).expect("bias");
                for (i, hi) in h.iter().enumerate() {
                    acc += pv.get(&format!("{prefix}.l{l}.w[{o},{i}]")).expect("weight") * hi;
                }
                *v = if l + 1 < layers { acc.tanh() } else { acc };
            }
            h = out;
        }
        let d = h.len() / 2;
        (h[..d].to_vec(), h[d..].iter().map(|s| s.exp()).collect())
    }

    pub fn bimodal_log_joint(x: f64, z: f64, lik_std: f64) -> f64 {
        normal_logpdf(z, 0.0, 1.0) + normal_logpdf(x, z * z, lik_std)
    }

    pub fn conjugate_log_joint(x: f64, z: f64) -> f64 {
        normal_logpdf(z, 0.0, 1.0) + normal_logpdf(x, z, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn adgm_term(
        log_joint: &dyn Fn(f64, f64) -> f64,
        pv: &ParamVector,
        q_widths: &[usize],
        r_widths: &[usize],
        cond_x: bool,
        x: f64,
        eps_lambda: f64,
        eps_z: f64,
    ) -> f64 {
        let lambda = eps_lambda;
        let (mu, sd) = mlp(pv, "theta.q", q_widths, &[lambda]);
        let z = mu[0] + sd[0] * eps_z;
        let log_q = normal_logpdf(lambda, 0.0, 1.0) + normal_logpdf(z, mu[0], sd[0]);
        let input = if cond_x { vec![z, x] } else { vec![z] };
        let (rm, rs) = mlp(pv, "phi.r", r_widths, &input);
        log_joint(x, z) + normal_logpdf(lambda, rm[0], rs[0]) - log_q
    }
}

fn traces_match(a: &[TraceRow], b: &[TraceRow]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(u, v)| {
            u.step == v.step
                && u.elbo_mc.to_bits() == v.elbo_mc.to_bits()
                && u.std_error.to_bits() == v.std_error.to_bits()
                && u.grad_norm.to_bits() == v.grad_norm.to_bits()
        })
}

fn c4_equivalence() -> Outcome {
    let mut worst_lib = 0.0f64;
    let mut worst_ref = 0.0f64;
    let mut max_term = 0.0f64;
    for s in 0..20u64 {
        let (model, x) = &models()[(s % 2) as usize];
        let cond_x = s % 3 == 2;
        let (h, r, pv) = random_hier(300 + s, cond_x, 8, 0.5);
        worst_lib = worst_lib.max(check_equivalence(model, &h, &r, &pv, x, 64, s).unwrap());

        let hvm = Objective::hvm(model.clone(), h.clone(), r.clone(), x.clone()).unwrap();
        let est = hvm.estimate(pv.values(), 64, s).unwrap();
        let lik_std = 0.3;
        let lj: Box<dyn Fn(f64, f64) -> f64> = if s % 2 == 0 {
            Box::new(reference::conjugate_log_joint)
        } else {
            Box::new(move |x, z| reference::bimodal_log_joint(x, z, lik_std))
        };
        for (k, &t) in est.per_sample_terms.iter().enumerate() {
            let noise = NoiseDraw::blocks(s, k as u64, &[1, 1]);
            let reference_term = reference::adgm_term(
                lj.as_ref(),
                &pv,
                h.cond_net().widths(),
                r.r_net().widths(),
                cond_x,
                x[0],
                noise[0].eps[0],
                noise[1].eps[0],
            );
            // separately written arithmetic rounds differently, so compare
            // relative to the term's size
            worst_ref = worst_ref.max((t - reference_term).abs() / t.abs().max(1.0));
            max_term = max_term.max(t.abs());
        }
    }

    // identical seeds ⇒ identical traces, across constructions and reruns
    let (model, x) = &models()[1];
    let (h, r, pv0) = random_hier(77, false, 8, 0.0);
    let hvm = Objective::hvm(model.clone(), h.clone(), r.clone(), x.clone()).unwrap();
    let adgm = Objective::adgm(extend(model.clone(), r.r_net().clone(), false).unwrap(), h, x.clone()).unwrap();
    let run = |obj: &Objective| {
        let mut pv = pv0.clone();
        let out = train(obj, &mut pv, &cfg(300, 5), |_| {}).unwrap();
        (out.trace, pv)
    };
    let (ta, pa) = run(&hvm);
    let (tb, pb) = run(&adgm);
    let (tc, _) = run(&hvm);
    let same = traces_match(&ta, &tb) && traces_match(&ta, &tc) && pa == pb;

    (
        worst_lib <= 1e-12 && worst_ref <= 1e-12 && same,
        format!(
            "20 configurations, library max |Δ| = {worst_lib:.2e}, independent ADGM path max |Δ|/max(1,|term|) = {worst_ref:.2e} (|term| up to {max_term:.1e}), 300-step traces identical: {same}"
        ),
    )
}

fn c5_extended_evidence() -> Outcome {
    let mut worst = 0.0f64;
    let mut n = 0;
    for (model, x) in models() {
        let log_ev = model.oracle_log_evidence(&x).unwrap();
        // φ₁: tanh net; φ₂: affine net with z-dependent spread
        let mut pv1 = ParamVector::new();
        let net1 = Mlp::register(&mut pv1, "phi.a", Mlp::shape(1, &[8], 1), 1).unwrap();
        let mut pv2 = ParamVector::new();
        let net2 = Mlp::register(&mut pv2, "phi.b", Mlp::shape(1, &[], 1), 0).unwrap();
        let v = pv2.values_mut();
        v[net2.weight_index(0, 0, 0)] = -0.8;
        v[net2.bias_index(0, 0)] = 0.3;
        v[net2.weight_index(0, 1, 0)] = 0.1;
        v[net2.bias_index(0, 1)] = -0.5;
        for (net, pv) in [(net1, pv1), (net2, pv2)] {
            let ext = extend(model.clone(), net, false).unwrap();
            let grid = Grid::uniform(2, 2001).unwrap();
            let log_ext = log_integrate(&grid, |zl| {
                ext.log_joint_ext(pv.values(), &x, &zl[..1], &zl[1..]).unwrap()
            });
            worst = worst.max((log_ext - log_ev).abs());
            n += 1;
        }
    }
    (worst <= 1e-6, format!("{n} (model, φ) pairs, max |log P_ext(x) − log P(x)| = {worst:.2e}"))
}

fn c6_estimators() -> Outcome {
    const N: usize = 100_000;
    let mut report = Vec::new();
    let mut ok = true;

    // MC means against quadrature, one model per estimator pair
    let (model, x) = &models()[1];
    let mut pv = ParamVector::new();
    let q = SimplePosterior::register(&mut pv, &[0.7], &[-1.2]).unwrap();
    let exact = quad_elbo_simple(model, &q, pv.values(), x, &Grid::default_latent(1).unwrap()).unwrap();
    let e = Objective::standard(model.clone(), q, x.clone()).unwrap().estimate(pv.values(), N, 1).unwrap();
    let z = (e.mean - exact) / e.std_error;
    ok &= z.abs() <= 3.0;
    report.push(format!("standard z={z:+.2}"));

    for (name, cond_x) in [("hvm", false), ("adgm", false), ("hvm_x", true)] {
        let (h, r, pv) = random_hier(400, cond_x, 8, 0.3);
        let exact = quantities(model, &h, &r, &pv, x).l_modified;
        let e = match name {
            "hvm" => elbo_hvm(model, &h, &r, &pv, x, N, 2).unwrap(),
            "hvm_x" => elbo_hvm_x(model, &h, &r, &pv, x, N, 2).unwrap(),
            _ => {
                let ext = extend(model.clone(), r.r_net().clone(), false).unwrap();
                auxvi::estimators::elbo_adgm(&ext, &h, &pv, x, N, 3).unwrap()
            }
        };
        let z = (e.mean - exact) / e.std_error;
        ok &= z.abs() <= 3.0;
        report.push(format!("{name} z={z:+.2}"));
    }

    // finite differences at 10 random points per estimator, frozen noise
    let mut worst_fd = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..10u64 {
        let (model, x) = &models()[(i % 2) as usize];
        let mut pv = ParamVector::new();
        let q = SimplePosterior::register(&mut pv, &[rng.random_range(-1.5..1.5)], &[rng.random_range(-1.5..0.5)]).unwrap();
        let objs = {
            let standard = Objective::standard(model.clone(), q, x.clone()).unwrap();
            let (h, r, hp) = random_hier(500 + i, false, 6, 0.4);
            let (hx, rx, hpx) = random_hier(600 + i, true, 6, 0.4);
            let hvm = Objective::hvm(model.clone(), h.clone(), r.clone(), x.clone()).unwrap();
            let adgm = Objective::adgm(extend(model.clone(), r.r_net().clone(), false).unwrap(), h, x.clone()).unwrap();
            let hvm_x = Objective::hvm(model.clone(), hx, rx, x.clone()).unwrap();
            [(standard, pv.clone()), (hvm, hp.clone()), (adgm, hp), (hvm_x, hpx)]
        };
        for (obj, at) in &objs {
            let err = fd_check(
                |_, p| {
                    let terms: Vec<Var<'_>> = (0..4).map(|k| obj.term(p, 100 + i, k).unwrap()).collect();
                    Real::sum(&terms) / Var::constant(4.0)
                },
                at,
                1e-6,
            )
            .unwrap();
            worst_fd = worst_fd.max(err);
        }
    }
    ok &= worst_fd <= 1e-4;
    report.push(format!("max fd error over 4×10 points {worst_fd:.2e}"));
    (ok, format!("N = 1e5 MC vs quadrature: {}", report.join(", ")))
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_preset(name: &str, dir: &std::path::Path) -> experiment::RunSummary {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(name)).unwrap();
    cfg.apply(&RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    });
    experiment::run(cfg).unwrap()
}

fn c7_conjugate_training() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let s = run_preset("conjugate_standard.toml", dir.path());
    let secs = start.elapsed().as_secs_f64();
    let l = s.oracle.l_theta.unwrap_or(f64::NAN);
    let ev = s.oracle.log_evidence.unwrap_or(f64::NAN);
    let gap = CONJ_LOG_EVIDENCE - l;
    let ok = s.steps_completed <= 2000
        && s.failure.is_none()
        && (ev - CONJ_LOG_EVIDENCE).abs() <= 1e-6
        && gap <= 0.01
        && l <= ev + 1e-6
        && secs < 120.0;
    (
        ok,
        format!("{} Adam steps, L(θ) = {l:.7}, log P(x) − L(θ) = {gap:.4} nat (≤ 0.01), {secs:.1} s of 120", s.steps_completed),
    )
}

const MARGIN: f64 = 0.05;

fn c8_flexibility() -> Outcome {
    let (model, x) = &models()[1];
    let grid = Grid::default_latent(1).unwrap();
    let mut best_simple = f64::NEG_INFINITY;
    let mut best_pv = None;
    for (i, m0) in [-1.0, 0.0, 1.0].into_iter().enumerate() {
        let mut pv = ParamVector::new();
        let q = SimplePosterior::register(&mut pv, &[m0], &[-1.0]).unwrap();
        let obj = Objective::standard(model.clone(), q.clone(), x.clone()).unwrap();
        train(&obj, &mut pv, &cfg(2000, i as u64), |_| {}).unwrap();
        let l = quad_elbo_simple(model, &q, pv.values(), x, &grid).unwrap();
        if l > best_simple {
            best_simple = l;
            best_pv = Some((q, pv));
        }
    }
    let (q, pv) = best_pv.unwrap();
    let simple_samples: Vec<f64> = (0..2000u64)
        .map(|k| {
            let noise = NoiseDraw::blocks(77, k, &[1]);
            q.dist(pv.values()).unwrap().reparam_sample(&noise[0].eps).unwrap()[0]
        })
        .collect();
    let simple_dip = auxvi::stats::dip_test(&simple_samples, 200, 5);

    let dir = tempfile::tempdir().unwrap();
    let s = run_preset("bimodal_hvm.toml", dir.path());
    let hier_l = s.oracle.l_theta.unwrap_or(f64::NAN);
    let hier_dip = s.dip.unwrap();
    let margin = hier_l - best_simple;
    let ok = margin >= MARGIN
        && s.oracle.status == CertStatus::Certified
        && hier_dip.is_multimodal(0.05)
        && !simple_dip.is_multimodal(0.05);
    (
        ok,
        format!(
            "hierarchical L(θ) = {hier_l:.4}, best simple L(θ) = {best_simple:.4}, margin {margin:.4} (≥ {MARGIN}); dip p-value hierarchical {:.3}, simple {:.3}",
            hier_dip.p_value, simple_dip.p_value
        ),
    )
}

fn c9_x_conditioned() -> Outcome {
    let (model, x) = &models()[1];
    let hidden = 32;

    // (a) zeroed x-weights reproduce the plain estimator bit for bit
    let mut bitwise = true;
    for s in 0..5u64 {
        let (h, r, pv) = random_hier(700 + s, false, 8, 0.3);
        let mut pvx = ParamVector::new();
        HierarchicalPosterior::register(&mut pvx, 1, 1, &[8], 0).unwrap();
        let rx = AuxPosterior::register(&mut pvx, 1, Some(1), 1, &[8], 1).unwrap();
        for name in pv.names() {
            assert!(pvx.set(name, pv.get(name).unwrap()));
        }
        for i in rx.x_weight_positions(1) {
            pvx.values_mut()[i] = 0.0;
        }
        let a = elbo_hvm(model, &h, &r, &pv, x, 256, s).unwrap();
        let b = elbo_hvm_x(model, &h, &rx, &pvx, x, 256, s).unwrap();
        bitwise &= a.per_sample_terms.iter().zip(&b.per_sample_terms).all(|(u, v)| u.to_bits() == v.to_bits());
    }

    // (b) trained: shared θ, then φ-only training of both R variants from
    // the same starting function with the same noise and a decaying step.
    let mut pv = ParamVector::new();
    let h = HierarchicalPosterior::register(&mut pv, 1, 1, &[hidden], 1).unwrap();
    let r = AuxPosterior::register(&mut pv, 1, None, 1, &[hidden], 2).unwrap();
    let obj = Objective::hvm(model.clone(), h.clone(), r, x.clone()).unwrap();
    train(&obj, &mut pv, &cfg(3000, 0), |_| {}).unwrap();

    let mut gaps = Vec::new();
    let mut certified = true;
    for cond_x in [false, true] {
        let mut pv2 = ParamVector::new();
        let h2 = HierarchicalPosterior::register(&mut pv2, 1, 1, &[hidden], 1).unwrap();
        let r2 = if cond_x {
            AuxPosterior::register_x_detached(&mut pv2, 1, 1, 1, &[hidden], 3).unwrap()
        } else {
            AuxPosterior::register(&mut pv2, 1, None, 1, &[hidden], 3).unwrap()
        };
        for name in pv.names().iter().filter(|n| n.starts_with("theta.")) {
            pv2.set(name, pv.get(name).unwrap());
        }
        let obj2 = Objective::hvm(model.clone(), h2.clone(), r2.clone(), x.clone()).unwrap();
        for (stage, (steps, lr)) in [(2000, 0.01), (2000, 0.002), (1000, 0.0005)].into_iter().enumerate() {
            let c = TrainConfig {
                steps,
                learning_rate: lr,
                n_samples: 64,
                schedule: Schedule::PhiOnly,
                seed: 10 + stage as u64,
                ..TrainConfig::default()
            };
            train(&obj2, &mut pv2, &c, |_| {}).unwrap();
        }
        let q = quantities(model, &h2, &r2, &pv2, x);
        let ev = model.oracle_log_evidence(x).unwrap();
        certified &= ev - q.l_marginal >= -1e-6 && q.l_marginal - q.l_modified >= -1e-6;
        gaps.push(q.l_marginal - q.l_modified);
    }
    let ok = bitwise && certified && gaps[1] <= gaps[0];
    (
        ok,
        format!(
            "zero x-weights bit-identical: {bitwise}; trained certified gap with x {:.6} vs without {:.6}",
            gaps[1], gaps[0]
        ),
    )
}
