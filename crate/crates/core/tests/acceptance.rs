//! Acceptance criteria 1-11. Every test prints one `criterion N: PASS|FAIL`
//! line with the measured quantities and then asserts the same condition.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use swpce::calibration::{calibrate, estimate_rho_star, lambda_bounds_from, rho_grid, LambdaRule, SensitivityConfig};
use swpce::model::{HyperPriors, Link, ModelData, ModelParams, ModelSpec, Posterior, RandomEffectCov};
use swpce::numerics::{gauss_hermite_rule, logit, newton_solve_fdf, GaussHermiteRule, Interval, NewtonConfig};
use swpce::pce::{
    conditional_outcome_mean, default_deltas, default_intervals, joint_mediator_law, pce_delta_sweep, pce_for_draw, pce_posterior,
    solve_delta, strata_probability, DeltaProblem, JointMediatorLaw, OutcomeKernel, PceEstimate, PceQuery,
};
use swpce::sampler::{fit, SamplerConfig};
use swpce::simulate::{simulate_trial, DesignSpec, PceOracle, TruthParams};

/// Written to the raw stderr handle so the line survives libtest's output capture.
fn report(n: usize, pass: bool, detail: impl AsRef<str>) {
    use std::io::Write;
    let line = format!("criterion {n:>2}: {} | {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generic parameters with outcome models at every period.
fn random_params<R: Rng>(r: &mut R, n_periods: usize) -> ModelParams {
    ModelParams {
        eta1: (0..n_periods).map(|_| r.random_range(-0.5..0.5)).collect(),
        eta2: (0..n_periods).map(|_| r.random_range(-1.0..0.5)).collect(),
        outcome_periods: (1..=n_periods).collect(),
        gamma1: r.random_range(0.2..1.2),
        beta1: r.random_range(-0.5..0.8),
        beta2: r.random_range(-0.3..0.8),
        beta3: r.random_range(-0.3..0.6),
        beta4: 0.0,
        sigma_eps: r.random_range(0.5..1.0),
        alpha: RandomEffectCov::new(r.random_range(0.1..0.6), r.random_range(0.1..0.6), r.random_range(-0.5..0.5)),
        phi: RandomEffectCov::new(r.random_range(0.1..0.8), r.random_range(0.1..0.8), r.random_range(-0.5..0.5)),
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `E[f(x)]`, `x ~ N(mean, var)`, by the trapezoid rule on `mean ± 12 sd`.
fn fine_gauss(mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
    if var <= 0.0 {
        return f(mean);
    }
    let sd = var.sqrt();
    let n = 20_001;
    let h = 24.0 / (n - 1) as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let x = -12.0 + h * k as f64;
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        acc += w * (-0.5 * x * x).exp() * f(mean + sd * x);
    }
    acc * h / (2.0 * std::f64::consts::PI).sqrt()
}

#[test]
fn criterion_01_strata_probability_matches_copula_frequency() {
    let mut r = rng(101);
    let n = 1_000_000;
    let mut worst = 0.0f64;
    for setting in 0..50 {
        let gamma1 = r.random_range(-1.0..1.5);
        let var = r.random_range(0.3..3.0);
        let rho = r.random_range(-0.5..0.95);
        let a = r.random_range(-2.0..1.0);
        let b = a + r.random_range(0.2..2.5);
        let iv = Interval::new(a, b).unwrap();
        let law = JointMediatorLaw::new(0.0, gamma1, var, rho).unwrap();
        let p = strata_probability(&law, iv);

        let mut mc = rng(10_000 + setting);
        let (sd, c) = (var.sqrt(), (1.0 - rho * rho).sqrt());
        let mut hits = 0usize;
        for _ in 0..n {
            let e0: f64 = mc.sample(StandardNormal);
            let e1: f64 = mc.sample(StandardNormal);
            let d = gamma1 + sd * (rho * e0 + c * e1) - sd * e0;
            hits += (a <= d && d <= b) as usize;
        }
        let freq = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        worst = worst.max((freq - p).abs() / se);
    }
    let pass = worst <= 4.0;
    report(1, pass, format!("50 settings, 1e6 copula samples each; worst |freq - P| = {worst:.2} SE (limit 4)"));
    assert!(pass);
}

#[test]
fn criterion_02_quadrature_matches_fine_grid_oracle() {
    let mut r = rng(202);
    let rule40 = gauss_hermite_rule(40).unwrap();
    let (mut worst_oracle, mut worst_refine) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let p = random_params(&mut r, 2);
        let z = r.random_bool(0.5);
        let mu = p.eta1[1] + if z { p.gamma1 } else { 0.0 };
        let v = p.mediator_variance();
        let m = mu + v.sqrt() * r.random_range(-2.5..2.5);

        let ghq = conditional_outcome_mean(&p, 2, m, z).unwrap();
        let c = p.alpha.cov12() + p.phi.cov12();
        let w = p.alpha.var2() + p.phi.var2();
        let zf = z as u8 as f64;
        let lin = p.eta2[1] + p.beta1 * zf + p.beta2 * m + p.beta3 * zf * m;
        let oracle = fine_gauss(c / v * (m - mu), w - c * c / v, |u| expit(lin + u));
        worst_oracle = worst_oracle.max(((ghq - oracle) / oracle).abs());

        let refined = OutcomeKernel::new(&p, 2).unwrap().mean(m, z, &rule40);
        worst_refine = worst_refine.max(((refined - ghq) / ghq).abs());
    }
    let pass = worst_oracle < 1e-6 && worst_refine < 1e-6;
    report(2, pass, format!("100 points; max rel err vs fine grid {worst_oracle:.2e}, order 20 -> 40 change {worst_refine:.2e} (limit 1e-6)"));
    assert!(pass);
}

#[test]
fn criterion_03_convolution_solutions_are_consistent() {
    let mut r = rng(303);
    let rule = GaussHermiteRule::default_rule();
    let (mut worst_f, mut worst_logit, mut worst_identity) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let p = random_params(&mut r, 2);
        let rho = r.random_range(0.0..0.9);
        let law = joint_mediator_law(&p, 2, rho).unwrap();
        let z = r.random_bool(0.5);
        let m = law.mean(z) + law.var.sqrt() * r.random_range(-2.5..2.5);
        let lambda = r.random_range(-0.5..0.5);
        let kernel = OutcomeKernel::new(&p, 2).unwrap();

        let sol = solve_delta(&p, 2, m, z, lambda, &law, Link::Logit).unwrap();
        let problem = DeltaProblem { kernel: &kernel, law: &law, z, lambda, link: Link::Logit, rule };
        let f = problem.convolution(m).value_and_slope(sol.delta).0;
        worst_f = worst_f.max(f.abs());

        let zero = solve_delta(&p, 2, m, z, 0.0, &law, Link::Logit).unwrap();
        let direct = logit(conditional_outcome_mean(&p, 2, m, z).unwrap()).unwrap();
        worst_logit = worst_logit.max((zero.delta - direct).abs());

        // Newton on the identity-link convolution against its closed form.
        let identity = DeltaProblem { link: Link::Identity, ..problem }.convolution(m);
        let newton = newton_solve_fdf(|d| identity.value_and_slope(d), 0.0, &NewtonConfig::default()).unwrap();
        let (cross_mean, _) = law.cross_world(m, z);
        let closed = kernel.mean(m, z, rule) - lambda * cross_mean;
        worst_identity = worst_identity.max((newton - closed).abs());
    }
    let pass = worst_f <= 1e-9 && worst_logit <= 1e-10 && worst_identity <= 1e-10;
    report(
        3,
        pass,
        format!("100 points; max |f(Δ)| {worst_f:.1e} (1e-9), λ=0 logit gap {worst_logit:.1e} (1e-10), identity Newton vs closed form {worst_identity:.1e} (1e-10)"),
    );
    assert!(pass);
}

/// Ten generic truths with their cross-world settings, shared by criteria 4 and 5.
fn oracle_settings() -> Vec<TruthParams> {
    let mut r = rng(404);
    (0..10)
        .map(|_| TruthParams {
            params: random_params(&mut r, 2),
            mediator_lag: 0,
            rho: r.random_range(0.1..0.8),
            lambda0: r.random_range(-0.2..0.4),
            lambda1: r.random_range(-0.2..0.4),
            link: Link::Logit,
        })
        .collect()
}

#[test]
fn criterion_04_estimator_agrees_with_brute_force_oracle() {
    let intervals = default_intervals(0.5);
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (k, truth) in oracle_settings().iter().enumerate() {
        let oracle = PceOracle::new(truth, 2).unwrap();
        let q = PceQuery { mc_size: 100_000, seed: 4_000 + k as u64, ..Default::default() };
        for (l, &iv) in intervals.iter().enumerate() {
            let est = pce_for_draw(&truth.params, 2, truth.rho, &q, truth.lambda0, truth.lambda1, iv).unwrap();
            let o = oracle.estimate(iv, 1_000_000, 40_000 + 10 * k as u64 + l as u64).unwrap();
            let z = (est.pce - o.pce).abs() / (est.mc_se.powi(2) + o.mc_se.powi(2)).sqrt();
            worst = worst.max(z);
            if z > 3.0 {
                lines.push(format!("setting {k} I{}: {:.5} vs {:.5} ({z:.2} SE)", l + 1, est.pce, o.pce));
            }
        }
    }
    let pass = worst <= 3.0;
    report(4, pass, format!("10 truths x 3 strata at mc_size 1e5; worst gap {worst:.2} combined SE (limit 3) {}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_05_strata_partition_recovers_unrestricted_effect() {
    let intervals = default_intervals(0.5);
    let mut worst = 0.0f64;
    for (k, truth) in oracle_settings().iter().enumerate() {
        let run = |iv: Interval, stream: u64| {
            let q = PceQuery { mc_size: 100_000, seed: 5_000 + 10 * k as u64 + stream, ..Default::default() };
            pce_for_draw(&truth.params, 2, truth.rho, &q, truth.lambda0, truth.lambda1, iv).unwrap()
        };
        let full = run(Interval::full(), 9);
        let (mut sum, mut var) = (0.0, full.mc_se.powi(2));
        for (l, &iv) in intervals.iter().enumerate() {
            let v = run(iv, l as u64);
            sum += v.denominator * v.pce;
            var += (v.denominator * v.mc_se).powi(2);
        }
        worst = worst.max((sum - full.pce).abs() / var.sqrt());
    }
    let pass = worst <= 3.0;
    report(5, pass, format!("10 truths; worst |Σ P·PCE - PCE_full| = {worst:.2} combined SE (limit 3)"));
    assert!(pass);
}

#[test]
fn criterion_06_gradient_matches_central_differences() {
    let design = DesignSpec { n_clusters: 6, n_periods: 4, cohort_size: 10, ..Default::default() };
    let data = simulate_trial(&design, &TruthParams::example(4), 606).unwrap();
    let post = Posterior::new(ModelData::new(&data, &ModelSpec::default()).unwrap(), HyperPriors::default()).unwrap();
    let mut r = rng(607);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let v: Vec<f64> = (0..post.dim()).map(|_| 0.5 * r.sample::<f64, _>(StandardNormal)).collect();
        let mut g = vec![0.0; v.len()];
        post.log_density_grad(&v, &mut g).unwrap();
        for k in 0..v.len() {
            let (mut vp, mut vm) = (v.clone(), v.clone());
            vp[k] += h;
            vm[k] -= h;
            let fd = (post.log_density(&vp).unwrap() - post.log_density(&vm).unwrap()) / (2.0 * h);
            worst = worst.max((g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1.0));
        }
    }
    let pass = worst <= 1e-5;
    report(6, pass, format!("20 points x {} coordinates; max relative error {worst:.2e} (limit 1e-5)", post.dim()));
    assert!(pass);
}

fn draws_quantile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    swpce::pce::quantile(&xs, q)
}

#[test]
fn criterion_07_posterior_intervals_cover_truth() {
    let truth = TruthParams::example(5);
    let design = DesignSpec { n_clusters: 12, n_periods: 5, cohort_size: 30, ..Default::default() };
    let p = &truth.params;
    let targets = [("gamma1", p.gamma1), ("beta1", p.beta1), ("beta2", p.beta2), ("beta3", p.beta3), ("log_sigma_eps", p.sigma_eps.ln())];
    let mut covered = [0usize; 5];
    let (mut max_rhat, mut min_ess) = (0.0f64, f64::INFINITY);
    for rep in 0..20u64 {
        let data = simulate_trial(&design, &truth, 7_000 + rep).unwrap();
        let cfg = SamplerConfig { seed: 70_000 + rep, ..Default::default() };
        let out = fit(&data, &ModelSpec::default(), &HyperPriors::default(), &cfg).unwrap();
        for (k, (name, value)) in targets.iter().enumerate() {
            let col = out.draws.column(out.draws.column_index(name).unwrap());
            // log σ_ε is monotone in σ_ε, so its interval covers exactly when σ_ε's does.
            let (lo, hi) = (draws_quantile(col.clone(), 0.05), draws_quantile(col, 0.95));
            covered[k] += (lo <= *value && *value <= hi) as usize;
            let d = out.diagnostics.get(name).unwrap();
            max_rhat = max_rhat.max(d.rhat.unwrap());
            min_ess = min_ess.min(d.ess_bulk.unwrap());
        }
    }
    let pass = covered.iter().all(|&c| c >= 15) && max_rhat < 1.05 && min_ess > 200.0;
    let cov: Vec<String> = targets.iter().zip(covered).map(|((n, _), c)| format!("{}={c}/20", n.replace("log_", ""))).collect();
    report(7, pass, format!("90% coverage {} (need 15); max R-hat {max_rhat:.3} (< 1.05), min bulk ESS {min_ess:.0} (> 200)", cov.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_08_calibration_fixtures() {
    let grid = rho_grid(0.654);
    let grid_ok = grid == vec![0.654, 0.7, 0.8, 0.9];
    let b = lambda_bounds_from(0.048, -0.006, 0.254, 0.092);
    let bounds_ok = (b.lambda0_lower, b.lambda0_upper, b.lambda1_lower, b.lambda1_upper) == (0.048, 0.254, -0.006, 0.092);

    let (lo, hi) = (0.048, 0.254);
    let rule = LambdaRule::Triangular { lower: lo, upper: hi };
    let mut r = rng(808);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| rule.draw(None, &mut r)).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let expected = (lo + lo + hi) / 3.0;
    // Variance of the triangular law with mode at the lower bound.
    let sd = ((hi - lo).powi(2) / 18.0).sqrt();
    let z = (mean - expected).abs() / (sd / (n as f64).sqrt());
    let pass = grid_ok && bounds_ok && z <= 4.0;
    report(
        8,
        pass,
        format!("rho_grid(0.654) = {grid:?}; λ0 ∈ ({}, {}), λ1 ∈ ({}, {}); triangular mean {mean:.5} vs {expected:.5} ({z:.2} SE)", b.lambda0_lower, b.lambda0_upper, b.lambda1_lower, b.lambda1_upper),
    );
    assert!(pass);
}

#[test]
fn criterion_09_rho_star_is_a_lower_bound() {
    let truth = TruthParams::example(5);
    let design = DesignSpec { n_clusters: 12, n_periods: 5, cohort_size: 30, ..Default::default() };
    let rho_true = truth.implied_rho();
    let mut ok = 0;
    let mut worst = f64::NEG_INFINITY;
    for rep in 0..20u64 {
        let data = simulate_trial(&design, &truth, 9_000 + rep).unwrap();
        let est = estimate_rho_star(&data, false).unwrap();
        // Delta-method standard error of a sample correlation via Fisher's z.
        let se = (1.0 - est.rho_star.powi(2)) / ((est.n_pairs as f64) - 3.0).sqrt();
        let z = (est.rho_star - rho_true) / se;
        worst = worst.max(z);
        ok += (est.rho_star <= rho_true + 2.0 * se) as usize;
    }
    let pass = ok >= 18;
    report(9, pass, format!("ρ* ≤ ρ_true + 2 SE in {ok}/20 replicates (need 18); ρ_true {rho_true:.3}, largest excess {worst:.2} SE"));
    assert!(pass);
}

/// A trial shaped like the motivating study: 8 clusters on a staircase,
/// a mediator measured on a wide scale, small per-unit outcome slopes.
///
/// As ρ → 1 the stratum effect moves with the mediator shift at a rate of
/// about `(2β_2 + β_3)/2 - (λ_0 + λ_1)`, so the ordering at the top of the ρ
/// grid needs the calibrated λ draws to stay below the outcome slopes. With
/// 60 per cluster the auxiliary-regression lower bounds are noisy enough to
/// break that at ρ ≥ 0.8; 150 per cluster pins them near their population
/// values.
fn application_truth() -> (DesignSpec, TruthParams) {
    let design = DesignSpec { n_clusters: 8, n_periods: 5, cohort_size: 150, ..Default::default() };
    let truth = TruthParams {
        params: ModelParams {
            eta1: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            eta2: vec![-0.8, -0.6, -0.5, -0.4, -0.3],
            outcome_periods: (1..=5).collect(),
            gamma1: 1.0,
            beta1: 0.3,
            beta2: 0.08,
            beta3: 0.06,
            beta4: 0.0,
            sigma_eps: 2.0,
            alpha: RandomEffectCov::new(1.0, 0.3, 0.1),
            phi: RandomEffectCov::new(1.5, 0.4, 0.1),
        },
        mediator_lag: 0,
        rho: 0.5,
        lambda0: 0.05,
        lambda1: 0.05,
        link: Link::Logit,
    };
    (design, truth)
}

fn mean_of(est: &PceEstimate, t: usize, k: usize, rho: f64) -> Option<f64> {
    est.summary(t, k, rho).map(|s| s.mean)
}

#[test]
fn criterion_10_directional_pattern_of_the_application() {
    let (design, truth) = application_truth();
    let data = simulate_trial(&design, &truth, 1_010).unwrap();
    let out = fit(&data, &ModelSpec::default(), &HyperPriors::default(), &SamplerConfig { seed: 1_011, ..Default::default() }).unwrap();
    let cal = calibrate(&data, &out.draws, false).unwrap();
    let cfg: SensitivityConfig = cal.sensitivity.clone();

    let q = PceQuery { thin: 4, mc_size: 2000, seed: 1_012, ..Default::default() };
    let est = pce_posterior(&out.draws, &cfg, &q).unwrap();
    let mut order_fail = Vec::new();
    let mut cells = 0;
    for &t in out.draws.outcome_periods() {
        for &rho in &cfg.rho_grid {
            let m: Vec<f64> = (0..3).map(|k| mean_of(&est, t, k, rho).unwrap()).collect();
            cells += 1;
            if !(m[2] > m[0] && m[0] > m[1]) {
                order_fail.push(format!("t={t} ρ={rho:.2}: {:.4}/{:.4}/{:.4}", m[0], m[1], m[2]));
            }
        }
    }

    let sq = PceQuery { thin: 10, mc_size: 1000, seed: 1_013, ..Default::default() };
    let deltas = default_deltas();
    let sweep = pce_delta_sweep(&out.draws, &cfg, &sq, &deltas).unwrap();
    let (first, last) = (&sweep[0].1, &sweep[sweep.len() - 1].1);
    let mut sweep_fail = Vec::new();
    for &t in out.draws.outcome_periods() {
        for &rho in &cfg.rho_grid {
            let series = |k: usize| -> Vec<f64> { sweep.iter().filter_map(|(_, e)| mean_of(e, t, k, rho)).collect() };
            let spread = |xs: &[f64]| xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let (s1, s2, s3) = (series(0), series(1), series(2));
            let down2 = mean_of(last, t, 1, rho).zip(mean_of(first, t, 1, rho)).is_some_and(|(a, b)| a < b);
            let up3 = mean_of(last, t, 2, rho).zip(mean_of(first, t, 2, rho)).is_some_and(|(a, b)| a > b);
            let stable1 = spread(&s1) < spread(&s2).min(spread(&s3));
            if !(down2 && up3 && stable1) {
                sweep_fail.push(format!("t={t} ρ={rho:.2} (PCE2 down {down2}, PCE3 up {up3}, PCE1 flattest {stable1})"));
            }
        }
    }
    let pass = order_fail.is_empty() && sweep_fail.is_empty();
    report(
        10,
        pass,
        format!(
            "PCE3 > PCE1 > PCE2 in {}/{cells} (t, ρ) cells; δ-sweep {:?}: pattern holds in {}/{cells} cells; λ0 ∈ [{:.3}, {:.3}], λ1 ∈ [{:.3}, {:.3}] {} {}",
            cells - order_fail.len(),
            deltas,
            cells - sweep_fail.len(),
            cal.lambda0.lower,
            cal.lambda0.upper,
            cal.lambda1.lower,
            cal.lambda1.upper,
            order_fail.join("; "),
            sweep_fail.join("; ")
        ),
    );
    assert!(pass);
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let bytes = std::fs::read(e.path()).unwrap();
            (e.file_name().to_string_lossy().into_owned(), hex::encode(Sha256::digest(&bytes)))
        })
        .collect()
}

#[test]
fn criterion_11_pipeline_is_deterministic() {
    let run = |ws: &Path| {
        let ws = ws.to_str().unwrap();
        let common = ["--workspace", ws, "--seed", "1111", "--set", "design.cohort_size=15"];
        let steps: [&[&str]; 5] = [
            &["simulate"],
            &["fit", "--chains", "2", "--warmup", "300", "--samples", "300"],
            &["calibrate"],
            &["pce", "--thin", "5", "--mc-size", "300"],
            &["report"],
        ];
        for step in steps {
            let args: Vec<&str> = ["swpce"].into_iter().chain(common).chain(step.iter().copied()).collect();
            assert_eq!(swpce::cli::run_from(args.clone()), 0, "{args:?}");
        }
        hash_dir(Path::new(ws))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ha, hb) = (run(a.path()), run(b.path()));
    let differing: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
    let pass = ha.len() >= 9 && ha.keys().eq(hb.keys()) && differing.is_empty();
    report(11, pass, format!("{} artifacts per run; differing: {differing:?}", ha.len()));
    assert!(pass);
}
