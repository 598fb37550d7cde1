//! Appendix-level tools: the generalized Gronwall series bound with exact
//! handling of the singular convolution kernel, a quantitative
//! law-of-large-numbers gap estimator, fluctuation diagnostics of the
//! particle system against a reference flow, second-moment curves, a
//! Duhamel-identity residual test, and least-squares rate fitting.

use crate::error::{ChaosError, Result};
use crate::model::{eval_mean_field_fields, ModelSpec};
use crate::numeric::{ln_gamma, Kahan};
use crate::rng::{stream, Channel, Stream};
use crate::sde::{simulate_decoupled, MeasureFlow, ParticleEnsemble, SimConfig};

/// Input to the generalized Gronwall bound: the forcing `a` sampled on a
/// uniform grid over `[0, T]`, the kernel constant `C >= 0`, the kernel
/// exponent `theta > 0`, and the series truncation tolerance.
#[derive(Debug, Clone)]
pub struct GronwallInput {
    pub a: Vec<f64>,
    pub t_end: f64,
    pub c: f64,
    pub theta: f64,
    pub tolerance: f64,
}

/// Evaluates the series bound
/// `u(t) <= a(t) + sum_{n>=1} (C Gamma(theta))^n / Gamma(n theta)
///   int_0^t (t-s)^{n theta - 1} a(s) ds`
/// on the input grid. The singular factor is integrated exactly on each
/// panel against the piecewise-linear interpolant of `a`; naive quadrature
/// diverges for `n theta < 1`.
pub fn gronwall_bound(input: &GronwallInput) -> Result<Vec<f64>> {
    if !(input.theta > 0.0) {
        return Err(ChaosError::Domain(format!("theta must be > 0, got {}", input.theta)));
    }
    if input.c < 0.0 {
        return Err(ChaosError::Domain("C must be >= 0".into()));
    }
    if input.a.len() < 2 || !(input.t_end > 0.0) {
        return Err(ChaosError::Domain("need a grid of >= 2 samples over positive [0, T]".into()));
    }
    if input.a.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(ChaosError::Domain("a must be nonnegative and finite pointwise".into()));
    }
    let k = input.a.len() - 1;
    let h = input.t_end / k as f64;
    let mut bound = input.a.clone();
    if input.c == 0.0 {
        return Ok(bound);
    }
    let ln_cg = input.c.ln() + ln_gamma(input.theta);
    let tol = if input.tolerance > 0.0 { input.tolerance } else { 1e-12 };
    let mut settled = false;
    for n in 1..=500u32 {
        let p = n as f64 * input.theta;
        // log coefficient (C Gamma(theta))^n / Gamma(n theta).
        let ln_coef = n as f64 * ln_cg - ln_gamma(p);
        let mut term_sup = 0.0f64;
        for ti in 1..=k {
            let t = ti as f64 * h;
            // Exact panel integration: on [s_j, s_{j+1}] write
            // a(s) = A - m w with w = t - s, then
            // int w^{p-1}(A - m w) dw = A (w1^p - w2^p)/p
            //                         - m (w1^{p+1} - w2^{p+1})/(p+1).
            let mut acc = Kahan::new();
            for j in 0..ti {
                let s0 = j as f64 * h;
                let slope = (input.a[j + 1] - input.a[j]) / h;
                let a_cap = input.a[j] + slope * (t - s0);
                let w1 = t - s0;
                let w2 = t - (j + 1) as f64 * h;
                let first = a_cap * (w1.powf(p) - w2.powf(p)) / p;
                let second = slope * (w1.powf(p + 1.0) - w2.powf(p + 1.0)) / (p + 1.0);
                acc.add(first - second);
            }
            let term = ln_coef.exp() * acc.value();
            bound[ti] += term;
            term_sup = term_sup.max(term.abs());
        }
        let scale = bound.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        if term_sup < tol * scale {
            settled = true;
            break;
        }
    }
    if !settled {
        return Err(ChaosError::Numeric("gronwall_bound: series did not settle in 500 terms".into()));
    }
    Ok(bound)
}

/// One row of the LLN gap table.
#[derive(Debug, Clone, Copy)]
pub struct LlnRow {
    pub n: usize,
    pub mean_gap: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of
/// `E | (1/N) sum_m h(Z_1, Z_m) - int h(Z_1, y) dL(y) |`
/// for each N in the list, with `bar_h` the closed-form inner integral.
pub fn lln_gap<H, B, S>(
    h: H,
    bar_h: B,
    sampler: S,
    d: usize,
    n_list: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<Vec<LlnRow>>
where
    H: Fn(&[f64], &[f64]) -> f64,
    B: Fn(&[f64]) -> f64,
    S: Fn(&mut Stream, &mut [f64]),
{
    if replicas < 2 {
        return Err(ChaosError::Domain("lln_gap needs >= 2 replicas".into()));
    }
    if n_list.iter().any(|&n| n == 0) {
        return Err(ChaosError::Domain("lln_gap: N values must be positive".into()));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for (ni, &n) in n_list.iter().enumerate() {
        let mut acc = Kahan::new();
        let mut acc2 = Kahan::new();
        let mut z1 = vec![0.0; d];
        let mut zm = vec![0.0; d];
        for rep in 0..replicas {
            let mut rng = stream(seed, (ni * replicas + rep) as u64, 0, Channel::Mc);
            sampler(&mut rng, &mut z1);
            let mut sum = Kahan::new();
            sum.add(h(&z1, &z1));
            for _ in 1..n {
                sampler(&mut rng, &mut zm);
                sum.add(h(&z1, &zm));
            }
            let gap = (sum.value() / n as f64 - bar_h(&z1)).abs();
            acc.add(gap);
            acc2.add(gap * gap);
        }
        let m = replicas as f64;
        let mean = acc.value() / m;
        let var = (acc2.value() / m - mean * mean).max(0.0);
        rows.push(LlnRow { n, mean_gap: mean, stderr: (var / m).sqrt() });
    }
    Ok(rows)
}

/// Lemma-st2 fluctuation diagnostics of an ensemble against the flow at
/// time `s`: returns `(sum_i |B^i_s|, sum_i ||Sigma^i_s||_HS)` where `B^i`
/// is the gap between the empirical and flow-averaged interaction drifts at
/// `x^i`, and `Sigma^i` the gap between the corresponding `(avg sigma)(avg
/// sigma)^T` matrices.
pub fn fluctuation_terms(
    model: &ModelSpec,
    flow: &MeasureFlow,
    ensemble: &ParticleEnsemble,
    s: f64,
) -> Result<(f64, f64)> {
    let flow_cloud = flow.at_time(s)?;
    let (d, n) = (model.d, model.n);
    let mut sum_b = Kahan::new();
    let mut sum_sigma = Kahan::new();
    let mut b0 = vec![0.0; d];
    for i in 0..ensemble.len() {
        let x = ensemble.point(i);
        let (drift_emp, diff_emp) = eval_mean_field_fields(model, x, ensemble)?;
        let (drift_flow, diff_flow) = eval_mean_field_fields(model, x, flow_cloud)?;
        // Strip the common b0 so only the interaction average remains.
        model.eval_b0(x, &mut b0);
        let gap2: f64 = (0..d)
            .map(|k| {
                let g = (drift_emp[k] - b0[k]) - (drift_flow[k] - b0[k]);
                g * g
            })
            .sum();
        sum_b.add(gap2.sqrt());
        // (D_emp D_emp^T - D_flow D_flow^T) in Hilbert-Schmidt norm.
        let mut hs2 = Kahan::new();
        for r in 0..d {
            for c in 0..d {
                let mut e = 0.0;
                let mut f = 0.0;
                for l in 0..n {
                    e += diff_emp[r * n + l] * diff_emp[c * n + l];
                    f += diff_flow[r * n + l] * diff_flow[c * n + l];
                }
                hs2.add((e - f) * (e - f));
            }
        }
        sum_sigma.add(hs2.value().sqrt());
    }
    Ok((sum_b.value(), sum_sigma.value()))
}

/// Per-time ensemble second moments with Monte Carlo error.
pub fn second_moment_curve(trajectory: &[ParticleEnsemble]) -> Result<Vec<(f64, f64, f64)>> {
    if trajectory.is_empty() {
        return Err(ChaosError::Domain("second_moment_curve: empty trajectory".into()));
    }
    Ok(trajectory
        .iter()
        .map(|e| {
            let (m, se) = e.second_moment();
            (e.time, m, se)
        })
        .collect())
}

/// Outcome of the Duhamel-identity residual test.
#[derive(Debug, Clone)]
pub struct DuhamelReport {
    pub max_residual: f64,
    /// Combined Monte Carlo error at the worst grid point.
    pub error: f64,
    pub warning: Option<String>,
}

/// Semigroup evaluation `P_{0,tau} f(z)` for the time-homogeneous decoupled
/// dynamics of `model` under `flow`, by `reps` Monte Carlo paths; returns
/// (mean, variance of the path functional).
fn semigroup_mc<F: Fn(&[f64]) -> f64>(
    model: &ModelSpec,
    flow: &MeasureFlow,
    z: &[f64],
    tau: f64,
    f: &F,
    reps: usize,
    seed: u64,
    particle: u64,
) -> Result<(f64, f64)> {
    if tau <= 0.0 {
        return Ok((f(z), 0.0));
    }
    let dt = tau / (tau / 0.02).ceil().max(4.0);
    let cfg = SimConfig { dt, t_end: tau, seed, replicas: 1 };
    let mut acc = Kahan::new();
    let mut acc2 = Kahan::new();
    for rep in 0..reps {
        let traj = simulate_decoupled(model, flow, 0.0, z, &cfg, rep as u64, particle, usize::MAX)?;
        let v = f(&traj.last().unwrap().1);
        acc.add(v);
        acc2.add(v * v);
    }
    let m = reps as f64;
    let mean = acc.value() / m;
    let var = (acc2.value() / m - mean * mean).max(0.0);
    Ok((mean, var))
}

/// Common-random-number derivative estimates of `x -> P_{0,tau} f(x)`:
/// gradient and diagonal Hessian entries by central differences sharing one
/// noise path per inner replica.
#[allow(clippy::too_many_arguments)]
fn semigroup_derivatives<F: Fn(&[f64]) -> f64>(
    model: &ModelSpec,
    flow: &MeasureFlow,
    x: &[f64],
    tau: f64,
    f: &F,
    h: f64,
    reps: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.d;
    let mut grad = vec![0.0; d];
    let mut hess_diag = vec![0.0; d];
    if tau <= 0.0 {
        // Derivatives of f itself by plain central differences.
        for k in 0..d {
            let mut xp = x.to_vec();
            xp[k] += h;
            let mut xm = x.to_vec();
            xm[k] -= h;
            grad[k] = (f(&xp) - f(&xm)) / (2.0 * h);
            hess_diag[k] = (f(&xp) - 2.0 * f(x) + f(&xm)) / (h * h);
        }
        return Ok((grad, hess_diag));
    }
    let dt = tau / (tau / 0.02).ceil().max(4.0);
    let cfg = SimConfig { dt, t_end: tau, seed, replicas: 1 };
    for k in 0..d {
        let mut g = Kahan::new();
        let mut hd = Kahan::new();
        for rep in 0..reps {
            // Same (replica, particle) stream for all three starting
            // points: the noise cancels in the differences.
            let run = |start: &[f64]| -> Result<f64> {
                let traj = simulate_decoupled(
                    model,
                    flow,
                    0.0,
                    start,
                    &cfg,
                    rep as u64,
                    (100 + k) as u64,
                    usize::MAX,
                )?;
                Ok(f(&traj.last().unwrap().1))
            };
            let mut xp = x.to_vec();
            xp[k] += h;
            let mut xm = x.to_vec();
            xm[k] -= h;
            let (fp, f0, fm) = (run(&xp)?, run(x)?, run(&xm)?);
            g.add((fp - fm) / (2.0 * h));
            hd.add((fp - 2.0 * f0 + fm) / (h * h));
        }
        grad[k] = g.value() / reps as f64;
        hess_diag[k] = hd.value() / reps as f64;
    }
    Ok((grad, hess_diag))
}

/// Effective drift and diffusion matrix `a = beta I + D D^T` of the
/// decoupled generator at `x` (D is the flow-averaged sigma).
fn generator_coefficients(
    model: &ModelSpec,
    flow: &MeasureFlow,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cloud = flow.at_time(flow.start_time())?;
    let (drift, diff) = eval_mean_field_fields(model, x, cloud)?;
    let (d, n) = (model.d, model.n);
    let mut a = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            let mut v = if r == c { model.beta } else { 0.0 };
            for l in 0..n {
                v += diff[r * n + l] * diff[c * n + l];
            }
            a[r * d + c] = v;
        }
    }
    Ok((drift, a))
}

/// Tests the Duhamel identity
/// `P^1_{0,t} f - P^2_{0,t} f = int_0^t P^1_{0,s} {(L^1 - L^2) P^2_{0,t-s} f} ds`
/// for two time-homogeneous models sharing a state space (both read the
/// same frozen flow). The left side uses two Monte Carlo semigroup
/// evaluations; the right side uses Simpson quadrature in `s` over a nested
/// estimate with common-random-number finite differences for the
/// derivatives of `P^2 f`. Off-diagonal Hessian terms are not needed for
/// the supported built-ins (diffusion matrices differ only on the
/// diagonal).
#[allow(clippy::too_many_arguments)]
pub fn duhamel_residual<F: Fn(&[f64]) -> f64 + Sync>(
    model1: &ModelSpec,
    model2: &ModelSpec,
    flow: &MeasureFlow,
    f: &F,
    t: f64,
    z_grid: &[Vec<f64>],
    mc_budget: usize,
    h: f64,
    seed: u64,
) -> Result<DuhamelReport> {
    if model1.d != model2.d || model1.n != model2.n {
        return Err(ChaosError::Domain("duhamel_residual: state spaces must match".into()));
    }
    if !(t > 0.0) || !(h > 0.0) || mc_budget < 8 || z_grid.is_empty() {
        return Err(ChaosError::Domain("duhamel_residual: need t > 0, h > 0, budget >= 8, nonempty grid".into()));
    }
    let d = model1.d;
    // Simpson nodes in s (even panel count).
    let panels = 8usize;
    let ds = t / panels as f64;
    let outer = (mc_budget / 4).max(16);
    let inner = (mc_budget / 2).max(32);
    let mut worst = 0.0f64;
    let mut worst_err = 0.0f64;
    let mut noisy = false;
    for (zi, z) in z_grid.iter().enumerate() {
        let zseed = seed.wrapping_add(zi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (p1, v1) = semigroup_mc(model1, flow, z, t, f, mc_budget, zseed, 1)?;
        let (p2, v2) = semigroup_mc(model2, flow, z, t, f, mc_budget, zseed, 2)?;
        let lhs = p1 - p2;
        let lhs_err = ((v1 + v2) / mc_budget as f64).sqrt();

        // RHS: Simpson over s of F(s) = E[g(X^1_s)], X^1_s from model1,
        // g(x) = <db(x), grad P^2_{0,t-s} f(x)> + 1/2 tr(da(x) hess ...).
        let mut rhs = Kahan::new();
        let mut rhs_var = 0.0f64;
        for node in 0..=panels {
            let s = node as f64 * ds;
            let tau = t - s;
            let weight = ds / 3.0
                * if node == 0 || node == panels {
                    1.0
                } else if node % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
            // Outer samples of X^1_s started at z.
            let mut gs = Vec::with_capacity(outer);
            for rep in 0..outer {
                let x_s: Vec<f64> = if s <= 0.0 {
                    z.clone()
                } else {
                    let dt = s / (s / 0.02).ceil().max(4.0);
                    let cfg = SimConfig { dt, t_end: s, seed: zseed, replicas: 1 };
                    simulate_decoupled(model1, flow, 0.0, z, &cfg, rep as u64, 3, usize::MAX)?
                        .last()
                        .unwrap()
                        .1
                        .clone()
                };
                let (b1, a1) = generator_coefficients(model1, flow, &x_s)?;
                let (b2, a2) = generator_coefficients(model2, flow, &x_s)?;
                let (grad, hess) = semigroup_derivatives(
                    model2,
                    flow,
                    &x_s,
                    tau,
                    f,
                    h,
                    inner,
                    zseed ^ 0xabcd,
                )?;
                let mut g = 0.0;
                for k in 0..d {
                    g += (b1[k] - b2[k]) * grad[k];
                    g += 0.5 * (a1[k * d + k] - a2[k * d + k]) * hess[k];
                }
                gs.push(g);
            }
            let m = gs.len() as f64;
            let mean = gs.iter().sum::<f64>() / m;
            let var = gs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
            rhs.add(weight * mean);
            rhs_var += weight * weight * var / m;
            if var.sqrt() > 10.0 * (mean.abs() + 0.01) {
                noisy = true;
            }
        }
        let residual = (lhs - rhs.value()).abs();
        let err = (lhs_err * lhs_err + rhs_var).sqrt();
        if residual > worst {
            worst = residual;
            worst_err = err;
        }
    }
    Ok(DuhamelReport {
        max_residual: worst,
        error: worst_err,
        warning: if noisy {
            Some(format!("finite-difference noise dominates at h = {h}; consider a larger step"))
        } else {
            None
        },
    })
}

/// Ordinary-least-squares rate fit on log-transformed data.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence half-width of the slope.
    pub ci_half: f64,
    pub r2: f64,
}

/// Fits `log y` against `x` (`log_x = false`, exponential rates) or against
/// `log x` (`log_x = true`, power laws).
pub fn fit_rate(points: &[(f64, f64)], log_x: bool) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(ChaosError::Domain("fit_rate needs at least 3 points".into()));
    }
    if points.iter().any(|(x, y)| !(*y > 0.0) || (log_x && !(*x > 0.0))) {
        return Err(ChaosError::Domain("fit_rate: y (and x when log-x) must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|(x, _)| if log_x { x.ln() } else { *x }).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(ChaosError::Domain("fit_rate: x values are degenerate".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let dof = (n - 2.0).max(1.0);
    let se_slope = (ss_res / dof / sxx).sqrt();
    Ok(RateFit { slope, intercept, ci_half: 1.96 * se_slope, r2 })
}
