//! Model coefficients, the piecewise dissipativity profile and a sampling
//! audit of the structural assumptions.
//!
//! A model consists of a confined drift `b0`, a pairwise interaction drift
//! `b1`, a pairwise diffusion `sigma` (a d×n matrix for each pair of points),
//! an additive noise intensity `beta`, and the constants
//! `(K1, K2, R, K_b, K_sigma)` under which the contraction theory applies.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{ChaosError, Result};
use crate::numeric::Kahan;
use crate::sde::ParticleEnsemble;

pub type VecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type PairFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Constants of the structural assumption: `K1 >= 0`, `K2 > 0`, `R > 0`
/// parameterize the dissipativity profile, `K_b >= 0` the interaction-drift
/// Lipschitz bound and `K_sigma > 0` the diffusion bound.
#[derive(Debug, Clone, Copy, Deserialize)]
pub struct ModelConstants {
    pub k1: f64,
    pub k2: f64,
    pub r: f64,
    pub kb: f64,
    pub ksigma: f64,
}

/// Confined drift families.
#[derive(Clone)]
pub enum Drift0 {
    Zero,
    /// `b0(x) = -a x`.
    Linear { a: f64 },
    /// `b0(x) = x (1 - |x|^2)`.
    DoubleWell,
    Custom(VecFn),
}

/// Pairwise interaction drift families.
#[derive(Clone)]
pub enum Drift1 {
    Zero,
    /// `b1(x, y) = kappa (y - x)`.
    LinearAttraction { kappa: f64 },
    Custom(PairFn),
}

/// Pairwise diffusion families. All built-ins are bounded and Lipschitz.
#[derive(Clone)]
pub enum Sigma {
    Zero,
    /// `sigma(x, y) = scale * M` for a fixed d×n matrix `M`.
    Constant { scale: f64, matrix: Arc<Vec<f64>> },
    /// `sigma(x, y) = scale (1 + |x - y|^2)^{-1/2} M`.
    BoundedSmooth { scale: f64, matrix: Arc<Vec<f64>> },
    Custom(PairFn),
}

/// The one-sided dissipativity rate `gamma`.
#[derive(Clone)]
pub enum DissipativityProfile {
    /// Three-branch piecewise profile: `K1 r` on `[0, R]`, the linear
    /// interpolation of the slope on `[R, 2R]`, and `-K2 r` beyond `2R`.
    Piecewise { k1: f64, k2: f64, r: f64 },
    /// A user-supplied rate. The declared tail (`gamma(v) <= -tail_rate * v`
    /// for `v >= tail_radius`) is what makes the delta-integral finite.
    Override {
        gamma: ScalarFn,
        tail_rate: f64,
        tail_radius: f64,
    },
}

impl std::fmt::Debug for DissipativityProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Piecewise { k1, k2, r } => write!(f, "Piecewise{{k1:{k1},k2:{k2},r:{r}}}"),
            Self::Override { tail_rate, tail_radius, .. } => {
                write!(f, "Override{{tail_rate:{tail_rate},tail_radius:{tail_radius}}}")
            }
        }
    }
}

/// Evaluate the dissipativity rate at `r >= 0`.
pub fn gamma_profile(profile: &DissipativityProfile, radius: f64) -> Result<f64> {
    if radius < 0.0 {
        return Err(ChaosError::Domain(format!("gamma_profile: negative radius {radius}")));
    }
    Ok(gamma_value(profile, radius))
}

/// Unchecked evaluation, for inner loops where `r >= 0` by construction.
#[inline]
pub fn gamma_value(profile: &DissipativityProfile, x: f64) -> f64 {
    match profile {
        DissipativityProfile::Piecewise { k1, k2, r } => {
            if x <= *r {
                k1 * x
            } else if x <= 2.0 * r {
                (-(k1 + k2) / r * (x - r) + k1) * x
            } else {
                -k2 * x
            }
        }
        DissipativityProfile::Override { gamma, .. } => gamma(x),
    }
}

/// A full model specification. Immutable after construction; evaluators are
/// pure functions, safe to call from many workers simultaneously.
#[derive(Clone)]
pub struct ModelSpec {
    pub d: usize,
    pub n: usize,
    pub beta: f64,
    pub constants: ModelConstants,
    pub b0: Drift0,
    pub b1: Drift1,
    pub sigma: Sigma,
    pub profile: DissipativityProfile,
    /// Built-in families ship with certified constants; custom evaluators
    /// stay unverified until `verify_assumptions` passes.
    pub certified: bool,
}

impl ModelSpec {
    pub fn new(
        d: usize,
        n: usize,
        beta: f64,
        constants: ModelConstants,
        b0: Drift0,
        b1: Drift1,
        sigma: Sigma,
        profile: DissipativityProfile,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(ChaosError::Domain("dimensions d, n must be positive".into()));
        }
        if !(beta > 0.0) {
            return Err(ChaosError::Domain(format!("beta must be > 0, got {beta}")));
        }
        if !(constants.k2 > 0.0) || !(constants.r > 0.0) || constants.k1 < 0.0 {
            return Err(ChaosError::Domain(
                "constants require K1 >= 0, K2 > 0, R > 0".into(),
            ));
        }
        if constants.kb < 0.0 || !(constants.ksigma > 0.0) {
            return Err(ChaosError::Domain("constants require K_b >= 0, K_sigma > 0".into()));
        }
        let certified = !matches!(b0, Drift0::Custom(_))
            && !matches!(b1, Drift1::Custom(_))
            && !matches!(sigma, Sigma::Custom(_));
        Ok(Self { d, n, beta, constants, b0, b1, sigma, profile, certified })
    }

    /// Ornstein–Uhlenbeck model `b0 = -a x` with no interaction and the
    /// matching linear dissipativity override `gamma(r) = -a r`.
    pub fn ou(d: usize, a: f64, beta: f64) -> Self {
        let constants = ModelConstants { k1: 0.0, k2: a, r: 1.0, kb: 0.0, ksigma: 1e-12 };
        // K_sigma strictly positive is required by the contract; the diffusion
        // itself is zero so any tiny value is a valid certificate.
        ModelSpec::new(
            d,
            1,
            beta,
            constants,
            Drift0::Linear { a },
            Drift1::Zero,
            Sigma::Zero,
            DissipativityProfile::Override {
                gamma: Arc::new(move |r| -a * r),
                tail_rate: a,
                tail_radius: 0.0,
            },
        )
        .expect("OU parameters are valid")
    }

    pub fn eval_b0(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d);
        match &self.b0 {
            Drift0::Zero => out.fill(0.0),
            Drift0::Linear { a } => {
                for i in 0..self.d {
                    out[i] = -a * x[i];
                }
            }
            Drift0::DoubleWell => {
                let norm2: f64 = x.iter().map(|v| v * v).sum();
                for i in 0..self.d {
                    out[i] = x[i] * (1.0 - norm2);
                }
            }
            Drift0::Custom(f) => f(x, out),
        }
    }

    pub fn eval_b1(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match &self.b1 {
            Drift1::Zero => out.fill(0.0),
            Drift1::LinearAttraction { kappa } => {
                for i in 0..self.d {
                    out[i] = kappa * (y[i] - x[i]);
                }
            }
            Drift1::Custom(f) => f(x, y, out),
        }
    }

    /// Writes the d×n matrix `sigma(x, y)` into `out` in row-major order.
    pub fn eval_sigma(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match &self.sigma {
            Sigma::Zero => out.fill(0.0),
            Sigma::Constant { scale, matrix } => {
                for (o, m) in out.iter_mut().zip(matrix.iter()) {
                    *o = scale * m;
                }
            }
            Sigma::BoundedSmooth { scale, matrix } => {
                let dist2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                let w = scale / (1.0 + dist2).sqrt();
                for (o, m) in out.iter_mut().zip(matrix.iter()) {
                    *o = w * m;
                }
            }
            Sigma::Custom(f) => f(x, y, out),
        }
    }

    /// Scalar fast path for `d = n = 1`.
    #[inline]
    pub fn b0_1d(&self, x: f64) -> f64 {
        match &self.b0 {
            Drift0::Zero => 0.0,
            Drift0::Linear { a } => -a * x,
            Drift0::DoubleWell => x * (1.0 - x * x),
            Drift0::Custom(f) => {
                let mut out = [0.0];
                f(&[x], &mut out);
                out[0]
            }
        }
    }

    #[inline]
    pub fn b1_1d(&self, x: f64, y: f64) -> f64 {
        match &self.b1 {
            Drift1::Zero => 0.0,
            Drift1::LinearAttraction { kappa } => kappa * (y - x),
            Drift1::Custom(f) => {
                let mut out = [0.0];
                f(&[x], &[y], &mut out);
                out[0]
            }
        }
    }

    #[inline]
    pub fn sigma_1d(&self, x: f64, y: f64) -> f64 {
        match &self.sigma {
            Sigma::Zero => 0.0,
            Sigma::Constant { scale, matrix } => scale * matrix[0],
            Sigma::BoundedSmooth { scale, matrix } => {
                let dxy = x - y;
                scale * matrix[0] / (1.0 + dxy * dxy).sqrt()
            }
            Sigma::Custom(f) => {
                let mut out = [0.0];
                f(&[x], &[y], &mut out);
                out[0]
            }
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.d == 1 && self.n == 1
    }
}

/// d×n matrix with ones on the main diagonal, the default built-in matrix.
pub fn eye_matrix(d: usize, n: usize) -> Arc<Vec<f64>> {
    let mut m = vec![0.0; d * n];
    for i in 0..d.min(n) {
        m[i * n + i] = 1.0;
    }
    Arc::new(m)
}

/// Empirical-average drift and diffusion felt by a point `x` against a cloud.
///
/// `drift = b0(x) + (1/N) sum_j b1(x, x_j)` and
/// `diffusion = (1/N) sum_j sigma(x, x_j)`; the sum runs over every cloud
/// member, including `x` itself when it belongs to the cloud. Summation is
/// compensated and in index order, so the result does not depend on worker
/// scheduling.
pub fn eval_mean_field_fields(
    model: &ModelSpec,
    x: &[f64],
    cloud: &ParticleEnsemble,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cloud.len() == 0 {
        return Err(ChaosError::Domain("eval_mean_field_fields: empty cloud".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ChaosError::Domain("eval_mean_field_fields: non-finite point".into()));
    }
    let d = model.d;
    let n = model.n;
    let inv_n = 1.0 / cloud.len() as f64;
    let mut drift = vec![0.0; d];
    let mut diffusion = vec![0.0; d * n];
    if model.is_scalar() {
        let xi = x[0];
        let mut acc_b = Kahan::new();
        let mut acc_s = Kahan::new();
        for j in 0..cloud.len() {
            let yj = cloud.point(j)[0];
            acc_b.add(model.b1_1d(xi, yj));
            acc_s.add(model.sigma_1d(xi, yj));
        }
        drift[0] = model.b0_1d(xi) + inv_n * acc_b.value();
        diffusion[0] = inv_n * acc_s.value();
    } else {
        let mut acc_b: Vec<Kahan> = vec![Kahan::new(); d];
        let mut acc_s: Vec<Kahan> = vec![Kahan::new(); d * n];
        let mut buf_b = vec![0.0; d];
        let mut buf_s = vec![0.0; d * n];
        for j in 0..cloud.len() {
            let yj = cloud.point(j);
            model.eval_b1(x, yj, &mut buf_b);
            model.eval_sigma(x, yj, &mut buf_s);
            for (acc, &v) in acc_b.iter_mut().zip(buf_b.iter()) {
                acc.add(v);
            }
            for (acc, &v) in acc_s.iter_mut().zip(buf_s.iter()) {
                acc.add(v);
            }
        }
        model.eval_b0(x, &mut drift);
        for i in 0..d {
            drift[i] += inv_n * acc_b[i].value();
        }
        for (o, acc) in diffusion.iter_mut().zip(acc_s.iter()) {
            *o = inv_n * acc.value();
        }
    }
    for (name, vals) in [("drift", &drift), ("diffusion", &diffusion)] {
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ChaosError::Numeric(format!(
                "eval_mean_field_fields: non-finite {name} at x={x:?}"
            )));
        }
    }
    Ok((drift, diffusion))
}

/// One audited inequality of the assumption report.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst observed LHS/RHS ratio; the check passes while it stays below
    /// `1 + tolerance`.
    pub worst_ratio: f64,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub pass: bool,
}

/// Outcome of sampling the structural assumptions on random point pairs.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub sigma_lipschitz: CheckResult,
    pub sigma_operator: CheckResult,
    pub b1_lipschitz: CheckResult,
    pub dissipativity: CheckResult,
    pub samples: usize,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.sigma_lipschitz.pass
            && self.sigma_operator.pass
            && self.b1_lipschitz.pass
            && self.dissipativity.pass
    }
}

const AUDIT_TOLERANCE: f64 = 1e-9;

/// Audits the four inequalities of the structural assumption on
/// `sample_budget` random point pairs in the centered ball of the given
/// radius. Reports worst ratios and witnesses.
pub fn verify_assumptions(
    model: &ModelSpec,
    sample_budget: usize,
    radius: f64,
    seed: u64,
) -> Result<AssumptionReport> {
    if sample_budget < 1 {
        return Err(ChaosError::Domain("verify_assumptions: sample_budget >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(ChaosError::Domain("verify_assumptions: radius must be > 0".into()));
    }
    let mut rng = crate::rng::stream(seed, 0, 0, crate::rng::Channel::Audit);
    let d = model.d;
    let k = &model.constants;

    let mut worst: [(f64, Option<(Vec<f64>, Vec<f64>)>); 4] =
        std::array::from_fn(|_| (0.0, None));
    let sample_point = |rng: &mut crate::rng::Stream| -> Vec<f64> {
        // Uniform in the ball: normal direction with U^{1/d} radial scaling.
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let u: f64 = rng.gen::<f64>();
        let r = radius * u.powf(1.0 / d as f64);
        dir.into_iter().map(|v| v / norm * r).collect()
    };

    let mut s1 = vec![0.0; d * model.n];
    let mut s2 = vec![0.0; d * model.n];
    let mut b1a = vec![0.0; d];
    let mut b1b = vec![0.0; d];
    let mut b0a = vec![0.0; d];
    let mut b0b = vec![0.0; d];
    for _ in 0..sample_budget {
        let x1 = sample_point(&mut rng);
        let x2 = sample_point(&mut rng);
        let y1 = sample_point(&mut rng);
        let y2 = sample_point(&mut rng);
        let dx2: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b) * (a - b)).sum();
        let dy2: f64 = y1.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum();

        // (i) 0.5 ||sigma(x1,y1) - sigma(x2,y2)||_HS^2 <= K_sigma (|dx|^2 + |dy|^2)
        model.eval_sigma(&x1, &y1, &mut s1);
        model.eval_sigma(&x2, &y2, &mut s2);
        let hs2: f64 = s1.iter().zip(&s2).map(|(a, b)| (a - b) * (a - b)).sum();
        let rhs = k.ksigma * (dx2 + dy2);
        if rhs > 0.0 {
            let ratio = 0.5 * hs2 / rhs;
            if ratio > worst[0].0 {
                worst[0] = (ratio, Some((x1.clone(), x2.clone())));
            }
        }

        // (ii) largest eigenvalue of sigma sigma^T <= K_sigma
        let lam = operator_norm_sq(&s1, d, model.n);
        let ratio = lam / k.ksigma;
        if ratio > worst[1].0 {
            worst[1] = (ratio, Some((x1.clone(), y1.clone())));
        }

        // (iii) |b1 difference| <= K_b (|dx| + |dy|)
        model.eval_b1(&x1, &y1, &mut b1a);
        model.eval_b1(&x2, &y2, &mut b1b);
        let db1: f64 = b1a.iter().zip(&b1b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let rhs = k.kb * (dx2.sqrt() + dy2.sqrt());
        if db1 > 0.0 {
            let ratio = if rhs > 0.0 { db1 / rhs } else { f64::INFINITY };
            if ratio > worst[2].0 {
                worst[2] = (ratio, Some((x1.clone(), x2.clone())));
            }
        }

        // (iv) <x1-x2, b0(x1)-b0(x2)> <= gamma(|x1-x2|) |x1-x2|
        model.eval_b0(&x1, &mut b0a);
        model.eval_b0(&x2, &mut b0b);
        let inner: f64 = x1
            .iter()
            .zip(&x2)
            .zip(b0a.iter().zip(&b0b))
            .map(|((xa, xb), (ba, bb))| (xa - xb) * (ba - bb))
            .sum();
        let dist = dx2.sqrt();
        if dist > 1e-12 {
            let bound = gamma_value(&model.profile, dist) * dist;
            let r = normalized_one_sided_ratio(inner, bound);
            if r > worst[3].0 {
                worst[3] = (r, Some((x1.clone(), x2.clone())));
            }
        }
    }

    let mk = |idx: usize, name: &'static str| CheckResult {
        name,
        worst_ratio: worst[idx].0,
        witness: if worst[idx].0 > 1.0 + AUDIT_TOLERANCE { worst[idx].1.clone() } else { None },
        pass: worst[idx].0 <= 1.0 + AUDIT_TOLERANCE,
    };
    Ok(AssumptionReport {
        sigma_lipschitz: mk(0, "sigma Lipschitz (HS)"),
        sigma_operator: mk(1, "sigma operator bound"),
        b1_lipschitz: mk(2, "b1 Lipschitz"),
        dissipativity: mk(3, "b0 one-sided dissipativity"),
        samples: sample_budget,
    })
}

/// Ratio expressing `lhs <= bound` as a number passing at <= 1.
///
/// For positive bounds this is `lhs / bound`; for negative bounds the
/// inequality flips under division, so we measure how far `lhs` exceeds it.
fn normalized_one_sided_ratio(lhs: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        (lhs / bound).max(0.0)
    } else if bound < 0.0 {
        if lhs < 0.0 {
            // Monotone in the violation: <= 1 exactly when lhs <= bound.
            bound / lhs
        } else {
            1.0 + (lhs - bound) / bound.abs()
        }
    } else if lhs <= 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Largest eigenvalue of `s s^T` for a row-major d×n matrix, by power
/// iteration on the d×d Gram matrix.
fn operator_norm_sq(s: &[f64], d: usize, n: usize) -> f64 {
    if d == 1 {
        return s.iter().map(|v| v * v).sum();
    }
    let mut gram = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..n {
                acc += s[i * n + k] * s[j * n + k];
            }
            gram[i * d + j] = acc;
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lam = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                w[i] += gram[i * d + j] * v[j];
            }
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        let new_lam = norm;
        for x in w.iter_mut() {
            *x /= norm;
        }
        v = w;
        if (new_lam - lam).abs() <= 1e-13 * new_lam.max(1.0) {
            return new_lam;
        }
        lam = new_lam;
    }
    lam
}

/// Fits the smallest piecewise profile dominating the observed one-sided
/// slopes of a scalar drift on a grid, scanning `R` from tight to loose.
///
/// Returns `(K1, K2, R)`.
pub fn fit_dissipativity_1d<F: Fn(f64) -> f64>(b0: F, x_max: f64, grid: usize) -> Result<(f64, f64, f64)> {
    // slope(r) = sup_{|x-y|=r} (b0(x)-b0(y)) / (x-y) over [-x_max, x_max].
    let rs: Vec<f64> = (1..=grid).map(|i| 2.0 * x_max * i as f64 / grid as f64).collect();
    let slope: Vec<f64> = rs
        .iter()
        .map(|&r| {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=grid {
                let x = -x_max + 2.0 * x_max * i as f64 / grid as f64;
                let y = x - r;
                if y < -x_max {
                    continue;
                }
                best = best.max((b0(x) - b0(y)) / r);
            }
            best
        })
        .collect();
    let mut k1 = slope.iter().cloned().fold(0.0f64, f64::max);
    // Chord slopes at the smallest grid separation still undershoot the
    // r -> 0 limit; fold in the derivative supremum via central differences.
    let h = 1e-6 * x_max.max(1.0);
    for i in 0..=grid {
        let x = -x_max + 2.0 * x_max * i as f64 / grid as f64;
        k1 = k1.max((b0(x + h) - b0(x - h)) / (2.0 * h));
    }
    for &r_cand in rs.iter() {
        // Tail rate available beyond 2R.
        let mut k2 = f64::INFINITY;
        let mut any = false;
        for (j, &r) in rs.iter().enumerate() {
            if r >= 2.0 * r_cand {
                k2 = k2.min(-slope[j]);
                any = true;
            }
        }
        if !any || !(k2 > 0.0) || !k2.is_finite() {
            continue;
        }
        let profile = DissipativityProfile::Piecewise { k1, k2, r: r_cand };
        // Domination check in rate form: gamma(r) >= slope(r) * r.
        let dominated = rs
            .iter()
            .zip(slope.iter())
            .all(|(&r, &s)| gamma_value(&profile, r) + 1e-9 * (1.0 + r) >= s * r);
        if dominated {
            return Ok((k1, k2, r_cand));
        }
    }
    Err(ChaosError::Numeric("fit_dissipativity_1d: no dominating piecewise profile found".into()))
}

// ---------------------------------------------------------------------------
// JSON loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ModelDoc {
    family: String,
    d: usize,
    n: usize,
    beta: f64,
    constants: ModelConstants,
    #[serde(default)]
    params: serde_json::Map<String, serde_json::Value>,
}

fn param_f64(params: &serde_json::Map<String, serde_json::Value>, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| ChaosError::Config(format!("params.{key}: expected a number"))),
    }
}

fn param_str<'a>(
    params: &'a serde_json::Map<String, serde_json::Value>,
    key: &str,
    default: &'a str,
) -> Result<&'a str> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_str()
            .ok_or_else(|| ChaosError::Config(format!("params.{key}: expected a string"))),
    }
}

fn sigma_from_params(
    doc: &ModelDoc,
) -> Result<Sigma> {
    let kind = param_str(&doc.params, "sigma_family", "zero")?;
    let scale = param_f64(&doc.params, "sigma_scale", 0.1)?;
    let m = eye_matrix(doc.d, doc.n);
    match kind {
        "zero" => Ok(Sigma::Zero),
        "constant" => Ok(Sigma::Constant { scale, matrix: m }),
        "bounded_smooth" => Ok(Sigma::BoundedSmooth { scale, matrix: m }),
        other => Err(ChaosError::Config(format!(
            "params.sigma_family: unknown family \"{other}\" (expected zero | constant | bounded_smooth)"
        ))),
    }
}

fn drift1_from_params(doc: &ModelDoc) -> Result<Drift1> {
    let kappa = param_f64(&doc.params, "kappa", 0.0)?;
    if kappa == 0.0 {
        Ok(Drift1::Zero)
    } else {
        Ok(Drift1::LinearAttraction { kappa })
    }
}

/// Loads a model from the JSON document
/// `{"family", "d", "n", "beta", "constants", "params"}`.
pub fn model_from_json(text: &str) -> Result<ModelSpec> {
    let doc: ModelDoc = serde_json::from_str(text)
        .map_err(|e| ChaosError::Config(format!("model: {e}")))?;
    model_from_doc(doc)
}

pub fn model_from_json_value(value: &serde_json::Value) -> Result<ModelSpec> {
    let doc: ModelDoc = serde_json::from_value(value.clone())
        .map_err(|e| ChaosError::Config(format!("model: {e}")))?;
    model_from_doc(doc)
}

fn model_from_doc(doc: ModelDoc) -> Result<ModelSpec> {
    let sigma = sigma_from_params(&doc)?;
    let b1 = drift1_from_params(&doc)?;
    let profile_kind = param_str(&doc.params, "profile", "")?.to_string();
    match doc.family.as_str() {
        "zero" => {
            let profile = DissipativityProfile::Piecewise {
                k1: doc.constants.k1,
                k2: doc.constants.k2,
                r: doc.constants.r,
            };
            ModelSpec::new(doc.d, doc.n, doc.beta, doc.constants, Drift0::Zero, b1, sigma, profile)
        }
        "linear" => {
            let a = param_f64(&doc.params, "a", 1.0)?;
            if !(a > 0.0) {
                return Err(ChaosError::Config("params.a: linear family needs a > 0".into()));
            }
            let profile = if profile_kind == "piecewise" {
                DissipativityProfile::Piecewise {
                    k1: doc.constants.k1,
                    k2: doc.constants.k2,
                    r: doc.constants.r,
                }
            } else {
                DissipativityProfile::Override {
                    gamma: Arc::new(move |r| -a * r),
                    tail_rate: a,
                    tail_radius: 0.0,
                }
            };
            ModelSpec::new(
                doc.d,
                doc.n,
                doc.beta,
                doc.constants,
                Drift0::Linear { a },
                b1,
                sigma,
                profile,
            )
        }
        "double_well" => {
            let profile = DissipativityProfile::Piecewise {
                k1: doc.constants.k1,
                k2: doc.constants.k2,
                r: doc.constants.r,
            };
            ModelSpec::new(
                doc.d,
                doc.n,
                doc.beta,
                doc.constants,
                Drift0::DoubleWell,
                b1,
                sigma,
                profile,
            )
        }
        other => Err(ChaosError::Config(format!(
            "family: unknown family \"{other}\" (expected zero | linear | double_well)"
        ))),
    }
}
