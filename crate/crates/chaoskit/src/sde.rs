//! Euler–Maruyama engines for the N-particle system, the reference
//! (large-N) flow standing in for the mean-field limit, the decoupled SDE
//! driven by a frozen measure flow, and the reflection/synchronous coupling
//! of two decoupled legs. Also hosts the empirical gradient-constant
//! estimator for the semigroup of the decoupled equation.
//!
//! Replicas are embarrassingly parallel: every consumer of noise owns a
//! stream keyed by `(seed, replica, particle, channel)`, and reductions are
//! performed in fixed index order, so trajectories are bit-identical
//! regardless of worker scheduling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::constants::FCache;
use crate::error::{ChaosError, Result};
use crate::model::{eval_mean_field_fields, Drift1, ModelSpec, Sigma};
use crate::numeric::Kahan;
use crate::rng::{stream, Channel, Stream};

/// A cloud of N points in R^d at one instant.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub time: f64,
    pub d: usize,
    states: Vec<f64>,
}

impl ParticleEnsemble {
    /// Wraps a flat row-major state vector (particle-major).
    pub fn from_states(time: f64, states: Vec<f64>, d: usize) -> Self {
        assert!(d >= 1, "state dimension must be positive");
        assert!(states.len() % d == 0, "state vector length must be a multiple of d");
        ParticleEnsemble { time, d, states }
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    #[inline]
    pub fn point(&self, j: usize) -> &[f64] {
        &self.states[j * self.d..(j + 1) * self.d]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Coordinate-wise mean, compensated, in index order.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1);
        let mut acc = vec![Kahan::new(); self.d];
        for j in 0..self.len() {
            for (a, &v) in acc.iter_mut().zip(self.point(j)) {
                a.add(v);
            }
        }
        acc.into_iter().map(|a| a.value() / n as f64).collect()
    }

    /// Ensemble average of |x|^2 with its Monte Carlo standard error.
    pub fn second_moment(&self) -> (f64, f64) {
        let n = self.len();
        if n == 0 {
            return (0.0, 0.0);
        }
        let mut acc = Kahan::new();
        let mut acc2 = Kahan::new();
        for j in 0..n {
            let norm2: f64 = self.point(j).iter().map(|v| v * v).sum();
            acc.add(norm2);
            acc2.add(norm2 * norm2);
        }
        let mean = acc.value() / n as f64;
        let var = (acc2.value() / n as f64 - mean * mean).max(0.0);
        (mean, (var / n as f64).sqrt())
    }
}

/// A time-indexed sequence of reference clouds standing in for the limit
/// flow, read back with piecewise-constant-left interpolation.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    clouds: Vec<ParticleEnsemble>,
}

impl MeasureFlow {
    pub fn new(clouds: Vec<ParticleEnsemble>) -> Result<Self> {
        if clouds.is_empty() {
            return Err(ChaosError::Domain("measure flow needs at least one cloud".into()));
        }
        let (d, n) = (clouds[0].d, clouds[0].len());
        for w in clouds.windows(2) {
            if w[1].time <= w[0].time {
                return Err(ChaosError::Domain("measure flow grid must be strictly increasing".into()));
            }
        }
        if clouds.iter().any(|c| c.d != d || c.len() != n) {
            return Err(ChaosError::Domain("measure flow clouds must share N_ref and d".into()));
        }
        Ok(MeasureFlow { clouds })
    }

    pub fn start_time(&self) -> f64 {
        self.clouds[0].time
    }

    pub fn end_time(&self) -> f64 {
        self.clouds[self.clouds.len() - 1].time
    }

    pub fn clouds(&self) -> &[ParticleEnsemble] {
        &self.clouds
    }

    /// The cloud governing time `t`: the last grid cloud with time <= t.
    /// Times beyond the grid keep the final cloud (constant extension).
    pub fn at_time(&self, t: f64) -> Result<&ParticleEnsemble> {
        if t < self.start_time() - 1e-12 {
            return Err(ChaosError::Domain(format!(
                "time {t} precedes the flow grid start {}",
                self.start_time()
            )));
        }
        let idx = match self
            .clouds
            .binary_search_by(|c| c.time.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        Ok(&self.clouds[idx])
    }
}

/// Paired trajectory record of a coupling run.
#[derive(Debug, Clone)]
pub struct CouplingTrace {
    pub times: Vec<f64>,
    pub z_norm: Vec<f64>,
    pub f_z: Vec<f64>,
    /// First recorded time with |Z| at or below the merge threshold.
    pub tau: Option<f64>,
    pub merged: bool,
    pub smoothed: bool,
    pub final_tilde: Vec<f64>,
    pub final_hat: Vec<f64>,
}

/// Simulation controls shared by every engine.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub replicas: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(ChaosError::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) {
            return Err(ChaosError::Config(format!("T must be >= 0, got {}", self.t_end)));
        }
        if self.replicas < 1 {
            return Err(ChaosError::Config("replica count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Built-in exchangeable initial laws.
#[derive(Debug, Clone)]
pub enum InitKind {
    /// Point mass: every particle starts at `x0`.
    Point(Vec<f64>),
    /// iid isotropic Gaussian.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// iid uniform on a box.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Exchangeable but correlated: draw one latent label per replica, then
    /// iid Gaussian given the label. Makes W1(mu0^N-marginal, mu0) > 0.
    Mixture { weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64> },
}

/// Samples N particles from an exchangeable initial law.
pub fn sample_exchangeable_init(
    kind: &InitKind,
    d: usize,
    n_particles: usize,
    seed: u64,
    replica: u64,
) -> Result<ParticleEnsemble> {
    if n_particles == 0 {
        return Err(ChaosError::Domain("initial ensemble needs N >= 1".into()));
    }
    let mut states = Vec::with_capacity(n_particles * d);
    match kind {
        InitKind::Point(x0) => {
            if x0.len() != d {
                return Err(ChaosError::Config("init point dimension mismatch".into()));
            }
            for _ in 0..n_particles {
                states.extend_from_slice(x0);
            }
        }
        InitKind::Gaussian { mean, std } => {
            if mean.len() != d {
                return Err(ChaosError::Config("init mean dimension mismatch".into()));
            }
            if !(*std >= 0.0) {
                return Err(ChaosError::Config("init std must be >= 0".into()));
            }
            for p in 0..n_particles {
                let mut rng = stream(seed, replica, p as u64, Channel::Init);
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    states.push(mean[k] + std * z);
                }
            }
        }
        InitKind::UniformBox { lo, hi } => {
            if lo.len() != d || hi.len() != d {
                return Err(ChaosError::Config("init box dimension mismatch".into()));
            }
            for p in 0..n_particles {
                let mut rng = stream(seed, replica, p as u64, Channel::Init);
                for k in 0..d {
                    states.push(lo[k] + (hi[k] - lo[k]) * rng.gen::<f64>());
                }
            }
        }
        InitKind::Mixture { weights, means, stds } => {
            if weights.len() != means.len() || weights.len() != stds.len() || weights.is_empty() {
                return Err(ChaosError::Config("mixture components misaligned".into()));
            }
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
                return Err(ChaosError::Config("mixture weights must be nonnegative, not all zero".into()));
            }
            // One latent label per replica (particle slot u64::MAX is
            // reserved for it), then iid given the label.
            let mut label_rng = stream(seed, replica, u64::MAX, Channel::Init);
            let u: f64 = label_rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut label = 0;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u <= acc {
                    label = i;
                    break;
                }
            }
            let mean = &means[label];
            if mean.len() != d {
                return Err(ChaosError::Config("mixture mean dimension mismatch".into()));
            }
            let std = stds[label];
            for p in 0..n_particles {
                let mut rng = stream(seed, replica, p as u64, Channel::Init);
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    states.push(mean[k] + std * z);
                }
            }
        }
    }
    Ok(ParticleEnsemble::from_states(0.0, states, d))
}

/// Scalar-model per-particle drift and diffusion against a cloud, with the
/// family-level shortcuts applied (constant diffusion and linear attraction
/// need no pairwise pass).
#[inline]
fn scalar_fields(model: &ModelSpec, x: f64, cloud: &[f64], cloud_mean: f64) -> (f64, f64) {
    let inv_n = 1.0 / cloud.len() as f64;
    let drift_int = match &model.b1 {
        Drift1::Zero => 0.0,
        Drift1::LinearAttraction { kappa } => kappa * (cloud_mean - x),
        Drift1::Custom(_) => {
            let mut acc = Kahan::new();
            for &y in cloud {
                acc.add(model.b1_1d(x, y));
            }
            inv_n * acc.value()
        }
    };
    let diffusion = match &model.sigma {
        Sigma::Zero => 0.0,
        Sigma::Constant { scale, matrix } => scale * matrix[0],
        Sigma::BoundedSmooth { scale, matrix } => {
            let m0 = matrix[0];
            let mut acc = Kahan::new();
            for &y in cloud {
                let dxy = x - y;
                acc.add(1.0 / (1.0 + dxy * dxy).sqrt());
            }
            scale * m0 * inv_n * acc.value()
        }
        Sigma::Custom(_) => {
            let mut acc = Kahan::new();
            for &y in cloud {
                acc.add(model.sigma_1d(x, y));
            }
            inv_n * acc.value()
        }
    };
    (model.b0_1d(x) + drift_int, diffusion)
}

/// Cloud mean for the scalar fast path; only needed by linear attraction.
#[inline]
fn scalar_cloud_mean(model: &ModelSpec, cloud: &[f64]) -> f64 {
    if matches!(model.b1, Drift1::LinearAttraction { .. }) {
        let mut acc = Kahan::new();
        for &y in cloud {
            acc.add(y);
        }
        acc.value() / cloud.len() as f64
    } else {
        0.0
    }
}

/// One Euler–Maruyama step of the N-particle system with caller-supplied
/// noise increments (`dw` is N*d, `db` is N*n, both already at step scale).
pub fn step_particle_system(
    model: &ModelSpec,
    ensemble: &ParticleEnsemble,
    dt: f64,
    dw: &[f64],
    db: &[f64],
    step: usize,
) -> Result<ParticleEnsemble> {
    let n_particles = ensemble.len();
    let (d, n) = (model.d, model.n);
    if dw.len() != n_particles * d || db.len() != n_particles * n {
        return Err(ChaosError::Domain("noise increment shape mismatch".into()));
    }
    let sqrt_beta = model.beta.sqrt();
    let mut next = Vec::with_capacity(n_particles * d);
    if model.is_scalar() {
        let cloud = ensemble.states();
        let mean = scalar_cloud_mean(model, cloud);
        for i in 0..n_particles {
            let x = cloud[i];
            let (drift, diff) = scalar_fields(model, x, cloud, mean);
            next.push(x + drift * dt + sqrt_beta * dw[i] + diff * db[i]);
        }
    } else {
        for i in 0..n_particles {
            let x = ensemble.point(i);
            let (drift, diff) = eval_mean_field_fields(model, x, ensemble)?;
            for k in 0..d {
                let mut v = x[k] + drift[k] * dt + sqrt_beta * dw[i * d + k];
                for l in 0..n {
                    v += diff[k * n + l] * db[i * n + l];
                }
                next.push(v);
            }
        }
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(ChaosError::BlowUp {
            step,
            detail: format!("non-finite state after step at t={}", ensemble.time + dt),
        });
    }
    Ok(ParticleEnsemble::from_states(ensemble.time + dt, next, d))
}

/// Draws one step of Gaussian increments (variance dt) for every particle
/// from its per-particle streams.
fn draw_increments(streams: &mut [Stream], per_stream: usize, sqrt_dt: f64, out: &mut [f64]) {
    for (s, chunk) in streams.iter_mut().zip(out.chunks_exact_mut(per_stream)) {
        for v in chunk {
            let z: f64 = s.sample(StandardNormal);
            *v = sqrt_dt * z;
        }
    }
}

/// Simulates the N-particle system, recording every `out_every`-th step
/// (step 0 and the final step always included).
pub fn simulate_particle_system(
    model: &ModelSpec,
    init: &ParticleEnsemble,
    cfg: &SimConfig,
    replica: u64,
    out_every: usize,
) -> Result<Vec<ParticleEnsemble>> {
    cfg.validate()?;
    if init.d != model.d {
        return Err(ChaosError::Domain("initial ensemble dimension mismatch".into()));
    }
    let n_particles = init.len();
    let mut w_streams: Vec<Stream> = (0..n_particles)
        .map(|p| stream(cfg.seed, replica, p as u64, Channel::W))
        .collect();
    let mut b_streams: Vec<Stream> = (0..n_particles)
        .map(|p| stream(cfg.seed, replica, p as u64, Channel::B))
        .collect();
    let steps = cfg.steps();
    let every = out_every.max(1);
    let sqrt_dt = cfg.dt.sqrt();
    let mut dw = vec![0.0; n_particles * model.d];
    let mut db = vec![0.0; n_particles * model.n];
    let mut out = Vec::with_capacity(steps / every + 2);
    let mut current = init.clone();
    out.push(current.clone());
    for step in 1..=steps {
        draw_increments(&mut w_streams, model.d, sqrt_dt, &mut dw);
        draw_increments(&mut b_streams, model.n, sqrt_dt, &mut db);
        current = step_particle_system(model, &current, cfg.dt, &dw, &db, step)?;
        if step % every == 0 || step == steps {
            out.push(current.clone());
        }
    }
    Ok(out)
}

/// Reserved replica slot for the reference flow, disjoint from experiment
/// replicas.
pub const REFERENCE_REPLICA: u64 = u64::MAX - 1;

/// Runs the N_ref-particle system as a self-consistent stand-in for the
/// mean-field limit flow. Callers should keep `N_ref` well above (8x) the
/// largest experiment N; the flow's own O(N_ref^{-1/2}) bias enters the
/// error budget of everything built on it.
pub fn simulate_reference_flow(
    model: &ModelSpec,
    n_ref: usize,
    init: &InitKind,
    cfg: &SimConfig,
    out_every: usize,
) -> Result<MeasureFlow> {
    let ens = sample_exchangeable_init(init, model.d, n_ref, cfg.seed, REFERENCE_REPLICA)?;
    let traj = simulate_particle_system(model, &ens, cfg, REFERENCE_REPLICA, out_every)?;
    MeasureFlow::new(traj)
}

/// Drift and diffusion of the decoupled SDE at `(t, x)`: the mean-field
/// fields against the flow's cloud at time t.
fn decoupled_fields(
    model: &ModelSpec,
    flow: &MeasureFlow,
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cloud = flow.at_time(t)?;
    if model.is_scalar() {
        let mean = scalar_cloud_mean(model, cloud.states());
        let (dr, di) = scalar_fields(model, x[0], cloud.states(), mean);
        Ok((vec![dr], vec![di]))
    } else {
        eval_mean_field_fields(model, x, cloud)
    }
}

/// Simulates the decoupled SDE from `(s, z)` under the frozen flow up to the
/// configured horizon, recording `(t, state)` on the output grid.
pub fn simulate_decoupled(
    model: &ModelSpec,
    flow: &MeasureFlow,
    s: f64,
    z: &[f64],
    cfg: &SimConfig,
    replica: u64,
    particle: u64,
    out_every: usize,
) -> Result<Vec<(f64, Vec<f64>)>> {
    cfg.validate()?;
    if z.len() != model.d {
        return Err(ChaosError::Domain("decoupled start dimension mismatch".into()));
    }
    if s < flow.start_time() - 1e-12 {
        return Err(ChaosError::Domain(format!(
            "decoupled start time {s} precedes the flow grid"
        )));
    }
    let mut w = stream(cfg.seed, replica, particle, Channel::W);
    let mut b = stream(cfg.seed, replica, particle, Channel::B);
    let steps = cfg.steps();
    let every = out_every.max(1);
    let sqrt_dt = cfg.dt.sqrt();
    let sqrt_beta = model.beta.sqrt();
    let (d, n) = (model.d, model.n);
    let mut x = z.to_vec();
    let mut t = s;
    let mut out = Vec::with_capacity(steps / every + 2);
    out.push((t, x.clone()));
    for step in 1..=steps {
        let (drift, diff) = decoupled_fields(model, flow, t, &x)?;
        for k in 0..d {
            let zw: f64 = w.sample(StandardNormal);
            x[k] += drift[k] * cfg.dt + sqrt_beta * sqrt_dt * zw;
        }
        for l in 0..n {
            let zb: f64 = b.sample(StandardNormal);
            let incr = sqrt_dt * zb;
            for k in 0..d {
                x[k] += diff[k * n + l] * incr;
            }
        }
        t = s + step as f64 * cfg.dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ChaosError::BlowUp { step, detail: format!("decoupled state diverged at t={t}") });
        }
        if step % every == 0 || step == steps {
            out.push((t, x.clone()));
        }
    }
    Ok(out)
}

/// Smoothed reflection weights: `pi_r` ramps 0 -> 1 over `[0, eps]` and
/// `pi_s = sqrt(1 - pi_r^2)` keeps the mixed driver a Brownian motion.
#[inline]
fn smoothing_weights(z_norm: f64, eps: f64) -> (f64, f64) {
    let pi_r = (2.0 * z_norm / eps - 1.0).clamp(0.0, 1.0);
    (pi_r, (1.0 - pi_r * pi_r).max(0.0).sqrt())
}

/// Runs the reflection coupling of two decoupled legs under one flow.
///
/// Both legs share the interacting-noise increments; the second leg's
/// additive noise is the first leg's reflected across the unit separation
/// direction (`epsilon = 0`), or blended with an independent stream through
/// the smoothed weights (`epsilon > 0`). Once |Z| falls to the merge
/// threshold `10 sqrt(beta dt d)` the legs are snapped together and driven
/// synchronously, the discrete surrogate for the coupling time.
pub fn simulate_reflection_coupling(
    model: &ModelSpec,
    flow: &MeasureFlow,
    x_tilde0: &[f64],
    x_hat0: &[f64],
    cfg: &SimConfig,
    replica: u64,
    epsilon: f64,
    fcache: &FCache,
    out_every: usize,
) -> Result<CouplingTrace> {
    cfg.validate()?;
    if x_tilde0.len() != model.d || x_hat0.len() != model.d {
        return Err(ChaosError::Domain("coupling start dimension mismatch".into()));
    }
    if epsilon < 0.0 {
        return Err(ChaosError::Domain("epsilon must be >= 0".into()));
    }
    let (d, n) = (model.d, model.n);
    let theta_merge = 10.0 * (model.beta * cfg.dt * d as f64).sqrt();
    let mut w = stream(cfg.seed, replica, 0, Channel::W);
    let mut w_aux = stream(cfg.seed, replica, 0, Channel::WAux);
    let mut b = stream(cfg.seed, replica, 0, Channel::B);
    let steps = cfg.steps();
    let every = out_every.max(1);
    let sqrt_dt = cfg.dt.sqrt();
    let sqrt_beta = model.beta.sqrt();

    let mut xt = x_tilde0.to_vec();
    let mut xh = x_hat0.to_vec();
    let norm = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    let mut z = norm(&xt, &xh);
    let mut merged = z <= theta_merge;
    let mut tau = if merged { Some(0.0) } else { None };
    if merged {
        xh.copy_from_slice(&xt);
        z = 0.0;
    }

    let mut times = Vec::with_capacity(steps / every + 2);
    let mut z_norms = Vec::with_capacity(steps / every + 2);
    let mut f_zs = Vec::with_capacity(steps / every + 2);
    times.push(0.0);
    z_norms.push(z);
    f_zs.push(fcache.f(z));

    let mut dw = vec![0.0; d];
    let mut dw_aux = vec![0.0; d];
    let mut db = vec![0.0; n];
    for step in 1..=steps {
        let t = (step - 1) as f64 * cfg.dt;
        for v in dw.iter_mut() {
            let g: f64 = w.sample(StandardNormal);
            *v = sqrt_dt * g;
        }
        for v in dw_aux.iter_mut() {
            let g: f64 = w_aux.sample(StandardNormal);
            *v = sqrt_dt * g;
        }
        for v in db.iter_mut() {
            let g: f64 = b.sample(StandardNormal);
            *v = sqrt_dt * g;
        }
        let (drift_t, diff_t) = decoupled_fields(model, flow, t, &xt)?;
        let (drift_h, diff_h) = if merged {
            (drift_t.clone(), diff_t.clone())
        } else {
            decoupled_fields(model, flow, t, &xh)?
        };

        // Hat-leg additive increment: synchronous once merged, otherwise
        // reflected (and blended with the auxiliary driver when smoothed).
        let dw_hat: Vec<f64> = if merged {
            dw.clone()
        } else {
            let zn = norm(&xt, &xh).max(1e-300);
            let u: Vec<f64> = xt.iter().zip(&xh).map(|(a, b)| (a - b) / zn).collect();
            let u_dot: f64 = u.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let reflected: Vec<f64> = dw.iter().zip(&u).map(|(v, uu)| v - 2.0 * u_dot * uu).collect();
            if cfg!(debug_assertions) {
                // (I - 2uu^T) is an involution: reflecting twice returns dw.
                let rd: f64 = u.iter().zip(&reflected).map(|(a, b)| a * b).sum();
                let back: Vec<f64> =
                    reflected.iter().zip(&u).map(|(v, uu)| v - 2.0 * rd * uu).collect();
                debug_assert!(back
                    .iter()
                    .zip(&dw)
                    .all(|(a, b)| (a - b).abs() < 1e-12 * (1.0 + b.abs())));
            }
            if epsilon > 0.0 {
                let (pi_r, pi_s) = smoothing_weights(norm(&xt, &xh), epsilon);
                // pi_r^2 + pi_s^2 = 1 keeps the blend a standard Brownian
                // increment; pi_r -> 1 recovers hard reflection.
                reflected
                    .iter()
                    .zip(&dw_aux)
                    .map(|(r, a)| pi_r * r + pi_s * a)
                    .collect()
            } else {
                reflected
            }
        };

        for k in 0..d {
            xt[k] += drift_t[k] * cfg.dt + sqrt_beta * dw[k];
            xh[k] += drift_h[k] * cfg.dt + sqrt_beta * dw_hat[k];
        }
        for l in 0..n {
            for k in 0..d {
                xt[k] += diff_t[k * n + l] * db[l];
                xh[k] += diff_h[k * n + l] * db[l];
            }
        }
        if xt.iter().chain(xh.iter()).any(|v| !v.is_finite()) {
            return Err(ChaosError::BlowUp { step, detail: "coupling leg diverged".into() });
        }
        if merged {
            xh.copy_from_slice(&xt);
        }
        z = norm(&xt, &xh);
        if !merged && z <= theta_merge {
            merged = true;
            tau = Some(step as f64 * cfg.dt);
            xh.copy_from_slice(&xt);
            z = 0.0;
        }
        if step % every == 0 || step == steps {
            times.push(step as f64 * cfg.dt);
            z_norms.push(z);
            f_zs.push(if merged { 0.0 } else { fcache.f(z) });
        }
    }
    Ok(CouplingTrace {
        times,
        z_norm: z_norms,
        f_z: f_zs,
        tau,
        merged,
        smoothed: epsilon > 0.0,
        final_tilde: xt,
        final_hat: xh,
    })
}

/// Built-in Lipschitz test functions for the gradient estimate.
#[derive(Debug, Clone, Copy)]
pub enum TestFn {
    /// First coordinate clipped to [-10, 10].
    ClippedCoordinate,
    /// Smoothed distance to an anchor: sqrt(1 + |x - c|^2) with |c| = shift.
    SmoothedDistance { shift: f64 },
}

impl TestFn {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFn::ClippedCoordinate => x[0].clamp(-10.0, 10.0),
            TestFn::SmoothedDistance { shift } => {
                let mut acc = 1.0;
                for (k, v) in x.iter().enumerate() {
                    let c = if k == 0 { *shift } else { 0.0 };
                    acc += (v - c) * (v - c);
                }
                acc.sqrt()
            }
        }
    }
}

/// Empirical gradient constant of the decoupled semigroup.
#[derive(Debug, Clone)]
pub struct CgEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Set when finite-difference noise dominates the signal; contains a
    /// recommended step.
    pub warning: Option<String>,
}

/// Estimates `c_G` as the largest observed value of
/// `|D^i P_{s,t} f(z)| ((t-s) ^ 1)^{(i - eta)/2}` for i = 1, 2 over a grid
/// of starting points, built-in test functions and the supplied `(s, t)`
/// pairs, with derivatives by common-random-number central differences.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cg(
    model: &ModelSpec,
    flow: &MeasureFlow,
    test_functions: &[TestFn],
    st_pairs: &[(f64, f64)],
    h: f64,
    mc_budget: usize,
    eta: f64,
    seed: u64,
) -> Result<CgEstimate> {
    if !(h > 0.0) {
        return Err(ChaosError::Domain("finite-difference step h must be > 0".into()));
    }
    if mc_budget < 2 {
        return Err(ChaosError::Domain("mc_budget must be >= 2".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(ChaosError::Domain("eta must lie in (0, 1]".into()));
    }
    if st_pairs.iter().any(|(s, t)| !(t > s)) {
        return Err(ChaosError::Domain("each (s, t) pair needs t > s".into()));
    }
    let d = model.d;
    let z_grid: Vec<Vec<f64>> = (-1..=1)
        .map(|i| {
            let mut z = vec![0.0; d];
            z[0] = i as f64;
            z
        })
        .collect();
    let mut best = 0.0f64;
    let mut best_err = 0.0f64;
    let mut worst_noise_ratio = 0.0f64;
    for (pair_idx, &(s, t)) in st_pairs.iter().enumerate() {
        let cfg = SimConfig { dt: (t - s) / ((t - s) / 2e-3).ceil().max(8.0), t_end: t - s, seed, replicas: 1 };
        let scale1 = ((t - s).min(1.0)).powf((1.0 - eta) / 2.0);
        let scale2 = ((t - s).min(1.0)).powf((2.0 - eta) / 2.0);
        for z in &z_grid {
            for k in 0..d {
                // Common-random-number endpoint samples at z - h e_k, z,
                // z + h e_k: replica index carries the MC draw, particle
                // index ties the three starts to one noise path.
                let mut diffs2: Vec<Vec<f64>> = vec![Vec::with_capacity(mc_budget); test_functions.len()];
                let mut diffs1_by_fn: Vec<Vec<f64>> = vec![Vec::with_capacity(mc_budget); test_functions.len()];
                for rep in 0..mc_budget {
                    let replica = (pair_idx * 1000 + rep) as u64;
                    let run = |start: &[f64]| -> Result<Vec<f64>> {
                        let traj = simulate_decoupled(model, flow, s, start, &cfg, replica, 0, usize::MAX)?;
                        Ok(traj.last().unwrap().1.clone())
                    };
                    let mut zp = z.clone();
                    zp[k] += h;
                    let mut zm = z.clone();
                    zm[k] -= h;
                    let xp = run(&zp)?;
                    let x0 = run(z)?;
                    let xm = run(&zm)?;
                    for (fi, tf) in test_functions.iter().enumerate() {
                        let (fp, f0, fm) = (tf.eval(&xp), tf.eval(&x0), tf.eval(&xm));
                        diffs1_by_fn[fi].push((fp - fm) / (2.0 * h));
                        diffs2[fi].push((fp - 2.0 * f0 + fm) / (h * h));
                    }
                }
                for fi in 0..test_functions.len() {
                    for (order, diffs, scale) in [
                        (1, &diffs1_by_fn[fi], scale1),
                        (2, &diffs2[fi], scale2),
                    ] {
                        let m = diffs.len() as f64;
                        let mean = diffs.iter().sum::<f64>() / m;
                        let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / (m - 1.0).max(1.0);
                        let se = (var / m).sqrt();
                        let candidate = mean.abs() * scale;
                        if candidate > best {
                            best = candidate;
                            best_err = se * scale;
                        }
                        let noise_ratio = se / (mean.abs() + 0.05 / order as f64);
                        worst_noise_ratio = worst_noise_ratio.max(noise_ratio);
                    }
                }
            }
        }
    }
    let warning = if worst_noise_ratio > 1.0 {
        Some(format!(
            "finite-difference noise dominates (ratio {worst_noise_ratio:.2}); try h around {:.3}",
            h * (worst_noise_ratio).sqrt().max(2.0)
        ))
    } else {
        None
    };
    Ok(CgEstimate { value: best, stderr: best_err, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Drift0, Drift1, ModelConstants, ModelSpec, Sigma};
    use std::sync::Arc;

    fn ou_model() -> ModelSpec {
        ModelSpec::ou(1, 1.0, 1.0)
    }

    fn frozen_flow(points: Vec<f64>, d: usize) -> MeasureFlow {
        MeasureFlow::new(vec![ParticleEnsemble::from_states(0.0, points, d)]).unwrap()
    }

    #[test]
    fn ensemble_accessors() {
        let e = ParticleEnsemble::from_states(1.5, vec![1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(e.len(), 2);
        assert_eq!(e.point(1), &[3.0, 4.0]);
        assert_eq!(e.mean(), vec![2.0, 3.0]);
    }

    #[test]
    fn flow_interpolation_is_left_constant() {
        let clouds = vec![
            ParticleEnsemble::from_states(0.0, vec![0.0], 1),
            ParticleEnsemble::from_states(1.0, vec![1.0], 1),
            ParticleEnsemble::from_states(2.0, vec![2.0], 1),
        ];
        let flow = MeasureFlow::new(clouds).unwrap();
        assert_eq!(flow.at_time(0.0).unwrap().point(0)[0], 0.0);
        assert_eq!(flow.at_time(0.99).unwrap().point(0)[0], 0.0);
        assert_eq!(flow.at_time(1.0).unwrap().point(0)[0], 1.0);
        assert_eq!(flow.at_time(5.0).unwrap().point(0)[0], 2.0);
        assert!(flow.at_time(-0.5).is_err());
    }

    #[test]
    fn init_point_mass() {
        let e = sample_exchangeable_init(&InitKind::Point(vec![1.0, -2.0]), 2, 3, 0, 0).unwrap();
        for j in 0..3 {
            assert_eq!(e.point(j), &[1.0, -2.0]);
        }
    }

    #[test]
    fn init_gaussian_reproducible_and_exchangeable() {
        let kind = InitKind::Gaussian { mean: vec![0.0], std: 1.0 };
        let a = sample_exchangeable_init(&kind, 1, 100, 9, 0).unwrap();
        let b = sample_exchangeable_init(&kind, 1, 100, 9, 0).unwrap();
        assert_eq!(a.states(), b.states());
        let c = sample_exchangeable_init(&kind, 1, 100, 9, 1).unwrap();
        assert_ne!(a.states(), c.states());
    }

    #[test]
    fn init_mixture_correlates_particles() {
        // Two well-separated labels: within one replica all particles share
        // the label, so the cross-particle covariance approaches the
        // between-component variance (= 4 for means +/-2, p = 1/2).
        let kind = InitKind::Mixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![-2.0], vec![2.0]],
            stds: vec![0.1, 0.1],
        };
        let reps = 4000usize;
        let mut cov = 0.0;
        let mut mean1 = 0.0;
        let mut mean2 = 0.0;
        for r in 0..reps {
            let e = sample_exchangeable_init(&kind, 1, 2, 5, r as u64).unwrap();
            let (x, y) = (e.point(0)[0], e.point(1)[0]);
            cov += x * y;
            mean1 += x;
            mean2 += y;
        }
        let m = reps as f64;
        let c = cov / m - (mean1 / m) * (mean2 / m);
        assert!((c - 4.0).abs() < 0.3, "cross-particle covariance {c}");
    }

    #[test]
    fn step_zero_dynamics_is_identity() {
        let model = ModelSpec::new(
            1,
            1,
            1.0,
            ModelConstants { k1: 0.0, k2: 1.0, r: 1.0, kb: 0.0, ksigma: 1.0 },
            Drift0::Zero,
            Drift1::Zero,
            Sigma::Zero,
            crate::model::DissipativityProfile::Piecewise { k1: 0.0, k2: 1.0, r: 1.0 },
        )
        .unwrap();
        let e = ParticleEnsemble::from_states(0.0, vec![1.0, -2.0], 1);
        let next = step_particle_system(&model, &e, 0.01, &[0.0, 0.0], &[0.0, 0.0], 1).unwrap();
        assert_eq!(next.states(), e.states());
        assert!((next.time - 0.01).abs() < 1e-15);
    }

    #[test]
    fn step_deterministic_euler() {
        let model = ou_model();
        let e = ParticleEnsemble::from_states(0.0, vec![2.0], 1);
        let next = step_particle_system(&model, &e, 0.1, &[0.0], &[0.0], 1).unwrap();
        assert!((next.point(0)[0] - 2.0 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn ou_ensemble_variance_matches_closed_form() {
        // Var X_T = beta/(2a) (1 - e^{-2aT}); scaled-down budget.
        let model = ou_model();
        let cfg = SimConfig { dt: 5e-3, t_end: 3.0, seed: 13, replicas: 1 };
        let n = 20_000;
        let init = sample_exchangeable_init(&InitKind::Point(vec![0.0]), 1, n, cfg.seed, 0).unwrap();
        let traj = simulate_particle_system(&model, &init, &cfg, 0, usize::MAX).unwrap();
        let last = traj.last().unwrap();
        let (m2, se) = last.second_moment();
        let exact = 0.5 * (1.0 - (-2.0f64 * 3.0).exp());
        // Allow 3 MC standard errors plus O(dt) discretization bias.
        assert!((m2 - exact).abs() < 3.0 * se + 0.01, "m2={m2} exact={exact} se={se}");
    }

    #[test]
    fn brownian_variance_growth() {
        let model = ModelSpec::new(
            1,
            1,
            2.0,
            ModelConstants { k1: 0.0, k2: 1.0, r: 1.0, kb: 0.0, ksigma: 1.0 },
            Drift0::Zero,
            Drift1::Zero,
            Sigma::Zero,
            crate::model::DissipativityProfile::Piecewise { k1: 0.0, k2: 1.0, r: 1.0 },
        )
        .unwrap();
        let cfg = SimConfig { dt: 0.01, t_end: 1.0, seed: 3, replicas: 1 };
        let init = sample_exchangeable_init(&InitKind::Point(vec![0.5]), 1, 20_000, cfg.seed, 0).unwrap();
        let traj = simulate_particle_system(&model, &init, &cfg, 0, usize::MAX).unwrap();
        let (m2, se) = traj.last().unwrap().second_moment();
        // E|X_T|^2 - |X_0|^2 = beta d T = 2.
        assert!((m2 - 0.25 - 2.0).abs() < 3.0 * se + 0.02, "m2={m2} se={se}");
    }

    #[test]
    fn step_commutes_with_permutation() {
        let model = ModelSpec::new(
            1,
            1,
            1.0,
            ModelConstants { k1: 1.0, k2: 3.0, r: 1.0, kb: 0.2, ksigma: 0.5 },
            Drift0::DoubleWell,
            Drift1::Custom(Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
                out[0] = 0.2 * (y[0] - x[0]).tanh();
            })),
            Sigma::BoundedSmooth { scale: 0.3, matrix: crate::model::eye_matrix(1, 1) },
            crate::model::DissipativityProfile::Piecewise { k1: 1.0, k2: 3.0, r: 1.0 },
        )
        .unwrap();
        let states = vec![0.4, -1.1, 2.0, 0.0];
        let dw = vec![0.03, -0.01, 0.02, 0.05];
        let db = vec![-0.04, 0.02, 0.00, 0.01];
        let e = ParticleEnsemble::from_states(0.0, states.clone(), 1);
        let stepped = step_particle_system(&model, &e, 0.05, &dw, &db, 1).unwrap();
        // Reverse particles and their noise together.
        let perm: Vec<usize> = (0..4).rev().collect();
        let p_states: Vec<f64> = perm.iter().map(|&i| states[i]).collect();
        let p_dw: Vec<f64> = perm.iter().map(|&i| dw[i]).collect();
        let p_db: Vec<f64> = perm.iter().map(|&i| db[i]).collect();
        let ep = ParticleEnsemble::from_states(0.0, p_states, 1);
        let stepped_p = step_particle_system(&model, &ep, 0.05, &p_dw, &p_db, 1).unwrap();
        for (j, &pj) in perm.iter().enumerate() {
            let a = stepped_p.point(j)[0];
            let b = stepped.point(pj)[0];
            assert!((a - b).abs() < 1e-13, "particle {j}: {a} vs {b}");
        }
    }

    #[test]
    fn reference_flow_ou_variance_curve() {
        let model = ou_model();
        let cfg = SimConfig { dt: 0.01, t_end: 2.0, seed: 21, replicas: 1 };
        let flow = simulate_reference_flow(
            &model,
            8000,
            &InitKind::Point(vec![0.0]),
            &cfg,
            50,
        )
        .unwrap();
        assert!((flow.start_time()).abs() < 1e-12);
        for cloud in flow.clouds() {
            let (m2, se) = cloud.second_moment();
            let exact = 0.5 * (1.0 - (-2.0 * cloud.time).exp());
            assert!((m2 - exact).abs() < 3.0 * se + 0.02, "t={} m2={m2} exact={exact}", cloud.time);
        }
    }

    #[test]
    fn decoupled_trivial_drift_vanishes() {
        // Flow frozen at a point mass at 0 and b1(x, y) = y: the integral
        // term vanishes; with b0 = 0 and tiny beta the state barely moves.
        let model = ModelSpec::new(
            1,
            1,
            1e-12,
            ModelConstants { k1: 0.0, k2: 1.0, r: 1.0, kb: 1.0, ksigma: 1.0 },
            Drift0::Zero,
            Drift1::Custom(Arc::new(|_x: &[f64], y: &[f64], out: &mut [f64]| out[0] = y[0])),
            Sigma::Zero,
            crate::model::DissipativityProfile::Piecewise { k1: 0.0, k2: 1.0, r: 1.0 },
        )
        .unwrap();
        let flow = frozen_flow(vec![0.0; 16], 1);
        let cfg = SimConfig { dt: 0.01, t_end: 1.0, seed: 2, replicas: 1 };
        let traj = simulate_decoupled(&model, &flow, 0.0, &[0.7], &cfg, 0, 0, usize::MAX).unwrap();
        let end = traj.last().unwrap().1[0];
        assert!((end - 0.7).abs() < 1e-4, "end={end}");
        // Start before the grid is rejected.
        assert!(simulate_decoupled(&model, &flow, -1.0, &[0.0], &cfg, 0, 0, 1).is_err());
    }

    fn fcache_ou() -> FCache {
        let profile = crate::model::DissipativityProfile::Override {
            gamma: Arc::new(|r| -r),
            tail_rate: 1.0,
            tail_radius: 0.0,
        };
        FCache::new(&profile, 1.0, 20.0, 2048).unwrap()
    }

    #[test]
    fn coupling_equal_starts_merge_immediately() {
        let model = ou_model();
        let flow = frozen_flow(vec![0.0; 8], 1);
        let cfg = SimConfig { dt: 1e-3, t_end: 0.05, seed: 4, replicas: 1 };
        let fc = fcache_ou();
        let trace =
            simulate_reflection_coupling(&model, &flow, &[1.0], &[1.0], &cfg, 0, 0.0, &fc, 1)
                .unwrap();
        assert_eq!(trace.tau, Some(0.0));
        assert!(trace.merged);
        assert!(trace.z_norm.iter().all(|&z| z == 0.0));
        assert!(trace.f_z.iter().all(|&f| f == 0.0));
        assert_eq!(trace.final_tilde, trace.final_hat);
    }

    #[test]
    fn coupling_merged_stays_merged() {
        let model = ou_model();
        let flow = frozen_flow(vec![0.0; 8], 1);
        let cfg = SimConfig { dt: 1e-3, t_end: 3.0, seed: 77, replicas: 1 };
        let fc = fcache_ou();
        let trace =
            simulate_reflection_coupling(&model, &flow, &[1.0], &[-1.0], &cfg, 0, 0.0, &fc, 10)
                .unwrap();
        if let Some(tau) = trace.tau {
            for (t, z) in trace.times.iter().zip(&trace.z_norm) {
                if *t >= tau {
                    assert_eq!(*z, 0.0, "|Z| nonzero after merge at t={t}");
                }
            }
        }
    }

    #[test]
    fn coupling_contracts_on_average() {
        // Scaled-down version of the contraction experiment: the mean of
        // f(|Z_t|) at T should sit well below its initial value.
        let model = ou_model();
        let flow = frozen_flow(vec![0.0; 8], 1);
        let cfg = SimConfig { dt: 2e-3, t_end: 2.0, seed: 8, replicas: 1 };
        let fc = fcache_ou();
        let f0 = fc.f(2.0);
        let reps = 400;
        let mut acc = 0.0;
        for r in 0..reps {
            let trace =
                simulate_reflection_coupling(&model, &flow, &[1.0], &[-1.0], &cfg, r, 0.0, &fc, usize::MAX)
                    .unwrap();
            acc += trace.f_z.last().unwrap();
        }
        let mean_end = acc / reps as f64;
        // e^{-lambda0 T} f(2) with lambda0 = 1, T = 2: about 0.135 f(2).
        assert!(mean_end < 0.35 * f0, "mean f(|Z_T|) = {mean_end}, f(2) = {f0}");
    }

    #[test]
    fn smoothed_coupling_runs_and_merges() {
        let model = ou_model();
        let flow = frozen_flow(vec![0.0; 8], 1);
        let cfg = SimConfig { dt: 2e-3, t_end: 4.0, seed: 15, replicas: 1 };
        let fc = fcache_ou();
        let trace =
            simulate_reflection_coupling(&model, &flow, &[0.5], &[-0.5], &cfg, 0, 0.2, &fc, 100)
                .unwrap();
        assert!(trace.smoothed);
        // With the OU pull plus reflection the legs should meet on [0, 4]
        // for this seed; the hard guarantee is only distributional, so keep
        // the assertion on the recorded invariant instead.
        if trace.merged {
            assert!(trace.tau.is_some());
        }
    }

    #[test]
    fn strong_order_one_for_additive_noise() {
        // Coupled-noise refinement: OU driven by the same Brownian path at
        // dt and dt/2; the endpoint mean-square gap should drop at rate
        // about dt^1 (strong order 1 for additive noise).
        let t_end = 1.0;
        let reps = 200;
        let mut errs = Vec::new();
        for &dt in &[0.02f64, 0.01, 0.005] {
            let fine_dt = dt / 2.0;
            let steps = (t_end / dt).round() as usize;
            let mut mse = 0.0;
            for rep in 0..reps {
                let mut rng = stream(99, rep, 0, Channel::W);
                let mut coarse = 1.0f64;
                let mut fine = 1.0f64;
                for _ in 0..steps {
                    let g1: f64 = rng.sample(StandardNormal);
                    let g2: f64 = rng.sample(StandardNormal);
                    let dw1 = fine_dt.sqrt() * g1;
                    let dw2 = fine_dt.sqrt() * g2;
                    fine += -fine * fine_dt + dw1;
                    fine += -fine * fine_dt + dw2;
                    coarse += -coarse * dt + (dw1 + dw2);
                }
                mse += (coarse - fine) * (coarse - fine);
            }
            errs.push((mse / reps as f64).sqrt());
        }
        let order = (errs[0] / errs[2]).ln() / 4.0f64.ln();
        assert!(order >= 0.9, "observed strong order {order}, errors {errs:?}");
    }

    #[test]
    fn cg_pure_brownian_affine_function() {
        // Heat semigroup preserves affine functions: gradient 1, curvature 0.
        let model = ModelSpec::new(
            1,
            1,
            1.0,
            ModelConstants { k1: 0.0, k2: 1.0, r: 1.0, kb: 0.0, ksigma: 1.0 },
            Drift0::Zero,
            Drift1::Zero,
            Sigma::Zero,
            crate::model::DissipativityProfile::Piecewise { k1: 0.0, k2: 1.0, r: 1.0 },
        )
        .unwrap();
        let flow = frozen_flow(vec![0.0; 4], 1);
        let est = estimate_cg(
            &model,
            &flow,
            &[TestFn::ClippedCoordinate],
            &[(0.0, 0.5)],
            0.05,
            200,
            1.0,
            31,
        )
        .unwrap();
        assert!((est.value - 1.0).abs() < 0.05, "cg = {} +- {}", est.value, est.stderr);
    }

    #[test]
    fn cg_ou_gradient_decays() {
        // OU semigroup: grad P_{0,t} x = e^{-t}; the max over (s,t) pairs
        // with the clipped coordinate should track e^{-(t-s)} at the
        // smallest gap.
        let model = ou_model();
        let flow = frozen_flow(vec![0.0; 4], 1);
        let est = estimate_cg(
            &model,
            &flow,
            &[TestFn::ClippedCoordinate],
            &[(0.0, 0.5)],
            0.05,
            300,
            1.0,
            77,
        )
        .unwrap();
        let expected = (-0.5f64).exp();
        assert!(
            (est.value - expected).abs() < 3.0 * est.stderr + 0.03,
            "cg = {} +- {}, expected {expected}",
            est.value,
            est.stderr
        );
    }

    #[test]
    fn determinism_across_reruns() {
        let model = ou_model();
        let cfg = SimConfig { dt: 0.01, t_end: 0.5, seed: 123, replicas: 1 };
        let init = sample_exchangeable_init(
            &InitKind::Gaussian { mean: vec![0.0], std: 1.0 },
            1,
            50,
            cfg.seed,
            0,
        )
        .unwrap();
        let a = simulate_particle_system(&model, &init, &cfg, 0, 5).unwrap();
        let b = simulate_particle_system(&model, &init, &cfg, 0, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.states(), y.states());
        }
    }
}
