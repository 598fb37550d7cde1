//! Shared numerical building blocks: compensated summation, adaptive
//! Gauss–Kronrod quadrature and a few special functions.

/// Kahan–Babuska compensated accumulator.
///
/// Summation order is fixed by the caller, so results are bit-reproducible
/// regardless of how the surrounding work is scheduled.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a slice in index order.
pub fn kahan_sum(xs: &[f64]) -> f64 {
    let mut acc = Kahan::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

// 15-point Kronrod abscissae on [-1, 1] (QUADPACK).
const XGK: [f64; 15] = [
    -0.991_455_371_120_812_6,
    -0.949_107_912_342_758_5,
    -0.864_864_423_359_769_1,
    -0.741_531_185_599_394_4,
    -0.586_087_235_467_691_1,
    -0.405_845_151_377_397_2,
    -0.207_784_955_007_898_5,
    0.0,
    0.207_784_955_007_898_5,
    0.405_845_151_377_397_2,
    0.586_087_235_467_691_1,
    0.741_531_185_599_394_4,
    0.864_864_423_359_769_1,
    0.949_107_912_342_758_5,
    0.991_455_371_120_812_6,
];

const WGK: [f64; 15] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
    0.204_432_940_075_298_89,
    0.190_350_578_064_785_4,
    0.169_004_726_639_267_9,
    0.140_653_259_715_525_92,
    0.104_790_010_322_250_18,
    0.063_092_092_629_978_56,
    0.022_935_322_010_529_224,
];

// 7-point Gauss weights embedded in the Kronrod rule (odd indices of XGK).
const WG: [f64; 7] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
    0.381_830_050_505_118_9,
    0.279_705_391_489_276_64,
    0.129_484_966_168_869_7,
];

/// One Gauss–Kronrod 7-15 panel; returns (integral, error estimate).
fn gk15_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let center = 0.5 * (a + b);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    for (i, (&x, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let fx = f(center + half * x);
        kronrod += wk * fx;
        if i % 2 == 1 {
            gauss += WG[i / 2] * fx;
        }
    }
    let integral = kronrod * half;
    // The raw Kronrod-Gauss difference tends to underestimate the true error;
    // a flat safety factor keeps refinement honest for analytic integrands.
    let err = 50.0 * ((kronrod - gauss) * half).abs();
    (integral, err)
}

/// Adaptive Gauss–Kronrod quadrature of `f` over `[a, b]`.
///
/// Subdivides the worst panel until the summed error estimate satisfies the
/// absolute/relative target or the panel budget is exhausted. Returns the
/// integral and an a posteriori error estimate.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps_abs: f64, eps_rel: f64) -> (f64, f64) {
    if a == b {
        return (0.0, 0.0);
    }
    // (a, b, integral, err), worst panel split each round.
    let mut panels: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(64);
    let (v, e) = gk15_panel(f, a, b);
    panels.push((a, b, v, e));
    const MAX_PANELS: usize = 2000;
    loop {
        let total: f64 = panels.iter().map(|p| p.2).sum();
        let err: f64 = panels.iter().map(|p| p.3).sum();
        if err <= eps_abs.max(eps_rel * total.abs()) || panels.len() >= MAX_PANELS {
            return (total, err);
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let (pa, pb, _, _) = panels.swap_remove(idx);
        let mid = 0.5 * (pa + pb);
        if mid <= pa || mid >= pb {
            // Interval at floating point resolution; accept what we have.
            let (v, e) = gk15_panel(f, pa, pb);
            panels.push((pa, pb, v, e * 0.0));
            continue;
        }
        let (v1, e1) = gk15_panel(f, pa, mid);
        let (v2, e2) = gk15_panel(f, mid, pb);
        panels.push((pa, mid, v1, e1));
        panels.push((mid, pb, v2, e2));
    }
}

/// Natural log of the gamma function (Lanczos, g = 7, 9 coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Exact-recurrence log-gamma at half-integer arguments: returns ln Γ(n/2)
/// for integer n ≥ 1.
pub fn ln_gamma_half(n: u32) -> f64 {
    assert!(n >= 1);
    // Γ(1/2) = √π, Γ(1) = 1, Γ(x+1) = xΓ(x).
    let mut ln = if n % 2 == 1 {
        0.5 * std::f64::consts::PI.ln()
    } else {
        0.0
    };
    let mut k = if n % 2 == 1 { 1 } else { 2 };
    while k + 2 <= n {
        ln += (k as f64 / 2.0).ln();
        k += 2;
    }
    ln
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = xs[i].min(ys[j]);
        while i < n && xs[i] <= t {
            i += 1;
        }
        while j < m && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Asymptotic p-value of the two-sample KS test.
pub fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    // Kolmogorov survival function, alternating series with the usual
    // convergence guards; a series that fails to settle means the two
    // samples are statistically indistinguishable (p = 1).
    let a2 = -2.0 * lambda * lambda;
    let mut fac = 2.0;
    let mut sum = 0.0;
    let mut prev_mag = 0.0;
    for k in 1..=100u32 {
        let term = fac * (a2 * (k * k) as f64).exp();
        sum += term;
        let mag = term.abs();
        if mag <= 1e-3 * prev_mag || mag <= 1e-8 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        fac = -fac;
        prev_mag = mag;
    }
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut acc = Kahan::new();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 1000.0);
    }

    #[test]
    fn gk_integrates_gaussian() {
        let (v, e) = integrate(&|x: f64| (-x * x / 2.0).exp(), -40.0, 40.0, 0.0, 1e-12);
        let exact = (2.0 * std::f64::consts::PI).sqrt();
        assert!((v - exact).abs() < 1e-10, "v={v} err={e}");
    }

    #[test]
    fn gk_integrates_polynomial_exactly() {
        let (v, _) = integrate(&|x: f64| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 0.0, 1e-14);
        assert!((v - (4.0 - 4.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_matches_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!((ln_gamma(10.5) - 1.133_278_388_948_7e6f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn ln_gamma_half_matches_lanczos() {
        for n in 1..60u32 {
            let a = ln_gamma_half(n);
            let b = ln_gamma(n as f64 / 2.0);
            assert!((a - b).abs() < 1e-11, "n={n}: {a} vs {b}");
        }
    }

    #[test]
    fn ks_identical_samples_high_p() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let d = ks_statistic(&a, &a);
        assert_eq!(d, 0.0);
        assert!(ks_p_value(1e-9, 500, 500) > 0.99);
    }

    #[test]
    fn ks_detects_shift() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        let d = ks_statistic(&a, &b);
        assert!(d > 0.25);
        assert!(ks_p_value(d, 500, 500) < 1e-6);
    }
}
