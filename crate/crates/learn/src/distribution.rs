//! Truncated Gaussian on [-1, 1] per action dimension and the fusion of base
//! and residual means.

use rand::Rng;
use serde::{Deserialize, Serialize};
use libm::erfc;
use statrs::function::erf::erfc_inv;

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 10.0;
pub const LOWER: f64 = -1.0;
pub const UPPER: f64 = 1.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

pub fn log_norm_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

pub fn norm_pdf(z: f64) -> f64 {
    log_norm_pdf(z).exp()
}

/// Standard normal CDF.
pub fn ndtr(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `ln Φ(z)`, accurate in both tails.
pub fn log_ndtr(z: f64) -> f64 {
    if z > 0.0 {
        (-ndtr(-z)).ln_1p()
    } else if z > -35.0 {
        ndtr(z).ln()
    } else {
        // Asymptotic series of Mills' ratio.
        let r = 1.0 / (z * z);
        let series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)));
        log_norm_pdf(z) - (-z).ln() + series.ln()
    }
}

/// Inverse of the standard normal CDF.
pub fn ndtri(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Solves `ln Φ(z) = log_p` for `log_p` far below the range where `exp`
/// is representable.
fn ndtri_log(log_p: f64) -> f64 {
    if log_p > -700.0 {
        return ndtri(log_p.exp());
    }
    let t = -2.0 * log_p;
    let mut z = -(t - (t * 2.0 * std::f64::consts::PI).ln()).sqrt();
    for _ in 0..50 {
        let f = log_ndtr(z) - log_p;
        let slope = (log_norm_pdf(z) - log_ndtr(z)).exp();
        let step = f / slope;
        z -= step;
        if step.abs() < 1e-14 * z.abs() {
            break;
        }
    }
    z
}

/// `ln(exp(a) - exp(b))` for `a > b`.
fn log_diff_exp(a: f64, b: f64) -> f64 {
    a + (-(b - a).exp()).ln_1p()
}

/// `ln(Φ(b) - Φ(a))` for `a < b` without cancellation.
pub fn log_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        log_diff_exp(log_ndtr(-a), log_ndtr(-b))
    } else if b <= 0.0 {
        log_diff_exp(log_ndtr(b), log_ndtr(a))
    } else {
        (1.0 - ndtr(a) - ndtr(-b)).ln()
    }
}

fn clamp_sigma(sigma: f64) -> f64 {
    sigma.clamp(SIGMA_MIN, SIGMA_MAX)
}

/// Standardized bounds, `ln Z` and the ratios `φ(a)/Z`, `φ(b)/Z`.
struct Bounds {
    a: f64,
    b: f64,
    log_z: f64,
    pa: f64,
    pb: f64,
}

impl Bounds {
    fn new(mu: f64, sigma: f64) -> Self {
        let a = (LOWER - mu) / sigma;
        let b = (UPPER - mu) / sigma;
        let log_z = log_mass(a, b);
        Self { a, b, log_z, pa: (log_norm_pdf(a) - log_z).exp(), pb: (log_norm_pdf(b) - log_z).exp() }
    }

    /// `(a φ(a) - b φ(b)) / Z`, with `x φ(x) = 0` at infinite bounds.
    fn moment(&self) -> f64 {
        let t = |x: f64, p: f64| if p == 0.0 { 0.0 } else { x * p };
        t(self.a, self.pa) - t(self.b, self.pb)
    }
}

/// Log density of one dimension; `-inf` outside the support.
pub fn tg_log_prob_1d(mu: f64, sigma: f64, x: f64) -> f64 {
    if !(LOWER..=UPPER).contains(&x) {
        return f64::NEG_INFINITY;
    }
    let sigma = clamp_sigma(sigma);
    let z = (x - mu) / sigma;
    log_norm_pdf(z) - sigma.ln() - log_mass((LOWER - mu) / sigma, (UPPER - mu) / sigma)
}

/// Log density with its partial derivatives `(ln p, ∂/∂μ, ∂/∂σ)`. The
/// derivatives are taken at the clamped σ.
pub fn tg_log_prob_grad_1d(mu: f64, sigma: f64, x: f64) -> (f64, f64, f64) {
    let sigma = clamp_sigma(sigma);
    let bd = Bounds::new(mu, sigma);
    let z = (x - mu) / sigma;
    let lp = if (LOWER..=UPPER).contains(&x) { log_norm_pdf(z) - sigma.ln() - bd.log_z } else { f64::NEG_INFINITY };
    let d_mu = (z - (bd.pa - bd.pb)) / sigma;
    let d_sigma = (z * z - 1.0 - bd.moment()) / sigma;
    (lp, d_mu, d_sigma)
}

pub fn tg_entropy_1d(mu: f64, sigma: f64) -> f64 {
    let sigma = clamp_sigma(sigma);
    let bd = Bounds::new(mu, sigma);
    sigma.ln() + LN_SQRT_2PI + 0.5 + bd.log_z + 0.5 * bd.moment()
}

/// Entropy with `(H, ∂H/∂μ, ∂H/∂σ)`.
pub fn tg_entropy_grad_1d(mu: f64, sigma: f64) -> (f64, f64, f64) {
    let sigma = clamp_sigma(sigma);
    let bd = Bounds::new(mu, sigma);
    let m = bd.moment();
    let h = sigma.ln() + LN_SQRT_2PI + 0.5 + bd.log_z + 0.5 * m;
    let (a, b, pa, pb) = (bd.a, bd.b, bd.pa, bd.pb);
    let g_a = -pa + 0.5 * pa * (1.0 - a * a) + 0.5 * pa * m;
    let g_b = pb - 0.5 * pb * (1.0 - b * b) - 0.5 * pb * m;
    let xa = if pa == 0.0 { 0.0 } else { a * g_a };
    let xb = if pb == 0.0 { 0.0 } else { b * g_b };
    (h, -(g_a + g_b) / sigma, (1.0 - xa - xb) / sigma)
}

pub fn tg_mean_1d(mu: f64, sigma: f64) -> f64 {
    let sigma = clamp_sigma(sigma);
    let bd = Bounds::new(mu, sigma);
    mu + sigma * (bd.pa - bd.pb)
}

pub fn tg_variance_1d(mu: f64, sigma: f64) -> f64 {
    let sigma = clamp_sigma(sigma);
    let bd = Bounds::new(mu, sigma);
    let d = bd.pa - bd.pb;
    sigma * sigma * (1.0 + bd.moment() - d * d)
}

/// Inverse-CDF draw from a uniform `u` in [0, 1). Mass sitting in the right
/// tail is handled by mirroring so the CDF is always evaluated in log space
/// on its accurate side.
pub fn tg_quantile_1d(mu: f64, sigma: f64, u: f64) -> f64 {
    let sigma = clamp_sigma(sigma);
    let a = (LOWER - mu) / sigma;
    let b = (UPPER - mu) / sigma;
    let (lo, hi, u, sign) = if a > 0.0 { (-b, -a, 1.0 - u, -1.0) } else { (a, b, u, 1.0) };
    let la = log_ndtr(lo);
    let lb = log_ndtr(hi);
    // ln(Φ(lo) + u (Φ(hi) - Φ(lo))), factored through Φ(hi).
    let r = (la - lb).exp();
    let log_p = lb + (u + (1.0 - u) * r).ln();
    let z = ndtri_log(log_p).clamp(lo, hi);
    (mu + sign * sigma * z).clamp(LOWER, UPPER)
}

pub fn tg_sample_1d<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    tg_quantile_1d(mu, sigma, rng.random::<f64>())
}

/// Independent truncated Gaussians on `[-1, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussian {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

impl TruncatedGaussian {
    pub fn new(mu: [f64; 2], sigma: [f64; 2]) -> Self {
        Self { mu, sigma: sigma.map(clamp_sigma) }
    }

    pub fn log_prob(&self, x: [f64; 2]) -> f64 {
        (0..2).map(|i| tg_log_prob_1d(self.mu[i], self.sigma[i], x[i])).sum()
    }

    /// `(ln p, ∂/∂μ, ∂/∂σ)`.
    pub fn log_prob_grad(&self, x: [f64; 2]) -> (f64, [f64; 2], [f64; 2]) {
        let g0 = tg_log_prob_grad_1d(self.mu[0], self.sigma[0], x[0]);
        let g1 = tg_log_prob_grad_1d(self.mu[1], self.sigma[1], x[1]);
        (g0.0 + g1.0, [g0.1, g1.1], [g0.2, g1.2])
    }

    pub fn entropy(&self) -> f64 {
        (0..2).map(|i| tg_entropy_1d(self.mu[i], self.sigma[i])).sum()
    }

    pub fn entropy_grad(&self) -> (f64, [f64; 2], [f64; 2]) {
        let g0 = tg_entropy_grad_1d(self.mu[0], self.sigma[0]);
        let g1 = tg_entropy_grad_1d(self.mu[1], self.sigma[1]);
        (g0.0 + g1.0, [g0.1, g1.1], [g0.2, g1.2])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [tg_sample_1d(self.mu[0], self.sigma[0], rng), tg_sample_1d(self.mu[1], self.sigma[1], rng)]
    }

    /// The clamped location, which is the density maximum.
    pub fn mode(&self) -> [f64; 2] {
        self.mu.map(|m| m.clamp(LOWER, UPPER))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Arpo,
    Rpl,
    Drl,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Arpo => "arpo",
            FusionMode::Rpl => "rpl",
            FusionMode::Drl => "drl",
        })
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arpo" => Ok(FusionMode::Arpo),
            "rpl" => Ok(FusionMode::Rpl),
            "drl" => Ok(FusionMode::Drl),
            other => Err(format!("unknown mode '{other}' (expected arpo, rpl or drl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub alpha: f64,
    pub alpha_init: f64,
    pub omega: f64,
}

impl FusionConfig {
    pub fn arpo(alpha: f64, alpha_init: f64) -> Self {
        Self { mode: FusionMode::Arpo, alpha, alpha_init, omega: 1.0 }
    }

    pub fn rpl(omega: f64) -> Self {
        Self { mode: FusionMode::Rpl, alpha: 0.0, alpha_init: 1.0, omega }
    }

    pub fn drl() -> Self {
        Self { mode: FusionMode::Drl, alpha: 1.0, alpha_init: 1.0, omega: 1.0 }
    }

    /// Weight of the base action in the fused mean.
    pub fn base_weight(&self) -> f64 {
        match self.mode {
            FusionMode::Arpo => 1.0 - self.alpha,
            FusionMode::Rpl => 1.0,
            FusionMode::Drl => 0.0,
        }
    }

    /// Weight of the residual output, i.e. `∂μ/∂f_R`.
    pub fn residual_weight(&self) -> f64 {
        match self.mode {
            FusionMode::Arpo => self.alpha.max(self.alpha_init),
            FusionMode::Rpl => self.omega,
            FusionMode::Drl => 1.0,
        }
    }

    /// Whether the base controller has to be queried at all.
    pub fn needs_base(&self) -> bool {
        self.base_weight() != 0.0
    }
}

pub fn fuse_mean(base: [f64; 2], residual: [f64; 2], cfg: &FusionConfig) -> [f64; 2] {
    let (wb, wr) = (cfg.base_weight(), cfg.residual_weight());
    std::array::from_fn(|i| if wb == 0.0 { wr * residual[i] } else { wb * base[i] + wr * residual[i] })
}
