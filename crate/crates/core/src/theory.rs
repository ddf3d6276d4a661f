//! Closed forms and Monte-Carlo checks for magnitude truncation of
//! Gaussian and shifted-exponential activations.
//!
//! `eta` is always the fraction of entries kept, so the removed part is
//! the sub-threshold mass. "Removed energy" means `E[a²·1{|a| < t}]`, and
//! `F`/`G` are that quantity divided by `E[a²]`.
//!
//! Monte-Carlo work is split into fixed blocks, each drawn from its own
//! ChaCha stream of the seed, and block results are combined in block
//! order. The estimates therefore do not depend on the thread count.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Samples per Monte-Carlo block.
pub const MC_BLOCK: usize = 1 << 16;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Inverse standard normal CDF: rational initial guess refined by two
/// Halley steps against the erfc-based CDF.
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let mut x = if p < P_LOW {
        tail(p)
    } else if p > 1.0 - P_LOW {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        // Φ(x) - p; the upper tail goes through the complement to keep
        // the residual precise
        let e = if x > 0.0 {
            (1.0 - p) - norm_cdf(-x)
        } else {
            norm_cdf(x) - p
        };
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("kept fraction {eta} outside (0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub sigma: f64,
}

impl GaussianSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

/// `a = x - c` with `x ~ Exp(lambda)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftedExpSpec {
    pub lambda: f64,
    pub c: f64,
}

impl ShiftedExpSpec {
    pub fn new(lambda: f64, c: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite() && c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("need lambda > 0 and c > 0, got {lambda}, {c}")));
        }
        Ok(Self { lambda, c })
    }

    /// `lambda·c`, the shape parameter `p`.
    pub fn p(&self) -> f64 {
        self.lambda * self.c
    }

    /// The analysis assumes `lambda·c >= 2`.
    pub fn in_theorem_regime(&self) -> bool {
        self.p() >= 2.0
    }

    pub fn second_moment(&self) -> f64 {
        let l = self.lambda;
        2.0 / (l * l) - 2.0 * self.c / l + self.c * self.c
    }

    /// `E[a²·1{|a| < t}]`, for any `t >= 0`.
    pub fn removed_energy(&self, t: f64) -> f64 {
        let (l, c) = (self.lambda, self.c);
        let m = t.min(c);
        let lower = (l * (m - c)).exp() * (2.0 / (l * l) - 2.0 * m / l + m * m);
        let upper = (-l * (c + t)).exp() * (2.0 / (l * l) + 2.0 * t / l + t * t);
        lower - upper
    }
}

/// `z` with `P(|N(0,1)| > z) = eta`, i.e. `Φ⁻¹(1 - eta/2)`.
pub fn gaussian_z(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    if eta == 1.0 {
        return Ok(0.0);
    }
    // -Φ⁻¹(eta/2) avoids forming 1 - eta/2
    Ok(-norm_quantile(eta / 2.0)?)
}

pub fn gaussian_threshold(s: &GaussianSpec, eta: f64) -> Result<f64> {
    Ok(s.sigma * gaussian_z(eta)?)
}

/// `2·z·φ(z)` at the Gaussian threshold for `eta`.
pub fn m2(eta: f64) -> Result<f64> {
    let z = gaussian_z(eta)?;
    Ok(2.0 * z * norm_pdf(z))
}

/// Removed-energy fraction for a Gaussian: `1 - eta - 2·z·φ(z)`.
pub fn f_gaussian(eta: f64) -> Result<f64> {
    Ok((1.0 - eta - m2(eta)?).max(0.0))
}

/// `(1 - eta)·(5e⁻⁴ - ln(1 - eta))`, the comparison curve for [`m2`].
pub fn n_bound(eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!("eta {eta} outside (0, 1)")));
    }
    Ok((1.0 - eta) * (5.0 * (-4.0f64).exp() - (-eta).ln_1p()))
}

pub fn shifted_exp_threshold(s: &ShiftedExpSpec, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    let (l, c) = (s.lambda, s.c);
    if eta >= (-2.0 * l * c).exp() {
        Ok((0.5 * (1.0 - eta) * (l * c).exp()).asinh() / l)
    } else {
        Ok(-eta.ln() / l - c)
    }
}

/// Normalized threshold `t/c` in the single-branch regime.
pub fn q_eta(eta: f64, p: f64) -> Result<f64> {
    check_regime(eta, p)?;
    Ok((0.5 * (1.0 - eta) * p.exp()).asinh() / p)
}

fn check_regime(eta: f64, p: f64) -> Result<()> {
    check_eta(eta)?;
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::invalid(format!("p must be positive, got {p}")));
    }
    if eta < (-2.0 * p).exp() {
        return Err(Error::invalid(format!(
            "eta {eta} below exp(-2p) = {}",
            (-2.0 * p).exp()
        )));
    }
    Ok(())
}

/// Removed-energy fraction for the shifted exponential with `p = lambda·c`.
pub fn g_shifted_exp(eta: f64, p: f64) -> Result<f64> {
    let q = q_eta(eta, p)?;
    let (g, h) = (p * (q - 1.0), p * (q + 1.0));
    let inv = 1.0 / p;
    let num =
        g.exp() * (2.0 * inv * inv - 2.0 * q * inv + q * q) - (-h).exp() * (2.0 * inv * inv + 2.0 * q * inv + q * q);
    let den = 2.0 * inv * inv - 2.0 * inv + 1.0;
    Ok((num / den).clamp(0.0, 1.0))
}

/// `e^{-2p}·(2 + 2p + p²)/(2 - 2p + p²)`.
pub fn f_p(p: f64) -> f64 {
    (-2.0 * p).exp() * (2.0 + 2.0 * p + p * p) / (2.0 - 2.0 * p + p * p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QghBounds {
    pub q: f64,
    pub g: f64,
    pub h: f64,
    /// `0 < 1 + ln(1-eta)/p`, `1 + ln(1-eta)/p < q`, `q < 1`,
    /// `ln(1-eta) < g < 0`, `2p + ln(1-eta) < h < 2p`.
    pub checks: [bool; 5],
}

impl QghBounds {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|&b| b)
    }

    /// `q` sits on its upper edge, which happens at `eta = exp(-2p)`.
    pub fn at_upper_edge(&self) -> bool {
        (self.q - 1.0).abs() <= 1e-12
    }
}

pub fn qgh_bounds(eta: f64, p: f64) -> Result<QghBounds> {
    if p < 2.0 {
        return Err(Error::invalid(format!("bounds need p >= 2, got {p}")));
    }
    if eta > 0.5 {
        return Err(Error::invalid(format!("bounds need eta <= 0.5, got {eta}")));
    }
    let q = q_eta(eta, p)?;
    let (g, h) = (p * (q - 1.0), p * (q + 1.0));
    let l = (-eta).ln_1p();
    let lo = 1.0 + l / p;
    Ok(QghBounds {
        q,
        g,
        h,
        checks: [
            0.0 < lo,
            lo < q,
            q < 1.0,
            l < g && g < 0.0,
            2.0 * p + l < h && h < 2.0 * p,
        ],
    })
}

/// Large-`lambda·c` threshold approximation `c + ln(1 - eta)/lambda`.
pub fn approx_threshold(s: &ShiftedExpSpec, eta: f64) -> f64 {
    s.c + (-eta).ln_1p() / s.lambda
}

/// Large-`lambda·c` removed-energy approximation
/// `(1 - eta)·(2/lambda² - 2t/lambda + t²)`.
pub fn approx_removed_energy(s: &ShiftedExpSpec, eta: f64, t: f64) -> f64 {
    let l = s.lambda;
    (1.0 - eta) * (2.0 / (l * l) - 2.0 * t / l + t * t)
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
}

impl Estimate {
    /// Distance to `target` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.se == 0.0 {
            if self.mean == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - target).abs() / self.se
        }
    }
}

/// First and second moments of `y`, `x` and their product.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    n: f64,
    y: f64,
    yy: f64,
    x: f64,
    xx: f64,
    xy: f64,
}

impl Sums {
    fn push(&mut self, y: f64, x: f64) {
        self.n += 1.0;
        self.y += y;
        self.yy += y * y;
        self.x += x;
        self.xx += x * x;
        self.xy += x * y;
    }

    fn merge(mut self, o: &Sums) -> Self {
        self.n += o.n;
        self.y += o.y;
        self.yy += o.yy;
        self.x += o.x;
        self.xx += o.xx;
        self.xy += o.xy;
        self
    }

    fn mean_y(&self) -> Estimate {
        let m = self.y / self.n;
        let var = (self.yy / self.n - m * m).max(0.0) * self.n / (self.n - 1.0);
        Estimate {
            mean: m,
            se: (var / self.n).sqrt(),
            samples: self.n as usize,
        }
    }

    /// `Σy/Σx` with a delta-method standard error.
    fn ratio(&self) -> Estimate {
        let n = self.n;
        let (my, mx) = (self.y / n, self.x / n);
        let r = my / mx;
        // variance of y - r·x around zero mean
        let var = (self.yy - 2.0 * r * self.xy + r * r * self.xx) / n - (my - r * mx).powi(2);
        let var = var.max(0.0) * n / (n - 1.0);
        Estimate {
            mean: r,
            se: (var / n).sqrt() / mx.abs(),
            samples: n as usize,
        }
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid("Monte-Carlo needs at least two samples"));
    }
    Ok(())
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Runs `f(rng, len)` on each block and returns results in block order.
fn run_blocks<T: Send>(n: usize, seed: u64, f: impl Fn(&mut ChaCha8Rng, usize) -> T + Sync) -> Vec<T> {
    let blocks = n.div_ceil(MC_BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = MC_BLOCK.min(n - b * MC_BLOCK);
            f(&mut block_rng(seed, b), len)
        })
        .collect()
}

fn summed(n: usize, seed: u64, f: impl Fn(&mut ChaCha8Rng, &mut Sums) + Sync) -> Sums {
    run_blocks(n, seed, |rng, len| {
        let mut s = Sums::default();
        for _ in 0..len {
            f(rng, &mut s);
        }
        s
    })
    .iter()
    .fold(Sums::default(), Sums::merge)
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn exp1(rng: &mut impl Rng) -> f64 {
    Exp1.sample(rng)
}

/// Removed-energy fraction of `N(0,1)` at the closed-form threshold.
pub fn mc_f(eta: f64, n_samples: usize, seed: u64) -> Result<Estimate> {
    check_samples(n_samples)?;
    let t = gaussian_z(eta)?;
    Ok(summed(n_samples, seed, |rng, s| {
        let a = normal(rng);
        let e = a * a;
        s.push(if a.abs() < t { e } else { 0.0 }, e);
    })
    .ratio())
}

/// Removed-energy fraction of the shifted exponential with `lambda = 1`,
/// `c = p` at the closed-form threshold.
pub fn mc_g(eta: f64, p: f64, n_samples: usize, seed: u64) -> Result<Estimate> {
    check_samples(n_samples)?;
    check_regime(eta, p)?;
    let spec = ShiftedExpSpec::new(1.0, p)?;
    let t = shifted_exp_threshold(&spec, eta)?;
    Ok(summed(n_samples, seed, |rng, s| {
        let a = exp1(rng) - p;
        let e = a * a;
        s.push(if a.abs() < t { e } else { 0.0 }, e);
    })
    .ratio())
}

/// Fraction of shifted-exponential draws with `|a| > t`.
pub fn mc_shifted_exp_keep(s: &ShiftedExpSpec, t: f64, n_samples: usize, seed: u64) -> Result<Estimate> {
    check_samples(n_samples)?;
    let (l, c) = (s.lambda, s.c);
    Ok(summed(n_samples, seed, |rng, acc| {
        let a = exp1(rng) / l - c;
        acc.push(if a.abs() > t { 1.0 } else { 0.0 }, 0.0);
    })
    .mean_y())
}

/// Removed energy of the down-projection input under three pruning
/// strategies at the same kept fraction, per element, with the weight
/// factor divided out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub eta: f64,
    pub down: Estimate,
    pub up: Estimate,
    pub gate: Estimate,
    /// Standard errors of the paired differences `up - down` and
    /// `gate - up`.
    pub se_up_minus_down: f64,
    pub se_gate_minus_up: f64,
    /// `E[a_gate²]·E[a_up²]`, the energy with nothing pruned.
    pub total_energy: f64,
}

impl Losses {
    /// The three losses divided by the unpruned energy.
    pub fn normalized(&self) -> [f64; 3] {
        [self.down.mean, self.up.mean, self.gate.mean].map(|v| v / self.total_energy)
    }

    /// Largest of the three standard errors, after normalization.
    pub fn normalized_se(&self) -> f64 {
        self.down.se.max(self.up.se).max(self.gate.se) / self.total_energy
    }
}

/// `a_up ~ N(0, sigma²)` and `a_gate = x - c`, `x ~ Exp(lambda)`, drawn
/// independently; the down-projection input is their product. Each
/// strategy prunes its own statistic to keep a fraction `eta`: the
/// product by its empirical quantile, `a_up` and `a_gate` by their
/// closed-form thresholds.
pub fn mc_losses(g: &GaussianSpec, e: &ShiftedExpSpec, eta: f64, n_samples: usize, seed: u64) -> Result<Losses> {
    check_samples(n_samples)?;
    let t_up = gaussian_threshold(g, eta)?;
    let t_gate = shifted_exp_threshold(e, eta)?;
    let (sigma, l, c) = (g.sigma, e.lambda, e.c);
    let draws: Vec<(f64, f64)> = run_blocks(n_samples, seed, |rng, len| {
        (0..len)
            .map(|_| (sigma * normal(rng), exp1(rng) / l - c))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let t_down = if eta >= 1.0 {
        0.0
    } else {
        let mut mags: Vec<f64> = draws.iter().map(|(u, g)| (u * g).abs()).collect();
        let n = mags.len();
        // keep the ceil(eta·n) largest magnitudes
        let keep = ((eta * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let (_, t, _) = mags.select_nth_unstable_by(n - keep, f64::total_cmp);
        *t
    };
    let mut down = Sums::default();
    let mut up = Sums::default();
    let mut gate = Sums::default();
    let mut d_up_down = Sums::default();
    let mut d_gate_up = Sums::default();
    for &(u, gt) in &draws {
        let prod = u * gt;
        let energy = prod * prod;
        let rd = if prod.abs() < t_down { energy } else { 0.0 };
        let ru = if u.abs() < t_up { energy } else { 0.0 };
        let rg = if gt.abs() < t_gate { energy } else { 0.0 };
        down.push(rd, 0.0);
        up.push(ru, 0.0);
        gate.push(rg, 0.0);
        d_up_down.push(ru - rd, 0.0);
        d_gate_up.push(rg - ru, 0.0);
    }
    Ok(Losses {
        eta,
        down: down.mean_y(),
        up: up.mean_y(),
        gate: gate.mean_y(),
        se_up_minus_down: d_up_down.mean_y().se,
        se_gate_minus_up: d_gate_up.mean_y().se,
        total_energy: sigma * sigma * e.second_moment(),
    })
}

/// Monte-Carlo estimates of the two reduction identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaReport {
    /// `E‖xW‖²` for a fixed unit `x`; expected `n·sigma_w²`.
    pub unit_input: Estimate,
    pub unit_expected: f64,
    /// `E‖xW‖²` for i.i.d. `x` with variance `sigma_x²`; expected
    /// `n·m·sigma_w²·sigma_x²`.
    pub iid_input: Estimate,
    pub iid_expected: f64,
    /// `E[(a - S_t(a))·b]` for independent standard normals; expected 0.
    pub cross_term: Estimate,
}

impl LemmaReport {
    pub fn max_z(&self) -> f64 {
        self.unit_input
            .z_score(self.unit_expected)
            .max(self.iid_input.z_score(self.iid_expected))
            .max(self.cross_term.z_score(0.0))
    }
}

/// `x` has length `m`, `W` is `m x n` with i.i.d. `N(0, sigma_w²)`
/// entries redrawn per sample.
pub fn lemma_a6_a7_check(
    m: usize,
    n: usize,
    sigma_w: f64,
    sigma_x: f64,
    t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<LemmaReport> {
    check_samples(n_samples)?;
    if m == 0 || n == 0 || [sigma_w, sigma_x, t].iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::invalid("need m, n >= 1 and sigma_w, sigma_x, t > 0"));
    }
    let xw_norm = |rng: &mut ChaCha8Rng, x: &[f64]| -> f64 {
        (0..n)
            .map(|_| {
                let col: f64 = x.iter().map(|&xi| xi * sigma_w * normal(rng)).sum();
                col * col
            })
            .sum()
    };
    let unit = {
        let mut x = vec![0.0; m];
        x[0] = 1.0;
        summed(n_samples, seed, |rng, s| s.push(xw_norm(rng, &x), 0.0)).mean_y()
    };
    let iid = summed(n_samples, seed ^ 0x9e37_79b9_7f4a_7c15, |rng, s| {
        let x: Vec<f64> = (0..m).map(|_| sigma_x * normal(rng)).collect();
        s.push(xw_norm(rng, &x), 0.0);
    })
    .mean_y();
    let cross = summed(n_samples, seed ^ 0xd1b5_4a32_d192_ed03, |rng, s| {
        let a = normal(rng);
        let b = normal(rng);
        let removed = if a.abs() < t { a } else { 0.0 };
        s.push(removed * b, 0.0);
    })
    .mean_y();
    let (mf, nf) = (m as f64, n as f64);
    Ok(LemmaReport {
        unit_input: unit,
        unit_expected: nf * sigma_w * sigma_w,
        iid_input: iid,
        iid_expected: nf * mf * sigma_w * sigma_w * sigma_x * sigma_x,
        cross_term: cross,
    })
}

pub fn default_etas() -> Vec<f64> {
    vec![(-4.0f64).exp(), 0.05, 0.1, 0.2, 0.3, 0.5]
}

pub fn default_ps() -> Vec<f64> {
    vec![2.0, 3.08, 4.0, 8.0, 11.0]
}

/// `eta,p,F,G,gap` with `gap = G - F`; points outside the single-branch
/// regime are skipped.
pub fn fg_table(etas: &[f64], ps: &[f64]) -> Result<String> {
    let mut s = String::from("eta,p,F,G,gap\n");
    for &eta in etas {
        let f = f_gaussian(eta)?;
        for &p in ps {
            if eta < (-2.0 * p).exp() {
                continue;
            }
            let g = g_shifted_exp(eta, p)?;
            let _ = writeln!(s, "{eta},{p},{f},{g},{}", g - f);
        }
    }
    Ok(s)
}

/// `eta,L_down,L_up,L_gate,se`, losses normalized by the unpruned energy.
pub fn losses_table(rows: &[Losses]) -> String {
    let mut s = String::from("eta,L_down,L_up,L_gate,se\n");
    for r in rows {
        let [d, u, g] = r.normalized();
        let _ = writeln!(s, "{},{d},{u},{g},{}", r.eta, r.normalized_se());
    }
    s
}
