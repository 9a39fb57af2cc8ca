//! Discrete probability models for the range coder and continuous rate
//! estimates for training.
//!
//! Gaussian interval masses are evaluated with `erfc` from `libm` (a pure-Rust
//! port of the fdlibm rational approximations, accurate to about one ulp), so
//! tables are reproducible on every platform that runs this code.

use std::f64::consts::{LN_2, SQRT_2};

use crate::error::{Error, Result};
use crate::quantizer::{tcq_cell, TcqQuantizer};
use crate::tensor::DEFAULT_Q_MAX;

/// Fixed-point precision of the coder's cumulative tables.
pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

pub const DEFAULT_P_MIN: f64 = 1.0 / PROB_TOTAL as f64;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const DEFAULT_Y_MAX: i32 = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyConfig {
    pub q_max: i32,
    pub p_min: f64,
    pub sigma_min: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig { q_max: DEFAULT_Q_MAX, p_min: DEFAULT_P_MIN, sigma_min: DEFAULT_SIGMA_MIN }
    }
}

/// Per-coefficient mean and deviation estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma: f64, sigma_min: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite(format!("gaussian parameters ({mu}, {sigma})")));
        }
        if sigma < sigma_min {
            return Err(Error::OutOfRange(format!("sigma {sigma} below sigma_min {sigma_min}")));
        }
        Ok(GaussianParams { mu, sigma })
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `P(lo < X < hi)` for a standard normal `X`, computed from whichever tail
/// keeps the subtraction well conditioned.
pub fn std_normal_mass(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let m = if lo >= 0.0 {
        0.5 * (libm::erfc(lo / SQRT_2) - libm::erfc(hi / SQRT_2))
    } else if hi <= 0.0 {
        0.5 * (libm::erfc(-hi / SQRT_2) - libm::erfc(-lo / SQRT_2))
    } else {
        1.0 - 0.5 * libm::erfc(hi / SQRT_2) - 0.5 * libm::erfc(-lo / SQRT_2)
    };
    m.max(0.0)
}

/// Mass of `N(mu, sigma^2)` on the interval `(a, b)`.
pub fn gaussian_mass(a: f64, b: f64, params: GaussianParams) -> f64 {
    std_normal_mass((a - params.mu) / params.sigma, (b - params.mu) / params.sigma)
}

/// A discrete distribution over the integer support `min..=max`, with both
/// floating-point probabilities and the coder's fixed-point cumulative counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfTable {
    min: i32,
    probs: Vec<f64>,
    cdf: Vec<u32>,
}

impl PmfTable {
    /// Floors `masses` at `p_min`, renormalizes and derives fixed-point counts
    /// summing to `2^16` with every symbol receiving at least one count.
    pub fn from_masses(min: i32, masses: &[f64], p_min: f64) -> Result<Self> {
        if masses.is_empty() || masses.len() as u32 > PROB_TOTAL / 2 {
            return Err(Error::InvalidArgument(format!("alphabet of {} symbols", masses.len())));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::NonFinite("probability mass".into()));
        }
        let floored: Vec<f64> = masses.iter().map(|&m| m.max(p_min)).collect();
        let total: f64 = floored.iter().sum();
        let probs: Vec<f64> = floored.iter().map(|m| m / total).collect();
        let counts = quantize_counts(&probs);
        let mut cdf = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for c in counts {
            acc += c;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, PROB_TOTAL);
        Ok(PmfTable { min, probs, cdf })
    }

    /// Uniform distribution over `n` symbols starting at `min`.
    pub fn uniform(min: i32, n: usize) -> Result<Self> {
        Self::from_masses(min, &vec![1.0; n], 0.0)
    }

    pub fn min(&self) -> i32 {
        self.min
    }

    pub fn max(&self) -> i32 {
        self.min + self.probs.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn contains(&self, value: i32) -> bool {
        value >= self.min && value <= self.max()
    }

    pub fn symbol(&self, value: i32) -> Result<usize> {
        if self.contains(value) {
            Ok((value - self.min) as usize)
        } else {
            Err(Error::OutOfRange(format!(
                "symbol {value} outside support {}..={}",
                self.min,
                self.max()
            )))
        }
    }

    pub fn value(&self, symbol: usize) -> i32 {
        self.min + symbol as i32
    }

    /// Floating-point probability of `value` (zero outside the support).
    pub fn prob(&self, value: i32) -> f64 {
        self.symbol(value).map(|s| self.probs[s]).unwrap_or(0.0)
    }

    pub fn bits(&self, value: i32) -> f64 {
        -self.prob(value).log2()
    }

    /// `(cumulative start, count)` for the coder.
    pub fn range(&self, symbol: usize) -> (u32, u32) {
        (self.cdf[symbol], self.cdf[symbol + 1] - self.cdf[symbol])
    }

    /// Probability actually used by the coder.
    pub fn fixed_prob(&self, value: i32) -> f64 {
        match self.symbol(value) {
            Ok(s) => self.range(s).1 as f64 / PROB_TOTAL as f64,
            Err(_) => 0.0,
        }
    }

    /// Symbol whose cumulative interval contains `target < 2^16`.
    pub fn lookup(&self, target: u32) -> usize {
        // cdf[0] == 0 <= target, so the partition point is at least 1
        self.cdf.partition_point(|&c| c <= target) - 1
    }
}

fn quantize_counts(probs: &[f64]) -> Vec<u32> {
    let total = PROB_TOTAL as i64;
    let mut counts: Vec<i64> = probs
        .iter()
        .map(|&p| ((p * total as f64).round() as i64).max(1))
        .collect();
    let mut diff = total - counts.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // largest first; stable on ties so the result is deterministic
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    if diff > 0 {
        counts[order[0]] += diff;
    } else {
        let mut i = 0;
        while diff < 0 {
            let k = order[i % order.len()];
            let take = (-diff).min(counts[k] - 1).min((counts[k] / 16).max(1));
            counts[k] -= take;
            diff += take;
            i += 1;
        }
    }
    counts.into_iter().map(|c| c as u32).collect()
}

/// Pre-flooring masses of the mean-shifted USQ index distribution over
/// `-q_max..=q_max`, tails lumped into the extreme indices.
///
/// Index `q` reconstructs to `q*delta + mu`, so its interval is
/// `[(q - 1/2) delta, (q + 1/2) delta]` around the mean and the masses do not
/// depend on `mu` at all.
pub fn usq_index_masses(params: GaussianParams, delta: f64, q_max: i32) -> Vec<f64> {
    let s = params.sigma;
    let bounds: Vec<f64> = (-q_max..=q_max + 1)
        .map(|k| {
            if k == -q_max {
                f64::NEG_INFINITY
            } else if k == q_max + 1 {
                f64::INFINITY
            } else {
                (k as f64 - 0.5) * delta / s
            }
        })
        .collect();
    masses_between(&bounds)
}

/// Masses of consecutive intervals of a standard normal, given ascending
/// standardized boundaries. Each boundary is evaluated once, from the tail on
/// its own side of zero.
fn masses_between(bounds: &[f64]) -> Vec<f64> {
    // for b >= 0 the upper tail Q(b), otherwise the lower tail Phi(b)
    let tails: Vec<f64> = bounds
        .iter()
        .map(|&b| if b >= 0.0 { 0.5 * libm::erfc(b / SQRT_2) } else { 0.5 * libm::erfc(-b / SQRT_2) })
        .collect();
    bounds
        .windows(2)
        .zip(tails.windows(2))
        .map(|(b, t)| {
            let m = if b[0] >= 0.0 {
                t[0] - t[1]
            } else if b[1] < 0.0 {
                t[1] - t[0]
            } else {
                1.0 - t[0] - t[1]
            };
            m.max(0.0)
        })
        .collect()
}

pub fn usq_index_pmf(params: GaussianParams, delta: f64, cfg: &EntropyConfig) -> Result<PmfTable> {
    check_delta(delta)?;
    PmfTable::from_masses(-cfg.q_max, &usq_index_masses(params, delta, cfg.q_max), cfg.p_min)
}

/// Pre-flooring masses of a TCQ quantizer's indices. Each index owns the
/// Voronoi cell of its reconstruction level on the absolute (not mean-shifted)
/// grid; the Gaussian centred at `mu` is integrated over that cell.
pub fn tcq_index_masses(params: GaussianParams, delta: f64, quantizer: TcqQuantizer, q_max: i32) -> Vec<f64> {
    let bounds: Vec<f64> = (-q_max..=q_max + 1)
        .map(|k| {
            if k == -q_max {
                f64::NEG_INFINITY
            } else if k == q_max + 1 {
                f64::INFINITY
            } else {
                (tcq_cell(k, quantizer, delta).0 - params.mu) / params.sigma
            }
        })
        .collect();
    masses_between(&bounds)
}

pub fn tcq_index_pmf(
    params: GaussianParams,
    delta: f64,
    quantizer: TcqQuantizer,
    cfg: &EntropyConfig,
) -> Result<PmfTable> {
    check_delta(delta)?;
    PmfTable::from_masses(-cfg.q_max, &tcq_index_masses(params, delta, quantizer, cfg.q_max), cfg.p_min)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step size must be positive, got {delta}")))
    }
}

/// Rate and its partial derivatives for one noisy latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateGrad {
    pub bits: f64,
    pub d_z: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
}

/// Training-time rate of a perturbed latent: the Gaussian mass of the
/// `delta`-wide interval centred on `z_tilde`.
pub fn continuous_rate_bits(z_tilde: f64, params: GaussianParams, delta: f64, p_min: f64) -> f64 {
    continuous_rate_grad(z_tilde, params, delta, p_min).bits
}

pub fn continuous_rate_grad(z: f64, params: GaussianParams, delta: f64, p_min: f64) -> RateGrad {
    let GaussianParams { mu, sigma } = params;
    let ua = (z - 0.5 * delta - mu) / sigma;
    let ub = (z + 0.5 * delta - mu) / sigma;
    let p = std_normal_mass(ua, ub);
    if p <= p_min {
        return RateGrad { bits: -p_min.log2(), d_z: 0.0, d_mu: 0.0, d_sigma: 0.0 };
    }
    let (pa, pb) = (std_normal_pdf(ua), std_normal_pdf(ub));
    let dp_dz = (pb - pa) / sigma;
    let dp_dsigma = -(pb * ub - pa * ua) / sigma;
    let scale = -1.0 / (p * LN_2);
    RateGrad {
        bits: -p.log2(),
        d_z: scale * dp_dz,
        d_mu: -scale * dp_dz,
        d_sigma: scale * dp_dsigma,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperMode {
    /// Integer symbol, coded mass.
    Discrete,
    /// Uniformly perturbed value; the bin masses are treated as a
    /// piecewise-constant density integrated over `[y - 1/2, y + 1/2]`.
    Noisy,
}

/// Learned static distribution of the quantized hyperprior: one logit
/// histogram per channel over `-y_max..=y_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticHyperPmf {
    channels: usize,
    y_max: i32,
    logits: Vec<f64>,
}

impl StaticHyperPmf {
    pub fn uniform(channels: usize, y_max: i32) -> Self {
        let bins = (2 * y_max + 1) as usize;
        StaticHyperPmf { channels, y_max, logits: vec![0.0; channels * bins] }
    }

    pub fn from_logits(channels: usize, y_max: i32, logits: Vec<f64>) -> Result<Self> {
        let bins = (2 * y_max + 1) as usize;
        if y_max < 0 || logits.len() != channels * bins {
            return Err(Error::Shape(format!(
                "{channels} channels x {bins} bins needs {} logits, got {}",
                channels * bins,
                logits.len()
            )));
        }
        Ok(StaticHyperPmf { channels, y_max, logits })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn y_max(&self) -> i32 {
        self.y_max
    }

    pub fn bins(&self) -> usize {
        (2 * self.y_max + 1) as usize
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn channel_logits(&self, channel: usize) -> &[f64] {
        let b = self.bins();
        &self.logits[channel * b..(channel + 1) * b]
    }

    /// Softmax-normalized bin masses of one channel.
    pub fn masses(&self, channel: usize) -> Vec<f64> {
        softmax(self.channel_logits(channel))
    }

    pub fn pmf_table(&self, channel: usize, p_min: f64) -> Result<PmfTable> {
        PmfTable::from_masses(-self.y_max, &self.masses(channel), p_min)
    }

    pub fn rate_bits(&self, value: f64, channel: usize, mode: HyperMode, p_min: f64) -> f64 {
        hyper_rate_grad(self.channel_logits(channel), self.y_max, value, mode, p_min).bits
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperRateGrad {
    pub bits: f64,
    pub d_value: f64,
    /// Derivative with respect to each logit of the channel.
    pub d_logits: Vec<f64>,
}

/// Rate of one hyperprior value under a channel's logit histogram, with
/// derivatives. Values outside the support are clamped (zero value gradient).
pub fn hyper_rate_grad(logits: &[f64], y_max: i32, value: f64, mode: HyperMode, p_min: f64) -> HyperRateGrad {
    let probs = softmax(logits);
    let bins = probs.len();
    let lo = -(y_max as f64);
    let hi = y_max as f64;
    let clamped = value.clamp(lo, hi);
    let inside = value > lo && value < hi;
    // (bin, weight) pairs whose weighted mass sum is the probability
    let terms: [(usize, f64); 2] = match mode {
        HyperMode::Discrete => {
            let k = (clamped.round() - lo) as usize;
            [(k, 1.0), (k, 0.0)]
        }
        HyperMode::Noisy => {
            let m = clamped.floor();
            let t = clamped - m;
            let k = (m - lo) as usize;
            if k + 1 < bins {
                [(k, 1.0 - t), (k + 1, t)]
            } else {
                [(k, 1.0), (k, 0.0)]
            }
        }
    };
    let p: f64 = terms.iter().map(|&(k, w)| w * probs[k]).sum();
    let mut d_logits = vec![0.0; bins];
    if p <= p_min {
        return HyperRateGrad { bits: -p_min.log2(), d_value: 0.0, d_logits };
    }
    let scale = -1.0 / (p * LN_2);
    // dp/dlogit_j = sum_k w_k p_k (delta_jk - p_j)
    for &(k, w) in &terms {
        if w == 0.0 {
            continue;
        }
        let wk = w * probs[k];
        for (j, d) in d_logits.iter_mut().enumerate() {
            *d -= scale * wk * probs[j];
        }
        d_logits[k] += scale * wk;
    }
    let d_value = if mode == HyperMode::Noisy && inside {
        let (k0, _) = terms[0];
        let (k1, w1) = terms[1];
        if k1 != k0 || w1 != 0.0 {
            scale * (probs[k1] - probs[k0])
        } else {
            0.0
        }
    } else {
        0.0
    };
    HyperRateGrad { bits: -p.log2(), d_value, d_logits }
}
