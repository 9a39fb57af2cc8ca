//! Uniform scalar quantization with mean shift, and the decoder side of
//! trellis-coded quantization: the two interleaved scalar quantizers, the
//! four-state parity-driven state machine and index replay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::entropy::DEFAULT_Y_MAX;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{LatentTensor, QuantIndices, QuantizerKind, DEFAULT_Q_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TcqQuantizer {
    /// Levels `{0, ±2Δ, ±4Δ, ...}`.
    Even,
    /// Levels `{0, ±Δ, ±3Δ, ...}`.
    Odd,
}

pub const TCQ_NUM_STATES: usize = 4;
pub const TCQ_INITIAL_STATE: u8 = 0;

const QUANTIZER_OF_STATE: [TcqQuantizer; TCQ_NUM_STATES] =
    [TcqQuantizer::Even, TcqQuantizer::Even, TcqQuantizer::Odd, TcqQuantizer::Odd];

// NEXT_STATE[state][parity]
const NEXT_STATE: [[u8; 2]; TCQ_NUM_STATES] = [[0, 2], [2, 0], [1, 3], [3, 1]];

/// The four-state TCQ transition machine. The constants are part of the
/// bitstream format.
pub struct TcqStateMachine;

impl TcqStateMachine {
    pub fn quantizer(state: u8) -> TcqQuantizer {
        QUANTIZER_OF_STATE[state as usize]
    }

    pub fn next(state: u8, index: i32) -> u8 {
        NEXT_STATE[state as usize][parity(index)]
    }

    /// States visited before each index of `indices`, starting at state 0.
    pub fn replay(indices: &[i32]) -> Vec<u8> {
        let mut s = TCQ_INITIAL_STATE;
        indices
            .iter()
            .map(|&q| {
                let cur = s;
                s = Self::next(s, q);
                cur
            })
            .collect()
    }
}

/// Parity of an index, taken on its magnitude.
pub fn parity(index: i32) -> usize {
    (index.unsigned_abs() & 1) as usize
}

/// Nearest-integer rounding with ties away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanOrder {
    /// Row-major within a channel, channels (leading dimension) in order.
    #[default]
    ChannelMajor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    pub delta: f64,
    pub kind: QuantizerKind,
    pub q_max: i32,
    pub scan: ScanOrder,
}

impl QuantizerConfig {
    pub fn new(kind: QuantizerKind, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {delta}")));
        }
        Ok(QuantizerConfig { delta, kind, q_max: DEFAULT_Q_MAX, scan: ScanOrder::ChannelMajor })
    }
}

/// Splits a tensor shape into `(channels, coefficients per channel)`. The
/// leading dimension enumerates channels; a 1-d tensor is a single channel.
pub fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [c, rest @ ..] => (*c, rest.iter().product()),
    }
}

pub fn usq_quantize(z: f64, mu_hat: f64, delta: f64, q_max: i32) -> i32 {
    let q = round_half_away((z - mu_hat) / delta);
    q.clamp(-q_max as f64, q_max as f64) as i32
}

pub fn usq_dequantize(q: i32, mu_hat: f64, delta: f64) -> f64 {
    q as f64 * delta + mu_hat
}

pub fn tcq_level(q: i32, quantizer: TcqQuantizer, delta: f64) -> f64 {
    match quantizer {
        TcqQuantizer::Even => 2.0 * q as f64 * delta,
        TcqQuantizer::Odd => {
            if q == 0 {
                0.0
            } else {
                q.signum() as f64 * (2 * q.abs() - 1) as f64 * delta
            }
        }
    }
}

/// Voronoi cell `(lo, hi)` of index `q`'s reconstruction level.
pub fn tcq_cell(q: i32, quantizer: TcqQuantizer, delta: f64) -> (f64, f64) {
    let level = tcq_level(q, quantizer, delta);
    let lower = tcq_level(q - 1, quantizer, delta);
    let upper = tcq_level(q + 1, quantizer, delta);
    (0.5 * (lower + level), 0.5 * (level + upper))
}

/// Index whose reconstruction level under `quantizer` is exactly `level`.
pub fn tcq_index_of_level(level: f64, quantizer: TcqQuantizer, delta: f64) -> Option<i32> {
    let u = level / delta;
    let q = match quantizer {
        TcqQuantizer::Even => u / 2.0,
        TcqQuantizer::Odd if u == 0.0 => 0.0,
        TcqQuantizer::Odd => u.signum() * (u.abs() + 1.0) / 2.0,
    };
    if !q.is_finite() || q.abs() > i32::MAX as f64 {
        return None;
    }
    let qi = q.round() as i32;
    (tcq_level(qi, quantizer, delta) == level).then_some(qi)
}

/// Replays the state machine over each channel and maps indices to levels.
pub fn tcq_dequantize(indices: &QuantIndices, q_max: i32) -> Result<LatentTensor> {
    if indices.kind() != QuantizerKind::Tcq {
        return Err(Error::InvalidArgument("tcq_dequantize needs TCQ indices".into()));
    }
    indices.check_bound(q_max)?;
    let (channels, len) = channel_layout(indices.shape());
    let delta = indices.delta();
    let mut out = Vec::with_capacity(indices.indices().len());
    for c in 0..channels {
        out.extend(tcq_dequantize_run(&indices.indices()[c * len..(c + 1) * len], delta));
    }
    LatentTensor::new(indices.shape().to_vec(), out)
}

/// Dequantizes one trellis run starting from the initial state.
pub fn tcq_dequantize_run(indices: &[i32], delta: f64) -> Vec<f64> {
    let mut s = TCQ_INITIAL_STATE;
    indices
        .iter()
        .map(|&q| {
            let v = tcq_level(q, TcqStateMachine::quantizer(s), delta);
            s = TcqStateMachine::next(s, q);
            v
        })
        .collect()
}

/// Recovers the indices of a TCQ reconstruction run by replaying the state
/// machine; `None` if some value is not a level of the quantizer that the
/// replayed state selects.
pub fn tcq_indices_from_levels(levels: &[f64], delta: f64) -> Option<Vec<i32>> {
    let mut s = TCQ_INITIAL_STATE;
    levels
        .iter()
        .map(|&v| {
            let q = tcq_index_of_level(v, TcqStateMachine::quantizer(s), delta)?;
            s = TcqStateMachine::next(s, q);
            Some(q)
        })
        .collect()
}

/// Rounds the hyperprior to integers (ties away from zero), clamped to the
/// hyper support. The result is a unit-step USQ index array without mean.
pub fn hyper_round(y: &LatentTensor, y_max: i32) -> QuantIndices {
    let idx = y
        .data()
        .iter()
        .map(|&v| round_half_away(v).clamp(-y_max as f64, y_max as f64) as i32)
        .collect();
    QuantIndices::new(y.shape().to_vec(), idx, QuantizerKind::Usq, 1.0)
        .expect("shape taken from a valid tensor")
}

pub fn hyper_round_default(y: &LatentTensor) -> QuantIndices {
    hyper_round(y, DEFAULT_Y_MAX)
}

/// Monte-Carlo comparison of mean-shifted and plain USQ.
///
/// Each sample draws `mu ~ U(-Δ/2, Δ/2)`, `sigma ~ U(sigma_lo, sigma_hi)·Δ`
/// and `z ~ N(mu, sigma²)`; both quantizers see the same `z`. Work is split
/// into fixed chunks with their own RNG streams, so the result is independent
/// of the thread count. Returns `(shifted_mse, unshifted_mse)`.
pub fn mean_shift_mse(samples: usize, delta: f64, sigma_range: (f64, f64), seed: u64) -> (f64, f64) {
    const CHUNK: usize = 1 << 14;
    let chunks = samples.div_ceil(CHUNK);
    let partial = par::map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let n = CHUNK.min(samples - c * CHUNK);
        let (mut shifted, mut plain) = (0.0, 0.0);
        for _ in 0..n {
            let mu = (rng.random::<f64>() - 0.5) * delta;
            let sigma = (sigma_range.0 + rng.random::<f64>() * (sigma_range.1 - sigma_range.0)) * delta;
            let g: f64 = StandardNormal.sample(&mut rng);
            let z = mu + sigma * g;
            let a = usq_dequantize(usq_quantize(z, mu, delta, i32::MAX), mu, delta) - z;
            let b = usq_dequantize(usq_quantize(z, 0.0, delta, i32::MAX), 0.0, delta) - z;
            shifted += a * a;
            plain += b * b;
        }
        (shifted, plain)
    });
    let (s, p) = partial.iter().fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    (s / samples as f64, p / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn usq_examples() {
        assert_eq!(usq_quantize(1.7, 0.1, 1.0, 64), 2);
        assert_eq!(usq_quantize(0.3, 0.3, 0.25, 64), 0);
        assert_eq!(usq_quantize(1.5, 0.0, 1.0, 64), 2);
        assert_eq!(usq_quantize(-1.5, 0.0, 1.0, 64), -2);
        assert_eq!(usq_quantize(1e9, 0.0, 1.0, 64), 64);
        assert!((usq_dequantize(2, 0.1, 1.0) - 2.1).abs() < 1e-15);
        assert_eq!(usq_dequantize(0, 0.37, 2.0), 0.37);
    }

    #[test]
    fn tcq_level_examples() {
        assert_eq!(tcq_level(2, TcqQuantizer::Even, 1.0), 4.0);
        assert_eq!(tcq_level(-2, TcqQuantizer::Odd, 1.0), -3.0);
        assert_eq!(tcq_level(0, TcqQuantizer::Even, 1.0), 0.0);
        assert_eq!(tcq_level(0, TcqQuantizer::Odd, 1.0), 0.0);
        assert_eq!(tcq_level(1, TcqQuantizer::Odd, 0.5), 0.5);
    }

    #[test]
    fn tcq_cells() {
        assert_eq!(tcq_cell(0, TcqQuantizer::Even, 1.0), (-1.0, 1.0));
        assert_eq!(tcq_cell(3, TcqQuantizer::Even, 1.0), (5.0, 7.0));
        assert_eq!(tcq_cell(0, TcqQuantizer::Odd, 1.0), (-0.5, 0.5));
        assert_eq!(tcq_cell(1, TcqQuantizer::Odd, 1.0), (0.5, 2.0));
        assert_eq!(tcq_cell(-1, TcqQuantizer::Odd, 1.0), (-2.0, -0.5));
        assert_eq!(tcq_cell(2, TcqQuantizer::Odd, 1.0), (2.0, 4.0));
    }

    #[test]
    fn replay_examples() {
        let q = QuantIndices::new(vec![3], vec![1, 0, -2], QuantizerKind::Tcq, 1.0).unwrap();
        assert_eq!(TcqStateMachine::replay(q.indices()), vec![0, 2, 1]);
        assert_eq!(tcq_dequantize(&q, 64).unwrap().data(), &[2.0, 0.0, -4.0]);

        let q = QuantIndices::new(vec![2], vec![1, 1], QuantizerKind::Tcq, 1.0).unwrap();
        assert_eq!(TcqStateMachine::replay(q.indices()), vec![0, 2]);
        assert_eq!(tcq_dequantize(&q, 64).unwrap().data(), &[2.0, 1.0]);

        let q = QuantIndices::new(vec![5], vec![0; 5], QuantizerKind::Tcq, 1.0).unwrap();
        assert_eq!(TcqStateMachine::replay(q.indices()), vec![0; 5]);
        assert_eq!(tcq_dequantize(&q, 64).unwrap().data(), &[0.0; 5]);
    }

    #[test]
    fn replay_resets_per_channel() {
        let q = QuantIndices::new(vec![2, 2], vec![1, 1, 1, 1], QuantizerKind::Tcq, 1.0).unwrap();
        assert_eq!(tcq_dequantize(&q, 64).unwrap().data(), &[2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn dequantize_rejects_bad_input() {
        let q = QuantIndices::new(vec![1], vec![65], QuantizerKind::Tcq, 1.0).unwrap();
        assert!(matches!(tcq_dequantize(&q, 64), Err(Error::OutOfRange(_))));
        let q = QuantIndices::new(vec![1], vec![1], QuantizerKind::Usq, 1.0).unwrap();
        assert!(tcq_dequantize(&q, 64).is_err());
    }

    #[test]
    fn transitions_stay_in_range() {
        for s in 0..4u8 {
            for q in -3..=3 {
                assert!(TcqStateMachine::next(s, q) < 4);
            }
        }
        assert_eq!(parity(-3), 1);
        assert_eq!(parity(-2), 0);
    }

    #[test]
    fn levels_are_bijective() {
        for quant in [TcqQuantizer::Even, TcqQuantizer::Odd] {
            let mut seen = std::collections::HashSet::new();
            for q in -64..=64 {
                let l = tcq_level(q, quant, 0.75);
                assert_eq!(tcq_level(-q, quant, 0.75), -l);
                assert_eq!(tcq_index_of_level(l, quant, 0.75), Some(q));
                assert!(seen.insert(l.to_bits()));
            }
        }
        assert_eq!(tcq_index_of_level(1.0, TcqQuantizer::Even, 1.0), None);
        assert_eq!(tcq_index_of_level(2.0, TcqQuantizer::Odd, 1.0), None);
    }

    #[test]
    fn indices_recovered_from_levels() {
        let idx = vec![1, 0, -2, 3, 1, 1, 0, -1];
        let levels = tcq_dequantize_run(&idx, 0.5);
        assert_eq!(tcq_indices_from_levels(&levels, 0.5), Some(idx));
        assert_eq!(tcq_indices_from_levels(&[2.0, 2.0], 1.0), None);
    }

    #[test]
    fn hyper_round_examples() {
        let y = LatentTensor::new(vec![5], vec![0.4, -1.5, 3.0, 1.5, 99.0]).unwrap();
        assert_eq!(hyper_round(&y, 32).indices(), &[0, -2, 3, 2, 32]);
    }

    #[test]
    fn mean_shift_reduces_error() {
        let (s, p) = mean_shift_mse(200_000, 1.0, (0.1, 0.5), 7);
        assert!(s <= p, "{s} > {p}");
        // deterministic regardless of scheduling
        assert_eq!(mean_shift_mse(50_000, 1.0, (0.1, 0.5), 3), mean_shift_mse(50_000, 1.0, (0.1, 0.5), 3));
    }

    proptest! {
        #[test]
        fn usq_error_bound(z in -50.0f64..50.0, mu in -5.0f64..5.0, delta in 0.01f64..3.0) {
            prop_assume!(((z - mu) / delta).abs() <= 64.0);
            let q = usq_quantize(z, mu, delta, 64);
            let zh = usq_dequantize(q, mu, delta);
            prop_assert!((zh - z).abs() <= delta / 2.0 + 1e-12);
        }

        #[test]
        fn replay_is_deterministic(idx in prop::collection::vec(-64i32..=64, 1..40)) {
            let a = tcq_dequantize_run(&idx, 1.0);
            let b = tcq_dequantize_run(&idx, 1.0);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(tcq_indices_from_levels(&a, 1.0), Some(idx));
        }
    }
}
