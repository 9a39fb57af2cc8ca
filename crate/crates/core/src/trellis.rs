//! Encoder-side TCQ: rate-distortion optimal index selection with the Viterbi
//! algorithm over the four-state trellis, plus an exhaustive search used to
//! validate it.
//!
//! The cost of a path is `sum_i (z_i - ẑ_i)^2 + lambda_q * bits_i`, where the
//! bits come from the Gaussian index pmf of whichever quantizer the current
//! state selects. Distortion is measured in the latent domain, so decoder
//! weights never influence quantization decisions.

use std::cmp::Ordering;

use crate::entropy::{tcq_index_pmf, EntropyConfig, GaussianParams};
use crate::error::{Error, Result};
use crate::par;
use crate::quantizer::{channel_layout, tcq_level, TcqQuantizer, TcqStateMachine, TCQ_INITIAL_STATE, TCQ_NUM_STATES};
use crate::tensor::{LatentTensor, QuantIndices, QuantizerKind};

/// Default trellis rate weight, in units of `Δ²`. Picked by the BD-rate sweep
/// against the USQ family on synthetic textures.
pub const DEFAULT_LAMBDA_Q_REL: f64 = 0.5;

const BRUTE_FORCE_MAX_LEN: usize = 12;
const BRUTE_FORCE_MAX_CANDIDATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrellisConfig {
    pub delta: f64,
    /// Rate weight in squared latent units.
    pub lambda_q: f64,
    pub candidates_per_state: usize,
    pub entropy: EntropyConfig,
}

impl TrellisConfig {
    pub fn new(delta: f64) -> Self {
        TrellisConfig {
            delta,
            lambda_q: DEFAULT_LAMBDA_Q_REL * delta * delta,
            candidates_per_state: 3,
            entropy: EntropyConfig::default(),
        }
    }

    pub fn with_lambda_q(mut self, lambda_q: f64) -> Self {
        self.lambda_q = lambda_q;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", self.delta)));
        }
        if !(self.lambda_q >= 0.0 && self.lambda_q.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_q must be >= 0, got {}", self.lambda_q)));
        }
        if self.candidates_per_state == 0 {
            return Err(Error::InvalidArgument("need at least one candidate per state".into()));
        }
        Ok(())
    }
}

/// Candidate indices for one coefficient: the nearer and farther of the two
/// levels bracketing `z`, then the zero level, then further levels outward on
/// the side of `z`. Deduplicated and clamped; at most `count` entries.
pub fn candidate_indices(z: f64, quantizer: TcqQuantizer, delta: f64, q_max: i32, count: usize) -> Vec<i32> {
    let (lo, hi) = bracket(z, quantizer, delta);
    let (near, far) = if (z - tcq_level(lo, quantizer, delta)).abs() <= (tcq_level(hi, quantizer, delta) - z).abs() {
        (lo, hi)
    } else {
        (hi, lo)
    };
    let outward = if z >= 0.0 { 1 } else { -1 };
    let mut out: Vec<i32> = Vec::with_capacity(count);
    let push = |q: i32, out: &mut Vec<i32>| {
        let q = q.clamp(-q_max, q_max);
        if out.len() < count && !out.contains(&q) {
            out.push(q);
        }
    };
    push(near, &mut out);
    push(far, &mut out);
    push(0, &mut out);
    let mut next = if outward > 0 { lo.max(hi) } else { lo.min(hi) };
    while out.len() < count && next.abs() < q_max {
        next += outward;
        push(next, &mut out);
    }
    out
}

/// Indices `(lo, hi)` of adjacent levels with `level(lo) <= z <= level(hi)`.
fn bracket(z: f64, quantizer: TcqQuantizer, delta: f64) -> (i32, i32) {
    let u = z / delta;
    let lo = match quantizer {
        TcqQuantizer::Even => (u / 2.0).floor(),
        TcqQuantizer::Odd => {
            if u >= 1.0 {
                ((u + 1.0) / 2.0).floor()
            } else if u >= 0.0 {
                0.0
            } else if u >= -1.0 {
                -1.0
            } else {
                // level of -k is -(2k-1): largest such level <= u
                -((1.0 - u) / 2.0).ceil()
            }
        }
    };
    let lo = lo.clamp(i32::MIN as f64 / 2.0, i32::MAX as f64 / 2.0) as i32;
    (lo, lo + 1)
}

/// Candidate indices and their stage costs for one quantizer at one position.
#[derive(Debug, Clone)]
struct StageOptions {
    indices: Vec<i32>,
    levels: Vec<f64>,
    costs: Vec<f64>,
    bits: Vec<f64>,
}

fn stage_options(z: f64, params: GaussianParams, cfg: &TrellisConfig) -> Result<[StageOptions; 2]> {
    let build = |quantizer| -> Result<StageOptions> {
        let indices = candidate_indices(z, quantizer, cfg.delta, cfg.entropy.q_max, cfg.candidates_per_state);
        let levels: Vec<f64> = indices.iter().map(|&q| tcq_level(q, quantizer, cfg.delta)).collect();
        let bits: Vec<f64> = if cfg.lambda_q > 0.0 {
            let table = tcq_index_pmf(params, cfg.delta, quantizer, &cfg.entropy)?;
            indices.iter().map(|&q| table.bits(q)).collect()
        } else {
            vec![0.0; indices.len()]
        };
        let costs = levels
            .iter()
            .zip(&bits)
            .map(|(l, b)| (z - l) * (z - l) + cfg.lambda_q * b)
            .collect();
        Ok(StageOptions { indices, levels, costs, bits })
    };
    Ok([build(TcqQuantizer::Even)?, build(TcqQuantizer::Odd)?])
}

fn options_for(opts: &[StageOptions; 2], state: u8) -> &StageOptions {
    match TcqStateMachine::quantizer(state) {
        TcqQuantizer::Even => &opts[0],
        TcqQuantizer::Odd => &opts[1],
    }
}

/// Outcome of a trellis search over one run of coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct TrellisPath {
    pub indices: Vec<i32>,
    /// Reconstruction used inside the search.
    pub levels: Vec<f64>,
    pub cost: f64,
    pub distortion: f64,
    pub rate_bits: f64,
}

#[derive(Clone, Copy)]
struct Survivor {
    cost: f64,
    prev: u8,
    choice: u8,
}

/// Viterbi search over a single run starting in state 0.
pub fn viterbi_run(z: &[f64], params: &[GaussianParams], cfg: &TrellisConfig) -> Result<TrellisPath> {
    cfg.validate()?;
    if z.len() != params.len() {
        return Err(Error::Shape(format!("{} latents but {} parameter pairs", z.len(), params.len())));
    }
    let stages: Vec<[StageOptions; 2]> = z
        .iter()
        .zip(params)
        .map(|(&zi, &pi)| stage_options(zi, pi, cfg))
        .collect::<Result<_>>()?;

    let mut cost = [f64::INFINITY; TCQ_NUM_STATES];
    cost[TCQ_INITIAL_STATE as usize] = 0.0;
    let mut back: Vec<[Option<Survivor>; TCQ_NUM_STATES]> = Vec::with_capacity(z.len());
    for opts in &stages {
        let mut next: [Option<Survivor>; TCQ_NUM_STATES] = [None; TCQ_NUM_STATES];
        for s in 0..TCQ_NUM_STATES as u8 {
            if !cost[s as usize].is_finite() {
                continue;
            }
            let o = options_for(opts, s);
            for (k, (&q, &c)) in o.indices.iter().zip(&o.costs).enumerate() {
                let ns = TcqStateMachine::next(s, q) as usize;
                let total = cost[s as usize] + c;
                let replace = match next[ns] {
                    None => true,
                    Some(cur) => {
                        let cur_q = options_for(opts, cur.prev).indices[cur.choice as usize];
                        match total.partial_cmp(&cur.cost).unwrap_or(Ordering::Equal) {
                            Ordering::Less => true,
                            Ordering::Greater => false,
                            Ordering::Equal => (q.abs(), s) < (cur_q.abs(), cur.prev),
                        }
                    }
                };
                if replace {
                    next[ns] = Some(Survivor { cost: total, prev: s, choice: k as u8 });
                }
            }
        }
        for (c, n) in cost.iter_mut().zip(&next) {
            *c = n.map_or(f64::INFINITY, |s| s.cost);
        }
        back.push(next);
    }

    // lowest cost final state, ties to the lower state id
    let mut state = 0u8;
    for s in 1..TCQ_NUM_STATES as u8 {
        if cost[s as usize] < cost[state as usize] {
            state = s;
        }
    }
    let total_cost = if z.is_empty() { 0.0 } else { cost[state as usize] };
    let mut indices = vec![0; z.len()];
    let mut levels = vec![0.0; z.len()];
    let mut bits = vec![0.0; z.len()];
    for i in (0..z.len()).rev() {
        let sv = back[i][state as usize].expect("survivor exists on an optimal path");
        let o = options_for(&stages[i], sv.prev);
        indices[i] = o.indices[sv.choice as usize];
        levels[i] = o.levels[sv.choice as usize];
        bits[i] = o.bits[sv.choice as usize];
        state = sv.prev;
    }
    Ok(finish_path(z, indices, levels, bits, total_cost))
}

fn finish_path(z: &[f64], indices: Vec<i32>, levels: Vec<f64>, bits: Vec<f64>, cost: f64) -> TrellisPath {
    let distortion = z.iter().zip(&levels).map(|(a, b)| (a - b) * (a - b)).sum();
    let rate_bits = bits.iter().sum();
    TrellisPath { indices, levels, cost, distortion, rate_bits }
}

/// Exhaustive search over every state-consistent candidate sequence. Used as
/// the optimality oracle for [`viterbi_run`]; limited to short runs.
///
/// Equal costs are resolved like the Viterbi survivor rule applied from the
/// last position backwards: lower final state, then smaller `|q|` and lower
/// predecessor state at each position from the end.
pub fn brute_force_run(z: &[f64], params: &[GaussianParams], cfg: &TrellisConfig) -> Result<TrellisPath> {
    cfg.validate()?;
    if z.len() != params.len() {
        return Err(Error::Shape(format!("{} latents but {} parameter pairs", z.len(), params.len())));
    }
    if z.len() > BRUTE_FORCE_MAX_LEN || cfg.candidates_per_state > BRUTE_FORCE_MAX_CANDIDATES {
        return Err(Error::TooLarge(format!(
            "exhaustive search limited to {BRUTE_FORCE_MAX_LEN} positions and {BRUTE_FORCE_MAX_CANDIDATES} candidates"
        )));
    }
    let stages: Vec<[StageOptions; 2]> = z
        .iter()
        .zip(params)
        .map(|(&zi, &pi)| stage_options(zi, pi, cfg))
        .collect::<Result<_>>()?;

    struct Search<'a> {
        stages: &'a [[StageOptions; 2]],
        // (state before step, choice) per position
        path: Vec<(u8, usize)>,
        // (cost, final state, path)
        best: Option<Best>,
    }
    type Best = (f64, u8, Vec<(u8, usize)>);

    impl Search<'_> {
        fn key(&self, path: &[(u8, usize)], final_state: u8) -> Vec<(i32, u8)> {
            let mut k = vec![(0, final_state)];
            for (i, &(s, c)) in path.iter().enumerate().rev() {
                k.push((options_for(&self.stages[i], s).indices[c].abs(), s));
            }
            k
        }

        fn visit(&mut self, state: u8, cost: f64) {
            let i = self.path.len();
            if i == self.stages.len() {
                let better = match &self.best {
                    None => true,
                    Some((bc, bs, bp)) => match cost.partial_cmp(bc).unwrap_or(Ordering::Equal) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => self.key(&self.path, state) < self.key(bp, *bs),
                    },
                };
                if better {
                    self.best = Some((cost, state, self.path.clone()));
                }
                return;
            }
            let o = options_for(&self.stages[i], state);
            for k in 0..o.indices.len() {
                let ns = TcqStateMachine::next(state, o.indices[k]);
                let c = cost + o.costs[k];
                self.path.push((state, k));
                self.visit(ns, c);
                self.path.pop();
            }
        }
    }

    let mut search = Search { stages: &stages, path: Vec::with_capacity(z.len()), best: None };
    search.visit(TCQ_INITIAL_STATE, 0.0);
    let (cost, _, path) = search.best.expect("at least one path");
    let mut indices = Vec::with_capacity(z.len());
    let mut levels = Vec::with_capacity(z.len());
    let mut bits = Vec::with_capacity(z.len());
    for (i, &(s, c)) in path.iter().enumerate() {
        let o = options_for(&stages[i], s);
        indices.push(o.indices[c]);
        levels.push(o.levels[c]);
        bits.push(o.bits[c]);
    }
    Ok(finish_path(z, indices, levels, bits, cost))
}

/// Total trellis cost of a given index sequence, replaying states from 0.
pub fn path_cost(z: &[f64], params: &[GaussianParams], indices: &[i32], cfg: &TrellisConfig) -> Result<f64> {
    let mut s = TCQ_INITIAL_STATE;
    let mut total = 0.0;
    for ((&zi, &pi), &q) in z.iter().zip(params).zip(indices) {
        let quantizer = TcqStateMachine::quantizer(s);
        let level = tcq_level(q, quantizer, cfg.delta);
        let bits = if cfg.lambda_q > 0.0 {
            tcq_index_pmf(pi, cfg.delta, quantizer, &cfg.entropy)?.bits(q)
        } else {
            0.0
        };
        total += (zi - level) * (zi - level) + cfg.lambda_q * bits;
        s = TcqStateMachine::next(s, q);
    }
    Ok(total)
}

/// Runs the Viterbi search independently on every channel of `z`.
pub fn tcq_encode_paths(z: &LatentTensor, params: &[GaussianParams], cfg: &TrellisConfig) -> Result<Vec<TrellisPath>> {
    if params.len() != z.len() {
        return Err(Error::Shape(format!("{} latents but {} parameter pairs", z.len(), params.len())));
    }
    let (channels, len) = channel_layout(z.shape());
    par::map_range(channels, |c| {
        let r = c * len..(c + 1) * len;
        viterbi_run(&z.data()[r.clone()], &params[r], cfg)
    })
    .into_iter()
    .collect()
}

pub fn tcq_encode_viterbi(z: &LatentTensor, params: &[GaussianParams], cfg: &TrellisConfig) -> Result<QuantIndices> {
    let paths = tcq_encode_paths(z, params, cfg)?;
    let indices = paths.into_iter().flat_map(|p| p.indices).collect();
    QuantIndices::new(z.shape().to_vec(), indices, QuantizerKind::Tcq, cfg.delta)
}

pub fn tcq_brute_force(z: &LatentTensor, params: &[GaussianParams], cfg: &TrellisConfig) -> Result<QuantIndices> {
    if params.len() != z.len() {
        return Err(Error::Shape(format!("{} latents but {} parameter pairs", z.len(), params.len())));
    }
    let (channels, len) = channel_layout(z.shape());
    let mut indices = Vec::with_capacity(z.len());
    for c in 0..channels {
        let r = c * len..(c + 1) * len;
        indices.extend(brute_force_run(&z.data()[r.clone()], &params[r], cfg)?.indices);
    }
    QuantIndices::new(z.shape().to_vec(), indices, QuantizerKind::Tcq, cfg.delta)
}
