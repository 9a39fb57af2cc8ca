//! Built-in oracle checks run by `latq selftest`: trellis search against
//! exhaustive enumeration, range-coder round trips and coded length, and
//! finite-difference gradient checks of every layer type and the training
//! losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{quantized_loss, surrogate_loss_drawn, surrogate_loss_fixed, CodecModel, ModelConfig, RateTerm, Surrogate, HYPDEC_MEAN};
use crate::entropy::{GaussianParams, HyperMode, PmfTable, PROB_TOTAL};
use crate::error::Result;
use crate::nn::{gradcheck, Activation, Mat, Mlp, NetSpec, ParamSet, Tape};
use crate::tensor::QuantizerKind;
use crate::rangecoder::{ideal_bits, rc_decode, rc_encode};
use crate::trellis::{brute_force_run, viterbi_run, TrellisConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Check { name: name.into(), passed, detail }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelftestConfig {
    pub trellis_instances: usize,
    pub coder_streams: usize,
    pub coder_symbols: usize,
    pub seed: u64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig { trellis_instances: 200, coder_streams: 10_000, coder_symbols: 100_000, seed: 0 }
    }
}

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Random trellis instances: `N` in `2..=10`, means in `[-2, 2]`,
/// deviations in `[0.2, 2]`, rate weights in `{0, 0.1, 0.3, 1}·Δ²`.
pub fn random_trellis_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<GaussianParams>, TrellisConfig) {
    let n = rng.random_range(2..=10);
    let delta = rng.random_range(0.5..1.5);
    let params: Vec<GaussianParams> = (0..n)
        .map(|_| GaussianParams { mu: rng.random_range(-2.0..2.0), sigma: rng.random_range(0.2..2.0) })
        .collect();
    let z = params.iter().map(|p| p.mu + rng.random_range(-2.5..2.5) * p.sigma).collect();
    let w = [0.0, 0.1, 0.3, 1.0][rng.random_range(0..4)];
    (z, params, TrellisConfig::new(delta).with_lambda_q(w * delta * delta))
}

pub fn trellis_optimality(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (z, params, cfg) = random_trellis_instance(&mut rng);
        let v = viterbi_run(&z, &params, &cfg)?;
        let b = brute_force_run(&z, &params, &cfg)?;
        worst = worst.max((v.cost - b.cost).abs());
    }
    Ok(Check::new("trellis optimality", worst <= 1e-9, format!("{instances} instances, max cost gap {worst:.2e}")))
}

/// A random table over a random support of up to 40 symbols.
pub fn random_table(rng: &mut ChaCha8Rng) -> Result<PmfTable> {
    let n = rng.random_range(1..=40);
    let min = rng.random_range(-20..=0);
    let masses: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    PmfTable::from_masses(min, &masses, 1.0 / PROB_TOTAL as f64)
}

/// Draws a symbol from the table's fixed-point distribution.
pub fn sample(table: &PmfTable, rng: &mut ChaCha8Rng) -> i32 {
    let target = rng.random_range(0..PROB_TOTAL);
    table.value(table.lookup(target))
}

pub fn coder_round_trip(streams: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<PmfTable> = (0..16).map(|_| random_table(&mut rng)).collect::<Result<_>>()?;
    let mut failures = 0;
    for _ in 0..streams {
        let len = rng.random_range(0..200);
        let picks: Vec<&PmfTable> = (0..len).map(|_| &tables[rng.random_range(0..tables.len())]).collect();
        let symbols: Vec<i32> = picks
            .iter()
            .map(|t| if rng.random_bool(0.1) { rng.random_range(t.min()..=t.max()) } else { sample(t, &mut rng) })
            .collect();
        let bytes = rc_encode(&symbols, &picks)?;
        if rc_decode(&bytes, &picks)? != symbols {
            failures += 1;
        }
    }
    Ok(Check::new("coder round trip", failures == 0, format!("{streams} streams, {failures} mismatches")))
}

pub fn coder_efficiency(symbols: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<PmfTable> = (0..8).map(|_| random_table(&mut rng)).collect::<Result<_>>()?;
    let picks: Vec<&PmfTable> = (0..symbols).map(|_| &tables[rng.random_range(0..tables.len())]).collect();
    let values: Vec<i32> = picks.iter().map(|t| sample(t, &mut rng)).collect();
    let bytes = rc_encode(&values, &picks)?;
    let ideal = ideal_bits(&values, &picks) / 8.0;
    let bound = ideal * 1.001 + 32.0;
    let ok = (bytes.len() as f64) <= bound && rc_decode(&bytes, &picks)? == values;
    Ok(Check::new(
        "coder length",
        ok,
        format!("{symbols} symbols, {} bytes, ideal {ideal:.1}, bound {bound:.1}", bytes.len()),
    ))
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect() }
}

fn all_indices(p: &ParamSet) -> Vec<usize> {
    (0..p.len()).collect()
}

/// Finite-difference check of a two-layer net ending in each activation.
pub fn layer_gradchecks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for last in [Activation::Linear, Activation::Relu, Activation::Softplus] {
        let mut ps = ParamSet::new();
        let net = Mlp::build(&mut ps, "n", NetSpec::chain(&[5, 7, 3], last, rng.random())?)?;
        for v in ps.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let x = random_mat(&mut rng, 4, 5, 1.0);
        let target = random_mat(&mut rng, 4, 3, 1.0);
        let loss = |p: &ParamSet| -> Result<(f64, Vec<f64>)> {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = net.forward(&mut t, p, xv)?;
            let tv = t.constant(target.clone());
            let d = t.sub(y, tv)?;
            let l = t.sum_squares(d);
            Ok((t.scalar(l), t.backward(l, p)?))
        };
        let g = loss(&ps)?.1;
        let r = gradcheck(&ps, &g, &all_indices(&ps), GRADCHECK_STEP, 1e-6, |p| Ok(loss(p)?.0))?;
        out.push(Check::new(
            format!("gradient {last:?}"),
            r.passed(GRADCHECK_TOL),
            format!("{} entries, {} at kinks, max rel err {:.2e}", r.checked, r.kinks, r.max_rel_err),
        ));
    }

    let mut ps = ParamSet::new();
    let zid = ps.add("z", 3, 4, random_mat(&mut rng, 3, 4, 3.0).data)?;
    let mid = ps.add("mu", 3, 4, random_mat(&mut rng, 3, 4, 1.0).data)?;
    let sid = ps.add("s", 3, 4, random_mat(&mut rng, 3, 4, 1.0).data.iter().map(|v| v.abs() + 0.3).collect())?;
    let yid = ps.add("y", 3, 2, random_mat(&mut rng, 3, 2, 4.0).data)?;
    let lid = ps.add("logits", 2, 11, random_mat(&mut rng, 2, 11, 2.0).data)?;
    let loss = |p: &ParamSet| -> Result<(f64, Vec<f64>)> {
        let mut t = Tape::new();
        let (z, m, s) = (t.param(p, zid), t.param(p, mid), t.param(p, sid));
        let r = t.gauss_bits(z, m, s, 1.0, 1e-9)?;
        let (y, l) = (t.param(p, yid), t.param(p, lid));
        let h = t.hyper_bits(y, l, 5, HyperMode::Noisy, 1e-9)?;
        let (a, b) = (t.sum(r), t.sum(h));
        let tot = t.add(a, b)?;
        Ok((t.scalar(tot), t.backward(tot, p)?))
    };
    let g = loss(&ps)?.1;
    let r = gradcheck(&ps, &g, &all_indices(&ps), GRADCHECK_STEP, 1e-6, |p| Ok(loss(p)?.0))?;
    out.push(Check::new(
        "gradient rate terms",
        r.passed(GRADCHECK_TOL),
        format!("{} entries, {} at kinks, max rel err {:.2e}", r.checked, r.kinks, r.max_rel_err),
    ));
    Ok(out)
}

/// A small model whose parameters are nudged away from their initial values.
pub fn small_model(kind: QuantizerKind, lambda: f64, seed: u64) -> Result<CodecModel> {
    let mut m = CodecModel::new(ModelConfig { kind, lambda, hidden: 8, hyper_hidden: 4, seed, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in m.params.data_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    Ok(m)
}

fn with_params(model: &CodecModel, p: &ParamSet) -> CodecModel {
    let mut m = model.clone();
    m.params = p.clone();
    m
}

/// Random patches in `[0, 1]`.
pub fn random_patches(rng: &mut ChaCha8Rng, rows: usize) -> Mat {
    Mat { rows, cols: crate::codec::PATCH_PIXELS, data: (0..rows * crate::codec::PATCH_PIXELS).map(|_| rng.random()).collect() }
}

/// Gradient of the complete noisy-surrogate loss `(D + λR) / batch`. The
/// perturbations, including the TCQ switch decisions, are drawn once and
/// held fixed while the parameters are perturbed.
pub fn surrogate_gradcheck(surrogate: Surrogate, seed: u64) -> Result<Check> {
    let kind = match surrogate {
        Surrogate::UsqNoise => QuantizerKind::Usq,
        Surrogate::TcqSwitchNoise => QuantizerKind::Tcq,
    };
    let model = small_model(kind, 512.0, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_patches(&mut rng, 4);
    let (value, g, noise) = surrogate_loss_drawn(&model, &x, surrogate, &mut rng)?;
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let r = gradcheck(&model.params, &g, &all_indices(&model.params), GRADCHECK_STEP, 1e-6 * scale.max(1.0), |p| {
        Ok(surrogate_loss_fixed(&with_params(&model, p), &x, &noise)?.0)
    })?;
    Ok(Check::new(
        format!("gradient surrogate loss {surrogate:?}"),
        r.passed(GRADCHECK_TOL),
        format!("loss {value:.3}, {} entries, {} at kinks, max rel err {:.2e}", r.checked, r.kinks, r.max_rel_err),
    ))
}

/// With the rate weight at zero the hypercoder retrain loss is pure
/// distortion, which must not reach the mean head.
pub fn mean_head_isolation(seed: u64) -> Result<Check> {
    let model = small_model(QuantizerKind::Usq, 0.0, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_patches(&mut rng, 6);
    let z = model.analysis(&x)?;
    let mut worst = 0.0f64;
    let mut others = 0.0f64;
    let mask = model.params.mask(&[HYPDEC_MEAN]);
    for term in [RateTerm::Continuous, RateTerm::DiscreteIndex] {
        let (_, g) = quantized_loss(&model, &x, &z, term, &mut rng)?;
        for (v, m) in g.iter().zip(&mask) {
            if *m {
                worst = worst.max(v.abs());
            } else {
                others = others.max(v.abs());
            }
        }
    }
    Ok(Check::new(
        "mean head distortion gradient",
        worst == 0.0 && others > 0.0,
        format!("max |grad| {worst:e} on the mean head, {others:.3e} elsewhere"),
    ))
}

pub fn run(cfg: &SelftestConfig) -> Result<Vec<Check>> {
    let mut out = vec![
        trellis_optimality(cfg.trellis_instances, cfg.seed)?,
        coder_round_trip(cfg.coder_streams, cfg.seed.wrapping_add(1))?,
        coder_efficiency(cfg.coder_symbols, cfg.seed.wrapping_add(2))?,
    ];
    out.extend(layer_gradchecks(cfg.seed.wrapping_add(3))?);
    out.push(surrogate_gradcheck(Surrogate::UsqNoise, cfg.seed.wrapping_add(4))?);
    out.push(surrogate_gradcheck(Surrogate::TcqSwitchNoise, cfg.seed.wrapping_add(5))?);
    out.push(mean_head_isolation(cfg.seed.wrapping_add(6))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let cfg = SelftestConfig { trellis_instances: 30, coder_streams: 300, coder_symbols: 20_000, seed: 3 };
        for c in run(&cfg).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
