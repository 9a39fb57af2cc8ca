//! Desk-scale learned codec on 8x8 patches: transforms, hyperprior, the four
//! training procedures and the image encoder/decoder.
//!
//! Every patch is coded independently. An `H x W` image gives latents laid
//! out as `[32, H/8, W/8]` and hyperpriors as `[8, H/8, W/8]`, both scanned
//! channel by channel.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitstream::Bitstream;
use crate::entropy::{
    tcq_index_pmf, usq_index_pmf, EntropyConfig, GaussianParams, HyperMode, PmfTable, StaticHyperPmf,
    DEFAULT_P_MIN, DEFAULT_SIGMA_MIN, DEFAULT_Y_MAX,
};
use crate::error::{Error, Result};
use crate::manifest::{sha256_hex, Manifest};
use crate::nn::{Activation, Adam, LrSchedule, Mat, Mlp, NetSpec, ParamId, ParamSet, Tape, Var};
use crate::par;
use crate::quantizer::{round_half_away, tcq_level, usq_dequantize, usq_quantize, TcqStateMachine, TCQ_INITIAL_STATE};
use crate::rangecoder::{RangeDecoder, RangeEncoder};
use crate::tensor::{Dtype, ImagePatch, LatentTensor, QuantIndices, QuantizerKind, DEFAULT_Q_MAX};
use crate::trellis::{tcq_encode_viterbi, TrellisConfig, DEFAULT_LAMBDA_Q_REL};

pub const PATCH: usize = 8;
pub const PATCH_PIXELS: usize = PATCH * PATCH;
pub const LATENT_CHANNELS: usize = 32;
pub const HYPER_CHANNELS: usize = 8;
pub const LAMBDAS: [f64; 5] = [128.0, 256.0, 512.0, 1024.0, 2048.0];

pub const ENC: &str = "enc.";
pub const DEC: &str = "dec.";
pub const HYPENC: &str = "hypenc.";
pub const HYPDEC_MEAN: &str = "hypdec_mean.";
pub const HYPDEC_DEV: &str = "hypdec_dev.";
pub const HPMF: &str = "hpmf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: QuantizerKind,
    pub lambda: f64,
    pub delta: f64,
    pub hidden: usize,
    pub hyper_hidden: usize,
    pub y_max: i32,
    pub q_max: i32,
    pub p_min: f64,
    pub sigma_min: f64,
    /// Network input is `(x - 0.5) * input_gain`; output is divided by it.
    pub input_gain: f64,
    /// Distortion is `distortion_scale * sum (x - x_hat)^2` on `[0, 1]` samples.
    pub distortion_scale: f64,
    /// Trellis rate weight as a multiple of `delta^2`.
    pub lambda_q_rel: f64,
    pub candidates_per_state: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: QuantizerKind::Usq,
            lambda: 512.0,
            delta: 1.0,
            hidden: 64,
            hyper_hidden: 16,
            y_max: DEFAULT_Y_MAX,
            q_max: DEFAULT_Q_MAX,
            p_min: DEFAULT_P_MIN,
            sigma_min: DEFAULT_SIGMA_MIN,
            input_gain: 8.0,
            distortion_scale: 255.0 * 255.0,
            lambda_q_rel: DEFAULT_LAMBDA_Q_REL,
            candidates_per_state: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.delta > 0.0
            && self.delta.is_finite()
            && (self.delta as f32) as f64 == self.delta
            && self.hidden > 0
            && self.hyper_hidden > 0
            && self.y_max > 0
            && self.q_max > 0
            && self.p_min > 0.0
            && self.p_min < 1e-3
            && self.sigma_min > 0.0
            && self.input_gain > 0.0
            && self.distortion_scale > 0.0
            && self.lambda_q_rel >= 0.0
            && self.candidates_per_state > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid model configuration {self:?}")))
        }
    }

    pub fn entropy(&self) -> EntropyConfig {
        EntropyConfig { q_max: self.q_max, p_min: self.p_min, sigma_min: self.sigma_min }
    }

    pub fn trellis(&self) -> TrellisConfig {
        TrellisConfig {
            delta: self.delta,
            lambda_q: self.lambda_q_rel * self.delta * self.delta,
            candidates_per_state: self.candidates_per_state,
            entropy: self.entropy(),
        }
    }

    fn specs(&self) -> Result<[NetSpec; 5]> {
        let s = self.seed;
        Ok([
            NetSpec::chain(&[PATCH_PIXELS, self.hidden, LATENT_CHANNELS], Activation::Linear, s.wrapping_add(1))?,
            NetSpec::chain(&[LATENT_CHANNELS, self.hidden, PATCH_PIXELS], Activation::Linear, s.wrapping_add(2))?,
            NetSpec::chain(&[LATENT_CHANNELS, self.hyper_hidden, HYPER_CHANNELS], Activation::Linear, s.wrapping_add(3))?,
            NetSpec::chain(&[HYPER_CHANNELS, self.hyper_hidden, LATENT_CHANNELS], Activation::Linear, s.wrapping_add(4))?,
            NetSpec::chain(&[HYPER_CHANNELS, self.hyper_hidden, LATENT_CHANNELS], Activation::Softplus, s.wrapping_add(5))?,
        ])
    }
}

/// Encoder, decoder, hyperencoder, the two hyperdecoder heads and the static
/// hyperprior histogram, all sharing one parameter set.
#[derive(Debug, Clone)]
pub struct CodecModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    enc: Mlp,
    dec: Mlp,
    hypenc: Mlp,
    hyp_mean: Mlp,
    hyp_dev: Mlp,
    hpmf: ParamId,
}

impl PartialEq for CodecModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

const PREFIXES: [&str; 5] = ["enc", "dec", "hypenc", "hypdec_mean", "hypdec_dev"];

impl CodecModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let specs = config.specs()?;
        let mut nets = Vec::with_capacity(5);
        for (prefix, spec) in PREFIXES.iter().zip(specs) {
            nets.push(Mlp::build(&mut params, prefix, spec)?);
        }
        let bins = (2 * config.y_max + 1) as usize;
        // start from a discretized Gaussian of width 2 around zero
        let logits: Vec<f64> = (0..HYPER_CHANNELS * bins)
            .map(|i| {
                let k = (i % bins) as f64 - config.y_max as f64;
                -(k * k) / 8.0
            })
            .collect();
        let hpmf = params.add(HPMF, HYPER_CHANNELS, bins, logits)?;
        params.snap_f32();
        let [enc, dec, hypenc, hyp_mean, hyp_dev]: [Mlp; 5] = nets.try_into().expect("five networks");
        Ok(CodecModel { config, params, enc, dec, hypenc, hyp_mean, hyp_dev, hpmf })
    }

    fn attach(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let specs = config.specs()?;
        let mut nets = Vec::with_capacity(5);
        for (prefix, spec) in PREFIXES.iter().zip(specs) {
            nets.push(Mlp::attach(&params, prefix, spec)?);
        }
        let hpmf = params.id(HPMF).ok_or_else(|| Error::Malformed("missing hyperprior logits".into()))?;
        let [enc, dec, hypenc, hyp_mean, hyp_dev]: [Mlp; 5] = nets.try_into().expect("five networks");
        Ok(CodecModel { config, params, enc, dec, hypenc, hyp_mean, hyp_dev, hpmf })
    }

    pub fn kind(&self) -> QuantizerKind {
        self.config.kind
    }

    pub fn hyper_pmf(&self) -> StaticHyperPmf {
        StaticHyperPmf::from_logits(HYPER_CHANNELS, self.config.y_max, self.params.values(self.hpmf).to_vec())
            .expect("logit shape fixed at construction")
    }

    /// SHA-256 of the parameter blob.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.params.to_f32_le())
    }

    /// SHA-256 of the parameter bytes of one weight group.
    pub fn group_hash(&self, prefix: &str) -> String {
        sha256_hex(&self.params.group_bytes(prefix))
    }

    fn input(&self, x: &Mat) -> Mat {
        let g = self.config.input_gain;
        Mat { rows: x.rows, cols: x.cols, data: x.data.iter().map(|v| (v - 0.5) * g).collect() }
    }

    /// Latents (`patches x 32`) of pixel patches (`patches x 64`).
    pub fn analysis(&self, x: &Mat) -> Result<Mat> {
        self.enc.eval(&self.params, &self.input(x))
    }

    pub fn hyper_analysis(&self, z: &Mat) -> Result<Mat> {
        self.hypenc.eval(&self.params, z)
    }

    /// Mean and deviation estimates from hyperprior values.
    pub fn hyper_synthesis(&self, y: &Mat) -> Result<(Mat, Mat)> {
        let mu = self.hyp_mean.eval(&self.params, y)?;
        let mut sigma = self.hyp_dev.eval(&self.params, y)?;
        sigma.data.iter_mut().for_each(|s| *s += self.config.sigma_min);
        Ok((mu, sigma))
    }

    /// Pixel values (unclamped) from latents.
    pub fn synthesis(&self, z_hat: &Mat) -> Result<Mat> {
        let mut out = self.dec.eval(&self.params, z_hat)?;
        let g = self.config.input_gain;
        out.data.iter_mut().for_each(|v| *v = *v / g + 0.5);
        Ok(out)
    }

    fn tape_input(&self, tape: &mut Tape, x: &Mat) -> Var {
        tape.constant(self.input(x))
    }

    fn tape_synthesis(&self, tape: &mut Tape, z_hat: Var) -> Result<Var> {
        let out = self.dec.forward(tape, &self.params, z_hat)?;
        let out = tape.scale(out, 1.0 / self.config.input_gain);
        Ok(tape.add_scalar(out, 0.5))
    }

    fn tape_distortion(&self, tape: &mut Tape, x_hat: Var, x: &Mat) -> Result<Var> {
        let xv = tape.constant(x.clone());
        let d = tape.sub(x_hat, xv)?;
        let d = tape.sum_squares(d);
        Ok(tape.scale(d, self.config.distortion_scale))
    }

    fn tape_hyper(&self, tape: &mut Tape, y_tilde: Var) -> Result<(Var, Var)> {
        let mu = self.hyp_mean.forward(tape, &self.params, y_tilde)?;
        let dev = self.hyp_dev.forward(tape, &self.params, y_tilde)?;
        Ok((mu, tape.add_scalar(dev, self.config.sigma_min)))
    }

    pub fn save(&self, dir: impl AsRef<Path>, extra: Option<&Manifest>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut m = extra.cloned().unwrap_or_else(|| Manifest::new("checkpoint"));
        m.set_section("model", &self.config)?;
        let specs = self.config.specs()?;
        for (p, s) in PREFIXES.iter().zip(&specs) {
            m.set(&format!("net_{p}"), s.to_string());
        }
        m.set("parameter_count", self.params.len() as i64);
        m.set("parameters_sha256", self.fingerprint());
        m.save(dir.join("manifest.toml"))?;
        fs::write(dir.join("params.f32"), self.params.to_f32_le())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Manifest::load(dir.join("manifest.toml"))?;
        let config: ModelConfig = m.section("model")?;
        let mut model = CodecModel::new(config)?;
        let blob = fs::read(dir.join("params.f32"))?;
        model.params.load_f32_le(&blob)?;
        if let Some(expected) = m.get_str("parameters_sha256") {
            if expected != model.fingerprint() {
                return Err(Error::Malformed("parameter blob does not match its manifest digest".into()));
            }
        }
        CodecModel::attach(model.config.clone(), model.params)
    }
}

/// Patches of an image as rows, blocks in raster order.
pub fn image_to_patches(image: &ImagePatch) -> Result<(Mat, usize, usize)> {
    let (w, h) = (image.width(), image.height());
    if w % PATCH != 0 || h % PATCH != 0 || w == 0 || h == 0 {
        return Err(Error::Shape(format!("image {w}x{h} is not a multiple of {PATCH} in both dimensions")));
    }
    let (ph, pw) = (h / PATCH, w / PATCH);
    let mut data = Vec::with_capacity(w * h);
    for py in 0..ph {
        for px in 0..pw {
            data.extend(image.window(px * PATCH, py * PATCH, PATCH));
        }
    }
    Ok((Mat::from_vec(ph * pw, PATCH_PIXELS, data)?, ph, pw))
}

/// Inverse of `image_to_patches`, clamping to `[0, 1]` and rounding to 8 bits.
pub fn patches_to_image(m: &Mat, ph: usize, pw: usize) -> Result<ImagePatch> {
    if m.rows != ph * pw || m.cols != PATCH_PIXELS {
        return Err(Error::Shape(format!("{}x{} patches for a {ph}x{pw} grid", m.rows, m.cols)));
    }
    let (w, h) = (pw * PATCH, ph * PATCH);
    let mut px = vec![0u8; w * h];
    for (p, row) in m.data.chunks_exact(PATCH_PIXELS).enumerate() {
        let (by, bx) = (p / pw, p % pw);
        for (i, v) in row.iter().enumerate() {
            let (y, x) = (by * PATCH + i / PATCH, bx * PATCH + i % PATCH);
            px[y * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    ImagePatch::from_bytes(w, h, &px)
}

/// `patches x channels` to channel-major `[channels, ph, pw]` order.
fn to_channel_major(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.data.len()];
    for p in 0..m.rows {
        for c in 0..m.cols {
            out[c * m.rows + p] = m.data[p * m.cols + c];
        }
    }
    out
}

fn from_channel_major(v: &[f64], patches: usize, channels: usize) -> Mat {
    let mut data = vec![0.0; v.len()];
    for c in 0..channels {
        for p in 0..patches {
            data[p * channels + c] = v[c * patches + p];
        }
    }
    Mat { rows: patches, cols: channels, data }
}

/// Quantized latents of one image with the tables used to code them.
struct Quantized {
    indices: Vec<i32>,
    z_hat: Vec<f64>,
    tables: Vec<PmfTable>,
}

fn gaussian_params(mu: &Mat, sigma: &Mat) -> Vec<GaussianParams> {
    to_channel_major(mu)
        .into_iter()
        .zip(to_channel_major(sigma))
        .map(|(mu, sigma)| GaussianParams { mu, sigma })
        .collect()
}

fn quantize_latents(
    cfg: &ModelConfig,
    kind: QuantizerKind,
    z: &Mat,
    mu: &Mat,
    sigma: &Mat,
    ph: usize,
    pw: usize,
) -> Result<Quantized> {
    let params = gaussian_params(mu, sigma);
    let zc = to_channel_major(z);
    let ent = cfg.entropy();
    let p = ph * pw;
    match kind {
        QuantizerKind::Usq => {
            let indices: Vec<i32> = zc.iter().zip(&params).map(|(&v, g)| usq_quantize(v, g.mu, cfg.delta, cfg.q_max)).collect();
            let z_hat = indices.iter().zip(&params).map(|(&q, g)| usq_dequantize(q, g.mu, cfg.delta)).collect();
            let tables = params.iter().map(|&g| usq_index_pmf(g, cfg.delta, &ent)).collect::<Result<_>>()?;
            Ok(Quantized { indices, z_hat, tables })
        }
        QuantizerKind::Tcq => {
            let zt = LatentTensor::new(vec![LATENT_CHANNELS, ph, pw], zc)?;
            let qi = tcq_encode_viterbi(&zt, &params, &cfg.trellis())?;
            let indices = qi.indices().to_vec();
            let mut z_hat = Vec::with_capacity(indices.len());
            let mut tables = Vec::with_capacity(indices.len());
            for c in 0..LATENT_CHANNELS {
                let mut s = TCQ_INITIAL_STATE;
                for i in c * p..(c + 1) * p {
                    let quant = TcqStateMachine::quantizer(s);
                    z_hat.push(tcq_level(indices[i], quant, cfg.delta));
                    tables.push(tcq_index_pmf(params[i], cfg.delta, quant, &ent)?);
                    s = TcqStateMachine::next(s, indices[i]);
                }
            }
            Ok(Quantized { indices, z_hat, tables })
        }
    }
}

/// Forward analysis shared by the encoder and pool generation.
struct Analysis {
    ph: usize,
    pw: usize,
    z: Mat,
    /// Rounded hyperprior, `patches x 8`.
    y_hat: Mat,
    mu: Mat,
    sigma: Mat,
}

fn analyse(model: &CodecModel, image: &ImagePatch) -> Result<Analysis> {
    let (x, ph, pw) = image_to_patches(image)?;
    let z = model.analysis(&x)?;
    let y = model.hyper_analysis(&z)?;
    let ym = model.config.y_max as f64;
    let y_hat = Mat { rows: y.rows, cols: y.cols, data: y.data.iter().map(|&v| round_half_away(v).clamp(-ym, ym)).collect() };
    let (mu, sigma) = model.hyper_synthesis(&y_hat)?;
    Ok(Analysis { ph, pw, z, y_hat, mu, sigma })
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub recon: ImagePatch,
    pub z_hat: LatentTensor,
    pub indices: QuantIndices,
    pub hyper: QuantIndices,
    /// Ideal code length under the coder's fixed-point tables.
    pub ideal_bits: f64,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: ImagePatch,
    pub z_hat: LatentTensor,
}

fn hyper_tables(model: &CodecModel) -> Result<Vec<PmfTable>> {
    let pmf = model.hyper_pmf();
    (0..HYPER_CHANNELS).map(|c| pmf.pmf_table(c, model.config.p_min)).collect()
}

pub fn encode_image(model: &CodecModel, image: &ImagePatch) -> Result<Encoded> {
    let cfg = &model.config;
    let a = analyse(model, image)?;
    let p = a.ph * a.pw;
    let htables = hyper_tables(model)?;
    let y_sym: Vec<i32> = to_channel_major(&a.y_hat).iter().map(|&v| v as i32).collect();
    let mut henc = RangeEncoder::new();
    let mut ideal = 0.0;
    for (i, &s) in y_sym.iter().enumerate() {
        let t = &htables[i / p];
        henc.encode(s, t)?;
        ideal -= t.fixed_prob(s).log2();
    }
    let q = quantize_latents(cfg, cfg.kind, &a.z, &a.mu, &a.sigma, a.ph, a.pw)?;
    let mut lenc = RangeEncoder::new();
    for (&s, t) in q.indices.iter().zip(&q.tables) {
        lenc.encode(s, t)?;
        ideal -= t.fixed_prob(s).log2();
    }
    let latent_shape = vec![LATENT_CHANNELS, a.ph, a.pw];
    let hyper_shape = vec![HYPER_CHANNELS, a.ph, a.pw];
    let bs = Bitstream {
        kind: cfg.kind,
        delta: cfg.delta as f32,
        latent_shape: latent_shape.clone(),
        hyper_shape: hyper_shape.clone(),
        hyper_payload: henc.finish(),
        latent_payload: lenc.finish(),
    };
    let x_hat = model.synthesis(&from_channel_major(&q.z_hat, p, LATENT_CHANNELS))?;
    Ok(Encoded {
        bytes: bs.to_bytes()?,
        recon: patches_to_image(&x_hat, a.ph, a.pw)?,
        z_hat: LatentTensor::new(latent_shape.clone(), q.z_hat)?,
        indices: QuantIndices::new(latent_shape, q.indices, cfg.kind, cfg.delta)?,
        hyper: QuantIndices::new(hyper_shape, y_sym, QuantizerKind::Usq, 1.0)?,
        ideal_bits: ideal,
    })
}

pub fn decode_image(model: &CodecModel, bytes: &[u8]) -> Result<Decoded> {
    let cfg = &model.config;
    let bs = Bitstream::parse(bytes)?;
    if bs.kind != cfg.kind || bs.delta as f64 != cfg.delta {
        return Err(Error::InvalidArgument(format!(
            "bitstream is {} with step {}, model is {} with step {}",
            bs.kind.name(),
            bs.delta,
            cfg.kind.name(),
            cfg.delta
        )));
    }
    let [lc, ph, pw] = bs.latent_shape[..] else {
        return Err(Error::Malformed(format!("latent shape {:?}", bs.latent_shape)));
    };
    if lc != LATENT_CHANNELS || bs.hyper_shape != [HYPER_CHANNELS, ph, pw] || ph == 0 || pw == 0 {
        return Err(Error::Malformed(format!("shapes {:?} / {:?}", bs.latent_shape, bs.hyper_shape)));
    }
    let p = ph.checked_mul(pw).filter(|&p| p <= 1 << 24).ok_or_else(|| Error::TooLarge("latent grid".into()))?;
    let htables = hyper_tables(model)?;
    let mut hdec = RangeDecoder::new(&bs.hyper_payload);
    let mut y = Vec::with_capacity(HYPER_CHANNELS * p);
    for i in 0..HYPER_CHANNELS * p {
        y.push(hdec.decode(&htables[i / p])? as f64);
    }
    let y_hat = from_channel_major(&y, p, HYPER_CHANNELS);
    let (mu, sigma) = model.hyper_synthesis(&y_hat)?;
    let params = gaussian_params(&mu, &sigma);
    let ent = cfg.entropy();
    let mut ldec = RangeDecoder::new(&bs.latent_payload);
    let mut z_hat = Vec::with_capacity(LATENT_CHANNELS * p);
    for c in 0..LATENT_CHANNELS {
        let mut s = TCQ_INITIAL_STATE;
        for g in &params[c * p..(c + 1) * p] {
            match cfg.kind {
                QuantizerKind::Usq => {
                    let q = ldec.decode(&usq_index_pmf(*g, cfg.delta, &ent)?)?;
                    z_hat.push(usq_dequantize(q, g.mu, cfg.delta));
                }
                QuantizerKind::Tcq => {
                    let quant = TcqStateMachine::quantizer(s);
                    let q = ldec.decode(&tcq_index_pmf(*g, cfg.delta, quant, &ent)?)?;
                    z_hat.push(tcq_level(q, quant, cfg.delta));
                    s = TcqStateMachine::next(s, q);
                }
            }
        }
    }
    let x_hat = model.synthesis(&from_channel_major(&z_hat, p, LATENT_CHANNELS))?;
    Ok(Decoded {
        image: patches_to_image(&x_hat, ph, pw)?,
        z_hat: LatentTensor::new(vec![LATENT_CHANNELS, ph, pw], z_hat)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub bytes: usize,
    pub bpp: f64,
    pub psnr_db: f64,
}

pub fn evaluate_image(model: &CodecModel, image: &ImagePatch) -> Result<ImageEval> {
    let e = encode_image(model, image)?;
    Ok(ImageEval {
        bytes: e.bytes.len(),
        bpp: crate::metrics::bits_per_pixel(e.bytes.len(), image.pixel_count())?,
        psnr_db: crate::metrics::psnr(image, &e.recon)?,
    })
}

/// Evaluates every image, in parallel, keeping input order.
pub fn evaluate(model: &CodecModel, images: &[ImagePatch]) -> Result<Vec<ImageEval>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    par::map(images, |img| evaluate_image(model, img)).into_iter().collect()
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    /// `z + U(-Δ/2, Δ/2)`.
    UsqNoise,
    /// Two-branch switch between `z + 2Δu` and its neighbour one step toward zero.
    TcqSwitchNoise,
}

impl Surrogate {
    pub fn for_kind(kind: QuantizerKind) -> Self {
        match kind {
            QuantizerKind::Usq => Surrogate::UsqNoise,
            QuantizerKind::Tcq => Surrogate::TcqSwitchNoise,
        }
    }
}

/// Argument of the latent rate term when retraining the hypercoder on truly
/// quantized latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateTerm {
    /// Interval of width Δ around the dequantized latent, with the mean
    /// entering only through the distribution.
    Continuous,
    /// Mass of the quantization cell of the index, as coded.
    DiscreteIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Upper bound on epochs.
    pub epochs: usize,
    /// Batches per epoch for random-crop training; 0 means one pass over all patches.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub threshold: f64,
    /// Training stops after this many learning-rate decays.
    pub max_decays: u32,
    pub seed: u64,
    /// Share of training images held back for best-checkpoint selection.
    pub validation_fraction: f64,
    pub rate_term: RateTerm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            epochs: 150,
            batches_per_epoch: 40,
            batch_size: 32,
            lr: 1e-3,
            patience: 5,
            threshold: 1e-3,
            max_decays: 25,
            seed: 0,
            validation_fraction: 0.25,
            rate_term: RateTerm::Continuous,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig { epochs: 60, batches_per_epoch: 0, lr: 1e-4, ..TrainConfig::pretrain() }
    }

    fn validate(&self) -> Result<()> {
        // negated so that NaN is rejected
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let bad_lr = !(self.lr >= 0.0);
        if self.batch_size == 0 || bad_lr || !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: u64,
    pub decays: u32,
    pub final_lr: f64,
    pub epoch_losses: Vec<f64>,
    /// Validation objective of the returned parameters, when selection ran.
    pub best_validation: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat { rows, cols, data: (0..rows * cols).map(|_| rng.random::<f64>() - 0.5).collect() }
}

/// Minibatch step: sample indices in, loss and flat gradient out.
type StepFn<'a> = dyn FnMut(&CodecModel, &[usize], &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> + 'a;
type Validator<'a> = Option<&'a dyn Fn(&CodecModel) -> Result<f64>>;

/// The generic loop: Adam on the masked parameters, loss-saturation decay,
/// optional best-on-validation selection (epoch 0 is the starting point).
fn train_loop(
    model: &mut CodecModel,
    cfg: &TrainConfig,
    mask: &[bool],
    epoch_batches: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    step: &mut StepFn<'_>,
    validate: Validator<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = Adam::new(model.params.len());
    let mut sched = LrSchedule::new(cfg.lr);
    sched.patience = cfg.patience;
    sched.threshold = cfg.threshold;
    let mut best = match validate {
        Some(v) => Some((v(model)?, 0usize, model.params.clone())),
        None => None,
    };
    let mut losses = Vec::new();
    let mut epochs = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = epoch_batches(&mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grads) = step(model, batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss diverged at epoch {epoch}")));
            }
            total += loss;
            adam.step(&mut model.params, &grads, sched.lr(), Some(mask))?;
        }
        let mean = total / batches.len().max(1) as f64;
        losses.push(mean);
        epochs = epoch + 1;
        if let (Some(v), Some(b)) = (validate, &mut best) {
            let score = v(model)?;
            if score < b.0 {
                *b = (score, epochs, model.params.clone());
            }
        }
        log::debug!("epoch {epoch}: loss {mean:.4} lr {:.3e}", sched.lr());
        if sched.observe(mean) && sched.decays() > cfg.max_decays {
            break;
        }
    }
    let (best_validation, best_epoch) = match best {
        Some((score, epoch, params)) => {
            model.params = params;
            (Some(score), Some(epoch))
        }
        None => (None, None),
    };
    Ok(TrainReport {
        epochs,
        steps: adam.steps(),
        decays: sched.decays(),
        final_lr: sched.lr(),
        epoch_losses: losses,
        best_validation,
        best_epoch,
    })
}

/// Shuffled minibatches over `0..n`; at most `limit` batches when nonzero.
fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize, limit: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(|c| c.to_vec()).collect();
    if limit > 0 {
        out.truncate(limit);
    }
    out
}

fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    let mut data = Vec::with_capacity(rows.len() * m.cols);
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Mat { rows: rows.len(), cols: m.cols, data }
}

fn stack(mats: &[Mat]) -> Mat {
    let cols = mats.first().map_or(0, |m| m.cols);
    let mut data = Vec::new();
    for m in mats {
        data.extend_from_slice(&m.data);
    }
    Mat { rows: data.len() / cols.max(1), cols, data }
}

/// Splits `n` items into leading training and trailing validation counts.
fn split_counts(n: usize, fraction: f64) -> (usize, usize) {
    if n < 2 || fraction <= 0.0 {
        return (n, 0);
    }
    let val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    (n - val, val)
}

/// The TCQ training perturbation for one latent given `u ~ U(-1/2, 1/2)`:
/// `z0 = z + 2Δu`, `z1 = z0 - sgn(z0)Δ`, whichever lies closer to `z`.
pub fn tcq_switch(z: f64, u: f64, delta: f64) -> f64 {
    let z0 = z + 2.0 * delta * u;
    let z1 = z0 - z0.signum() * delta * if z0 == 0.0 { 0.0 } else { 1.0 };
    if (z - z1).abs() < (z - z0).abs() {
        z1
    } else {
        z0
    }
}

fn latent_offsets(z: &Mat, surrogate: Surrogate, delta: f64, rng: &mut ChaCha8Rng) -> Mat {
    let data = z
        .data
        .iter()
        .map(|&v| {
            let u = rng.random::<f64>() - 0.5;
            match surrogate {
                Surrogate::UsqNoise => u * delta,
                Surrogate::TcqSwitchNoise => tcq_switch(v, u, delta) - v,
            }
        })
        .collect();
    Mat { rows: z.rows, cols: z.cols, data }
}

/// One draw of the training perturbations: hyperprior noise and latent offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateNoise {
    pub hyper: Mat,
    pub latent: Mat,
}

enum Noise<'a> {
    Draw(Surrogate, &'a mut ChaCha8Rng),
    Fixed(&'a SurrogateNoise),
}

/// Noisy-surrogate loss `(D + λR) / batch` and its gradient.
pub fn surrogate_loss(model: &CodecModel, x: &Mat, surrogate: Surrogate, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
    let (loss, grads, _) = surrogate_loss_drawn(model, x, surrogate, rng)?;
    Ok((loss, grads))
}

/// As [`surrogate_loss`], also returning the perturbations that were drawn.
pub fn surrogate_loss_drawn(
    model: &CodecModel,
    x: &Mat,
    surrogate: Surrogate,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>, SurrogateNoise)> {
    let mut t = Tape::new();
    let (loss, noise) = surrogate_graph(model, &mut t, x, Noise::Draw(surrogate, rng))?;
    Ok((t.scalar(loss), t.backward(loss, &model.params)?, noise))
}

/// The surrogate loss under given perturbations. With the switch decisions
/// held fixed this is smooth apart from activation kinks.
pub fn surrogate_loss_fixed(model: &CodecModel, x: &Mat, noise: &SurrogateNoise) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new();
    let (loss, _) = surrogate_graph(model, &mut t, x, Noise::Fixed(noise))?;
    Ok((t.scalar(loss), t.backward(loss, &model.params)?))
}

fn surrogate_graph(model: &CodecModel, t: &mut Tape, x: &Mat, noise: Noise<'_>) -> Result<(Var, SurrogateNoise)> {
    let cfg = &model.config;
    let b = x.rows;
    let xin = model.tape_input(t, x);
    let z = model.enc.forward(t, &model.params, xin)?;
    let y = model.hypenc.forward(t, &model.params, z)?;
    let drawn = match noise {
        Noise::Draw(surrogate, rng) => {
            let hyper = uniform_mat(rng, b, HYPER_CHANNELS);
            let latent = latent_offsets(t.value(z), surrogate, cfg.delta, rng);
            SurrogateNoise { hyper, latent }
        }
        Noise::Fixed(n) => n.clone(),
    };
    let yt = t.shift(y, &drawn.hyper)?;
    let (mu, sigma) = model.tape_hyper(t, yt)?;
    let zt = t.shift(z, &drawn.latent)?;
    let xh = model.tape_synthesis(t, zt)?;
    let d = model.tape_distortion(t, xh, x)?;
    let rz = t.gauss_bits(zt, mu, sigma, cfg.delta, cfg.p_min)?;
    let rz = t.sum(rz);
    let logits = t.param(&model.params, model.hpmf);
    let ry = t.hyper_bits(yt, logits, cfg.y_max, HyperMode::Noisy, cfg.p_min)?;
    let ry = t.sum(ry);
    let r = t.add(rz, ry)?;
    let r = t.scale(r, cfg.lambda);
    let loss = t.add(d, r)?;
    Ok((t.scale(loss, 1.0 / b as f64), drawn))
}

/// Random 8x8 crops, addressed by a flat index over all positions.
struct CropIndex<'a> {
    images: &'a [ImagePatch],
    starts: Vec<usize>,
    total: usize,
}

impl<'a> CropIndex<'a> {
    fn new(images: &'a [ImagePatch]) -> Result<Self> {
        let mut starts = Vec::with_capacity(images.len());
        let mut total = 0;
        for img in images {
            if img.width() < PATCH || img.height() < PATCH {
                return Err(Error::Shape(format!("image {}x{} smaller than a patch", img.width(), img.height())));
            }
            starts.push(total);
            total += (img.width() - PATCH + 1) * (img.height() - PATCH + 1);
        }
        if total == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        Ok(CropIndex { images, starts, total })
    }

    fn patches(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * PATCH_PIXELS);
        for &i in idx {
            let k = self.starts.partition_point(|&s| s <= i) - 1;
            let img = &self.images[k];
            let cols = img.width() - PATCH + 1;
            let off = i - self.starts[k];
            data.extend(img.window(off % cols, off / cols, PATCH));
        }
        Mat { rows: idx.len(), cols: PATCH_PIXELS, data }
    }
}

/// End-to-end training from a fresh model with a quantization surrogate.
pub fn pretrain(config: ModelConfig, images: &[ImagePatch], surrogate: Surrogate, tcfg: &TrainConfig) -> Result<(CodecModel, TrainReport)> {
    let mut model = CodecModel::new(config)?;
    let crops = CropIndex::new(images)?;
    let mask = vec![true; model.params.len()];
    let (bs, nb) = (tcfg.batch_size, tcfg.batches_per_epoch.max(1));
    let mut batches = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..nb).map(|_| (0..bs).map(|_| rng.random_range(0..crops.total)).collect()).collect()
    };
    let mut step = |m: &CodecModel, idx: &[usize], rng: &mut ChaCha8Rng| surrogate_loss(m, &crops.patches(idx), surrogate, rng);
    let report = train_loop(&mut model, tcfg, &mask, &mut batches, &mut step, None)?;
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// latent pool

pub const POOL_MAGIC: &[u8; 4] = b"LPOL";
pub const POOL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub x: ImagePatch,
    pub z_hat: LatentTensor,
}

/// Truly quantized latents of a dataset under a frozen anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPool {
    pub kind: QuantizerKind,
    /// Fingerprint of the anchor that produced the records.
    pub anchor: String,
    pub records: Vec<PoolRecord>,
}

pub fn dump_latent_pool(anchor: &CodecModel, images: &[ImagePatch], kind: QuantizerKind) -> Result<LatentPool> {
    let records = par::map(images, |img| -> Result<PoolRecord> {
        let a = analyse(anchor, img)?;
        let q = quantize_latents(&anchor.config, kind, &a.z, &a.mu, &a.sigma, a.ph, a.pw)?;
        Ok(PoolRecord { x: img.clone(), z_hat: LatentTensor::new(vec![LATENT_CHANNELS, a.ph, a.pw], q.z_hat)? })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(LatentPool { kind, anchor: anchor.fingerprint(), records })
}

impl LatentPool {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(POOL_MAGIC)?;
        w.write_all(&[POOL_VERSION, self.kind.code()])?;
        let digest = hex::decode(&self.anchor).map_err(|_| Error::Malformed("anchor fingerprint".into()))?;
        if digest.len() != 32 {
            return Err(Error::Malformed("anchor fingerprint".into()));
        }
        w.write_all(&digest)?;
        let n = u32::try_from(self.records.len()).map_err(|_| Error::TooLarge("pool".into()))?;
        w.write_all(&n.to_le_bytes())?;
        for r in &self.records {
            let x = LatentTensor::new(vec![r.x.height(), r.x.width()], r.x.samples().to_vec())?;
            x.write_to(w, Dtype::F64)?;
            r.z_hat.write_to(w, Dtype::F64)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 4 + 2 + 32 + 4];
        r.read_exact(&mut head).map_err(|_| Error::Truncated("pool header".into()))?;
        if &head[..4] != POOL_MAGIC {
            return Err(Error::Malformed("not a latent pool".into()));
        }
        if head[4] != POOL_VERSION {
            return Err(Error::UnsupportedFormat(format!("pool version {}", head[4])));
        }
        let kind = QuantizerKind::from_code(head[5])?;
        let anchor = hex::encode(&head[6..38]);
        let n = u32::from_le_bytes([head[38], head[39], head[40], head[41]]) as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let x = LatentTensor::read_from(r)?;
            let [h, w] = x.shape()[..] else {
                return Err(Error::Malformed(format!("pool image shape {:?}", x.shape())));
            };
            let x = ImagePatch::new(w, h, x.into_data())?;
            let z_hat = LatentTensor::read_from(r)?;
            records.push(PoolRecord { x, z_hat });
        }
        Ok(LatentPool { kind, anchor, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut cur = std::io::Cursor::new(bytes.as_slice());
        let pool = Self::read_from(&mut cur)?;
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Malformed("trailing bytes after pool".into()));
        }
        Ok(pool)
    }

    /// Patch rows of inputs and latents for the records in `range`.
    fn rows(&self, range: std::ops::Range<usize>) -> Result<(Mat, Mat)> {
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for r in &self.records[range] {
            let (x, ph, pw) = image_to_patches(&r.x)?;
            if r.z_hat.shape() != [LATENT_CHANNELS, ph, pw] {
                return Err(Error::Shape(format!("pool latent {:?} for a {ph}x{pw} grid", r.z_hat.shape())));
            }
            xs.push(x);
            zs.push(from_channel_major(r.z_hat.data(), ph * pw, LATENT_CHANNELS));
        }
        Ok((stack(&xs), stack(&zs)))
    }
}

// ---------------------------------------------------------------------------
// finetuning

fn distortion_only(model: &CodecModel, x: &Mat, z_hat: &Mat) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new();
    let zc = t.constant(z_hat.clone());
    let xh = model.tape_synthesis(&mut t, zc)?;
    let d = model.tape_distortion(&mut t, xh, x)?;
    let loss = t.scale(d, 1.0 / x.rows as f64);
    Ok((t.scalar(loss), t.backward(loss, &model.params)?))
}

fn mean_distortion(model: &CodecModel, x: &Mat, z_hat: &Mat) -> Result<f64> {
    let xh = model.synthesis(z_hat)?;
    let se: f64 = xh.data.iter().zip(&x.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(model.config.distortion_scale * se / x.rows.max(1) as f64)
}

/// Retrains the decoder alone on pooled `(x, ẑ)` pairs. The trailing share
/// of records picks the best epoch, starting from the anchor itself.
pub fn finetune_decoder(anchor: &CodecModel, pool: &LatentPool, tcfg: &TrainConfig) -> Result<(CodecModel, TrainReport)> {
    if pool.anchor != anchor.fingerprint() {
        return Err(Error::InvalidArgument("latent pool was generated by a different model".into()));
    }
    if pool.records.is_empty() {
        return Err(Error::InvalidArgument("empty latent pool".into()));
    }
    let (n_train, _) = split_counts(pool.records.len(), tcfg.validation_fraction);
    let (x, z) = pool.rows(0..n_train)?;
    let (vx, vz) = pool.rows(n_train..pool.records.len())?;
    let mut model = anchor.clone();
    let mask = model.params.mask(&[DEC]);
    let mut batches = |rng: &mut ChaCha8Rng| shuffled_batches(rng, x.rows, tcfg.batch_size, tcfg.batches_per_epoch);
    let mut step = |m: &CodecModel, idx: &[usize], _: &mut ChaCha8Rng| distortion_only(m, &gather_rows(&x, idx), &gather_rows(&z, idx));
    let val = |m: &CodecModel| mean_distortion(m, &vx, &vz);
    let validate: Validator<'_> = if vx.rows > 0 { Some(&val) } else { None };
    let report = train_loop(&mut model, tcfg, &mask, &mut batches, &mut step, validate)?;
    Ok((model, report))
}

fn quantized_graph(model: &CodecModel, t: &mut Tape, x: &Mat, z: &Mat, rate_term: RateTerm, rng: &mut ChaCha8Rng) -> Result<Var> {
    let cfg = &model.config;
    let b = x.rows;
    let zc = t.constant(z.clone());
    let y = model.hypenc.forward(t, &model.params, zc)?;
    let uy = uniform_mat(rng, b, HYPER_CHANNELS);
    let yt = t.shift(y, &uy)?;
    let (mu, sigma) = model.tape_hyper(t, yt)?;
    let offsets = {
        let mv = t.value(mu);
        let data = z
            .data
            .iter()
            .zip(&mv.data)
            .map(|(&zv, &m)| usq_quantize(zv, m, cfg.delta, cfg.q_max) as f64 * cfg.delta)
            .collect();
        Mat { rows: z.rows, cols: z.cols, data }
    };
    // ẑ = qΔ + μ̃ with the mean cut off from the distortion path
    let mu_sg = t.stop_grad(mu);
    let z_hat = t.shift(mu_sg, &offsets)?;
    let xh = model.tape_synthesis(t, z_hat)?;
    let d = model.tape_distortion(t, xh, x)?;
    let rate_arg = match rate_term {
        RateTerm::Continuous => z_hat,
        RateTerm::DiscreteIndex => t.shift(mu, &offsets)?,
    };
    let rz = t.gauss_bits(rate_arg, mu, sigma, cfg.delta, cfg.p_min)?;
    let rz = t.sum(rz);
    let logits = t.param(&model.params, model.hpmf);
    let ry = t.hyper_bits(yt, logits, cfg.y_max, HyperMode::Noisy, cfg.p_min)?;
    let ry = t.sum(ry);
    let r = t.add(rz, ry)?;
    let r = t.scale(r, cfg.lambda);
    let loss = t.add(d, r)?;
    Ok(t.scale(loss, 1.0 / b as f64))
}

/// Loss of the hypercoder+decoder retrain and its gradient.
pub fn quantized_loss(model: &CodecModel, x: &Mat, z: &Mat, rate_term: RateTerm, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new();
    let loss = quantized_graph(model, &mut t, x, z, rate_term, rng)?;
    Ok((t.scalar(loss), t.backward(loss, &model.params)?))
}

/// Rate-distortion cost per patch under true quantization of both the
/// latent and the hyperprior.
pub fn quantized_cost(model: &CodecModel, x: &Mat, z: &Mat) -> Result<(f64, f64)> {
    let cfg = &model.config;
    let y = model.hyper_analysis(z)?;
    let ym = cfg.y_max as f64;
    let y_hat = Mat { rows: y.rows, cols: y.cols, data: y.data.iter().map(|&v| round_half_away(v).clamp(-ym, ym)).collect() };
    let (mu, sigma) = model.hyper_synthesis(&y_hat)?;
    let mut z_hat = Mat::zeros(z.rows, z.cols);
    let mut bits = 0.0;
    for i in 0..z.data.len() {
        let g = GaussianParams { mu: mu.data[i], sigma: sigma.data[i] };
        let q = usq_quantize(z.data[i], g.mu, cfg.delta, cfg.q_max);
        z_hat.data[i] = usq_dequantize(q, g.mu, cfg.delta);
        bits += crate::entropy::continuous_rate_bits(z_hat.data[i], g, cfg.delta, cfg.p_min);
    }
    let pmf = model.hyper_pmf();
    for (i, &v) in y_hat.data.iter().enumerate() {
        bits += pmf.rate_bits(v, i % HYPER_CHANNELS, HyperMode::Discrete, cfg.p_min);
    }
    let d = mean_distortion(model, x, &z_hat)?;
    let rate = bits / x.rows.max(1) as f64;
    Ok((d, rate))
}

/// Retrains hyperencoder, hyperprior, both hyperdecoder heads and the
/// decoder on truly quantized latents of a frozen USQ encoder.
pub fn finetune_hyper_and_decoder(anchor: &CodecModel, images: &[ImagePatch], tcfg: &TrainConfig) -> Result<(CodecModel, TrainReport)> {
    if anchor.kind() != QuantizerKind::Usq {
        return Err(Error::Unsupported("TCQ hypercoder retrain".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let (n_train, _) = split_counts(images.len(), tcfg.validation_fraction);
    let rows = |imgs: &[ImagePatch]| -> Result<(Mat, Mat)> {
        let xs = imgs.iter().map(|i| image_to_patches(i).map(|p| p.0)).collect::<Result<Vec<_>>>()?;
        let x = stack(&xs);
        let z = if x.rows > 0 { anchor.analysis(&x)? } else { Mat::zeros(0, LATENT_CHANNELS) };
        Ok((x, z))
    };
    let (x, z) = rows(&images[..n_train])?;
    let (vx, vz) = rows(&images[n_train..])?;
    let mut model = anchor.clone();
    let mask = model.params.mask(&[DEC, HYPENC, HYPDEC_MEAN, HYPDEC_DEV, HPMF]);
    let term = tcfg.rate_term;
    let mut batches = |rng: &mut ChaCha8Rng| shuffled_batches(rng, x.rows, tcfg.batch_size, tcfg.batches_per_epoch);
    let mut step = |m: &CodecModel, idx: &[usize], rng: &mut ChaCha8Rng| {
        quantized_loss(m, &gather_rows(&x, idx), &gather_rows(&z, idx), term, rng)
    };
    let val = |m: &CodecModel| quantized_cost(m, &vx, &vz).map(|(d, r)| d + m.config.lambda * r);
    let validate: Validator<'_> = if vx.rows > 0 { Some(&val) } else { None };
    let report = train_loop(&mut model, tcfg, &mask, &mut batches, &mut step, validate)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::tcq_indices_from_levels;
    use crate::synth;

    fn tiny(kind: QuantizerKind, lambda: f64) -> CodecModel {
        let train = synth::corpus(3, 32, 32, 9);
        let tc = TrainConfig { epochs: 4, batches_per_epoch: 8, ..TrainConfig::pretrain() };
        let cfg = ModelConfig { kind, lambda, hidden: 16, hyper_hidden: 8, seed: 2, ..Default::default() };
        pretrain(cfg, &train, Surrogate::for_kind(kind), &tc).unwrap().0
    }

    #[test]
    fn switch_noise_example() {
        // z0 = 0.5 + 2 * 0.4 = 1.3, its neighbour toward zero is 0.3
        assert!((tcq_switch(0.5, 0.4, 1.0) - 0.3).abs() < 1e-12);
        assert!((tcq_switch(0.5, -0.05, 1.0) - 0.4).abs() < 1e-12);
        assert!((tcq_switch(-2.0, -0.3, 0.5) - -1.8).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_agree() {
        let img = synth::texture(40, 24, 4, 0);
        for kind in [QuantizerKind::Usq, QuantizerKind::Tcq] {
            let m = tiny(kind, 256.0);
            let e = encode_image(&m, &img).unwrap();
            let d = decode_image(&m, &e.bytes).unwrap();
            assert_eq!(d.z_hat, e.z_hat, "{kind:?}");
            assert_eq!(d.image, e.recon);
            let payload_bits = 8.0 * (e.bytes.len() as f64);
            assert!(payload_bits >= e.ideal_bits && payload_bits <= e.ideal_bits + 8.0 * 48.0, "{payload_bits} vs {}", e.ideal_bits);
            let ev = evaluate_image(&m, &img).unwrap();
            assert_eq!(ev.bytes, e.bytes.len());
            assert!((ev.bpp - 8.0 * e.bytes.len() as f64 / 960.0).abs() < 1e-12);
            assert_eq!(ev.psnr_db, crate::metrics::psnr(&img, &d.image).unwrap());
            if kind == QuantizerKind::Tcq {
                let p = 3 * 5;
                for c in e.z_hat.data().chunks(p) {
                    assert!(tcq_indices_from_levels(c, m.config.delta).is_some());
                }
            }
        }
    }

    #[test]
    fn decode_rejects_mismatched_model() {
        let img = synth::texture(16, 16, 1, 0);
        let usq = tiny(QuantizerKind::Usq, 256.0);
        let tcq = tiny(QuantizerKind::Tcq, 256.0);
        let e = encode_image(&usq, &img).unwrap();
        assert!(matches!(decode_image(&tcq, &e.bytes), Err(Error::InvalidArgument(_))));
        assert!(decode_image(&usq, &e.bytes[..e.bytes.len() - 1]).is_err());
    }

    #[test]
    fn patch_grid_must_divide() {
        let m = CodecModel::new(ModelConfig::default()).unwrap();
        assert!(matches!(encode_image(&m, &synth::flat(20, 16, 3)), Err(Error::Shape(_))));
        let img = synth::texture(24, 16, 3, 1);
        let (x, ph, pw) = image_to_patches(&img).unwrap();
        assert_eq!((x.rows, ph, pw), (6, 2, 3));
        assert_eq!(patches_to_image(&x, ph, pw).unwrap(), img);
    }

    #[test]
    fn flat_image_is_cheaper() {
        let m = tiny(QuantizerKind::Usq, 512.0);
        let flat = evaluate_image(&m, &synth::flat(32, 32, 128)).unwrap();
        let busy = evaluate_image(&m, &synth::texture(32, 32, 5, 3)).unwrap();
        assert!(flat.bpp < busy.bpp, "{flat:?} {busy:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(QuantizerKind::Tcq, 128.0);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), None).unwrap();
        let back = CodecModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
        let mut blob = fs::read(dir.path().join("params.f32")).unwrap();
        blob[5] ^= 1;
        fs::write(dir.path().join("params.f32"), blob).unwrap();
        assert!(matches!(CodecModel::load(dir.path()), Err(Error::Malformed(_))));
    }

    #[test]
    fn pool_is_deterministic_and_matches_encoder() {
        let imgs = synth::corpus(3, 16, 24, 6);
        for kind in [QuantizerKind::Usq, QuantizerKind::Tcq] {
            let m = tiny(kind, 512.0);
            let a = dump_latent_pool(&m, &imgs, kind).unwrap();
            let b = dump_latent_pool(&m, &imgs, kind).unwrap();
            assert_eq!(a, b);
            for (r, img) in a.records.iter().zip(&imgs) {
                assert_eq!(r.z_hat, encode_image(&m, img).unwrap().z_hat);
            }
            let mut buf = Vec::new();
            a.write_to(&mut buf).unwrap();
            let back = LatentPool::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, a);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn decoder_finetune_keeps_bitstreams() {
        let imgs = synth::corpus(4, 24, 24, 8);
        let m = tiny(QuantizerKind::Usq, 256.0);
        let pool = dump_latent_pool(&m, &imgs, QuantizerKind::Usq).unwrap();

        let none = TrainConfig { epochs: 0, ..TrainConfig::finetune() };
        assert_eq!(finetune_decoder(&m, &pool, &none).unwrap().0, m);

        let tc = TrainConfig { epochs: 5, lr: 1e-3, validation_fraction: 0.0, ..TrainConfig::finetune() };
        let (ft, report) = finetune_decoder(&m, &pool, &tc).unwrap();
        assert_eq!(report.epochs, 5);
        assert_ne!(ft.group_hash(DEC), m.group_hash(DEC));
        for g in [ENC, HYPENC, HYPDEC_MEAN, HYPDEC_DEV, HPMF] {
            assert_eq!(ft.group_hash(g), m.group_hash(g), "{g}");
        }
        for img in &imgs {
            assert_eq!(encode_image(&ft, img).unwrap().bytes, encode_image(&m, img).unwrap().bytes);
        }
        let (x, z) = pool.rows(0..pool.records.len()).unwrap();
        assert!(mean_distortion(&ft, &x, &z).unwrap() < mean_distortion(&m, &x, &z).unwrap());

        let other = tiny(QuantizerKind::Usq, 512.0);
        assert!(finetune_decoder(&other, &pool, &tc).is_err());
    }

    #[test]
    fn hyper_finetune_freezes_encoder() {
        let imgs = synth::corpus(4, 24, 24, 8);
        let m = tiny(QuantizerKind::Usq, 256.0);
        let tc = TrainConfig { epochs: 3, lr: 1e-3, validation_fraction: 0.0, ..TrainConfig::finetune() };
        let (ft, _) = finetune_hyper_and_decoder(&m, &imgs, &tc).unwrap();
        assert_eq!(ft.group_hash(ENC), m.group_hash(ENC));
        for g in [DEC, HYPENC, HYPDEC_MEAN, HYPDEC_DEV, HPMF] {
            assert_ne!(ft.group_hash(g), m.group_hash(g), "{g}");
        }
        let t = tiny(QuantizerKind::Tcq, 256.0);
        assert!(matches!(finetune_hyper_and_decoder(&t, &imgs, &tc), Err(Error::Unsupported(_))));
    }

    #[test]
    fn validation_selection_can_keep_the_anchor() {
        let imgs = synth::corpus(4, 24, 24, 8);
        let m = tiny(QuantizerKind::Usq, 256.0);
        let pool = dump_latent_pool(&m, &imgs, QuantizerKind::Usq).unwrap();
        // a huge step ruins the decoder, so the starting point must win
        let tc = TrainConfig { epochs: 2, lr: 10.0, ..TrainConfig::finetune() };
        let (ft, report) = finetune_decoder(&m, &pool, &tc).unwrap();
        assert_eq!(report.best_epoch, Some(0));
        assert_eq!(ft, m);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let train = synth::corpus(3, 32, 32, 9);
        let tc = TrainConfig { epochs: 12, batches_per_epoch: 10, ..TrainConfig::pretrain() };
        let cfg = ModelConfig { hidden: 16, hyper_hidden: 8, ..Default::default() };
        let (_, r) = pretrain(cfg, &train, Surrogate::UsqNoise, &tc).unwrap();
        let l = &r.epoch_losses;
        assert!(l[l.len() - 1] < 0.5 * l[0], "{l:?}");
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { delta: 0.1, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { delta: 0.5, ..Default::default() }.validate().is_ok());
        assert!(ModelConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        let text = "kind = \"tcq\"\nlambda = 256.0\n";
        let cfg: ModelConfig = toml::from_str(text).unwrap();
        assert_eq!((cfg.kind, cfg.lambda, cfg.hidden), (QuantizerKind::Tcq, 256.0, 64));
        assert!(toml::from_str::<ModelConfig>("lamda = 2.0").is_err());
    }
}
