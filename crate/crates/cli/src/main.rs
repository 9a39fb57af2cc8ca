//! `latq`: train, finetune, code and evaluate the desk-scale latent codec.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use latq::codec::{
    decode_image, dump_latent_pool, encode_image, evaluate, finetune_decoder, finetune_hyper_and_decoder, pretrain,
    CodecModel, LatentPool, ModelConfig, RateTerm, Surrogate, TrainConfig, TrainReport,
};
use latq::experiment::{average_point, best_lambda_q, sweep_lambda_q};
use latq::manifest::{hash_file, hash_images, Manifest};
use latq::metrics::{bd_rate, bd_rate_split, format_psnr, psnr, write_bd_report, BdRow, RdCurve};
use latq::selftest::{self, SelftestConfig};
use latq::tensor::{read_pgm, read_pgm_dir, ImagePatch, QuantizerKind};

#[derive(Parser, Debug)]
#[command(name = "latq", version, about = "Learned latent codec with uniform and trellis-coded quantization")]
struct Cli {
    /// Seed for weight initialisation and training noise.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "LATQ_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// TOML file with optional [model], [train] and [finetune] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "LATQ_JOBS", default_value_t = 0)]
    jobs: usize,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from scratch with the noisy quantization surrogate.
    Pretrain(PretrainArgs),
    /// Quantize a dataset with a frozen model into a latent pool.
    DumpLatents(DumpArgs),
    /// Retrain the decoder on a latent pool.
    FinetuneDecoder(FinetuneDecoderArgs),
    /// Retrain hypercoder and decoder on truly quantized latents (USQ only).
    FinetuneHyper(FinetuneHyperArgs),
    /// Compress one PGM image.
    Encode(EncodeArgs),
    /// Reconstruct a PGM image from a bitstream.
    Decode(DecodeArgs),
    /// Rate-distortion evaluation of one model per rate point.
    Eval(EvalArgs),
    /// Bjøntegaard-delta rate between two RD curves.
    Bdrate(BdArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Usq,
    Tcq,
}

impl From<KindArg> for QuantizerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Usq => QuantizerKind::Usq,
            KindArg::Tcq => QuantizerKind::Tcq,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RateTermArg {
    Continuous,
    DiscreteIndex,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Directory of PGM images (or a single PGM).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint directory to create.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Quantizer used for the pool; defaults to the model's own.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneDecoderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneHyperArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    rate_term: Option<RateTermArg>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Original image; prints the PSNR of the reconstruction.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model checkpoints, one per rate point.
    #[arg(long = "model", required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// RD curve CSV (lambda, bpp, psnr_db).
    #[arg(long)]
    output: PathBuf,
    /// Per-image results CSV.
    #[arg(long)]
    per_image: Option<PathBuf>,
    /// SVG plot of the curve, with the reference curve if given.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Reference RD curve for BD-rate and the sweep.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Trellis rate weights (multiples of Δ²) to sweep; TCQ models only.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sweep_lambda_q: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct BdArgs {
    #[arg(long)]
    test: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also report high and low rate BD-rates from the top and bottom three points.
    #[arg(long)]
    split: bool,
    /// Per-image curves: `<dir>/<name>.csv` in both directories; writes a report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Smaller instance counts.
    #[arg(long)]
    quick: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    finetune: Option<TrainConfig>,
}

/// Failures that are the caller's fault rather than the data's.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
    force: bool,
    file: FileConfig,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Resolves an output path and refuses to replace it without `--force`.
    fn claim(&self, p: &Path) -> anyhow::Result<PathBuf> {
        let path = self.out(p);
        if path.exists() && !self.force {
            return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    fn train_config(&self, finetune: bool, epochs: Option<usize>) -> TrainConfig {
        let base = if finetune { self.file.finetune.clone() } else { self.file.train.clone() };
        let mut t = base.unwrap_or_else(|| if finetune { TrainConfig::finetune() } else { TrainConfig::pretrain() });
        t.seed = self.seed;
        if let Some(e) = epochs {
            t.epochs = e;
        }
        t
    }
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

fn load_images(path: &Path) -> anyhow::Result<Vec<(String, ImagePatch)>> {
    let images = if path.is_dir() {
        read_pgm_dir(path)?
    } else {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(name, read_pgm(path).with_context(|| format!("reading {}", path.display()))?)]
    };
    if images.is_empty() {
        bail!("no PGM images in {}", path.display());
    }
    Ok(images)
}

fn pixels(images: &[(String, ImagePatch)]) -> Vec<ImagePatch> {
    images.iter().map(|(_, i)| i.clone()).collect()
}

fn load_model(dir: &Path) -> anyhow::Result<CodecModel> {
    CodecModel::load(dir).with_context(|| format!("loading model {}", dir.display()))
}

fn train_manifest(command: &str, seed: u64, tcfg: &TrainConfig, report: &TrainReport) -> anyhow::Result<Manifest> {
    let mut m = Manifest::new(command);
    m.set_u64("seed", seed);
    m.set_section("train", tcfg)?;
    m.set_section("report", &ReportSummary::from(report))?;
    Ok(m)
}

#[derive(serde::Serialize)]
struct ReportSummary {
    epochs: usize,
    steps: u64,
    decays: u32,
    final_lr: f64,
    final_loss: f64,
    best_epoch: i64,
}

impl From<&TrainReport> for ReportSummary {
    fn from(r: &TrainReport) -> Self {
        ReportSummary {
            epochs: r.epochs,
            steps: r.steps,
            decays: r.decays,
            final_lr: r.final_lr,
            final_loss: r.epoch_losses.last().copied().unwrap_or(f64::NAN),
            best_epoch: r.best_epoch.map_or(-1, |e| e as i64),
        }
    }
}

fn cmd_pretrain(ctx: &Ctx, a: &PretrainArgs) -> anyhow::Result<()> {
    let out = ctx.claim(&a.output)?;
    let images = load_images(&a.data)?;
    let mut cfg = ctx.file.model.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    if let Some(k) = a.kind {
        cfg.kind = k.into();
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    let tcfg = ctx.train_config(false, a.epochs);
    let px = pixels(&images);
    let surrogate = Surrogate::for_kind(cfg.kind);
    let (model, report) = pretrain(cfg, &px, surrogate, &tcfg)?;
    let mut m = train_manifest("pretrain", ctx.seed, &tcfg, &report)?;
    m.add_input("dataset", hash_images(&px));
    model.save(&out, Some(&m))?;
    println!(
        "trained {} lambda {} for {} epochs, final loss {:.4}, saved to {}",
        model.kind().name(),
        model.config.lambda,
        report.epochs,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_dump(ctx: &Ctx, a: &DumpArgs) -> anyhow::Result<()> {
    let out = ctx.claim(&a.output)?;
    let model = load_model(&a.model)?;
    let images = load_images(&a.data)?;
    let kind = a.kind.map_or(model.kind(), Into::into);
    let px = pixels(&images);
    let pool = dump_latent_pool(&model, &px, kind)?;
    pool.save(&out)?;
    let mut m = Manifest::new("dump-latents");
    m.set("kind", kind.name()).set("records", pool.records.len() as i64);
    m.add_input("model", model.fingerprint()).add_input("dataset", hash_images(&px));
    m.set("output_sha256", hash_file(&out)?);
    m.save(manifest_path(&out))?;
    println!("wrote {} {} records to {}", pool.records.len(), kind.name(), out.display());
    Ok(())
}

fn cmd_finetune_decoder(ctx: &Ctx, a: &FinetuneDecoderArgs) -> anyhow::Result<()> {
    let out = ctx.claim(&a.output)?;
    let model = load_model(&a.model)?;
    let pool = LatentPool::load(&a.pool).with_context(|| format!("loading pool {}", a.pool.display()))?;
    let tcfg = ctx.train_config(true, a.epochs);
    let (ft, report) = finetune_decoder(&model, &pool, &tcfg)?;
    let mut m = train_manifest("finetune-decoder", ctx.seed, &tcfg, &report)?;
    m.add_input("model", model.fingerprint()).add_input("pool", hash_file(&a.pool)?);
    ft.save(&out, Some(&m))?;
    println!("decoder retrained for {} epochs, kept epoch {:?}, saved to {}", report.epochs, report.best_epoch, out.display());
    Ok(())
}

fn cmd_finetune_hyper(ctx: &Ctx, a: &FinetuneHyperArgs) -> anyhow::Result<()> {
    let out = ctx.claim(&a.output)?;
    let model = load_model(&a.model)?;
    let images = load_images(&a.data)?;
    let mut tcfg = ctx.train_config(true, a.epochs);
    if let Some(t) = a.rate_term {
        tcfg.rate_term = match t {
            RateTermArg::Continuous => RateTerm::Continuous,
            RateTermArg::DiscreteIndex => RateTerm::DiscreteIndex,
        };
    }
    let px = pixels(&images);
    let (ft, report) = finetune_hyper_and_decoder(&model, &px, &tcfg)?;
    let mut m = train_manifest("finetune-hyper", ctx.seed, &tcfg, &report)?;
    m.add_input("model", model.fingerprint()).add_input("dataset", hash_images(&px));
    ft.save(&out, Some(&m))?;
    println!("hypercoder and decoder retrained for {} epochs, saved to {}", report.epochs, out.display());
    Ok(())
}

fn cmd_encode(ctx: &Ctx, a: &EncodeArgs) -> anyhow::Result<()> {
    let out = ctx.claim(&a.output)?;
    let model = load_model(&a.model)?;
    let img = read_pgm(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let e = encode_image(&model, &img)?;
    fs::write(&out, &e.bytes)?;
    let bpp = 8.0 * e.bytes.len() as f64 / img.pixel_count() as f64;
    let p = psnr(&img, &e.recon)?;
    let mut m = Manifest::new("encode");
    m.add_input("model", model.fingerprint()).add_input("image", hash_file(&a.input)?);
    m.set("bytes", e.bytes.len() as i64).set("bpp", bpp).set("psnr_db", format_psnr(p));
    m.set("output_sha256", hash_file(&out)?);
    m.save(manifest_path(&out))?;
    println!("{} bytes, {bpp:.4} bpp, PSNR {} dB", e.bytes.len(), format_psnr(p));
    Ok(())
}

fn cmd_decode(ctx: &Ctx, a: &DecodeArgs) -> anyhow::Result<()> {
    let out = ctx.claim(&a.output)?;
    let model = load_model(&a.model)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let d = decode_image(&model, &bytes)?;
    d.image.write_pgm(&out)?;
    let mut m = Manifest::new("decode");
    m.add_input("model", model.fingerprint()).add_input("bitstream", hash_file(&a.input)?);
    m.set("output_sha256", hash_file(&out)?);
    m.save(manifest_path(&out))?;
    let mut line = format!("decoded {}x{} to {}", d.image.width(), d.image.height(), out.display());
    if let Some(r) = &a.reference {
        let p = psnr(&read_pgm(r)?, &d.image)?;
        line.push_str(&format!(", PSNR {} dB", format_psnr(p)));
    }
    println!("{line}");
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<()> {
    let out = ctx.claim(&a.output)?;
    let models = a.models.iter().map(|p| load_model(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let images = load_images(&a.data)?;
    let px = pixels(&images);
    let reference = a.reference.as_ref().map(RdCurve::read_csv).transpose()?;

    if let Some(values) = &a.sweep_lambda_q {
        let reference = reference.ok_or_else(|| usage("--sweep-lambda-q needs --reference"))?;
        if models.iter().any(|m| m.kind() != QuantizerKind::Tcq) {
            return Err(usage("--sweep-lambda-q needs TCQ models"));
        }
        let rows = sweep_lambda_q(&models, &reference, &px, values)?;
        let mut w = csv_writer(&out)?;
        for r in &rows {
            w.serialize(r)?;
            println!("lambda_q {:.3} Δ²: BD-rate {:+.3}%", r.lambda_q_rel, r.bd_rate_pct);
        }
        w.flush()?;
        if let Some(best) = best_lambda_q(&rows) {
            println!("best lambda_q {} Δ² ({:+.3}%)", best.lambda_q_rel, best.bd_rate_pct);
        }
        let mut m = eval_manifest(&models, &px, "eval --sweep-lambda-q");
        m.set("output_sha256", hash_file(&out)?);
        m.save(manifest_path(&out))?;
        return Ok(());
    }

    let mut points = Vec::with_capacity(models.len());
    let mut per_image = Vec::new();
    for model in &models {
        let ev = evaluate(model, &px)?;
        let p = average_point(model.config.lambda, &ev)?;
        println!("lambda {}: {:.4} bpp, {} dB", p.lambda, p.bpp, format_psnr(p.psnr_db));
        for ((name, _), e) in images.iter().zip(&ev) {
            per_image.push(ImageRow { image: name.clone(), lambda: model.config.lambda, bytes: e.bytes, bpp: e.bpp, psnr_db: e.psnr_db });
        }
        points.push(p);
    }
    let curve = RdCurve::new(points)?;
    curve.write_csv(&out)?;
    if let Some(path) = &a.per_image {
        let path = ctx.claim(path)?;
        let mut w = csv_writer(&path)?;
        for r in &per_image {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    if let Some(r) = &reference {
        if curve.len() >= 4 && r.len() >= 4 {
            println!("BD-rate vs reference: {:+.3}%", bd_rate(&curve, r)?);
        }
    }
    if let Some(path) = &a.plot {
        let path = ctx.claim(path)?;
        let mut curves = vec![("test".to_string(), curve.clone())];
        if let Some(r) = reference {
            curves.push(("reference".to_string(), r));
        }
        fs::write(&path, latq::plot::rd_svg(&curves))?;
    }
    let mut m = eval_manifest(&models, &px, "eval");
    m.set("output_sha256", hash_file(&out)?);
    m.save(manifest_path(&out))?;
    Ok(())
}

#[derive(serde::Serialize)]
struct ImageRow {
    image: String,
    lambda: f64,
    bytes: usize,
    bpp: f64,
    psnr_db: f64,
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn eval_manifest(models: &[CodecModel], images: &[ImagePatch], command: &str) -> Manifest {
    let mut m = Manifest::new(command);
    for (i, model) in models.iter().enumerate() {
        m.add_input(&format!("model{i}"), model.fingerprint());
    }
    m.add_input("dataset", hash_images(images));
    m
}

fn cmd_bdrate(ctx: &Ctx, a: &BdArgs) -> anyhow::Result<()> {
    if let Some(report) = &a.report {
        if !a.test.is_dir() || !a.reference.is_dir() {
            return Err(usage("--report expects --test and --ref to be directories of per-image curves"));
        }
        let out = ctx.claim(report)?;
        let mut rows = Vec::new();
        let mut names: Vec<PathBuf> = fs::read_dir(&a.test)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        names.sort();
        for t in names {
            let name = t.file_name().expect("file has a name");
            let (high, low) = bd_rate_split(&RdCurve::read_csv(&t)?, &RdCurve::read_csv(a.reference.join(name))?)?;
            rows.push(BdRow { image: t.file_stem().unwrap_or_default().to_string_lossy().into_owned(), bd_high_pct: high, bd_low_pct: low });
        }
        write_bd_report(&rows, &out)?;
        for r in latq::metrics::bd_report(&rows) {
            println!("{}: high {:+.3}%, low {:+.3}%", r.image, r.bd_high_pct, r.bd_low_pct);
        }
        return Ok(());
    }
    let test = RdCurve::read_csv(&a.test)?;
    let reference = RdCurve::read_csv(&a.reference)?;
    println!("{:.2}%", bd_rate(&test, &reference)?);
    if a.split {
        let (high, low) = bd_rate_split(&test, &reference)?;
        println!("high {high:.2}%, low {low:.2}%");
    }
    Ok(())
}

fn cmd_selftest(seed: u64, a: &SelftestArgs) -> anyhow::Result<bool> {
    let cfg = if a.quick {
        SelftestConfig { trellis_instances: 30, coder_streams: 500, coder_symbols: 20_000, seed }
    } else {
        SelftestConfig { seed, ..SelftestConfig::default() }
    };
    let checks = selftest::run(&cfg)?;
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    if let Some(m) = &file.model {
        m.validate().map_err(|e| usage(e.to_string()))?;
    }
    let ctx = Ctx { seed: cli.seed, out_dir: cli.out_dir, force: cli.force, file };
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(&ctx, a)?,
        Command::DumpLatents(a) => cmd_dump(&ctx, a)?,
        Command::FinetuneDecoder(a) => cmd_finetune_decoder(&ctx, a)?,
        Command::FinetuneHyper(a) => cmd_finetune_hyper(&ctx, a)?,
        Command::Encode(a) => cmd_encode(&ctx, a)?,
        Command::Decode(a) => cmd_decode(&ctx, a)?,
        Command::Eval(a) => cmd_eval(&ctx, a)?,
        Command::Bdrate(a) => cmd_bdrate(&ctx, a)?,
        Command::Selftest(a) => return cmd_selftest(ctx.seed, a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
