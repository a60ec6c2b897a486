//! `textcolor`: train, colorize, eval, synth and serve.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 runtime abort.

mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use textcolor::data::{
    load_dataset, make_batches, synth_generate, write_corpus, DatasetManifest, DescriptionSources, Palette, Sample,
    Split,
};
use textcolor::metrics::{distance_provider, evaluate, DistanceProvider};
use textcolor::pipeline::Colorizer;
use textcolor::text::{ClassColorTable, ColorLexicon, TextEncoderSpec};
use textcolor::trainer::{checkpoints_in, train, Trainer, META_TEXT_ENCODER};
use textcolor::{imageio, Error};
use textcolor_service::{ServiceConfig, ServiceError};

use run_config::RunConfig;

/// Seed offset for the held-out part of a synthetic corpus.
const TEST_SEED_MASK: u64 = 1 << 63;

#[derive(Debug, Parser)]
#[command(name = "textcolor", version, about = "Text-guided image colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a generator/discriminator pair from a run config.
    Train(TrainArgs),
    /// Colorize one image with a description.
    Colorize(ColorizeArgs),
    /// Score a checkpoint on a dataset split and write a report.
    Eval(EvalArgs),
    /// Write a synthetic shapes corpus (PNG files, records.jsonl, manifest.toml).
    Synth(SynthArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config TOML; flags and TEXTCOLOR_* variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, env = "TEXTCOLOR_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Directory for checkpoints, metrics.tsv and the lock file.
    #[arg(long, env = "TEXTCOLOR_RUN_DIR")]
    run_dir: Option<PathBuf>,
    /// Total iterations to reach.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate for both networks.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Shuffle seed.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Train with zero text embeddings.
    #[arg(long)]
    ablate_text: bool,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct ColorizeArgs {
    /// Input image (PNG or JPEG, grayscale or colour).
    #[arg(long)]
    image: PathBuf,
    /// Colour description; empty means no text conditioning.
    #[arg(long)]
    text: String,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for report.txt and report.json.
    #[arg(long)]
    report: PathBuf,
    /// Split to score.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Perceptual distance providers: identity-stub, lpips-vgg (needs --lpips-weights), lpips-sqz.
    #[arg(long = "provider", default_value = "identity-stub")]
    providers: Vec<String>,
    /// Safetensors weights for lpips-vgg.
    #[arg(long)]
    lpips_weights: Option<PathBuf>,
    /// Colour word list for caption filtering.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Class to colour table.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Score with empty descriptions.
    #[arg(long)]
    ablate_text: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Palette file (`word r g b` per line); defaults to the bundled five colours.
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Additional held-out samples, drawn from a separate seed stream and marked as the test split.
    #[arg(long, default_value_t = 0)]
    test_n: usize,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Service config TOML; TEXTCOLOR_HOST/PORT/CHECKPOINT_DIR override it, flags override both.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    /// Every *.safetensors here is loaded at startup.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::ProviderMissing(_) => 2,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Image(_)
            | Error::Io(_)
            | Error::Dimension { .. }
            | Error::CorruptCheckpoint(_)
            | Error::CheckpointVersion { .. } => 3,
            _ => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let code = match e {
            ServiceError::Config(_) => 2,
            ServiceError::Io(_) => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Colorize(a) => cmd_colorize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn sources(lexicon: Option<&Path>, classes: Option<&Path>) -> textcolor::Result<DescriptionSources> {
    let mut s = DescriptionSources::default();
    if let Some(p) = lexicon {
        s.lexicon = ColorLexicon::load(p)?;
    }
    if let Some(p) = classes {
        s.classes = ClassColorTable::load(p)?;
    }
    Ok(s)
}

fn load_split(manifest: &DatasetManifest, src: &DescriptionSources, split: Split) -> textcolor::Result<Vec<Sample>> {
    let (samples, report) = load_dataset(manifest, src, Some(split))?;
    for e in &report.errors {
        log::warn!("{}: {}: {}", e.id, e.path.display(), e.reason);
    }
    log::info!("{split} split: {}", report.summary());
    Ok(samples)
}

fn resolve_train_config(a: &TrainArgs) -> textcolor::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(r) = &a.run_dir {
        cfg.run_dir = Some(r.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.optimizer.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.data_seed {
        t.data_seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    t.ablate_text |= a.ablate_text;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(&a)?;
    let (gcfg, dcfg) = cfg.models()?;
    let extractor = cfg.extractor()?;
    let run_dir = cfg.run_dir.clone().expect("validated");
    let manifest = DatasetManifest::load(cfg.manifest.as_ref().expect("validated"))?;
    if manifest.image_size != gcfg.image_size {
        return Err(Error::Config(format!(
            "manifest image_size {} does not match model image_size {}",
            manifest.image_size, gcfg.image_size
        ))
        .into());
    }
    let src = sources(cfg.descriptions.lexicon.as_deref(), cfg.descriptions.classes.as_deref())?;
    let train_set = load_split(&manifest, &src, Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()).into());
    }

    let device = Device::Cpu;
    let existing = if run_dir.exists() { checkpoints_in(&run_dir)? } else { Vec::new() };
    let (mut trainer, spec) = if existing.is_empty() {
        let spec = cfg.text.encoder.clone().unwrap_or_else(|| {
            TextEncoderSpec::seeded_from(train_set.iter().map(|s| s.description.as_str()), cfg.text.seed)
        });
        let mut t = Trainer::new(&gcfg, &dcfg, cfg.train.clone(), extractor, DType::F32, &device)?;
        t.set_run_metadata(META_TEXT_ENCODER, serde_json::to_string(&spec).expect("spec serialises"));
        (t, spec)
    } else if a.resume {
        let mut t = Trainer::resume_latest(&run_dir, extractor, &device)?.expect("checkpoints exist");
        let spec: TextEncoderSpec = t
            .run_metadata(META_TEXT_ENCODER)
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no text encoder recorded".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::CorruptCheckpoint(e.to_string())))?;
        t.config_mut().iterations = cfg.train.iterations;
        log::info!("resuming at iteration {}", t.iteration());
        (t, spec)
    } else {
        return Err(Error::Config(format!(
            "{} already holds checkpoints; pass --resume to continue",
            run_dir.display()
        ))
        .into());
    };

    let vocab = spec.build()?;
    let batch = trainer.config().batch_size;
    let data = make_batches(&train_set, batch, trainer.config().data_seed, &vocab)?;
    let val = if cfg.validate_on_test {
        let test = load_split(&manifest, &src, Split::Test)?;
        if test.is_empty() {
            None
        } else {
            Some(make_batches(&test, batch, 0, &vocab)?)
        }
    } else {
        None
    };

    std::fs::create_dir_all(&run_dir).map_err(Error::from)?;
    match toml::to_string_pretty(&cfg) {
        Ok(text) => std::fs::write(run_dir.join("config.toml"), text).map_err(Error::from)?,
        Err(e) => log::warn!("could not record the run config: {e}"),
    }
    let summary = train(&mut trainer, &data, val.as_ref(), &run_dir)?;
    println!("iterations: {}", summary.iterations);
    println!("checkpoint: {}", summary.final_checkpoint.display());
    if let Some(m) = summary.last {
        println!(
            "last: d_gan {:.4} g_gan {:.4} g_l1 {:.4} g_total {:.4}",
            m.d_gan, m.g_gan, m.g_l1, m.g_total
        );
    }
    if let Some(v) = summary.best_validation_l1 {
        println!("best validation l1: {v:.5}");
    }
    Ok(())
}

fn cmd_colorize(a: ColorizeArgs) -> CmdResult {
    if !a.checkpoint.is_file() {
        return Err(Error::Data(format!("checkpoint {} not found", a.checkpoint.display())).into());
    }
    let colorizer = Colorizer::load(&a.checkpoint, &Device::Cpu)?;
    let image = imageio::read(&a.image)?;
    let out = colorizer.colorize(&image, &a.text)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    imageio::write_png(&a.out, &out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let colorizer = Colorizer::load(&a.checkpoint, &Device::Cpu)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let src = sources(a.lexicon.as_deref(), a.classes.as_deref())?;
    let split = if a.split == "train" { Split::Train } else { Split::Test };
    let samples = load_split(&manifest, &src, split)?;
    let providers: Vec<Box<dyn DistanceProvider>> = a
        .providers
        .iter()
        .map(|p| distance_provider(p, a.lpips_weights.as_deref()))
        .collect::<textcolor::Result<_>>()?;
    let refs: Vec<&dyn DistanceProvider> = providers.iter().map(|p| p.as_ref()).collect();
    let report = evaluate(&colorizer, &samples, &refs, a.ablate_text)?;
    std::fs::create_dir_all(&a.report).map_err(Error::from)?;
    let table = report.to_table();
    std::fs::write(a.report.join("report.txt"), &table).map_err(Error::from)?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serialises");
    std::fs::write(a.report.join("report.json"), json).map_err(Error::from)?;
    print!("{table}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let palette = match &a.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::default(),
    };
    let mut samples = synth_generate(a.n, a.seed, &palette, a.size)?;
    if a.test_n > 0 {
        let mut test = synth_generate(a.test_n, a.seed ^ TEST_SEED_MASK, &palette, a.size)?;
        for s in &mut test {
            s.split = Split::Test;
        }
        samples.extend(test);
    }
    write_corpus(&samples, &a.out)?;
    println!("wrote {} samples ({} test) to {}", samples.len(), a.test_n, a.out.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    cfg.from_env()?;
    if let Some(h) = a.host {
        cfg.host = h;
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(d) = a.checkpoint_dir {
        cfg.checkpoint_dir = Some(d);
    }
    cfg.addr()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(ServiceError::from)?;
    rt.block_on(textcolor_service::serve(cfg))?;
    Ok(())
}
