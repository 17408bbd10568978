//! Command-line front end: synthetic data, preprocessing, training,
//! evaluation, prediction and gradient checks.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 when a
//! command fails at run time.

use clap::{Args, Parser, Subcommand};
use ravnet::arch::{AttentionSites, DecoderKind, EncoderKind};
use ravnet::checks::{format_results, run_gradient_suite, Suite};
use ravnet::data::{
    load_manifest, preview_pixels, read_all, read_image, split_dataset, split_train_val_test,
    synth_generate, write_manifest, write_mask_png, write_png, WindowSpec,
};
use ravnet::loss::LossKind;
use ravnet::train::{
    evaluate_checkpoint, load_checkpoint, predict_mask, train, TrainConfig, TrainOutputs,
};
use ravnet::Error;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "ravnet", version, about = "Liver segmentation on CT slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom slices with masks and a manifest.
    Synth {
        /// Number of slices.
        #[arg(long)]
        count: usize,
        /// Side length in pixels.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write windowed PNG previews of every slice in a manifest, and
    /// optionally train/val/test manifests.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write train.csv, val.csv and test.csv (80/20, then 80/20 of
        /// the training part) using this shuffle seed.
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Train a network and write the best checkpoint, the latest one
    /// (`<out>.last`) and the history CSV.
    Train {
        /// Training slices.
        #[arg(long)]
        manifest: PathBuf,
        /// Validation slices. Without it, 20% of --manifest is held out.
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// key = value file; explicit flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Best checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// History CSV path [default: <out>.history.csv]
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score a checkpoint on a manifest; writes a per-slice CSV and prints
    /// the aggregate metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Per-slice CSV output.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        window: OptionalWindow,
    },
    /// Segment one HU image and write the mask as a PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input slice (.husl).
        #[arg(long)]
        image: PathBuf,
        /// Output PNG, 0 background and 255 organ.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        window: OptionalWindow,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        module: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct WindowArgs {
    /// Window level (centre), HU.
    #[arg(long, default_value_t = 60.0)]
    wl: f64,
    /// Window width, HU.
    #[arg(long, default_value_t = 200.0)]
    ww: f64,
}

/// Window override; the checkpoint's own window is used otherwise.
#[derive(Args, Debug)]
struct OptionalWindow {
    /// Window level, HU [default: from the checkpoint]
    #[arg(long)]
    wl: Option<f64>,
    /// Window width, HU [default: from the checkpoint]
    #[arg(long)]
    ww: Option<f64>,
}

impl OptionalWindow {
    fn resolve(&self, stored: WindowSpec) -> ravnet::Result<WindowSpec> {
        WindowSpec::new(self.wl.unwrap_or(stored.wl), self.ww.unwrap_or(stored.ww))
    }
}

#[derive(Args, Debug)]
struct TrainOverrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Stop once an epoch's mean training loss is below this.
    #[arg(long)]
    early_stop_loss: Option<f64>,
    /// dice or bce.
    #[arg(long, value_parser = parse_with::<LossKind>)]
    loss: Option<LossKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    wl: Option<f64>,
    #[arg(long)]
    ww: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// cofres, plain or residual.
    #[arg(long, value_parser = parse_with::<EncoderKind>)]
    encoder: Option<EncoderKind>,
    /// ar or unet.
    #[arg(long, value_parser = parse_with::<DecoderKind>)]
    decoder: Option<DecoderKind>,
    /// none, bottom or all.
    #[arg(long, value_parser = parse_with::<AttentionSites>)]
    attention: Option<AttentionSites>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            lr => cfg.lr,
            batch_size => cfg.batch_size,
            max_epochs => cfg.max_epochs,
            early_stop_loss => cfg.early_stop_loss,
            loss => cfg.loss,
            seed => cfg.seed,
            wl => cfg.window.wl,
            ww => cfg.window.ww,
            levels => cfg.net.levels,
            base_channels => cfg.net.base_channels,
            encoder => cfg.net.encoder,
            decoder => cfg.net.decoder,
            attention => cfg.net.attention,
        );
    }
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    parse_with(s)
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn ensure_dir(dir: &Path) -> ravnet::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            count,
            size,
            seed,
            out_dir,
        } => {
            let m = synth_generate(count, size, seed, &out_dir)?;
            println!("wrote {} slices to {}", m.len(), out_dir.display());
        }
        Command::Preprocess {
            manifest,
            window,
            out_dir,
            split_seed,
        } => {
            let spec = WindowSpec::new(window.wl, window.ww)?;
            let m = load_manifest(&manifest)?;
            ensure_dir(&out_dir)?;
            for s in read_all(&m)? {
                let pixels = preview_pixels(&s.image, spec)?;
                write_png(
                    &out_dir.join(format!("{}.png", s.id)),
                    s.image.h,
                    s.image.w,
                    &pixels,
                )?;
            }
            println!("wrote {} previews to {}", m.len(), out_dir.display());
            if let Some(seed) = split_seed {
                let (tr, va, te) = split_train_val_test(&m, seed)?;
                for (name, part) in [("train.csv", &tr), ("val.csv", &va), ("test.csv", &te)] {
                    write_manifest(&out_dir.join(name), part)?;
                }
                println!(
                    "split {} / {} / {} (train / val / test)",
                    tr.len(),
                    va.len(),
                    te.len()
                );
            }
        }
        Command::Train {
            manifest,
            val_manifest,
            config,
            out,
            history,
            overrides,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                cfg.apply_text(&text)?;
            }
            overrides.apply(&mut cfg);
            cfg.validate()?;
            let m = load_manifest(&manifest)?;
            let (train_m, val_m) = match &val_manifest {
                Some(v) => (m, load_manifest(v)?),
                None => split_dataset(&m, 0.8, cfg.seed)?,
            };
            let (train_set, val_set) = (read_all(&train_m)?, read_all(&val_m)?);
            let mut outputs = TrainOutputs::beside(&out);
            if let Some(h) = history {
                outputs.history = h;
            }
            let run = train(&cfg, &train_set, &val_set, Some(&outputs))?;
            let best = run.history.get(run.best_epoch.saturating_sub(1));
            println!(
                "trained {} epochs; best epoch {} with val dsc {:.4}",
                run.history.len(),
                run.best_epoch,
                best.map_or(f64::NAN, |r| r.val_dsc)
            );
            println!("checkpoint: {}", outputs.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            report,
            window,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let spec = window.resolve(ck.window)?;
            let samples = read_all(&load_manifest(&manifest)?)?;
            let eval = evaluate_checkpoint(&ck, &samples, Some(spec))?;
            ravnet::data::write_atomic(&report, eval.per_sample_csv().as_bytes())?;
            print!("{}", eval.report.to_kv());
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            window,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let spec = window.resolve(ck.window)?;
            let (net, store) = ck.restore::<f32>()?;
            let img = read_image(&image)?;
            let mask = predict_mask(&net, &store, &img, spec)?;
            write_mask_png(&out, &mask)?;
            println!("{} organ pixels of {}", mask.count(), img.h * img.w);
        }
        Command::Gradcheck { module, seed } => {
            let results = run_gradient_suite(module, seed)?;
            print!("{}", format_results(&results));
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure {
                    code: 2,
                    message: format!("{failed} gradient checks failed"),
                });
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Some(v) = std::env::var_os("RAVNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .to_str()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure {
            code: 1,
            message: format!("RAVNET_THREADS must be a positive integer, got {v:?}"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            message: e.to_string(),
        })
}

fn run(args: impl IntoIterator<Item = OsString>) -> Result<(), Failure> {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            return Err(Failure {
                code: 1,
                message: e.render().to_string(),
            })
        }
    };
    configure_threads()?;
    execute(cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "error: {}",
                f.message.trim_end().trim_start_matches("error: ")
            );
            ExitCode::from(f.code)
        }
    }
}
