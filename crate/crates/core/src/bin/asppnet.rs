use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use asppnet::data::nifti::SliceOptions;
use asppnet::data::{Modality, Normalization, SlicePolicy};
use asppnet::harness::{self, PredictOptions, Preset, RunConfig};
use asppnet::{Error, Result};

#[derive(Parser)]
#[command(name = "asppnet", version, about = "Attention UNet with ASPP: train, evaluate and predict on 2-D slices")]
struct Cli {
    /// JSON config file with dotted keys (e.g. {"train.epochs": 15}).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (also ASPPNET_OUTPUT_DIR).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    All,
    MaxTumor,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Minmax,
    Zscore,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Training manifest; without it a synthetic dataset is generated.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("model.variant", self.model.clone());
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.lr", self.lr.map(|v| v.to_string()));
        put("train.seed", self.seed.map(|v| v.to_string()));
        put("train.precision", self.precision.clone());
        put("data.train", path(&self.train));
        put("data.val", path(&self.val));
        put("data.test", path(&self.test));
        o
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoints plus a run report.
    Train(TrainFlags),
    /// Score a checkpoint on a manifest (or the configured test split).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Segment TEN1 images into PGM masks.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write the attention coefficient maps.
        #[arg(long)]
        attention: bool,
        /// Also write the probability map.
        #[arg(long)]
        probabilities: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train all four variants on the same data and tabulate test metrics.
    Compare(TrainFlags),
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Write a synthetic dataset (images, masks, manifest).
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Extract axial slices from NIfTI-1 volumes.
    Slices {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value = "minmax")]
        normalization: NormArg,
        #[arg(long, default_value = "t1c")]
        modality: String,
        /// Sample id prefix; defaults to the image file stem.
        #[arg(long)]
        prefix: Option<String>,
    },
}

fn config(cli: &Cli, extra: Vec<String>) -> Result<RunConfig> {
    let preset = cli.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    });
    let mut overrides = cli.set.clone();
    overrides.extend(extra);
    if let Some(d) = &cli.output_dir {
        overrides.push(format!("output.dir={}", d.display()));
    }
    RunConfig::resolve(preset, cli.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    let mut progress = |line: &str| eprintln!("{line}");
    match &cli.command {
        Command::Train(flags) => {
            let cfg = config(&cli, flags.overrides())?;
            let report = harness::cmd_train(&cfg, &mut progress)?;
            print!("{}", report.to_text());
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Compare(flags) => {
            let cfg = config(&cli, flags.overrides())?;
            let report = harness::cmd_compare(&cfg, &mut progress)?;
            print!("{}", report.to_table());
        }
        Command::Eval { checkpoint, manifest, threshold } => {
            let extra = threshold.map(|t| vec![format!("eval.threshold={t}")]).unwrap_or_default();
            let cfg = config(&cli, extra)?;
            cfg.validate()?;
            let out = cli.output_dir.as_deref();
            let report = harness::cmd_eval(checkpoint, manifest.as_deref(), &cfg, out)?;
            print!("{}", report.to_table());
        }
        Command::Predict { checkpoint, out, threshold, attention, probabilities, inputs } => {
            let opts = PredictOptions {
                threshold: *threshold,
                probabilities: *probabilities,
                attention: *attention,
            };
            for r in harness::cmd_predict(checkpoint, inputs, out, opts)? {
                println!("{} -> {} ({} foreground pixels)", r.input.display(), r.mask.display(), r.foreground);
                for a in &r.attention {
                    println!("  attention {}", a.display());
                }
            }
        }
        Command::Gradcheck { seeds } => {
            let (results, table) = harness::cmd_gradcheck(seeds)?;
            print!("{table}");
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                eprintln!("error: {failed} of {} gradient cases failed", results.len());
                std::process::exit(3);
            }
            println!("all {} cases passed", results.len());
        }
        Command::Synth { count, out, seed, size } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(format!("synth.seed={s}"));
            }
            if let Some(s) = size {
                extra.push(format!("model.image_size={s}"));
            }
            let cfg = config(&cli, extra)?;
            let synth = cfg.synth_config();
            let manifest = harness::cmd_synth(&synth, *count, out)?;
            println!("wrote {count} samples, manifest {}", manifest.display());
        }
        Command::Slices { image, label, out, policy, normalization, modality, prefix } => {
            let opts = SliceOptions {
                policy: match policy {
                    PolicyArg::All => SlicePolicy::AllSlices,
                    PolicyArg::MaxTumor => SlicePolicy::MaxTumorArea,
                },
                normalization: match normalization {
                    NormArg::Minmax => Normalization::MinMax,
                    NormArg::Zscore => Normalization::ZScore,
                },
                prefix: prefix.clone().unwrap_or_else(|| volume_stem(image)),
                modality: modality.parse::<Modality>().map_err(|e| Error::Config(e.to_string()))?,
            };
            let manifest = harness::cmd_slices(image, label.as_deref(), &opts, out)?;
            println!("manifest {}", manifest.display());
        }
    }
    Ok(())
}

fn volume_stem(p: &std::path::Path) -> String {
    let name = p.file_name().map_or_else(|| "volume".into(), |n| n.to_string_lossy().into_owned());
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
