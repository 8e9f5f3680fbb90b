// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pace_core::audio::{ingest, read_wav, write_wav};
use pace_core::codec::{read_codes, write_codes, AudioClip, SAMPLE_RATE};
use pace_core::eval::{contour_of, prosody_transfer_report, transfer_pairs, write_contour_dump, Variant};
use pace_core::pipeline::{
    generate_synthetic_dataset, prerequisite, standard_corpus, train_reference, Checkpoint, Config, Dataset,
    PaceState, StageTag, CONFIG_ENV,
};
use pace_core::prosody::ProsodyFeatures;
use pace_core::PaceError;

const USAGE_FORMS: &str = "valid forms:
  pace synth
  pace train-ref
  pace train --stage {1,2,3} [--variant full|no-mi|no-scale|no-recon-e]
  pace infer --target A.wav --prosody B.wav [--output out.wav]
  pace eval --report [--variants full,no-mi,...] [--pairs N]
  pace codes encode X.wav [--prosody P.wav] [--output X.codes]
  pace codes decode X.codes [--output X.wav]";

#[derive(Parser, Debug)]
#[command(name = "pace", version, about = "Prosody-aware codec encoder: training, conversion and evaluation")]
struct Cli {
    /// Configuration file (TOML). Defaults to $PACE_CONFIG, then the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus as WAV files plus a manifest.
    Synth,
    /// Train the reference codec that supplies embedding targets.
    TrainRef,
    /// Run one PACE training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Convert a target clip to follow the pitch of a prosody prompt.
    Infer {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        prosody: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Prosody-matching evaluation over the held-out split.
    Eval(EvalArgs),
    /// Encode audio to a codes container or decode one back.
    #[command(subcommand)]
    Codes(CodesCommand),
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Write the prosody-transfer report.
    #[arg(long)]
    report: bool,
    #[arg(long, value_delimiter = ',', default_value = "full,no-mi,no-scale,no-recon-e")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    /// Also write gnuplot contour dumps for each pair of the full model.
    #[arg(long)]
    contours: bool,
}

#[derive(Subcommand, Debug)]
enum CodesCommand {
    Encode {
        input: PathBuf,
        /// Prosody prompt; the input's own prosody when absent.
        #[arg(long)]
        prosody: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    Decode {
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
}

/// Exclusive claim on the output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".pace.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another pace command (remove {} if stale)", dir.display(), path.display()))?;
        Ok(Self(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    fn reference(&self) -> PathBuf {
        self.checkpoints().join("reference.pack")
    }

    fn stage(&self, variant: Variant, stage: StageTag) -> PathBuf {
        let k = match stage {
            StageTag::Reference => return self.reference(),
            StageTag::Stage1 => 1,
            StageTag::Stage2 => 2,
            StageTag::Stage3 => 3,
        };
        self.checkpoints().join(variant.name()).join(format!("stage{k}.pack"))
    }

    fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => Config::load(&p)?,
        None => Config::preset(&cli.preset)?,
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn missing(stage: StageTag) -> PaceError {
    let needed = match stage {
        StageTag::Reference => "train-ref",
        StageTag::Stage1 => "train --stage 1",
        StageTag::Stage2 => "train --stage 2",
        StageTag::Stage3 => "train --stage 3",
    };
    PaceError::Dependency {
        what: format!("{} checkpoint", stage.name()),
        needed: needed.into(),
    }
}

fn load_checkpoint(path: &Path, stage: StageTag) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(missing(stage).into());
    }
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn load_model(layout: &Layout, variant: Variant, cfg: &Config) -> Result<PaceState> {
    let ckpt = load_checkpoint(&layout.stage(variant, StageTag::Stage3), StageTag::Stage3)?;
    Ok(PaceState::from_checkpoint(&ckpt, cfg)?)
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path, log: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    ckpt.save(path)?;
    fs::create_dir_all(log.parent().expect("log dir"))?;
    ckpt.history.write_csv(File::create(log)?)?;
    Ok(())
}

fn read_clip(path: &Path) -> Result<AudioClip> {
    let (samples, rate) = read_wav(path)?;
    if rate != SAMPLE_RATE {
        bail!("{} is {rate} Hz; codes operate on {SAMPLE_RATE} Hz audio", path.display());
    }
    let n = samples.len() / pace_core::codec::CODEC_HOP * pace_core::codec::CODEC_HOP;
    Ok(AudioClip::new(samples[..n].to_vec(), rate))
}

fn synth(cfg: &Config) -> Result<()> {
    let dir = cfg.output_dir.join("data");
    fs::create_dir_all(&dir)?;
    let plan = standard_corpus(&cfg.data);
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    manifest.write_record(["file", "split", "timbre", "contour"])?;
    for (split, items, seed) in [("train", &plan.train, cfg.seed), ("test", &plan.test, cfg.seed.wrapping_add(1))] {
        let specs: Vec<_> = items.iter().map(|i| i.spec.clone()).collect();
        for (item, clip) in items.iter().zip(generate_synthetic_dataset(&specs, seed)?) {
            let name = format!("{split}_t{:02}_c{:02}.wav", item.timbre, item.contour);
            write_wav(&dir.join(&name), &clip.clip)?;
            let f0 = dir.join(name.replace(".wav", ".f0.csv"));
            let mut w = csv::Writer::from_path(f0)?;
            w.write_record(["frame_index", "true_f0_hz"])?;
            for (t, f) in clip.f0_hz.iter().enumerate() {
                w.write_record([t.to_string(), format!("{f:.4}")])?;
            }
            w.flush()?;
            manifest.write_record([name, split.to_string(), item.timbre.to_string(), item.contour.to_string()])?;
        }
    }
    manifest.flush()?;
    println!("wrote {} clips to {}", plan.train.len() + plan.test.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let layout = Layout {
        root: cfg.output_dir.clone(),
    };
    let _lock = DirLock::acquire(&layout.root)?;
    match cli.command {
        Command::Synth => synth(&cfg)?,
        Command::TrainRef => {
            let data = Dataset::from_config(&cfg)?;
            let ckpt = train_reference(&data, &cfg)?;
            save_checkpoint(&ckpt, &layout.reference(), &layout.log("reference"))?;
            println!("reference codec: {}", ckpt.meta("reference_hash")?);
        }
        Command::Train { stage, variant } => {
            let variant = Variant::parse(&variant)?;
            let stage = [StageTag::Stage1, StageTag::Stage2, StageTag::Stage3][stage as usize - 1];
            let needed = prerequisite(variant, stage)?;
            let mut state = if needed == StageTag::Reference {
                let r = load_checkpoint(&layout.reference(), StageTag::Reference)?;
                PaceState::initial(&r, variant, &cfg)?
            } else {
                let mut path = layout.stage(variant, needed);
                // Stage 1 is shared by the full and no-mi variants.
                if variant == Variant::NoMi && !path.exists() {
                    path = layout.stage(Variant::Full, needed);
                }
                let ckpt = load_checkpoint(&path, needed)?;
                PaceState::from_checkpoint(&ckpt, &cfg)?.as_variant(variant)?
            };
            let data = Dataset::from_config(&cfg)?;
            let ckpt = state.run_stage(stage, &data, &cfg)?;
            let k = stage as u8;
            save_checkpoint(&ckpt, &layout.stage(variant, stage), &layout.log(&format!("{}-stage{k}", variant.name())))?;
            for (step, v) in &state.probe_recon_e {
                println!("probe L_recon^e at step {step}: {v:.6e}");
            }
        }
        Command::Infer {
            target,
            prosody,
            output,
            variant,
        } => {
            let model = load_model(&layout, Variant::parse(&variant)?, &cfg)?;
            let t = ingest(&target, cfg.seed)?;
            let p = ingest(&prosody, cfg.seed)?;
            let out = model.prosody_swap_inference(&t.clip, &p.clip)?;
            let path = output.unwrap_or_else(|| layout.root.join("out.wav"));
            write_wav(&path, &out)?;
            println!("wrote {} samples to {}", out.len(), path.display());
        }
        Command::Eval(args) => {
            if !args.report {
                bail!(UsageError("eval needs --report".into()));
            }
            let variants = args.variants.iter().map(|v| Variant::parse(v)).collect::<pace_core::Result<Vec<_>>>()?;
            let models = variants
                .iter()
                .map(|v| load_model(&layout, *v, &cfg).map(|m| (*v, m)))
                .collect::<Result<Vec<_>>>()?;
            let data = Dataset::from_config(&cfg)?;
            let clips: Vec<_> = data.test.iter().map(|c| c.clip.clone()).collect();
            let pairs = transfer_pairs(&clips, &data.test_meta, args.pairs)?;
            let refs: Vec<_> = models.iter().map(|(v, m)| (*v, m)).collect();
            let report = prosody_transfer_report(&refs, &pairs)?;
            let path = layout.root.join("report.csv");
            report.write_csv(File::create(&path)?)?;
            if args.contours {
                let dir = layout.root.join("contours");
                fs::create_dir_all(&dir)?;
                let (v, model) = &refs[0];
                for (i, p) in pairs.iter().enumerate() {
                    let out = contour_of(&model.prosody_swap_inference(&p.target, &p.matched)?)?;
                    let prompt = contour_of(&p.matched)?;
                    let f = File::create(dir.join(format!("{}_pair{i:02}.dat", v.name())))?;
                    write_contour_dump(f, &[("output", &out), ("prompt", &prompt)])?;
                }
            }
            for r in &report.rows {
                println!(
                    "{:<11} {:<14} {:.4} over {} pairs",
                    r.variant.name(),
                    r.prosody_source.name(),
                    r.mean_distance,
                    r.pair_count
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Codes(CodesCommand::Encode {
            input,
            prosody,
            output,
            variant,
        }) => {
            let model = load_model(&layout, Variant::parse(&variant)?, &cfg)?;
            let clip = read_clip(&input)?;
            let prompt = match prosody {
                Some(p) => read_clip(&p)?,
                None => clip.clone(),
            };
            let features = ProsodyFeatures::extract(&prompt)?.fit_to(clip.len() / pace_core::codec::FRAME_HOP);
            let codes = pace_core::tensor::no_grad(|| model.codec.encode_codes(&clip, &features))?;
            let path = output.unwrap_or_else(|| input.with_extension("codes"));
            write_codes(File::create(&path)?, &codes)?;
            println!("wrote {} frames × {} codebooks to {}", codes.frames(), codes.stages, path.display());
        }
        Command::Codes(CodesCommand::Decode { input, output, variant }) => {
            let model = load_model(&layout, Variant::parse(&variant)?, &cfg)?;
            let codes = read_codes(File::open(&input).with_context(|| format!("opening {}", input.display()))?)?;
            let clip = pace_core::tensor::no_grad(|| model.codec.decode_codes(&codes))?;
            let path = output.unwrap_or_else(|| input.with_extension("wav"));
            write_wav(&path, &clip)?;
            println!("wrote {} samples to {}", clip.len(), path.display());
        }
    }
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\n{USAGE_FORMS}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<PaceError>()) {
        Some(PaceError::Config(_)) => 2,
        Some(PaceError::Dependency { .. }) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{USAGE_FORMS}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
