use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gregait::eval::{cross_domain_run, extract_embeddings, Embedder, EvalReport, ProtocolConfig};
use gregait::head::write_embedding_cache;
use gregait::ingest::{load_manifest, DatasetManifest, DiskFrames, SequenceRecord, Split};
use gregait::model::build_extractor;
use gregait::synth::{write_dataset, SynthConfig};
use gregait::tools::{
    feature_maps, fit_pca, grad_cam, render_pca_rgb, run_ablation, save_gray, save_rgb, AblationAxis, AblationData,
    CamLayer, FeatureKind,
};
use gregait::train::{load_model, read_log, Checkpoint, RunOutputs, TrainConfig, TrainData, Trainer};

#[derive(Parser)]
#[command(name = "gregait", version, about = "Gait recognition on frozen vision-transformer features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Reference,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Training config JSON; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Override one config field, e.g. `--set lr=0.05` (value is JSON).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => match self.preset {
                Preset::Desk => TrainConfig::desk(),
                Preset::Reference => TrainConfig::reference(),
            },
        };
        if !self.overrides.is_empty() {
            let mut json = serde_json::to_value(&cfg)?;
            for kv in &self.overrides {
                let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
                if json.get(k).is_none() {
                    bail!("unknown config field `{k}`");
                }
                let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
                json[k] = value;
            }
            cfg = serde_json::from_value(json).context("applying --set overrides")?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Gallery,
    Probe,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic walking benchmark to PNG frames plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Added to every pixel (domain shift).
        #[arg(long, default_value_t = 0.0)]
        brightness: f64,
    },
    /// Train from a manifest; writes checkpoints and a JSON-lines log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Stop after this many iterations (default: the config's total).
        #[arg(long)]
        iters: Option<usize>,
        /// Continue from a checkpoint; config flags are ignored.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, env = "GREGAIT_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under a protocol on its own domain.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on another dataset without adaptation.
    CrossEval(EvalArgs),
    /// Write embeddings of a split to an embedding cache file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "GREGAIT_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Render f_c, f_m, f_ap and f_de of a sequence as PCA-RGB images.
    VizPca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Sequence key `id/condition/view/seq`.
        #[arg(long)]
        sequence: String,
        #[arg(long)]
        out: PathBuf,
        /// Fit the bases on this split instead of the sequence alone.
        #[arg(long, value_enum)]
        fit_split: Option<SplitArg>,
        #[arg(long, default_value_t = gregait::tools::MAX_PCA_PIXELS)]
        max_pixels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "GREGAIT_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Grad-CAM maps of a sequence at one head layer.
    VizCam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sequence: String,
        /// head-B1-ap, head-B1-de or head-fused.
        #[arg(long, default_value = "head-fused")]
        layer: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "GREGAIT_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Short trainings that toggle branches or regularizers, tabulated.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value = "synthetic")]
        protocol: String,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long, env = "GREGAIT_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Denoising,
    Branches,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Protocol JSON file or bundled name (ccpg, synthetic).
    #[arg(long, default_value = "synthetic")]
    protocol: String,
    /// Directory for report.json and report.txt (default: beside the
    /// checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "GREGAIT_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn manifest_at(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path, false).with_context(|| format!("loading manifest {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn records(m: &DatasetManifest, split: SplitArg) -> Vec<&SequenceRecord> {
    let want = match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Gallery => Some(Split::Gallery),
        SplitArg::Probe => Some(Split::Probe),
        SplitArg::All => None,
    };
    m.entries.iter().filter(|r| want.is_none_or(|s| r.split == s)).collect()
}

fn find_sequence<'a>(m: &'a DatasetManifest, key: &str) -> Result<&'a SequenceRecord> {
    m.entries
        .iter()
        .find(|r| r.key() == key)
        .ok_or_else(|| anyhow!("sequence `{key}` is not in the manifest"))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            identities,
            frames,
            seed,
            brightness,
        } => {
            let cfg = SynthConfig {
                identities,
                frames_per_seq: frames,
                seed,
                brightness,
                ..SynthConfig::default()
            };
            cfg.validate()?;
            create_dir(&out)?;
            let path = write_dataset(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Train {
            cfg,
            manifest,
            out,
            iters,
            resume,
            cache_dir,
        } => {
            let m = manifest_at(&manifest)?;
            let mut trainer = match &resume {
                Some(p) => Trainer::resume(Checkpoint::load(p)?, &m)?,
                None => Trainer::new(cfg.resolve()?, &m)?,
            };
            let config = trainer.config().clone();
            create_dir(&out)?;
            config.save(&out.join("config.json"))?;
            let extractor = build_extractor(&config, cache_dir.as_deref())?;
            let data = TrainData {
                manifest: &m,
                source: &DiskFrames,
                extractor: &extractor,
            };
            let outputs = RunOutputs {
                log: Some(out.join("log.jsonl")),
                checkpoint_dir: Some(out.clone()),
            };
            let until = iters.map_or(config.total_iters, |n| trainer.iteration() + n);
            let before = read_log(&out.join("log.jsonl")).map(|l| l.len()).unwrap_or(0);
            trainer.run(&data, until, &outputs)?;
            for r in read_log(&out.join("log.jsonl"))?.iter().skip(before) {
                eprintln!(
                    "iter {:>6}  lr {:.2e}  tri {:.4}  ce {:.4}  rec {:.4}  smo {:.4}  div {:.4}  total {:.4}",
                    r.iter, r.lr, r.l_tri, r.l_ce, r.l_rec, r.l_smo, r.l_div, r.l_total
                );
            }
            println!("{}", out.join("last.bin").display());
        }
        Command::Eval(args) | Command::CrossEval(args) => {
            let m = manifest_at(&args.manifest)?;
            let protocol = ProtocolConfig::resolve(&args.protocol)?;
            let report = cross_domain_run(&args.checkpoint, &m, &DiskFrames, &protocol, args.cache_dir.as_deref())?;
            let dir = match args.out {
                Some(d) => d,
                None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            emit_report(&report, &dir)?;
        }
        Command::Extract {
            checkpoint,
            manifest,
            split,
            out,
            cache_dir,
        } => {
            let m = manifest_at(&manifest)?;
            let (ck, model) = load_model(&checkpoint)?;
            let extractor = build_extractor(&ck.config, cache_dir.as_deref())?;
            let embedder = Embedder {
                model: &model,
                store: &ck.store,
                extractor: &extractor,
                source: &DiskFrames,
            };
            let recs = records(&m, split);
            if recs.is_empty() {
                eprintln!("warning: the split has no sequences");
            }
            let ex = extract_embeddings(&embedder, &m, &recs);
            for f in &ex.failures {
                eprintln!("warning: {}: {}", f.key, f.error);
            }
            write_embedding_cache(&out, &ex.embeddings)?;
            println!("{} embeddings, {} failures -> {}", ex.embeddings.len(), ex.failures.len(), out.display());
        }
        Command::VizPca {
            checkpoint,
            manifest,
            sequence,
            out,
            fit_split,
            max_pixels,
            seed,
            cache_dir,
        } => {
            let m = manifest_at(&manifest)?;
            let (ck, model) = load_model(&checkpoint)?;
            let extractor = build_extractor(&ck.config, cache_dir.as_deref())?;
            let embedder = Embedder {
                model: &model,
                store: &ck.store,
                extractor: &extractor,
                source: &DiskFrames,
            };
            let target = find_sequence(&m, &sequence)?;
            let fit_records = match fit_split {
                Some(s) => records(&m, s),
                None => vec![target],
            };
            let target_maps = feature_maps(&model, &ck.store, &embedder.sequence_fc(&m, target)?)?;
            let mut fit_maps: Vec<Vec<(FeatureKind, _)>> = Vec::new();
            for r in &fit_records {
                fit_maps.push(feature_maps(&model, &ck.store, &embedder.sequence_fc(&m, r)?)?);
            }
            create_dir(&out)?;
            for (kind, maps) in &target_maps {
                let views: Vec<_> = fit_maps
                    .iter()
                    .flat_map(|set| set.iter().filter(|(k, _)| k == kind))
                    .flat_map(|(_, a)| a.outer_iter())
                    .collect();
                let basis = fit_pca(&views, max_pixels, seed)?;
                for (t, frame) in maps.outer_iter().enumerate() {
                    let img = render_pca_rgb(frame, &basis)?;
                    save_rgb(&img, &out.join(format!("{}_{t:03}.png", kind.name())))?;
                }
                println!(
                    "{}: explained variance {:.3} {:.3} {:.3}",
                    kind.name(),
                    basis.explained[0],
                    basis.explained[1],
                    basis.explained[2]
                );
            }
        }
        Command::VizCam {
            checkpoint,
            manifest,
            sequence,
            layer,
            out,
            cache_dir,
        } => {
            let layer: CamLayer = layer.parse()?;
            let m = manifest_at(&manifest)?;
            let (ck, model) = load_model(&checkpoint)?;
            let extractor = build_extractor(&ck.config, cache_dir.as_deref())?;
            let embedder = Embedder {
                model: &model,
                store: &ck.store,
                extractor: &extractor,
                source: &DiskFrames,
            };
            let record = find_sequence(&m, &sequence)?;
            let hw = (ck.config.input_h, ck.config.input_w);
            let cam = grad_cam(&model, &ck.store, &embedder.sequence_fc(&m, record)?, layer, hw)?;
            create_dir(&out)?;
            for (t, map) in cam.maps.outer_iter().enumerate() {
                save_gray(&map.to_owned(), &out.join(format!("{layer}_{t:03}.png")))?;
            }
            println!("{} maps at {layer} -> {}", cam.maps.dim().0, out.display());
        }
        Command::Ablate {
            axis,
            manifest,
            cfg,
            iters,
            protocol,
            out,
            cache_dir,
        } => {
            let m = manifest_at(&manifest)?;
            let mut base = cfg.resolve()?;
            if let Some(n) = iters {
                base.total_iters = n;
                base.milestones = vec![n * 6 / 10, n * 9 / 10];
                base.milestones.retain(|&x| x > 0 && x < n);
                base.milestones.dedup();
                base.validate()?;
            }
            let protocol = ProtocolConfig::resolve(&protocol)?;
            let extractor = build_extractor(&base, cache_dir.as_deref())?;
            let data = AblationData {
                manifest: &m,
                source: &DiskFrames,
                extractor: &extractor,
                protocol: &protocol,
            };
            let axis = match axis {
                AxisArg::Denoising => AblationAxis::Denoising,
                AxisArg::Branches => AblationAxis::Branches,
            };
            let table = run_ablation(axis, &base, &data, |row| {
                eprintln!("{}: mean rank-1 {:?} ({:.0} s)", row.variant, row.report.mean, row.seconds);
            })?;
            create_dir(&out)?;
            let text = table.to_table();
            write_text(&out.join("ablation.txt"), &text)?;
            write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    if !dir.as_os_str().is_empty() {
        create_dir(dir)?;
    }
    for w in &report.coverage.warnings {
        eprintln!("warning: {w}");
    }
    let text = report.to_table();
    write_text(&dir.join("report.txt"), &text)?;
    report.save_json(&dir.join("report.json"))?;
    print!("{text}");
    Ok(())
}
