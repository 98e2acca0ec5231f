//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::datasets::{detect_pose_blobs, load_dataset, save_dataset_at, synth_dataset, MaskedSample};
use crate::error::Error;
use crate::metrics::{accumulate_stats, evaluate_oks, frechet_distance, generator_ppl, pooled_features, GeneratorInpainter, GroundTruthInpainter, Inpainter};
use crate::projector::FeatureNetwork;
use crate::trainer::{build_branches, grid_latents, write_sample_grid, RunDir, Trainer};

#[derive(Debug, Parser)]
#[command(name = "posefill", version, about = "Pose-guided person inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML file merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base preset (config-a .. config-e).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location (directory or file, depending on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic stick-figure dataset.
    DataSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train, or resume training from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to `dataset.root`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Advance a checkpoint to the next resolution stage.
    Grow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a grid of corrupted input, pose overlay, and output rows.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Compute metrics and write a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of oks, fid, ppl.
        #[arg(long, default_value = "oks,fid,ppl")]
        metrics: String,
        #[arg(long, value_enum, default_value_t = Redetector::Blobs)]
        redetector: Redetector,
        #[arg(long, value_enum, default_value_t = InpainterKind::Generator)]
        inpainter: InpainterKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Redetector {
    /// Color-blob detector matched to the synthetic renderer.
    Blobs,
    /// Returns the ground-truth keypoints unchanged.
    Passthrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InpainterKind {
    Generator,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Oks,
    Fid,
    Ppl,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Oks => "oks",
            Metric::Fid => "fid",
            Metric::Ppl => "ppl",
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>, Error> {
    let mut out = Vec::new();
    for m in list.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let metric = match m {
            "oks" => Metric::Oks,
            "fid" => Metric::Fid,
            "ppl" => Metric::Ppl,
            other => return Err(Error::UnknownMetric(other.into())),
        };
        if !out.contains(&metric) {
            out.push(metric);
        }
    }
    Ok(out)
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

const CONFIG: i32 = 2;
const DATA: i32 = 3;
const RUNTIME: i32 = 4;

trait Tag<T> {
    fn tag(self, code: i32) -> Result<T, Failure>;
}

impl<T> Tag<T> for Result<T, Error> {
    fn tag(self, code: i32) -> Result<T, Failure> {
        self.map_err(|error| {
            let code = match error {
                Error::Config { .. } | Error::UnknownMetric(_) => CONFIG,
                _ => code,
            };
            Failure { code, error }
        })
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { CONFIG } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::Config {
                path: path.display().to_string(),
                message: e.to_string(),
            })
            .tag(CONFIG)?,
        None => String::new(),
    };
    let mut cfg = RunConfig::load(&text, common.preset.as_deref()).tag(CONFIG)?;
    apply_overrides(&mut cfg, common);
    cfg.validate().tag(CONFIG)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.generator.seed = seed;
    }
}

fn config_dir(common: &Common) -> PathBuf {
    common
        .config
        .as_ref()
        .and_then(|p| p.parent())
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn load_samples(root: &Path) -> Result<Vec<MaskedSample>, Failure> {
    load_dataset(root).and_then(|d| d.load_all()).tag(DATA)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String, RunConfig), Failure> {
    let (ckpt, id) = checkpoint::load(path).tag(DATA)?;
    let cfg = ckpt.config().tag(CONFIG)?;
    Ok((ckpt, id, cfg))
}

/// Dataset samples brought down to the generator's active resolution.
fn samples_at(samples: Vec<MaskedSample>, cfg: &RunConfig, level: usize) -> Result<Vec<MaskedSample>, Failure> {
    let top = cfg.generator.resolutions.len() - 1;
    let want = cfg.generator.resolutions[level];
    samples
        .into_iter()
        .map(|s| {
            if s.resolution() == want {
                return Ok(s);
            }
            if s.resolution() != cfg.generator.resolutions[top] {
                return Err(Error::ResolutionMismatch {
                    expected: want,
                    got: s.resolution(),
                });
            }
            s.downsampled(top - level)
        })
        .collect::<Result<_, _>>()
        .tag(DATA)
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::DataSynth { common, count } => {
            let cfg = resolve_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.dataset.root));
            let count = count.unwrap_or(cfg.dataset.synth_count);
            let d = &cfg.dataset;
            let samples = synth_dataset(&d.spec, cfg.seed, count, d.height, d.width);
            save_dataset_at(&out, &samples, (d.height, d.width)).tag(RUNTIME)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            resume,
            max_steps,
        } => {
            let (mut cfg, state, base) = match &resume {
                Some(path) => {
                    let (ckpt, _, cfg) = load_checkpoint(path)?;
                    (cfg, Some(ckpt.state), PathBuf::new())
                }
                None => (resolve_config(&common)?, None, config_dir(&common)),
            };
            if let Some(out) = &common.out {
                cfg.out_dir = out.display().to_string();
            }
            let branches = build_branches(&cfg, &base).tag(CONFIG)?;
            let root = data.unwrap_or_else(|| PathBuf::from(&cfg.dataset.root));
            let samples = load_samples(&root)?;
            let resume_step = state.as_ref().map(|s| s.step);
            let mut trainer = match state {
                Some(s) => Trainer::resume(cfg.clone(), branches, samples, s),
                None => Trainer::new(cfg.clone(), branches, samples),
            }
            .tag(DATA)?;
            let mut dir = RunDir::open(Path::new(&cfg.out_dir), &cfg, resume_step).tag(RUNTIME)?;
            trainer.run(&mut dir, max_steps).tag(RUNTIME)?;
            if max_steps.is_some() {
                checkpoint::save(&RunDir::latest_checkpoint(&dir.root), &trainer.config, &trainer.state).tag(RUNTIME)?;
            }
            println!("trained to step {} ({} images)", trainer.state.step, trainer.state.images_seen);
            Ok(())
        }
        Command::Grow { common, checkpoint: path } => {
            let (mut ckpt, _, cfg) = load_checkpoint(&path)?;
            let st = &mut ckpt.state;
            if st.stage + 1 >= cfg.num_stages() {
                return Err(Failure {
                    code: RUNTIME,
                    error: Error::FinalStage,
                });
            }
            st.generator.grow().tag(RUNTIME)?;
            st.stage += 1;
            let out = common.out.unwrap_or(path);
            let id = checkpoint::save(&out, &cfg, &ckpt.state).tag(RUNTIME)?;
            println!("grew to {:?}; checkpoint {id}", ckpt.state.generator.resolution());
            Ok(())
        }
        Command::Sample {
            common,
            checkpoint: path,
            data,
            count,
        } => {
            let (ckpt, _, cfg) = load_checkpoint(&path)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("samples.png"));
            let root = data.unwrap_or_else(|| PathBuf::from(&cfg.dataset.root));
            let g = &ckpt.state.generator;
            let samples = samples_at(load_samples(&root)?, &cfg, g.active_stage)?;
            if samples.len() < count {
                return Err(Failure {
                    code: DATA,
                    error: Error::DimensionMismatch {
                        expected: count,
                        got: samples.len(),
                    },
                });
            }
            let latents = grid_latents(common.seed.unwrap_or(cfg.metrics.latent_seed), count);
            write_sample_grid(&out, g, &samples[..count], &latents).tag(RUNTIME)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint: path,
            data,
            metrics,
            redetector,
            inpainter,
        } => {
            let wanted = parse_metrics(&metrics).tag(CONFIG)?;
            let (ckpt, id, cfg) = load_checkpoint(&path)?;
            let root = data.unwrap_or_else(|| PathBuf::from(&cfg.dataset.root));
            let g = &ckpt.state.generator;
            let samples = samples_at(load_samples(&root)?, &cfg, g.active_stage)?;
            let seed = common.seed.unwrap_or(cfg.metrics.latent_seed);
            let report = evaluate(&cfg, &ckpt, &id, &samples, &wanted, redetector, inpainter, seed).tag(RUNTIME)?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from).tag(RUNTIME)?;
            match &common.out {
                Some(out) => {
                    if let Some(dir) = out.parent() {
                        fs::create_dir_all(dir).map_err(Error::from).tag(RUNTIME)?;
                    }
                    fs::write(out, &text).map_err(Error::from).tag(RUNTIME)?
                }
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    id: &str,
    samples: &[MaskedSample],
    wanted: &[Metric],
    redetector: Redetector,
    inpainter: InpainterKind,
    seed: u64,
) -> Result<serde_json::Value, Error> {
    let g = &ckpt.state.generator;
    let mc = &cfg.metrics;
    let gen = GeneratorInpainter {
        state: g,
        use_ema: mc.use_ema,
        seed,
    };
    let inp: &dyn Inpainter = match inpainter {
        InpainterKind::Generator => &gen,
        InpainterKind::GroundTruth => &GroundTruthInpainter,
    };
    let mut report = BTreeMap::new();
    for &m in wanted {
        let value = match m {
            Metric::Oks => match redetector {
                Redetector::Blobs => evaluate_oks(inp, samples, |img, _| detect_pose_blobs(img, &cfg.dataset.spec), mc.batch_size)?,
                Redetector::Passthrough => evaluate_oks(inp, samples, |_, s| s.keypoints.clone(), mc.batch_size)?,
            },
            Metric::Fid => {
                let net = FeatureNetwork::desk(mc.fid_network_seed);
                let real = accumulate_stats(|x| pooled_features(&net, x), samples.iter().map(|s| s.image.clone()))?;
                let mut outputs = Vec::with_capacity(samples.len());
                for (i, chunk) in samples.chunks(mc.batch_size.max(1)).enumerate() {
                    let idx: Vec<usize> = (0..chunk.len()).map(|j| i * mc.batch_size.max(1) + j).collect();
                    outputs.extend(inp.inpaint(chunk, &idx)?);
                }
                let fake = accumulate_stats(|x| pooled_features(&net, x), outputs)?;
                frechet_distance(&real, &fake)?
            }
            Metric::Ppl => generator_ppl(g, mc.use_ema, samples, mc.ppl_epsilon, mc.ppl_pairs, seed)?,
        };
        report.insert(m.name().to_string(), serde_json::json!(value));
    }
    report.insert("config-hash".into(), serde_json::json!(cfg.hash()));
    report.insert("checkpoint-id".into(), serde_json::json!(id));
    report.insert("n".into(), serde_json::json!(samples.len()));
    Ok(serde_json::Value::Object(report.into_iter().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_lists_parse() {
        assert_eq!(parse_metrics("oks, fid,oks").unwrap(), vec![Metric::Oks, Metric::Fid]);
        assert!(matches!(parse_metrics("oks,lpips"), Err(Error::UnknownMetric(m)) if m == "lpips"));
    }

    #[test]
    fn unknown_flags_are_config_errors() {
        assert_eq!(run(["posefill", "train", "--bogus"]), CONFIG);
    }

    #[test]
    fn bad_config_key_exits_before_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "[trainer]\nbatch_sise = 3\n").unwrap();
        let out = dir.path().join("data");
        let code = run([
            OsString::from("posefill"),
            "data-synth".into(),
            "--config".into(),
            cfg.clone().into(),
            "--out".into(),
            out.clone().into(),
        ]);
        assert_eq!(code, CONFIG);
        assert!(!out.exists());
    }
}
