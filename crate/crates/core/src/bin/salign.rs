//! Command-line surface: dataset generation, warm-up, GRPO training, and
//! the evaluation protocols, all seeded and reproducible.

use clap::{Args, Parser, Subcommand};
use salign_core::data::{gen_dataset, read_dataset, split_samples, DataSample, TaskConfig};
use salign_core::error::{Error, Result};
use salign_core::eval::{
    counterfactual_report, evaluate_pg_sample, evaluate_sample, EvalReport, PgReport,
    DEFAULT_FRACTIONS,
};
use salign_core::grpo::{
    train, warmup, Hyperparams, PolicyState, RatioLevel, TrainSinks, WarmupConfig,
};
use salign_core::model::{
    forward_with_trace, generate, init_model, load_checkpoint, save_checkpoint, ModelConfig,
    Segment,
};
use salign_core::render::render_heatmap;
use salign_core::saliency::{holistic_saliency_map, SaliencyMap};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Output root fallback when --out is not given.
const OUT_ENV: &str = "SALIGN_OUT";

#[derive(Parser)]
#[command(
    name = "salign",
    version,
    about = "Toy multimodal decoder with saliency-aligned policy training",
    after_help = "Output paths default to $SALIGN_OUT (or ./out) plus a per-command subdirectory."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Master seed for this command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON config file overriding the default model/task settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $SALIGN_OUT or ./out, plus a subcommand
    /// specific subdirectory).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self, sub: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| "out".into());
                root.join(sub)
            }
        }
    }
}

/// On-disk run configuration; every field falls back to the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    task: TaskConfig,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            let cfg: RunConfig = serde_json::from_str(&raw)?;
            cfg.model.validate()?;
            Ok(cfg)
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grounded-VQA dataset (images, questions, boxes).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Total number of samples (train + test).
        #[arg(long, default_value_t = 4500)]
        n: usize,
        /// Test-split size (default: n / 9).
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Supervised warm-up on the scripted responses; writes a checkpoint.
    Warmup {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Group-relative policy optimization from a warm-up checkpoint.
    TrainGrpo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Starting (and reference) checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        group_size: usize,
        #[arg(long, default_value_t = 0.2)]
        eps_clip: f64,
        #[arg(long, default_value_t = 0.001)]
        beta: f64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        /// Importance-ratio granularity: token or sequence.
        #[arg(long, value_enum, default_value_t = RatioArg::Token)]
        ratio_level: RatioArg,
        /// Intermediate checkpoint cadence (0 = final only).
        #[arg(long, default_value_t = 0)]
        ckpt_every: usize,
        /// Ablation: drop the saliency reward component.
        #[arg(long)]
        no_saliency_reward: bool,
    },
    /// Deletion/insertion faithfulness curves on the test split.
    EvalFaithfulness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Perturbation fractions, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = DEFAULT_FRACTIONS)]
        fractions: Vec<f64>,
        /// Evaluate only the first N test samples (0 = all).
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Pointing game and energy recall on the test split.
    EvalPg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Accuracy under foreground/background Gaussian noise.
    EvalCounterfactual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Noise standard deviations, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = vec![0.25, 0.5, 1.0])]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Render the holistic saliency heatmap for one sample.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample id to render.
        #[arg(long)]
        id: u64,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

fn load_test_samples(data: &Path, n: usize) -> Result<Vec<DataSample>> {
    let (manifest, samples) = read_dataset(data)?;
    let (_, test) = split_samples(&manifest, &samples);
    let take = if n == 0 { test.len() } else { n.min(test.len()) };
    Ok(test.into_iter().take(take).cloned().collect())
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum RatioArg {
    Token,
    Sequence,
}

impl From<RatioArg> for RatioLevel {
    fn from(r: RatioArg) -> Self {
        match r {
            RatioArg::Token => RatioLevel::Token,
            RatioArg::Sequence => RatioLevel::Sequence,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common, n, n_test } => {
            let cfg = load_config(&common)?;
            let out = common.out_dir("dataset");
            let n_test = n_test.unwrap_or(n / 9);
            if n_test > n {
                return Err(Error::Usage(format!("n_test {} exceeds n {}", n_test, n)));
            }
            let (manifest, samples) =
                gen_dataset(&cfg.model, &cfg.task, n - n_test, n_test, common.seed)?;
            salign_core::data::write_dataset(&out, &manifest, &samples)?;
            println!(
                "wrote {} samples ({} train / {} test) to {}",
                n,
                n - n_test,
                n_test,
                out.display()
            );
            Ok(())
        }
        Cmd::Warmup { common, data, steps, batch, lr } => {
            let cfg = load_config(&common)?;
            let out = common.out_dir("warmup");
            std::fs::create_dir_all(&out)?;
            let (manifest, samples) = read_dataset(&data)?;
            let (train_split, _) = split_samples(&manifest, &samples);
            let train_samples: Vec<DataSample> = train_split.into_iter().cloned().collect();
            let mut params = init_model(&cfg.model, common.seed)?;
            let losses = warmup(
                &mut params,
                &train_samples,
                &WarmupConfig { steps, batch, lr, seed: common.seed },
            )?;
            save_checkpoint(&params, &out.join("warmup.json"))?;
            let mut log = std::fs::File::create(out.join("warmup_loss.jsonl"))?;
            for (step, loss) in losses.iter().enumerate() {
                writeln!(log, "{}", serde_json::json!({ "step": step, "loss": loss }))?;
            }
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("warm-up cross-entropy {:.4} -> {:.4}", first, last);
            }
            println!("checkpoint: {}", out.join("warmup.json").display());
            Ok(())
        }
        Cmd::TrainGrpo {
            common,
            data,
            init,
            steps,
            group_size,
            eps_clip,
            beta,
            lr,
            temperature,
            max_new,
            ratio_level,
            ckpt_every,
            no_saliency_reward,
        } => {
            let out = common.out_dir("grpo");
            std::fs::create_dir_all(&out)?;
            let (manifest, samples) = read_dataset(&data)?;
            let (train_split, _) = split_samples(&manifest, &samples);
            let train_samples: Vec<DataSample> = train_split.into_iter().cloned().collect();
            let params = load_checkpoint(&init)?;
            let hp = Hyperparams {
                group_size,
                eps_clip,
                beta,
                lr,
                temperature,
                steps,
                seed: common.seed,
                max_new,
                ratio_level: ratio_level.into(),
                ckpt_every,
                use_saliency_reward: !no_saliency_reward,
            };
            let mut state = PolicyState::new(params, hp.lr);
            let mut step_log = std::fs::File::create(out.join("train_log.jsonl"))?;
            let mut rollout_log = std::fs::File::create(out.join("rollouts.jsonl"))?;
            let mut sinks = TrainSinks {
                step_log: Some(&mut step_log),
                rollout_log: Some(&mut rollout_log),
                ckpt_dir: Some(out.clone()),
            };
            let records = train(&mut state, &train_samples, &hp, &mut sinks)?;
            save_checkpoint(&state.theta, &out.join("final.json"))?;
            if let Some(last) = records.last() {
                println!(
                    "step {}: mean reward {:.3} (accuracy {:.3}, format {:.3}, saliency {:.3})",
                    last.step, last.mean_reward, last.mean_accuracy, last.mean_format, last.mean_saliency
                );
            }
            println!("checkpoint: {}", out.join("final.json").display());
            Ok(())
        }
        Cmd::EvalFaithfulness { common, data, ckpt, fractions, n, max_new } => {
            let out = common.out_dir("eval-faithfulness");
            let params = load_checkpoint(&ckpt)?;
            let samples = load_test_samples(&data, n)?;
            let mut evals = Vec::with_capacity(samples.len());
            for s in &samples {
                evals.push(evaluate_sample(&params, s, &fractions, max_new)?);
            }
            let report = EvalReport::build(fractions, evals)?;
            write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            write_text(&out.join("report.csv"), &report.to_csv())?;
            println!(
                "deletion {:?} / insertion {:?} over {} samples",
                report.aggregates.deletion,
                report.aggregates.insertion,
                report.samples.len()
            );
            println!("report: {}", out.join("report.json").display());
            Ok(())
        }
        Cmd::EvalPg { common, data, ckpt, n, max_new } => {
            let out = common.out_dir("eval-pg");
            let params = load_checkpoint(&ckpt)?;
            let samples = load_test_samples(&data, n)?;
            let mut evals = Vec::with_capacity(samples.len());
            for s in &samples {
                evals.push(evaluate_pg_sample(&params, s, max_new)?);
            }
            let report = PgReport::build(evals)?;
            write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            write_text(&out.join("report.csv"), &report.to_csv())?;
            println!("pg {:.4}, energy-pg {:.4} over {} samples", report.pg, report.energy_pg, report.samples.len());
            println!("report: {}", out.join("report.json").display());
            Ok(())
        }
        Cmd::EvalCounterfactual { common, data, ckpt, sigmas, n, max_new } => {
            let out = common.out_dir("eval-counterfactual");
            let params = load_checkpoint(&ckpt)?;
            let samples = load_test_samples(&data, n)?;
            let report = counterfactual_report(&params, &samples, &sigmas, common.seed, max_new)?;
            write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            write_text(&out.join("report.csv"), &report.to_csv())?;
            println!(
                "clean {:.4}; foreground {:?}; background {:?}",
                report.clean_accuracy, report.foreground_accuracy, report.background_accuracy
            );
            println!("report: {}", out.join("report.json").display());
            Ok(())
        }
        Cmd::Render { common, data, ckpt, id, max_new } => {
            let out = common.out_dir("render");
            let params = load_checkpoint(&ckpt)?;
            let (_, samples) = read_dataset(&data)?;
            let sample = samples
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::Index(format!("no sample with id {}", id)))?;
            let cfg = &params.config;
            let response =
                generate(&params, &sample.image, &sample.prompt_sequence(cfg), 0.0, max_new, common.seed)?;
            let map = if response.has(Segment::Think) && response.has(Segment::Answer) {
                let (_, trace) = forward_with_trace(&params, &sample.image, &response)?;
                holistic_saliency_map(&params, &trace, &response)?
            } else {
                SaliencyMap::zeros(cfg.grid_rows, cfg.grid_cols)
            };
            std::fs::create_dir_all(out.join("heatmaps"))?;
            let overlay = render_heatmap(&map, &sample.image, &sample.boxes)?;
            overlay.save_ppm(&out.join("heatmaps").join(format!("{}.ppm", id)))?;
            map.save_pgm(&out.join(format!("map_{}.pgm", id)))?;
            write_text(&out.join(format!("map_{}.json", id)), &map.to_json()?)?;
            println!("heatmap: {}", out.join("heatmaps").join(format!("{}.ppm", id)).display());
            Ok(())
        }
    }
}

fn main() -> std::process::ExitCode {
    // clap exits with code 2 on usage errors (unknown flags/subcommands).
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::ExitCode::FAILURE
        }
    }
}
