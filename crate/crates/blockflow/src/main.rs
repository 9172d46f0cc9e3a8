use clap::{Parser, Subcommand};
use std::path::PathBuf;

use blockflow::cli::{
    cmd_ablate, cmd_bench, cmd_data, cmd_dpo, cmd_eval, cmd_generate, cmd_train, AblateArgs,
    BenchArgs, DpoArgs, DpoMode, EvalArgs, ExperimentConfig, GenerateArgs,
};
use blockflow::synthdata::ToySpec;

#[derive(Parser)]
#[command(
    name = "blockflow",
    about = "Block flow matching on a synthetic latent-song task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Data {
        /// ToySpec JSON file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from an experiment config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one sample from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        style: usize,
        /// Lyric tokens, space separated, e.g. "1 4 2".
        #[arg(long)]
        lyrics: String,
        #[arg(long, default_value_t = 16)]
        max_blocks: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        guidance_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference optimization from a base checkpoint.
    Dpo {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Pair dataset file (JSON lines). Written when --build is set.
        #[arg(long)]
        pairs: PathBuf,
        /// cppo, merge4, or single:<dimension>.
        #[arg(long, default_value = "cppo")]
        mode: String,
        /// Generate candidates and the pairs file before training.
        #[arg(long)]
        build: bool,
        /// Experiment config supplying the DPO pipeline settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or the corpus itself) with the exact oracles.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 40)]
        n_prompts: usize,
        /// Generation seeds, comma separated.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a base checkpoint against ablation variants.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        wo_repa: Option<PathBuf>,
        #[arg(long)]
        wo_cppo: Option<PathBuf>,
        #[arg(long)]
        wo_dpo: Option<PathBuf>,
        #[arg(long, default_value_t = 24)]
        n_prompts: usize,
        #[arg(long, default_value = "1,2")]
        seeds: String,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        /// Loss curves to overlay: label=path/to/metrics.jsonl (repeatable).
        #[arg(long)]
        loss_curve: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cached vs uncached generation speed comparison.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Block counts, comma separated.
        #[arg(long, default_value = "4,8,16,32")]
        ks: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>, blockflow::Error> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|e| blockflow::Error::Config(format!("bad number {t:?}: {e}")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, blockflow::Error> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| blockflow::Error::Config(format!("bad number {t:?}: {e}")))
        })
        .collect()
}

fn parse_lyrics(s: &str) -> Result<Vec<u16>, blockflow::Error> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<u16>()
                .map_err(|e| blockflow::Error::Config(format!("bad lyric token {t:?}: {e}")))
        })
        .collect()
}

fn run() -> Result<serde_json::Value, blockflow::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Data { spec, count, out } => {
            let spec = match spec {
                Some(path) => serde_json::from_str::<ToySpec>(&std::fs::read_to_string(path)?)?,
                None => ToySpec::default(),
            };
            cmd_data(&spec, count, &out)
        }
        Command::Train { config, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_train(&cfg, resume)
        }
        Command::Generate {
            ckpt,
            style,
            lyrics,
            max_blocks,
            steps,
            guidance_scale,
            seed,
            out,
        } => cmd_generate(&GenerateArgs {
            ckpt,
            style,
            lyrics: parse_lyrics(&lyrics)?,
            max_blocks,
            steps,
            guidance_scale,
            seed,
            out,
        }),
        Command::Dpo {
            base,
            corpus,
            pairs,
            mode,
            build,
            config,
            out,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            cmd_dpo(&DpoArgs {
                base,
                corpus,
                pairs,
                mode: DpoMode::parse(&mode)?,
                build,
                pipeline: cfg.dpo.clone(),
                sampler: cfg.sampler.clone(),
                out_dir: out,
            })
        }
        Command::Eval {
            ckpt,
            corpus,
            n_prompts,
            seeds,
            steps,
            out,
        } => {
            let report = cmd_eval(&EvalArgs {
                ckpt,
                corpus,
                n_prompts,
                seeds: parse_u64_list(&seeds)?,
                steps,
                out,
            })?;
            Ok(serde_json::to_value(report)?)
        }
        Command::Ablate {
            corpus,
            base,
            wo_repa,
            wo_cppo,
            wo_dpo,
            n_prompts,
            seeds,
            steps,
            loss_curve,
            out,
        } => {
            let mut loss_curves = Vec::new();
            for item in loss_curve {
                let (label, path) = item.split_once('=').ok_or_else(|| {
                    blockflow::Error::Config(format!(
                        "--loss-curve expects label=path, got {item:?}"
                    ))
                })?;
                loss_curves.push((label.to_string(), PathBuf::from(path)));
            }
            cmd_ablate(&AblateArgs {
                corpus,
                base,
                variants: vec![
                    ("wo_dpo".into(), wo_dpo),
                    ("wo_cppo".into(), wo_cppo),
                    ("wo_repa".into(), wo_repa),
                ],
                n_prompts,
                seeds: parse_u64_list(&seeds)?,
                steps,
                loss_curves,
                out_dir: out,
            })
        }
        Command::Bench {
            ckpt,
            ks,
            repeats,
            steps,
            seed,
            out,
        } => cmd_bench(&BenchArgs {
            ckpt,
            ks: parse_usize_list(&ks)?,
            repeats,
            steps,
            seed,
            out,
        }),
    }
}

fn main() {
    match run() {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Err(err) => {
            let payload = serde_json::json!({
                "error": { "kind": err.kind(), "message": err.to_string() }
            });
            eprintln!("{payload}");
            std::process::exit(1);
        }
    }
}
