use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dtmerge_core::analysis::attention_maps;
use dtmerge_core::checkpoint::Checkpoint;
use dtmerge_core::dataset::{generate_dataset, DatasetQuality, OfflineDataset, DEFAULT_TRAJECTORIES};
use dtmerge_core::dt::{evaluate, train, DtModel, OptimConfig, TrainConfig, DEFAULT_CONTEXT, DEFAULT_EPISODES};
use dtmerge_core::env::{rollout, EnvKind, Quality, ScriptedPolicy};
use dtmerge_core::grid::{run_grid, GridConfig};
use dtmerge_core::io::write_atomic;
use dtmerge_core::lm::{
    cluster_token_embeddings, cotrain, dt_from_lm, lm_arch, pretrain_lm, CoTrainConfig, CoTrainRun, Corpus, LmModel,
    LmTrainConfig, DEFAULT_CORPUS_CHARS,
};
use dtmerge_core::merge::{interpolate, perturb_attention, PerturbMode};
use dtmerge_core::mff::{merge_freeze_finetune, MffConfig, MultiTaskBundle};
use dtmerge_core::report::EvalReport;
use dtmerge_core::rng::derive_seed;
use dtmerge_core::{Activation, ArchConfig, Error, LayerSelector, Result};

#[derive(Parser)]
#[command(name = "dtmerge", version, about = "Weight-space merging experiments for Decision Transformers")]
struct Cli {
    /// Root seed; every command derives named substreams from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out scripted policies into an offline dataset.
    GenData {
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value = "expert")]
        quality: DatasetQuality,
        /// Trajectories per quality tier.
        #[arg(long, default_value_t = DEFAULT_TRAJECTORIES)]
        trajectories: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Decision Transformer, optionally co-trained with a language model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5_000)]
        steps: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
        #[arg(long, default_value_t = 128)]
        d_embed: usize,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        /// Context length in transitions.
        #[arg(long, default_value_t = DEFAULT_CONTEXT)]
        context: usize,
        #[arg(long, default_value = "relu")]
        activation: ActivationArg,
        /// Pretrained language model; initializes the trunk and adds the co-training losses.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        lambda1: f32,
        #[arg(long, default_value_t = 5_000)]
        lambda1_decay_steps: u64,
        #[arg(long, default_value_t = 1.0)]
        lambda2: f32,
        #[arg(long, default_value_t = 32)]
        clusters: usize,
    },
    /// Pretrain a character language model on the synthetic corpus.
    PretrainLm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2_000)]
        steps: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 128)]
        d_embed: usize,
        #[arg(long, default_value_t = DEFAULT_CORPUS_CHARS)]
        corpus_chars: usize,
    },
    /// Interpolate the selected parameters of two checkpoints; the rest come from A.
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "attention")]
        select: LayerSelector,
        #[arg(long)]
        lambda: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge, freeze and finetune a set of models into a multi-task bundle.
    Mff {
        #[arg(long, num_args = 2.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long, num_args = 2.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "attention")]
        select: LayerSelector,
        #[arg(long, default_value_t = 2_000)]
        steps: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
        #[arg(long, default_value_t = 500)]
        audit_every: u64,
        /// Output directory for the bundle.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace or remove a model's attention parameters.
    Perturb {
        #[arg(long)]
        model: PathBuf,
        /// random, random:SEED, identity, eye or removed.
        #[arg(long)]
        mode: PerturbMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or one task of a bundle) in its environment.
    Eval {
        #[arg(long, conflicts_with = "bundle", required_unless_present = "bundle")]
        model: Option<PathBuf>,
        #[arg(long, requires = "task")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        task: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_EPISODES)]
        episodes: usize,
        /// Initial return-to-go as a multiple of the dataset's best return.
        #[arg(long, default_value_t = 1.0)]
        multiplier: f32,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average attention maps over one expert trajectory.
    Attention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        transitions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid described by a JSON config.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a saved grid report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Gelu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Gelu => Activation::Gelu,
        }
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(Error::MissingArtifact(p.to_path_buf())),
        None => Ok(()),
    }
}

fn load_model(path: &Path) -> Result<DtModel> {
    Checkpoint::load(path)?.into_model()
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn json_line<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn load_lm(path: &Path) -> Result<(LmModel, Corpus)> {
    let ckpt = Checkpoint::load(path)?;
    let field = |key: &str| -> Result<u64> {
        ckpt.provenance
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("{}: language model checkpoint lacks `{key}`", path.display())))
    };
    let corpus = Corpus::generate(field("corpus_seed")?, field("corpus_chars")? as usize)?;
    let vocab_size = ckpt
        .params
        .get("lm_head.out.bias")
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::Config(format!("{}: not a language model checkpoint", path.display())))?;
    let lm = LmModel {
        arch: ckpt.arch,
        vocab_size,
        params: ckpt.params,
    };
    Ok((lm, corpus))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData {
            env,
            quality,
            trajectories,
            out,
        } => {
            let ds = generate_dataset(env, quality, trajectories, derive_seed(seed, "data"))?;
            ds.save(&out)?;
            eprintln!(
                "{}: {} trajectories, {} steps, best return {:.2}",
                out.display(),
                ds.trajectories.len(),
                ds.num_steps(),
                ds.max_return()
            );
        }
        Command::Train {
            data,
            out,
            steps,
            batch_size,
            lr,
            d_embed,
            layers,
            context,
            activation,
            lm,
            lambda1,
            lambda1_decay_steps,
            lambda2,
            clusters,
        } => {
            require(&[&data])?;
            if let Some(lm) = &lm {
                require(&[lm])?;
            }
            let ds = OfflineDataset::load(&data)?;
            let train_seed = derive_seed(seed, "train");
            let optimizer = OptimConfig {
                lr,
                ..OptimConfig::default()
            };
            let model = match lm {
                None => {
                    let arch = ArchConfig {
                        n_layers: layers,
                        d_embed,
                        d_mlp: 4 * d_embed,
                        context_positions: 3 * context,
                        activation: activation.into(),
                        ..ArchConfig::default()
                    };
                    arch.validate()?;
                    let binding = dtmerge_core::dt::EnvBinding::from_dataset(&ds);
                    let mut model = DtModel::new(arch, binding, derive_seed(seed, "init"))?;
                    let config = TrainConfig {
                        steps,
                        batch_size,
                        optimizer,
                        seed: train_seed,
                    };
                    let losses = train(&mut model, &ds, &config, &|_| false, |_, _, _| Ok(ControlFlow::Continue(())))?;
                    eprintln!("final loss {:.5}", losses.last().copied().unwrap_or(f32::NAN));
                    model
                }
                Some(lm_path) => {
                    let (lm, corpus) = load_lm(&lm_path)?;
                    let mut model = dt_from_lm(&lm, &ds, derive_seed(seed, "init"))?;
                    let km = cluster_token_embeddings(&lm, clusters, derive_seed(seed, "kmeans"))?;
                    let config = CoTrainConfig {
                        lambda1_init: lambda1,
                        lambda1_decay_steps,
                        lambda2,
                        clusters,
                        ..CoTrainConfig::default()
                    };
                    let run = CoTrainRun {
                        steps,
                        batch_size,
                        optimizer,
                        seed: train_seed,
                    };
                    let history = cotrain(&mut model, &ds, &corpus, &km.centers, &config, &run, |_, _| Ok(ControlFlow::Continue(())))?;
                    if let Some(l) = history.last() {
                        eprintln!("final loss {:.5} (mse {:.5}, cos {:.5}, lm {:.5})", l.total, l.mse, l.cos, l.lm);
                    }
                    model
                }
            };
            Checkpoint::from_model(&model)
                .with_provenance("data", data.display().to_string())
                .with_provenance("steps", steps.to_string())
                .with_provenance("seed", seed.to_string())
                .save(&out)?;
        }
        Command::PretrainLm {
            out,
            steps,
            batch_size,
            lr,
            d_embed,
            corpus_chars,
        } => {
            let corpus_seed = derive_seed(seed, "corpus");
            let corpus = Corpus::generate(corpus_seed, corpus_chars)?;
            let arch = ArchConfig {
                d_embed,
                d_mlp: 4 * d_embed,
                ..lm_arch()
            };
            arch.validate()?;
            let config = LmTrainConfig {
                steps,
                batch_size,
                optimizer: OptimConfig {
                    lr,
                    ..OptimConfig::default()
                },
                seed: derive_seed(seed, "train"),
            };
            let (lm, _) = pretrain_lm(&corpus, &arch, &config)?;
            eprintln!("holdout perplexity {:.3}", lm.perplexity(&corpus, 256)?);
            Checkpoint::new(lm.arch, None, lm.params)
                .with_provenance("corpus_seed", corpus_seed.to_string())
                .with_provenance("corpus_chars", corpus_chars.to_string())
                .with_provenance("steps", steps.to_string())
                .save(&out)?;
        }
        Command::Merge {
            a,
            b,
            select,
            lambda,
            out,
        } => {
            require(&[&a, &b])?;
            let ma = load_model(&a)?;
            let mb = load_model(&b)?;
            if ma.arch != mb.arch {
                return Err(Error::Incompatible(vec!["architectures differ".into()]));
            }
            let params = interpolate(&ma.params, &mb.params, lambda, &select)?;
            let merged = DtModel { params, ..ma };
            Checkpoint::from_model(&merged)
                .with_provenance("merge", format!("{} <- {} @ {lambda} on {select}", a.display(), b.display()))
                .save(&out)?;
        }
        Command::Mff {
            models,
            data,
            select,
            steps,
            batch_size,
            lr,
            audit_every,
            out,
        } => {
            let all: Vec<&Path> = models.iter().chain(&data).map(PathBuf::as_path).collect();
            require(&all)?;
            let models = models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let datasets = data.iter().map(|p| OfflineDataset::load(p)).collect::<Result<Vec<_>>>()?;
            let config = MffConfig {
                finetune: TrainConfig {
                    steps,
                    batch_size,
                    optimizer: OptimConfig {
                        lr,
                        ..OptimConfig::default()
                    },
                    seed: derive_seed(seed, "train"),
                },
                audit_every,
            };
            let outcome = merge_freeze_finetune(
                &models.iter().collect::<Vec<_>>(),
                &datasets.iter().collect::<Vec<_>>(),
                &select,
                &config,
            )?;
            outcome.bundle.save(&out)?;
            eprintln!(
                "shared selection {} ({} audits, all matching)",
                outcome.shared_hash,
                outcome.audits.len()
            );
        }
        Command::Perturb { model, mode, out } => {
            require(&[&model])?;
            let m = load_model(&model)?;
            let (arch, params) = perturb_attention(&m.arch, &m.params, mode)?;
            let perturbed = DtModel { arch, params, ..m };
            Checkpoint::from_model(&perturbed)
                .with_provenance("perturb", mode.to_string())
                .save(&out)?;
        }
        Command::Eval {
            model,
            bundle,
            task,
            episodes,
            multiplier,
            out,
        } => {
            let m = match (model, bundle, task) {
                (Some(p), _, _) => {
                    require(&[&p])?;
                    load_model(&p)?
                }
                (None, Some(dir), Some(i)) => {
                    require(&[&dir])?;
                    MultiTaskBundle::load(&dir)?.model(i)?
                }
                _ => return Err(Error::Config("eval needs --model or --bundle with --task".into())),
            };
            let result = evaluate(&m, multiplier, episodes, derive_seed(seed, "eval"))?;
            emit(out.as_deref(), &json_line(&result)?)?;
        }
        Command::Attention {
            model,
            transitions,
            out,
        } => {
            require(&[&model])?;
            let m = load_model(&model)?;
            let kind = m.binding.env;
            let mut policy = ScriptedPolicy::new(kind, Quality::Expert, derive_seed(seed, "attention/policy"));
            let traj = rollout(kind, &mut policy, derive_seed(seed, "attention/episode"))?;
            let maps = attention_maps(&m, &traj, transitions)?;
            write_atomic(&out, maps.to_csv().as_bytes())?;
        }
        Command::Grid { config, out_dir } => {
            require(&[&config])?;
            let text = std::fs::read(&config)?;
            let config: GridConfig = serde_json::from_slice(&text)?;
            let report = run_grid(&config)?;
            report.save(&out_dir)?;
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            eprintln!(
                "{}: {} rows written to {}",
                report.run_id,
                report.rows.len(),
                out_dir.display()
            );
            if failed > 0 {
                return Err(Error::Config(format!("{failed} grid cells failed; see the report")));
            }
        }
        Command::Report { input, format, out } => {
            require(&[&input])?;
            let report = EvalReport::load(&input)?;
            let bytes = match format {
                Format::Csv => report.to_csv().into_bytes(),
                Format::Json => report.to_json()?,
            };
            emit(out.as_deref(), &bytes)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BadMagic { .. } | Error::Corrupt(_) => 3,
        Error::Version { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
