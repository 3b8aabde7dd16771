use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use pal::ablate::{run_table, write_csv, AblationSetup, AblationTable};
use pal::config::RunConfig;
use pal::data::{generate_synthetic, write_benchmark, Dataset, SyntheticSpec};
use pal::encoder::{sha256_hex, Encoder};
use pal::eval::{evaluate, EpisodeSpec};
use pal::par::Exec;
use pal::train::{train_main, train_partner, train_variant, LogitAlign, PartnerObjective, TrainOutcome, Variant};

#[derive(Parser)]
#[command(name = "pal", version, about = "Partner-assisted few-shot representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic base/novel benchmark.
    GenData {
        /// `default`, or a run config whose [data] section is used.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and freeze the partner encoder.
    TrainPartner(TrainArgs),
    /// Train the main encoder against a frozen partner checkpoint.
    TrainMain {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        partner: Option<PathBuf>,
    },
    /// Train any variant end to end.
    TrainVariant(TrainArgs),
    /// Evaluate a checkpoint on N-way K-shot episodes.
    EvalEpisodes {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split file; defaults to `<data>/novel.pald`.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 15)]
        q: usize,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-episode CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Train and evaluate every variant of an ablation table.
    Ablate {
        #[arg(long, value_parser = clap::value_parser!(u32).range(3..=5))]
        table: u32,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write unit embeddings of a split under a checkpoint as CSV.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with base.pald and novel.pald; generated from [data] when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

impl CommonArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(v) = &self.variant {
            overrides.push(format!("train.variant=\"{v}\""));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        if let Some(lr) = self.lr {
            overrides.push(format!("train.lr={lr:?}"));
        }
        let mut cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        cfg.apply_env()?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn splits(&self, cfg: &RunConfig) -> anyhow::Result<(Dataset, Dataset)> {
        match &self.data {
            Some(dir) => Ok((load(&dir.join("base.pald"))?, load(&dir.join("novel.pald"))?)),
            None => {
                let b = generate_synthetic(&cfg.data)?;
                Ok((b.base, b.novel))
            }
        }
    }
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_outcome(dir: &Path, prefix: &str, out: &TrainOutcome) -> anyhow::Result<PathBuf> {
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let ckpt = dir.join(format!("{prefix}.palw"));
    out.network.encoder.save(&ckpt)?;
    if let Some(c) = &out.network.classifier {
        c.save(dir.join(format!("{prefix}.palc")))?;
    }
    out.metrics.write_csv(dir.join(format!("{prefix}_metrics.csv")))?;
    Ok(ckpt)
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let mut s = if spec == "default" {
                SyntheticSpec::default()
            } else {
                RunConfig::load(Some(Path::new(&spec)), &[])?.data
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let bench = generate_synthetic(&s)?;
            write_benchmark(&bench, &out)?;
            println!(
                "base {} items, novel {} items, dim {}; center oracle accuracy {:.4}",
                bench.base.len(),
                bench.novel.len(),
                s.raw_dim,
                bench.report.center_oracle_accuracy
            );
        }
        Command::TrainPartner(args) => {
            let cfg = args.common.config()?;
            let (base, _) = args.common.splits(&cfg)?;
            let objective = cfg.train.variant.partner_objective().unwrap_or(PartnerObjective::SupCt);
            std::fs::create_dir_all(&args.common.out)?;
            let out = train_partner(&base, &cfg.encoder_config(base.dim()), cfg.augment, &cfg.train, objective)?;
            let ckpt = write_outcome(&args.common.out, "partner", &out)?;
            println!("partner ({objective:?}) written to {}; sha256 {}", ckpt.display(), file_hash(&ckpt)?);
        }
        Command::TrainMain { train, partner } => {
            let cfg = train.common.config()?;
            let variant = cfg.train.variant;
            let align = match variant {
                Variant::CeOnly => None,
                v => Some(
                    v.alignment()
                        .with_context(|| format!("train-main needs CE_only or an alignment variant, got {v}"))?,
                ),
            };
            let (base, _) = train.common.splits(&cfg)?;
            let partner_path = match (&align, partner) {
                (Some(_), None) => bail!("--partner is required for {variant}"),
                (_, p) => p,
            };
            let before = partner_path.as_deref().map(file_hash).transpose()?;
            let partner_enc = partner_path.as_deref().map(Encoder::load).transpose()?.map(Encoder::frozen);
            let align = align.unwrap_or(pal::train::Alignment { feat: false, logit: LogitAlign::None });
            std::fs::create_dir_all(&train.common.out)?;
            let out = train_main(
                &base,
                partner_enc.as_ref(),
                &cfg.encoder_config(base.dim()),
                cfg.augment,
                &cfg.train,
                align,
            )?;
            let ckpt = write_outcome(&train.common.out, "main", &out)?;
            if let (Some(p), Some(h)) = (&partner_path, before) {
                if file_hash(p)? != h {
                    bail!("partner checkpoint {} changed during main training", p.display());
                }
            }
            println!("main ({variant}) written to {}", ckpt.display());
        }
        Command::TrainVariant(args) => {
            let cfg = args.common.config()?;
            let (base, _) = args.common.splits(&cfg)?;
            std::fs::create_dir_all(&args.common.out)?;
            let out = train_variant(&base, &cfg.encoder_config(base.dim()), cfg.augment, &cfg.train, None)?;
            if let Some(p) = &out.partner {
                write_outcome(&args.common.out, "partner", p)?;
            }
            let ckpt = write_outcome(&args.common.out, "main", &out.main)?;
            println!("{} written to {}", out.variant, ckpt.display());
        }
        Command::EvalEpisodes { checkpoint, split, data, n, k, q, episodes, seed, out, sequential } => {
            let enc = Encoder::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let split = load(&split.unwrap_or_else(|| data.join("novel.pald")))?;
            let exec = if sequential { Exec::Sequential } else { Exec::available() };
            let report = evaluate(&enc, &split, &EpisodeSpec { n, k, q, episodes }, seed, exec)?;
            if let Some(path) = out {
                report.write_csv(path)?;
            }
            println!("{}", report.summary());
        }
        Command::Ablate { table, common, jobs } => {
            let cfg = common.config()?;
            let (base, novel) = common.splits(&cfg)?;
            let table = AblationTable::from_number(table)?;
            let setup = AblationSetup {
                base: &base,
                novel: &novel,
                encoder: cfg.encoder_config(base.dim()),
                augment: cfg.augment,
                train: cfg.train.clone(),
                episodes: cfg.eval.episode_spec(),
                eval_seed: cfg.eval.seed,
            };
            let rows = run_table(table, &setup, jobs.max(1))?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join(format!("table{}.csv", table.number()));
            write_csv(&rows, &path)?;
            for r in &rows {
                println!(
                    "{:<16} 1-shot {:6.2} ± {:4.2}  5-shot {:6.2} ± {:4.2}",
                    r.variant.name(),
                    100.0 * r.acc_1shot,
                    100.0 * r.ci_1shot,
                    100.0 * r.acc_5shot,
                    100.0 * r.ci_5shot
                );
            }
            println!("wrote {}", path.display());
        }
        Command::DumpEmbeddings { checkpoint, split, out } => {
            let enc = Encoder::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let split = load(&split)?;
            let z = enc.embed_batch(split.inputs(), split.len())?;
            let mut w = csv::Writer::from_path(&out)?;
            let d = enc.embed_dim();
            let mut header = vec!["label".to_string()];
            header.extend((0..d).map(|i| format!("e{i}")));
            w.write_record(&header)?;
            for (row, label) in z.chunks_exact(d).zip(split.labels()) {
                let mut rec = vec![label.to_string()];
                rec.extend(row.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
            w.flush()?;
            println!("{} embeddings of dim {d} written to {}", split.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
