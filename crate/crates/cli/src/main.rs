use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use mbrec::checkpoint::Checkpoint;
use mbrec::config::{Ablation, TrainConfig, CONFIG_KEYS};
use mbrec::data::{
    generate_synthetic, inject_noise, load_dataset, split_leave_one_out, write_atomic, write_edges, Dataset, SyntheticSpec,
};
use mbrec::evaluation::{evaluate, retention_csv, retention_report, robustness_compare, Protocol};
use mbrec::training::{model_for, train_with_meta};

#[derive(Parser)]
#[command(name = "mbrec", version, about = "Multi-behavior recommender with denoised auxiliary graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load raw per-behavior interaction files and write a leave-one-out split.
    Prepare {
        /// Directory with one `<behavior>.txt` file of `user<TAB>item` lines per behavior.
        dir: PathBuf,
        /// Behavior to predict.
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the prepared dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted synthetic dataset (with noise labels) and split it.
    Synth {
        /// Synthetic spec, `key=value` lines: users, items, behaviors,
        /// latent_dim, densities, noise_fraction, item_bias, sharpness, seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best.ckpt, last.ckpt and metrics.csv.
    Train {
        /// Config file of `key=value` lines (keys listed below).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Prepared dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory; overrides `checkpoint_dir`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config ablation: none, no_global, no_ib, no_infonce, both_off.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on the held-out split; prints `metric,K,value` CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared dataset; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated cutoffs.
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        k: Vec<usize>,
        /// Rank against this many sampled negatives instead of all items.
        #[arg(long)]
        sampled_negatives: Option<usize>,
        /// Seed for negative sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add uniformly sampled unobserved edges to an auxiliary behavior.
    InjectNoise {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        behavior: String,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory; the added edges are listed in injected_edges.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-behavior gate statistics; prints
    /// `behavior,mean_gate,hard_retention,precision,recall` CSV.
    ReportRetention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Hard-gate threshold; an edge is retained when its gate is >= this.
        #[arg(long, default_value_t = 0.5)]
        hard_gates: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train full and no-IB models on clean and noise-injected data and
    /// report the relative metric change.
    Robustness {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        /// Behaviors to corrupt; every auxiliary behavior when omitted.
        #[arg(long)]
        behavior: Vec<String>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-node target-view and auxiliary-view representations as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_help() -> String {
    let mut s = String::from("Config keys:\n");
    for (k, d) in CONFIG_KEYS {
        let _ = writeln!(s, "  {k:<22} {d}");
    }
    s
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("in {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_atomic(p, text.as_bytes())?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

fn checkpoint_data(ckpt: &Checkpoint, data: Option<PathBuf>) -> Result<(Dataset, PathBuf)> {
    let dir = match data {
        Some(d) => d,
        None => ckpt
            .meta
            .get("data")
            .map(PathBuf::from)
            .ok_or_else(|| anyhow!("checkpoint records no dataset; pass --data"))?,
    };
    let ds = Dataset::load_prepared(&dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok((ds, dir))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare { dir, target, seed, out } => {
            let ds = load_dataset(&dir, &target)?;
            let (split, report) = split_leave_one_out(&ds, seed)?;
            split.write_prepared(&out)?;
            println!(
                "users={} items={} behaviors={} held_out={} excluded={}",
                split.num_users,
                split.num_items,
                split.num_behaviors(),
                report.held_out,
                report.excluded
            );
        }
        Command::Synth { spec, seed, out } => {
            let mut s = match spec {
                Some(p) => SyntheticSpec::parse(
                    &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let ds = generate_synthetic(&s)?;
            let (split, report) = split_leave_one_out(&ds, s.seed)?;
            split.write_prepared(&out)?;
            println!(
                "users={} items={} edges={} held_out={}",
                split.num_users,
                split.num_items,
                split.num_edges(),
                report.held_out
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            ablation,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.hyper.seed = seed;
            }
            if let Some(a) = ablation {
                cfg.ablation = a.parse().map_err(|_| anyhow!("unknown ablation `{a}`"))?;
            }
            cfg.checkpoint_dir = Some(out.clone());
            let ds = Dataset::load_prepared(&data).with_context(|| format!("loading {}", data.display()))?;
            let abs = fs::canonicalize(&data).unwrap_or(data);
            let meta = BTreeMap::from([("data".to_string(), abs.display().to_string())]);
            let outcome = train_with_meta(&ds, &cfg, &meta)?;
            println!(
                "epochs={} best_epoch={} checkpoint={}",
                outcome.epochs_run,
                outcome.best_epoch,
                out.join("best.ckpt").display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            k,
            sampled_negatives,
            seed,
            out,
        } => {
            if k.is_empty() || k.contains(&0) {
                return Err(anyhow!("--k needs positive cutoffs"));
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (ds, _) = checkpoint_data(&ckpt, data)?;
            let model = model_for(&ds, &ckpt.config)?;
            let emb = model.embed(&ckpt.state.params)?;
            let protocol = match sampled_negatives {
                Some(n) => Protocol::Sampled { n, seed },
                None => Protocol::Full,
            };
            let r = evaluate(&emb, &ds, &k, protocol)?;
            emit(out.as_deref(), &r.to_csv())?;
        }
        Command::InjectNoise {
            data,
            behavior,
            ratio,
            seed,
            out,
        } => {
            let ds = Dataset::load_prepared(&data).with_context(|| format!("loading {}", data.display()))?;
            let b = ds.behavior_index(&behavior)?;
            let (noisy, added) = inject_noise(&ds, b, ratio, seed)?;
            noisy.write_prepared(&out)?;
            write_edges(&out.join("injected_edges.txt"), &added)?;
            println!("behavior={behavior} added={}", added.len());
        }
        Command::ReportRetention {
            checkpoint,
            data,
            hard_gates,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (ds, _) = checkpoint_data(&ckpt, data)?;
            let model = model_for(&ds, &ckpt.config)?;
            let rows = retention_report(&model, &ckpt.state.params, &ds, hard_gates)?;
            emit(out.as_deref(), &retention_csv(&rows))?;
        }
        Command::Robustness {
            config,
            data,
            ratio,
            behavior,
            seed,
            out,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.hyper.seed = seed;
            }
            cfg.ablation = Ablation::None;
            let ds = Dataset::load_prepared(&data).with_context(|| format!("loading {}", data.display()))?;
            let behaviors = behavior
                .iter()
                .map(|b| ds.behavior_index(b))
                .collect::<Result<Vec<_>, _>>()?;
            let report = robustness_compare(&ds, &cfg, &behaviors, ratio)?;
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::ExportEmbeddings { checkpoint, data, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (ds, _) = checkpoint_data(&ckpt, data)?;
            let model = model_for(&ds, &ckpt.config)?;
            let emb = model.embed(&ckpt.state.params)?;
            let d = emb.z_tgt.cols;
            let mut s = String::from("kind,index,raw_id");
            for j in 0..d {
                let _ = write!(s, ",tgt_{j}");
            }
            for j in 0..d {
                let _ = write!(s, ",aux_{j}");
            }
            s.push('\n');
            for node in 0..ds.num_nodes() {
                let (kind, idx, raw) = if node < ds.num_users {
                    ("user", node, &ds.user_ids[node])
                } else {
                    let i = node - ds.num_users;
                    ("item", i, &ds.item_ids[i])
                };
                let _ = write!(s, "{kind},{idx},{raw}");
                for v in emb.z_tgt.row(node).iter().chain(emb.z_aux.row(node)) {
                    let _ = write!(s, ",{v:.9}");
                }
                s.push('\n');
            }
            emit(out.as_deref(), &s)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = config_help();
    let cmd = Cli::command()
        .mut_subcommand("train", |c| c.after_help(help.clone()))
        .mut_subcommand("robustness", |c| c.after_help(help.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
