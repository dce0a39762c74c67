use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use paravla_cli::config::PipelineConfig;
use paravla_cli::llm::HttpLlm;
use paravla_cli::server;
use paravla_core::instruction::{LlmClient, MockLlm};
use paravla_core::pipeline::{self, EvalRequest, InstructionChoice, SplitPart, TrainRequest, Workspace};

#[derive(Parser)]
#[command(name = "paravla", version, about = "Paraphrase-augmented LoRA fine-tuning for a desk-scale VLA surrogate")]
struct Cli {
    /// JSON config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (all artifacts go here).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root [default: <out>/dataset].
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pick-and-place dataset to <out>/dataset.
    Synth {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ask the LLM for five instructions per trajectory.
    Gen {
        /// Offline paraphraser instead of an HTTP endpoint.
        #[arg(long, conflicts_with = "fixture")]
        mock: bool,
        /// Reply with this file's contents for every trajectory.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        max_parallel: Option<usize>,
    },
    /// Serve the curation API (and UI), or accept all candidates.
    Curate {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory with the built curation UI.
        #[arg(long)]
        ui: Option<PathBuf>,
        /// Select every candidate of each uncurated trajectory and exit.
        #[arg(long)]
        accept_all: bool,
        #[arg(long, default_value = "auto")]
        curator: String,
    },
    /// Pretrain the base and LoRA-tune it on curated paraphrases.
    Train(TrainArgs),
    /// Score a run on a split.
    Eval {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        part: Part,
        #[arg(long, value_enum, default_value_t = Instructions::Curated)]
        instructions: Instructions,
        /// Tolerances in bins (repeatable) [default: 0 and 5].
        #[arg(long = "k")]
        ks: Vec<u32>,
    },
    /// Diff two report files.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    run: String,
    /// Stop after the base: the fixed-phrasing baseline.
    #[arg(long)]
    single_instruction: bool,
    /// Reuse the base, stats and split of this earlier run.
    #[arg(long)]
    base_run: Option<String>,
    /// Seeds model init, shuffling, adapters and pairing.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Instructions {
    Curated,
    Canonical,
}

fn train_request(cfg: &PipelineConfig, a: TrainArgs) -> TrainRequest {
    let mut req = TrainRequest {
        run: a.run,
        single_instruction: a.single_instruction,
        base_run: a.base_run,
        split: cfg.split,
        policy: cfg.policy.clone(),
        pretrain: cfg.pretrain,
        train: cfg.train,
    };
    if let Some(s) = a.seed {
        req.pretrain.seed = s;
        req.train.seed = s;
    }
    macro_rules! set {
        ($($src:ident => $dst:expr),* $(,)?) => { $(if let Some(v) = a.$src { $dst = v; })* };
    }
    set! {
        split_seed => req.split.seed,
        test_fraction => req.split.test_fraction,
        pretrain_epochs => req.pretrain.epochs,
        pretrain_lr => req.pretrain.learning_rate,
        epochs => req.train.epochs,
        lr => req.train.learning_rate,
        rank => req.train.rank,
        alpha => req.train.alpha,
    }
    if let Some(b) = a.batch_size {
        req.train.batch_size = b;
        req.pretrain.batch_size = b;
    }
    req
}

fn llm_client(
    cfg: &PipelineConfig,
    mock: bool,
    fixture: Option<&Path>,
) -> anyhow::Result<(Box<dyn LlmClient>, String)> {
    if mock {
        return Ok((Box::new(MockLlm::paraphraser()), "mock-paraphraser".into()));
    }
    if let Some(f) = fixture {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading fixture {}", f.display()))?;
        return Ok((Box::new(MockLlm::canned(text)), format!("fixture:{}", f.display())));
    }
    let client = HttpLlm::new(&cfg.llm, Some(&cfg.dataset_root()))?;
    Ok((Box::new(client), format!("http:{}", cfg.llm.model)))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(d) = cli.dataset {
        cfg.dataset = Some(d);
    }
    let ws = Workspace::new(&cfg.out);
    let ds = cfg.dataset_root();
    match cli.command {
        Command::Synth { n, steps, seed } => {
            let checksum = pipeline::cmd_synth(&ws, n, steps, seed)?;
            println!("{checksum}");
        }
        Command::Gen { mock, fixture, max_parallel } => {
            let (client, tag) = llm_client(&cfg, mock, fixture.as_deref())?;
            let parallel = max_parallel.unwrap_or(cfg.llm.max_parallel);
            let s = pipeline::cmd_gen(&ws, &ds, client.as_ref(), &tag, &cfg.llm.retry_policy(), parallel)?;
            log::info!("{} candidate sets written", s.written);
        }
        Command::Curate { addr, ui, accept_all, curator } => {
            if accept_all {
                let n = pipeline::cmd_curate_accept_all(&ws, &ds, &curator)?;
                log::info!("accepted all candidates for {n} trajectories");
            } else {
                let svc = pipeline::curation_service(&ws, &ds)?;
                let _lock = ws.lock()?;
                let rt = tokio::runtime::Runtime::new()?;
                rt.block_on(server::serve(svc, addr, ui, |a| eprintln!("curation API listening on http://{a}")))?;
            }
        }
        Command::Train(args) => {
            let req = train_request(&cfg, args);
            let s = pipeline::cmd_train(&ws, &ds, &req)?;
            log::info!("run written to {} (final loss {:?})", s.run_dir.display(), s.final_loss);
        }
        Command::Eval { run, part, instructions, ks } => {
            let req = EvalRequest {
                run,
                part: match part {
                    Part::Train => SplitPart::Train,
                    Part::Test => SplitPart::Test,
                },
                instructions: match instructions {
                    Instructions::Curated => InstructionChoice::Curated,
                    Instructions::Canonical => InstructionChoice::Canonical,
                },
                ks: if ks.is_empty() { cfg.ks.clone() } else { ks },
            };
            let (report, path) = pipeline::cmd_eval(&ws, &ds, &req)?;
            log::info!("report written to {}", path.display());
            print!("{}", report.render_table());
        }
        Command::Compare { a, b } => {
            let cmp = pipeline::cmd_compare(&ws, &a, &b)?;
            print!("{}", cmp.render_table());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
