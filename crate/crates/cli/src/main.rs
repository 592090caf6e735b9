use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use uinav_core::agent::{AgentNet, ArgumentVocab};
use uinav_core::checkpoint::{load_agent, load_referee, save_agent, save_referee};
use uinav_core::demo::{augment, error_driven_round, replay, trace_files, CorrectionSource, DemoPool, Demonstration};
use uinav_core::referee::RefereeNet;
use uinav_core::sim::{catalog, EpisodeConfig, SimEnv, SlotSplit, Suite};
use uinav_core::train::{
    ablation_augmentation, ablation_masking, eval_agent, experiment_multitask, heldout_configs, oracle_pool,
    run_loop, train_agent, train_configs, train_referee, LoopConfig, Mode, SmallBudget, TrainConfig,
};
use uinav_gateway::{write_failures, DataDir, Models, SessionStore};

#[derive(Parser)]
#[command(name = "uinav", version, about = "Demonstration-trained UI agents over a simulated device")]
struct Cli {
    /// Suite directory (apps/, tasks.json, templates.tsv); the built-in suite when omitted.
    #[arg(long, global = true)]
    suite: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    #[command(subcommand)]
    Sim(SimCmd),
    #[command(subcommand)]
    Demo(DemoCmd),
    #[command(subcommand)]
    Loop(LoopCmd),
    /// Train an agent or a referee on a directory of traces.
    Train(TrainArgs),
    /// Roll a checkpointed agent out on held-out seeds.
    Eval(EvalArgs),
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Run the /v1 session service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Tasks in the suite with feasibility and oracle path lengths.
    List,
    /// Print the oracle's plan for one episode.
    Oracle(EpisodeArgs),
}

#[derive(Args)]
struct EpisodeArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Default geometry, no random clicks.
    #[arg(long)]
    clean: bool,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Heldout,
}

impl From<Split> for SlotSplit {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SlotSplit::Train,
            Split::Heldout => SlotSplit::Heldout,
        }
    }
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Record oracle demonstrations for every task (or one).
    Record {
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 4)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented copies of a trace.
    Augment {
        trace: PathBuf,
        #[arg(long, default_value_t = 9)]
        copies: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute traces (a file or a directory) and check they reproduce.
    Replay { path: PathBuf },
}

#[derive(Subcommand)]
enum LoopCmd {
    /// Error-driven collection: probe, correct failures, retrain.
    Run(LoopArgs),
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long, default_value_t = 8)]
    rounds: usize,
    #[arg(long, value_enum, default_value_t = Source::Oracle)]
    source: Source,
    /// Pool, checkpoints and failure queue; defaults to $UINAV_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// JSON file overriding any loop settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    Oracle,
    Console,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    model: Model,
    /// JSON training config; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of traces.
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Sample budget for the agent; the config's budget when omitted.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Agent,
    Referee,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long)]
    referee: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    per_task: u64,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    split: Split,
    #[arg(long)]
    no_masking: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Multi-task against single-task agents per demonstration count.
    Multitask {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        demos: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// With and without demonstration augmentation.
    Augmentation {
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// With and without utterance masking, on unseen slot values.
    Masking {
        #[command(flatten)]
        budget: BudgetArgs,
    },
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    demos_per_task: Option<u64>,
}

impl BudgetArgs {
    fn small(&self) -> SmallBudget {
        let mut b = SmallBudget {
            seeds: self.seeds.clone(),
            ..SmallBudget::default()
        };
        if let Some(n) = self.budget {
            b.budget = n;
        }
        if let Some(n) = self.demos_per_task {
            b.demos_per_task = n;
        }
        b
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    agent: Option<PathBuf>,
    #[arg(long)]
    referee: Option<PathBuf>,
    /// Defaults to $UINAV_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 900)]
    idle_secs: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let suite = match &cli.suite {
        Some(dir) => Arc::new(Suite::load_dir(dir).with_context(|| format!("loading suite {}", dir.display()))?),
        None => Suite::builtin(),
    };
    match cli.cmd {
        Cmd::Sim(c) => sim(&suite, c),
        Cmd::Demo(c) => demo(&suite, c),
        Cmd::Loop(LoopCmd::Run(a)) => loop_run(&suite, a),
        Cmd::Train(a) => train(&suite, a),
        Cmd::Eval(a) => eval(&suite, a),
        Cmd::Experiment(c) => experiment(&suite, c),
        Cmd::Serve(a) => serve(suite, a),
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn episode(suite: &Suite, a: &EpisodeArgs) -> Result<EpisodeConfig> {
    Ok(if a.clean {
        EpisodeConfig::clean(suite, &a.task, a.seed, a.split.into())?
    } else {
        EpisodeConfig::sample(suite, &a.task, a.seed, a.split.into())?
    })
}

fn sim(suite: &Arc<Suite>, c: SimCmd) -> Result<()> {
    match c {
        SimCmd::List => {
            println!("{:<18} {:<10} {:>8} {:>5} {:>5}", "task", "app", "feasible", "min", "max");
            for e in catalog(suite) {
                println!(
                    "{:<18} {:<10} {:>8} {:>5} {:>5}",
                    e.task_id, e.app_name, e.feasible, e.min_path, e.max_path
                );
            }
        }
        SimCmd::Oracle(a) => {
            let cfg = episode(suite, &a)?;
            println!("utterance: {}", cfg.utterance);
            let env = SimEnv::reset(suite.clone(), cfg)?;
            match env.oracle_plan() {
                Some(plan) => {
                    for (i, step) in plan.iter().enumerate() {
                        println!("{:>3}  {step}", i + 1);
                    }
                }
                None => println!("no plan: {:?}", env.verdict()),
            }
        }
    }
    Ok(())
}

fn demo(suite: &Arc<Suite>, c: DemoCmd) -> Result<()> {
    match c {
        DemoCmd::Record {
            task,
            first_seed,
            count,
            out,
        } => {
            let ids: Vec<&str> = task.as_deref().into_iter().collect();
            let filter = (!ids.is_empty()).then_some(ids.as_slice());
            let demos = oracle_pool(suite, filter, first_seed..first_seed + count, SlotSplit::Train)?;
            let mut pool = DemoPool::load_dir(&out).unwrap_or_default();
            let from = pool.len();
            pool.extend(demos);
            pool.save_dir(&out, from)?;
            println!("recorded {} demonstrations into {}", pool.len() - from, out.display());
        }
        DemoCmd::Augment {
            trace,
            copies,
            seed,
            out,
        } => {
            let d = Demonstration::load(&trace)?;
            std::fs::create_dir_all(&out)?;
            for c in 0..copies {
                let a = augment(&d, seed.wrapping_add(c));
                let path = out.join(format!("{}-aug{c:02}.{}", d.episode_id, uinav_core::demo::TRACE_EXT));
                a.save(&path)?;
            }
            println!("wrote {copies} augmented copies to {}", out.display());
        }
        DemoCmd::Replay { path } => {
            let files = if path.is_dir() { trace_files(&path)? } else { vec![path] };
            let mut bad = 0;
            for f in &files {
                let d = Demonstration::load(f)?;
                if let Err(e) = replay(suite, &d) {
                    bad += 1;
                    println!("DIVERGED {}: {e}", f.display());
                }
            }
            println!("{} of {} traces replay identically", files.len() - bad, files.len());
            if bad > 0 {
                bail!("{bad} traces diverged");
            }
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn loop_run(suite: &Arc<Suite>, a: LoopArgs) -> Result<()> {
    let data = a.data_dir.map(DataDir::new).unwrap_or_else(DataDir::from_env);
    let mut cfg: LoopConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => LoopConfig::default(),
    };
    cfg.max_rounds = a.rounds;
    cfg.seed = a.seed;
    let hash = suite.templates.content_hash();
    let existing = DemoPool::load_dir(&data.demos()).unwrap_or_default();
    let mut pool = existing.demos().to_vec();
    match a.source {
        Source::Oracle => {
            cfg.source = CorrectionSource::Oracle;
            let (agent, referee, report) = run_loop(suite, &cfg, &mut pool)?;
            for r in &report.rounds {
                print_json(r)?;
            }
            let mut saved = DemoPool::new();
            saved.extend(pool);
            saved.save_dir(&data.demos(), existing.len())?;
            save_agent(&data.root.join("agent.ckpt"), &agent, &hash)?;
            save_referee(&data.root.join("referee.ckpt"), &referee, &hash)?;
            print!("{}", report.final_eval.table());
            println!("converged: {}  ({:.0}s)", report.converged, report.seconds);
        }
        Source::Console => {
            // One probing round per invocation; corrections come back through
            // the gateway into the same data directory.
            if pool.is_empty() {
                log::info!("empty pool: seeding with {} oracle demonstrations per task", cfg.initial_demos);
                let seed_pool = oracle_pool(suite, None, 0..cfg.initial_demos, SlotSplit::Train)?;
                let mut p = DemoPool::new();
                p.extend(seed_pool.clone());
                p.save_dir(&data.demos(), 0)?;
                pool = seed_pool;
            }
            let mut agent = AgentNet::new(ArgumentVocab::new(&suite.app_names()), cfg.seed);
            let mut referee = RefereeNet::new(cfg.seed ^ 0x5EED);
            train_agent(&mut agent, &pool, suite, &cfg.agent, cfg.agent.budget)?;
            train_referee(&mut referee, &pool, suite, &cfg.referee)?;
            save_agent(&data.root.join("agent.ckpt"), &agent, &hash)?;
            save_referee(&data.root.join("referee.ckpt"), &referee, &hash)?;
            let probes = train_configs(suite, 1_000..1_000 + cfg.probe_per_task, SlotSplit::Train)?;
            let (m, failures) = error_driven_round(&agent, Some(&referee), suite, &probes, cfg.agent.masking)?;
            print_json(&m)?;
            write_failures(&data.failures(), &failures)?;
            println!(
                "{} failure cases queued in {}; record corrections with `uinav serve` and rerun",
                failures.len(),
                data.failures().display()
            );
        }
    }
    Ok(())
}

fn train(suite: &Arc<Suite>, a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => match a.model {
            Model::Agent => TrainConfig::agent(),
            Model::Referee => TrainConfig::referee(),
        },
    };
    cfg.mode = match a.model {
        Model::Agent => Mode::Agent,
        Model::Referee => Mode::Referee,
    };
    let pool = DemoPool::load_dir(&a.demos)?;
    let hash = suite.templates.content_hash();
    let report = match a.model {
        Model::Agent => {
            let vocab = ArgumentVocab::new(&suite.app_names());
            let mut net = match &a.init {
                Some(p) => load_agent(p, Some(&hash), Some(&vocab))?,
                None => AgentNet::new(vocab, cfg.seed),
            };
            let r = train_agent(&mut net, pool.demos(), suite, &cfg, a.budget.unwrap_or(cfg.budget))?;
            save_agent(&a.out, &net, &hash)?;
            r
        }
        Model::Referee => {
            let mut net = match &a.init {
                Some(p) => load_referee(p, Some(&hash))?,
                None => RefereeNet::new(cfg.seed),
            };
            let r = train_referee(&mut net, pool.demos(), suite, &cfg)?;
            save_referee(&a.out, &net, &hash)?;
            r
        }
    };
    for (seen, loss, acc) in &report.history {
        print_json(&serde_json::json!({"samples": seen, "loss": loss, "accuracy": acc}))?;
    }
    println!(
        "{} updates, {} samples, loss {:.4} -> {:.4}, accuracy {:.4}{}",
        report.updates,
        report.samples_seen,
        report.first_loss,
        report.final_loss,
        report.eval_accuracy,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn eval(suite: &Arc<Suite>, a: EvalArgs) -> Result<()> {
    let hash = suite.templates.content_hash();
    let agent = load_agent(&a.agent, Some(&hash), Some(&ArgumentVocab::new(&suite.app_names())))?;
    let referee = a.referee.as_deref().map(|p| load_referee(p, Some(&hash))).transpose()?;
    let configs = heldout_configs(suite, a.per_task, a.split.into())?;
    let report = eval_agent(&agent, referee.as_ref(), suite, &configs, !a.no_masking)?;
    for (task, s) in &report.per_task {
        print_json(&serde_json::json!({
            "task": task,
            "episodes": s.episodes,
            "task_accuracy": s.task_accuracy(),
            "step_accuracy": s.step_accuracy(),
        }))?;
    }
    print!("{}", report.table());
    if let Some(p) = a.json {
        std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn experiment(suite: &Arc<Suite>, c: ExperimentCmd) -> Result<()> {
    match c {
        ExperimentCmd::Multitask { demos, out, budget } => {
            let r = experiment_multitask(suite, &demos, &budget.small())?;
            print!("{}", r.to_jsonl());
            println!("{:>6} {:>10} {:>11}", "demos", "multitask", "singletask");
            for n in &demos {
                if let Some((m, s)) = r.means_at(*n) {
                    println!("{n:>6} {m:>10.3} {s:>11.3}");
                }
            }
            if let Some(p) = out {
                std::fs::write(p, r.to_jsonl())?;
            }
        }
        ExperimentCmd::Augmentation { budget } => {
            let r = ablation_augmentation(suite, &budget.small())?;
            print_json(&r)?;
            println!("augmented {:.3} vs plain {:.3}", r.mean_treatment(), r.mean_control());
        }
        ExperimentCmd::Masking { budget } => {
            let r = ablation_masking(suite, &budget.small())?;
            print_json(&r)?;
            println!("masked {:.3} vs unmasked {:.3}", r.mean_treatment(), r.mean_control());
        }
    }
    Ok(())
}

fn serve(suite: Arc<Suite>, a: ServeArgs) -> Result<()> {
    let hash = suite.templates.content_hash();
    let vocab = ArgumentVocab::new(&suite.app_names());
    let models = Models {
        agent: a.agent.as_deref().map(|p| load_agent(p, Some(&hash), Some(&vocab))).transpose()?,
        referee: a.referee.as_deref().map(|p| load_referee(p, Some(&hash))).transpose()?,
    };
    let data = a.data_dir.map(DataDir::new).unwrap_or_else(DataDir::from_env);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("listen address")?;
    let store = Arc::new(SessionStore::new(suite, models, data, Duration::from_secs(a.idle_secs)));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(uinav_gateway::serve(store, addr))?;
    Ok(())
}
