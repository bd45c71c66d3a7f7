//! Command-line surface: collect datasets, train checkpoints, compare
//! methods, walk one adaptive episode, and export affordance heatmaps.
//!
//! Every command resolves a config (defaults, then an optional `--config`
//! file of flat key=value lines) and prints its hash, so artifacts can be
//! traced to the exact settings that produced them. Exit codes: 0 success,
//! 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use bracepoint::{
    collect_offline, collect_online, compute_heatmap, export_heatmap, load_checkpoint,
    load_dataset, merge_datasets, normalized_entropy, run_episode_closed_loop, run_eval,
    save_checkpoint, save_dataset, scene_feature_table, train, AppConfig, Dataset, Error,
    LoopConfig, MethodSpec, ModelWeights, SceneFeatures, SeedState, TaskType,
};

#[derive(Parser)]
#[command(name = "bracepoint", version, about = "Support-hand selection on a synthetic assembly micro-world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect an interaction dataset with scripted samplers or the policy.
    Collect(CollectArgs),
    /// Train a checkpoint on one or more datasets.
    Train(TrainArgs),
    /// Compare methods over shared scene sequences and write a results file.
    Eval(EvalArgs),
    /// Run one closed-loop episode with verbose round logging.
    AdaptDemo(AdaptDemoArgs),
    /// Export a per-point affordance heatmap as ASCII PLY.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Flat key=value config file overriding the documented defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn resolve(&self) -> Result<AppConfig> {
        let cfg = match &self.config {
            Some(path) => AppConfig::from_file(path)?,
            None => AppConfig::default(),
        };
        println!("config {}", cfg.hash());
        Ok(cfg)
    }
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Scripted sampler episodes (the default).
    #[arg(long, conflicts_with = "online")]
    offline: bool,
    /// Closed-loop policy episodes; requires --checkpoint.
    #[arg(long, requires = "checkpoint")]
    online: bool,
    /// Task family; overrides env.task.
    #[arg(long)]
    task: Option<TaskType>,
    /// Records to collect.
    #[arg(short = 'n', long, default_value_t = 2000)]
    records: usize,
    /// Base seed for scenes and sampling.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Policy checkpoint for --online.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Output dataset path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset file; repeat to train on a concatenated pool.
    #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
    dataset: Vec<PathBuf>,
    /// Output checkpoint path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optional JSONL training-loss log.
    #[arg(long, value_name = "FILE")]
    log_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint for the learned methods.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated methods; overrides eval.methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<MethodSpec>>,
    /// Comma-separated tasks; overrides eval.tasks.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<TaskType>>,
    /// Episodes per seed; overrides eval.episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated seeds; overrides eval.seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Disable between-round fine-tuning (context conditioning stays on).
    #[arg(long)]
    no_adapt: bool,
    /// Episode worker threads; overrides eval.workers. Any count gives the
    /// same report.
    #[arg(long)]
    workers: Option<usize>,
    /// Directory of .bpds files used as the offline pool during adaptation.
    #[arg(long, value_name = "DIR")]
    pools: Option<PathBuf>,
    /// Line-delimited results output.
    #[arg(long, value_name = "FILE", default_value = "results.jsonl")]
    report_out: PathBuf,
}

#[derive(Args)]
struct AdaptDemoArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Task family; overrides env.task.
    #[arg(long)]
    task: Option<TaskType>,
    /// Scene seed; the demo replays eval episode 0 of this seed.
    #[arg(long, default_value_t = 1)]
    scene_seed: u64,
    /// Method to walk through.
    #[arg(long, default_value = "ours")]
    method: MethodSpec,
    /// Disable between-round fine-tuning.
    #[arg(long)]
    no_adapt: bool,
    /// Directory of .bpds files used as the offline pool during adaptation.
    #[arg(long, value_name = "DIR")]
    pools: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Task family; overrides env.task.
    #[arg(long)]
    task: Option<TaskType>,
    /// Scene seed; matches eval episode 0 of this seed.
    #[arg(long, default_value_t = 1)]
    scene_seed: u64,
    /// Condition the map on frames gathered by a policy rollout on the scene.
    #[arg(long)]
    context: bool,
    /// Output PLY path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Collect(args) => cmd_collect(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::AdaptDemo(args) => cmd_adapt_demo(args),
        Cmd::Heatmap(args) => cmd_heatmap(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        let usage = matches!(e.downcast_ref::<Error>(), Some(Error::InvalidArgument(_)));
        std::process::exit(if usage { 2 } else { 1 });
    }
}

fn cmd_collect(args: CollectArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(task) = args.task {
        cfg.env.task = task;
    }
    let cc = cfg.collect_config(args.records);
    let seed = SeedState::new(args.seed, 0);
    let ds = if args.online {
        let ck = args.checkpoint.as_ref().expect("clap enforces --checkpoint with --online");
        let w = load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
        collect_online(&w, &cc, &cfg.train, seed)?
    } else {
        collect_offline(&cc, seed)?
    };
    save_dataset(&ds, &args.out)?;
    let [nr, nh, np] = ds.manifest.counts;
    println!(
        "collected {} records over {} scenes (random {nr}, heuristic {nh}, policy {np}) -> {}",
        ds.records.len(),
        ds.scenes.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let mut parts = Vec::with_capacity(args.dataset.len());
    for path in &args.dataset {
        parts.push(load_dataset(path).with_context(|| format!("loading {}", path.display()))?);
    }
    let pool = if parts.len() == 1 { parts.remove(0) } else { merge_datasets(&parts)? };
    println!("training on {} records across {} scenes", pool.records.len(), pool.scenes.len());
    let (w, log) = train(&pool, &cfg.train)?;
    save_checkpoint(&w, &args.out)?;
    if let Some(path) = &args.log_out {
        let mut text = String::new();
        for rec in &log {
            text.push_str(&serde_json::to_string(rec)?);
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    for stage in [1u8, 2] {
        if let Some(last) = log.iter().rev().find(|r| r.stage == stage) {
            println!(
                "stage {} final: score {:.5} dir {:.5} kl {:.5} afford {:.5} lr {:.2e}",
                stage, last.loss_score, last.loss_dir, last.loss_kl, last.loss_afford, last.lr
            );
        }
    }
    println!("saved checkpoint ({} parameters) -> {}", w.param_count(), args.out.display());
    Ok(())
}

fn load_pools(dir: &Path) -> Result<Vec<Dataset>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading pool directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bpds"))
        .collect();
    paths.sort();
    let mut pools = Vec::with_capacity(paths.len());
    for p in paths {
        pools.push(load_dataset(&p).with_context(|| format!("loading {}", p.display()))?);
    }
    Ok(pools)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(methods) = args.methods {
        cfg.eval.methods = methods;
    }
    if let Some(tasks) = args.tasks {
        cfg.eval.tasks = tasks;
    }
    if let Some(eps) = args.episodes {
        cfg.eval.episodes = eps;
    }
    if let Some(seeds) = args.seeds {
        cfg.eval.seeds = seeds;
    }
    if args.no_adapt {
        cfg.eval.adapt = false;
    }
    if let Some(workers) = args.workers {
        cfg.eval.workers = workers;
    }
    let ec = cfg.eval_config();

    let w = match &args.checkpoint {
        Some(path) => {
            Some(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    let pools = match &args.pools {
        Some(dir) => load_pools(dir)?,
        None => Vec::new(),
    };
    let report = run_eval(w.as_ref(), &ec, &cfg.train, &pools)?;
    std::fs::write(&args.report_out, report.results_jsonl()?)?;
    print!("{}", report.table());
    println!("wrote {} episode lines -> {}", report.lines.len(), args.report_out.display());
    Ok(())
}

fn demo_pool<'a>(
    method: MethodSpec,
    adapt: bool,
    pools: &'a [Dataset],
    task: TaskType,
    w: &ModelWeights,
) -> Result<Option<(&'a Dataset, Vec<SceneFeatures>)>> {
    if !(adapt && method.adapts()) {
        return Ok(None);
    }
    let pool = pools
        .iter()
        .find(|d| d.manifest.task == task)
        .ok_or_else(|| Error::invalid_state(format!("no offline record pool for task '{task}'")))?;
    let feats = scene_feature_table(&pool.scenes, w)?;
    Ok(Some((pool, feats)))
}

fn cmd_adapt_demo(args: AdaptDemoArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(task) = args.task {
        cfg.env.task = task;
    }
    if args.no_adapt {
        cfg.eval.adapt = false;
    }
    let task = cfg.env.task;
    let w = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let pools = match &args.pools {
        Some(dir) => load_pools(dir)?,
        None => Vec::new(),
    };
    let pool = demo_pool(args.method, cfg.eval.adapt, &pools, task, &w)?;

    let ep_seed = SeedState::new(args.scene_seed, 0).derive(0);
    let scene = bracepoint::generate_scene_cfg(
        task,
        ep_seed.derive(0),
        cfg.env.n_points,
        cfg.eval_config().physics.as_ref(),
    )?;
    println!(
        "scene: task {} points {} op point {} band {} epsilon {}",
        task,
        scene.cloud.len(),
        scene.p_op,
        scene.heuristic_region.len(),
        scene.physics.epsilon
    );

    let lc = LoopConfig {
        method: args.method,
        max_rounds: cfg.eval.max_rounds,
        adapt: cfg.eval.adapt,
        tc: &cfg.train,
        offline: pool.as_ref().map(|(d, f)| (*d, f.as_slice())),
    };
    let out = run_episode_closed_loop(Some(&w), &scene, &lc, ep_seed.derive(1))?;
    for r in &out.rounds {
        let predicted =
            r.predicted.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".to_string());
        let digest = r.map_digest.as_deref().unwrap_or("-");
        println!(
            "round {}: point {} dir [{:+.3} {:+.3} {:+.3}] predicted {} map {} -> m {:.5} {} progress {:.2} held {}{}",
            r.round + 1,
            r.action.p_sp,
            r.action.d[0],
            r.action.d[1],
            r.action.d[2],
            predicted,
            digest,
            r.m,
            if r.supported { "supported" } else { "slipped" },
            r.goal_progress,
            r.steps_held,
            if r.adapted { ", fine-tuned" } else { "" },
        );
    }
    let frames: Vec<_> = out
        .records
        .last()
        .map(|rec| rec.context.clone())
        .unwrap_or_default();
    if !frames.is_empty() {
        let pre = normalized_entropy(&compute_heatmap(&w, &scene, &[])?);
        let post = normalized_entropy(&compute_heatmap(&w, &scene, &frames)?);
        println!("map entropy: no context {pre:.4}, with {} observed frame(s) {post:.4}", frames.len());
    }
    println!("episode {}: {} round(s)", if out.success { "succeeded" } else { "failed" }, out.rounds.len());
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(task) = args.task {
        cfg.env.task = task;
    }
    let task = cfg.env.task;
    let w = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let ep_seed = SeedState::new(args.scene_seed, 0).derive(0);
    let scene = bracepoint::generate_scene_cfg(
        task,
        ep_seed.derive(0),
        cfg.env.n_points,
        cfg.eval_config().physics.as_ref(),
    )?;

    let frames = if args.context {
        // Gather real failure frames by rolling the policy out on this scene.
        let lc = LoopConfig {
            method: MethodSpec::Ours,
            max_rounds: cfg.eval.max_rounds,
            adapt: false,
            tc: &cfg.train,
            offline: None,
        };
        let out = run_episode_closed_loop(Some(&w), &scene, &lc, ep_seed.derive(1))?;
        let frames = out.records.last().map(|rec| rec.context.clone()).unwrap_or_default();
        if frames.is_empty() {
            println!("note: rollout succeeded in round 1, so the map has no context frames");
        }
        frames
    } else {
        Vec::new()
    };
    export_heatmap(&w, &scene, &frames, &args.out)?;
    println!(
        "wrote {} point rows ({} context frame(s)) -> {}",
        scene.cloud.len(),
        frames.len(),
        args.out.display()
    );
    Ok(())
}
