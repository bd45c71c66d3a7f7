//! Closed-loop episode driver, online collection, method evaluation, and
//! affordance heatmap export.
//!
//! An episode runs up to `max_rounds` support predictions. Each round holds
//! one predicted action: a supported press repeats the identical displacement
//! every step, so progress walks to the goal; an unsupported press ends the
//! round immediately and the observed frame joins the interaction context
//! that conditions the next prediction. Methods share this driver and differ
//! only in how a round picks its action.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    scene_digest, CollectConfig, ContextFrame, Dataset, DatasetManifest, InteractionRecord,
    SamplingSource, DATASET_VERSION,
};
use crate::env::{
    generate_scene_cfg, goal_delta, heuristic_support, random_support, step_episode,
    DisplacementBundle, PhysicsOverride, SceneInstance, SupportAction, TaskType,
};
use crate::error::{Error, Result};
use crate::geometry::SeedState;
use crate::learning::{adapt_update, gt_score, scene_feature_table, TrainConfig};
use crate::policy::{
    affordance_map, aggregate_context, context_step_pooled, scene_features, select_best,
    ContextFrameFeature, ModelWeights, SceneFeatures,
};

/// Policy variants the evaluator can run against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodSpec {
    /// Full pipeline: top-K candidates, sampled proposals, context
    /// conditioning, and between-round fine-tuning.
    Ours,
    Random,
    Heuristic,
    /// Full pipeline with K pinned to 1; everything else identical.
    OursNoTopK,
    /// Full pipeline without interaction adaptation: the context input stays
    /// at the learned no-context vector and weights are never fine-tuned.
    OursNoAdapt,
}

pub const ALL_METHODS: [MethodSpec; 5] = [
    MethodSpec::Ours,
    MethodSpec::Random,
    MethodSpec::Heuristic,
    MethodSpec::OursNoTopK,
    MethodSpec::OursNoAdapt,
];

impl MethodSpec {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodSpec::Ours => "ours",
            MethodSpec::Random => "random",
            MethodSpec::Heuristic => "heuristic",
            MethodSpec::OursNoTopK => "ours-notopk",
            MethodSpec::OursNoAdapt => "ours-noadapt",
        }
    }

    /// Needs a trained checkpoint to run.
    pub fn learned(self) -> bool {
        !matches!(self, MethodSpec::Random | MethodSpec::Heuristic)
    }

    /// Conditions predictions on accumulated interaction frames.
    pub fn uses_context(self) -> bool {
        matches!(self, MethodSpec::Ours | MethodSpec::OursNoTopK)
    }

    /// Fine-tunes weights between failed rounds when adaptation is enabled.
    pub fn adapts(self) -> bool {
        matches!(self, MethodSpec::Ours | MethodSpec::OursNoTopK)
    }

    fn source(self) -> SamplingSource {
        match self {
            MethodSpec::Random => SamplingSource::Random,
            MethodSpec::Heuristic => SamplingSource::Heuristic,
            _ => SamplingSource::Policy,
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(MethodSpec::Ours),
            "random" => Ok(MethodSpec::Random),
            "heuristic" => Ok(MethodSpec::Heuristic),
            "ours-notopk" => Ok(MethodSpec::OursNoTopK),
            "ours-noadapt" => Ok(MethodSpec::OursNoAdapt),
            other => Err(Error::invalid_argument(format!(
                "unknown method '{other}' (expected ours, random, heuristic, ours-notopk, or ours-noadapt)"
            ))),
        }
    }
}

/// How the closed loop runs one episode.
#[derive(Clone, Copy)]
pub struct LoopConfig<'a> {
    pub method: MethodSpec,
    pub max_rounds: usize,
    /// Fine-tune between failed rounds. Only methods that adapt honor it.
    pub adapt: bool,
    pub tc: &'a TrainConfig,
    /// Record pool replayed alongside online frames during fine-tuning,
    /// with its per-scene encoder features.
    pub offline: Option<(&'a Dataset, &'a [SceneFeatures])>,
}

/// One prediction round as the loop saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: u32,
    pub action: SupportAction,
    /// Scorer's estimate for the chosen action; absent for sampler methods.
    pub predicted: Option<f64>,
    /// Digest of the round's affordance map; absent for sampler methods.
    pub map_digest: Option<String>,
    pub m: f64,
    pub supported: bool,
    /// Goal progress after the round's final step.
    pub goal_progress: f64,
    /// Oracle steps taken while the action was held.
    pub steps_held: u32,
    /// Whether weights were fine-tuned after this round failed.
    pub adapted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub rounds: Vec<RoundLog>,
    pub records: Vec<InteractionRecord>,
}

impl EpisodeOutcome {
    pub fn round_ms(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.m).collect()
    }
}

fn digest_map(map: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in map {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn embed_frame(
    scene: &SceneInstance,
    feats: &SceneFeatures,
    frame: &ContextFrame,
    w: &ModelWeights,
) -> Result<ContextFrameFeature> {
    if frame.action.p_sp >= scene.cloud.len() {
        return Err(Error::invalid_argument("context frame indexes outside the cloud"));
    }
    // Frame embeddings read only the cloud, the pressed point, and the
    // observed motion, so the base pose drifting between rounds is irrelevant.
    context_step_pooled(
        &feats.context_pooled,
        scene.cloud.positions[frame.action.p_sp],
        frame.action.d,
        &frame.bundle,
        w,
    )
}

/// Aggregated context vector for a frame window, or `None` when empty so the
/// caller falls back to the learned no-context input.
pub fn context_from_frames(
    scene: &SceneInstance,
    feats: &SceneFeatures,
    frames: &[ContextFrame],
    w: &ModelWeights,
) -> Result<Option<Vec<f64>>> {
    if frames.is_empty() {
        return Ok(None);
    }
    let mut embedded = Vec::with_capacity(frames.len());
    for frame in frames {
        embedded.push(embed_frame(scene, feats, frame, w)?);
    }
    Ok(Some(aggregate_context(&embedded, &w.heads)))
}

/// Runs one episode: predict, hold the press until the goal or an
/// unsupported step, then re-predict with the grown context window. Weights
/// fine-tuned mid-episode live in a private copy; the input weights are
/// never touched.
pub fn run_episode_closed_loop(
    w: Option<&ModelWeights>,
    scene: &SceneInstance,
    lc: &LoopConfig,
    seed: SeedState,
) -> Result<EpisodeOutcome> {
    if lc.max_rounds == 0 || lc.max_rounds > 64 {
        return Err(Error::invalid_argument("max_rounds must be in 1..=64"));
    }
    let method = lc.method;
    let base = match (method.learned(), w) {
        (true, None) => {
            return Err(Error::invalid_state(format!(
                "method '{method}' needs a trained checkpoint"
            )))
        }
        (true, Some(w)) => Some(w),
        (false, _) => None,
    };
    let adapting = method.adapts() && lc.adapt;
    if adapting && lc.offline.is_none() {
        return Err(Error::invalid_state(
            "between-round fine-tuning needs an offline record pool",
        ));
    }
    let feats = base.map(|w| scene_features(scene, w)).transpose()?;

    let mut live: Option<ModelWeights> = None;
    let mut frames_raw: Vec<ContextFrame> = Vec::new();
    let mut frames_feat: Vec<ContextFrameFeature> = Vec::new();
    let mut records: Vec<InteractionRecord> = Vec::new();
    let mut rounds: Vec<RoundLog> = Vec::new();
    let mut cur = scene.clone();
    let mut success = false;

    for round in 0..lc.max_rounds {
        let round_seed = seed.derive(10 + round as u64);
        let (action, predicted, map_digest) = match method {
            MethodSpec::Random => (random_support(&cur, round_seed), None, None),
            MethodSpec::Heuristic => (heuristic_support(&cur, round_seed), None, None),
            _ => {
                let wr = live.as_ref().unwrap_or_else(|| base.expect("learned methods carry weights"));
                let feats = feats.as_ref().expect("learned methods carry scene features");
                let f_i_vec = if method.uses_context() && !frames_feat.is_empty() {
                    Some(aggregate_context(&frames_feat, &wr.heads))
                } else {
                    None
                };
                let f_i = f_i_vec.as_deref();
                let map = affordance_map(&cur, feats, f_i, wr)?;
                let k = if method == MethodSpec::OursNoTopK { 1 } else { lc.tc.k_top };
                let (action, score) =
                    select_best(&cur, &map, k, lc.tc.n_dirs, round_seed, wr, f_i, feats)?;
                (action, Some(score), Some(digest_map(&map)))
            }
        };

        let before = cur.base_pose;
        let (next, m, res) = step_episode(&cur, &action)?;
        let bundle = DisplacementBundle::from_poses(&before, &next.base_pose, m);
        let eps = cur.physics.epsilon;
        let g_d = m / (2.0 * eps);
        let g_c = 1.0 - goal_delta(m, eps);
        records.push(InteractionRecord {
            scene_id: 0,
            episode_id: 0,
            step_index: round as u32,
            source: method.source(),
            p_op: cur.p_op as u32,
            action,
            bundle,
            g_d,
            g_c,
            r: gt_score(g_d, g_c, lc.tc.alpha, lc.tc.beta),
            context: frames_raw.clone(),
        });
        cur = next;

        let mut steps_held = 1u32;
        let mut adapted = false;
        if res.supported {
            // The oracle depends on cloud and action only, so a supported
            // press repeats its sub-threshold displacement and adds full
            // credit every held step.
            let mut reached = res.goal_reached;
            let cap = cur.physics.steps_to_goal;
            let mut i = 0;
            while !reached && i < cap {
                let (n2, _, r2) = step_episode(&cur, &action)?;
                debug_assert!(r2.supported, "held press displacement is state-independent");
                cur = n2;
                steps_held += 1;
                reached = r2.goal_reached;
                i += 1;
            }
            debug_assert!(reached, "supported steps add full credit, so steps_to_goal bounds the hold");
            success = true;
        } else {
            frames_raw.push(ContextFrame { action, bundle });
            if method.uses_context() {
                let wr = live.as_ref().unwrap_or_else(|| base.expect("learned methods carry weights"));
                let feats = feats.as_ref().expect("learned methods carry scene features");
                frames_feat.push(embed_frame(scene, feats, frames_raw.last().expect("just pushed"), wr)?);
            }
            if adapting && round + 1 < lc.max_rounds {
                let (pool, pool_feats) = lc.offline.expect("checked when adapting");
                let wr = live.as_ref().unwrap_or_else(|| base.expect("learned methods carry weights"));
                let (tuned, _) = adapt_update(
                    wr,
                    &records,
                    &cur,
                    pool,
                    pool_feats,
                    seed.derive(100 + round as u64),
                    lc.tc,
                )?;
                live = Some(tuned);
                adapted = true;
                if method.uses_context() {
                    // Frame embeddings go through the tuned context nets, so
                    // rebuild the window under the new weights.
                    let wr = live.as_ref().expect("just tuned");
                    let feats = feats.as_ref().expect("learned methods carry scene features");
                    frames_feat.clear();
                    for frame in &frames_raw {
                        frames_feat.push(embed_frame(scene, feats, frame, wr)?);
                    }
                }
            }
        }
        rounds.push(RoundLog {
            round: round as u32,
            action,
            predicted,
            map_digest,
            m,
            supported: res.supported,
            goal_progress: cur.goal_progress,
            steps_held,
            adapted,
        });
        if success {
            break;
        }
    }

    Ok(EpisodeOutcome { success, rounds, records })
}

/// Collects interaction records by running the learned policy closed-loop
/// on freshly generated scenes. Seed derivation matches `collect_offline`,
/// so the same seed visits the same scene sequence.
pub fn collect_online(
    w: &ModelWeights,
    cc: &CollectConfig,
    tc: &TrainConfig,
    seed: SeedState,
) -> Result<Dataset> {
    if cc.n_records == 0 {
        return Err(Error::invalid_argument("collect_online: n_records must be positive"));
    }
    if cc.k_max == 0 {
        return Err(Error::invalid_argument("collect_online: k_max must be positive"));
    }
    // Recorded scores stay consistent with the collection config even when
    // the policy was trained under different weights on the two terms.
    let mut tc_local = tc.clone();
    tc_local.alpha = cc.alpha;
    tc_local.beta = cc.beta;
    let lc = LoopConfig {
        method: MethodSpec::Ours,
        max_rounds: cc.k_max as usize,
        adapt: false,
        tc: &tc_local,
        offline: None,
    };

    let mut scenes = Vec::new();
    let mut records: Vec<InteractionRecord> = Vec::with_capacity(cc.n_records);
    let mut episode: u32 = 0;
    while records.len() < cc.n_records {
        let ep_seed = seed.derive(episode as u64);
        let scene = generate_scene_cfg(cc.task, ep_seed.derive(0), cc.n_points, cc.physics.as_ref())?;
        let out = run_episode_closed_loop(Some(w), &scene, &lc, ep_seed.derive(1))?;
        let scene_id = scenes.len() as u32;
        scenes.push(scene);
        for mut rec in out.records {
            rec.scene_id = scene_id;
            rec.episode_id = episode;
            records.push(rec);
            if records.len() == cc.n_records {
                break;
            }
        }
        episode += 1;
    }

    let counts = Dataset::counts_by_source(&records);
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: DATASET_VERSION,
            task: cc.task,
            total_records: records.len() as u32,
            counts,
            seed: (seed.seed, seed.stream),
            alpha: cc.alpha,
            beta: cc.beta,
            mix: cc.mix,
            k_max: cc.k_max,
            n_points: cc.n_points as u32,
            config_hash: cc.config_hash.clone(),
        },
        scenes,
        records,
    })
}

/// What the evaluator runs: every method crosses every task, with `episodes`
/// scenes per seed shared across methods.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub methods: Vec<MethodSpec>,
    pub tasks: Vec<TaskType>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub n_points: usize,
    pub max_rounds: usize,
    /// Fine-tune between failed rounds for methods that adapt.
    pub adapt: bool,
    /// Physics replacements for every generated scene.
    pub physics: Option<PhysicsOverride>,
    /// Episode worker threads. Results are identical for any count; 1 runs
    /// everything on the calling thread.
    pub workers: usize,
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid_argument("eval needs at least one method"));
        }
        if self.tasks.is_empty() {
            return Err(Error::invalid_argument("eval needs at least one task"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid_argument("eval needs at least one seed"));
        }
        if self.episodes == 0 {
            return Err(Error::invalid_argument("eval needs at least one episode per seed"));
        }
        if self.max_rounds == 0 || self.max_rounds > 64 {
            return Err(Error::invalid_argument("max_rounds must be in 1..=64"));
        }
        if self.workers == 0 || self.workers > 64 {
            return Err(Error::invalid_argument("workers must be in 1..=64"));
        }
        Ok(())
    }
}

/// Aggregate outcome for one method on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub task: String,
    pub episodes: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub mean_rounds: f64,
    pub seeds: Vec<u64>,
}

/// One evaluated episode, as written to the line-delimited results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLine {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub episode: u32,
    pub scene: String,
    pub success: bool,
    pub rounds: u32,
    pub m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub lines: Vec<EpisodeLine>,
}

impl EvalReport {
    /// Line-delimited JSON, one record per evaluated episode.
    pub fn results_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for line in &self.lines {
            let json = serde_json::to_string(line)
                .map_err(|e| Error::invalid_state(format!("results serialization failed: {e}")))?;
            out.push_str(&json);
            out.push('\n');
        }
        Ok(out)
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<6} {:>8} {:>9} {:>8} {:>12}",
            "method", "task", "episodes", "successes", "rate", "mean_rounds"
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<6} {:>8} {:>9} {:>8.4} {:>12.3}",
                row.method, row.task, row.episodes, row.successes, row.success_rate, row.mean_rounds
            );
        }
        out
    }
}

fn pool_for(pools: &[Dataset], task: TaskType) -> Result<&Dataset> {
    pools
        .iter()
        .find(|d| d.manifest.task == task)
        .ok_or_else(|| Error::invalid_state(format!("no offline record pool for task '{task}'")))
}

/// One evaluation unit: a (method, task, seed, episode) coordinate.
#[derive(Debug, Clone, Copy)]
struct EvalCell {
    mi: usize,
    ti: usize,
    sv: u64,
    ep: usize,
}

/// Evaluates every method on every task over shared scene sequences. Scene
/// generation depends only on (task, seed, episode), and a digest check
/// confirms each method saw the identical scene. Episodes run on `workers`
/// threads; every cell is seeded independently, so the report is identical
/// for any worker count, and aggregation stays on the calling thread.
pub fn run_eval(
    w: Option<&ModelWeights>,
    ec: &EvalConfig,
    tc: &TrainConfig,
    pools: &[Dataset],
) -> Result<EvalReport> {
    ec.validate()?;
    if let Some(m) = ec.methods.iter().find(|m| m.learned()) {
        if w.is_none() {
            return Err(Error::invalid_state(format!(
                "method '{m}' needs a trained checkpoint"
            )));
        }
    }
    let needs_pool = ec.adapt && ec.methods.iter().any(|m| m.adapts());
    // Adaptation replays offline records through frozen cloud encoders, so
    // one feature table per task serves every method and episode.
    let mut pool_tables: Vec<Option<(&Dataset, Vec<SceneFeatures>)>> = Vec::new();
    for &task in &ec.tasks {
        pool_tables.push(if needs_pool {
            let ds = pool_for(pools, task)?;
            let wm = w.expect("adapting methods are learned");
            Some((ds, scene_feature_table(&ds.scenes, wm)?))
        } else {
            None
        });
    }

    let mut cells =
        Vec::with_capacity(ec.methods.len() * ec.tasks.len() * ec.seeds.len() * ec.episodes);
    for ti in 0..ec.tasks.len() {
        for mi in 0..ec.methods.len() {
            for &sv in &ec.seeds {
                for ep in 0..ec.episodes {
                    cells.push(EvalCell { mi, ti, sv, ep });
                }
            }
        }
    }

    let run_cell = |c: &EvalCell| -> Result<EpisodeLine> {
        let method = ec.methods[c.mi];
        let task = ec.tasks[c.ti];
        let ep_seed = SeedState::new(c.sv, 0).derive(c.ep as u64);
        let scene = generate_scene_cfg(task, ep_seed.derive(0), ec.n_points, ec.physics.as_ref())?;
        let lc = LoopConfig {
            method,
            max_rounds: ec.max_rounds,
            adapt: ec.adapt,
            tc,
            offline: pool_tables[c.ti].as_ref().map(|(d, f)| (*d, f.as_slice())),
        };
        let out = run_episode_closed_loop(w, &scene, &lc, ep_seed.derive(1))?;
        Ok(EpisodeLine {
            method: method.to_string(),
            task: task.as_str().to_string(),
            seed: c.sv,
            episode: c.ep as u32,
            scene: scene_digest(&scene),
            success: out.success,
            rounds: out.rounds.len() as u32,
            m: out.round_ms(),
        })
    };

    let mut results: Vec<Option<Result<EpisodeLine>>> = (0..cells.len()).map(|_| None).collect();
    if ec.workers <= 1 {
        for (i, c) in cells.iter().enumerate() {
            results[i] = Some(run_cell(c));
        }
    } else {
        let stripes: Vec<Vec<(usize, Result<EpisodeLine>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..ec.workers)
                .map(|k| {
                    let cells = &cells;
                    let run_cell = &run_cell;
                    s.spawn(move || {
                        let mut out = Vec::new();
                        let mut i = k;
                        while i < cells.len() {
                            out.push((i, run_cell(&cells[i])));
                            i += ec.workers;
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker ran")).collect()
        });
        for stripe in stripes {
            for (i, r) in stripe {
                results[i] = Some(r);
            }
        }
    }

    // Single-writer aggregation, scanning in cell order so the first error
    // reported does not depend on thread scheduling.
    let per = ec.seeds.len() * ec.episodes;
    let mut tagged: Vec<(usize, usize, EpisodeLine)> = Vec::with_capacity(cells.len());
    let mut stats = vec![(0u32, 0u64); ec.methods.len() * ec.tasks.len()];
    let mut digests: HashMap<(usize, u64, u32), String> =
        HashMap::with_capacity(ec.tasks.len() * per);
    for (c, r) in cells.iter().zip(results) {
        let line = r.expect("every cell ran")?;
        match digests.entry((c.ti, line.seed, line.episode)) {
            Entry::Vacant(slot) => {
                slot.insert(line.scene.clone());
            }
            Entry::Occupied(seen) => {
                if *seen.get() != line.scene {
                    return Err(Error::invalid_state(
                        "paired evaluation generated different scenes across methods",
                    ));
                }
            }
        }
        let cell = &mut stats[c.mi * ec.tasks.len() + c.ti];
        if line.success {
            cell.0 += 1;
        }
        cell.1 += u64::from(line.rounds);
        tagged.push((c.mi, c.ti, line));
    }

    tagged.sort_by_key(|(mi, ti, line)| (*mi, *ti, line.seed, line.episode));
    let lines = tagged.into_iter().map(|(_, _, line)| line).collect();

    let mut rows = Vec::with_capacity(ec.methods.len() * ec.tasks.len());
    for (mi, &method) in ec.methods.iter().enumerate() {
        for (ti, &task) in ec.tasks.iter().enumerate() {
            let (successes, round_sum) = stats[mi * ec.tasks.len() + ti];
            rows.push(EvalRow {
                method: method.to_string(),
                task: task.as_str().to_string(),
                episodes: per as u32,
                successes,
                success_rate: successes as f64 / per as f64,
                mean_rounds: round_sum as f64 / per as f64,
                seeds: ec.seeds.clone(),
            });
        }
    }
    Ok(EvalReport { rows, lines })
}

/// Affordance map for a scene under an optional context window.
pub fn compute_heatmap(
    w: &ModelWeights,
    scene: &SceneInstance,
    frames: &[ContextFrame],
) -> Result<Vec<f64>> {
    let feats = scene_features(scene, w)?;
    let f_i = context_from_frames(scene, &feats, frames, w)?;
    affordance_map(scene, &feats, f_i.as_deref(), w)
}

/// ASCII PLY point set: position, normal, and the affordance score as a
/// per-vertex quality, one row per cloud point.
pub fn heatmap_text(scene: &SceneInstance, map: &[f64]) -> Result<String> {
    if map.len() != scene.cloud.len() {
        return Err(Error::invalid_argument("heatmap length != cloud size"));
    }
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "ply");
    let _ = writeln!(out, "format ascii 1.0");
    let _ = writeln!(out, "element vertex {}", map.len());
    for prop in ["x", "y", "z", "nx", "ny", "nz", "quality"] {
        let _ = writeln!(out, "property float {prop}");
    }
    let _ = writeln!(out, "end_header");
    for i in 0..map.len() {
        let p = scene.cloud.positions[i];
        let n = scene.cloud.normals[i];
        let _ = writeln!(out, "{} {} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2], map[i]);
    }
    Ok(out)
}

pub fn export_heatmap(
    w: &ModelWeights,
    scene: &SceneInstance,
    frames: &[ContextFrame],
    path: &Path,
) -> Result<()> {
    let map = compute_heatmap(w, scene, frames)?;
    let text = heatmap_text(scene, &map)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a heatmap file back into (position, normal, score) rows.
pub fn parse_heatmap(text: &str) -> Result<Vec<([f64; 3], [f64; 3], f64)>> {
    let mut lines = text.lines();
    let mut count: Option<usize> = None;
    for line in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| Error::corrupt("heatmap vertex count is not a number"))?,
            );
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::corrupt("heatmap header missing vertex count"))?;
    let mut rows = Vec::with_capacity(count);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::corrupt("heatmap row holds a non-number")))
            .collect::<Result<_>>()?;
        if vals.len() != 7 {
            return Err(Error::corrupt(format!("heatmap row has {} fields, expected 7", vals.len())));
        }
        rows.push(([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], vals[6]));
    }
    if rows.len() != count {
        return Err(Error::corrupt(format!(
            "heatmap header promises {count} rows, file holds {}",
            rows.len()
        )));
    }
    Ok(rows)
}

/// Shannon entropy of the map normalized to [0, 1] by ln(N). Mass-free maps
/// count as uniform.
pub fn normalized_entropy(map: &[f64]) -> f64 {
    let n = map.len();
    if n <= 1 {
        return 0.0;
    }
    let total: f64 = map.iter().filter(|v| **v > 0.0).sum();
    if total <= 0.0 {
        return 1.0;
    }
    let mut h = 0.0;
    for &v in map {
        if v > 0.0 {
            let p = v / total;
            h -= p * p.ln();
        }
    }
    (h / (n as f64).ln()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_dataset;
    use crate::encoders::ModelConfig;
    use crate::env::{generate_scene, TaskType};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            point_feature_dim: 8,
            small_dim: 4,
            context_dim: 6,
            latent_dim: 5,
            head_hidden: 10,
            small_hidden: 6,
            sa_widths: [6, 8, 8],
            sa_radii: [0.2, 0.4, 0.8],
            sa_max_group: 8,
            min_cloud: 16,
        }
    }

    fn tiny_tc() -> TrainConfig {
        TrainConfig {
            model: tiny_config(),
            k_top: 3,
            n_dirs: 4,
            k_avg: 2,
            ..TrainConfig::default()
        }
    }

    fn weights(tc: &TrainConfig) -> ModelWeights {
        ModelWeights::init(&tc.model, SeedState::new(41, 7)).expect("valid tiny config")
    }

    fn screw_scene(salt: u64) -> SceneInstance {
        generate_scene(TaskType::Screw, SeedState::new(900, 1).derive(salt), 160)
            .expect("scene generates")
    }

    fn sampler_lc(tc: &TrainConfig, method: MethodSpec) -> LoopConfig<'_> {
        LoopConfig { method, max_rounds: 3, adapt: false, tc, offline: None }
    }

    /// Probes loop seeds until an episode matches `want_success`.
    fn probe(
        w: Option<&ModelWeights>,
        scene: &SceneInstance,
        lc: &LoopConfig,
        want_success: bool,
    ) -> (SeedState, EpisodeOutcome) {
        for s in 0..200u64 {
            let seed = SeedState::new(7000 + s, 3);
            let out = run_episode_closed_loop(w, scene, lc, seed).expect("episode runs");
            if out.success == want_success {
                return (seed, out);
            }
        }
        panic!("no episode with success={want_success} in 200 seeds");
    }

    #[test]
    fn method_names_round_trip() {
        for m in ALL_METHODS {
            assert_eq!(m.as_str().parse::<MethodSpec>().unwrap(), m);
        }
        assert_eq!("OURS-NoTopK".parse::<MethodSpec>().unwrap(), MethodSpec::OursNoTopK);
        assert!("dp3".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn failed_rounds_stack_context_and_stop_at_the_cap() {
        let tc = tiny_tc();
        let scene = screw_scene(0);
        let lc = sampler_lc(&tc, MethodSpec::Random);
        let (_, out) = probe(None, &scene, &lc, false);
        assert_eq!(out.rounds.len(), 3);
        assert_eq!(out.records.len(), 3);
        assert!(!out.success);
        for (i, rec) in out.records.iter().enumerate() {
            assert_eq!(rec.step_index, i as u32);
            assert_eq!(rec.source, SamplingSource::Random);
            assert_eq!(rec.context.len(), i);
            for (frame, earlier) in rec.context.iter().zip(&out.records) {
                assert_eq!(frame.action, earlier.action);
            }
        }
        for r in &out.rounds {
            assert!(!r.supported);
            assert!(r.m >= scene.physics.epsilon);
            assert_eq!(r.steps_held, 1);
        }
    }

    #[test]
    fn first_round_success_is_one_record_with_empty_context() {
        let tc = tiny_tc();
        let scene = screw_scene(1);
        let lc = sampler_lc(&tc, MethodSpec::Heuristic);
        let (_, out) = probe(None, &scene, &lc, true);
        let first = &out.rounds[0];
        if out.rounds.len() == 1 {
            assert_eq!(out.records.len(), 1);
            assert!(out.records[0].context.is_empty());
            assert!(first.supported);
            assert!(first.m < scene.physics.epsilon);
            assert!(first.steps_held >= scene.physics.steps_to_goal);
            assert!((first.goal_progress - 1.0).abs() < 1e-12);
        }
        let last = out.rounds.last().unwrap();
        assert!(last.supported && last.m < scene.physics.epsilon);
        assert!(out.records.last().unwrap().r > 0.0);
    }

    #[test]
    fn episodes_replay_bit_identically() {
        let tc = tiny_tc();
        let w = weights(&tc);
        let scene = screw_scene(2);
        for method in [MethodSpec::Random, MethodSpec::Ours, MethodSpec::OursNoAdapt] {
            let lc = sampler_lc(&tc, method);
            let wopt = method.learned().then_some(&w);
            let a = run_episode_closed_loop(wopt, &scene, &lc, SeedState::new(5, 5)).unwrap();
            let b = run_episode_closed_loop(wopt, &scene, &lc, SeedState::new(5, 5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn learned_methods_demand_weights_and_adaptation_demands_a_pool() {
        let tc = tiny_tc();
        let w = weights(&tc);
        let scene = screw_scene(3);
        let lc = sampler_lc(&tc, MethodSpec::Ours);
        let err = run_episode_closed_loop(None, &scene, &lc, SeedState::new(1, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)), "{err}");

        let lc = LoopConfig { adapt: true, ..sampler_lc(&tc, MethodSpec::Ours) };
        let err = run_episode_closed_loop(Some(&w), &scene, &lc, SeedState::new(1, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)), "{err}");

        let lc = LoopConfig { adapt: true, ..sampler_lc(&tc, MethodSpec::OursNoAdapt) };
        run_episode_closed_loop(Some(&w), &scene, &lc, SeedState::new(1, 1))
            .expect("no-adapt method ignores the adapt flag");
    }

    #[test]
    fn notopk_is_ours_with_k_pinned_to_one() {
        let mut tc = tiny_tc();
        tc.k_top = 1;
        let w = weights(&tc);
        let scene = screw_scene(4);
        let ours = run_episode_closed_loop(
            Some(&w),
            &scene,
            &sampler_lc(&tc, MethodSpec::Ours),
            SeedState::new(9, 9),
        )
        .unwrap();
        let notopk = run_episode_closed_loop(
            Some(&w),
            &scene,
            &sampler_lc(&tc, MethodSpec::OursNoTopK),
            SeedState::new(9, 9),
        )
        .unwrap();
        assert_eq!(ours, notopk);
    }

    #[test]
    fn context_moves_the_map_unless_adaptation_is_off() {
        let tc = tiny_tc();
        let w = weights(&tc);
        let scene = screw_scene(5);

        let lc = sampler_lc(&tc, MethodSpec::OursNoAdapt);
        let (seed, out) = probe(Some(&w), &scene, &lc, false);
        let digests: Vec<_> = out.rounds.iter().map(|r| r.map_digest.clone().unwrap()).collect();
        assert!(digests.windows(2).all(|p| p[0] == p[1]), "no-adapt map must stay put");

        let lc = sampler_lc(&tc, MethodSpec::Ours);
        let out = run_episode_closed_loop(Some(&w), &scene, &lc, seed).unwrap();
        assert!(!out.rounds[0].adapted, "adapt flag off means no fine-tuning");
        if out.rounds.len() >= 2 {
            assert_ne!(
                out.rounds[0].map_digest, out.rounds[1].map_digest,
                "a failed frame must condition the next map"
            );
        }
    }

    #[test]
    fn online_collection_is_policy_sourced_and_replays() {
        let tc = tiny_tc();
        let w = weights(&tc);
        let cc = CollectConfig {
            task: TaskType::Push,
            n_records: 17,
            mix: 0.0,
            k_max: 3,
            n_points: 160,
            physics: None,
            alpha: 1.0,
            beta: 1.0,
            config_hash: "test".into(),
        };
        let ds = collect_online(&w, &cc, &tc, SeedState::new(31, 2)).unwrap();
        assert_eq!(ds.records.len(), 17);
        assert_eq!(ds.manifest.counts, [0, 0, 17]);
        assert_eq!(ds.manifest.total_records, 17);
        for rec in &ds.records {
            assert_eq!(rec.source, SamplingSource::Policy);
            assert!((rec.scene_id as usize) < ds.scenes.len());
            assert_eq!(rec.context.len(), rec.step_index as usize);
        }
        let again = collect_online(&w, &cc, &tc, SeedState::new(31, 2)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn eval_crosses_methods_and_tasks_over_shared_scenes() {
        let tc = tiny_tc();
        let ec = EvalConfig {
            methods: vec![MethodSpec::Random, MethodSpec::Heuristic],
            tasks: vec![TaskType::Screw, TaskType::Pick],
            episodes: 3,
            seeds: vec![11, 12],
            n_points: 160,
            max_rounds: 3,
            adapt: false,
            physics: None,
            workers: 1,
        };
        let report = run_eval(None, &ec, &tc, &[]).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.lines.len(), 2 * 2 * 2 * 3);
        for row in &report.rows {
            assert_eq!(row.episodes, 6);
            assert_eq!(row.success_rate, row.successes as f64 / 6.0);
            assert_eq!(row.seeds, vec![11, 12]);
            assert!(row.mean_rounds >= 1.0 && row.mean_rounds <= 3.0);
        }
        for line in &report.lines {
            assert_eq!(line.m.len(), line.rounds as usize);
        }
        // Paired design: same (task, seed, episode) shows one scene digest.
        for (a, b) in report.lines.iter().flat_map(|a| report.lines.iter().map(move |b| (a, b))) {
            if a.task == b.task && a.seed == b.seed && a.episode == b.episode {
                assert_eq!(a.scene, b.scene);
            }
        }
        let again = run_eval(None, &ec, &tc, &[]).unwrap();
        assert_eq!(report, again);
        assert_eq!(report.results_jsonl().unwrap(), again.results_jsonl().unwrap());
        assert!(report.table().contains("heuristic"));

        // Worker count changes scheduling only, never the report.
        let threaded = run_eval(None, &EvalConfig { workers: 3, ..ec.clone() }, &tc, &[]).unwrap();
        assert_eq!(report, threaded);

        let err = run_eval(None, &EvalConfig { workers: 0, ..ec }, &tc, &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn eval_gates_checkpoints_and_pools() {
        let tc = tiny_tc();
        let base = EvalConfig {
            methods: vec![MethodSpec::Ours],
            tasks: vec![TaskType::Screw],
            episodes: 1,
            seeds: vec![1],
            n_points: 160,
            max_rounds: 3,
            adapt: true,
            physics: None,
            workers: 1,
        };
        let err = run_eval(None, &base, &tc, &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)), "{err}");

        let w = weights(&tc);
        let err = run_eval(Some(&w), &base, &tc, &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)), "{err}");

        let ec = EvalConfig { adapt: false, ..base };
        run_eval(Some(&w), &ec, &tc, &[]).expect("context-only eval needs no pool");
    }

    #[test]
    fn eval_with_adaptation_draws_on_the_offline_pool() {
        let tc = tiny_tc();
        let w = weights(&tc);
        let cc = CollectConfig {
            task: TaskType::Screw,
            n_records: 12,
            mix: 0.5,
            k_max: 3,
            n_points: 160,
            physics: None,
            alpha: 1.0,
            beta: 1.0,
            config_hash: "test".into(),
        };
        let pool = crate::data::collect_offline(&cc, SeedState::new(77, 0)).unwrap();
        let ec = EvalConfig {
            methods: vec![MethodSpec::Ours],
            tasks: vec![TaskType::Screw],
            episodes: 2,
            seeds: vec![3],
            n_points: 160,
            max_rounds: 3,
            adapt: true,
            physics: None,
            workers: 1,
        };
        let report = run_eval(Some(&w), &ec, &tc, &[pool]).unwrap();
        assert_eq!(report.rows.len(), 1);
        let failed_rounds: u32 = report.lines.iter().map(|l| l.rounds - u32::from(l.success)).sum();
        if failed_rounds > 0 {
            // At least one episode had a round to adapt after.
            assert!(report.lines.iter().any(|l| l.rounds > 1 || !l.success));
        }
    }

    #[test]
    fn heatmap_round_trips_and_scores_stay_in_range() {
        let tc = tiny_tc();
        let w = weights(&tc);
        let scene = screw_scene(6);
        let map = compute_heatmap(&w, &scene, &[]).unwrap();
        assert_eq!(map.len(), scene.cloud.len());
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
        let text = heatmap_text(&scene, &map).unwrap();
        let rows = parse_heatmap(&text).unwrap();
        assert_eq!(rows.len(), scene.cloud.len());
        for (i, (p, n, q)) in rows.iter().enumerate() {
            assert_eq!(*p, scene.cloud.positions[i]);
            assert_eq!(*n, scene.cloud.normals[i]);
            assert_eq!(*q, map[i]);
        }

        let action = random_support(&scene, SeedState::new(2, 2));
        let (next, m, res) = step_episode(&scene, &action).unwrap();
        assert!(res.m >= 0.0);
        let bundle = DisplacementBundle::from_poses(&scene.base_pose, &next.base_pose, m);
        let ctx_map = compute_heatmap(&w, &scene, &[ContextFrame { action, bundle }]).unwrap();
        assert_eq!(ctx_map.len(), map.len());
        assert_ne!(ctx_map, map, "a context frame must move the map");
    }

    #[test]
    fn entropy_is_one_for_uniform_and_zero_for_point_mass() {
        assert!((normalized_entropy(&[0.25; 64]) - 1.0).abs() < 1e-12);
        let mut peaked = vec![0.0; 64];
        peaked[17] = 0.9;
        assert_eq!(normalized_entropy(&peaked), 0.0);
        assert_eq!(normalized_entropy(&[0.7]), 0.0);
        assert_eq!(normalized_entropy(&[]), 0.0);
        assert_eq!(normalized_entropy(&[0.0; 8]), 1.0);
        let skewed = [0.9, 0.01, 0.01, 0.01];
        let e = normalized_entropy(&skewed);
        assert!(e > 0.0 && e < 1.0);
    }

    #[test]
    fn online_datasets_persist_like_offline_ones() {
        let tc = tiny_tc();
        let w = weights(&tc);
        let cc = CollectConfig {
            task: TaskType::Pull,
            n_records: 9,
            mix: 0.0,
            k_max: 3,
            n_points: 160,
            physics: None,
            alpha: 1.0,
            beta: 1.0,
            config_hash: "persist".into(),
        };
        let ds = collect_online(&w, &cc, &tc, SeedState::new(8, 8)).unwrap();
        let dir = std::env::temp_dir().join(format!("bracepoint-harness-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("online.bpds");
        save_dataset(&ds, &path).unwrap();
        let back = crate::data::load_dataset(&path).unwrap();
        assert_eq!(ds, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
