//! Interaction datasets and model checkpoints: record types, offline
//! collection with mixed random/heuristic sampling, and the binary file
//! formats with content hashing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{
    generate_scene_cfg, goal_delta, heuristic_support, random_support, step_episode,
    DisplacementBundle, PhysicsOverride, PhysicsParams, SceneInstance, SupportAction, TaskType,
    Wrench,
};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose, SeedState};
use crate::learning::gt_score;
use crate::policy::ModelWeights;

/// Which sampler produced a record's action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingSource {
    Random,
    Heuristic,
    Policy,
}

impl SamplingSource {
    pub const ALL: [SamplingSource; 3] =
        [SamplingSource::Random, SamplingSource::Heuristic, SamplingSource::Policy];

    fn to_u8(self) -> u8 {
        match self {
            SamplingSource::Random => 0,
            SamplingSource::Heuristic => 1,
            SamplingSource::Policy => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SamplingSource::Random),
            1 => Ok(SamplingSource::Heuristic),
            2 => Ok(SamplingSource::Policy),
            _ => Err(Error::corrupt(format!("unknown sampling source tag {v}"))),
        }
    }
}

impl fmt::Display for SamplingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SamplingSource::Random => "random",
            SamplingSource::Heuristic => "heuristic",
            SamplingSource::Policy => "policy",
        };
        f.write_str(s)
    }
}

impl FromStr for SamplingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingSource::Random),
            "heuristic" => Ok(SamplingSource::Heuristic),
            "policy" => Ok(SamplingSource::Policy),
            _ => Err(Error::invalid_argument(format!("unknown sampling source '{s}'"))),
        }
    }
}

/// One earlier failed step of the same episode, as observed context. The
/// cloud is shared with the owning record's scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFrame {
    pub action: SupportAction,
    pub bundle: DisplacementBundle,
}

/// One attempted (state, action, outcome) tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub scene_id: u32,
    pub episode_id: u32,
    pub step_index: u32,
    pub source: SamplingSource,
    pub p_op: u32,
    pub action: SupportAction,
    pub bundle: DisplacementBundle,
    pub g_d: f64,
    pub g_c: f64,
    pub r: f64,
    /// Failed frames of the same episode that precede this step, in time
    /// order.
    pub context: Vec<ContextFrame>,
}

/// Summary block stored alongside the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task: TaskType,
    pub total_records: u32,
    /// Record counts by source, ordered random/heuristic/policy.
    pub counts: [u32; 3],
    pub seed: (u64, u64),
    pub alpha: f64,
    pub beta: f64,
    pub mix: f64,
    pub k_max: u32,
    pub n_points: u32,
    pub config_hash: String,
}

/// Scenes plus the interaction records collected on them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Scene snapshots at spawn; records refer into this table.
    pub scenes: Vec<SceneInstance>,
    pub records: Vec<InteractionRecord>,
}

impl Dataset {
    pub fn counts_by_source(records: &[InteractionRecord]) -> [u32; 3] {
        let mut counts = [0u32; 3];
        for r in records {
            counts[r.source.to_u8() as usize] += 1;
        }
        counts
    }
}

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything `collect_offline` needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub task: TaskType,
    pub n_records: usize,
    /// Per-step probability of the heuristic sampler; otherwise random.
    pub mix: f64,
    /// Step budget per episode.
    pub k_max: u32,
    pub n_points: usize,
    /// Physics replacements for every generated scene; `None` keeps the
    /// task families' values.
    pub physics: Option<PhysicsOverride>,
    pub alpha: f64,
    pub beta: f64,
    pub config_hash: String,
}

/// Runs scripted episodes until `n_records` attempted steps are recorded.
/// Each step independently picks the heuristic sampler with probability
/// `mix`; episodes stop at success or after `k_max` steps. Unsupported
/// steps are appended to the context window carried by later records of
/// the same episode.
pub fn collect_offline(cc: &CollectConfig, seed: SeedState) -> Result<Dataset> {
    if cc.n_records == 0 {
        return Err(Error::invalid_argument("collect_offline: n_records must be positive"));
    }
    if !(0.0..=1.0).contains(&cc.mix) {
        return Err(Error::invalid_argument("collect_offline: mix outside [0, 1]"));
    }
    if cc.k_max == 0 {
        return Err(Error::invalid_argument("collect_offline: k_max must be positive"));
    }

    let mut scenes = Vec::new();
    let mut records: Vec<InteractionRecord> = Vec::with_capacity(cc.n_records);
    let mut episode: u32 = 0;
    while records.len() < cc.n_records {
        let ep_seed = seed.derive(episode as u64);
        let spawn = generate_scene_cfg(cc.task, ep_seed.derive(0), cc.n_points, cc.physics.as_ref())?;
        let scene_id = scenes.len() as u32;
        scenes.push(spawn.clone());

        let mut die = ep_seed.derive(1).rng();
        let mut scene = spawn;
        let mut context: Vec<ContextFrame> = Vec::new();
        for k in 0..cc.k_max {
            let heuristic = die.uniform() < cc.mix;
            let action_seed = ep_seed.derive(2 + k as u64);
            let (action, source) = if heuristic {
                (heuristic_support(&scene, action_seed), SamplingSource::Heuristic)
            } else {
                (random_support(&scene, action_seed), SamplingSource::Random)
            };
            let before = scene.base_pose;
            let (next, m, result) = step_episode(&scene, &action)?;
            let bundle = DisplacementBundle::from_poses(&before, &next.base_pose, m);
            let g_d = m / (2.0 * scene.physics.epsilon);
            let g_c = 1.0 - goal_delta(m, scene.physics.epsilon);
            records.push(InteractionRecord {
                scene_id,
                episode_id: episode,
                step_index: k,
                source,
                p_op: scene.p_op as u32,
                action,
                bundle,
                g_d,
                g_c,
                r: gt_score(g_d, g_c, cc.alpha, cc.beta),
                context: context.clone(),
            });
            if records.len() == cc.n_records || result.success {
                break;
            }
            if !result.supported {
                context.push(ContextFrame { action, bundle });
            }
            scene = next;
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

// ---------------------------------------------------------------------------
// Binary plumbing. Both file formats share the layout
//   magic[4] version(u32) sha256[32] body...
// where the hash covers the whole file with its own field zeroed.

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(4096);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&[0u8; 32]);
        ByteWriter { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn short_str(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize);
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn vec3(&mut self, v: [f64; 3]) {
        for x in v {
            self.f64(x);
        }
    }

    /// Stamps the content hash and returns the finished bytes.
    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf[8..40].copy_from_slice(&digest);
        self.buf
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::corrupt(format!(
                "file ends at byte {} while reading {n} bytes at offset {}",
                self.buf.len(),
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn short_str(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::corrupt("string is not utf-8"))
    }

    fn vec3(&mut self) -> Result<[f64; 3]> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::corrupt(format!(
                "{} trailing bytes after the last field",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Checks magic, version, and the content hash, and hands back a reader
/// positioned at the body.
fn open_envelope<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32, kind: &str) -> Result<ByteReader<'a>> {
    if bytes.len() < 40 {
        return Err(Error::corrupt(format!("{kind} file shorter than its header")));
    }
    if &bytes[0..4] != magic {
        return Err(Error::corrupt(format!("not a {kind} file")));
    }
    let got_version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if got_version != version {
        return Err(Error::UnsupportedFormat(format!(
            "{kind} format version {got_version}, this build reads {version}"
        )));
    }
    let mut zeroed = bytes.to_vec();
    zeroed[8..40].fill(0);
    let digest = Sha256::digest(&zeroed);
    if digest.as_slice() != &bytes[8..40] {
        return Err(Error::corrupt(format!("{kind} content hash mismatch")));
    }
    let mut reader = ByteReader::new(bytes);
    reader.pos = 40;
    Ok(reader)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn task_to_u8(task: TaskType) -> u8 {
    match task {
        TaskType::Screw => 0,
        TaskType::Push => 1,
        TaskType::Pull => 2,
        TaskType::Pick => 3,
    }
}

fn task_from_u8(v: u8) -> Result<TaskType> {
    match v {
        0 => Ok(TaskType::Screw),
        1 => Ok(TaskType::Push),
        2 => Ok(TaskType::Pull),
        3 => Ok(TaskType::Pick),
        _ => Err(Error::corrupt(format!("unknown task tag {v}"))),
    }
}

fn write_scene(w: &mut ByteWriter, scene: &SceneInstance) {
    let n = scene.cloud.len();
    w.u32(n as u32);
    // Cloud geometry is generated under f32 quantization, so storing f32
    // round-trips bit-exactly.
    for p in &scene.cloud.positions {
        for k in 0..3 {
            w.f32(p[k] as f32);
        }
    }
    for nm in &scene.cloud.normals {
        for k in 0..3 {
            w.f32(nm[k] as f32);
        }
    }
    for &l in &scene.cloud.part_label {
        w.u8(l);
    }
    w.vec3(scene.base_pose.translation);
    for k in 0..4 {
        w.f64(scene.base_pose.rotation[k]);
    }
    w.u8(task_to_u8(scene.task));
    w.u32(scene.p_op as u32);
    w.vec3(scene.op_wrench.force);
    w.vec3(scene.op_wrench.torque);
    let ph = &scene.physics;
    for v in [
        ph.resist_force,
        ph.resist_torque,
        ph.support_force,
        ph.contact_cone_angle,
        ph.gain_force,
        ph.gain_torque,
        ph.epsilon,
        ph.rot_weight,
    ] {
        w.f64(v);
    }
    w.u32(ph.steps_to_goal);
    w.u32(scene.heuristic_region.len() as u32);
    for &i in &scene.heuristic_region {
        w.u32(i as u32);
    }
    w.f64(scene.goal_progress);
}

/// Short hex digest of a scene's serialized form. Paired evaluation episodes
/// compare digests to confirm every method saw the identical scene.
pub fn scene_digest(scene: &SceneInstance) -> String {
    let mut w = ByteWriter::new(b"SCNE", DATASET_VERSION);
    write_scene(&mut w, scene);
    let bytes = w.finish();
    bytes[8..24].iter().map(|b| format!("{b:02x}")).collect()
}

fn read_scene(r: &mut ByteReader) -> Result<SceneInstance> {
    let n = r.u32()? as usize;
    if n > 1 << 24 {
        return Err(Error::corrupt(format!("scene claims {n} points")));
    }
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]);
    }
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        normals.push([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]);
    }
    let mut part_label = Vec::with_capacity(n);
    for _ in 0..n {
        part_label.push(r.u8()?);
    }
    let cloud = PointCloud::new(positions, normals, part_label)
        .map_err(|e| Error::corrupt(format!("stored cloud is invalid: {e}")))?;
    let base_pose = Pose {
        translation: r.vec3()?,
        rotation: [r.f64()?, r.f64()?, r.f64()?, r.f64()?],
    };
    let task = task_from_u8(r.u8()?)?;
    let p_op = r.u32()? as usize;
    let op_wrench = Wrench { force: r.vec3()?, torque: r.vec3()? };
    let physics = PhysicsParams {
        resist_force: r.f64()?,
        resist_torque: r.f64()?,
        support_force: r.f64()?,
        contact_cone_angle: r.f64()?,
        gain_force: r.f64()?,
        gain_torque: r.f64()?,
        epsilon: r.f64()?,
        rot_weight: r.f64()?,
        steps_to_goal: r.u32()?,
    };
    let region_len = r.u32()? as usize;
    if region_len > n {
        return Err(Error::corrupt("heuristic region larger than the cloud"));
    }
    let mut heuristic_region = Vec::with_capacity(region_len);
    for _ in 0..region_len {
        heuristic_region.push(r.u32()? as usize);
    }
    let goal_progress = r.f64()?;
    let scene = SceneInstance {
        cloud,
        base_pose,
        task,
        p_op,
        op_wrench,
        physics,
        heuristic_region,
        goal_progress,
    };
    scene.validate().map_err(|e| Error::corrupt(format!("stored scene is invalid: {e}")))?;
    Ok(scene)
}

fn write_bundle(w: &mut ByteWriter, b: &DisplacementBundle) {
    w.f64(b.m);
    w.vec3(b.translation);
    w.vec3(b.rotation);
}

fn read_bundle(r: &mut ByteReader) -> Result<DisplacementBundle> {
    Ok(DisplacementBundle { m: r.f64()?, translation: r.vec3()?, rotation: r.vec3()? })
}

fn write_record(w: &mut ByteWriter, rec: &InteractionRecord) {
    w.u32(rec.scene_id);
    w.u32(rec.episode_id);
    w.u32(rec.step_index);
    w.u8(rec.source.to_u8());
    w.u32(rec.p_op);
    w.u32(rec.action.p_sp as u32);
    w.vec3(rec.action.d);
    write_bundle(w, &rec.bundle);
    w.f64(rec.g_d);
    w.f64(rec.g_c);
    w.f64(rec.r);
    w.u16(rec.context.len() as u16);
    for frame in &rec.context {
        w.u32(frame.action.p_sp as u32);
        w.vec3(frame.action.d);
        write_bundle(w, &frame.bundle);
    }
}

fn read_record(r: &mut ByteReader) -> Result<InteractionRecord> {
    let scene_id = r.u32()?;
    let episode_id = r.u32()?;
    let step_index = r.u32()?;
    let source = SamplingSource::from_u8(r.u8()?)?;
    let p_op = r.u32()?;
    let p_sp = r.u32()? as usize;
    let d = r.vec3()?;
    let action = SupportAction::new(p_sp, d)
        .map_err(|e| Error::corrupt(format!("stored action is invalid: {e}")))?;
    let bundle = read_bundle(r)?;
    let g_d = r.f64()?;
    let g_c = r.f64()?;
    let r_val = r.f64()?;
    let ctx_len = r.u16()? as usize;
    let mut context = Vec::with_capacity(ctx_len);
    for _ in 0..ctx_len {
        let p_sp = r.u32()? as usize;
        let d = r.vec3()?;
        let action = SupportAction::new(p_sp, d)
            .map_err(|e| Error::corrupt(format!("stored context action is invalid: {e}")))?;
        context.push(ContextFrame { action, bundle: read_bundle(r)? });
    }
    Ok(InteractionRecord {
        scene_id,
        episode_id,
        step_index,
        source,
        p_op,
        action,
        bundle,
        g_d,
        g_c,
        r: r_val,
        context,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"BPDS";
const CHECKPOINT_MAGIC: &[u8; 4] = b"BPCK";

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new(DATASET_MAGIC, DATASET_VERSION);
    let m = &ds.manifest;
    w.u8(task_to_u8(m.task));
    w.u32(m.total_records);
    for c in m.counts {
        w.u32(c);
    }
    w.u64(m.seed.0);
    w.u64(m.seed.1);
    w.f64(m.alpha);
    w.f64(m.beta);
    w.f64(m.mix);
    w.u32(m.k_max);
    w.u32(m.n_points);
    w.short_str(&m.config_hash);
    w.u32(ds.scenes.len() as u32);
    for scene in &ds.scenes {
        write_scene(&mut w, scene);
    }
    w.u32(ds.records.len() as u32);
    for rec in &ds.records {
        write_record(&mut w, rec);
    }
    w.finish()
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(ds))
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = open_envelope(bytes, DATASET_MAGIC, DATASET_VERSION, "dataset")?;
    let task = task_from_u8(r.u8()?)?;
    let total_records = r.u32()?;
    let counts = [r.u32()?, r.u32()?, r.u32()?];
    let seed = (r.u64()?, r.u64()?);
    let alpha = r.f64()?;
    let beta = r.f64()?;
    let mix = r.f64()?;
    let k_max = r.u32()?;
    let n_points = r.u32()?;
    let config_hash = r.short_str()?;
    let n_scenes = r.u32()? as usize;
    let mut scenes = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        scenes.push(read_scene(&mut r)?);
    }
    let n_records = r.u32()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        records.push(read_record(&mut r)?);
    }
    r.done()?;

    if total_records as usize != records.len() {
        return Err(Error::corrupt(format!(
            "manifest claims {total_records} records, file holds {}",
            records.len()
        )));
    }
    let recount = Dataset::counts_by_source(&records);
    if recount != counts {
        return Err(Error::corrupt(format!(
            "manifest counts {counts:?} disagree with recount {recount:?}"
        )));
    }
    for rec in &records {
        if rec.scene_id as usize >= scenes.len() {
            return Err(Error::corrupt(format!("record points at missing scene {}", rec.scene_id)));
        }
        let cloud_len = scenes[rec.scene_id as usize].cloud.len();
        if rec.action.p_sp >= cloud_len || rec.p_op as usize >= cloud_len {
            return Err(Error::corrupt("record indexes outside its scene's cloud"));
        }
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: DATASET_VERSION,
            task,
            total_records,
            counts,
            seed,
            alpha,
            beta,
            mix,
            k_max,
            n_points,
            config_hash,
        },
        scenes,
        records,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

/// Concatenates datasets into one training pool, rebasing record scene ids.
/// Score weights must match across parts so the stored `r` values mean the
/// same thing; the merged manifest keeps the first part's task and seeds.
pub fn merge_datasets(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid_argument("merge_datasets: no datasets given"))?;
    for p in parts {
        if p.manifest.alpha != first.manifest.alpha || p.manifest.beta != first.manifest.beta {
            return Err(Error::invalid_argument(
                "merge_datasets: parts disagree on score weights alpha/beta",
            ));
        }
    }
    let mut scenes = Vec::with_capacity(parts.iter().map(|p| p.scenes.len()).sum());
    let mut records = Vec::with_capacity(parts.iter().map(|p| p.records.len()).sum());
    for p in parts {
        let base = scenes.len() as u32;
        scenes.extend(p.scenes.iter().cloned());
        for rec in &p.records {
            let mut rec = rec.clone();
            rec.scene_id += base;
            records.push(rec);
        }
    }
    let counts = Dataset::counts_by_source(&records);
    let mut manifest = first.manifest.clone();
    manifest.total_records = records.len() as u32;
    manifest.counts = counts;
    Ok(Dataset { manifest, scenes, records })
}

pub fn checkpoint_to_bytes(model: &ModelWeights) -> Vec<u8> {
    let mut w = ByteWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    let cfg_json = serde_json::to_string(&model.config).expect("model config serializes");
    w.u32(cfg_json.len() as u32);
    w.buf.extend_from_slice(cfg_json.as_bytes());

    let mut clone = model.clone();
    let mut params = Vec::new();
    clone.collect_params(&mut params);
    w.u32(params.len() as u32);
    for (name, values) in params {
        w.short_str(&name);
        w.u32(values.len() as u32);
        for v in values.iter() {
            w.f64(*v);
        }
    }
    w.finish()
}

pub fn save_checkpoint(model: &ModelWeights, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(model))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = open_envelope(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let config: crate::encoders::ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| Error::corrupt(format!("stored model config does not parse: {e}")))?;
    let n_arrays = r.u32()? as usize;
    let mut stored: Vec<(String, Vec<f64>)> = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name = r.short_str()?;
        let len = r.u32()? as usize;
        if len > 1 << 28 {
            return Err(Error::corrupt(format!("array {name} claims {len} values")));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64()?);
        }
        stored.push((name, values));
    }
    r.done()?;

    let mut model = ModelWeights::init(&config, SeedState::new(0, 0))?;
    let mut params = Vec::new();
    model.collect_params(&mut params);
    if params.len() != stored.len() {
        return Err(Error::corrupt(format!(
            "checkpoint holds {} arrays, model shape needs {}",
            stored.len(),
            params.len()
        )));
    }
    for ((name, slot), (stored_name, values)) in params.iter_mut().zip(stored) {
        if *name != stored_name {
            return Err(Error::corrupt(format!(
                "checkpoint array '{stored_name}' where '{name}' was expected"
            )));
        }
        if slot.len() != values.len() {
            return Err(Error::corrupt(format!(
                "array '{name}' holds {} values, model shape needs {}",
                values.len(),
                slot.len()
            )));
        }
        **slot = values;
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;

    fn quick_config(task: TaskType, n_records: usize, mix: f64) -> CollectConfig {
        CollectConfig {
            task,
            n_records,
            mix,
            k_max: 6,
            n_points: 160,
            physics: None,
            alpha: 1.0,
            beta: 1.0,
            config_hash: "test".into(),
        }
    }

    fn episode_successes(ds: &Dataset) -> (usize, usize) {
        let mut episodes = 0usize;
        let mut successes = 0usize;
        let mut cur: Option<u32> = None;
        let mut progress = 0.0;
        let mut last_supported = false;
        let mut steps_to_goal = 1.0;
        for rec in ds.records.iter() {
            if cur != Some(rec.episode_id) {
                if let Some(_) = cur {
                    episodes += 1;
                    if progress >= 1.0 && last_supported {
                        successes += 1;
                    }
                }
                cur = Some(rec.episode_id);
                progress = 0.0;
                steps_to_goal = ds.scenes[rec.scene_id as usize].physics.steps_to_goal as f64;
            }
            progress = (progress + (1.0 - rec.g_c) / steps_to_goal).min(1.0);
            last_supported = rec.g_d < 0.5;
        }
        if cur.is_some() {
            episodes += 1;
            if progress >= 1.0 && last_supported {
                successes += 1;
            }
        }
        (episodes, successes)
    }

    #[test]
    fn pure_mixes_use_a_single_sampler() {
        let all_h = collect_offline(&quick_config(TaskType::Screw, 60, 1.0), SeedState::new(1, 0)).unwrap();
        assert!(all_h.records.iter().all(|r| r.source == SamplingSource::Heuristic));
        assert_eq!(all_h.manifest.counts[0], 0);
        assert_eq!(all_h.manifest.counts[1], 60);

        let all_r = collect_offline(&quick_config(TaskType::Screw, 60, 0.0), SeedState::new(1, 0)).unwrap();
        assert!(all_r.records.iter().all(|r| r.source == SamplingSource::Random));
    }

    #[test]
    fn context_windows_hold_prior_failed_steps_in_order() {
        let ds = collect_offline(&quick_config(TaskType::Push, 120, 0.4), SeedState::new(2, 0)).unwrap();
        assert_eq!(ds.manifest.total_records, 120);
        for rec in &ds.records {
            assert!(rec.context.len() < ds.manifest.k_max as usize);
            assert!(rec.context.len() <= rec.step_index as usize);
        }
        // Within an episode the context grows only by failed steps and
        // preserves time order.
        let mut by_episode: std::collections::BTreeMap<u32, Vec<&InteractionRecord>> = Default::default();
        for rec in &ds.records {
            by_episode.entry(rec.episode_id).or_default().push(rec);
        }
        for (_, recs) in by_episode {
            let mut expect: Vec<ContextFrame> = Vec::new();
            for rec in recs {
                assert_eq!(rec.context, expect);
                let eps = ds.scenes[rec.scene_id as usize].physics.epsilon;
                if rec.bundle.m >= eps {
                    expect.push(ContextFrame { action: rec.action, bundle: rec.bundle });
                }
            }
        }
    }

    #[test]
    fn recorded_scores_recompute_from_their_parts() {
        let ds = collect_offline(&quick_config(TaskType::Pick, 80, 0.5), SeedState::new(3, 0)).unwrap();
        for rec in &ds.records {
            let r = gt_score(rec.g_d, rec.g_c, ds.manifest.alpha, ds.manifest.beta);
            assert!((r - rec.r).abs() < 1e-9);
            assert!(rec.g_d >= 0.0 && (0.0..=1.0).contains(&rec.g_c));
        }
    }

    #[test]
    fn collection_replays_bit_identically() {
        let cc = quick_config(TaskType::Pull, 100, 0.5);
        let a = collect_offline(&cc, SeedState::new(4, 7)).unwrap();
        let b = collect_offline(&cc, SeedState::new(4, 7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(dataset_to_bytes(&a), dataset_to_bytes(&b));
    }

    #[test]
    fn mixed_sampling_lands_between_the_pure_strategies() {
        let n = 400;
        let rand = collect_offline(&quick_config(TaskType::Screw, n, 0.0), SeedState::new(5, 0)).unwrap();
        let mixed = collect_offline(&quick_config(TaskType::Screw, n, 0.5), SeedState::new(5, 0)).unwrap();
        let heur = collect_offline(&quick_config(TaskType::Screw, n, 1.0), SeedState::new(5, 0)).unwrap();
        let rate = |ds: &Dataset| {
            let (eps, succ) = episode_successes(ds);
            succ as f64 / eps as f64
        };
        let (r_lo, r_mid, r_hi) = (rate(&rand), rate(&mixed), rate(&heur));
        assert!(
            r_lo <= r_mid + 0.05 && r_mid <= r_hi + 0.05,
            "success rates not ordered: random {r_lo}, mixed {r_mid}, heuristic {r_hi}"
        );
        assert!(r_hi > r_lo, "heuristic collection must outperform random");
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pull.bpds");
        let ds = collect_offline(&quick_config(TaskType::Pull, 50, 0.6), SeedState::new(6, 1)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
        let again = dataset_to_bytes(&loaded);
        assert_eq!(std::fs::read(&path).unwrap(), again);
    }

    #[test]
    fn merged_datasets_rebase_scene_ids_and_recount() {
        let a = collect_offline(&quick_config(TaskType::Screw, 20, 0.0), SeedState::new(1, 0)).unwrap();
        let b = collect_offline(&quick_config(TaskType::Push, 15, 1.0), SeedState::new(2, 0)).unwrap();
        let merged = merge_datasets(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(merged.scenes.len(), a.scenes.len() + b.scenes.len());
        assert_eq!(merged.records.len(), 35);
        assert_eq!(merged.manifest.total_records, 35);
        assert_eq!(merged.manifest.counts, [20, 15, 0]);
        assert_eq!(merged.manifest.task, TaskType::Screw);
        for (rec, orig) in merged.records[20..].iter().zip(&b.records) {
            assert_eq!(rec.scene_id, orig.scene_id + a.scenes.len() as u32);
            assert_eq!(rec.action, orig.action);
        }
        // Every rebased id must land on the scene it was collected in.
        for rec in &merged.records {
            assert!((rec.scene_id as usize) < merged.scenes.len());
        }

        let mut skewed = b;
        skewed.manifest.alpha = 2.0;
        assert!(merge_datasets(&[a, skewed]).is_err());
        assert!(merge_datasets(&[]).is_err());
    }

    #[test]
    fn dataset_rejects_damage_and_version_skew() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("screw.bpds");
        let ds = collect_offline(&quick_config(TaskType::Screw, 30, 0.5), SeedState::new(7, 0)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(dataset_from_bytes(truncated), Err(Error::CorruptData(_))));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(dataset_from_bytes(&flipped), Err(Error::CorruptData(_))));

        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(DATASET_VERSION + 1).to_le_bytes());
        assert!(matches!(dataset_from_bytes(&newer), Err(Error::UnsupportedFormat(_))));

        // Damage a manifest count and re-stamp the hash: the envelope passes
        // but the recount catches it.
        let mut wrong_count = bytes.clone();
        let count0 = 40 + 1 + 4;
        let stored = u32::from_le_bytes(wrong_count[count0..count0 + 4].try_into().unwrap());
        wrong_count[count0..count0 + 4].copy_from_slice(&(stored + 1).to_le_bytes());
        wrong_count[8..40].fill(0);
        let digest = Sha256::digest(&wrong_count);
        wrong_count[8..40].copy_from_slice(&digest);
        let err = dataset_from_bytes(&wrong_count).unwrap_err();
        assert!(matches!(err, Error::CorruptData(_)));
        assert!(err.to_string().contains("recount") || err.to_string().contains("records"));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bpck");
        let cfg = ModelConfig {
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
        };
        let model = ModelWeights::init(&cfg, SeedState::new(8, 2)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);

        let bytes = std::fs::read(&path).unwrap();
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(checkpoint_from_bytes(&newer), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(checkpoint_from_bytes(&bytes[..100]), Err(Error::CorruptData(_))));
    }
}
