//! Procedural assembly scenes. Each task family draws its dimensions from the
//! variant seed, surface-samples the primitives with analytic normals, and
//! marks the analytically stable support band as the heuristic region using
//! the oracle itself under tightened torque budgets. Ground-contact faces are
//! never sampled; presses from below are not reachable at a desk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{vec3, PointCloud, Pose, Prng, SeedState, Vec3};

use super::oracle::displacement_oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskType {
    Screw,
    Push,
    Pull,
    Pick,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [TaskType::Screw, TaskType::Push, TaskType::Pull, TaskType::Pick];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Screw => "screw",
            TaskType::Push => "push",
            TaskType::Pull => "pull",
            TaskType::Pick => "pick",
        }
    }
}

impl std::fmt::Display for TaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "screw" => Ok(TaskType::Screw),
            "push" => Ok(TaskType::Push),
            "pull" => Ok(TaskType::Pull),
            "pick" => Ok(TaskType::Pick),
            other => Err(Error::invalid_argument(format!(
                "unknown task '{other}' (expected screw, push, pull, or pick)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub resist_force: f64,
    pub resist_torque: f64,
    pub support_force: f64,
    pub contact_cone_angle: f64,
    pub gain_force: f64,
    pub gain_torque: f64,
    pub epsilon: f64,
    pub rot_weight: f64,
    pub steps_to_goal: u32,
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("resist_force", self.resist_force),
            ("resist_torque", self.resist_torque),
            ("support_force", self.support_force),
            ("contact_cone_angle", self.contact_cone_angle),
            ("gain_force", self.gain_force),
            ("gain_torque", self.gain_torque),
            ("epsilon", self.epsilon),
            ("rot_weight", self.rot_weight),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid_argument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.contact_cone_angle >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::invalid_argument("contact_cone_angle must stay below pi/2"));
        }
        if self.steps_to_goal == 0 {
            return Err(Error::invalid_argument("steps_to_goal must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportAction {
    pub p_sp: usize,
    pub d: Vec3,
}

impl SupportAction {
    pub fn new(p_sp: usize, d: Vec3) -> Result<Self> {
        if (vec3::norm(d) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid_argument("support direction must be unit length"));
        }
        Ok(SupportAction { p_sp, d })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub cloud: PointCloud,
    pub base_pose: Pose,
    pub task: TaskType,
    pub p_op: usize,
    pub op_wrench: Wrench,
    pub physics: PhysicsParams,
    pub heuristic_region: Vec<usize>,
    pub goal_progress: f64,
}

impl SceneInstance {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        if self.p_op >= self.cloud.len() {
            return Err(Error::invalid_argument("p_op out of bounds"));
        }
        if !vec3::is_finite(self.op_wrench.force) || !vec3::is_finite(self.op_wrench.torque) {
            return Err(Error::invalid_argument("op_wrench must be finite"));
        }
        if self.heuristic_region.is_empty() {
            return Err(Error::invalid_argument("heuristic_region must be non-empty"));
        }
        if self.heuristic_region.iter().any(|&i| i >= self.cloud.len()) {
            return Err(Error::invalid_argument("heuristic_region index out of bounds"));
        }
        if !(0.0..=1.0).contains(&self.goal_progress) {
            return Err(Error::invalid_argument("goal_progress outside [0, 1]"));
        }
        if self.cloud.part_centroid(0).is_none() {
            return Err(Error::invalid_argument("scene has no base-part points"));
        }
        Ok(())
    }

    pub fn base_centroid(&self) -> Vec3 {
        self.cloud.part_centroid(0).expect("validated scenes have base-part points")
    }
}

const N_ANCHORS: usize = 8;
const MIN_POINTS: usize = 128;

/// How far below the full torque budget a straight press must stay for its
/// point to count as analytically stable (the heuristic band).
fn region_margin(task: TaskType) -> f64 {
    match task {
        TaskType::Pick => 0.6,
        _ => 0.5,
    }
}

enum Patch {
    Rect { center: Vec3, u: Vec3, v: Vec3, hu: f64, hv: f64, n: Vec3, label: u8 },
    Annulus { center: Vec3, r_in: f64, r_out: f64, up: bool, arc: (f64, f64), label: u8 },
    CylSide { base: Vec3, radius: f64, z0: f64, z1: f64, outward: bool, arc: (f64, f64), label: u8 },
}

impl Patch {
    fn area(&self) -> f64 {
        match self {
            Patch::Rect { hu, hv, .. } => 4.0 * hu * hv,
            Patch::Annulus { r_in, r_out, arc, .. } => {
                0.5 * (arc.1 - arc.0) * (r_out * r_out - r_in * r_in)
            }
            Patch::CylSide { radius, z0, z1, arc, .. } => radius * (arc.1 - arc.0) * (z1 - z0),
        }
    }

    fn label(&self) -> u8 {
        match self {
            Patch::Rect { label, .. } | Patch::Annulus { label, .. } | Patch::CylSide { label, .. } => *label,
        }
    }

    fn sample(&self, rng: &mut Prng) -> (Vec3, Vec3) {
        match self {
            Patch::Rect { center, u, v, hu, hv, n, .. } => {
                let a = rng.range(-*hu, *hu);
                let b = rng.range(-*hv, *hv);
                let p = vec3::add(*center, vec3::add(vec3::scale(*u, a), vec3::scale(*v, b)));
                (p, *n)
            }
            Patch::Annulus { center, r_in, r_out, up, arc, .. } => {
                let r = (r_in * r_in + rng.uniform() * (r_out * r_out - r_in * r_in)).sqrt();
                let t = rng.range(arc.0, arc.1);
                let p = vec3::add(*center, [r * t.cos(), r * t.sin(), 0.0]);
                (p, [0.0, 0.0, if *up { 1.0 } else { -1.0 }])
            }
            Patch::CylSide { base, radius, z0, z1, outward, arc, .. } => {
                let t = rng.range(arc.0, arc.1);
                let z = rng.range(*z0, *z1);
                let radial = [t.cos(), t.sin(), 0.0];
                let p = vec3::add(*base, vec3::add(vec3::scale(radial, *radius), [0.0, 0.0, z]));
                let n = if *outward { radial } else { vec3::scale(radial, -1.0) };
                (p, n)
            }
        }
    }
}

/// Largest-remainder split of `total` samples across patches by area, with a
/// floor of two samples per patch so every surface is represented.
fn allocate(patches: &[Patch], total: usize) -> Vec<usize> {
    let floor_each = 2usize;
    let floor_total = floor_each * patches.len();
    assert!(total >= floor_total, "point budget too small for patch list");
    let area: f64 = patches.iter().map(|p| p.area()).sum();
    let spare = total - floor_total;
    let ideal: Vec<f64> = patches.iter().map(|p| spare as f64 * p.area() / area).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut used: usize = counts.iter().sum();
    let mut rema: Vec<(f64, usize)> =
        ideal.iter().enumerate().map(|(i, x)| (x - x.floor(), i)).collect();
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut k = 0;
    while used < spare {
        counts[rema[k % rema.len()].1] += 1;
        used += 1;
        k += 1;
    }
    counts.iter_mut().for_each(|c| *c += floor_each);
    counts
}

struct Draft {
    patches: Vec<Patch>,
    physics: PhysicsParams,
    op_wrench: Wrench,
    op_target: Vec3,
    op_label: u8,
    anchors: AnchorPlan,
}

/// Where the guaranteed in-band points go; resolved after the main sampling
/// pass because drawer anchors mirror the actual operation point.
enum AnchorPlan {
    ScrewBands { hx: f64, hy: f64, hz: f64 },
    DrawerMirror { wall_x: f64, wall_normal: Vec3, hy: f64, hz_lo: f64, hz_hi: f64 },
    PickRim { r_mid: f64, height: f64 },
}

fn base_physics() -> PhysicsParams {
    PhysicsParams {
        resist_force: 12.0,
        resist_torque: 1.0,
        support_force: 10.0,
        contact_cone_angle: std::f64::consts::FRAC_PI_4,
        gain_force: 0.01,
        gain_torque: 0.05,
        epsilon: 0.02,
        rot_weight: 0.1,
        steps_to_goal: 4,
    }
}

/// Per-field physics replacements applied to every generated scene. Unset
/// fields keep the task family's values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhysicsOverride {
    pub resist_force: Option<f64>,
    pub resist_torque: Option<f64>,
    pub support_force: Option<f64>,
    pub contact_cone_angle: Option<f64>,
    pub gain_force: Option<f64>,
    pub gain_torque: Option<f64>,
    pub epsilon: Option<f64>,
    pub rot_weight: Option<f64>,
    pub steps_to_goal: Option<u32>,
}

impl PhysicsOverride {
    pub fn is_empty(&self) -> bool {
        *self == PhysicsOverride::default()
    }

    pub fn apply(&self, ph: &mut PhysicsParams) {
        if let Some(v) = self.resist_force {
            ph.resist_force = v;
        }
        if let Some(v) = self.resist_torque {
            ph.resist_torque = v;
        }
        if let Some(v) = self.support_force {
            ph.support_force = v;
        }
        if let Some(v) = self.contact_cone_angle {
            ph.contact_cone_angle = v;
        }
        if let Some(v) = self.gain_force {
            ph.gain_force = v;
        }
        if let Some(v) = self.gain_torque {
            ph.gain_torque = v;
        }
        if let Some(v) = self.epsilon {
            ph.epsilon = v;
        }
        if let Some(v) = self.rot_weight {
            ph.rot_weight = v;
        }
        if let Some(v) = self.steps_to_goal {
            ph.steps_to_goal = v;
        }
    }
}

const SCREW_TORQUE: f64 = 2.0;
const DRAWER_FORCE: f64 = 9.0;
const PICK_LIFT: f64 = 10.0;
const TAU: f64 = std::f64::consts::TAU;

fn screw_draft(rng: &mut Prng) -> Draft {
    let hx = rng.range(0.18, 0.24);
    let hy = rng.range(0.18, 0.24);
    let hz = rng.range(0.015, 0.03);
    let leg_r = rng.range(0.02, 0.03);
    let leg_h = rng.range(0.12, 0.18);
    let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };

    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    let top_z = 2.0 * hz;
    let patches = vec![
        Patch::Rect { center: [0.0, 0.0, top_z], u: x, v: y, hu: hx, hv: hy, n: z, label: 0 },
        Patch::Rect { center: [hx, 0.0, hz], u: y, v: z, hu: hy, hv: hz, n: x, label: 0 },
        Patch::Rect { center: [-hx, 0.0, hz], u: y, v: z, hu: hy, hv: hz, n: vec3::scale(x, -1.0), label: 0 },
        Patch::Rect { center: [0.0, hy, hz], u: x, v: z, hu: hx, hv: hz, n: y, label: 0 },
        Patch::Rect { center: [0.0, -hy, hz], u: x, v: z, hu: hx, hv: hz, n: vec3::scale(y, -1.0), label: 0 },
        Patch::CylSide { base: [0.0, 0.0, top_z], radius: leg_r, z0: 0.0, z1: leg_h, outward: true, arc: (0.0, TAU), label: 1 },
        Patch::Annulus { center: [0.0, 0.0, top_z + leg_h], r_in: 0.0, r_out: leg_r, up: true, arc: (0.0, TAU), label: 1 },
    ];
    let mut physics = base_physics();
    physics.resist_force = 12.0;
    physics.resist_torque = 1.0;
    Draft {
        patches,
        physics,
        op_wrench: Wrench { force: vec3::ZERO, torque: [0.0, 0.0, sign * SCREW_TORQUE] },
        op_target: [0.0, 0.0, top_z + leg_h],
        op_label: 1,
        anchors: AnchorPlan::ScrewBands { hx, hy, hz },
    }
}

fn drawer_draft(rng: &mut Prng, task: TaskType) -> Draft {
    let hx = rng.range(0.12, 0.18);
    let hy = rng.range(0.10, 0.14);
    let hz = rng.range(0.08, 0.12);
    let t = 0.015;
    let out = rng.range(0.04, 0.08);
    let by = 0.7 * hy;
    let bz = 0.55 * hz;
    let handle_y = rng.range(-0.5 * by, 0.5 * by);
    let handle_z = hz + rng.range(-0.5 * bz, 0.5 * bz);

    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    let patches = vec![
        Patch::Rect { center: [-hx, 0.0, hz], u: y, v: z, hu: hy, hv: hz, n: vec3::scale(x, -1.0), label: 0 },
        Patch::Rect { center: [-hx + t, 0.0, hz], u: y, v: z, hu: hy - t, hv: hz - t, n: x, label: 0 },
        Patch::Rect { center: [0.0, -hy, hz], u: x, v: z, hu: hx, hv: hz, n: vec3::scale(y, -1.0), label: 0 },
        Patch::Rect { center: [0.0, hy, hz], u: x, v: z, hu: hx, hv: hz, n: y, label: 0 },
        Patch::Rect { center: [0.0, 0.0, 2.0 * hz], u: x, v: y, hu: hx, hv: hy, n: z, label: 0 },
        Patch::Rect { center: [hx + out, 0.0, hz], u: y, v: z, hu: by, hv: bz, n: x, label: 1 },
        Patch::Rect { center: [hx + 0.5 * out, 0.0, hz + bz], u: x, v: y, hu: 0.5 * out, hv: by, n: z, label: 1 },
        Patch::Rect { center: [hx + 0.5 * out, -by, hz], u: x, v: z, hu: 0.5 * out, hv: bz, n: vec3::scale(y, -1.0), label: 1 },
        Patch::Rect { center: [hx + 0.5 * out, by, hz], u: x, v: z, hu: 0.5 * out, hv: bz, n: y, label: 1 },
    ];
    let mut physics = base_physics();
    physics.resist_force = 5.0;
    physics.resist_torque = 0.3;
    let fx = if task == TaskType::Push { -DRAWER_FORCE } else { DRAWER_FORCE };
    let (wall_x, wall_normal) = if task == TaskType::Push {
        (-hx, vec3::scale(x, -1.0))
    } else {
        (-hx + t, x)
    };
    Draft {
        patches,
        physics,
        op_wrench: Wrench { force: [fx, 0.0, 0.0], torque: vec3::ZERO },
        op_target: [hx + out, handle_y, handle_z],
        op_label: 1,
        anchors: AnchorPlan::DrawerMirror {
            wall_x,
            wall_normal,
            hy: hy - t,
            hz_lo: t,
            hz_hi: 2.0 * hz - t,
        },
    }
}

fn pick_draft(rng: &mut Prng) -> Draft {
    let r_c = rng.range(0.13, 0.16);
    let height = rng.range(0.16, 0.20);
    let t = 0.008;
    let z_b = 0.01;
    let psi_op = rng.range(0.0, TAU);

    let patches = vec![
        Patch::CylSide { base: vec3::ZERO, radius: r_c, z0: 0.0, z1: height, outward: true, arc: (0.0, TAU), label: 0 },
        Patch::CylSide { base: vec3::ZERO, radius: r_c - t, z0: z_b, z1: height, outward: false, arc: (0.0, TAU), label: 0 },
        Patch::Annulus { center: [0.0, 0.0, height], r_in: r_c - t, r_out: r_c, up: true, arc: (0.0, TAU), label: 0 },
        Patch::Annulus { center: [0.0, 0.0, z_b], r_in: 0.0, r_out: r_c - t, up: true, arc: (0.0, TAU), label: 0 },
    ];
    let mut physics = base_physics();
    physics.resist_force = 16.0;
    physics.resist_torque = 0.5;
    let r_mid = r_c - 0.5 * t;
    Draft {
        patches,
        physics,
        op_wrench: Wrench { force: [0.0, 0.0, PICK_LIFT], torque: vec3::ZERO },
        op_target: [r_mid * psi_op.cos(), r_mid * psi_op.sin(), height],
        op_label: 0,
        anchors: AnchorPlan::PickRim { r_mid, height },
    }
}

fn anchor_points(
    plan: &AnchorPlan,
    op_pos: Vec3,
    base_centroid: Vec3,
    support_force: f64,
    rng: &mut Prng,
) -> Vec<(Vec3, Vec3, u8)> {
    let mut out = Vec::with_capacity(N_ANCHORS);
    match plan {
        // One point per (side face, lever sign): exact torque cancellation at
        // lateral offset torque/F_s, clipped inside the face.
        AnchorPlan::ScrewBands { hx, hy, hz } => {
            let faces: [(Vec3, Vec3, f64, Vec3); 4] = [
                ([*hx, 0.0, *hz], [0.0, 1.0, 0.0], *hy, [1.0, 0.0, 0.0]),
                ([-*hx, 0.0, *hz], [0.0, 1.0, 0.0], *hy, [-1.0, 0.0, 0.0]),
                ([0.0, *hy, *hz], [1.0, 0.0, 0.0], *hx, [0.0, 1.0, 0.0]),
                ([0.0, -*hy, *hz], [1.0, 0.0, 0.0], *hx, [0.0, -1.0, 0.0]),
            ];
            for (center, lat_axis, half, n) in faces {
                let lever = (SCREW_TORQUE / support_force).min(half - 0.02);
                for sign in [1.0, -1.0] {
                    let jitter = rng.range(-0.004, 0.004);
                    let p = vec3::add(center, vec3::scale(lat_axis, sign * lever + jitter));
                    out.push((p, n, 0));
                }
            }
        }
        // Eight jittered points around the torque-balancing image of the
        // handle on the target wall: offset from centroid shrunk by
        // op_force/F_s so the two lever torques cancel.
        AnchorPlan::DrawerMirror { wall_x, wall_normal, hy, hz_lo, hz_hi } => {
            let ratio = DRAWER_FORCE / support_force;
            let my = base_centroid[1] + ratio * (op_pos[1] - base_centroid[1]);
            let mz = base_centroid[2] + ratio * (op_pos[2] - base_centroid[2]);
            for _ in 0..N_ANCHORS {
                let p = [
                    *wall_x,
                    (my + rng.range(-0.004, 0.004)).clamp(-*hy, *hy),
                    (mz + rng.range(-0.004, 0.004)).clamp(*hz_lo, *hz_hi),
                ];
                out.push((p, *wall_normal, 0));
            }
        }
        // Rim points hugging the azimuth of the point actually lifted, where
        // a straight press-down cancels the lift torque almost exactly.
        AnchorPlan::PickRim { r_mid, height, .. } => {
            let psi_actual = op_pos[1].atan2(op_pos[0]);
            let cap = 8f64.to_radians();
            for _ in 0..N_ANCHORS {
                let psi = psi_actual + rng.range(-cap, cap);
                out.push((
                    [r_mid * psi.cos(), r_mid * psi.sin(), *height],
                    [0.0, 0.0, 1.0],
                    0,
                ));
            }
        }
    }
    out
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

pub fn generate_scene(task: TaskType, variant_seed: SeedState, n_points: usize) -> Result<SceneInstance> {
    generate_scene_cfg(task, variant_seed, n_points, None)
}

/// `generate_scene` with optional physics replacements. Overrides land
/// before anchor placement and band probing, so the guaranteed stable band
/// is computed under the physics the episodes will actually run.
pub fn generate_scene_cfg(
    task: TaskType,
    variant_seed: SeedState,
    n_points: usize,
    overrides: Option<&PhysicsOverride>,
) -> Result<SceneInstance> {
    if n_points < MIN_POINTS {
        return Err(Error::invalid_argument(format!(
            "n_points = {n_points} below minimum {MIN_POINTS}"
        )));
    }
    let mut rng = variant_seed.rng();
    let mut draft = match task {
        TaskType::Screw => screw_draft(&mut rng),
        TaskType::Push | TaskType::Pull => drawer_draft(&mut rng, task),
        TaskType::Pick => pick_draft(&mut rng),
    };
    if let Some(ov) = overrides {
        ov.apply(&mut draft.physics);
        draft.physics.validate()?;
    }

    let counts = allocate(&draft.patches, n_points - N_ANCHORS);
    let mut positions: Vec<Vec3> = Vec::with_capacity(n_points);
    let mut normals: Vec<Vec3> = Vec::with_capacity(n_points);
    let mut labels: Vec<u8> = Vec::with_capacity(n_points);
    for (patch, count) in draft.patches.iter().zip(&counts) {
        for _ in 0..*count {
            let (p, n) = patch.sample(&mut rng);
            positions.push(p);
            normals.push(n);
            labels.push(patch.label());
        }
    }

    let p_op = positions
        .iter()
        .zip(&labels)
        .enumerate()
        .filter(|(_, (_, l))| **l == draft.op_label)
        .min_by(|(_, (a, _)), (_, (b, _))| {
            vec3::dist2(**a, draft.op_target)
                .partial_cmp(&vec3::dist2(**b, draft.op_target))
                .unwrap()
        })
        .map(|(i, _)| i)
        .expect("every family samples points with the operation label");

    let provisional_centroid = {
        let mut c = vec3::ZERO;
        let mut n = 0usize;
        for (p, l) in positions.iter().zip(&labels) {
            if *l == 0 {
                c = vec3::add(c, *p);
                n += 1;
            }
        }
        vec3::scale(c, 1.0 / n as f64)
    };
    for (p, n, l) in anchor_points(
        &draft.anchors,
        positions[p_op],
        provisional_centroid,
        draft.physics.support_force,
        &mut rng,
    ) {
        positions.push(p);
        normals.push(n);
        labels.push(l);
    }

    // Clouds are stored as 32-bit floats on disk; quantizing here makes a
    // saved and reloaded scene bit-identical to the generated one.
    for p in positions.iter_mut() {
        *p = [quantize(p[0]), quantize(p[1]), quantize(p[2])];
    }
    for n in normals.iter_mut() {
        *n = [quantize(n[0]), quantize(n[1]), quantize(n[2])];
    }

    let cloud = PointCloud::new(positions, normals, labels)?;
    let base_pose = Pose { translation: cloud.part_centroid(0).unwrap(), rotation: crate::geometry::quat::IDENTITY };

    let mut scene = SceneInstance {
        cloud,
        base_pose,
        task,
        p_op,
        op_wrench: draft.op_wrench,
        physics: draft.physics,
        heuristic_region: Vec::new(),
        goal_progress: 0.0,
    };
    scene.heuristic_region = stable_band(&scene);
    // Anchors guarantee a band under family physics; a hostile override can
    // still leave none, which must fail loudly rather than generate a scene
    // the heuristic sampler cannot act in.
    if scene.heuristic_region.is_empty() {
        return Err(Error::invalid_state(
            "physics leave no stable support band in this scene",
        ));
    }
    Ok(scene)
}

/// Indices whose straight press (-normal) leaves the scene still even under a
/// torque budget tightened by the family margin. For Screw the probe runs
/// under both operation torque signs, so the band never leaks the hidden
/// thread direction.
fn stable_band(scene: &SceneInstance) -> Vec<usize> {
    let mut probe = scene.clone();
    probe.physics.resist_torque *= region_margin(scene.task);
    let torques: Vec<Vec3> = if scene.task == TaskType::Screw {
        vec![scene.op_wrench.torque, vec3::scale(scene.op_wrench.torque, -1.0)]
    } else {
        vec![scene.op_wrench.torque]
    };
    let mut band = Vec::new();
    'points: for i in 0..scene.cloud.len() {
        if scene.cloud.part_label[i] != 0 {
            continue;
        }
        let d = vec3::scale(scene.cloud.normals[i], -1.0);
        let action = SupportAction { p_sp: i, d };
        for torque in &torques {
            probe.op_wrench.torque = *torque;
            let (m, _, _) = displacement_oracle(&probe, Some(&action))
                .expect("probe action indexes the probe cloud");
            if m == 0.0 {
                band.push(i);
                continue 'points;
            }
        }
    }
    band
}
