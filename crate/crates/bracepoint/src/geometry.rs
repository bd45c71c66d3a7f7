//! Geometric primitives shared by the environment, encoders, and harness:
//! point clouds with analytic normals, poses, seeded sampling streams,
//! farthest-point subsampling, radius neighborhoods, and the scalar
//! displacement metric combining translation with weighted rotation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

pub mod vec3 {
    use super::Vec3;

    pub const ZERO: Vec3 = [0.0, 0.0, 0.0];

    pub fn add(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    pub fn scale(a: Vec3, s: f64) -> Vec3 {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    pub fn dot(a: Vec3, b: Vec3) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    pub fn norm(a: Vec3) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn dist(a: Vec3, b: Vec3) -> f64 {
        norm(sub(a, b))
    }

    pub fn dist2(a: Vec3, b: Vec3) -> f64 {
        let d = sub(a, b);
        dot(d, d)
    }

    /// Unit vector along `a`; `None` for vectors shorter than `eps`.
    pub fn unit(a: Vec3, eps: f64) -> Option<Vec3> {
        let n = norm(a);
        if n < eps {
            None
        } else {
            Some(scale(a, 1.0 / n))
        }
    }

    pub fn is_finite(a: Vec3) -> bool {
        a.iter().all(|x| x.is_finite())
    }

    /// Any unit vector orthogonal to unit `a`, chosen deterministically.
    pub fn any_orthogonal(a: Vec3) -> Vec3 {
        let pick = if a[0].abs() <= a[1].abs() && a[0].abs() <= a[2].abs() {
            [1.0, 0.0, 0.0]
        } else if a[1].abs() <= a[2].abs() {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        unit(cross(a, pick), 1e-12).expect("orthogonal complement of a unit vector")
    }
}

/// Unit quaternion stored as [w, x, y, z].
pub type Quat = [f64; 4];

pub mod quat {
    use super::{vec3, Quat, Vec3};

    pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

    pub fn norm(q: Quat) -> f64 {
        (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
    }

    pub fn is_unit(q: Quat, tol: f64) -> bool {
        (norm(q) - 1.0).abs() <= tol
    }

    pub fn normalize(q: Quat) -> Quat {
        let n = norm(q);
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    pub fn mul(a: Quat, b: Quat) -> Quat {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let half = 0.5 * angle;
        let s = half.sin();
        [half.cos(), axis[0] * s, axis[1] * s, axis[2] * s]
    }

    pub fn rotate(q: Quat, v: Vec3) -> Vec3 {
        // v' = v + 2u x (u x v + w v), u = quaternion vector part
        let u = [q[1], q[2], q[3]];
        let uv = vec3::cross(u, v);
        let t = vec3::add(uv, vec3::scale(v, q[0]));
        vec3::add(v, vec3::scale(vec3::cross(u, t), 2.0))
    }

    /// Geodesic angle between two unit quaternions, in [0, pi].
    pub fn geodesic(a: Quat, b: Quat) -> f64 {
        // atan2 of the relative quaternion's vector and scalar parts stays
        // fully precise at tiny angles, where acos of the dot loses digits.
        let r = mul(a, conjugate(b));
        let s = (r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
        2.0 * s.atan2(r[0].abs())
    }

    pub fn conjugate(q: Quat) -> Quat {
        [q[0], -q[1], -q[2], -q[3]]
    }

    /// Axis-angle vector (axis scaled by angle in [0, pi]) of a unit
    /// quaternion. The identity maps to the zero vector.
    pub fn to_axis_angle(q: Quat) -> Vec3 {
        // Flip into the w >= 0 hemisphere so the angle lands in [0, pi].
        let q = if q[0] < 0.0 { [-q[0], -q[1], -q[2], -q[3]] } else { q };
        let s = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if s < 1e-12 {
            return vec3::ZERO;
        }
        let angle = 2.0 * s.atan2(q[0]);
        vec3::scale([q[1] / s, q[2] / s, q[3] / s], angle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub part_label: Vec<u8>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>, part_label: Vec<u8>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid_argument("point cloud must hold at least one point"));
        }
        if positions.len() != normals.len() || positions.len() != part_label.len() {
            return Err(Error::invalid_argument(format!(
                "mismatched cloud columns: {} positions, {} normals, {} labels",
                positions.len(),
                normals.len(),
                part_label.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if !vec3::is_finite(*p) {
                return Err(Error::invalid_argument(format!("non-finite position at {i}")));
            }
        }
        for (i, n) in normals.iter().enumerate() {
            if (vec3::norm(*n) - 1.0).abs() > 1e-5 {
                return Err(Error::invalid_argument(format!("normal at {i} is not unit length")));
            }
        }
        Ok(PointCloud { positions, normals, part_label })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = vec3::ZERO;
        for p in &self.positions {
            c = vec3::add(c, *p);
        }
        vec3::scale(c, 1.0 / self.len() as f64)
    }

    /// Centroid of the points carrying a given part label.
    pub fn part_centroid(&self, label: u8) -> Option<Vec3> {
        let mut c = vec3::ZERO;
        let mut n = 0usize;
        for (p, l) in self.positions.iter().zip(&self.part_label) {
            if *l == label {
                c = vec3::add(c, *p);
                n += 1;
            }
        }
        (n > 0).then(|| vec3::scale(c, 1.0 / n as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: Quat,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { translation: vec3::ZERO, rotation: quat::IDENTITY }
    }
}

/// m = |dt| + rot_weight * geodesic(dq). Zero iff the poses coincide.
pub fn pose_displacement(before: &Pose, after: &Pose, rot_weight: f64) -> Result<f64> {
    if rot_weight < 0.0 {
        return Err(Error::invalid_argument("rot_weight must be non-negative"));
    }
    for q in [before.rotation, after.rotation] {
        if !quat::is_unit(q, 1e-6) {
            return Err(Error::invalid_argument("pose rotation is not a unit quaternion"));
        }
    }
    let dt = vec3::dist(before.translation, after.translation);
    Ok(dt + rot_weight * quat::geodesic(before.rotation, after.rotation))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic sampling stream id. Every random draw in the crate flows
/// through a SeedState; identical (seed, stream) pairs replay identically,
/// and `derive` splits off statistically independent child streams. The
/// generator (xoshiro256++ seeded via splitmix64) is part of the artifact's
/// reproducibility contract: draws are u64s, uniforms are the top 53 bits,
/// gaussians are Box-Muller pairs, in that documented order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedState {
    pub seed: u64,
    pub stream: u64,
}

impl SeedState {
    pub fn new(seed: u64, stream: u64) -> Self {
        SeedState { seed, stream }
    }

    pub fn derive(&self, salt: u64) -> SeedState {
        let mut s = self.seed ^ self.stream.rotate_left(17);
        let a = splitmix64(&mut s);
        let mut t = salt ^ a;
        let b = splitmix64(&mut t);
        SeedState { seed: a, stream: b }
    }

    pub fn rng(&self) -> Prng {
        let mut s = self.seed;
        let mut t = self.stream.wrapping_mul(0xD605BBB58C8ABBFD) ^ 0x2545F4914F6CDD1D;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut t),
            splitmix64(&mut s) ^ splitmix64(&mut t),
            splitmix64(&mut s).wrapping_add(splitmix64(&mut t)),
        ];
        Prng { state, spare_gauss: None }
    }
}

/// xoshiro256++ with Box-Muller gaussians.
#[derive(Debug, Clone)]
pub struct Prng {
    state: [u64; 4],
    spare_gauss: Option<f64>,
}

impl Prng {
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free multiply-shift; bias < 2^-53 is irrelevant at desk scale.
        (self.uniform() * n as f64) as usize % n
    }

    pub fn standard_gaussian(&mut self) -> f64 {
        if let Some(g) = self.spare_gauss.take() {
            return g;
        }
        let mut u1 = self.uniform();
        if u1 < 1e-300 {
            u1 = 1e-300;
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.standard_gaussian();
        }
    }
}

/// Greedy farthest-point subsampling. The first index is drawn from `seed`;
/// each later pick maximizes the minimum distance to the chosen set, ties
/// resolved toward the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: SeedState) -> Result<Vec<usize>> {
    if m == 0 || m > cloud.len() {
        return Err(Error::invalid_argument(format!(
            "farthest_point_sample: M = {m} outside 1..={}",
            cloud.len()
        )));
    }
    let start = seed.rng().index(cloud.len());
    Ok(fps_from(cloud, m, start))
}

/// Farthest-point sampling with a canonical, permutation-covariant start:
/// the point farthest from the centroid, ties by lexicographic position then
/// index. Used inside the cloud encoder so that permuting input rows permutes
/// the sampled set identically.
pub fn farthest_point_sample_canonical(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > cloud.len() {
        return Err(Error::invalid_argument(format!(
            "farthest_point_sample_canonical: M = {m} outside 1..={}",
            cloud.len()
        )));
    }
    Ok(fps_points_canonical(&cloud.positions, m))
}

/// Canonical start index for `fps_points_canonical`: the point farthest from
/// the centroid, ties by lexicographic position then index.
pub fn canonical_start(positions: &[Vec3]) -> usize {
    let n = positions.len();
    assert!(n > 0);
    let mut c = vec3::ZERO;
    for p in positions {
        c = vec3::add(c, *p);
    }
    c = vec3::scale(c, 1.0 / n as f64);
    let mut start = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in positions.iter().enumerate() {
        let d = vec3::dist2(*p, c);
        let better = d > best || (d == best && lex_less(*p, positions[start]));
        if better {
            best = d;
            start = i;
        }
    }
    start
}

/// Slice-level canonical FPS: canonical start, greedy max-min growth with
/// exact ties broken lexicographically by position. Both rules depend only
/// on coordinates, so permuting the input permutes the output identically.
pub fn fps_points_canonical(positions: &[Vec3], m: usize) -> Vec<usize> {
    assert!(m >= 1 && m <= positions.len());
    fps_greedy(positions, m, canonical_start(positions), true)
}

fn lex_less(a: Vec3, b: Vec3) -> bool {
    for k in 0..3 {
        if a[k] < b[k] {
            return true;
        }
        if a[k] > b[k] {
            return false;
        }
    }
    false
}

fn fps_from(cloud: &PointCloud, m: usize, start: usize) -> Vec<usize> {
    fps_greedy(&cloud.positions, m, start, false)
}

/// Greedy max-min farthest-point growth. `lex_ties` switches the exact-tie
/// rule from lowest index to lexicographic position.
fn fps_greedy(positions: &[Vec3], m: usize, start: usize, lex_ties: bool) -> Vec<usize> {
    let n = positions.len();
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut cur = start;
    chosen.push(cur);
    taken[cur] = true;
    for _ in 1..m {
        let cp = positions[cur];
        let mut next = usize::MAX;
        let mut next_d2 = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d2 = vec3::dist2(positions[i], cp);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            let better = min_d2[i] > next_d2
                || (min_d2[i] == next_d2
                    && lex_ties
                    && next != usize::MAX
                    && lex_less(positions[i], positions[next]));
            if better {
                next_d2 = min_d2[i];
                next = i;
            }
        }
        cur = next;
        chosen.push(cur);
        taken[cur] = true;
    }
    chosen
}

/// Indices of cloud points within `radius` of `center`, sorted nearest-first
/// (ties by index), capped at `max_k`. When no point lies inside the radius
/// the single nearest point is returned instead so downstream groups are
/// never empty.
pub fn ball_query(cloud: &PointCloud, center: Vec3, radius: f64, max_k: usize) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::invalid_argument("ball_query: empty cloud"));
    }
    if radius <= 0.0 || max_k == 0 {
        return Err(Error::invalid_argument("ball_query: radius and max_k must be positive"));
    }
    Ok(ball_query_points(&cloud.positions, center, radius, max_k))
}

/// Slice-level ball query with the same semantics as `ball_query`; callers
/// guarantee a non-empty slice, positive radius and max_k.
pub fn ball_query_points(positions: &[Vec3], center: Vec3, radius: f64, max_k: usize) -> Vec<usize> {
    debug_assert!(!positions.is_empty() && radius > 0.0 && max_k > 0);
    let r2 = radius * radius;
    let mut hits: Vec<(f64, usize)> = Vec::new();
    let mut nearest = (f64::INFINITY, 0usize);
    for (i, p) in positions.iter().enumerate() {
        let d2 = vec3::dist2(*p, center);
        if d2 < nearest.0 {
            nearest = (d2, i);
        }
        if d2 <= r2 {
            hits.push((d2, i));
        }
    }
    if hits.is_empty() {
        return vec![nearest.1];
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.truncate(max_k);
    hits.into_iter().map(|(_, i)| i).collect()
}
