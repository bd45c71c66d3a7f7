//! Input encoders feeding the decision heads: a hierarchical point-cloud
//! encoder producing one feature row per point, small MLP embedders for
//! positions, directions and displacement bundles, and the per-point input
//! assembly that concatenates them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ball_query_points, fps_points_canonical, vec3, PointCloud, Prng, Vec3};
use crate::nn::{Activation, Linear, Matrix, Mlp};

/// Network dimensions. One instance describes every net in a model; heads
/// and encoders derive their layer sizes from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-point feature width produced by the cloud encoder.
    pub point_feature_dim: usize,
    /// Embedding width of the small encoders (positions, directions, bundles).
    pub small_dim: usize,
    /// Width of the aggregated interaction-context vector.
    pub context_dim: usize,
    /// Width of the proposal latent.
    pub latent_dim: usize,
    /// Hidden width of the decision heads.
    pub head_hidden: usize,
    /// Hidden width of the small encoders.
    pub small_hidden: usize,
    /// Channel widths of the three set-abstraction levels.
    pub sa_widths: [usize; 3],
    /// Grouping radii of the three levels, in unit-sphere coordinates.
    pub sa_radii: [f64; 3],
    /// Largest group gathered around one abstraction center.
    pub sa_max_group: usize,
    /// Smallest cloud the encoder accepts.
    pub min_cloud: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            point_feature_dim: 128,
            small_dim: 32,
            context_dim: 128,
            latent_dim: 128,
            head_hidden: 128,
            small_hidden: 128,
            sa_widths: [64, 128, 128],
            sa_radii: [0.1, 0.2, 0.4],
            sa_max_group: 16,
            min_cloud: 64,
        }
    }
}

impl ModelConfig {
    /// Dims for the acceptance-scale pipeline: same shape, narrower nets.
    pub fn small_profile() -> Self {
        ModelConfig {
            point_feature_dim: 32,
            small_dim: 16,
            context_dim: 32,
            latent_dim: 16,
            head_hidden: 64,
            small_hidden: 32,
            sa_widths: [16, 32, 32],
            sa_radii: [0.1, 0.2, 0.4],
            sa_max_group: 16,
            min_cloud: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.point_feature_dim,
            self.small_dim,
            self.context_dim,
            self.latent_dim,
            self.head_hidden,
            self.small_hidden,
            self.sa_widths[0],
            self.sa_widths[1],
            self.sa_widths[2],
            self.sa_max_group,
            self.min_cloud,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid_argument("model config: zero dimension"));
        }
        if self.sa_radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid_argument("model config: radii must be positive"));
        }
        if self.min_cloud < 4 {
            return Err(Error::invalid_argument("model config: min_cloud below 4"));
        }
        Ok(())
    }

    /// Width of one assembled per-point head input:
    /// [op-point feature, point feature, op embedding, context].
    pub fn per_point_input_dim(&self) -> usize {
        2 * self.point_feature_dim + self.small_dim + self.context_dim
    }

    /// Conditioning width of the proposal nets: per-point input plus the
    /// support-point embedding.
    pub fn proposal_cond_dim(&self) -> usize {
        self.per_point_input_dim() + self.small_dim
    }

    /// Input width of the scoring head:
    /// [f_p_op, f_p_sp, f_op, f_sp, f_d, context].
    pub fn scoring_input_dim(&self) -> usize {
        2 * self.point_feature_dim + 3 * self.small_dim + self.context_dim
    }

    /// Input width of the context-frame nets:
    /// [pooled cloud feature, support embedding, direction embedding,
    /// displacement embedding].
    pub fn context_step_input_dim(&self) -> usize {
        self.point_feature_dim + 3 * self.small_dim
    }
}

/// Hierarchical per-point feature extractor: three set-abstraction levels
/// (shared point transform, ball-query grouping, channel max-pool) followed
/// by three inverse-distance propagation stages back to full resolution.
/// All layers use tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudEncoder {
    pub sa: Vec<Linear>,
    pub fp: Vec<Linear>,
}

impl CloudEncoder {
    pub fn init(cfg: &ModelConfig, rng: &mut Prng) -> Self {
        let [w1, w2, w3] = cfg.sa_widths;
        let sa = vec![
            Linear::init(3 + 3, w1, rng),
            Linear::init(3 + w1, w2, rng),
            Linear::init(3 + w2, w3, rng),
        ];
        let fp = vec![
            Linear::init(w3 + w2, w3, rng),
            Linear::init(w3 + w1, w3, rng),
            Linear::init(w3 + 3, cfg.point_feature_dim, rng),
        ];
        CloudEncoder { sa, fp }
    }

    pub fn zeros_like(&self) -> Self {
        CloudEncoder {
            sa: self.sa.iter().map(Linear::zeros_like).collect(),
            fp: self.fp.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.sa.iter().chain(&self.fp).map(Linear::param_count).sum()
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        for (k, layer) in self.sa.iter_mut().enumerate() {
            out.push((format!("{prefix}.sa.{k}.w"), &mut layer.w));
            out.push((format!("{prefix}.sa.{k}.b"), &mut layer.b));
        }
        for (k, layer) in self.fp.iter_mut().enumerate() {
            out.push((format!("{prefix}.fp.{k}.w"), &mut layer.w));
            out.push((format!("{prefix}.fp.{k}.b"), &mut layer.b));
        }
    }
}

/// One abstraction center's gathered group: member slots index into the
/// previous level's local ordering, `argmax[c]` is the member that won the
/// channel-c max-pool.
#[derive(Debug, Clone)]
struct GroupCache {
    members: Vec<usize>,
    argmax: Vec<usize>,
}

/// Forward intermediates of one cloud encode, enough to replay backward.
#[derive(Debug, Clone)]
pub struct CloudCache {
    q: Vec<Vec3>,
    p1: Vec<Vec3>,
    p2: Vec<Vec3>,
    p3: Vec<Vec3>,
    h0: Matrix,
    h1: Matrix,
    h2: Matrix,
    h3: Matrix,
    groups: [Vec<GroupCache>; 3],
    g2: Matrix,
    g1: Matrix,
    fp_nbrs: [Vec<Vec<usize>>; 3],
    fp_wts: [Vec<Vec<f64>>; 3],
    out: Matrix,
}

/// Per-point features for a whole cloud: row i belongs to cloud point i.
pub fn encode_cloud(cloud: &PointCloud, enc: &CloudEncoder, cfg: &ModelConfig) -> Result<Matrix> {
    Ok(encode_cloud_cached(cloud, enc, cfg)?.0)
}

pub fn encode_cloud_cached(
    cloud: &PointCloud,
    enc: &CloudEncoder,
    cfg: &ModelConfig,
) -> Result<(Matrix, CloudCache)> {
    let n = cloud.len();
    if n < cfg.min_cloud {
        return Err(Error::invalid_argument(format!(
            "encode_cloud: {n} points, need at least {}",
            cfg.min_cloud
        )));
    }

    // Rigid normalization: center on the centroid, scale the farthest point
    // onto the unit sphere. Grouping radii live in these coordinates.
    let c = cloud.centroid();
    let mut scale = 0.0f64;
    for p in &cloud.positions {
        scale = scale.max(vec3::dist(*p, c));
    }
    if scale < 1e-12 {
        scale = 1.0;
    }
    let q: Vec<Vec3> = cloud.positions.iter().map(|p| vec3::scale(vec3::sub(*p, c), 1.0 / scale)).collect();

    let mut h0 = Matrix::zeros(n, 3);
    for (i, nm) in cloud.normals.iter().enumerate() {
        h0.row_mut(i).copy_from_slice(nm);
    }

    let idx1 = fps_points_canonical(&q, (n / 4).max(1));
    let p1: Vec<Vec3> = idx1.iter().map(|&i| q[i]).collect();
    let idx2 = fps_points_canonical(&p1, (n / 16).max(1));
    let p2: Vec<Vec3> = idx2.iter().map(|&i| p1[i]).collect();
    let idx3 = fps_points_canonical(&p2, (n / 64).max(1));
    let p3: Vec<Vec3> = idx3.iter().map(|&i| p2[i]).collect();

    let (h1, groups1) = sa_forward(&enc.sa[0], &q, &h0, &p1, cfg.sa_radii[0], cfg.sa_max_group);
    let (h2, groups2) = sa_forward(&enc.sa[1], &p1, &h1, &p2, cfg.sa_radii[1], cfg.sa_max_group);
    let (h3, groups3) = sa_forward(&enc.sa[2], &p2, &h2, &p3, cfg.sa_radii[2], cfg.sa_max_group);

    let (g2, nbrs0, wts0) = fp_forward(&enc.fp[0], &p3, &h3, &p2, &h2);
    let (g1, nbrs1, wts1) = fp_forward(&enc.fp[1], &p2, &g2, &p1, &h1);
    let (out, nbrs2, wts2) = fp_forward(&enc.fp[2], &p1, &g1, &q, &h0);

    let cache = CloudCache {
        q,
        p1,
        p2,
        p3,
        h0,
        h1,
        h2,
        h3,
        groups: [groups1, groups2, groups3],
        g2,
        g1,
        fp_nbrs: [nbrs0, nbrs1, nbrs2],
        fp_wts: [wts0, wts1, wts2],
        out: out.clone(),
    };
    Ok((out, cache))
}

/// One set-abstraction level: per center, gather a ball of source points,
/// run the shared transform on [relative position, source feature], take
/// the channel max over the group.
fn sa_forward(
    layer: &Linear,
    src_pos: &[Vec3],
    src_feat: &Matrix,
    centers: &[Vec3],
    radius: f64,
    max_group: usize,
) -> (Matrix, Vec<GroupCache>) {
    let width = layer.out_dim;
    let fdim = src_feat.cols;
    let mut out = Matrix::zeros(centers.len(), width);
    let mut groups = Vec::with_capacity(centers.len());
    let mut u = vec![0.0; 3 + fdim];
    let mut z = vec![0.0; width];
    for (j, &cp) in centers.iter().enumerate() {
        let members = ball_query_points(src_pos, cp, radius, max_group);
        let mut argmax = vec![0usize; width];
        let orow = out.row_mut(j);
        for (slot, &i) in members.iter().enumerate() {
            let rel = vec3::sub(src_pos[i], cp);
            u[..3].copy_from_slice(&rel);
            u[3..].copy_from_slice(src_feat.row(i));
            layer.forward_into(&u, &mut z);
            for ch in 0..width {
                let a = z[ch].tanh();
                if slot == 0 || a > orow[ch] {
                    orow[ch] = a;
                    argmax[ch] = slot;
                }
            }
        }
        groups.push(GroupCache { members, argmax });
    }
    (out, groups)
}

fn sa_backward(
    layer: &Linear,
    grad: &mut Linear,
    src_pos: &[Vec3],
    src_feat: &Matrix,
    centers: &[Vec3],
    pooled: &Matrix,
    groups: &[GroupCache],
    d_pooled: &Matrix,
    d_src_feat: &mut Matrix,
) {
    let width = layer.out_dim;
    let fdim = src_feat.cols;
    let mut u = vec![0.0; 3 + fdim];
    for (j, group) in groups.iter().enumerate() {
        let prow = pooled.row(j);
        let drow = d_pooled.row(j);
        // Gradients route to the argmax member of each channel; members that
        // never won any channel contribute nothing.
        let mut dz_by_slot: Vec<Option<Vec<f64>>> = vec![None; group.members.len()];
        for ch in 0..width {
            let g = drow[ch];
            if g == 0.0 {
                continue;
            }
            let slot = group.argmax[ch];
            let dz = dz_by_slot[slot].get_or_insert_with(|| vec![0.0; width]);
            dz[ch] += g * (1.0 - prow[ch] * prow[ch]);
        }
        for (slot, dz) in dz_by_slot.into_iter().enumerate() {
            let Some(dz) = dz else { continue };
            let i = group.members[slot];
            let rel = vec3::sub(src_pos[i], centers[j]);
            u[..3].copy_from_slice(&rel);
            u[3..].copy_from_slice(src_feat.row(i));
            let mut du = vec![0.0; 3 + fdim];
            layer.backward_into(&u, &dz, grad, &mut du);
            let dst = d_src_feat.row_mut(i);
            for k in 0..fdim {
                dst[k] += du[3 + k];
            }
        }
    }
}

/// One propagation stage: interpolate source features onto the destination
/// points with inverse-squared-distance weights over the 3 nearest sources,
/// concatenate the destination skip feature, apply the stage transform.
fn fp_forward(
    layer: &Linear,
    src_pos: &[Vec3],
    src_feat: &Matrix,
    dst_pos: &[Vec3],
    dst_skip: &Matrix,
) -> (Matrix, Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let width = layer.out_dim;
    let fdim = src_feat.cols;
    let sdim = dst_skip.cols;
    let k = src_pos.len().min(3);
    let mut out = Matrix::zeros(dst_pos.len(), width);
    let mut nbrs = Vec::with_capacity(dst_pos.len());
    let mut wts = Vec::with_capacity(dst_pos.len());
    let mut u = vec![0.0; fdim + sdim];
    for (j, &dp) in dst_pos.iter().enumerate() {
        let (nb, wt) = nearest_weights(src_pos, dp, k);
        u[..fdim].fill(0.0);
        for (&i, &w) in nb.iter().zip(&wt) {
            let srow = src_feat.row(i);
            for ch in 0..fdim {
                u[ch] += w * srow[ch];
            }
        }
        u[fdim..].copy_from_slice(dst_skip.row(j));
        let orow = out.row_mut(j);
        layer.forward_into(&u, orow);
        for v in orow.iter_mut() {
            *v = v.tanh();
        }
        nbrs.push(nb);
        wts.push(wt);
    }
    (out, nbrs, wts)
}

#[allow(clippy::too_many_arguments)]
fn fp_backward(
    layer: &Linear,
    grad: &mut Linear,
    src_feat: &Matrix,
    dst_skip: &Matrix,
    stage_out: &Matrix,
    nbrs: &[Vec<usize>],
    wts: &[Vec<f64>],
    d_out: &Matrix,
    d_src_feat: &mut Matrix,
    d_dst_skip: &mut Matrix,
) {
    let fdim = src_feat.cols;
    let sdim = dst_skip.cols;
    let mut u = vec![0.0; fdim + sdim];
    for j in 0..stage_out.rows {
        let arow = stage_out.row(j);
        let drow = d_out.row(j);
        if drow.iter().all(|&g| g == 0.0) {
            continue;
        }
        let dz: Vec<f64> = drow.iter().zip(arow).map(|(g, a)| g * (1.0 - a * a)).collect();
        u[..fdim].fill(0.0);
        for (&i, &w) in nbrs[j].iter().zip(&wts[j]) {
            let srow = src_feat.row(i);
            for ch in 0..fdim {
                u[ch] += w * srow[ch];
            }
        }
        u[fdim..].copy_from_slice(dst_skip.row(j));
        let mut du = vec![0.0; fdim + sdim];
        layer.backward_into(&u, &dz, grad, &mut du);
        for (&i, &w) in nbrs[j].iter().zip(&wts[j]) {
            let dst = d_src_feat.row_mut(i);
            for ch in 0..fdim {
                dst[ch] += w * du[ch];
            }
        }
        let dskip = d_dst_skip.row_mut(j);
        for ch in 0..sdim {
            dskip[ch] += du[fdim + ch];
        }
    }
}

/// K nearest sources with normalized inverse-squared-distance weights.
fn nearest_weights(src_pos: &[Vec3], dp: Vec3, k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut dists: Vec<(f64, usize)> = src_pos
        .iter()
        .enumerate()
        .map(|(i, p)| (vec3::dist2(*p, dp), i))
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    dists.truncate(k);
    let mut wt: Vec<f64> = dists.iter().map(|(d2, _)| 1.0 / (d2 + 1e-8)).collect();
    let total: f64 = wt.iter().sum();
    for w in &mut wt {
        *w /= total;
    }
    (dists.into_iter().map(|(_, i)| i).collect(), wt)
}

/// Parameter gradients of an encode, given the gradient of the output rows.
/// Accumulates into `grad`.
pub fn encode_cloud_backward(
    cache: &CloudCache,
    enc: &CloudEncoder,
    d_out: &Matrix,
    grad: &mut CloudEncoder,
) {
    assert_eq!(d_out.rows, cache.out.rows);
    assert_eq!(d_out.cols, cache.out.cols);

    let mut d_g1 = Matrix::zeros(cache.g1.rows, cache.g1.cols);
    let mut d_h0 = Matrix::zeros(cache.h0.rows, cache.h0.cols);
    fp_backward(
        &enc.fp[2], &mut grad.fp[2], &cache.g1, &cache.h0, &cache.out, &cache.fp_nbrs[2],
        &cache.fp_wts[2], d_out, &mut d_g1, &mut d_h0,
    );

    let mut d_g2 = Matrix::zeros(cache.g2.rows, cache.g2.cols);
    let mut d_h1 = Matrix::zeros(cache.h1.rows, cache.h1.cols);
    fp_backward(
        &enc.fp[1], &mut grad.fp[1], &cache.g2, &cache.h1, &cache.g1, &cache.fp_nbrs[1],
        &cache.fp_wts[1], &d_g1, &mut d_g2, &mut d_h1,
    );

    let mut d_h3 = Matrix::zeros(cache.h3.rows, cache.h3.cols);
    let mut d_h2 = Matrix::zeros(cache.h2.rows, cache.h2.cols);
    fp_backward(
        &enc.fp[0], &mut grad.fp[0], &cache.h3, &cache.h2, &cache.g2, &cache.fp_nbrs[0],
        &cache.fp_wts[0], &d_g2, &mut d_h3, &mut d_h2,
    );

    sa_backward(
        &enc.sa[2], &mut grad.sa[2], &cache.p2, &cache.h2, &cache.p3, &cache.h3,
        &cache.groups[2], &d_h3, &mut d_h2,
    );
    sa_backward(
        &enc.sa[1], &mut grad.sa[1], &cache.p1, &cache.h1, &cache.p2, &cache.h2,
        &cache.groups[1], &d_h2, &mut d_h1,
    );
    sa_backward(
        &enc.sa[0], &mut grad.sa[0], &cache.q, &cache.h0, &cache.p1, &cache.h1,
        &cache.groups[0], &d_h1, &mut d_h0,
    );
}

/// Which low-dimensional input an embedding belongs to. Op and Sp share one
/// parameter set; directions and displacement bundles each have their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallRole {
    Op,
    Sp,
    Dir,
    Disp,
}

impl SmallRole {
    pub fn arity(self) -> usize {
        match self {
            SmallRole::Op | SmallRole::Sp | SmallRole::Dir => 3,
            SmallRole::Disp => 7,
        }
    }
}

/// One head's private input extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub cloud: CloudEncoder,
    pub pos_small: Mlp,
    pub dir_small: Mlp,
    pub disp_small: Mlp,
}

impl EncoderWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Prng) -> Self {
        let s = cfg.small_dim;
        let h = cfg.small_hidden;
        EncoderWeights {
            cloud: CloudEncoder::init(cfg, rng),
            pos_small: Mlp::init(&[3, h, s], Activation::Tanh, rng),
            dir_small: Mlp::init(&[3, h, s], Activation::Tanh, rng),
            disp_small: Mlp::init(&[7, h, s], Activation::Tanh, rng),
        }
    }

    pub fn small_net(&self, role: SmallRole) -> &Mlp {
        match role {
            SmallRole::Op | SmallRole::Sp => &self.pos_small,
            SmallRole::Dir => &self.dir_small,
            SmallRole::Disp => &self.disp_small,
        }
    }

    pub fn small_net_mut(&mut self, role: SmallRole) -> &mut Mlp {
        match role {
            SmallRole::Op | SmallRole::Sp => &mut self.pos_small,
            SmallRole::Dir => &mut self.dir_small,
            SmallRole::Disp => &mut self.disp_small,
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderWeights {
            cloud: self.cloud.zeros_like(),
            pos_small: self.pos_small.zeros_like(),
            dir_small: self.dir_small.zeros_like(),
            disp_small: self.disp_small.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.cloud.param_count()
            + self.pos_small.param_count()
            + self.dir_small.param_count()
            + self.disp_small.param_count()
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        self.cloud.collect_params(&format!("{prefix}.cloud"), out);
        self.pos_small.collect_params(&format!("{prefix}.pos_small"), out);
        self.dir_small.collect_params(&format!("{prefix}.dir_small"), out);
        self.disp_small.collect_params(&format!("{prefix}.disp_small"), out);
    }
}

/// Embedding of one low-dimensional input under the given role.
pub fn encode_small(x: &[f64], role: SmallRole, w: &EncoderWeights) -> Result<Vec<f64>> {
    if x.len() != role.arity() {
        return Err(Error::invalid_argument(format!(
            "encode_small: {:?} takes {} values, got {}",
            role,
            role.arity(),
            x.len()
        )));
    }
    Ok(w.small_net(role).forward(x))
}

/// Concatenated per-point head input:
/// [op-point feature row, point feature row, op embedding, context vector].
/// A missing context is replaced by the learned no-context vector.
pub fn assemble_input(
    fp_op: &[f64],
    fp_i: &[f64],
    f_op: &[f64],
    f_ctx: Option<&[f64]>,
    no_context: &[f64],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let f = cfg.point_feature_dim;
    let s = cfg.small_dim;
    let c = cfg.context_dim;
    let ctx = f_ctx.unwrap_or(no_context);
    if fp_op.len() != f || fp_i.len() != f || f_op.len() != s || ctx.len() != c {
        return Err(Error::invalid_argument(format!(
            "assemble_input: got blocks {}/{}/{}/{}, expected {f}/{f}/{s}/{c}",
            fp_op.len(),
            fp_i.len(),
            f_op.len(),
            ctx.len()
        )));
    }
    let mut out = Vec::with_capacity(cfg.per_point_input_dim());
    out.extend_from_slice(fp_op);
    out.extend_from_slice(fp_i);
    out.extend_from_slice(f_op);
    out.extend_from_slice(ctx);
    Ok(out)
}
