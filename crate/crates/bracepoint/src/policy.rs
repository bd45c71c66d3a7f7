//! Decision heads and the action-selection pipeline: per-point affordance,
//! top-K candidate filtering, latent direction proposals, action scoring,
//! and interaction-context aggregation.

use crate::encoders::{
    assemble_input, encode_cloud, encode_small, EncoderWeights, ModelConfig, SmallRole,
};
use crate::env::{DisplacementBundle, SceneInstance, SupportAction};
use crate::error::{Error, Result};
use crate::geometry::{vec3, PointCloud, Prng, SeedState, Vec3};
use crate::nn::{maxpool_rows, Activation, Matrix, Mlp};

/// Decision nets, plus the learned stand-in context for episodes that have
/// not failed yet. Every net here is a parameter set disjoint from the
/// encoder sets and from its siblings.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub affordance: Mlp,
    pub prop_enc: Mlp,
    pub prop_dec: Mlp,
    pub scoring: Mlp,
    pub ctx_step: Mlp,
    pub attention: Mlp,
    pub no_context: Vec<f64>,
}

impl HeadWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Prng) -> Self {
        let h = cfg.head_hidden;
        let pp = cfg.per_point_input_dim();
        let cond = cfg.proposal_cond_dim();
        let l = cfg.latent_dim;
        let ctx_in = cfg.context_step_input_dim();
        let mut no_context = vec![0.0; cfg.context_dim];
        rng.fill_gaussian(&mut no_context);
        for v in &mut no_context {
            *v *= 0.1;
        }
        HeadWeights {
            affordance: Mlp::init(&[pp, h, h, 1], Activation::Sigmoid, rng),
            prop_enc: Mlp::init(&[3 + cond, h, 2 * l], Activation::Linear, rng),
            prop_dec: Mlp::init(&[l + cond, h, 3], Activation::Linear, rng),
            scoring: Mlp::init(&[cfg.scoring_input_dim(), h, h, 1], Activation::Sigmoid, rng),
            ctx_step: Mlp::init(&[ctx_in, h, cfg.context_dim], Activation::Tanh, rng),
            attention: Mlp::init(&[ctx_in, h, 1], Activation::Softplus, rng),
            no_context,
        }
    }

    pub fn zeros_like(&self) -> Self {
        HeadWeights {
            affordance: self.affordance.zeros_like(),
            prop_enc: self.prop_enc.zeros_like(),
            prop_dec: self.prop_dec.zeros_like(),
            scoring: self.scoring.zeros_like(),
            ctx_step: self.ctx_step.zeros_like(),
            attention: self.attention.zeros_like(),
            no_context: vec![0.0; self.no_context.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.affordance.param_count()
            + self.prop_enc.param_count()
            + self.prop_dec.param_count()
            + self.scoring.param_count()
            + self.ctx_step.param_count()
            + self.attention.param_count()
            + self.no_context.len()
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        self.affordance.collect_params(&format!("{prefix}.affordance"), out);
        self.prop_enc.collect_params(&format!("{prefix}.prop_enc"), out);
        self.prop_dec.collect_params(&format!("{prefix}.prop_dec"), out);
        self.scoring.collect_params(&format!("{prefix}.scoring"), out);
        self.ctx_step.collect_params(&format!("{prefix}.ctx_step"), out);
        self.attention.collect_params(&format!("{prefix}.attention"), out);
        out.push((format!("{prefix}.no_context"), &mut self.no_context));
    }
}

/// Complete model: one private encoder set per head family plus the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub enc_affordance: EncoderWeights,
    pub enc_proposal: EncoderWeights,
    pub enc_scoring: EncoderWeights,
    pub enc_context: EncoderWeights,
    pub heads: HeadWeights,
}

impl ModelWeights {
    pub fn init(cfg: &ModelConfig, seed: SeedState) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelWeights {
            config: cfg.clone(),
            enc_affordance: EncoderWeights::init(cfg, &mut seed.derive(1).rng()),
            enc_proposal: EncoderWeights::init(cfg, &mut seed.derive(2).rng()),
            enc_scoring: EncoderWeights::init(cfg, &mut seed.derive(3).rng()),
            enc_context: EncoderWeights::init(cfg, &mut seed.derive(4).rng()),
            heads: HeadWeights::init(cfg, &mut seed.derive(5).rng()),
        })
    }

    pub fn param_count(&self) -> usize {
        self.enc_affordance.param_count()
            + self.enc_proposal.param_count()
            + self.enc_scoring.param_count()
            + self.enc_context.param_count()
            + self.heads.param_count()
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        self.enc_affordance.collect_params("enc_afford", out);
        self.enc_proposal.collect_params("enc_prop", out);
        self.enc_scoring.collect_params("enc_score", out);
        self.enc_context.collect_params("enc_ctx", out);
        self.heads.collect_params("heads", out);
    }
}

/// Per-point affordance in [0, 1] for each assembled input row.
pub fn affordance_forward(inputs: &Matrix, w: &HeadWeights) -> Result<Vec<f64>> {
    if inputs.cols != w.affordance.in_dim() {
        return Err(Error::invalid_argument(format!(
            "affordance_forward: rows are {} wide, head expects {}",
            inputs.cols,
            w.affordance.in_dim()
        )));
    }
    Ok((0..inputs.rows).map(|i| w.affordance.forward(inputs.row(i))[0]).collect())
}

/// Indices of the K largest map entries, score-descending, exact ties
/// resolved toward the lower index.
pub fn topk_candidates(map: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > map.len() {
        return Err(Error::invalid_argument(format!(
            "topk_candidates: K = {k} outside 1..={}",
            map.len()
        )));
    }
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].partial_cmp(&map[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Latent draw of the proposal encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Training-time reparameterized encoding of a direction under its
/// conditioning vector: z = mu + exp(logvar / 2) * noise.
pub fn propose_encode(d: Vec3, f_in: &[f64], w: &HeadWeights, noise: &[f64]) -> Result<LatentCode> {
    let latent = w.prop_dec.in_dim() - f_in.len();
    if f_in.len() + 3 != w.prop_enc.in_dim() {
        return Err(Error::invalid_argument(format!(
            "propose_encode: conditioning is {} wide, encoder expects {}",
            f_in.len(),
            w.prop_enc.in_dim() - 3
        )));
    }
    if noise.len() != latent {
        return Err(Error::invalid_argument(format!(
            "propose_encode: noise has {} values, latent is {latent}",
            noise.len()
        )));
    }
    let mut x = Vec::with_capacity(w.prop_enc.in_dim());
    x.extend_from_slice(&d);
    x.extend_from_slice(f_in);
    let stats = w.prop_enc.forward(&x);
    let (mu, logvar) = stats.split_at(latent);
    let z: Vec<f64> = mu
        .iter()
        .zip(logvar)
        .zip(noise)
        .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
        .collect();
    Ok(LatentCode { z, mu: mu.to_vec(), logvar: logvar.to_vec() })
}

/// Unit support direction decoded from a latent under its conditioning
/// vector. A numerically zero raw output falls back to +z.
pub fn propose_decode(z: &[f64], f_in: &[f64], w: &HeadWeights) -> Result<Vec3> {
    if z.len() + f_in.len() != w.prop_dec.in_dim() {
        return Err(Error::invalid_argument(format!(
            "propose_decode: latent {} + conditioning {} != decoder input {}",
            z.len(),
            f_in.len(),
            w.prop_dec.in_dim()
        )));
    }
    let mut x = Vec::with_capacity(w.prop_dec.in_dim());
    x.extend_from_slice(z);
    x.extend_from_slice(f_in);
    let raw = w.prop_dec.forward(&x);
    Ok(vec3::unit([raw[0], raw[1], raw[2]], 1e-12).unwrap_or([0.0, 0.0, 1.0]))
}

/// Scoring-head input layout: [f_p_op | f_p_sp | f_op | f_sp | f_d | f_I].
pub fn scoring_input(
    f_p_op: &[f64],
    f_p_sp: &[f64],
    f_op: &[f64],
    f_sp: &[f64],
    f_d: &[f64],
    f_i: &[f64],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let f = cfg.point_feature_dim;
    let s = cfg.small_dim;
    let c = cfg.context_dim;
    if f_p_op.len() != f
        || f_p_sp.len() != f
        || f_op.len() != s
        || f_sp.len() != s
        || f_d.len() != s
        || f_i.len() != c
    {
        return Err(Error::invalid_argument("scoring_input: block width mismatch"));
    }
    let mut x = Vec::with_capacity(cfg.scoring_input_dim());
    x.extend_from_slice(f_p_op);
    x.extend_from_slice(f_p_sp);
    x.extend_from_slice(f_op);
    x.extend_from_slice(f_sp);
    x.extend_from_slice(f_d);
    x.extend_from_slice(f_i);
    Ok(x)
}

/// Predicted success confidence of one support action, in [0, 1].
pub fn score_action(
    f_p_op: &[f64],
    f_p_sp: &[f64],
    f_op: &[f64],
    f_sp: &[f64],
    f_d: &[f64],
    f_i: &[f64],
    w: &HeadWeights,
    cfg: &ModelConfig,
) -> Result<f64> {
    let x = scoring_input(f_p_op, f_p_sp, f_op, f_sp, f_d, f_i, cfg)?;
    Ok(w.scoring.forward(&x)[0])
}

/// One observed interaction frame, embedded: the frame feature and its
/// positive attention weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFrameFeature {
    pub feature: Vec<f64>,
    pub weight: f64,
}

/// Context-net input layout:
/// [pooled cloud feature | f_sp | f_d | f_m].
pub fn context_step_input(
    f_o: &[f64],
    f_sp: &[f64],
    f_d: &[f64],
    f_m: &[f64],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    if f_o.len() != cfg.point_feature_dim
        || f_sp.len() != cfg.small_dim
        || f_d.len() != cfg.small_dim
        || f_m.len() != cfg.small_dim
    {
        return Err(Error::invalid_argument("context_step_input: block width mismatch"));
    }
    let mut x = Vec::with_capacity(cfg.context_step_input_dim());
    x.extend_from_slice(f_o);
    x.extend_from_slice(f_sp);
    x.extend_from_slice(f_d);
    x.extend_from_slice(f_m);
    Ok(x)
}

/// Embeds one interaction frame given the already-pooled cloud feature.
pub fn context_step_pooled(
    f_o: &[f64],
    sp_pos: Vec3,
    d: Vec3,
    bundle: &DisplacementBundle,
    w: &ModelWeights,
) -> Result<ContextFrameFeature> {
    let f_sp = encode_small(&sp_pos, SmallRole::Sp, &w.enc_context)?;
    let f_d = encode_small(&d, SmallRole::Dir, &w.enc_context)?;
    let f_m = encode_small(&bundle.as_vec7(), SmallRole::Disp, &w.enc_context)?;
    let x = context_step_input(f_o, &f_sp, &f_d, &f_m, &w.config)?;
    let feature = w.heads.ctx_step.forward(&x);
    let weight = w.heads.attention.forward(&x)[0];
    Ok(ContextFrameFeature { feature, weight })
}

/// Embeds one interaction frame (cloud, action, observed displacement).
pub fn context_step(
    cloud: &PointCloud,
    action: &SupportAction,
    bundle: &DisplacementBundle,
    w: &ModelWeights,
) -> Result<ContextFrameFeature> {
    if action.p_sp >= cloud.len() {
        return Err(Error::invalid_argument("context_step: support index out of bounds"));
    }
    let rows = encode_cloud(cloud, &w.enc_context.cloud, &w.config)?;
    let (f_o, _) = maxpool_rows(&rows.data, rows.rows, rows.cols);
    context_step_pooled(&f_o, cloud.positions[action.p_sp], action.d, bundle, w)
}

/// Attention-weighted mean of frame features; no frames yields the learned
/// no-context vector.
pub fn aggregate_context(frames: &[ContextFrameFeature], w: &HeadWeights) -> Vec<f64> {
    if frames.is_empty() {
        return w.no_context.clone();
    }
    let dim = frames[0].feature.len();
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for fr in frames {
        for (slot, v) in num.iter_mut().zip(&fr.feature) {
            *slot += fr.weight * v;
        }
        den += fr.weight;
    }
    for slot in &mut num {
        *slot /= den;
    }
    num
}

/// Frozen per-scene encoder outputs, computed once and shared by every
/// selection and training step that touches the scene.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub afford_rows: Matrix,
    pub proposal_rows: Matrix,
    pub scoring_rows: Matrix,
    pub context_pooled: Vec<f64>,
}

pub fn scene_features(scene: &SceneInstance, w: &ModelWeights) -> Result<SceneFeatures> {
    let afford_rows = encode_cloud(&scene.cloud, &w.enc_affordance.cloud, &w.config)?;
    let proposal_rows = encode_cloud(&scene.cloud, &w.enc_proposal.cloud, &w.config)?;
    let scoring_rows = encode_cloud(&scene.cloud, &w.enc_scoring.cloud, &w.config)?;
    let ctx_rows = encode_cloud(&scene.cloud, &w.enc_context.cloud, &w.config)?;
    let (context_pooled, _) = maxpool_rows(&ctx_rows.data, ctx_rows.rows, ctx_rows.cols);
    Ok(SceneFeatures { afford_rows, proposal_rows, scoring_rows, context_pooled })
}

/// Assembled affordance inputs for every cloud point, then the head.
pub fn affordance_map(
    scene: &SceneInstance,
    feats: &SceneFeatures,
    f_i: Option<&[f64]>,
    w: &ModelWeights,
) -> Result<Vec<f64>> {
    let cfg = &w.config;
    let op_pos = scene.cloud.positions[scene.p_op];
    let f_op = encode_small(&op_pos, SmallRole::Op, &w.enc_affordance)?;
    let fp_op = feats.afford_rows.row(scene.p_op);
    let mut inputs = Matrix::zeros(scene.cloud.len(), cfg.per_point_input_dim());
    for i in 0..scene.cloud.len() {
        let row = assemble_input(fp_op, feats.afford_rows.row(i), &f_op, f_i, &w.heads.no_context, cfg)?;
        inputs.row_mut(i).copy_from_slice(&row);
    }
    affordance_forward(&inputs, &w.heads)
}

/// Proposal conditioning for candidate point `p`: assembled per-point input
/// from the proposal encoder set, then the candidate's position embedding.
pub fn proposal_condition(
    scene: &SceneInstance,
    feats: &SceneFeatures,
    p: usize,
    f_i: Option<&[f64]>,
    w: &ModelWeights,
) -> Result<Vec<f64>> {
    let cfg = &w.config;
    let op_pos = scene.cloud.positions[scene.p_op];
    let f_op = encode_small(&op_pos, SmallRole::Op, &w.enc_proposal)?;
    let per_point = assemble_input(
        feats.proposal_rows.row(scene.p_op),
        feats.proposal_rows.row(p),
        &f_op,
        f_i,
        &w.heads.no_context,
        cfg,
    )?;
    let f_sp = encode_small(&scene.cloud.positions[p], SmallRole::Sp, &w.enc_proposal)?;
    let mut cond = per_point;
    cond.extend_from_slice(&f_sp);
    Ok(cond)
}

/// Best (support point, direction) over the top-K affordance candidates:
/// for the rank-j candidate, N_dirs latents are drawn from seed.derive(j)
/// and decoded; all K * N_dirs proposals are scored and the argmax wins.
/// Exact score ties fall to the lower point index, then the earlier sample.
pub fn select_best(
    scene: &SceneInstance,
    map: &[f64],
    k: usize,
    n_dirs: usize,
    seed: SeedState,
    w: &ModelWeights,
    f_i: Option<&[f64]>,
    feats: &SceneFeatures,
) -> Result<(SupportAction, f64)> {
    if n_dirs == 0 {
        return Err(Error::invalid_argument("select_best: N_dirs must be positive"));
    }
    if map.len() != scene.cloud.len() {
        return Err(Error::invalid_argument("select_best: map length != cloud size"));
    }
    let cfg = &w.config;
    let candidates = topk_candidates(map, k)?;

    let op_pos = scene.cloud.positions[scene.p_op];
    let f_op_score = encode_small(&op_pos, SmallRole::Op, &w.enc_scoring)?;
    let f_p_op_score = feats.scoring_rows.row(scene.p_op);
    let ctx: &[f64] = f_i.unwrap_or(&w.heads.no_context);

    let mut best: Option<(f64, usize, usize, Vec3)> = None;
    let mut z = vec![0.0; cfg.latent_dim];
    for (rank, &p) in candidates.iter().enumerate() {
        let cond = proposal_condition(scene, feats, p, f_i, w)?;
        let f_p_sp = feats.scoring_rows.row(p);
        let f_sp = encode_small(&scene.cloud.positions[p], SmallRole::Sp, &w.enc_scoring)?;
        let mut rng = seed.derive(rank as u64).rng();
        for s in 0..n_dirs {
            rng.fill_gaussian(&mut z);
            let d = propose_decode(&z, &cond, &w.heads)?;
            let f_d = encode_small(&d, SmallRole::Dir, &w.enc_scoring)?;
            let c = score_action(f_p_op_score, f_p_sp, &f_op_score, &f_sp, &f_d, ctx, &w.heads, cfg)?;
            let wins = match &best {
                None => true,
                Some((bc, bp, bs, _)) => c > *bc || (c == *bc && (p < *bp || (p == *bp && s < *bs))),
            };
            if wins {
                best = Some((c, p, s, d));
            }
        }
    }
    let (c, p, _, d) = best.expect("candidates and n_dirs are both non-empty");
    Ok((SupportAction::new(p, d)?, c))
}
