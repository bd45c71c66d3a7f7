//! Ground-truth score construction, the loss functions, staged training
//! with a stepped adaptive-moment schedule, affordance label generation,
//! and the online adaptation update.

use serde::{Deserialize, Serialize};

use crate::data::{ContextFrame, Dataset, InteractionRecord};
use crate::encoders::{assemble_input, encode_small, ModelConfig, SmallRole};
use crate::env::SceneInstance;
use crate::error::{Error, Result};
use crate::geometry::{fps_points_canonical, vec3, SeedState};
use crate::nn::{Adam, MlpCache};
use crate::policy::{
    context_step_input, proposal_condition, propose_decode, scene_features, score_action,
    scoring_input, ModelWeights, SceneFeatures,
};

/// Ground-truth action score: 1 - (alpha * g_d + beta * g_c), clamped to
/// [0, 1]. g_d is the normalized displacement, g_c the completion deficit.
pub fn gt_score(g_d: f64, g_c: f64, alpha: f64, beta: f64) -> f64 {
    (1.0 - (alpha * g_d + beta * g_c)).clamp(0.0, 1.0)
}

pub fn scoring_loss(c_hat: f64, r: f64) -> f64 {
    (c_hat - r) * (c_hat - r)
}

/// KL(N(mu, diag(exp(logvar))) || N(0, I)) in closed form.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Direction reconstruction plus latent regularization:
/// lambda_dir * (1 - cos(d_hat, d)) + lambda_kl * KL.
pub fn proposal_loss(
    d_hat: [f64; 3],
    d: [f64; 3],
    mu: &[f64],
    logvar: &[f64],
    lambda_dir: f64,
    lambda_kl: f64,
) -> f64 {
    lambda_dir * (1.0 - vec3::dot(d_hat, d)) + lambda_kl * kl_standard_normal(mu, logvar)
}

pub fn affordance_loss(a_hat: f64, a: f64) -> f64 {
    (a_hat - a).abs()
}

/// Per-point affordance target: draw `n_dirs` latents from the prior,
/// decode each into a direction, score it, and average the `k_avg` highest
/// scores. The proposer and scorer are read-only here.
pub fn affordance_label(
    scene: &SceneInstance,
    feats: &SceneFeatures,
    p: usize,
    f_i: Option<&[f64]>,
    n_dirs: usize,
    k_avg: usize,
    seed: SeedState,
    w: &ModelWeights,
) -> Result<f64> {
    if n_dirs == 0 || k_avg == 0 || k_avg > n_dirs {
        return Err(Error::invalid_argument(format!(
            "affordance_label: K_avg = {k_avg} outside 1..=N_dirs ({n_dirs})"
        )));
    }
    if p >= scene.cloud.len() {
        return Err(Error::invalid_argument("affordance_label: point index out of bounds"));
    }
    let cfg = &w.config;
    let cond = proposal_condition(scene, feats, p, f_i, w)?;
    let op_pos = scene.cloud.positions[scene.p_op];
    let f_op = encode_small(&op_pos, SmallRole::Op, &w.enc_scoring)?;
    let f_sp = encode_small(&scene.cloud.positions[p], SmallRole::Sp, &w.enc_scoring)?;
    let f_p_op = feats.scoring_rows.row(scene.p_op);
    let f_p_sp = feats.scoring_rows.row(p);
    let ctx: &[f64] = f_i.unwrap_or(&w.heads.no_context);

    let mut rng = seed.rng();
    let mut z = vec![0.0; cfg.latent_dim];
    let mut scores = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        rng.fill_gaussian(&mut z);
        let d = propose_decode(&z, &cond, &w.heads)?;
        let f_d = encode_small(&d, SmallRole::Dir, &w.enc_scoring)?;
        scores.push(score_action(f_p_op, f_p_sp, &f_op, &f_sp, &f_d, ctx, &w.heads, cfg)?);
    }
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(scores[..k_avg].iter().sum::<f64>() / k_avg as f64)
}

/// All training dials. The model shape rides along so one config fully
/// determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_dir: f64,
    pub lambda_kl: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub batch_size: usize,
    pub lr_floor: f64,
    /// Candidate points kept by the selection pipeline.
    pub k_top: usize,
    /// Directions sampled per candidate, and per label draw.
    pub n_dirs: usize,
    /// How many of the n_dirs scores a label averages.
    pub k_avg: usize,
    /// Step budget per stage; the lr floor can stop a stage earlier.
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Scenes labeled for the affordance stage.
    pub label_scenes: usize,
    /// Points labeled per scene and context state.
    pub label_points: usize,
    /// Adaptation fine-tune rate as a fraction of `lr`.
    pub adapt_lr_scale: f64,
    pub seed: (u64, u64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            alpha: 1.0,
            beta: 1.0,
            lambda_dir: 1.0,
            lambda_kl: 1.0,
            lr: 0.001,
            weight_decay: 1e-5,
            lr_decay_factor: 0.9,
            lr_decay_every: 500,
            batch_size: 64,
            lr_floor: 5e-7,
            k_top: 10,
            n_dirs: 100,
            k_avg: 10,
            stage1_steps: 2000,
            stage2_steps: 2000,
            label_scenes: 32,
            label_points: 64,
            adapt_lr_scale: 0.1,
            seed: (7, 0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda_dir < 0.0 || self.lambda_kl < 0.0 {
            return Err(Error::invalid_argument("train config: loss weights must be non-negative"));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.adapt_lr_scale < 0.0 {
            return Err(Error::invalid_argument("train config: rates must be non-negative"));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid_argument("train config: decay factor outside (0, 1]"));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::invalid_argument("train config: decay interval and batch must be positive"));
        }
        if self.k_top == 0 || self.n_dirs == 0 {
            return Err(Error::invalid_argument("train config: K and N_dirs must be positive"));
        }
        if self.k_avg == 0 || self.k_avg > self.n_dirs {
            return Err(Error::invalid_argument(format!(
                "train config: K_avg = {} outside 1..=N_dirs ({})",
                self.k_avg, self.n_dirs
            )));
        }
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return Err(Error::invalid_argument("train config: stage budgets must be positive"));
        }
        if self.label_scenes == 0 || self.label_points == 0 {
            return Err(Error::invalid_argument("train config: label counts must be positive"));
        }
        Ok(())
    }
}

/// One optimizer step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub loss_score: f64,
    pub loss_dir: f64,
    pub loss_kl: f64,
    pub loss_afford: f64,
    pub lr: f64,
}

/// Per-record terms of the joint stage-1 objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOneTerms {
    pub score: f64,
    pub dir: f64,
    pub kl: f64,
}

impl StageOneTerms {
    pub fn total(&self) -> f64 {
        self.score + self.dir + self.kl
    }
}

/// A gradient accumulator shaped like the model, all zeros.
pub fn zero_grads(w: &ModelWeights) -> ModelWeights {
    ModelWeights {
        config: w.config.clone(),
        enc_affordance: w.enc_affordance.zeros_like(),
        enc_proposal: w.enc_proposal.zeros_like(),
        enc_scoring: w.enc_scoring.zeros_like(),
        enc_context: w.enc_context.zeros_like(),
        heads: w.heads.zeros_like(),
    }
}

pub fn clear_grads(g: &mut ModelWeights) {
    let mut params = Vec::new();
    g.collect_params(&mut params);
    for (_, v) in params {
        v.fill(0.0);
    }
}

/// Stage-1 training touches the decision heads and the small input
/// embedders on the scoring, proposal, and context paths. The point-cloud
/// encoders stay at their initialization: their random hierarchical
/// features act as a frozen positional code, which keeps per-scene features
/// cacheable across the whole run.
fn stage1_trainable(name: &str) -> bool {
    const PREFIXES: [&str; 12] = [
        "heads.scoring",
        "heads.prop_enc",
        "heads.prop_dec",
        "heads.ctx_step",
        "heads.attention",
        "heads.no_context",
        "enc_score.pos_small",
        "enc_score.dir_small",
        "enc_prop.pos_small",
        "enc_ctx.pos_small",
        "enc_ctx.dir_small",
        "enc_ctx.disp_small",
    ];
    PREFIXES.iter().any(|p| name.starts_with(p))
}

fn stage2_trainable(name: &str) -> bool {
    name.starts_with("heads.affordance")
}

struct FrameCache {
    sp_cache: MlpCache,
    d_cache: MlpCache,
    m_cache: MlpCache,
    step_cache: MlpCache,
    attn_cache: MlpCache,
    feature: Vec<f64>,
    weight: f64,
}

struct ContextCache {
    frames: Vec<FrameCache>,
    f_i: Vec<f64>,
    weight_sum: f64,
}

fn context_forward(
    pooled: &[f64],
    frames: &[ContextFrame],
    scene: &SceneInstance,
    w: &ModelWeights,
) -> Result<ContextCache> {
    if frames.is_empty() {
        return Ok(ContextCache {
            frames: Vec::new(),
            f_i: w.heads.no_context.clone(),
            weight_sum: 0.0,
        });
    }
    let cfg = &w.config;
    let mut caches = Vec::with_capacity(frames.len());
    let mut num = vec![0.0; cfg.context_dim];
    let mut den = 0.0;
    for fr in frames {
        if fr.action.p_sp >= scene.cloud.len() {
            return Err(Error::invalid_argument("context frame indexes outside the cloud"));
        }
        let sp_pos = scene.cloud.positions[fr.action.p_sp];
        let (f_sp, sp_cache) = w.enc_context.pos_small.forward_cached(&sp_pos);
        let (f_d, d_cache) = w.enc_context.dir_small.forward_cached(&fr.action.d);
        let (f_m, m_cache) = w.enc_context.disp_small.forward_cached(&fr.bundle.as_vec7());
        let x = context_step_input(pooled, &f_sp, &f_d, &f_m, cfg)?;
        let (feature, step_cache) = w.heads.ctx_step.forward_cached(&x);
        let (attn, attn_cache) = w.heads.attention.forward_cached(&x);
        let weight = attn[0];
        for (slot, v) in num.iter_mut().zip(&feature) {
            *slot += weight * v;
        }
        den += weight;
        caches.push(FrameCache { sp_cache, d_cache, m_cache, step_cache, attn_cache, feature, weight });
    }
    for slot in &mut num {
        *slot /= den;
    }
    Ok(ContextCache { frames: caches, f_i: num, weight_sum: den })
}

fn context_backward(cache: &ContextCache, df_i: &[f64], w: &ModelWeights, g: &mut ModelWeights) {
    if cache.frames.is_empty() {
        for (slot, v) in g.heads.no_context.iter_mut().zip(df_i) {
            *slot += v;
        }
        return;
    }
    let cfg = &w.config;
    let f = cfg.point_feature_dim;
    let s = cfg.small_dim;
    let den = cache.weight_sum;
    for fr in &cache.frames {
        let mut dfeat = vec![0.0; cfg.context_dim];
        for ((slot, dv), _) in dfeat.iter_mut().zip(df_i).zip(&fr.feature) {
            *slot = dv * fr.weight / den;
        }
        let dweight = df_i
            .iter()
            .zip(&fr.feature)
            .zip(&cache.f_i)
            .map(|((dv, fv), iv)| dv * (fv - iv))
            .sum::<f64>()
            / den;
        let dx_step = w.heads.ctx_step.backward(&fr.step_cache, &dfeat, &mut g.heads.ctx_step);
        let dx_attn = w.heads.attention.backward(&fr.attn_cache, &[dweight], &mut g.heads.attention);
        let dx: Vec<f64> = dx_step.iter().zip(&dx_attn).map(|(a, b)| a + b).collect();
        // Layout [pooled cloud | f_sp | f_d | f_m]; the pooled block feeds
        // the frozen cloud encoder and is dropped.
        let mut off = f;
        let _ = w.enc_context.pos_small.backward(&fr.sp_cache, &dx[off..off + s], &mut g.enc_context.pos_small);
        off += s;
        let _ = w.enc_context.dir_small.backward(&fr.d_cache, &dx[off..off + s], &mut g.enc_context.dir_small);
        off += s;
        let _ = w.enc_context.disp_small.backward(&fr.m_cache, &dx[off..off + s], &mut g.enc_context.disp_small);
    }
}

/// Forward and backward for one record under the joint stage-1 objective
/// (scoring MSE + proposal reconstruction + KL), accumulating `scale` times
/// the gradient into `g`. Gradients flow through both decision heads into
/// the context aggregation and the small embedders; the cached per-scene
/// rows are treated as constants.
pub fn stage1_record_backward(
    scene: &SceneInstance,
    feats: &SceneFeatures,
    rec: &InteractionRecord,
    noise: &[f64],
    w: &ModelWeights,
    lambda_dir: f64,
    lambda_kl: f64,
    scale: f64,
    g: &mut ModelWeights,
) -> Result<StageOneTerms> {
    let cfg = &w.config;
    if noise.len() != cfg.latent_dim {
        return Err(Error::invalid_argument("stage1: noise width != latent width"));
    }
    let p_op = rec.p_op as usize;
    let p_sp = rec.action.p_sp;
    if p_op >= scene.cloud.len() || p_sp >= scene.cloud.len() {
        return Err(Error::invalid_argument("stage1: record indexes outside the cloud"));
    }
    let f = cfg.point_feature_dim;
    let s = cfg.small_dim;
    let c = cfg.context_dim;
    let l = cfg.latent_dim;

    let ctx = context_forward(&feats.context_pooled, &rec.context, scene, w)?;
    let mut df_i = vec![0.0; c];

    // Scoring path.
    let op_pos = scene.cloud.positions[p_op];
    let sp_pos = scene.cloud.positions[p_sp];
    let (f_op, op_cache) = w.enc_scoring.pos_small.forward_cached(&op_pos);
    let (f_sp, sp_cache) = w.enc_scoring.pos_small.forward_cached(&sp_pos);
    let (f_d, d_cache) = w.enc_scoring.dir_small.forward_cached(&rec.action.d);
    let x_s = scoring_input(
        feats.scoring_rows.row(p_op),
        feats.scoring_rows.row(p_sp),
        &f_op,
        &f_sp,
        &f_d,
        &ctx.f_i,
        cfg,
    )?;
    let (c_out, score_cache) = w.heads.scoring.forward_cached(&x_s);
    let c_hat = c_out[0];
    let loss_score = scoring_loss(c_hat, rec.r);

    let dc = 2.0 * (c_hat - rec.r) * scale;
    let dx_s = w.heads.scoring.backward(&score_cache, &[dc], &mut g.heads.scoring);
    let mut off = 2 * f;
    let _ = w.enc_scoring.pos_small.backward(&op_cache, &dx_s[off..off + s], &mut g.enc_scoring.pos_small);
    off += s;
    let _ = w.enc_scoring.pos_small.backward(&sp_cache, &dx_s[off..off + s], &mut g.enc_scoring.pos_small);
    off += s;
    let _ = w.enc_scoring.dir_small.backward(&d_cache, &dx_s[off..off + s], &mut g.enc_scoring.dir_small);
    off += s;
    for (slot, v) in df_i.iter_mut().zip(&dx_s[off..off + c]) {
        *slot += v;
    }

    // Proposal path. The conditioning mirrors proposal_condition with the
    // embeddings cached for backprop.
    let (f_op_p, op_p_cache) = w.enc_proposal.pos_small.forward_cached(&op_pos);
    let (f_sp_p, sp_p_cache) = w.enc_proposal.pos_small.forward_cached(&sp_pos);
    let mut cond = assemble_input(
        feats.proposal_rows.row(p_op),
        feats.proposal_rows.row(p_sp),
        &f_op_p,
        Some(&ctx.f_i),
        &w.heads.no_context,
        cfg,
    )?;
    cond.extend_from_slice(&f_sp_p);

    let mut x_e = Vec::with_capacity(3 + cond.len());
    x_e.extend_from_slice(&rec.action.d);
    x_e.extend_from_slice(&cond);
    let (stats, enc_cache) = w.heads.prop_enc.forward_cached(&x_e);
    let (mu, lv) = stats.split_at(l);
    let z: Vec<f64> = mu
        .iter()
        .zip(lv)
        .zip(noise)
        .map(|((m, v), n)| m + (0.5 * v).exp() * n)
        .collect();

    let mut x_d = Vec::with_capacity(l + cond.len());
    x_d.extend_from_slice(&z);
    x_d.extend_from_slice(&cond);
    let (raw, dec_cache) = w.heads.prop_dec.forward_cached(&x_d);
    let norm = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
    let d_hat = if norm < 1e-12 { [0.0, 0.0, 1.0] } else { vec3::scale([raw[0], raw[1], raw[2]], 1.0 / norm) };
    let loss_dir = lambda_dir * (1.0 - vec3::dot(d_hat, rec.action.d));
    let loss_kl = lambda_kl * kl_standard_normal(mu, lv);

    // d(1 - cos)/d d_hat = -d, pulled back through the normalization; the
    // zero-output fallback is locally constant so its gradient is zero.
    let mut draw = [0.0; 3];
    if norm >= 1e-12 {
        let dd_hat = vec3::scale(rec.action.d, -lambda_dir * scale);
        let proj = vec3::dot(dd_hat, d_hat);
        for i in 0..3 {
            draw[i] = (dd_hat[i] - d_hat[i] * proj) / norm;
        }
    }
    let dx_d = w.heads.prop_dec.backward(&dec_cache, &draw, &mut g.heads.prop_dec);
    let (dz, dcond_dec) = dx_d.split_at(l);

    let mut dstats = vec![0.0; 2 * l];
    for i in 0..l {
        dstats[i] = dz[i] + scale * lambda_kl * mu[i];
        dstats[l + i] =
            dz[i] * noise[i] * 0.5 * (0.5 * lv[i]).exp() + scale * lambda_kl * 0.5 * (lv[i].exp() - 1.0);
    }
    let dx_e = w.heads.prop_enc.backward(&enc_cache, &dstats, &mut g.heads.prop_enc);
    let dcond: Vec<f64> = dcond_dec.iter().zip(&dx_e[3..]).map(|(a, b)| a + b).collect();

    // Conditioning layout: [fp_op | fp_sp | f_op | ctx | f_sp].
    let mut off = 2 * f;
    let _ = w.enc_proposal.pos_small.backward(&op_p_cache, &dcond[off..off + s], &mut g.enc_proposal.pos_small);
    off += s;
    for (slot, v) in df_i.iter_mut().zip(&dcond[off..off + c]) {
        *slot += v;
    }
    off += c;
    let _ = w.enc_proposal.pos_small.backward(&sp_p_cache, &dcond[off..off + s], &mut g.enc_proposal.pos_small);

    context_backward(&ctx, &df_i, w, g);

    Ok(StageOneTerms { score: loss_score, dir: loss_dir, kl: loss_kl })
}

/// Forward and backward for one labeled affordance row; returns the L1
/// loss and accumulates `scale` times its gradient.
pub fn affordance_item_backward(
    row: &[f64],
    label: f64,
    w: &ModelWeights,
    scale: f64,
    g: &mut ModelWeights,
) -> Result<f64> {
    if row.len() != w.heads.affordance.in_dim() {
        return Err(Error::invalid_argument("affordance row width != head input width"));
    }
    let (out, cache) = w.heads.affordance.forward_cached(row);
    let a_hat = out[0];
    let d = if a_hat > label {
        scale
    } else if a_hat < label {
        -scale
    } else {
        0.0
    };
    let _ = w.heads.affordance.backward(&cache, &[d], &mut g.heads.affordance);
    Ok(affordance_loss(a_hat, label))
}

fn apply_step(
    w: &mut ModelWeights,
    g: &mut ModelWeights,
    adam: &mut Adam,
    trainable: &dyn Fn(&str) -> bool,
) {
    let mut params = Vec::new();
    w.collect_params(&mut params);
    let mut gparams = Vec::new();
    g.collect_params(&mut gparams);
    let grads: Vec<(String, &Vec<f64>)> = gparams.iter().map(|(n, v)| (n.clone(), &**v)).collect();
    adam.step(&mut params, &grads, trainable);
}

/// Frozen per-scene encoder features for a scene table, index-aligned.
pub fn scene_feature_table(scenes: &[SceneInstance], w: &ModelWeights) -> Result<Vec<SceneFeatures>> {
    scenes.iter().map(|sc| scene_features(sc, w)).collect()
}

struct LabelItem {
    row: Vec<f64>,
    label: f64,
}

/// Stage-2 label set: a strided sample of scenes, each labeled in its
/// no-context state and, when the dataset observed one, under its longest
/// recorded context window, at a canonical subset of points.
fn build_label_items(
    ds: &Dataset,
    feats: &[SceneFeatures],
    w: &ModelWeights,
    tc: &TrainConfig,
    seed: SeedState,
) -> Result<Vec<LabelItem>> {
    let n_scenes = ds.scenes.len();
    let take = tc.label_scenes.min(n_scenes);
    let mut best_ctx: Vec<Option<&Vec<ContextFrame>>> = vec![None; n_scenes];
    for rec in &ds.records {
        let sid = rec.scene_id as usize;
        if !rec.context.is_empty()
            && best_ctx[sid].map_or(true, |cur| rec.context.len() > cur.len())
        {
            best_ctx[sid] = Some(&rec.context);
        }
    }

    let mut items = Vec::new();
    for j in 0..take {
        let sid = j * n_scenes / take;
        let scene = &ds.scenes[sid];
        let sf = &feats[sid];
        let mut states: Vec<(u64, Option<Vec<f64>>)> = vec![(0, None)];
        if let Some(frames) = best_ctx[sid] {
            let cc = context_forward(&sf.context_pooled, frames, scene, w)?;
            states.push((1, Some(cc.f_i)));
        }
        let points: Vec<usize> = if tc.label_points >= scene.cloud.len() {
            (0..scene.cloud.len()).collect()
        } else {
            fps_points_canonical(&scene.cloud.positions, tc.label_points)
        };
        let f_op = encode_small(
            &scene.cloud.positions[scene.p_op],
            SmallRole::Op,
            &w.enc_affordance,
        )?;
        for (state_idx, f_i) in &states {
            for &p in &points {
                let label_seed = seed.derive(sid as u64).derive(*state_idx).derive(p as u64);
                let label =
                    affordance_label(scene, sf, p, f_i.as_deref(), tc.n_dirs, tc.k_avg, label_seed, w)?;
                let row = assemble_input(
                    sf.afford_rows.row(scene.p_op),
                    sf.afford_rows.row(p),
                    &f_op,
                    f_i.as_deref(),
                    &w.heads.no_context,
                    &w.config,
                )?;
                items.push(LabelItem { row, label });
            }
        }
    }
    Ok(items)
}

/// Two-stage training. Stage 1 fits the scorer and the proposal cVAE
/// jointly on the recorded tuples; stage 2 freezes them, generates
/// affordance labels, and fits the affordance head. Every batch draw and
/// noise draw is seed-derived, so a rerun is bit-identical.
pub fn train(ds: &Dataset, tc: &TrainConfig) -> Result<(ModelWeights, Vec<LogRecord>)> {
    tc.validate()?;
    if ds.records.is_empty() {
        return Err(Error::invalid_argument("train: dataset has no records"));
    }
    for rec in &ds.records {
        if rec.scene_id as usize >= ds.scenes.len() {
            return Err(Error::invalid_argument("train: record points at a missing scene"));
        }
    }
    if !ds.records.iter().any(|r| r.r > 0.0) {
        return Err(Error::TrainingDegenerate(
            "no record carries a positive ground-truth score".into(),
        ));
    }

    let seed = SeedState::new(tc.seed.0, tc.seed.1);
    let mut w = ModelWeights::init(&tc.model, seed.derive(0))?;
    let feats = scene_feature_table(&ds.scenes, &w)?;
    let mut g = zero_grads(&w);
    let mut log = Vec::new();
    let n = ds.records.len();
    let scale = 1.0 / tc.batch_size as f64;

    let mut adam = Adam::new(tc.lr, tc.weight_decay, tc.lr_decay_factor, tc.lr_decay_every, tc.lr_floor);
    let mut noise = vec![0.0; tc.model.latent_dim];
    for step in 0..tc.stage1_steps {
        if adam.below_floor() {
            break;
        }
        let lr = adam.current_lr();
        let mut rng = seed.derive(1).derive(step as u64).rng();
        clear_grads(&mut g);
        let (mut sum_score, mut sum_dir, mut sum_kl) = (0.0, 0.0, 0.0);
        for _ in 0..tc.batch_size {
            let rec = &ds.records[rng.index(n)];
            rng.fill_gaussian(&mut noise);
            let scene = &ds.scenes[rec.scene_id as usize];
            let terms = stage1_record_backward(
                scene,
                &feats[rec.scene_id as usize],
                rec,
                &noise,
                &w,
                tc.lambda_dir,
                tc.lambda_kl,
                scale,
                &mut g,
            )?;
            sum_score += terms.score;
            sum_dir += terms.dir;
            sum_kl += terms.kl;
        }
        apply_step(&mut w, &mut g, &mut adam, &stage1_trainable);
        log.push(LogRecord {
            step: step as u64,
            stage: 1,
            loss_score: sum_score * scale,
            loss_dir: sum_dir * scale,
            loss_kl: sum_kl * scale,
            loss_afford: 0.0,
            lr,
        });
    }

    let items = build_label_items(ds, &feats, &w, tc, seed.derive(2))?;
    let mut adam2 = Adam::new(tc.lr, tc.weight_decay, tc.lr_decay_factor, tc.lr_decay_every, tc.lr_floor);
    for step in 0..tc.stage2_steps {
        if adam2.below_floor() {
            break;
        }
        let lr = adam2.current_lr();
        let mut rng = seed.derive(3).derive(step as u64).rng();
        clear_grads(&mut g);
        let mut sum_afford = 0.0;
        for _ in 0..tc.batch_size {
            let item = &items[rng.index(items.len())];
            sum_afford += affordance_item_backward(&item.row, item.label, &w, scale, &mut g)?;
        }
        apply_step(&mut w, &mut g, &mut adam2, &stage2_trainable);
        log.push(LogRecord {
            step: step as u64,
            stage: 2,
            loss_score: 0.0,
            loss_dir: 0.0,
            loss_kl: 0.0,
            loss_afford: sum_afford * scale,
            lr,
        });
    }

    Ok((w, log))
}

pub const ADAPT_STEPS: usize = 3;
pub const ADAPT_ONLINE: usize = 32;
pub const ADAPT_OFFLINE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub online_drawn: usize,
    pub offline_drawn: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub steps: Vec<AdaptStep>,
}

/// Online adaptation: exactly `ADAPT_STEPS` optimizer steps, each on
/// `ADAPT_ONLINE` records drawn with replacement from the current episode
/// plus `ADAPT_OFFLINE` drawn from the offline store, under the stage-1
/// losses at `lr * adapt_lr_scale`. The input weights are never mutated.
/// `offline_feats` must be the feature table of `offline.scenes` under the
/// same model lineage (the cloud encoders never train, so features survive
/// adaptation).
pub fn adapt_update(
    w: &ModelWeights,
    online: &[InteractionRecord],
    online_scene: &SceneInstance,
    offline: &Dataset,
    offline_feats: &[SceneFeatures],
    seed: SeedState,
    tc: &TrainConfig,
) -> Result<(ModelWeights, AdaptTrace)> {
    if online.is_empty() {
        return Err(Error::invalid_argument("adapt_update: no online records"));
    }
    if offline.records.is_empty() {
        return Err(Error::invalid_state("adapt_update: offline store is empty"));
    }
    if offline_feats.len() != offline.scenes.len() {
        return Err(Error::invalid_argument(
            "adapt_update: offline feature table is not scene-aligned",
        ));
    }
    for rec in &offline.records {
        if rec.scene_id as usize >= offline.scenes.len() {
            return Err(Error::invalid_argument("adapt_update: offline record points at a missing scene"));
        }
    }

    let mut out = w.clone();
    let online_feats = scene_features(online_scene, w)?;
    let mut adam = Adam::new(tc.lr * tc.adapt_lr_scale, tc.weight_decay, 1.0, u64::MAX, 0.0);
    let mut g = zero_grads(&out);
    let scale = 1.0 / (ADAPT_ONLINE + ADAPT_OFFLINE) as f64;
    let mut noise = vec![0.0; out.config.latent_dim];
    let mut steps = Vec::with_capacity(ADAPT_STEPS);
    for step in 0..ADAPT_STEPS {
        let mut rng = seed.derive(step as u64).rng();
        clear_grads(&mut g);
        let mut loss = 0.0;
        for _ in 0..ADAPT_ONLINE {
            let rec = &online[rng.index(online.len())];
            rng.fill_gaussian(&mut noise);
            let terms = stage1_record_backward(
                online_scene,
                &online_feats,
                rec,
                &noise,
                &out,
                tc.lambda_dir,
                tc.lambda_kl,
                scale,
                &mut g,
            )?;
            loss += terms.total();
        }
        for _ in 0..ADAPT_OFFLINE {
            let rec = &offline.records[rng.index(offline.records.len())];
            rng.fill_gaussian(&mut noise);
            let terms = stage1_record_backward(
                &offline.scenes[rec.scene_id as usize],
                &offline_feats[rec.scene_id as usize],
                rec,
                &noise,
                &out,
                tc.lambda_dir,
                tc.lambda_kl,
                scale,
                &mut g,
            )?;
            loss += terms.total();
        }
        apply_step(&mut out, &mut g, &mut adam, &stage1_trainable);
        steps.push(AdaptStep {
            online_drawn: ADAPT_ONLINE,
            offline_drawn: ADAPT_OFFLINE,
            loss: loss * scale,
        });
    }
    Ok((out, AdaptTrace { steps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_offline, CollectConfig};
    use crate::env::{generate_scene, DisplacementBundle, SupportAction, TaskType};

    fn tiny_model_config() -> ModelConfig {
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

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            model: tiny_model_config(),
            lr: 0.003,
            stage1_steps: 40,
            stage2_steps: 40,
            batch_size: 16,
            label_scenes: 4,
            label_points: 8,
            n_dirs: 8,
            k_avg: 4,
            seed: (11, 3),
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(task: TaskType, n_records: usize, seed: u64) -> Dataset {
        collect_offline(
            &CollectConfig {
                task,
                n_records,
                mix: 0.5,
                k_max: 5,
                n_points: 160,
                physics: None,
                alpha: 1.0,
                beta: 1.0,
                config_hash: "t".into(),
            },
            SeedState::new(seed, 0),
        )
        .unwrap()
    }

    /// Scoring head that ignores its input and outputs sigmoid(logit(v)).
    fn pin_scorer(w: &mut ModelWeights, v: f64) {
        let last = w.heads.scoring.layers.len() - 1;
        w.heads.scoring.layers[last].w.fill(0.0);
        w.heads.scoring.layers[last].b.fill((v / (1.0 - v)).ln());
    }

    #[test]
    fn gt_score_matches_hand_values() {
        assert_eq!(gt_score(0.0, 0.0, 1.0, 1.0), 1.0);
        assert_eq!(gt_score(1.0, 1.0, 1.0, 1.0), 0.0);
        assert!((gt_score(0.3, 0.2, 1.0, 1.0) - 0.5).abs() < 1e-12);
        let mut rng = SeedState::new(1, 0).rng();
        for _ in 0..1000 {
            let r = gt_score(rng.uniform() * 5.0, rng.uniform(), rng.uniform() * 3.0, rng.uniform() * 3.0);
            assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn scoring_loss_matches_hand_values() {
        assert_eq!(scoring_loss(0.4, 0.4), 0.0);
        assert_eq!(scoring_loss(0.0, 1.0), 1.0);
        assert!((scoring_loss(0.25, 0.75) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn proposal_loss_matches_closed_forms() {
        let d = [0.0, 0.0, 1.0];
        let zeros = vec![0.0; 4];
        assert_eq!(proposal_loss(d, d, &zeros, &zeros, 1.0, 1.0), 0.0);

        let anti = [0.0, 0.0, -1.0];
        let loss = proposal_loss(anti, d, &vec![0.3; 4], &vec![0.2; 4], 2.5, 0.0);
        assert!((loss - 5.0).abs() < 1e-12);

        let mu = vec![1.0; 128];
        let lv = vec![0.0; 128];
        let loss = proposal_loss(d, d, &mu, &lv, 0.0, 3.0);
        assert!((loss - 3.0 * 64.0).abs() < 1e-9);

        let mut rng = SeedState::new(2, 0).rng();
        for _ in 0..200 {
            let mut mu = vec![0.0; 6];
            let mut lv = vec![0.0; 6];
            rng.fill_gaussian(&mut mu);
            rng.fill_gaussian(&mut lv);
            let mut a = [rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5];
            a = vec3::unit(a, 1e-12).unwrap_or([0.0, 0.0, 1.0]);
            assert!(proposal_loss(a, d, &mu, &lv, 1.3, 0.7) >= 0.0);
        }
    }

    #[test]
    fn affordance_loss_matches_hand_values() {
        assert_eq!(affordance_loss(0.4, 0.4), 0.0);
        assert_eq!(affordance_loss(0.0, 1.0), 1.0);
        assert!((affordance_loss(0.2, 0.9) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn labels_follow_the_scorer() {
        let cfg = tiny_model_config();
        let mut w = ModelWeights::init(&cfg, SeedState::new(3, 0)).unwrap();
        let scene = generate_scene(TaskType::Screw, SeedState::new(4, 0), 128).unwrap();
        let feats = scene_features(&scene, &w).unwrap();
        let seed = SeedState::new(5, 1);

        pin_scorer(&mut w, 0.7);
        let label = affordance_label(&scene, &feats, 10, None, 16, 4, seed, &w).unwrap();
        assert!((label - 0.7).abs() < 1e-9);

        pin_scorer(&mut w, 0.3);
        let low = affordance_label(&scene, &feats, 10, None, 16, 4, seed, &w).unwrap();
        pin_scorer(&mut w, 0.6);
        let high = affordance_label(&scene, &feats, 10, None, 16, 4, seed, &w).unwrap();
        assert!(low < high, "a pointwise-dominating scorer must not lower a label");

        assert!(affordance_label(&scene, &feats, 10, None, 8, 9, seed, &w).is_err());
        assert!(affordance_label(&scene, &feats, 10, None, 0, 0, seed, &w).is_err());
    }

    #[test]
    fn label_equals_out_of_band_reenumeration() {
        let cfg = tiny_model_config();
        let w = ModelWeights::init(&cfg, SeedState::new(6, 0)).unwrap();
        let scene = generate_scene(TaskType::Push, SeedState::new(7, 0), 128).unwrap();
        let feats = scene_features(&scene, &w).unwrap();
        let (n_dirs, k_avg) = (12, 5);
        for &p in &[0usize, 17, 63] {
            let seed = SeedState::new(8, p as u64);
            let label = affordance_label(&scene, &feats, p, None, n_dirs, k_avg, seed, &w).unwrap();

            let cond = proposal_condition(&scene, &feats, p, None, &w).unwrap();
            let f_op = encode_small(&scene.cloud.positions[scene.p_op], SmallRole::Op, &w.enc_scoring).unwrap();
            let f_sp = encode_small(&scene.cloud.positions[p], SmallRole::Sp, &w.enc_scoring).unwrap();
            let mut rng = seed.rng();
            let mut z = vec![0.0; cfg.latent_dim];
            let mut scores = Vec::new();
            for _ in 0..n_dirs {
                rng.fill_gaussian(&mut z);
                let d = propose_decode(&z, &cond, &w.heads).unwrap();
                let f_d = encode_small(&d, SmallRole::Dir, &w.enc_scoring).unwrap();
                scores.push(
                    score_action(
                        feats.scoring_rows.row(scene.p_op),
                        feats.scoring_rows.row(p),
                        &f_op,
                        &f_sp,
                        &f_d,
                        &w.heads.no_context,
                        &w.heads,
                        &cfg,
                    )
                    .unwrap(),
                );
            }
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let expect = scores[..k_avg].iter().sum::<f64>() / k_avg as f64;
            assert!((label - expect).abs() < 1e-6);

            let mean = affordance_label(&scene, &feats, p, None, n_dirs, n_dirs, seed, &w).unwrap();
            let plain = scores.iter().sum::<f64>() / n_dirs as f64;
            assert!((mean - plain).abs() < 1e-9);
        }
    }

    fn fd_record() -> (SceneInstance, InteractionRecord) {
        let scene = generate_scene(TaskType::Screw, SeedState::new(9, 0), 128).unwrap();
        let d = vec3::unit([0.4, -0.2, -0.8], 1e-12).unwrap();
        let ctx_d = vec3::unit([-0.3, 0.1, -0.9], 1e-12).unwrap();
        let rec = InteractionRecord {
            scene_id: 0,
            episode_id: 0,
            step_index: 2,
            source: crate::data::SamplingSource::Random,
            p_op: scene.p_op as u32,
            action: SupportAction::new(11, d).unwrap(),
            bundle: DisplacementBundle { m: 0.01, translation: [0.01, 0.0, 0.0], rotation: [0.0; 3] },
            g_d: 0.25,
            g_c: 0.3,
            r: 0.45,
            context: vec![
                ContextFrame {
                    action: SupportAction::new(30, ctx_d).unwrap(),
                    bundle: DisplacementBundle {
                        m: 0.06,
                        translation: [0.0, 0.04, 0.0],
                        rotation: [0.02, 0.0, 0.0],
                    },
                },
                ContextFrame {
                    action: SupportAction::new(55, [0.0, 0.0, -1.0]).unwrap(),
                    bundle: DisplacementBundle {
                        m: 0.03,
                        translation: [0.0, 0.0, 0.02],
                        rotation: [0.0, 0.01, 0.0],
                    },
                },
            ],
        };
        (scene, rec)
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        let cfg = tiny_model_config();
        let mut w = ModelWeights::init(&cfg, SeedState::new(10, 0)).unwrap();
        let (scene, rec) = fd_record();
        let feats = scene_features(&scene, &w).unwrap();
        let mut noise = vec![0.0; cfg.latent_dim];
        SeedState::new(11, 0).rng().fill_gaussian(&mut noise);
        let (ld, lk) = (1.3, 0.7);

        let mut g = zero_grads(&w);
        stage1_record_backward(&scene, &feats, &rec, &noise, &w, ld, lk, 1.0, &mut g).unwrap();

        let objective = |w: &ModelWeights, feats: &SceneFeatures| {
            let mut scratch = zero_grads(w);
            stage1_record_backward(&scene, feats, &rec, &noise, w, ld, lk, 1.0, &mut scratch)
                .unwrap()
                .total()
        };

        let mut names = Vec::new();
        {
            let mut params = Vec::new();
            g.collect_params(&mut params);
            for (name, values) in params {
                if stage1_trainable(&name) {
                    names.push((name, values.len()));
                }
            }
        }
        let mut checked = 0usize;
        let mut grad_nonzero = 0usize;
        for (name, len) in names {
            for slot in (0..len).step_by(7) {
                let analytic = {
                    let mut params = Vec::new();
                    g.collect_params(&mut params);
                    params.iter().find(|(n, _)| *n == name).unwrap().1[slot]
                };
                let eps = 1e-5;
                let mut probe = |delta: f64| {
                    {
                        let mut params = Vec::new();
                        w.collect_params(&mut params);
                        params.iter_mut().find(|(n, _)| *n == name).unwrap().1[slot] += delta;
                    }
                    let v = objective(&w, &feats);
                    {
                        let mut params = Vec::new();
                        w.collect_params(&mut params);
                        params.iter_mut().find(|(n, _)| *n == name).unwrap().1[slot] -= delta;
                    }
                    v
                };
                let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < 1e-3,
                    "{name}[{slot}]: analytic {analytic}, fd {fd}"
                );
                checked += 1;
                if analytic.abs() > 1e-12 {
                    grad_nonzero += 1;
                }
            }
        }
        assert!(checked > 200, "sweep covered only {checked} slots");
        assert!(grad_nonzero * 2 > checked, "most stage-1 gradients should be live");
    }

    #[test]
    fn affordance_gradients_match_finite_differences() {
        let cfg = tiny_model_config();
        let mut w = ModelWeights::init(&cfg, SeedState::new(12, 0)).unwrap();
        let mut row = vec![0.0; cfg.per_point_input_dim()];
        SeedState::new(13, 0).rng().fill_gaussian(&mut row);
        let label = 0.8;

        let mut g = zero_grads(&w);
        affordance_item_backward(&row, label, &w, 1.0, &mut g).unwrap();

        let n_layers = w.heads.affordance.layers.len();
        for layer in 0..n_layers {
            let n_w = w.heads.affordance.layers[layer].w.len();
            for slot in (0..n_w).step_by(11) {
                let analytic = g.heads.affordance.layers[layer].w[slot];
                let eps = 1e-5;
                let mut probe = |delta: f64| {
                    w.heads.affordance.layers[layer].w[slot] += delta;
                    let mut scratch = zero_grads(&w);
                    let v = affordance_item_backward(&row, label, &w, 1.0, &mut scratch).unwrap();
                    w.heads.affordance.layers[layer].w[slot] -= delta;
                    v
                };
                let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < 1e-3,
                    "affordance[{layer}][{slot}]: analytic {analytic}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn training_runs_deterministically_and_learns() {
        let ds = tiny_dataset(TaskType::Screw, 120, 20);
        let tc = tiny_train_config();
        let (w1, log1) = train(&ds, &tc).unwrap();
        let (w2, log2) = train(&ds, &tc).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(log1, log2);

        let s1: Vec<&LogRecord> = log1.iter().filter(|r| r.stage == 1).collect();
        let s2: Vec<&LogRecord> = log1.iter().filter(|r| r.stage == 2).collect();
        assert_eq!(s1.len(), tc.stage1_steps);
        assert_eq!(s2.len(), tc.stage2_steps);
        let head = |rows: &[&LogRecord], f: &dyn Fn(&LogRecord) -> f64| {
            rows[..10].iter().map(|r| f(r)).sum::<f64>() / 10.0
        };
        let tail = |rows: &[&LogRecord], f: &dyn Fn(&LogRecord) -> f64| {
            rows[rows.len() - 10..].iter().map(|r| f(r)).sum::<f64>() / 10.0
        };
        let total1 = |r: &LogRecord| r.loss_score + r.loss_dir + r.loss_kl;
        assert!(
            tail(&s1, &total1) <= head(&s1, &total1) * 1.02,
            "stage-1 loss should trend down: head {} tail {}",
            head(&s1, &total1),
            tail(&s1, &total1)
        );
        assert!(
            tail(&s2, &|r| r.loss_afford) <= head(&s2, &|r| r.loss_afford) * 1.02,
            "stage-2 loss should trend down"
        );

        let init = ModelWeights::init(&tc.model, SeedState::new(tc.seed.0, tc.seed.1).derive(0)).unwrap();
        assert_eq!(w1.enc_affordance.cloud, init.enc_affordance.cloud);
        assert_eq!(w1.enc_scoring.cloud, init.enc_scoring.cloud);
        assert_ne!(w1.heads.scoring, init.heads.scoring);
        assert_ne!(w1.heads.affordance, init.heads.affordance);
    }

    #[test]
    fn training_rejects_empty_and_scoreless_datasets() {
        let tc = tiny_train_config();
        let mut ds = tiny_dataset(TaskType::Push, 40, 21);
        let empty = Dataset {
            manifest: ds.manifest.clone(),
            scenes: ds.scenes.clone(),
            records: Vec::new(),
        };
        assert!(matches!(train(&empty, &tc), Err(Error::InvalidArgument(_))));

        for rec in &mut ds.records {
            rec.r = 0.0;
        }
        assert!(matches!(train(&ds, &tc), Err(Error::TrainingDegenerate(_))));
    }

    #[test]
    fn adaptation_is_three_isolated_half_and_half_steps() {
        let tc = tiny_train_config();
        let offline = tiny_dataset(TaskType::Screw, 60, 22);
        let w = ModelWeights::init(&tc.model, SeedState::new(23, 0)).unwrap();
        let offline_feats = scene_feature_table(&offline.scenes, &w).unwrap();
        let online_scene = generate_scene(TaskType::Screw, SeedState::new(24, 0), 160).unwrap();
        let online: Vec<InteractionRecord> = offline.records[..3]
            .iter()
            .map(|r| InteractionRecord { scene_id: 0, ..r.clone() })
            .collect();

        let before = w.clone();
        let seed = SeedState::new(25, 0);
        let (adapted, trace) =
            adapt_update(&w, &online, &online_scene, &offline, &offline_feats, seed, &tc).unwrap();
        assert_eq!(w, before, "input weights must stay untouched");
        assert_eq!(trace.steps.len(), ADAPT_STEPS);
        for s in &trace.steps {
            assert_eq!(s.online_drawn, ADAPT_ONLINE);
            assert_eq!(s.offline_drawn, ADAPT_OFFLINE);
        }
        assert_ne!(adapted.heads.scoring, w.heads.scoring);
        assert_eq!(adapted.heads.affordance, w.heads.affordance);
        assert_eq!(adapted.enc_scoring.cloud, w.enc_scoring.cloud);

        let (again, _) =
            adapt_update(&w, &online, &online_scene, &offline, &offline_feats, seed, &tc).unwrap();
        assert_eq!(adapted, again);

        let mut frozen = tc.clone();
        frozen.lr = 0.0;
        let (null, _) =
            adapt_update(&w, &online, &online_scene, &offline, &offline_feats, seed, &frozen).unwrap();
        assert_eq!(null, w);

        let hollow = Dataset {
            manifest: offline.manifest.clone(),
            scenes: offline.scenes.clone(),
            records: Vec::new(),
        };
        assert!(matches!(
            adapt_update(&w, &online, &online_scene, &hollow, &offline_feats, seed, &tc),
            Err(Error::InvalidState(_))
        ));
        assert!(matches!(
            adapt_update(&w, &[], &online_scene, &offline, &offline_feats, seed, &tc),
            Err(Error::InvalidArgument(_))
        ));
    }
}
