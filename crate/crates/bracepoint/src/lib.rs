//! Support-hand selection for dual-arm assembly at desk scale: a synthetic
//! quasi-static micro-world, per-point supportability learning, a conditional
//! direction proposer, certainty scoring, and interaction-history adaptation,
//! all deterministic under explicit seed streams.

pub mod config;
pub mod data;
pub mod encoders;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod nn;
pub mod policy;

pub use config::{parse_config_text, AppConfig, EnvSettings, EvalSettings};
pub use data::{
    collect_offline, load_checkpoint, load_dataset, merge_datasets, save_checkpoint, save_dataset,
    scene_digest, CollectConfig, ContextFrame, Dataset, DatasetManifest, InteractionRecord,
    SamplingSource,
};
pub use harness::{
    collect_online, compute_heatmap, context_from_frames, export_heatmap, heatmap_text,
    normalized_entropy, parse_heatmap, run_episode_closed_loop, run_eval, EpisodeLine,
    EpisodeOutcome, EvalConfig, EvalReport, EvalRow, LoopConfig, MethodSpec, RoundLog,
    ALL_METHODS,
};
pub use encoders::{assemble_input, encode_cloud, encode_small, EncoderWeights, ModelConfig, SmallRole};
pub use learning::{
    adapt_update, affordance_item_backward, affordance_label, affordance_loss, gt_score,
    kl_standard_normal, proposal_loss, scene_feature_table, scoring_loss, stage1_record_backward,
    train, zero_grads, AdaptTrace, LogRecord, StageOneTerms, TrainConfig,
};
pub use policy::{
    affordance_forward, affordance_map, aggregate_context, context_step, proposal_condition,
    propose_decode, propose_encode, scene_features, score_action, select_best, topk_candidates,
    ContextFrameFeature, HeadWeights, LatentCode, ModelWeights, SceneFeatures,
};

pub use env::{
    displacement_oracle, generate_scene, generate_scene_cfg, heuristic_support, random_support,
    step_episode, EpisodeResult, PhysicsOverride, PhysicsParams, SceneInstance, SupportAction,
    TaskType, Wrench,
};
pub use error::{Error, Result};
pub use geometry::{
    ball_query, farthest_point_sample, farthest_point_sample_canonical, pose_displacement,
    PointCloud, Pose, Prng, Quat, SeedState, Vec3,
};
