//! Synthetic assembly micro-world: procedural scenes, the quasi-static
//! displacement oracle, and the baseline support samplers.

pub mod oracle;
pub mod samplers;
pub mod scenes;

pub use oracle::{
    contact_valid, displacement_oracle, goal_delta, step_episode, DisplacementBundle, EpisodeResult,
};
pub use samplers::{
    heuristic_support, heuristic_support_capped, random_support, random_support_capped,
    HEURISTIC_PERTURB_CAP, RANDOM_PERTURB_CAP,
};
pub use scenes::{
    generate_scene, generate_scene_cfg, PhysicsOverride, PhysicsParams, SceneInstance,
    SupportAction, TaskType, Wrench,
};
