//! Deterministic fixtures for the pipeline benchmarks: a small-profile
//! model, one screw scene at eval point count, and an offline record pool.

use bracepoint::{
    collect_offline, CollectConfig, Dataset, ModelConfig, ModelWeights, SceneInstance, SeedState,
    TaskType, TrainConfig,
};

pub const BENCH_POINTS: usize = 192;

pub fn bench_train_config() -> TrainConfig {
    TrainConfig { model: ModelConfig::small_profile(), ..TrainConfig::default() }
}

pub fn bench_weights(tc: &TrainConfig) -> ModelWeights {
    ModelWeights::init(&tc.model, SeedState::new(17, 3)).expect("small profile is valid")
}

pub fn bench_scene() -> SceneInstance {
    bracepoint::generate_scene(TaskType::Screw, SeedState::new(23, 1), BENCH_POINTS)
        .expect("scene generates")
}

pub fn bench_pool(records: usize) -> Dataset {
    let cc = CollectConfig {
        task: TaskType::Screw,
        n_points: BENCH_POINTS,
        n_records: records,
        mix: 0.5,
        k_max: 3,
        alpha: 1.0,
        beta: 1.0,
        physics: None,
        config_hash: String::new(),
    };
    collect_offline(&cc, SeedState::new(29, 5)).expect("pool collects")
}
