//! Shared fixtures for the criterion benches.

use acsac_core::envs::generate_offline_data;
use acsac_core::train::{RunConfig, RunState};

/// Default desk config with a dataset small enough to build quickly.
pub fn bench_config() -> RunConfig {
    RunConfig {
        dataset_episodes: 50,
        ..RunConfig::default()
    }
}

/// Freshly initialized run state for `config`.
pub fn fixture_run(config: RunConfig) -> RunState {
    let maze = config.maze().expect("valid maze");
    let data = generate_offline_data(&maze, &config.behavior, config.data_seed(), config.dataset_episodes);
    RunState::new(config, data).expect("valid run")
}
