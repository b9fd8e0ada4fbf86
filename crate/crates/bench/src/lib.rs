//! Shared fixtures for the benchmarks.

use specprefetch::engine::{RunConfig, Scheme};
use specprefetch::model::ModelSpec;
use specprefetch::skew::skew_model;
use specprefetch::Model;

/// Skewed synthetic model of the given width with four heads.
pub fn skewed_model(layers: usize, model_dim: usize) -> Model {
    let spec = ModelSpec::new(layers, model_dim, 4).with_outliers(2, 5.0).with_seed(1);
    let model = Model::generate_synthetic(&spec).expect("valid spec");
    skew_model(&model, 2).expect("calibration succeeds")
}

pub fn config(scheme: Scheme, prompt_len: usize, gen_len: usize) -> RunConfig {
    RunConfig::new(scheme, prompt_len, gen_len)
}
