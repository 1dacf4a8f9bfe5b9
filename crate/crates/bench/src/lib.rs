//! Shared fixtures for the benchmarks under `benches/`.

use akd_core::data::gen_two_moons;
use akd_core::{Dataset, Model, ModelSpec};

/// The desk-scale two-moons MLP and a batch of its training data.
pub fn moons_fixture(batch: usize) -> (Model, Dataset) {
    let data = gen_two_moons(batch, 0.05, 1).expect("moons");
    let model = Model::init(ModelSpec::mlp(2, &[64, 64], 2), 7).expect("model");
    (model, data)
}
