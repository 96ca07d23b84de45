//! Shared fixtures for the benchmarks.

use kvcomp_core::numerics::seeded_random_matrix;
use kvcomp_core::{GQAModel, HeadScoreTable, Matrix, ModelConfig};

pub struct Fixture {
    pub model: GQAModel,
    pub prompt: Matrix,
    pub table: HeadScoreTable,
}

/// A seeded 2-layer model with 8 query heads over 2 KV groups and a random
/// prompt of `n` rows.
pub fn fixture(n: usize) -> Fixture {
    let model = GQAModel::seeded(ModelConfig::new(2, 8, 2, 16, 7).unwrap()).unwrap();
    let prompt = seeded_random_matrix(n, model.config().hidden_dim, 11, 1.0).unwrap();
    let scores = seeded_random_matrix(2, 8, 13, 1.0).unwrap();
    let table = HeadScoreTable::from_scores(
        scores.row_iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect(),
        vec![vec![0.0; 8]; 2],
    )
    .unwrap();
    Fixture { model, prompt, table }
}
