//! Shared fixtures for the criterion benches in `benches/`.

use ncv_core::data::{generate_synthetic, DatasetBundle, Preset, SplitCounts};
use ncv_core::game::{Game, GameConfig};
use ncv_core::Tensor;

/// Deterministic dense matrix with entries in `[-1, 1]`.
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Tensor {
    Tensor::from_fn(&[rows, cols], |i| ((i as u64 * 2654435761 + salt) % 2001) as f64 / 1000.0 - 1.0)
}

pub fn hans3_bundle(train: usize) -> DatasetBundle {
    let p = Preset::Hans3Analog;
    generate_synthetic(&p.rules(), SplitCounts::new(train, train / 4, train / 4), 1.0, p.encoding(), 0)
        .expect("hans3 preset generates")
}

pub fn hans3_game(bundle: &DatasetBundle) -> Game {
    Game::for_bundle(GameConfig::hans_slot(), bundle).expect("default game fits hans3")
}
