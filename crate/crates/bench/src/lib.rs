//! Shared fixtures for the benchmarks.

use std::collections::BTreeMap;

use fedlora_core::{ClientUpdate, ClientWeights, DenseMatrix, LoraPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER: &str = "linear";

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `clients` uploads of one `k×d` layer with rank-`r` adapters.
pub fn updates(clients: usize, k: usize, d: usize, r: usize, seed: u64) -> Vec<ClientUpdate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clients)
        .map(|u| {
            let a = random_matrix(r, d, &mut rng);
            let b = random_matrix(k, r, &mut rng);
            let pair = LoraPair::new(a, b, 2.0 * r as f64).expect("consistent shapes");
            ClientUpdate {
                client_id: format!("client{u}"),
                adapters: BTreeMap::from([(LAYER.to_string(), pair)]),
                sample_count: 100,
            }
        })
        .collect()
}

pub fn uniform(clients: usize) -> ClientWeights {
    ClientWeights::uniform(clients)
}
