//! Shared fixtures for the criterion benches.

use bqn_core::bits::{pack_bits, BitTensor};
use bqn_core::network::presets::Preset;
use bqn_core::network::{argmax, BinarizedNetwork};
use bqn_core::verifier::{InputSet, Norm, OutputProperty};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_signs(n: usize, rng: &mut impl Rng) -> BitTensor {
    let signs: Vec<i8> = (0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
    pack_bits(&signs).expect("signs pack")
}

pub fn preset_net(preset: Preset, actions: usize, seed: u64) -> BinarizedNetwork {
    let input = preset.default_input();
    let specs = preset.layers(input, actions).expect("preset fits its default input");
    BinarizedNetwork::random(input, &specs, Default::default(), &mut rng(seed)).expect("random init")
}

/// A sparse binary frame stack, like a Catch observation.
pub fn sparse_frame(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..len).map(|_| if rng.random_bool(0.05) { 1.0 } else { 0.0 }).collect()
}

/// Robustness query on a bqn-small network around a sparse frame.
pub fn small_query(epsilon: f64, norm: Norm, seed: u64) -> (BinarizedNetwork, InputSet, OutputProperty) {
    let net = preset_net(Preset::BqnSmall, 3, seed);
    let mut r = rng(seed ^ 0x5eed);
    let center = sparse_frame(net.input_shape().len(), &mut r);
    let target = argmax(&net.forward(&center).expect("forward"));
    let set = InputSet::new(center, epsilon, norm).expect("valid set");
    (net, set, OutputProperty::new(target))
}
