//! Deterministic inputs shared by the benchmarks.

use caudr::data::{make_lodo_splits, Split, SynthConfig};
use caudr::spectrum::ImageTensor;
use caudr::tensor::Tensor;
use caudr::train::SpectralSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(
        size,
        size,
        (0..size * size * 3).map(|_| rng.random::<f32>()).collect(),
    )
    .expect("size is a multiple of 8")
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// A reduced copy of the canonical benchmark and its last leave-one-out split.
pub fn small_benchmark(n_per_cell: usize) -> (SpectralSet, Split) {
    let cfg = SynthConfig {
        n_per_cell,
        ..SynthConfig::canonical()
    };
    let data =
        SpectralSet::from_synthetic(&cfg.generate().expect("benchmark generates")).expect("decomposes");
    let split = make_lodo_splits(&data.domains())
        .expect("splits")
        .pop()
        .expect("one split per domain");
    (data, split)
}
