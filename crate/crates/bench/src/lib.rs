//! Fixtures shared by the kernel benchmarks.

use pmoe_core::data::Sample;
use pmoe_core::model::{init_params, Arch, Mode, ModelParams};
use pmoe_core::Rng;

/// Shape of a benchmark model: `k` experts, `m` neurons in total, `n`
/// patches of dimension `d`, `l` patches per expert.
#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub l: usize,
}

/// The collage geometry with two experts of 20 neurons.
pub const COLLAGE: Shape = Shape {
    k: 2,
    m: 40,
    d: 784,
    n: 16,
    l: 2,
};

/// Randomly initialized parameters (with random gating kernels so routing is
/// not degenerate) and a batch of `batch` random unit-patch samples.
pub fn fixture(mode: Mode, shape: Shape, batch: usize, seed: u64) -> (ModelParams, Vec<Sample>) {
    let arch = match mode {
        Mode::Cnn => Arch::cnn(shape.m, shape.d, shape.n),
        _ => Arch::pmoe(mode, shape.k, shape.m, shape.d, shape.n, shape.l),
    };
    let mut rng = Rng::new(seed);
    let mut params = init_params(&arch, &rng.fork("init")).expect("valid benchmark shape");
    if params.has_router() {
        params.gating_kernels = rng.normal_vec(params.gating_kernels.len(), 1.0);
    }
    let samples = (0..batch)
        .map(|i| Sample {
            patches: (0..shape.n).flat_map(|_| rng.unit_vector(shape.d)).collect(),
            dim: shape.d,
            label: if i % 2 == 0 { 1 } else { -1 },
            disc_index: 0,
        })
        .collect();
    (params, samples)
}
