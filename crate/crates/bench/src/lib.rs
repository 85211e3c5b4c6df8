//! Shared fixtures for the benchmark targets.
//!
//! The benches compare the ungated reference forward against the sliced,
//! gathered execution path at various widths, so the fixtures build a model
//! whose routers actually produce mixed decisions instead of the all-on
//! pattern a freshly initialized model starts from.

use dydit_core::dit::{DitModel, ModelConfig};
use dydit_core::rng::seeded_standard_normal;
use dydit_core::routing::ProtectionIndex;
use dydit_core::Tensor;

/// The benchmark model: desk-scale, two blocks, 16 tokens.
pub fn bench_config() -> ModelConfig {
    ModelConfig::toy()
}

/// A model whose width routers are spread around the decision boundary and
/// whose token routers sit at zero bias, so routed execution drops roughly
/// half the units and half the tokens instead of keeping everything.
pub fn routed_model(seed: u64) -> DitModel {
    let cfg = bench_config();
    let mut model = DitModel::init(cfg, seed).expect("valid benchmark config");
    let mut stream = 1u64;
    let mut draw = |n: usize, scale: f32| -> Vec<f32> {
        stream += 1;
        seeded_standard_normal(seed ^ (stream * 0x9e37_79b9), n)
            .into_iter()
            .map(|v| v * scale)
            .collect()
    };
    for block in &mut model.blocks {
        block.router_head.bias = Tensor::from_vec(&[1, cfg.heads], draw(cfg.heads, 1.5))
            .expect("bias shape")
            .with_requires_grad(true);
        block.router_channel.bias = Tensor::from_vec(&[1, cfg.groups()], draw(cfg.groups(), 1.5))
            .expect("bias shape")
            .with_requires_grad(true);
        block.router_token.bias = Tensor::from_vec(&[1, 1], vec![0.0])
            .expect("bias shape")
            .with_requires_grad(true);
        block.router_token.weight =
            Tensor::from_vec(&[cfg.channels, 1], draw(cfg.channels, 0.5))
                .expect("weight shape")
                .with_requires_grad(true);
    }
    model
}

/// The protection index the routed benches run under.
pub fn protection(model: &DitModel) -> ProtectionIndex {
    model.rank_protection().expect("protection ranking")
}

/// A deterministic synthetic input image for the benchmark model.
pub fn bench_image(seed: u64) -> Vec<f32> {
    seeded_standard_normal(seed, bench_config().image_len())
}

/// Per-layer width choices keeping the first half of heads and groups.
pub fn half_widths(model: &DitModel) -> Vec<(Vec<usize>, Vec<usize>)> {
    let cfg = &model.config;
    (0..cfg.layers)
        .map(|_| {
            (
                (0..cfg.heads.div_ceil(2)).collect(),
                (0..cfg.groups().div_ceil(2)).collect(),
            )
        })
        .collect()
}
