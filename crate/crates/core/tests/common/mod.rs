#![allow(dead_code)]

use sbp_core::models::{
    MiniVideoTransformer, SttConfig, SttModel, TransformerConfig, VideoShape,
};
use sbp_core::tensor::Tensor;
use sbp_core::Rng;

pub type T64 = Tensor<f64>;

pub fn rel_err(a: &T64, b: &T64) -> f64 {
    let diff = a.sub(b).unwrap().norm();
    diff / a.norm().max(b.norm()).max(1e-30)
}

pub fn max_rel(a: &[T64], b: &[T64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}

pub fn max_abs(a: &[T64], b: &[T64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y).unwrap())
        .fold(0.0, f64::max)
}

pub fn transformer(frames: usize, grid: (usize, usize), heads: usize, head_dim: usize, layers: usize, seed: u64) -> MiniVideoTransformer<f64> {
    let cfg = TransformerConfig {
        video: VideoShape {
            channels: 2,
            frames,
            height: 2 * grid.0,
            width: 2 * grid.1,
        },
        grid,
        heads,
        head_dim,
        layers,
        classes: 3,
    };
    MiniVideoTransformer::new(cfg, &mut Rng::new(seed)).unwrap()
}

pub fn stt(frames: usize, chunk: usize, seed: u64) -> SttModel<f64> {
    let cfg = SttConfig {
        video: VideoShape {
            channels: 2,
            frames,
            height: 3,
            width: 3,
        },
        chunk,
        hidden: 12,
        heads: 2,
        head_dim: 4,
        classes: 3,
    };
    SttModel::new(cfg, &mut Rng::new(seed)).unwrap()
}

pub fn clips(shape: &VideoShape, count: usize, seed: u64) -> Vec<(T64, usize)> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| (T64::randn(shape.dims(), 1.0, &mut rng), i % 3))
        .collect()
}

pub fn as_batch(c: &[(T64, usize)]) -> Vec<(&T64, usize)> {
    c.iter().map(|(v, l)| (v, *l)).collect()
}
