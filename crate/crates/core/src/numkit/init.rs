use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Normal(0, std²) truncated to ±2·std by resampling.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized from shape")
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

pub fn ones(shape: Vec<usize>) -> Tensor<f32> {
    let numel = shape.iter().product();
    Tensor::new(shape, vec![1.0; numel]).expect("sized from shape")
}
