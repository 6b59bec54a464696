use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::numerics::{ParamId, Params, Real, Tensor};

/// Registers a trainable tensor with entries drawn from `U(-bound, bound)`.
pub(crate) fn uniform<T: Real, R: Rng>(
    params: &mut Params<T>,
    name: String,
    shape: Vec<usize>,
    bound: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let n = shape.iter().product();
    let data = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..n).map(|_| T::lit(dist.sample(rng))).collect()
    } else {
        vec![T::zero(); n]
    };
    params.add(name, Tensor::new(shape, data)?.with_grad())
}

pub(crate) fn normal<T: Real, R: Rng>(
    params: &mut Params<T>,
    name: String,
    shape: Vec<usize>,
    std: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("non-negative std");
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    params.add(name, Tensor::new(shape, data)?.with_grad())
}
