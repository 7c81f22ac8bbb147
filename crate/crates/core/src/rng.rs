//! Seeded randomness. Every consumer derives its own Xoshiro256++ stream from
//! the run seed plus a label, so the values a component draws do not depend
//! on which other components exist or in which order they were built.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::Tensor;

pub type Rng = Xoshiro256PlusPlus;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(seed ^ fnv1a64(label.as_bytes()))
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("positive std");
        t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    }
    t
}

pub fn uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    Uniform::new(lo, hi).sample(rng)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}
