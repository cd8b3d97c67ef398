//! Reference implementations written without the library's helpers.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Exp1, Normal, StudentT};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Half away from zero via truncation; exact for every finite input.
pub fn round_ref(x: f64) -> f64 {
    let t = x.trunc();
    if (x - t).abs() >= 0.5 {
        t + x.signum()
    } else {
        t
    }
}

pub fn range_ref(bits: u32, signed: bool) -> (f64, f64) {
    if signed {
        let h = 2f64.powi(bits as i32 - 1);
        (1.0 - h, h - 1.0)
    } else {
        (0.0, 2f64.powi(bits as i32) - 1.0)
    }
}

pub fn code_ref(x: f64, step: f64, lo: f64, hi: f64) -> f64 {
    round_ref(x / step).max(lo).min(hi)
}

pub fn quantize_ref(w: &[f64], step: f64, lo: f64, hi: f64) -> Vec<f64> {
    w.iter().map(|&x| step * code_ref(x, step, lo, hi)).collect()
}

pub fn msqe_ref(w: &[f64], step: f64, lo: f64, hi: f64, f: Option<&[f64]>) -> f64 {
    w.iter()
        .enumerate()
        .map(|(i, &x)| {
            let r = step * code_ref(x, step, lo, hi) - x;
            f.map_or(1.0, |f| f[i]) * r * r
        })
        .sum()
}

/// Exponent in `candidates` with the lowest error; first (smallest) wins ties.
pub fn argmin_exponent(
    w: &[f64],
    candidates: impl IntoIterator<Item = i32>,
    lo: f64,
    hi: f64,
    f: Option<&[f64]>,
) -> i32 {
    let mut best = (f64::INFINITY, i32::MIN);
    for e in candidates {
        let err = msqe_ref(w, 2f64.powi(e), lo, hi, f);
        if err < best.0 {
            best = (err, e);
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy)]
pub enum Dist {
    Gaussian,
    Uniform,
    Laplace,
    StudentT3,
    Cauchy,
}

pub const DISTS: [Dist; 5] = [
    Dist::Gaussian,
    Dist::Uniform,
    Dist::Laplace,
    Dist::StudentT3,
    Dist::Cauchy,
];

pub fn sample(rng: &mut ChaCha8Rng, dist: Dist, n: usize, scale: f64) -> Vec<f64> {
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        match dist {
            Dist::Gaussian => Normal::new(0.0, 1.0).unwrap().sample(rng),
            Dist::Uniform => rng.random_range(-1.0..1.0),
            Dist::Laplace => {
                let e: f64 = Exp1.sample(rng);
                if rng.random::<bool>() { e } else { -e }
            }
            Dist::StudentT3 => StudentT::new(3.0).unwrap().sample(rng),
            Dist::Cauchy => Cauchy::new(0.0, 1.0).unwrap().sample(rng),
        }
    };
    (0..n).map(|_| scale * draw(rng)).collect()
}

pub fn population_variance_ref(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}
