//! Host wall-clock measurements: the masked gate/down kernel against its
//! dense counterpart, and a linear fit of expert compute time for the
//! simulator.

use std::hint::black_box;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::la::{combine_columns, gemv, gemv_columns, gemv_t, silu_scalar, Matrix, Order};
use crate::model::CompressedExpert;
use crate::offload::ComputeModel;
use crate::quant::qgemv;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelBench {
    pub d_hidden: usize,
    pub d_intermediate: usize,
    pub active: usize,
    /// Best of the repetitions, seconds.
    pub dense_s: f64,
    pub masked_s: f64,
}

impl KernelBench {
    pub fn speedup(&self) -> f64 {
        self.dense_s / self.masked_s
    }

    pub fn csv(&self) -> String {
        format!(
            "d_hidden,d_intermediate,active,dense_s,masked_s,speedup\n{},{},{},{},{},{}\n",
            self.d_hidden,
            self.d_intermediate,
            self.active,
            self.dense_s,
            self.masked_s,
            self.speedup()
        )
    }
}

fn best_of(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, Order::ColMajor, |_, _| rng.random_range(-1.0f32..1.0))
}

/// Times gate and down over all channels against the same two
/// projections over a random `1 - sparsity` share of them.
pub fn bench_masked_kernel(
    d_hidden: usize,
    d_intermediate: usize,
    sparsity: f64,
    reps: usize,
    seed: u64,
) -> Result<KernelBench> {
    if !(0.0..1.0).contains(&sparsity) || reps == 0 || d_hidden == 0 || d_intermediate == 0 {
        return Err(Error::invalid(
            "bench needs sparsity in [0, 1), reps >= 1 and nonzero dims",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gate = uniform_matrix(d_hidden, d_intermediate, &mut rng);
    let down_t = uniform_matrix(d_hidden, d_intermediate, &mut rng);
    let x: Vec<f32> = (0..d_hidden).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let active_n = (((1.0 - sparsity) * d_intermediate as f64).round() as usize).max(1);
    let mut active = sample(&mut rng, d_intermediate, active_n).into_vec();
    active.sort_unstable();

    let dense_s = best_of(reps, || {
        let g = gemv(&gate, black_box(&x)).expect("shapes agree");
        let a: Vec<f32> = g.iter().map(|&v| silu_scalar(v)).collect();
        black_box(gemv_t(&down_t, &a).expect("shapes agree"));
    });
    let masked_s = best_of(reps, || {
        let g = gemv_columns(&gate, black_box(&x), &active).expect("shapes agree");
        let a: Vec<f32> = g.iter().map(|&v| silu_scalar(v)).collect();
        black_box(combine_columns(&down_t, &a, &active).expect("shapes agree"));
    });
    Ok(KernelBench {
        d_hidden,
        d_intermediate,
        active: active_n,
        dense_s,
        masked_s,
    })
}

/// Least-squares fit of `c0 + c1·flops` to the sparse expert pass on this
/// host, over kept fractions from 10% to 100%.
pub fn fit_compute_model(e: &CompressedExpert, reps: usize, seed: u64) -> Result<ComputeModel> {
    if reps == 0 {
        return Err(Error::invalid("reps must be >= 1"));
    }
    let (dh, di) = (e.d_hidden(), e.d_intermediate());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f32> = (0..dh).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut pts = Vec::new();
    for tenth in 1..=10 {
        let n = (di * tenth).div_ceil(10);
        let cols: Vec<usize> = (0..n).collect();
        let t = best_of(reps, || {
            let v = qgemv(e.up_q(), black_box(&x)).expect("shapes agree");
            let g = gemv_columns(e.gate(), &x, &cols).expect("shapes agree");
            let a: Vec<f32> = g.iter().zip(&cols).map(|(&gv, &c)| silu_scalar(gv) * v[c]).collect();
            black_box(combine_columns(e.down_t(), &a, &cols).expect("shapes agree"));
        });
        pts.push((ComputeModel::expert_flops(dh, di, n), t));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let c1 = (sxy / sxx).max(f64::MIN_POSITIVE);
    let c0 = (my - c1 * mx).max(0.0);
    ComputeModel::new(c0, c1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compress_expert, ExpertWeights};
    use crate::quant::QuantConfig;

    #[test]
    fn small_bench_runs() {
        let b = bench_masked_kernel(32, 128, 0.9, 3, 1).unwrap();
        assert_eq!(b.active, 13);
        assert!(b.dense_s > 0.0 && b.masked_s > 0.0);
        assert_eq!(b.csv().lines().count(), 2);
        assert!(bench_masked_kernel(32, 128, 1.0, 3, 1).is_err());
    }

    #[test]
    fn compute_fit_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = ExpertWeights::random(64, 256, 0.1, 1.0, &mut rng);
        let c = compress_expert(&e, &QuantConfig::new(4, 64), 0.0).unwrap();
        let m = fit_compute_model(&c, 3, 0).unwrap();
        assert!(m.c0 >= 0.0 && m.c1 > 0.0);
    }
}
