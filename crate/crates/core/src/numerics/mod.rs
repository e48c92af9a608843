//! Dense numerics: the velocity-field MLP, its analytic gradients, a
//! finite-difference oracle, AdamW and the checkpoint codec.

mod adam;
mod checkpoint;
mod grad;
mod mlp;

pub use adam::OptimState;
pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use grad::ensure_finite;
pub use grad::{finite_diff_check, loss_value_and_grad, Objective};
pub use mlp::{mlp_forward, mlp_init, ForwardCache, MlpSpec, Model, ParamVector, VelocityField};

/// Pairwise summation in index order. Bit-stable for a fixed input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Runs `item(i, grad_buf)` for `i in 0..n` and returns the per-item values
/// plus the summed gradient.
///
/// Items are grouped into fixed-size chunks; each chunk accumulates
/// sequentially and chunk gradients are reduced in index order, so the
/// result does not depend on the worker count.
pub(crate) fn accumulate_grad<V, F>(
    n: usize,
    n_params: usize,
    item: F,
) -> crate::Result<(Vec<V>, Vec<f64>)>
where
    V: Send,
    F: Fn(usize, &mut [f64]) -> crate::Result<V> + Sync,
{
    use rayon::prelude::*;
    const CHUNK: usize = 16;
    let chunks: Vec<(Vec<V>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut grad = vec![0.0; n_params];
            let mut vals = Vec::with_capacity(CHUNK);
            for i in ci * CHUNK..((ci + 1) * CHUNK).min(n) {
                vals.push(item(i, &mut grad)?);
            }
            Ok((vals, grad))
        })
        .collect::<crate::Result<_>>()?;
    let mut values = Vec::with_capacity(n);
    let mut grad = vec![0.0; n_params];
    for (vals, g) in chunks {
        values.extend(vals);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((values, grad))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_small_ints() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
