//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::tensor::Scalar;

/// Saved state of a train-mode forward pass.
pub(crate) struct BnForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

fn for_channel<T: Scalar>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    ch: usize,
) -> impl Iterator<Item = (usize, T)> + '_ {
    (0..n).flat_map(move |s| {
        let base = (s * c + ch) * hw;
        (base..base + hw).map(move |i| (i, x[i]))
    })
}

pub(crate) fn bn_train_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let (n, c, hw) = dims;
    let m = T::of((n * hw) as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let mean = for_channel(x, dims, ch).map(|(_, v)| v).sum::<T>() / m;
        let var = for_channel(x, dims, ch)
            .map(|(_, v)| (v - mean) * (v - mean))
            .sum::<T>()
            / m;
        let istd = T::one() / (var + eps).sqrt();
        for (i, v) in for_channel(x, dims, ch) {
            let xh = (v - mean) * istd;
            xhat[i] = xh;
            out[i] = gamma[ch] * xh + beta[ch];
        }
        inv_std.push(istd);
        means.push(mean);
        vars.push(var);
    }
    BnForward {
        out,
        xhat,
        inv_std,
        mean: means,
        var: vars,
    }
}

/// Returns `(dx, dgamma, dbeta)` for the train-mode normalization.
pub(crate) fn bn_train_backward<T: Scalar>(
    dy: &[T],
    dims: (usize, usize, usize),
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = dims;
    let m = T::of((n * hw) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for (i, g) in for_channel(dy, dims, ch) {
            sum_dy = sum_dy + g;
            sum_dy_xhat = sum_dy_xhat + g * xhat[i];
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * inv_std[ch] / m;
        for (i, g) in for_channel(dy, dims, ch) {
            dx[i] = k * (m * g - sum_dy - xhat[i] * sum_dy_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn bn_eval_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (_, c, _) = dims;
    let inv_std: Vec<T> = (0..c)
        .map(|ch| T::one() / (running_var[ch] + eps).sqrt())
        .collect();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ch in 0..c {
        for (i, v) in for_channel(x, dims, ch) {
            let xh = (v - running_mean[ch]) * inv_std[ch];
            xhat[i] = xh;
            out[i] = gamma[ch] * xh + beta[ch];
        }
    }
    (out, xhat, inv_std)
}

pub(crate) fn bn_eval_backward<T: Scalar>(
    dy: &[T],
    dims: (usize, usize, usize),
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (_, c, _) = dims;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for (i, g) in for_channel(dy, dims, ch) {
            dgamma[ch] = dgamma[ch] + g * xhat[i];
            dbeta[ch] = dbeta[ch] + g;
            dx[i] = g * gamma[ch] * inv_std[ch];
        }
    }
    (dx, dgamma, dbeta)
}
