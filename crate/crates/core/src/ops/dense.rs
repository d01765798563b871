use crate::tensor::Scalar;

/// `y[N,K] = x[N,D] * w[K,D]^T + b[K]`.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, d: usize, k: usize) -> Vec<T> {
    let mut y: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    T::gemm(n, d, k, T::one(), x, (d, 1), w, (1, d), T::one(), &mut y, (k, 1));
    y
}

/// Returns `(dx, dw, db)`; `dx` is skipped when the input needs no gradient.
pub(crate) fn dense_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    (n, d, k): (usize, usize, usize),
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(n, k, d, T::one(), dy, (k, 1), w, (d, 1), T::zero(), &mut dx, (d, 1));
        dx
    });
    let mut dw = vec![T::zero(); k * d];
    T::gemm(k, n, d, T::one(), dy, (1, k), x, (d, 1), T::zero(), &mut dw, (d, 1));
    let db = (0..k).map(|j| (0..n).map(|i| dy[i * k + j]).sum()).collect();
    (dx, dw, db)
}
