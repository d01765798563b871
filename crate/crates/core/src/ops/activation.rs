use crate::tensor::Scalar;

pub(crate) fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Evaluated on the branch that never exponentiates a positive argument.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax over contiguous rows of length `k`, with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    out
}

/// Log-softmax over rows of length `k`.
pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
