//! Max and average pooling. Max variants return the flat input index of every
//! selected element so backward can route gradients to it.

/// 2x2 windows, stride 2; a trailing odd row or column is dropped.
pub(crate) fn max_pool2x2<T: crate::Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Rows `[floor(i*H/h), ceil((i+1)*H/h))`, columns likewise.
pub(crate) fn adaptive_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub(crate) fn adaptive_max_pool<T: crate::Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            let (r0, r1) = adaptive_bounds(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bounds(j, w, ow);
                let mut best = base + r0 * w + c0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        let k = base + r * w + c;
                        if x[k] > x[best] {
                            best = k;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

pub(crate) fn global_max_pool<T: crate::Scalar>(x: &[T], planes: usize, hw: usize) -> (Vec<T>, Vec<usize>) {
    (0..planes)
        .map(|p| {
            let plane = &x[p * hw..(p + 1) * hw];
            let mut best = 0;
            for (k, &v) in plane.iter().enumerate().skip(1) {
                if v > plane[best] {
                    best = k;
                }
            }
            (plane[best], p * hw + best)
        })
        .unzip()
}

pub(crate) fn global_avg_pool<T: crate::Scalar>(x: &[T], planes: usize, hw: usize) -> Vec<T> {
    let scale = T::one() / T::of(hw as f64);
    x.chunks_exact(hw)
        .take(planes)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect()
}

pub(crate) fn scatter_max<T: crate::Scalar>(dy: &[T], idx: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i] = dx[i] + g;
    }
    dx
}
