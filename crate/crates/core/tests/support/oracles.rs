//! Brute-force loop references for the tensor ops and the accuracy
//! indicators, plus random-shape drivers comparing them with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssatt::metrics::ConfusionMatrix;
use ssatt::{ConvGeometry, Tape, Tensor};

pub fn conv2d(
    x: &[f64],
    [n, ci, h, w]: [usize; 4],
    k: &[f64],
    [co, _, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    pad: (usize, usize),
    stride: (usize, usize),
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride.0 + u) as isize - pad.0 as isize;
                                let q = (j * stride.1 + v) as isize - pad.1 as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * ci + c) * h + r as usize) * w + q as usize];
                                acc += xv * k[((o * ci + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((s * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

/// Zero-padded cross-correlation along channels, centered kernel.
pub fn conv1d_channels(x: &[f64], n: usize, c: usize, k: &[f64], bias: f64) -> Vec<f64> {
    let half = (k.len() / 2) as isize;
    let mut out = vec![0.0; n * c];
    for s in 0..n {
        for o in 0..c {
            let mut acc = bias;
            for (t, &kt) in k.iter().enumerate() {
                let src = o as isize + t as isize - half;
                if (0..c as isize).contains(&src) {
                    acc += kt * x[s * c + src as usize];
                }
            }
            out[s * c + o] = acc;
        }
    }
    out
}

/// Maximum over the window rows `r0..r1`, columns `c0..c1` of one plane.
fn window_max(plane: &[f64], w: usize, (r0, r1): (usize, usize), (c0, c1): (usize, usize)) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for r in r0..r1 {
        for c in c0..c1 {
            m = m.max(plane[r * w + c]);
        }
    }
    m
}

/// 2x2 windows with stride 2; a trailing odd row or column is dropped.
pub fn max_pool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                out.push(window_max(plane, w, (2 * i, 2 * i + 2), (2 * j, 2 * j + 2)));
            }
        }
    }
    out
}

/// Cell `i` of `t` over an extent `n` covers `floor(i n / t) .. ceil((i + 1) n / t)`.
pub fn adaptive_max_pool(x: &[f64], planes: usize, (h, w): (usize, usize), (th, tw): (usize, usize)) -> Vec<f64> {
    let bounds = |i: usize, n: usize, t: usize| ((i * n) / t, ((i + 1) * n).div_ceil(t));
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..th {
            for j in 0..tw {
                out.push(window_max(plane, w, bounds(i, h, th), bounds(j, w, tw)));
            }
        }
    }
    out
}

pub fn global_max(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes).map(|p| x[p * hw..(p + 1) * hw].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

pub fn global_avg(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes).map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

/// `x[n, d] w[k, d]^T + b[k]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for s in 0..n {
        for o in 0..k {
            let mut acc = b[o];
            for i in 0..d {
                acc += x[s * d + i] * w[o * d + i];
            }
            out[s * k + o] = acc;
        }
    }
    out
}

/// `f[n, c, h, w]` times a channel map `[n, c, 1, 1]` or a spatial map `[n, 1, h, w]`.
pub fn broadcast_mul(f: &[f64], [n, c, h, w]: [usize; 4], m: &[f64], channel: bool) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for s in 0..n {
        for ch in 0..c {
            for r in 0..h {
                for q in 0..w {
                    let i = ((s * c + ch) * h + r) * w + q;
                    let g = if channel { m[s * c + ch] } else { m[(s * h + r) * w + q] };
                    out[i] = f[i] * g;
                }
            }
        }
    }
    out
}

/// Reference indicators from a row-major count table (row = truth).
pub struct MetricOracle {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub f1: f64,
}

pub fn metrics(k: usize, counts: &[u64]) -> MetricOracle {
    let x = |i: usize, j: usize| counts[i * k + j] as f64;
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    let rows: Vec<f64> = (0..k).map(|i| (0..k).map(|j| x(i, j)).sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| x(i, j)).sum()).collect();
    let diag: f64 = (0..k).map(|i| x(i, i)).sum();
    let present: Vec<usize> = (0..k).filter(|&i| rows[i] > 0.0).collect();
    let aa = present.iter().map(|&i| x(i, i) / rows[i]).sum::<f64>() / present.len() as f64;
    let chance: f64 = (0..k).map(|i| rows[i] * cols[i]).sum();
    let kappa = if chance == n * n { 0.0 } else { (n * diag - chance) / (n * n - chance) };
    let f1 = present
        .iter()
        .map(|&i| {
            let denom = rows[i] + cols[i];
            if denom == 0.0 {
                0.0
            } else {
                2.0 * x(i, i) / denom
            }
        })
        .sum::<f64>()
        / present.len() as f64;
    MetricOracle {
        oa: diag / n,
        aa,
        kappa,
        f1,
    }
}

fn randn(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "output sizes differ");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn leaf(t: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> ssatt::Var {
    t.leaf(Tensor::new(shape.to_vec(), data).expect("shape matches data"), false)
}

/// Largest absolute library-vs-oracle difference per op over `shapes`
/// random shapes each.
pub fn op_discrepancies(shapes: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, f64)> = [
        "conv2d",
        "conv1d_cross_channel",
        "max_pool2d",
        "adaptive_max_pool2d",
        "global_max_pool",
        "global_avg_pool",
        "dense",
        "broadcast_mul",
    ]
    .into_iter()
    .map(|n| (n, 0.0))
    .collect();
    let mut note = |name: &str, d: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).expect("known op");
        slot.1 = slot.1.max(d);
    };
    for _ in 0..shapes {
        let mut t = Tape::<f64>::new();

        let (n, ci, co) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let pad = (rng.random_range(0..=2), rng.random_range(0..=2));
        let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
        let kh = rng.random_range(1..=(h + 2 * pad.0).min(5));
        let kw = rng.random_range(1..=(w + 2 * pad.1).min(5));
        let (xv, kv, bv) = (randn(&mut rng, n * ci * h * w), randn(&mut rng, co * ci * kh * kw), randn(&mut rng, co));
        let use_bias = rng.random_bool(0.5);
        let x = leaf(&mut t, &[n, ci, h, w], xv.clone());
        let k = leaf(&mut t, &[co, ci, kh, kw], kv.clone());
        let b = leaf(&mut t, &[co], bv.clone());
        let y = t.conv2d(x, k, use_bias.then_some(b), ConvGeometry { pad, stride }).expect("conv2d");
        let (want, shape) = conv2d(&xv, [n, ci, h, w], &kv, [co, ci, kh, kw], use_bias.then_some(&bv), pad, stride);
        assert_eq!(t.shape(y), &shape);
        note("conv2d", max_abs_diff(t.value(y).data(), &want));

        let c = rng.random_range(1..=12);
        let klen = 2 * rng.random_range(0..c) + 1;
        let (xv, kv, bias) = (randn(&mut rng, n * c), randn(&mut rng, klen), rng.random_range(-1.0..1.0));
        let x = leaf(&mut t, &[n, c, 1, 1], xv.clone());
        let k = leaf(&mut t, &[klen], kv.clone());
        let b = leaf(&mut t, &[1], vec![bias]);
        let y = t.conv1d_channels(x, k, b).expect("conv1d");
        note("conv1d_cross_channel", max_abs_diff(t.value(y).data(), &conv1d_channels(&xv, n, c, &kv, bias)));

        let (ph, pw) = (rng.random_range(2..=11), rng.random_range(2..=11));
        let xv = randn(&mut rng, n * ci * ph * pw);
        let x = leaf(&mut t, &[n, ci, ph, pw], xv.clone());
        let y = t.max_pool2d(x).expect("max_pool2d");
        note("max_pool2d", max_abs_diff(t.value(y).data(), &max_pool2x2(&xv, n * ci, ph, pw)));
        let target = (rng.random_range(1..=ph), rng.random_range(1..=pw));
        let y = t.adaptive_max_pool2d(x, target).expect("adaptive_max_pool2d");
        note(
            "adaptive_max_pool2d",
            max_abs_diff(t.value(y).data(), &adaptive_max_pool(&xv, n * ci, (ph, pw), target)),
        );
        let y = t.global_max_pool(x).expect("global_max_pool");
        note("global_max_pool", max_abs_diff(t.value(y).data(), &global_max(&xv, n * ci, ph * pw)));
        let y = t.global_avg_pool(x).expect("global_avg_pool");
        note("global_avg_pool", max_abs_diff(t.value(y).data(), &global_avg(&xv, n * ci, ph * pw)));

        let (d, k_out) = (rng.random_range(1..=40), rng.random_range(1..=8));
        let (xv, wv, bv) = (randn(&mut rng, n * d), randn(&mut rng, k_out * d), randn(&mut rng, k_out));
        let x = leaf(&mut t, &[n, d], xv.clone());
        let wt = leaf(&mut t, &[k_out, d], wv.clone());
        let b = leaf(&mut t, &[k_out], bv.clone());
        let y = t.dense(x, wt, b).expect("dense");
        note("dense", max_abs_diff(t.value(y).data(), &dense(&xv, &wv, &bv, n, d, k_out)));

        let fv = randn(&mut rng, n * ci * ph * pw);
        let f = leaf(&mut t, &[n, ci, ph, pw], fv.clone());
        let channel = rng.random_bool(0.5);
        let mshape = if channel { [n, ci, 1, 1] } else { [n, 1, ph, pw] };
        let mv = randn(&mut rng, mshape.iter().product());
        let m = leaf(&mut t, &mshape, mv.clone());
        let y = t.broadcast_mul(f, m).expect("broadcast_mul");
        note(
            "broadcast_mul",
            max_abs_diff(t.value(y).data(), &broadcast_mul(&fv, [n, ci, ph, pw], &mv, channel)),
        );
    }
    worst
}

/// Random count table with some empty rows and columns.
pub fn random_counts(rng: &mut ChaCha8Rng) -> (usize, Vec<u64>) {
    let k = rng.random_range(2..=8);
    loop {
        let counts: Vec<u64> = (0..k * k)
            .map(|i| {
                let diag = i % (k + 1) == 0;
                match rng.random_range(0..10) {
                    0..=1 => 0,
                    _ if diag => rng.random_range(0..200),
                    _ => rng.random_range(0..30),
                }
            })
            .collect();
        if counts.iter().any(|&c| c > 0) {
            return (k, counts);
        }
    }
}

/// Largest absolute library-vs-oracle difference over `count` tables, for
/// OA, AA, kappa and macro F1.
pub fn metric_discrepancy(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (k, counts) = random_counts(&mut rng);
        let want = metrics(k, &counts);
        let cm = ConfusionMatrix::from_counts(k, counts).expect("square table");
        let got = [
            cm.overall_accuracy().unwrap(),
            cm.average_accuracy().unwrap(),
            cm.kappa().unwrap(),
            cm.f1_macro().unwrap(),
        ];
        for (g, w) in got.iter().zip([want.oa, want.aa, want.kappa, want.f1]) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}
