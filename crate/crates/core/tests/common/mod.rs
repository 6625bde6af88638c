//! Naive loop oracles and a finite-difference gradient checker, shared by
//! the core integration tests and the acceptance suite.
#![allow(dead_code)]

use rdx_core::models::Model;
use rdx_core::preprocess::{ClaheParams, FloatImage, GrayImage};
use rdx_core::tensor::{scce_loss, Mode, RngState, Tape, Tensor, Var};
use rdx_core::Result;

/// Outcome of one named check: `Err` carries the first failing instance.
pub type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {
        ensure_eq!($a, $b, "values differ")
    };
    ($a:expr, $b:expr, $($msg:tt)+) => {
        if $a != $b {
            return Err(format!("{}: {} != {}", format!($($msg)+), stringify!($a), stringify!($b)));
        }
    };
}

pub mod gradient_checks;
pub mod oracle_checks;

pub fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(0.1, 1.0);
        if rng.next_f64() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// Distinct values spaced 0.013 apart in random order, so no two entries of
/// a pooling window tie under a small perturbation.
pub fn distinct_tensor(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.013 - 0.5).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.below(i + 1));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn random_gray(w: usize, h: usize, rng: &mut RngState) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.below(256) as u8)
}

// ---------------------------------------------------------------------------
// tensor oracles (NHWC, kernels (kh, kw, in, out))

/// `(out, pad_before)` of one axis.
fn axis(input: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = (input + stride - 1) / stride;
        let needed = (out - 1) * stride + k;
        let total = if needed > input { needed - input } else { 0 };
        (out, total / 2)
    } else {
        ((input - k) / stride + 1, 0)
    }
}

fn at4(s: &[usize], b: usize, y: usize, x: usize, c: usize) -> usize {
    ((b * s[1] + y) * s[2] + x) * s[3] + c
}

pub fn conv2d_naive(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, same: bool) -> Tensor<f64> {
    let xs = x.shape();
    let ks = k.shape();
    let (oh, pt) = axis(xs[1], ks[0], stride, same);
    let (ow, pl) = axis(xs[2], ks[1], stride, same);
    let mut out = vec![0.0; xs[0] * oh * ow * ks[3]];
    let os = [xs[0], oh, ow, ks[3]];
    for b in 0..xs[0] {
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..ks[3] {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                    for di in 0..ks[0] {
                        for dj in 0..ks[1] {
                            let y = (i * stride + di) as isize - pt as isize;
                            let xx = (j * stride + dj) as isize - pl as isize;
                            if y < 0 || xx < 0 || y >= xs[1] as isize || xx >= xs[2] as isize {
                                continue;
                            }
                            for c in 0..xs[3] {
                                acc += x.data()[at4(xs, b, y as usize, xx as usize, c)]
                                    * k.data()[at4(ks, di, dj, c, o)];
                            }
                        }
                    }
                    out[at4(&os, b, i, j, o)] = acc;
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).unwrap()
}

/// Depthwise `(kh, kw, C, 1)` filtering, then `(1, 1, C, O)` mixing, then bias.
pub fn separable_naive(
    x: &Tensor<f64>,
    dw: &Tensor<f64>,
    pw: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    same: bool,
) -> Tensor<f64> {
    let xs = x.shape();
    let ds = dw.shape();
    let (oh, pt) = axis(xs[1], ds[0], stride, same);
    let (ow, pl) = axis(xs[2], ds[1], stride, same);
    let mid_s = [xs[0], oh, ow, xs[3]];
    let mut mid = vec![0.0; mid_s.iter().product()];
    for b in 0..xs[0] {
        for i in 0..oh {
            for j in 0..ow {
                for c in 0..xs[3] {
                    let mut acc = 0.0;
                    for di in 0..ds[0] {
                        for dj in 0..ds[1] {
                            let y = (i * stride + di) as isize - pt as isize;
                            let xx = (j * stride + dj) as isize - pl as isize;
                            if y < 0 || xx < 0 || y >= xs[1] as isize || xx >= xs[2] as isize {
                                continue;
                            }
                            acc += x.data()[at4(xs, b, y as usize, xx as usize, c)] * dw.data()[at4(ds, di, dj, c, 0)];
                        }
                    }
                    mid[at4(&mid_s, b, i, j, c)] = acc;
                }
            }
        }
    }
    conv2d_naive(&Tensor::new(mid_s.to_vec(), mid).unwrap(), pw, bias, 1, false)
}

/// Max over the in-bounds part of each window.
pub fn maxpool_naive(x: &Tensor<f64>, window: usize, stride: usize, same: bool) -> Tensor<f64> {
    let xs = x.shape();
    let (oh, pt) = axis(xs[1], window, stride, same);
    let (ow, pl) = axis(xs[2], window, stride, same);
    let os = [xs[0], oh, ow, xs[3]];
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..xs[0] {
        for i in 0..oh {
            for j in 0..ow {
                for c in 0..xs[3] {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..window {
                        for dj in 0..window {
                            let y = (i * stride + di) as isize - pt as isize;
                            let xx = (j * stride + dj) as isize - pl as isize;
                            if y >= 0 && xx >= 0 && y < xs[1] as isize && xx < xs[2] as isize {
                                best = best.max(x.data()[at4(xs, b, y as usize, xx as usize, c)]);
                            }
                        }
                    }
                    out[at4(&os, b, i, j, c)] = best;
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).unwrap()
}

pub fn gap_naive(x: &Tensor<f64>) -> Tensor<f64> {
    let xs = x.shape();
    let mut out = vec![0.0; xs[0] * xs[3]];
    for b in 0..xs[0] {
        for c in 0..xs[3] {
            let mut acc = 0.0;
            for y in 0..xs[1] {
                for xx in 0..xs[2] {
                    acc += x.data()[at4(xs, b, y, xx, c)];
                }
            }
            out[b * xs[3] + c] = acc / (xs[1] * xs[2]) as f64;
        }
    }
    Tensor::new(vec![xs[0], xs[3]], out).unwrap()
}

pub fn dense_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let u = w.shape()[1];
    let mut out = vec![0.0; n * u];
    for r in 0..n {
        for o in 0..u {
            let mut acc = b.data()[o];
            for i in 0..d {
                acc += x.data()[r * d + i] * w.data()[i * u + o];
            }
            out[r * u + o] = acc;
        }
    }
    Tensor::new(vec![n, u], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// image oracles

/// Sort-based median with replicate borders.
pub fn median_naive(img: &GrayImage, k: usize) -> GrayImage {
    let r = (k / 2) as isize;
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let mut v = Vec::with_capacity(k * k);
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = (x as isize + dx).clamp(0, img.width() as isize - 1) as usize;
                let sy = (y as isize + dy).clamp(0, img.height() as isize - 1) as usize;
                v.push(img.get(sx, sy));
            }
        }
        v.sort_unstable();
        v[v.len() / 2]
    })
}

pub fn resize_naive(img: &FloatImage, ow: usize, oh: usize) -> FloatImage {
    let mut px = Vec::with_capacity(ow * oh);
    for ty in 0..oh {
        for tx in 0..ow {
            let sx = ((tx as f64 * img.width() as f64) / ow as f64).floor() as usize;
            let sy = ((ty as f64 * img.height() as f64) / oh as f64).floor() as usize;
            px.push(img.get(sx, sy));
        }
    }
    FloatImage::new(ow, oh, px).unwrap()
}

fn mirror(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 2 - i
    }
}

/// Straight-line CLAHE: equal `ceil(W/tx) x ceil(H/ty)` tiles over a
/// reflect-101 extended image, per-tile clipped histograms with the excess
/// spread evenly and the remainder on every `256/remainder`-th bin, rounded
/// CDF tables, and bilinear blending between tile centres.
pub fn clahe_naive(img: &GrayImage, p: &ClaheParams) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let tw = (w + p.tiles_x - 1) / p.tiles_x;
    let th = (h + p.tiles_y - 1) / p.tiles_y;
    let area = tw * th;
    let mut tables = vec![vec![0u8; 256]; p.tiles_x * p.tiles_y];
    for ty in 0..p.tiles_y {
        for tx in 0..p.tiles_x {
            let mut hist = vec![0u32; 256];
            for y in 0..th {
                for x in 0..tw {
                    let v = img.get(mirror(tx * tw + x, w), mirror(ty * th + y, h));
                    hist[v as usize] += 1;
                }
            }
            if p.clip_limit > 0.0 {
                let limit = ((p.clip_limit * area as f64 / 256.0).round() as u32).max(1);
                let mut excess = 0;
                for b in hist.iter_mut() {
                    if *b > limit {
                        excess += *b - limit;
                        *b = limit;
                    }
                }
                for b in hist.iter_mut() {
                    *b += excess / 256;
                }
                let rem = excess % 256;
                if rem > 0 {
                    let step = (256 / rem as usize).max(1);
                    let mut given = 0;
                    let mut bin = 0;
                    while bin < 256 && given < rem {
                        hist[bin] += 1;
                        given += 1;
                        bin += step;
                    }
                }
            }
            let table = &mut tables[ty * p.tiles_x + tx];
            let mut cdf = 0u32;
            for v in 0..256 {
                cdf += hist[v];
                table[v] = (cdf as f64 * (255.0 / area as f64) + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let pick = |pos: usize, tile: usize, tiles: usize| {
        let f = pos as f64 / tile as f64 - 0.5;
        let lo = f.floor();
        let a = if lo < 0.0 { 0 } else { lo as usize };
        let b = ((lo + 1.0) as usize).min(tiles - 1);
        (a, b, f - lo)
    };
    GrayImage::from_fn(w, h, |x, y| {
        let (x1, x2, xa) = pick(x, tw, p.tiles_x);
        let (y1, y2, ya) = pick(y, th, p.tiles_y);
        let v = img.get(x, y) as usize;
        let t = |ty: usize, tx: usize| tables[ty * p.tiles_x + tx][v] as f64;
        let top = t(y1, x1) * (1.0 - xa) + t(y1, x2) * xa;
        let bottom = t(y2, x1) * (1.0 - xa) + t(y2, x2) * xa;
        ((top * (1.0 - ya) + bottom * ya) + 0.5).floor().clamp(0.0, 255.0) as u8
    })
}

// ---------------------------------------------------------------------------
// finite differences

pub const FD_STEP: f64 = 1e-5;

/// `||a - n|| / (||a|| + ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `d/d inputs sum(weights * f(inputs))` against central differences,
/// with fixed random weights. Returns the worst relative error over inputs.
pub fn check_op(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = f(&mut tape, &vars).expect("op");
        let shape = tape.value(out).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => random_tensor(&shape, &mut RngState::derive(seed, 99)),
        };
        let loss = tape.weighted_sum(out, w.clone()).expect("weights");
        let grads = tape.backward(loss).expect("backward");
        let g = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect();
        (tape.value(loss).data()[0], w, g)
    };
    let (_, weights, analytic) = eval(inputs, None);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] = input.data()[j] + FD_STEP;
            let plus = eval(&vals, Some(&weights)).0;
            vals[i].data_mut()[j] = input.data()[j] - FD_STEP;
            let minus = eval(&vals, Some(&weights)).0;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic[i].data(), &numeric));
    }
    worst
}

/// Gradient of the training loss of `model` on `(x, labels)` against
/// central differences, over every trainable parameter. Dropout masks are
/// held fixed by replaying the same random stream.
pub fn check_model(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize], dropout_seed: u64) -> f64 {
    let rng = RngState::new(dropout_seed);
    let pass = model.forward(x, Mode::Train, &mut rng.clone()).expect("forward");
    let (_, grads) = pass.backward_scce(labels).expect("backward");
    let loss_at = |m: &Model<f64>| {
        let pass = m.forward(x, Mode::Train, &mut rng.clone()).expect("forward");
        scce_loss(pass.output(), labels).expect("loss")
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<(String, bool)> = model.params().iter().map(|p| (p.name.clone(), p.trainable)).collect();
    for ((name, trainable), g) in names.iter().zip(&grads) {
        if !trainable {
            continue;
        }
        let g = g.as_ref().expect("trainable parameter has a gradient");
        analytic.extend_from_slice(g.data());
        for j in 0..g.numel() {
            let orig = model.param(name).unwrap().value.data()[j];
            model.param_mut(name).unwrap().value.data_mut()[j] = orig + FD_STEP;
            let plus = loss_at(model);
            model.param_mut(name).unwrap().value.data_mut()[j] = orig - FD_STEP;
            let minus = loss_at(model);
            model.param_mut(name).unwrap().value.data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}
