//! Reference implementations and helpers shared by the integration tests
//! and the acceptance suite. The references are deliberately plain scalar
//! code in `f64`, written without reusing library internals.

#![allow(dead_code)]

use apdnn::nn::{init_model, mlp, AnyPrecisionModel, Mode};
use apdnn::quant::{activation_quantizer_vjp, weight_quantizer_vjp, WeightQuantizerContext};
use apdnn::tensor::{softmax_rows, Tape, Tensor, Var};
use apdnn::Precision;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn max_level(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Half-away-from-zero rounding of a non-negative real.
pub fn round_half_away(x: f64) -> u32 {
    x.round() as u32
}

/// `w′ = (tanh(w)/max|tanh w| + 1) / 2`, all 0.5 when the maximum vanishes.
pub fn ref_normalize(w: &[f32]) -> Vec<f64> {
    let t: Vec<f64> = w.iter().map(|&x| (x as f64).tanh()).collect();
    let m = t.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if m < 1e-12 {
        return vec![0.5; w.len()];
    }
    t.iter().map(|v| (v / m + 1.0) / 2.0).collect()
}

pub fn ref_weight_codes(w: &[f32], bits: u8) -> Vec<u32> {
    let max = max_level(bits) as f64;
    ref_normalize(w)
        .iter()
        .map(|&v| round_half_away(v * max))
        .collect()
}

pub fn ref_mean_abs(w: &[f32]) -> f64 {
    w.iter().map(|&x| (x as f64).abs()).sum::<f64>() / w.len() as f64
}

pub fn ref_scale(w: &[f32], bits: u8) -> f64 {
    ref_mean_abs(w) / max_level(bits) as f64
}

/// `mean|w|·(2w′ − 1)` reconstructed from codes: `scale·(2·code − MAX)`.
pub fn ref_dequantized(w: &[f32], bits: u8) -> Vec<f64> {
    let s = ref_scale(w, bits);
    let max = max_level(bits) as i64;
    ref_weight_codes(w, bits)
        .iter()
        .map(|&c| s * (2 * c as i64 - max) as f64)
        .collect()
}

/// `(code, value)` of one activation.
pub fn ref_activation(y: f32, bits: u8) -> (u32, f64) {
    let max = max_level(bits) as f64;
    let c = round_half_away((y as f64).clamp(0.0, 1.0) * max);
    (c, c as f64 / max)
}

/// The weight surrogate with rounding removed and `mean|w|`, `max|tanh|`
/// frozen at their values for `w0`: `w ↦ mean·tanh(w)/max`.
pub fn ref_weight_surrogate_grad(w0: &[f32], i: usize) -> f64 {
    let m = ref_mean_abs(w0);
    let t = w0
        .iter()
        .map(|&x| (x as f64).tanh().abs())
        .fold(0.0, f64::max);
    let h = FD_STEP;
    let f = |x: f64| m * x.tanh() / t;
    let x = w0[i] as f64;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn ref_dot_u(a: &[u8], b: &[u8]) -> u64 {
    a.iter().zip(b).map(|(&x, &y)| x as u64 * y as u64).sum()
}

/// Signed-weight dot `Σ (2·w − MAX_w)·x` in 64-bit integers.
pub fn ref_dot_signed(w: &[u8], x: &[u8], w_bits: u8) -> i64 {
    let max = max_level(w_bits) as i64;
    w.iter()
        .zip(x)
        .map(|(&c, &v)| (2 * c as i64 - max) * v as i64)
        .sum()
}

/// Six-loop cross-correlation in `f64`, `[B, O, H′, W′]`.
pub fn ref_conv2d<T: Copy + Into<f64>>(
    x: &[T],
    xs: [usize; 4],
    k: &[T],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, w] = xs;
    let [o, kc, kh, kw] = ks;
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xq in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xq * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv: f64 =
                                    x[((bi * c + ci) * h + iy as usize) * w + ix as usize].into();
                                let kv: f64 = k[((oi * c + ci) * kh + dy) * kw + dx].into();
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xq] = acc;
                }
            }
        }
    }
    (out, [b, o, oh, ow])
}

pub fn ref_log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - lse).collect()
}

pub fn ref_cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        total -= ref_log_softmax(&r)[l];
    }
    total / labels.len() as f64
}

/// Relative error with the denominator floored at `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let denom = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|y| y * y).sum::<f64>().sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

pub const FD_STEP: f64 = 1e-3;
/// Per-coordinate comparisons below this gradient magnitude are absolute.
pub const FD_FLOOR: f64 = 1e-3;

/// Analytic tape gradients against central differences at probed coordinates.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    pub probes: usize,
    /// Largest per-coordinate relative error against differences of the
    /// `f64` reference function.
    pub max_rel: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` against the reference differences.
    pub rel: f64,
    /// Same, against differences of the `f32` tape forward itself.
    pub tape_rel: f64,
}

pub type TapeFn = dyn Fn(&mut Tape, &[Var]) -> Var;
pub type RefFn = dyn Fn(&[Vec<f64>]) -> Vec<f64>;
pub type ValidFn = dyn Fn(&[Tensor], usize, usize) -> bool;

fn any(_: &[Tensor], _: usize, _: usize) -> bool {
    true
}

/// Differentiates `Σ c·f(inputs)` with random `c ∈ [−1, 1]` with respect to
/// the inputs listed in `wrt`, at `probes` random coordinates accepted by
/// `valid(inputs, input, index)`.
#[allow(clippy::too_many_arguments)]
pub fn fd_check(
    name: &str,
    rng: &mut impl Rng,
    inputs: &[Tensor],
    wrt: &[usize],
    probes: usize,
    f: &TapeFn,
    reference: &RefFn,
    valid: &ValidFn,
) -> FdReport {
    let eval = |xs: &[Tensor]| -> Vec<f32> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data().to_vec()
    };
    let tape_out = eval(inputs);
    let as_f64 = |xs: &[Tensor]| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect()
    };
    let ref_out = reference(&as_f64(inputs));
    assert_eq!(
        ref_out.len(),
        tape_out.len(),
        "{name}: reference output length"
    );
    for (t, r) in tape_out.iter().zip(&ref_out) {
        assert!(
            (*t as f64 - r).abs() <= 1e-4 * r.abs().max(1.0),
            "{name}: forward {t} vs reference {r}"
        );
    }

    let c = uniform(rng, tape_out.len(), -1.0, 1.0);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let cw = tape.constant(Tensor::new(shape, c.clone()).unwrap());
    let weighted = tape.mul(out, cw).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    let dot = |y: &[f64]| -> f64 { y.iter().zip(&c).map(|(&v, &w)| v * w as f64).sum() };
    let (mut analytic, mut numeric, mut tape_numeric) = (Vec::new(), Vec::new(), Vec::new());
    let mut attempts = 0;
    while analytic.len() < probes {
        attempts += 1;
        assert!(
            attempts < probes * 100,
            "{name}: too few valid probe coordinates"
        );
        let which = wrt[rng.random_range(0..wrt.len())];
        let i = rng.random_range(0..inputs[which].len());
        if !valid(inputs, which, i) {
            continue;
        }
        let g = grads.get(vars[which]).map_or(0.0, |g| g[i] as f64);

        let mut xs = as_f64(inputs);
        let x0 = xs[which][i];
        xs[which][i] = x0 + FD_STEP;
        let up = dot(&reference(&xs));
        xs[which][i] = x0 - FD_STEP;
        let down = dot(&reference(&xs));
        numeric.push((up - down) / (2.0 * FD_STEP));

        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let x = inputs[which].data()[i];
        let h = FD_STEP as f32;
        plus[which].data_mut()[i] = x + h;
        minus[which].data_mut()[i] = x - h;
        let dx = (x + h) as f64 - (x - h) as f64;
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        tape_numeric.push((dot(&widen(eval(&plus))) - dot(&widen(eval(&minus)))) / dx);
        analytic.push(g);
    }
    FdReport {
        name: name.to_string(),
        probes,
        max_rel: analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| rel_err(a, n, FD_FLOOR))
            .fold(0.0, f64::max),
        rel: norm_rel(&analytic, &numeric),
        tape_rel: norm_rel(&analytic, &tape_numeric),
    }
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

/// `[B, C, S]` BatchNorm with biased batch statistics, or stored ones.
fn ref_batch_norm(
    x: &[f64],
    c: usize,
    s: usize,
    g: &[f64],
    b: &[f64],
    stats: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Vec<f64> {
    let n = x.len() / (c * s);
    let at = |bi: usize, ci: usize, si: usize| x[(bi * c + ci) * s + si];
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let (mean, var) = match stats {
            Some((m, v)) => (m[ci], v[ci]),
            None => {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|bi| (0..s).map(move |si| (bi, si)))
                    .map(|(bi, si)| at(bi, ci, si))
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                (mean, var)
            }
        };
        for bi in 0..n {
            for si in 0..s {
                let j = (bi * c + ci) * s + si;
                out[j] = g[ci] * (x[j] - mean) / (var + eps).sqrt() + b[ci];
            }
        }
    }
    out
}

fn ref_kl(z: &[f64], teacher: &[f64], classes: usize, t: f64) -> f64 {
    let rows = z.len() / classes;
    let mut total = 0.0;
    for (zr, pr) in z.chunks(classes).zip(teacher.chunks(classes)) {
        let scaled: Vec<f64> = zr.iter().map(|v| v / t).collect();
        let lq = ref_log_softmax(&scaled);
        total += pr
            .iter()
            .zip(&lq)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * (p.ln() - l))
            .sum::<f64>();
    }
    total / rows as f64
}

/// Cross-entropy of a full-precision perceptron (flatten, linear,
/// BatchNorm in batch-statistics mode, ReLU) evaluated in `f64`.
pub fn ref_mlp_loss(model: &AnyPrecisionModel, x: &[f64], batch: usize, labels: &[usize]) -> f64 {
    use apdnn::nn::Layer;
    let mut h = x.to_vec();
    let mut width = x.len() / batch;
    for layer in model.layers() {
        match layer {
            Layer::Flatten => {}
            Layer::Linear { weight, bias, .. } => {
                let out = weight.shape()[1];
                let w: Vec<f64> = weight.data().iter().map(|&v| v as f64).collect();
                h = ref_matmul(&h, &w, batch, width, out);
                for (j, v) in h.iter_mut().enumerate() {
                    *v += bias.data()[j % out] as f64;
                }
                width = out;
            }
            Layer::BatchNorm(bank) => {
                let st = bank.get(model.bound_bn()).unwrap();
                let g: Vec<f64> = st.gamma.data().iter().map(|&v| v as f64).collect();
                let b: Vec<f64> = st.beta.data().iter().map(|&v| v as f64).collect();
                h = ref_batch_norm(&h, width, 1, &g, &b, None, st.eps as f64);
            }
            Layer::Activation => h.iter_mut().for_each(|v| *v = v.max(0.0)),
            other => panic!("reference perceptron has no {other:?}"),
        }
    }
    let mut loss = 0.0;
    for (row, &l) in h.chunks(width).zip(labels) {
        loss -= ref_log_softmax(row)[l];
    }
    loss / batch as f64
}

/// Finite-difference checks for every differentiable tape operation, a
/// composite network loss and the two quantizer surrogates.
pub fn gradient_suite(seed: u64, probes: usize) -> Vec<FdReport> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let t = |shape: &[usize], r: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        tensor(shape, uniform(r, n, -1.0, 1.0))
    };

    let ins = [t(&[3, 4], &mut r), t(&[4, 2], &mut r)];
    out.push(fd_check(
        "matmul",
        &mut r,
        &ins,
        &[0, 1],
        probes,
        &|tp, v| tp.matmul(v[0], v[1]).unwrap(),
        &|x| ref_matmul(&x[0], &x[1], 3, 4, 2),
        &any,
    ));

    let ins = [t(&[2, 3, 7, 7], &mut r), t(&[4, 3, 3, 3], &mut r)];
    out.push(fd_check(
        "conv2d",
        &mut r,
        &ins,
        &[0, 1],
        probes,
        &|tp, v| tp.conv2d(v[0], v[1], 2, 1).unwrap(),
        &|x| ref_conv2d(&x[0], [2, 3, 7, 7], &x[1], [4, 3, 3, 3], 2, 1).0,
        &any,
    ));

    let ins = [t(&[3, 4, 2, 2], &mut r), t(&[4], &mut r)];
    out.push(fd_check(
        "add_bias",
        &mut r,
        &ins,
        &[0, 1],
        probes,
        &|tp, v| tp.add_bias(v[0], v[1]).unwrap(),
        &|x| {
            x[0].iter()
                .enumerate()
                .map(|(j, v)| v + x[1][(j / 4) % 4])
                .collect()
        },
        &any,
    ));

    let pq = [t(&[5, 3], &mut r), t(&[5, 3], &mut r)];
    out.push(fd_check(
        "add",
        &mut r,
        &pq,
        &[0, 1],
        probes,
        &|tp, v| tp.add(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        &any,
    ));
    out.push(fd_check(
        "mul",
        &mut r,
        &pq,
        &[0, 1],
        probes,
        &|tp, v| tp.mul(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
        &any,
    ));
    out.push(fd_check(
        "scale",
        &mut r,
        &pq[..1],
        &[0],
        probes,
        &|tp, v| tp.scale(v[0], -1.75),
        &|x| x[0].iter().map(|a| a * -1.75).collect(),
        &any,
    ));
    out.push(fd_check(
        "sum",
        &mut r,
        &pq[..1],
        &[0],
        probes,
        &|tp, v| tp.sum(v[0]),
        &|x| vec![x[0].iter().sum()],
        &any,
    ));
    out.push(fd_check(
        "reshape",
        &mut r,
        &pq[..1],
        &[0],
        probes,
        &|tp, v| tp.reshape(v[0], vec![3, 5]).unwrap(),
        &|x| x[0].clone(),
        &any,
    ));
    let margin = 2.0 * FD_STEP as f32;
    out.push(fd_check(
        "relu",
        &mut r,
        &pq[..1],
        &[0],
        probes,
        &|tp, v| tp.relu(v[0]),
        &|x| x[0].iter().map(|a| a.max(0.0)).collect(),
        &move |xs, _, i| xs[0].data()[i].abs() > margin,
    ));

    let ins = [t(&[2, 3, 4, 4], &mut r)];
    let pool_ref = |x: &[Vec<f64>]| {
        let mut o = Vec::with_capacity(24);
        for plane in 0..6 {
            for y in 0..2 {
                for xq in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x[0][plane * 16 + (2 * y + dy) * 4 + 2 * xq + dx]);
                        }
                    }
                    o.push(m);
                }
            }
        }
        o
    };
    // Keep every window member out of reach of the probed element.
    let clear_window = move |xs: &[Tensor], _: usize, i: usize| {
        let d = xs[0].data();
        let (plane, rem) = (i / 16, i % 16);
        let (y, x) = ((rem / 4) / 2 * 2, (rem % 4) / 2 * 2);
        (0..4).all(|k| {
            let j = plane * 16 + (y + k / 2) * 4 + x + k % 2;
            j == i || (d[j] - d[i]).abs() > margin
        })
    };
    out.push(fd_check(
        "max_pool2d",
        &mut r,
        &ins,
        &[0],
        probes,
        &|tp, v| tp.max_pool2d(v[0], 2).unwrap(),
        &pool_ref,
        &clear_window,
    ));

    let mut g = t(&[3], &mut r);
    g.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.5 * *v);
    let ins = [t(&[4, 3, 2, 2], &mut r), g, t(&[3], &mut r)];
    out.push(fd_check(
        "batch_norm_train",
        &mut r,
        &ins,
        &[0, 1, 2],
        probes,
        &|tp, v| tp.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
        &|x| ref_batch_norm(&x[0], 3, 4, &x[1], &x[2], None, 1e-5f32 as f64),
        &any,
    ));
    let rm = uniform(&mut r, 3, -0.2, 0.2);
    let rv = uniform(&mut r, 3, 0.5, 1.5);
    let (rm64, rv64): (Vec<f64>, Vec<f64>) = (
        rm.iter().map(|&v| v as f64).collect(),
        rv.iter().map(|&v| v as f64).collect(),
    );
    out.push(fd_check(
        "batch_norm_eval",
        &mut r,
        &ins,
        &[0, 1, 2],
        probes,
        &move |tp, v| {
            tp.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)
                .unwrap()
        },
        &move |x| {
            ref_batch_norm(
                &x[0],
                3,
                4,
                &x[1],
                &x[2],
                Some((&rm64, &rv64)),
                1e-5f32 as f64,
            )
        },
        &any,
    ));

    let logits = [t(&[4, 5], &mut r)];
    let labels = [0usize, 3, 4, 1];
    out.push(fd_check(
        "softmax_cross_entropy",
        &mut r,
        &logits,
        &[0],
        probes,
        &move |tp, v| tp.softmax_cross_entropy(v[0], &labels).unwrap(),
        &move |x| {
            let mut total = 0.0;
            for (row, &l) in x[0].chunks(5).zip(&labels) {
                total -= ref_log_softmax(row)[l];
            }
            vec![total / 4.0]
        },
        &any,
    ));

    let teacher = softmax_rows(&uniform(&mut r, 20, -2.0, 2.0), 5, 1.0);
    let teacher64: Vec<f64> = teacher.iter().map(|&v| v as f64).collect();
    out.push(fd_check(
        "kl_divergence",
        &mut r,
        &logits,
        &[0],
        probes,
        &move |tp, v| tp.kl_divergence(v[0], &teacher, 1.5).unwrap(),
        &move |x| vec![ref_kl(&x[0], &teacher64, 5, 1.5)],
        &any,
    ));

    out.push(model_fd(&mut r, probes));
    out.push(weight_surrogate_check(&mut r, probes));
    out.push(activation_surrogate_check(&mut r, probes));
    out
}
/// Composite loss: a full-precision perceptron forward (linear, BatchNorm,
/// ReLU) with cross-entropy, differentiated with respect to its input.
fn model_fd(r: &mut ChaCha8Rng, probes: usize) -> FdReport {
    let model = small_mlp(6, vec![Precision::Full], 11);
    let x = tensor(&[4, 1, 1, 6], uniform(r, 24, -1.0, 1.0));
    let labels = [0usize, 1, 1, 0];
    let m = model.clone();
    fd_check(
        "mlp_loss",
        r,
        &[x],
        &[0],
        probes,
        &move |tp, v| {
            let pass = m.forward_on_tape(tp, v[0], Mode::Train, false).unwrap();
            tp.softmax_cross_entropy(pass.logits, &labels).unwrap()
        },
        &move |x| vec![ref_mlp_loss(&model, &x[0], 4, &labels)],
        &any,
    )
}

/// Weight quantizer backward against differences of the round-free
/// surrogate `mean|w|·tanh(w)/max|tanh w|`, statistics frozen.
fn weight_surrogate_check(r: &mut ChaCha8Rng, probes: usize) -> FdReport {
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..probes {
        let w = uniform(r, 16, -1.0, 1.0);
        let i = r.random_range(0..16);
        let ctx = WeightQuantizerContext::new(&w);
        let mut up = vec![0.0f32; 16];
        up[i] = 1.0;
        analytic.push(weight_quantizer_vjp(&up, &ctx)[i] as f64);
        numeric.push(ref_weight_surrogate_grad(&w, i));
    }
    surrogate_report("weight_quantizer_ste", analytic, numeric)
}

/// Activation quantizer backward against differences of `clip(y, 0, 1)`.
fn activation_surrogate_check(r: &mut ChaCha8Rng, probes: usize) -> FdReport {
    let margin = 2.0 * FD_STEP;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    while analytic.len() < probes {
        let y: f32 = r.random_range(-1.0..2.0);
        if (y as f64).abs() < margin || (y as f64 - 1.0).abs() < margin {
            continue;
        }
        let up: f32 = r.random_range(-1.0..1.0);
        analytic.push(activation_quantizer_vjp(&[up], &[y])[0] as f64);
        let clip = |v: f64| v.clamp(0.0, 1.0);
        numeric.push(
            up as f64 * (clip(y as f64 + FD_STEP) - clip(y as f64 - FD_STEP)) / (2.0 * FD_STEP),
        );
    }
    surrogate_report("activation_quantizer_ste", analytic, numeric)
}

fn surrogate_report(name: &str, analytic: Vec<f64>, numeric: Vec<f64>) -> FdReport {
    FdReport {
        name: name.to_string(),
        probes: analytic.len(),
        max_rel: analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| rel_err(a, n, FD_FLOOR))
            .fold(0.0, f64::max),
        rel: norm_rel(&analytic, &numeric),
        tape_rel: norm_rel(&analytic, &numeric),
    }
}

/// The `[1, 1, dim]` perceptron used across tests.
pub fn small_mlp(dim: usize, bits: Vec<Precision>, seed: u64) -> AnyPrecisionModel {
    init_model(&mlp(dim, 16, 2, bits), seed).unwrap()
}

pub fn bits(list: &[u8]) -> Vec<Precision> {
    list.iter()
        .map(|&b| Precision::from_bits(b).unwrap())
        .collect()
}

/// Agreement between the library quantizers and the scalar references.
#[derive(Debug, Clone, Default)]
pub struct OracleStats {
    pub weights: usize,
    pub activations: usize,
    pub code_mismatches: usize,
    pub max_float_err: f64,
}

/// Quantizes `samples` random weights (in layers of random size and scale)
/// and `samples` random activations at `bits`, comparing codes exactly and
/// normalized values, scales, dequantized weights and activation values
/// against the references.
pub fn quantizer_oracle(bits: u8, samples: usize, seed: u64) -> OracleStats {
    use apdnn::quant::{normalize_weights, quantize_activations, quantize_weights};
    let p = Precision::int(bits).unwrap();
    let mut r = rng(seed);
    let mut st = OracleStats::default();
    let mut err = |a: f64, b: f64| st.max_float_err = st.max_float_err.max((a - b).abs());
    let mut mismatches = 0;
    let mut weights = 0;
    while weights < samples {
        let n = r.random_range(1..=256).min(samples - weights);
        let spread: f32 = [0.05, 0.3, 1.0, 3.0][r.random_range(0..4)];
        let w = uniform(&mut r, n, -spread, spread);
        let t = tensor(&[n], w.clone());
        let norm = normalize_weights(&t).unwrap();
        let q = quantize_weights(&t, p).unwrap();
        let codes = ref_weight_codes(&w, bits);
        mismatches += codes
            .iter()
            .zip(&q.codes)
            .filter(|(a, b)| **a != **b as u32)
            .count();
        for (a, b) in norm.data().iter().zip(ref_normalize(&w)) {
            err(*a as f64, b);
        }
        err(q.scale as f64, ref_scale(&w, bits));
        for (a, b) in q.dequantize().iter().zip(ref_dequantized(&w, bits)) {
            err(*a as f64, b);
        }
        weights += n;
    }
    let y = uniform(&mut r, samples, -0.5, 1.5);
    let qa = quantize_activations(&tensor(&[samples], y.clone()), p);
    for ((&v, &c), &val) in y.iter().zip(&qa.codes).zip(qa.value.data()) {
        let (rc, rv) = ref_activation(v, bits);
        if rc != c as u32 {
            mismatches += 1;
        }
        err(val as f64, rv);
    }
    OracleStats {
        weights,
        activations: samples,
        code_mismatches: mismatches,
        max_float_err: st.max_float_err,
    }
}

/// For every 8-bit grid point `k/255`, the shifted stored code against the
/// code quantized directly at `n` bits: `(max |difference|, count off by one)`.
pub fn bitshift_nesting(n: u8) -> (u32, usize) {
    let all: Vec<u8> = (0..=255u8).collect();
    let shifted = apdnn::quant::bitshift_truncate(&all, 8, n).unwrap();
    let max = max_level(n) as f64;
    let mut worst = 0;
    let mut off = 0;
    for (k, &s) in shifted.iter().enumerate() {
        let direct = round_half_away(k as f64 / 255.0 * max);
        let d = (s as i64 - direct as i64).unsigned_abs() as u32;
        worst = worst.max(d);
        if d == 1 {
            off += 1;
        }
    }
    (worst, off)
}

/// Popcount kernels against 64-bit integer dot products for `trials`
/// random vector pairs of random length; returns the count of mismatches.
pub fn kernel_mismatches(w_bits: u8, a_bits: u8, trials: usize, seed: u64) -> usize {
    use apdnn::engine::{pack_bitplanes, popcount_dot, signed_dots, IntegerLayer};
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let len = r.random_range(1..=300);
        let w: Vec<u8> = (0..len)
            .map(|_| r.random_range(0..=max_level(w_bits)) as u8)
            .collect();
        let x: Vec<u8> = (0..len)
            .map(|_| r.random_range(0..=max_level(a_bits)) as u8)
            .collect();
        let wp = pack_bitplanes(&w, 1, len, w_bits).unwrap();
        let xp = pack_bitplanes(&x, 1, len, a_bits).unwrap();
        if popcount_dot(&wp, &xp).unwrap() != vec![ref_dot_u(&w, &x)] {
            bad += 1;
        }
        let layer = IntegerLayer::new(&w, 1, len, w_bits, 1.0, vec![0.0]).unwrap();
        if signed_dots(&layer, &xp).unwrap() != vec![ref_dot_signed(&w, &x, w_bits)] {
            bad += 1;
        }
    }
    bad
}
