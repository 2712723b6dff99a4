mod common;

use apdnn::quant::{
    activation_quantizer_vjp, bitshift_truncate, normalize_weights, quantize_activations,
    quantize_activations_on_tape, quantize_weights, quantize_weights_on_tape, weight_quantizer_vjp,
    WeightQuantizerContext,
};
use apdnn::{Error, Precision, Tape, Tensor};
use common::*;
use proptest::prelude::*;

fn v(data: &[f32]) -> Tensor {
    Tensor::vector(data.to_vec())
}

fn int(n: u8) -> Precision {
    Precision::int(n).unwrap()
}

#[test]
fn normalize_examples() {
    assert_eq!(
        normalize_weights(&v(&[-1.0, 0.0, 1.0])).unwrap().data(),
        &[0.0, 0.5, 1.0]
    );
    assert_eq!(normalize_weights(&v(&[0.0; 5])).unwrap().data(), &[0.5; 5]);
    let got = normalize_weights(&v(&[-2.0, 0.5, 1.0])).unwrap();
    for (g, want) in got.data().iter().zip([0.0, 0.73968, 0.89501]) {
        assert!((g - want).abs() < 1e-5);
    }
    assert!(matches!(normalize_weights(&v(&[])), Err(Error::Input(_))));
}

#[test]
fn quantize_examples() {
    let q = quantize_weights(&v(&[-1.0, 0.0, 1.0]), int(1)).unwrap();
    assert_eq!(q.codes, [0, 1, 1]);
    assert_eq!(q.signed, [-1, 1, 1]);
    assert!((q.scale - 2.0 / 3.0).abs() < 1e-6);

    let q = quantize_weights(&v(&[-2.0, 0.5, 1.0]), int(2)).unwrap();
    assert_eq!(q.codes, [0, 2, 3]);
    assert_eq!(q.signed, [-3, 1, 3]);
    assert!((q.scale - 1.16667 / 3.0).abs() < 1e-5);

    assert!(matches!(
        quantize_weights(&v(&[1.0]), Precision::Full),
        Err(Error::Usage(_))
    ));
}

#[test]
fn eight_bit_dequantization_is_within_one_step() {
    let mut r = rng(1);
    for _ in 0..50 {
        let w = uniform(&mut r, 200, -2.0, 2.0);
        let q = quantize_weights(&v(&w), int(8)).unwrap();
        let m = ref_mean_abs(&w);
        for (d, nv) in q.dequantize().iter().zip(ref_normalize(&w)) {
            assert!((*d as f64 - m * (2.0 * nv - 1.0)).abs() <= q.scale as f64 + 1e-7);
        }
    }
}

#[test]
fn all_zero_layer_has_zero_scale() {
    let q = quantize_weights(&v(&[0.0; 4]), int(4)).unwrap();
    assert_eq!(q.scale, 0.0);
    assert!(q.dequantize().iter().all(|&d| d == 0.0));
}

#[test]
fn activation_examples() {
    let q = quantize_activations(&v(&[0.3, 1.7, -0.2]), int(2));
    assert_eq!(q.codes, [1, 3, 0]);
    assert!((q.value.data()[0] - 1.0 / 3.0).abs() < 1e-6);
    assert_eq!(&q.value.data()[1..], &[1.0, 0.0]);
    for n in 1..=8 {
        let q = quantize_activations(&v(&[1.7, -0.2]), int(n));
        assert_eq!(q.codes, [max_level(n) as u8, 0]);
    }
    let full = quantize_activations(&v(&[-0.7, 0.25, 3.0]), Precision::Full);
    assert_eq!(full.value.data(), &[-0.7, 0.25, 3.0]);
}

#[test]
fn weight_vjp_examples() {
    let w = [0.3f32, -1.1, 0.8, 2.0];
    let ctx = WeightQuantizerContext::new(&w);
    assert!(weight_quantizer_vjp(&[0.0; 4], &ctx)
        .iter()
        .all(|&g| g == 0.0));

    let single = WeightQuantizerContext::new(&[0.3]);
    let g = weight_quantizer_vjp(&[1.0], &single)[0] as f64;
    assert!(rel_err(g, ref_weight_surrogate_grad(&[0.3], 0), 1e-12) < 1e-4);

    let wide = [0.1f32, 5.0, 10.0, 20.0];
    let g = weight_quantizer_vjp(&[1.0; 4], &WeightQuantizerContext::new(&wide));
    assert!(g[0] > g[1] && g[1] >= g[2] && g[2] >= g[3]);
    assert!(g[1] < 1e-3 * g[0] && g[3].abs() < 1e-12);
}

#[test]
fn activation_vjp_examples() {
    let g = activation_quantizer_vjp(&[0.7, 0.7, 0.7, 0.7, 0.7], &[0.5, 1.5, 1.0, 0.0, -0.01]);
    assert_eq!(g, [0.7, 0.0, 0.7, 0.7, 0.0]);
}

#[test]
fn bitshift_examples() {
    assert_eq!(bitshift_truncate(&[255], 8, 4).unwrap(), [15]);
    assert_eq!(bitshift_truncate(&[200], 8, 4).unwrap(), [12]);
    let all: Vec<u8> = (0..=255).collect();
    assert_eq!(bitshift_truncate(&all, 8, 8).unwrap(), all);
    assert!(matches!(
        bitshift_truncate(&[3], 2, 4),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        bitshift_truncate(&[3], 8, 0),
        Err(Error::Usage(_))
    ));
}

#[test]
fn bitshift_nests_within_one_code() {
    for n in [1, 2, 4] {
        let (worst, off) = bitshift_nesting(n);
        assert!(worst <= 1, "{n} bits: {worst}");
        eprintln!("8 -> {n}: {off} of 256 codes differ by one");
    }
    // At one bit both rules split the grid at 128.
    assert_eq!(bitshift_nesting(1).1, 0);
}

#[test]
fn oracle_agreement_at_every_width() {
    for bits in 1..=8 {
        let st = quantizer_oracle(bits, 20_000, bits as u64);
        assert_eq!(st.code_mismatches, 0, "{bits} bits");
        assert!(
            st.max_float_err <= 1e-6,
            "{bits} bits: {:.2e}",
            st.max_float_err
        );
    }
}

#[test]
fn ste_gradient_equals_identity_round_surrogate() {
    // y = x · Q(w) with Q the weight quantizer; the surrogate network swaps
    // Q for w ↦ mean|w|·tanh(w)/max|tanh w| with the statistics frozen.
    let mut r = rng(9);
    let (k, n) = (6, 3);
    let w = uniform(&mut r, k * n, -1.0, 1.0);
    let x = uniform(&mut r, 2 * k, 0.0, 1.0);
    let c = uniform(&mut r, 2 * n, -1.0, 1.0);
    let mut tape = Tape::new();
    let wv = tape.leaf(tensor(&[k, n], w.clone()), true);
    let xv = tape.constant(tensor(&[2, k], x.clone()));
    let (wq, _) = quantize_weights_on_tape(&mut tape, wv, int(4)).unwrap();
    let y = tape.matmul(xv, wq).unwrap();
    let cv = tape.constant(tensor(&[2, n], c.clone()));
    let yc = tape.mul(y, cv).unwrap();
    let loss = tape.sum(yc);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(wv).unwrap();

    let m = ref_mean_abs(&w);
    let t = w
        .iter()
        .map(|&v| (v as f64).tanh().abs())
        .fold(0.0, f64::max);
    for p in 0..k {
        for j in 0..n {
            let upstream: f64 = (0..2)
                .map(|b| x[b * k + p] as f64 * c[b * n + j] as f64)
                .sum();
            let th = (w[p * n + j] as f64).tanh();
            let want = upstream * m * (1.0 - th * th) / t;
            assert!(rel_err(g[p * n + j] as f64, want, 1e-6) < 1e-5);
        }
    }
}

#[test]
fn activation_ste_on_tape_gates_by_clip_range() {
    let mut tape = Tape::new();
    let y = tape.leaf(v(&[-0.5, 0.2, 1.0, 1.3]), true);
    let q = quantize_activations_on_tape(&mut tape, y, int(2));
    assert_eq!(tape.value(q).data(), &[0.0, 1.0 / 3.0, 1.0, 1.0]);
    let s = tape.scale(q, 2.0);
    let loss = tape.sum(s);
    assert_eq!(
        tape.backward(loss).unwrap().get(y).unwrap(),
        &[0.0, 2.0, 2.0, 0.0]
    );
}

fn weights() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, 1..80)
}

proptest! {
    #[test]
    fn codes_and_signed_values_are_in_range(w in weights(), bits in 1u8..=8) {
        let q = quantize_weights(&v(&w), int(bits)).unwrap();
        let max = max_level(bits) as i16;
        for (&c, &s) in q.codes.iter().zip(&q.signed) {
            prop_assert!(c as i16 <= max);
            prop_assert_eq!(s, 2 * c as i16 - max);
            prop_assert!((s + max) % 2 == 0);
        }
        prop_assert!(q.scale >= 0.0);
        prop_assert_eq!(q.scale == 0.0, w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dequantized_weights_stay_within_mean_magnitude(w in weights(), bits in 1u8..=8) {
        let q = quantize_weights(&v(&w), int(bits)).unwrap();
        let m = q.mean_abs;
        for d in q.dequantize() {
            prop_assert!(d.abs() <= m * (1.0 + 1e-6));
            if bits == 1 {
                prop_assert!((d.abs() - m).abs() <= m * 1e-6);
            }
        }
    }

    #[test]
    fn one_bit_requantization_is_idempotent(w in weights()) {
        let q = quantize_weights(&v(&w), int(1)).unwrap();
        let again = quantize_weights(&v(&q.dequantize()), int(1)).unwrap();
        prop_assert_eq!(q.codes, again.codes);
    }

    // Re-normalizing the dequantized grid goes through tanh again, so codes
    // survive only while tanh is close to linear over ±mean|w|.
    #[test]
    fn requantization_is_idempotent_for_small_weights(
        w in prop::collection::vec(-0.25f32..0.25, 2..80),
        bits in 1u8..=8,
    ) {
        let q = quantize_weights(&v(&w), int(bits)).unwrap();
        let again = quantize_weights(&v(&q.dequantize()), int(bits)).unwrap();
        prop_assert_eq!(q.codes, again.codes);
    }

    #[test]
    fn activation_codes_and_values_agree(y in prop::collection::vec(-1.0f32..2.0, 1..64), bits in 1u8..=8) {
        let q = quantize_activations(&v(&y), int(bits));
        let max = max_level(bits);
        for (&c, &val) in q.codes.iter().zip(q.value.data()) {
            prop_assert!(c as u32 <= max);
            prop_assert_eq!(val, c as f32 / max as f32);
        }
    }
}
