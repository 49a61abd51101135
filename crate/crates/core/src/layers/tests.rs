use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, LstmStack, MlpHead, MultiHeadAttention};
use crate::autodiff::{Mask, ParamSet, Tape, Tensor};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn zero_params(params: &ParamSet) {
    for p in params.iter() {
        p.set_value(vec![0.0; p.numel()]);
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---- LSTM -------------------------------------------------------------------

#[test]
fn zeroed_lstm_outputs_zeros_for_any_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamSet::new();
    let stack = LstmStack::new(5, 4, 2, &mut params, &mut rng).unwrap();
    zero_params(&params);
    let x = Tensor::from_vec(&[2, 3, 5], rand_vec(&mut rng, 30, -5.0, 5.0)).unwrap();
    let mask = Mask::all_valid(2, 3);
    let out = stack.forward(&Tape::new(), &x, &mask).unwrap();
    assert_eq!(out.shape(), &[2, 3, 8]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_step_sequence_has_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamSet::new();
    let stack = LstmStack::new(3, 4, 1, &mut params, &mut rng).unwrap();
    let x = Tensor::from_vec(&[1, 1, 3], rand_vec(&mut rng, 3, -1.0, 1.0)).unwrap();
    let out = stack.forward(&Tape::new(), &x, &Mask::all_valid(1, 1)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 8]);
    // forward and backward direction both saw the same single step; with
    // independent weights the halves differ but neither is zero
    assert!(out.data()[..4].iter().any(|&v| v != 0.0));
    assert!(out.data()[4..].iter().any(|&v| v != 0.0));
}

#[test]
fn padded_run_matches_truncated_run_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    let stack = LstmStack::new(4, 3, 2, &mut params, &mut rng).unwrap();

    let valid: Vec<f64> = rand_vec(&mut rng, 8, -1.0, 1.0);
    let mut padded = valid.clone();
    padded.extend(rand_vec(&mut rng, 4, -9.0, 9.0)); // garbage in the padding

    let x_padded = Tensor::from_vec(&[1, 3, 4], padded).unwrap();
    let x_trunc = Tensor::from_vec(&[1, 2, 4], valid).unwrap();

    let out_padded = stack
        .forward(&Tape::new(), &x_padded, &Mask::from_lengths(&[2], 3))
        .unwrap();
    let out_trunc = stack
        .forward(&Tape::new(), &x_trunc, &Mask::all_valid(1, 2))
        .unwrap();

    // steps 0 and 1 of the padded run equal the unpadded run, bit for bit
    assert!(bits_equal(&out_padded.data()[..12], out_trunc.data()));
}

#[test]
fn lstm_rejects_wrong_input_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ParamSet::new();
    let stack = LstmStack::new(4, 3, 1, &mut params, &mut rng).unwrap();
    let x = Tensor::zeros(&[1, 2, 5]);
    assert!(stack.forward(&Tape::new(), &x, &Mask::all_valid(1, 2)).is_err());
}

#[test]
fn lstm_parameters_all_receive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamSet::new();
    let stack = LstmStack::new(3, 2, 2, &mut params, &mut rng).unwrap();
    let x = Tensor::from_vec(&[2, 4, 3], rand_vec(&mut rng, 24, -1.0, 1.0)).unwrap();
    let mask = Mask::all_valid(2, 4);
    let tape = Tape::new();
    let out = stack.forward(&tape, &x, &mask).unwrap();
    out.square().sum_all().backward().unwrap();
    for p in params.iter() {
        assert!(
            p.grad().iter().any(|&g| g != 0.0),
            "dead parameter {}",
            p.name()
        );
    }
}

// ---- attention ----------------------------------------------------------------

#[test]
fn zeroed_attention_with_residual_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = ParamSet::new();
    let attn = MultiHeadAttention::new(6, 2, &mut params, &mut rng).unwrap();
    zero_params(&params);
    let h = Tensor::from_vec(&[2, 3, 6], rand_vec(&mut rng, 36, -2.0, 2.0)).unwrap();
    let mask = Mask::all_valid(2, 3);
    let out = attn.forward(&Tape::new(), &h, &mask, true).unwrap();
    assert!(bits_equal(out.data(), h.data()));
    // without the residual the zeroed projections give exactly zero
    let bare = attn.forward(&Tape::new(), &h, &mask, false).unwrap();
    assert!(bare.data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_requires_divisible_model_dim() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::new();
    assert!(MultiHeadAttention::new(6, 4, &mut params, &mut rng).is_err());
}

/// Brute-force re-implementation: per-head loops straight off the
/// definition of scaled dot-product attention.
fn naive_attention(
    params: &ParamSet,
    h: &[f64],
    steps: usize,
    model_dim: usize,
    num_heads: usize,
    lengths: &[usize],
    residual: bool,
) -> Vec<f64> {
    let head_dim = model_dim / num_heads;
    let valid = lengths[0];
    let get = |name: &str| params.find(name).unwrap().value().clone();
    let mut merged = vec![0.0; steps * model_dim];
    for hd in 0..num_heads {
        let wq = get(&format!("attn.h{hd}.wq"));
        let bq = get(&format!("attn.h{hd}.bq"));
        let wk = get(&format!("attn.h{hd}.wk"));
        let bk = get(&format!("attn.h{hd}.bk"));
        let wv = get(&format!("attn.h{hd}.wv"));
        let bv = get(&format!("attn.h{hd}.bv"));
        let project = |w: &[f64], b: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; steps * head_dim];
            for t in 0..steps {
                for j in 0..head_dim {
                    let mut acc = b[j];
                    for d in 0..model_dim {
                        acc += h[t * model_dim + d] * w[d * head_dim + j];
                    }
                    out[t * head_dim + j] = acc;
                }
            }
            out
        };
        let q = project(&wq, &bq);
        let k = project(&wk, &bk);
        let v = project(&wv, &bv);
        let scale = 1.0 / (head_dim as f64).sqrt();
        for t in 0..valid {
            let mut scores = vec![0.0; valid];
            for (s, score) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..head_dim {
                    acc += q[t * head_dim + j] * k[s * head_dim + j];
                }
                *score = acc * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..head_dim {
                let mut acc = 0.0;
                for (s, e) in exps.iter().enumerate() {
                    acc += e / total * v[s * head_dim + j];
                }
                merged[t * model_dim + hd * head_dim + j] = acc;
            }
        }
    }
    let w_out = get("attn.out.w");
    let b_out = get("attn.out.b");
    let mut out = vec![0.0; steps * model_dim];
    for t in 0..valid {
        for j in 0..model_dim {
            let mut acc = b_out[j];
            for d in 0..model_dim {
                acc += merged[t * model_dim + d] * w_out[d * model_dim + j];
            }
            out[t * model_dim + j] = acc + if residual { h[t * model_dim + j] } else { 0.0 };
        }
    }
    out
}

#[test]
fn attention_matches_naive_per_head_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ParamSet::new();
    let attn = MultiHeadAttention::new(8, 2, &mut params, &mut rng).unwrap();
    let h_vals = rand_vec(&mut rng, 24, -1.5, 1.5);
    let h = Tensor::from_vec(&[1, 3, 8], h_vals.clone()).unwrap();
    let mask = Mask::all_valid(1, 3);
    for residual in [true, false] {
        let out = attn.forward(&Tape::new(), &h, &mask, residual).unwrap();
        let expect = naive_attention(&params, &h_vals, 3, 8, 2, &[3], residual);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn attention_single_step_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamSet::new();
    let attn = MultiHeadAttention::new(4, 2, &mut params, &mut rng).unwrap();
    let h_vals = rand_vec(&mut rng, 4, -1.0, 1.0);
    let h = Tensor::from_vec(&[1, 1, 4], h_vals.clone()).unwrap();
    let out = attn
        .forward(&Tape::new(), &h, &Mask::all_valid(1, 1), true)
        .unwrap();
    // softmax over a singleton is weight 1.0 on self, so the result is
    // out_proj(V(h)) + h, which the naive loop reproduces exactly
    let expect = naive_attention(&params, &h_vals, 1, 4, 2, &[1], true);
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_padding_is_invisible_at_valid_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ParamSet::new();
    let attn = MultiHeadAttention::new(6, 3, &mut params, &mut rng).unwrap();
    let valid = rand_vec(&mut rng, 2 * 6, -1.0, 1.0);
    let mut padded = valid.clone();
    padded.extend(rand_vec(&mut rng, 3 * 6, -7.0, 7.0));
    let h_trunc = Tensor::from_vec(&[1, 2, 6], valid).unwrap();
    let h_padded = Tensor::from_vec(&[1, 5, 6], padded).unwrap();
    let out_trunc = attn
        .forward(&Tape::new(), &h_trunc, &Mask::all_valid(1, 2), true)
        .unwrap();
    let out_padded = attn
        .forward(&Tape::new(), &h_padded, &Mask::from_lengths(&[2], 5), true)
        .unwrap();
    assert!(bits_equal(&out_padded.data()[..12], out_trunc.data()));
}

// ---- MLP heads ----------------------------------------------------------------

#[test]
fn zeroed_single_layer_head_is_constant_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::new();
    let head = MlpHead::new("head", &[3, 1], Activation::Tanh, &mut params, &mut rng).unwrap();
    params.find("head.l0.w").unwrap().set_value(vec![0.0; 3]);
    params.find("head.l0.b").unwrap().set_value(vec![4.5]);
    let x = Tensor::from_vec(&[2, 3], rand_vec(&mut rng, 6, -3.0, 3.0)).unwrap();
    let out = head.forward(&Tape::new(), &x).unwrap();
    assert_eq!(out.data(), &[4.5, 4.5]);
}

#[test]
fn identity_head_passes_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = ParamSet::new();
    let head = MlpHead::new("head", &[1, 1], Activation::Tanh, &mut params, &mut rng).unwrap();
    params.find("head.l0.w").unwrap().set_value(vec![1.0]);
    params.find("head.l0.b").unwrap().set_value(vec![0.0]);
    let x = Tensor::from_vec(&[3, 1], vec![-2.0, 0.5, 7.0]).unwrap();
    let out = head.forward(&Tape::new(), &x).unwrap();
    assert_eq!(out.data(), &[-2.0, 0.5, 7.0]);
}

#[test]
fn two_layer_head_matches_hand_computed_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut params = ParamSet::new();
    let head = MlpHead::new("head", &[2, 2, 1], Activation::Tanh, &mut params, &mut rng).unwrap();
    params.find("head.l0.w").unwrap().set_value(vec![1.0, -1.0, 0.5, 2.0]);
    params.find("head.l0.b").unwrap().set_value(vec![0.1, -0.2]);
    params.find("head.l1.w").unwrap().set_value(vec![3.0, -2.0]);
    params.find("head.l1.b").unwrap().set_value(vec![0.25]);
    let x = Tensor::from_vec(&[1, 2], vec![0.4, -0.6]).unwrap();
    let out = head.forward(&Tape::new(), &x).unwrap();

    let h0 = (0.4 * 1.0 + (-0.6) * 0.5 + 0.1_f64).tanh();
    let h1 = (-0.4 + (-0.6) * 2.0 - 0.2_f64).tanh();
    let expect = h0 * 3.0 + h1 * (-2.0) + 0.25;
    assert!((out.data()[0] - expect).abs() < 1e-15);
}
