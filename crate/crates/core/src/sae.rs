//! SAE encoding, per-token mean pooling, and decoder projection of SAE-space
//! modes into residual-space unit directions.

use crate::bank::{ActivationTrace, SaeSpec};
use crate::error::{Error, Result};
use crate::linalg;

/// Norm below which a decoded direction is rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Mean over per-token codes of a scored span.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCode {
    pub values: Vec<f64>,
    pub num_tokens: usize,
}

/// `max(0, encoder·h + bias)`.
pub fn encode_token(sae: &SaeSpec, h: &[f32]) -> Result<Vec<f64>> {
    if h.len() != sae.d_model {
        return Err(Error::Dimension(format!(
            "residual vector has length {}, SAE expects d_model {}",
            h.len(),
            sae.d_model
        )));
    }
    let mut out = vec![0.0; sae.n_features];
    encode_into(sae, h, &mut out);
    Ok(out)
}

fn encode_into(sae: &SaeSpec, h: &[f32], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let pre = linalg::dot_f32_f64(sae.encoder_row(j), h) + sae.encoder_bias[j] as f64;
        *o = pre.max(0.0);
    }
}

/// Encodes every token of the span individually, then averages the codes.
///
/// With `skip_prompt` the span is the continuation (`prompt_len..`); otherwise
/// every token is pooled.
pub fn mean_pool_encode(
    sae: &SaeSpec,
    trace: &ActivationTrace,
    layer: usize,
    skip_prompt: bool,
) -> Result<PooledCode> {
    if trace.d_model() != sae.d_model {
        return Err(Error::Dimension(format!(
            "trace d_model {} != SAE d_model {}",
            trace.d_model(),
            sae.d_model
        )));
    }
    let rows = trace
        .rows(layer)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} not present in trace")))?;
    let start = if skip_prompt { trace.prompt_len() } else { 0 };
    let count = trace.num_tokens() - start;
    if count == 0 {
        return Err(Error::InvalidInput("empty scored span".into()));
    }
    let mut sum = vec![0.0; sae.n_features];
    let mut code = vec![0.0; sae.n_features];
    for row in rows.skip(start) {
        encode_into(sae, row, &mut code);
        for (s, c) in sum.iter_mut().zip(&code) {
            *s += c;
        }
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(PooledCode {
        values: sum,
        num_tokens: count,
    })
}

/// Sign-aligns `mode` with `delta_mu`, clips negatives, projects through the
/// decoder, and L2-normalizes.
pub fn decode_direction(sae: &SaeSpec, mode: &[f64], delta_mu: &[f64]) -> Result<Vec<f64>> {
    if mode.len() != sae.n_features || delta_mu.len() != sae.n_features {
        return Err(Error::Dimension(format!(
            "mode/delta_mu lengths ({}, {}) must equal n_features {}",
            mode.len(),
            delta_mu.len(),
            sae.n_features
        )));
    }
    let sign = if linalg::dot(mode, delta_mu) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let mut out = vec![0.0; sae.d_model];
    for (j, &v) in mode.iter().enumerate() {
        let c = (sign * v).max(0.0);
        if c > 0.0 {
            for (o, &w) in out.iter_mut().zip(sae.decoder_row(j)) {
                *o += c * w as f64;
            }
        }
    }
    let norm = linalg::norm(&out);
    linalg::normalized(&out, DEGENERATE_NORM).ok_or(Error::DegenerateDirection { norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sae(rng: &mut ChaCha8Rng, n: usize, d: usize) -> SaeSpec {
        SaeSpec {
            sae_id: "rand".into(),
            layer: 0,
            n_features: n,
            d_model: d,
            encoder: (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            encoder_bias: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            decoder: (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn identity_sae(d: usize) -> SaeSpec {
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        SaeSpec {
            sae_id: "eye".into(),
            layer: 0,
            n_features: d,
            d_model: d,
            encoder: eye.clone(),
            encoder_bias: vec![0.0; d],
            decoder: eye,
        }
    }

    fn trace_of(rows: &[Vec<f32>], prompt_len: usize) -> ActivationTrace {
        let d = rows[0].len();
        let flat = rows.iter().flatten().copied().collect();
        ActivationTrace::new("t", vec![0], d, vec![0; rows.len()], vec![flat], prompt_len).unwrap()
    }

    #[test]
    fn zero_input_with_nonpositive_bias_gives_zero_code() {
        let mut sae = random_sae(&mut ChaCha8Rng::seed_from_u64(1), 5, 3);
        sae.encoder_bias = vec![-0.2, 0.0, -1.0, -0.01, 0.0];
        assert_eq!(encode_token(&sae, &[0.0; 3]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identity_encoder_gives_one_hot() {
        let sae = identity_sae(4);
        assert_eq!(
            encode_token(&sae, &[1.0, 0.0, 0.0, 0.0]).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn encode_matches_hand_matvec() {
        // 4×3 encoder, h = (1, -2, 0.5); pre-activations by hand:
        // 0.5 + 0 + 0.5 + 0.125 = 1.125
        // -1 - 4 + 0 - 0.5 = -5.5 (rectified to 0)
        // 0.25 - 0.5 + 0.75 + 0 = 0.5
        // 3 + 0 - 0.5 - 2 = 0.5
        let sae = SaeSpec {
            sae_id: "h".into(),
            layer: 0,
            n_features: 4,
            d_model: 3,
            encoder: vec![
                0.5, 0.0, 1.0, //
                -1.0, 2.0, 0.0, //
                0.25, 0.25, 1.5, //
                3.0, 0.0, -1.0,
            ],
            encoder_bias: vec![0.125, -0.5, 0.0, -2.0],
            decoder: vec![0.0; 12],
        };
        let h = [1.0f32, -2.0, 0.5];
        let got = encode_token(&sae, &h).unwrap();
        let want = [1.125, 0.0, 0.5, 0.5];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let sae = identity_sae(3);
        assert!(matches!(encode_token(&sae, &[1.0; 4]), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_single_token_and_constants() {
        let sae = random_sae(&mut ChaCha8Rng::seed_from_u64(2), 6, 4);
        let h = vec![0.3f32, -0.7, 1.2, 0.05];
        let code = encode_token(&sae, &h).unwrap();
        let one = mean_pool_encode(&sae, &trace_of(std::slice::from_ref(&h), 0), 0, false).unwrap();
        assert_eq!(one.values, code);
        let two = mean_pool_encode(&sae, &trace_of(&[h.clone(), h], 0), 0, false).unwrap();
        for (a, b) in two.values.iter().zip(&code) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sae = random_sae(&mut rng, 7, 5);
        let rows: Vec<Vec<f32>> = (0..5)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let pooled = mean_pool_encode(&sae, &trace_of(&rows, 0), 0, false).unwrap();
        // Oracle: explicit triple loop.
        let mut oracle = vec![0.0f64; 7];
        for row in &rows {
            for j in 0..7 {
                let mut pre = sae.encoder_bias[j] as f64;
                for i in 0..5 {
                    pre += sae.encoder[j * 5 + i] as f64 * row[i] as f64;
                }
                oracle[j] += if pre > 0.0 { pre } else { 0.0 };
            }
        }
        for (p, o) in pooled.values.iter().zip(&oracle) {
            assert!((p - o / 5.0).abs() < 1e-9);
        }
        assert_eq!(pooled.num_tokens, 5);
    }

    #[test]
    fn pooling_skips_prompt_and_rejects_empty_span() {
        let sae = identity_sae(2);
        let t = trace_of(&[vec![5.0, 5.0], vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        let p = mean_pool_encode(&sae, &t, 0, true).unwrap();
        assert_eq!(p.values, vec![0.5, 0.5]);
        assert_eq!(p.num_tokens, 2);
        let all_prompt = trace_of(&[vec![1.0, 0.0]], 1);
        assert!(mean_pool_encode(&sae, &all_prompt, 0, true).is_err());
        assert!(mean_pool_encode(&sae, &t, 3, false).is_err());
    }

    #[test]
    fn decode_one_hot_is_normalized_decoder_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sae = random_sae(&mut rng, 5, 4);
        let mut v = vec![0.0; 5];
        v[2] = 1.0;
        let mut dmu = vec![0.0; 5];
        dmu[2] = 0.7;
        let d = decode_direction(&sae, &v, &dmu).unwrap();
        let row: Vec<f64> = sae.decoder_row(2).iter().map(|&x| x as f64).collect();
        let want = linalg::normalized(&row, 0.0).unwrap();
        for (a, b) in d.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // Negated mode is flipped back by sign alignment.
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(decode_direction(&sae, &neg, &dmu).unwrap(), d);
    }

    #[test]
    fn decode_mixed_signs_matches_hand_oracle() {
        let sae = SaeSpec {
            sae_id: "h".into(),
            layer: 0,
            n_features: 3,
            d_model: 2,
            encoder: vec![0.0; 6],
            encoder_bias: vec![0.0; 3],
            decoder: vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        };
        // v·Δμ = 0.6·1 − 0.8·1 + 0 < 0 → flip to (−0.6, 0.8, 0); clip → (0, 0.8, 0)
        // → 0.8·(0,1) → (0,1).
        let d = decode_direction(&sae, &[0.6, -0.8, 0.0], &[1.0, 1.0, 0.0]).unwrap();
        assert!((d[0] - 0.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
        // No flip: (0.6, −0.8, 0.3)·(1,0,1) > 0 → clip (0.6, 0, 0.3)
        // → 0.6·(1,0) + 0.3·(1,1) = (0.9, 0.3) → /√0.9.
        let d = decode_direction(&sae, &[0.6, -0.8, 0.3], &[1.0, 0.0, 1.0]).unwrap();
        let n = (0.9f64 * 0.9 + 0.3 * 0.3).sqrt();
        assert!((d[0] - 0.9 / n).abs() < 1e-9 && (d[1] - 0.3 / n).abs() < 1e-9);
    }

    #[test]
    fn decode_all_negative_is_degenerate() {
        let sae = identity_sae(3);
        // Aligned sign keeps the mode as is; after clipping nothing survives.
        let r = decode_direction(&sae, &[-1.0, -1.0, 0.0], &[0.0, 0.0, 0.0]);
        assert!(matches!(r, Err(Error::DegenerateDirection { .. })));
    }

    proptest! {
        #[test]
        fn encode_is_nonnegative(seed in 0u64..1000, h in proptest::collection::vec(-10.0f32..10.0, 6)) {
            let sae = random_sae(&mut ChaCha8Rng::seed_from_u64(seed), 9, 6);
            let code = encode_token(&sae, &h).unwrap();
            prop_assert!(code.iter().all(|&c| c >= 0.0));
        }

        #[test]
        fn pooling_is_permutation_invariant(seed in 0u64..500, shift in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sae = random_sae(&mut rng, 5, 3);
            let rows: Vec<Vec<f32>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let mut rotated = rows.clone();
            rotated.rotate_left(shift);
            let a = mean_pool_encode(&sae, &trace_of(&rows, 0), 0, false).unwrap();
            let b = mean_pool_encode(&sae, &trace_of(&rotated, 0), 0, false).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn decode_is_unit_scale_and_sign_invariant(
            seed in 0u64..500,
            mode in proptest::collection::vec(-1.0f64..1.0, 5),
            c in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sae = random_sae(&mut rng, 5, 4);
            let dmu: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assume!(linalg::dot(&mode, &dmu).abs() > 1e-9);
            if let Ok(d) = decode_direction(&sae, &mode, &dmu) {
                prop_assert!((linalg::norm(&d) - 1.0).abs() < 1e-12);
                let scaled: Vec<f64> = mode.iter().map(|x| x * c).collect();
                let ds = decode_direction(&sae, &scaled, &dmu).unwrap();
                let neg: Vec<f64> = mode.iter().map(|x| -x).collect();
                let dn = decode_direction(&sae, &neg, &dmu).unwrap();
                for i in 0..4 {
                    prop_assert!((d[i] - ds[i]).abs() < 1e-9);
                    prop_assert!((d[i] - dn[i]).abs() < 1e-12);
                }
            }
        }
    }
}
