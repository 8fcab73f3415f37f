//! Prompt-aware multi-head self-attention.
//!
//! A prompt matrix is prepended identically to the projected queries, keys and
//! values. Outputs at the prompt positions are discarded, so the prompt-query
//! rows are never materialized: the kept rows attend over `prompt_len + seq`
//! keys while the output keeps the input sequence length.

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::math::{softmax_rows, softmax_rows_backward, Scalar};
use crate::model::params::{AttentionParams, LinearGrads};

/// Activations retained for the backward pass.
pub struct AttentionCache<F> {
    /// Input to the QKV projections, (S, D).
    pub x_in: Array2<F>,
    /// (S, D)
    pub queries: Array2<F>,
    /// (L + S, D)
    pub keys_full: Array2<F>,
    /// (L + S, D)
    pub values_full: Array2<F>,
    /// Per-head attention probabilities, each (S, L + S).
    pub probs: Vec<Array2<F>>,
    /// Pre-output-projection context, (S, D).
    pub context: Array2<F>,
    pub prompt_len: usize,
    pub heads: usize,
}

pub struct AttentionGrads<F> {
    pub query: LinearGrads<F>,
    pub key: LinearGrads<F>,
    pub value: LinearGrads<F>,
    pub output: LinearGrads<F>,
}

fn prepend<F: Scalar>(prompt: Option<&Array2<F>>, base: Array2<F>) -> Array2<F> {
    match prompt {
        None => base,
        Some(p) => {
            let mut full = Array2::zeros((p.nrows() + base.nrows(), base.ncols()));
            full.slice_mut(s![..p.nrows(), ..]).assign(p);
            full.slice_mut(s![p.nrows().., ..]).assign(&base);
            full
        }
    }
}

/// Forward pass. `x` is the (already normalized) input sequence, (S, D).
pub fn attention_forward<F: Scalar>(
    params: &AttentionParams<F>,
    heads: usize,
    x: &Array2<F>,
    prompt: Option<&Array2<F>>,
) -> Result<(Array2<F>, AttentionCache<F>)> {
    let (seq, dim) = x.dim();
    if let Some(p) = prompt {
        if p.ncols() != dim {
            return Err(Error::Config(format!(
                "prompt width {} does not match block width {}",
                p.ncols(),
                dim
            )));
        }
    }
    let prompt_len = prompt.map_or(0, |p| p.nrows());
    let head_dim = dim / heads;
    let scale = F::of(1.0 / (head_dim as f64).sqrt());

    let queries = params.query.forward(x);
    let keys_full = prepend(prompt, params.key.forward(x));
    let values_full = prepend(prompt, params.value.forward(x));

    let mut context = Array2::zeros((seq, dim));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let q_h = queries.slice(cols);
        let k_h = keys_full.slice(cols);
        let v_h = values_full.slice(cols);
        let scores = q_h.dot(&k_h.t()).mapv_into(|v| v * scale);
        let p_h = softmax_rows(&scores);
        let ctx_h = p_h.dot(&v_h);
        context.slice_mut(cols).assign(&ctx_h);
        probs.push(p_h);
    }
    let out = params.output.forward(&context);
    let cache = AttentionCache {
        x_in: x.clone(),
        queries,
        keys_full,
        values_full,
        probs,
        context,
        prompt_len,
        heads,
    };
    Ok((out, cache))
}

/// Backward pass. Returns the gradient w.r.t. the input sequence, the prompt
/// (when one was prepended), and optionally the projection parameters.
pub fn attention_backward<F: Scalar>(
    params: &AttentionParams<F>,
    cache: &AttentionCache<F>,
    d_out: &Array2<F>,
    want_params: bool,
) -> (Array2<F>, Option<Array2<F>>, Option<AttentionGrads<F>>) {
    let (seq, dim) = cache.x_in.dim();
    let heads = cache.heads;
    let head_dim = dim / heads;
    let lp = cache.prompt_len;
    let scale = F::of(1.0 / (head_dim as f64).sqrt());

    let (d_context, d_output_lin) =
        LinearGrads::backward(&params.output, &cache.context, d_out, want_params);

    let mut d_queries = Array2::zeros((seq, dim));
    let mut d_keys_full = Array2::zeros((lp + seq, dim));
    let mut d_values_full = Array2::zeros((lp + seq, dim));
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let p_h = &cache.probs[h];
        let d_ctx_h = d_context.slice(cols);
        let v_h = cache.values_full.slice(cols);
        let k_h = cache.keys_full.slice(cols);
        let q_h = cache.queries.slice(cols);

        let d_p = d_ctx_h.dot(&v_h.t());
        d_values_full
            .slice_mut(cols)
            .assign(&p_h.t().dot(&d_ctx_h));
        let d_scores = softmax_rows_backward(p_h, &d_p).mapv_into(|v| v * scale);
        d_queries.slice_mut(cols).assign(&d_scores.dot(&k_h));
        d_keys_full.slice_mut(cols).assign(&d_scores.t().dot(&q_h));
    }

    let d_prompt = (lp > 0).then(|| {
        (&d_keys_full.slice(s![..lp, ..]) + &d_values_full.slice(s![..lp, ..])).to_owned()
    });
    let d_k = d_keys_full.slice(s![lp.., ..]).to_owned();
    let d_v = d_values_full.slice(s![lp.., ..]).to_owned();

    let (d_x_q, d_query_lin) =
        LinearGrads::backward(&params.query, &cache.x_in, &d_queries, want_params);
    let (d_x_k, d_key_lin) = LinearGrads::backward(&params.key, &cache.x_in, &d_k, want_params);
    let (d_x_v, d_value_lin) =
        LinearGrads::backward(&params.value, &cache.x_in, &d_v, want_params);
    let d_x = d_x_q + d_x_k + d_x_v;

    let grads = want_params.then(|| AttentionGrads {
        query: d_query_lin.unwrap(),
        key: d_key_lin.unwrap(),
        value: d_value_lin.unwrap(),
        output: d_output_lin.unwrap(),
    });
    (d_x, d_prompt, grads)
}

/// Attention over a prompt-extended sequence with prompt outputs discarded:
/// the result has the same length as `x`.
pub fn msa_prompted<F: Scalar>(
    params: &AttentionParams<F>,
    heads: usize,
    x: &Array2<F>,
    prompt: Option<&Array2<F>>,
) -> Result<Array2<F>> {
    attention_forward(params, heads, x, prompt).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample_params(dim: usize, seed: u64) -> AttentionParams<f64> {
        let mut rng = stream(seed, &[]);
        AttentionParams::init(&mut rng, dim, 0.3)
    }

    fn sample_x(seq: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[1]);
        Array2::from_shape_fn((seq, dim), |_| crate::rng::normal_f64(&mut rng, 0.0, 1.0))
    }

    #[test]
    fn output_preserves_sequence_length() {
        let params = sample_params(8, 1);
        let x = sample_x(65, 8, 2);
        let prompt = sample_x(20, 8, 3);
        let (out, cache) = attention_forward(&params, 2, &x, Some(&prompt)).unwrap();
        assert_eq!(out.dim(), (65, 8));
        assert_eq!(cache.keys_full.nrows(), 85);
    }

    #[test]
    fn absent_prompt_equals_plain_msa() {
        let params = sample_params(8, 4);
        let x = sample_x(6, 8, 5);
        let with_none = msa_prompted(&params, 2, &x, None).unwrap();
        // plain MSA computed explicitly with no prepended rows
        let (plain, _) = attention_forward(&params, 2, &x, None).unwrap();
        assert_eq!(with_none, plain);
    }

    #[test]
    fn zero_prompt_differs_from_absent_prompt() {
        let params = sample_params(8, 6);
        let x = sample_x(6, 8, 7);
        let zeros = Array2::zeros((3, 8));
        let with_zero = msa_prompted(&params, 2, &x, Some(&zeros)).unwrap();
        let without = msa_prompted(&params, 2, &x, None).unwrap();
        let diff: f64 = (&with_zero - &without).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-6, "zero prompt keys should still draw softmax mass");
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let params = sample_params(8, 8);
        let x = sample_x(4, 8, 9);
        let prompt = Array2::<f64>::zeros((2, 6));
        assert!(matches!(
            msa_prompted(&params, 2, &x, Some(&prompt)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_matches_finite_difference() {
        let dim = 6;
        let heads = 2;
        let params = sample_params(dim, 10);
        let x = sample_x(4, dim, 11);
        let prompt = sample_x(3, dim, 12);
        let d_out = sample_x(4, dim, 13);

        let (_, cache) = attention_forward(&params, heads, &x, Some(&prompt)).unwrap();
        let (d_x, d_prompt, grads) = attention_backward(&params, &cache, &d_out, true);
        let d_prompt = d_prompt.unwrap();
        let grads = grads.unwrap();

        let loss = |x: &Array2<f64>, p: &Array2<f64>, params: &AttentionParams<f64>| -> f64 {
            let (out, _) = attention_forward(params, heads, x, Some(p)).unwrap();
            out.iter().zip(d_out.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..dim {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(&xp, &prompt, &params) - loss(&xm, &prompt, &params)) / (2.0 * h);
                assert!((d_x[[r, c]] - fd).abs() < 1e-7, "d_x[{r},{c}]");
            }
        }
        for r in 0..3 {
            for c in 0..dim {
                let mut pp = prompt.clone();
                pp[[r, c]] += h;
                let mut pm = prompt.clone();
                pm[[r, c]] -= h;
                let fd = (loss(&x, &pp, &params) - loss(&x, &pm, &params)) / (2.0 * h);
                assert!((d_prompt[[r, c]] - fd).abs() < 1e-7, "d_prompt[{r},{c}]");
            }
        }
        // spot-check one projection weight gradient
        for (rc, grad) in [((0, 1), &grads.query), ((2, 3), &grads.key)] {
            let (r, c) = rc;
            let mut pp = params.clone();
            let mut pm = params.clone();
            let (gp, gm) = if std::ptr::eq(grad, &grads.query) {
                (&mut pp.query.weight, &mut pm.query.weight)
            } else {
                (&mut pp.key.weight, &mut pm.key.weight)
            };
            gp[[r, c]] += h;
            gm[[r, c]] -= h;
            let fd = (loss(&x, &prompt, &pp) - loss(&x, &prompt, &pm)) / (2.0 * h);
            assert!((grad.weight[[r, c]] - fd).abs() < 1e-7);
        }
    }
}
