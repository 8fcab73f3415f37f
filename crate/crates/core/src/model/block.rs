//! Pre-norm transformer block: LN -> prompted MSA -> residual, LN -> MLP -> residual.

use ndarray::Array2;

use crate::error::Result;
use crate::math::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, LayerNormCache, Scalar,
};
use crate::model::attention::{
    attention_backward, attention_forward, AttentionCache, AttentionGrads,
};
use crate::model::params::{BlockParams, LayerNormParams, LinearGrads};

pub struct BlockCache<F> {
    pub ln1: LayerNormCache<F>,
    pub attn: AttentionCache<F>,
    /// After the attention residual, (S, D).
    pub x_mid: Array2<F>,
    pub ln2: LayerNormCache<F>,
    /// LN2 output, input of fc1.
    pub x_norm2: Array2<F>,
    /// fc1 pre-activation.
    pub h_pre: Array2<F>,
    /// gelu(h_pre), input of fc2.
    pub h_act: Array2<F>,
}

pub struct BlockGrads<F> {
    pub norm1_gamma: ndarray::Array1<F>,
    pub norm1_beta: ndarray::Array1<F>,
    pub attn: AttentionGrads<F>,
    pub norm2_gamma: ndarray::Array1<F>,
    pub norm2_beta: ndarray::Array1<F>,
    pub fc1: LinearGrads<F>,
    pub fc2: LinearGrads<F>,
}

pub fn block_forward<F: Scalar>(
    params: &BlockParams<F>,
    heads: usize,
    x: &Array2<F>,
    prompt: Option<&Array2<F>>,
) -> Result<(Array2<F>, BlockCache<F>)> {
    let (x_norm1, ln1) = layer_norm(x, &params.norm1.gamma, &params.norm1.beta);
    let (attn_out, attn) = attention_forward(&params.attn, heads, &x_norm1, prompt)?;
    let x_mid = x + &attn_out;

    let (x_norm2, ln2) = layer_norm(&x_mid, &params.norm2.gamma, &params.norm2.beta);
    let h_pre = params.fc1.forward(&x_norm2);
    let h_act = h_pre.mapv(gelu);
    let mlp_out = params.fc2.forward(&h_act);
    let x_out = &x_mid + &mlp_out;

    Ok((
        x_out,
        BlockCache {
            ln1,
            attn,
            x_mid,
            ln2,
            x_norm2,
            h_pre,
            h_act,
        },
    ))
}

/// Returns (d_input, d_prompt, parameter grads when requested).
pub fn block_backward<F: Scalar>(
    params: &BlockParams<F>,
    cache: &BlockCache<F>,
    d_out: &Array2<F>,
    want_params: bool,
) -> (Array2<F>, Option<Array2<F>>, Option<BlockGrads<F>>) {
    // MLP branch
    let (d_h_act, d_fc2) = LinearGrads::backward(&params.fc2, &cache.h_act, d_out, want_params);
    let d_h_pre = &d_h_act * &cache.h_pre.mapv(gelu_grad);
    let (d_x_norm2, d_fc1) =
        LinearGrads::backward(&params.fc1, &cache.x_norm2, &d_h_pre, want_params);
    let ln2_grads = layer_norm_backward(&params.norm2.gamma, &cache.ln2, &d_x_norm2);
    let d_x_mid = d_out + &ln2_grads.d_input;

    // attention branch
    let (d_x_norm1, d_prompt, d_attn) =
        attention_backward(&params.attn, &cache.attn, &d_x_mid, want_params);
    let ln1_grads = layer_norm_backward(&params.norm1.gamma, &cache.ln1, &d_x_norm1);
    let d_x = &d_x_mid + &ln1_grads.d_input;

    let grads = want_params.then(|| BlockGrads {
        norm1_gamma: ln1_grads.d_gamma,
        norm1_beta: ln1_grads.d_beta,
        attn: d_attn.unwrap(),
        norm2_gamma: ln2_grads.d_gamma,
        norm2_beta: ln2_grads.d_beta,
        fc1: d_fc1.unwrap(),
        fc2: d_fc2.unwrap(),
    });
    (d_x, d_prompt, grads)
}

/// Layer norm applied outside a block (the encoder/decoder final norm).
pub fn final_norm_forward<F: Scalar>(
    params: &LayerNormParams<F>,
    x: &Array2<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    layer_norm(x, &params.gamma, &params.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;

    fn sample(seq: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[]);
        Array2::from_shape_fn((seq, dim), |_| crate::rng::normal_f64(&mut rng, 0.0, 0.8))
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = stream(3, &[]);
        let params = BlockParams::<f64>::init(&mut rng, 8, 0.2);
        let x = sample(5, 8, 4);
        let prompt = sample(2, 8, 5);
        let (out, _) = block_forward(&params, 2, &x, Some(&prompt)).unwrap();
        assert_eq!(out.dim(), (5, 8));
    }

    #[test]
    fn block_backward_matches_finite_difference() {
        let mut rng = stream(6, &[]);
        let params = BlockParams::<f64>::init(&mut rng, 6, 0.25);
        let x = sample(4, 6, 7);
        let prompt = sample(2, 6, 8);
        let d_out = sample(4, 6, 9);

        let (_, cache) = block_forward(&params, 2, &x, Some(&prompt)).unwrap();
        let (d_x, d_prompt, grads) = block_backward(&params, &cache, &d_out, true);
        let d_prompt = d_prompt.unwrap();
        let grads = grads.unwrap();

        let loss = |x: &Array2<f64>, p: &Array2<f64>, params: &BlockParams<f64>| -> f64 {
            let (out, _) = block_forward(params, 2, x, Some(p)).unwrap();
            out.iter().zip(d_out.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..6 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(&xp, &prompt, &params) - loss(&xm, &prompt, &params)) / (2.0 * h);
                assert!((d_x[[r, c]] - fd).abs() < 1e-6, "d_x[{r},{c}]");
            }
        }
        for r in 0..2 {
            for c in 0..6 {
                let mut pp = prompt.clone();
                pp[[r, c]] += h;
                let mut pm = prompt.clone();
                pm[[r, c]] -= h;
                let fd = (loss(&x, &pp, &params) - loss(&x, &pm, &params)) / (2.0 * h);
                assert!((d_prompt[[r, c]] - fd).abs() < 1e-6, "d_prompt[{r},{c}]");
            }
        }
        // one coordinate from each parameter family
        let check = |get: &dyn Fn(&mut BlockParams<f64>) -> &mut f64, analytic: f64| {
            let mut pp = params.clone();
            *get(&mut pp) += h;
            let mut pm = params.clone();
            *get(&mut pm) -= h;
            let fd = (loss(&x, &prompt, &pp) - loss(&x, &prompt, &pm)) / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-6);
        };
        check(&|p| &mut p.fc1.weight[[1, 3]], grads.fc1.weight[[1, 3]]);
        check(&|p| &mut p.fc2.weight[[5, 2]], grads.fc2.weight[[5, 2]]);
        check(&|p| &mut p.fc2.bias[4], grads.fc2.bias[4]);
        check(&|p| &mut p.norm1.gamma[2], grads.norm1_gamma[2]);
        check(&|p| &mut p.norm2.beta[1], grads.norm2_beta[1]);
        check(&|p| &mut p.attn.value.weight[[0, 5]], grads.attn.value.weight[[0, 5]]);
        check(&|p| &mut p.attn.output.bias[3], grads.attn.output.bias[3]);
    }
}
