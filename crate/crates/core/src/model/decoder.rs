//! Decoder: reassembled token sequences back to per-patch pixels.
//!
//! The reconstructive prompt is prepended only inside the first decoder block.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::math::{layer_norm_backward, LayerNormCache, Scalar};
use crate::model::block::{block_backward, block_forward, final_norm_forward, BlockCache};
use crate::model::encoder::TokenSequence;
use crate::model::params::{DecoderParams, LinearGrads, Model};
use crate::prompts::ReconstructivePrompt;

pub struct DecoderCache<F> {
    pub blocks: Vec<BlockCache<F>>,
    pub final_ln: LayerNormCache<F>,
    /// Post-final-norm tokens, input of the prediction head.
    pub final_tokens: Array2<F>,
}

/// Gradients of every decoder parameter; only used during decoder pre-training.
pub struct DecoderGrads<F> {
    pub embed: LinearGrads<F>,
    pub mask_token: Array1<F>,
    pub blocks: Vec<crate::model::block::BlockGrads<F>>,
    pub final_norm_gamma: Array1<F>,
    pub final_norm_beta: Array1<F>,
    pub head: LinearGrads<F>,
}

fn check_tokens<F: Scalar>(model: &Model<F>, tokens: &TokenSequence<F>) -> Result<()> {
    let cfg = &model.config;
    if tokens.len() != cfg.num_patches() {
        return Err(Error::Shape(format!(
            "decoder expects {} tokens after mask insertion, got {}",
            cfg.num_patches(),
            tokens.len()
        )));
    }
    if tokens.tokens.ncols() != cfg.decoder_dim {
        return Err(Error::Shape(format!(
            "decoder tokens have width {}, expected {}",
            tokens.tokens.ncols(),
            cfg.decoder_dim
        )));
    }
    Ok(())
}

pub(crate) fn decoder_forward_cached<F: Scalar>(
    model: &Model<F>,
    tokens: &TokenSequence<F>,
    prompt: Option<&ReconstructivePrompt<F>>,
) -> Result<(Array2<F>, DecoderCache<F>)> {
    check_tokens(model, tokens)?;
    let cfg = &model.config;
    if let Some(p) = prompt {
        if p.tokens.dim() != (cfg.recon_prompt_len, cfg.decoder_dim) {
            return Err(Error::Config(format!(
                "reconstructive prompt dims {:?} do not match ({}, {})",
                p.tokens.dim(),
                cfg.recon_prompt_len,
                cfg.decoder_dim
            )));
        }
    }
    let dec = &model.decoder;
    let mut x = tokens.tokens.clone();
    for (row, &pos) in tokens.positions.iter().enumerate() {
        let enc = dec.positions.row(pos);
        for c in 0..cfg.decoder_dim {
            x[[row, c]] = x[[row, c]] + enc[c];
        }
    }
    let mut blocks = Vec::with_capacity(dec.blocks.len());
    for (i, block) in dec.blocks.iter().enumerate() {
        let seg = if i == 0 {
            prompt.map(|p| &p.tokens)
        } else {
            None
        };
        let (next, cache) = block_forward(block, cfg.heads, &x, seg)?;
        blocks.push(cache);
        x = next;
    }
    let (final_tokens, final_ln) = final_norm_forward(&dec.final_norm, &x);
    let pixels = dec.head.forward(&final_tokens);
    Ok((
        pixels,
        DecoderCache {
            blocks,
            final_ln,
            final_tokens,
        },
    ))
}

/// Decode a full-length token sequence into per-patch pixels, (N, patch_dim).
pub fn decoder_forward<F: Scalar>(
    model: &Model<F>,
    tokens: &TokenSequence<F>,
    prompt: Option<&ReconstructivePrompt<F>>,
) -> Result<Array2<F>> {
    decoder_forward_cached(model, tokens, prompt).map(|(px, _)| px)
}

/// Backprop from per-patch pixel gradients.
/// Returns the gradient w.r.t. the assembled input tokens, the reconstructive
/// prompt (if one was used), and all decoder parameters when requested.
pub(crate) fn decoder_backward<F: Scalar>(
    dec: &DecoderParams<F>,
    cache: &DecoderCache<F>,
    d_pixels: &Array2<F>,
    want_params: bool,
) -> (Array2<F>, Option<Array2<F>>, Option<PartialDecoderGrads<F>>) {
    let (d_final_tokens, d_head) =
        LinearGrads::backward(&dec.head, &cache.final_tokens, d_pixels, want_params);
    let ln = layer_norm_backward(&dec.final_norm.gamma, &cache.final_ln, &d_final_tokens);
    let mut d = ln.d_input;
    let mut d_prompt = None;
    let mut block_grads = Vec::new();
    for (i, (block, bc)) in dec.blocks.iter().zip(cache.blocks.iter()).enumerate().rev() {
        let (d_x, dp, grads) = block_backward(block, bc, &d, want_params);
        if i == 0 {
            d_prompt = dp;
        }
        if let Some(g) = grads {
            block_grads.push(g);
        }
        d = d_x;
    }
    block_grads.reverse();
    let partial = want_params.then(|| PartialDecoderGrads {
        blocks: block_grads,
        final_norm_gamma: ln.d_gamma,
        final_norm_beta: ln.d_beta,
        head: d_head.unwrap(),
    });
    (d, d_prompt, partial)
}

/// Decoder gradients minus the embed/mask-token pieces, which are produced by
/// the assembly backward in the masking module.
pub(crate) struct PartialDecoderGrads<F> {
    pub blocks: Vec<crate::model::block::BlockGrads<F>>,
    pub final_norm_gamma: Array1<F>,
    pub final_norm_beta: Array1<F>,
    pub head: LinearGrads<F>,
}
