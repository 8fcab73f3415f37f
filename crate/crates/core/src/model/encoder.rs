//! Patch embedding and the two encoder usage modes.
//!
//! Classification mode runs every patch token through all blocks with the
//! discriminative prompt segments prepended inside the first prompted blocks.
//! Restore mode runs only the visible patches through the pure encoder (no
//! prompt), producing the features that become restore information.

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::math::{layer_norm_backward, LayerNormCache, Scalar};
use crate::model::block::{block_backward, block_forward, final_norm_forward, BlockCache};
use crate::model::params::Model;
use crate::prompts::DiscriminativePrompt;

/// A sequence of embedded tokens and the patch index each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F> {
    /// (sequence_length, width)
    pub tokens: Array2<F>,
    /// Original patch index of each row; distinct, in `0..N`.
    pub positions: Vec<usize>,
}

impl<F> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn check_image<F: Scalar>(model: &Model<F>, image: &Array3<F>) -> Result<()> {
    let cfg = &model.config;
    let want = (cfg.channels, cfg.image_side, cfg.image_side);
    if image.dim() != want {
        return Err(Error::Config(format!(
            "image dims {:?} do not match configured {:?}",
            image.dim(),
            want
        )));
    }
    Ok(())
}

/// Raster-order per-patch pixel view of an image, (N, patch_dim).
pub fn patch_pixels<F: Scalar>(model: &Model<F>, image: &Array3<F>) -> Result<Array2<F>> {
    check_image(model, image)?;
    let cfg = &model.config;
    let ps = cfg.patch_side;
    let grid = cfg.image_side / ps;
    let mut out = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
    for gr in 0..grid {
        for gc in 0..grid {
            let patch = gr * grid + gc;
            let mut col = 0;
            for ch in 0..cfg.channels {
                for pr in 0..ps {
                    for pc in 0..ps {
                        out[[patch, col]] = image[[ch, gr * ps + pr, gc * ps + pc]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patch_pixels`]: reassemble per-patch pixels into an image.
pub fn unpatchify<F: Scalar>(model: &Model<F>, patches: &Array2<F>) -> Result<Array3<F>> {
    let cfg = &model.config;
    if patches.dim() != (cfg.num_patches(), cfg.patch_dim()) {
        return Err(Error::Shape(format!(
            "patch tensor {:?} does not match expected ({}, {})",
            patches.dim(),
            cfg.num_patches(),
            cfg.patch_dim()
        )));
    }
    let ps = cfg.patch_side;
    let grid = cfg.image_side / ps;
    let mut image = Array3::zeros((cfg.channels, cfg.image_side, cfg.image_side));
    for gr in 0..grid {
        for gc in 0..grid {
            let patch = gr * grid + gc;
            let mut col = 0;
            for ch in 0..cfg.channels {
                for pr in 0..ps {
                    for pc in 0..ps {
                        image[[ch, gr * ps + pr, gc * ps + pc]] = patches[[patch, col]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(image)
}

/// Embed every patch and add its positional encoding; raster order.
pub fn patchify<F: Scalar>(model: &Model<F>, image: &Array3<F>) -> Result<TokenSequence<F>> {
    let pixels = patch_pixels(model, image)?;
    let tokens = model.encoder.patch_embed.forward(&pixels) + &model.encoder.positions;
    Ok(TokenSequence {
        tokens,
        positions: (0..model.config.num_patches()).collect(),
    })
}

fn check_prompt<F: Scalar>(model: &Model<F>, prompt: &DiscriminativePrompt<F>) -> Result<()> {
    let cfg = &model.config;
    if prompt.segments.len() != cfg.prompted_blocks() {
        return Err(Error::Config(format!(
            "discriminative prompt has {} segments, config expects {}",
            prompt.segments.len(),
            cfg.prompted_blocks()
        )));
    }
    for seg in &prompt.segments {
        if seg.dim() != (cfg.disc_prompt_len, cfg.embed_dim) {
            return Err(Error::Config(format!(
                "prompt segment dims {:?} do not match ({}, {})",
                seg.dim(),
                cfg.disc_prompt_len,
                cfg.embed_dim
            )));
        }
    }
    Ok(())
}

pub(crate) struct ClassifyCache<F> {
    pub blocks: Vec<BlockCache<F>>,
    pub final_ln: LayerNormCache<F>,
}

pub(crate) fn classify_forward_cached<F: Scalar>(
    model: &Model<F>,
    image: &Array3<F>,
    prompt: Option<&DiscriminativePrompt<F>>,
) -> Result<(TokenSequence<F>, ClassifyCache<F>)> {
    if let Some(p) = prompt {
        check_prompt(model, p)?;
    }
    let seq = patchify(model, image)?;
    let mut x = seq.tokens;
    let mut blocks = Vec::with_capacity(model.encoder.blocks.len());
    for (i, block) in model.encoder.blocks.iter().enumerate() {
        let seg = prompt.and_then(|p| p.segments.get(i));
        let (next, cache) = block_forward(block, model.config.heads, &x, seg)?;
        blocks.push(cache);
        x = next;
    }
    let (out, final_ln) = final_norm_forward(&model.encoder.final_norm, &x);
    Ok((
        TokenSequence {
            tokens: out,
            positions: seq.positions,
        },
        ClassifyCache { blocks, final_ln },
    ))
}

/// Backprop the classification path down to the prompt segments.
/// Returns one gradient per prompted block, in block order.
pub(crate) fn classify_backward<F: Scalar>(
    model: &Model<F>,
    cache: &ClassifyCache<F>,
    d_tokens: &Array2<F>,
) -> Vec<Array2<F>> {
    let ln = layer_norm_backward(&model.encoder.final_norm.gamma, &cache.final_ln, d_tokens);
    let mut d = ln.d_input;
    let mut prompt_grads: Vec<Option<Array2<F>>> = vec![None; cache.blocks.len()];
    for (i, (block, bc)) in model
        .encoder
        .blocks
        .iter()
        .zip(cache.blocks.iter())
        .enumerate()
        .rev()
    {
        let (d_x, d_prompt, _) = block_backward(block, bc, &d, false);
        prompt_grads[i] = d_prompt;
        d = d_x;
    }
    prompt_grads.into_iter().flatten().collect()
}

/// Pure-encoder forward over only the visible patches of `plan`.
/// Token rows are ordered by ascending patch index.
pub(crate) fn restore_forward<F: Scalar>(
    model: &Model<F>,
    image: &Array3<F>,
    plan: &MaskPlan,
) -> Result<TokenSequence<F>> {
    let cfg = &model.config;
    if plan.len() != cfg.num_patches() {
        return Err(Error::Shape(format!(
            "mask plan covers {} patches, model has {}",
            plan.len(),
            cfg.num_patches()
        )));
    }
    let seq = patchify(model, image)?;
    let visible = plan.visible_sorted();
    let mut x = Array2::zeros((visible.len(), cfg.embed_dim));
    for (row, &pos) in visible.iter().enumerate() {
        x.slice_mut(s![row, ..]).assign(&seq.tokens.row(pos));
    }
    for block in &model.encoder.blocks {
        let (next, _) = block_forward(block, cfg.heads, &x, None)?;
        x = next;
    }
    let (out, _) = final_norm_forward(&model.encoder.final_norm, &x);
    Ok(TokenSequence {
        tokens: out,
        positions: visible,
    })
}

/// Encoder entry point with exactly one of two usage modes:
/// classification (`prompt` allowed, no plan) or restore extraction
/// (`plan` given, no prompt).
pub fn encoder_forward<F: Scalar>(
    model: &Model<F>,
    image: &Array3<F>,
    prompt: Option<&DiscriminativePrompt<F>>,
    plan: Option<&MaskPlan>,
) -> Result<TokenSequence<F>> {
    match (prompt, plan) {
        (Some(_), Some(_)) => Err(Error::Usage(
            "encoder cannot take a discriminative prompt and a mask plan at once".into(),
        )),
        (_, None) => classify_forward_cached(model, image, prompt).map(|(seq, _)| seq),
        (None, Some(plan)) => restore_forward(model, image, plan),
    }
}
