//! Random masking, restore information extraction and image reconstruction.
//!
//! Restore information is the encoder output at the visible patches plus the
//! bookkeeping (`restore_ids`) to put every token back at its original patch
//! position, with mask tokens filling the holes.

use ndarray::{s, Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::math::Scalar;
use crate::model::decoder::decoder_forward;
use crate::model::encoder::{restore_forward, unpatchify, TokenSequence};
use crate::model::params::{LinearGrads, Model};
use crate::prompts::ReconstructivePrompt;
use crate::rng::{permutation, Prng};

/// Which patches an encoder pass gets to see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// A bijection on `0..N`; the first `visible_count` entries are visible.
    pub permutation: Vec<usize>,
    pub visible_count: usize,
}

impl MaskPlan {
    pub fn new(permutation: Vec<usize>, visible_count: usize) -> Result<Self> {
        let n = permutation.len();
        let mut seen = vec![false; n];
        for &p in &permutation {
            if p >= n || seen[p] {
                return Err(Error::Config("mask plan permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        if visible_count == 0 || visible_count > n {
            return Err(Error::Config(format!(
                "visible_count {visible_count} outside 1..={n}"
            )));
        }
        Ok(Self {
            permutation,
            visible_count,
        })
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    /// Visible patch indices in ascending order.
    pub fn visible_sorted(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.permutation[..self.visible_count].to_vec();
        v.sort_unstable();
        v
    }

    /// Masked patch indices in ascending order.
    pub fn masked_sorted(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.permutation[self.visible_count..].to_vec();
        m.sort_unstable();
        m
    }

    /// For every original patch position, its slot in the canonical
    /// `[visible ascending, masked ascending]` ordering.
    pub fn restore_ids(&self) -> Vec<usize> {
        let n = self.len();
        let mut ids = vec![0usize; n];
        for (slot, &pos) in self.visible_sorted().iter().enumerate() {
            ids[pos] = slot;
        }
        for (offset, &pos) in self.masked_sorted().iter().enumerate() {
            ids[pos] = self.visible_count + offset;
        }
        ids
    }
}

/// Sample a fresh mask plan: a uniformly random permutation with
/// `round((1 - mask_ratio) * n)` visible patches.
pub fn make_mask_plan(n: usize, mask_ratio: f32, rng: &mut Prng) -> Result<MaskPlan> {
    if n == 0 {
        return Err(Error::Config("mask plan needs at least one patch".into()));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask_ratio {mask_ratio} outside [0, 1]")));
    }
    let visible = ((1.0 - mask_ratio as f64) * n as f64).round() as usize;
    if visible == 0 {
        return Err(Error::Config(format!(
            "mask_ratio {mask_ratio} leaves no visible patches out of {n}"
        )));
    }
    MaskPlan::new(permutation(rng, n), visible)
}

/// Encoded visible tokens plus the ordering information needed to rebuild the
/// full-length sequence; the unit of client-to-server rehearsal payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RestoreInfo<F> {
    /// (visible_count, embed_dim), rows ordered by ascending patch index.
    pub visible_tokens: Array2<F>,
    /// Slot of every original patch position, length N.
    pub restore_ids: Vec<usize>,
    pub label: u32,
    /// Hash of the model config that produced the tokens.
    pub config_hash: u64,
}

impl<F> RestoreInfo<F> {
    pub fn visible_count(&self) -> usize {
        self.visible_tokens.nrows()
    }

    pub fn num_patches(&self) -> usize {
        self.restore_ids.len()
    }

    /// Patch positions that carry a real token (ascending).
    pub fn visible_positions(&self) -> Vec<usize> {
        let vc = self.visible_count();
        (0..self.num_patches())
            .filter(|&p| self.restore_ids[p] < vc)
            .collect()
    }

    fn check_ids(&self) -> Result<()> {
        let n = self.num_patches();
        let vc = self.visible_count();
        if vc == 0 || vc > n {
            return Err(Error::Integrity(format!(
                "restore info has {vc} visible tokens for {n} patches"
            )));
        }
        let mut seen = vec![false; n];
        for &id in &self.restore_ids {
            if id >= n || seen[id] {
                return Err(Error::Integrity("restore ids are not a bijection".into()));
            }
            seen[id] = true;
        }
        Ok(())
    }
}

/// A decoded image with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedImage<F> {
    pub pixels: Array3<F>,
    pub label: u32,
}

/// Run the pure encoder over the plan's visible patches and package the
/// result as labeled restore information.
pub fn extract_restore<F: Scalar>(
    model: &Model<F>,
    image: &Array3<F>,
    label: u32,
    plan: &MaskPlan,
) -> Result<RestoreInfo<F>> {
    let seq = restore_forward(model, image, plan)?;
    Ok(RestoreInfo {
        visible_tokens: seq.tokens,
        restore_ids: plan.restore_ids(),
        label,
        config_hash: model.config.content_hash(),
    })
}

pub(crate) struct AssembleCache<F> {
    /// Raw visible tokens, for the embed-projection gradient.
    pub visible_raw: Array2<F>,
    /// For each output row: Some(visible row) or None for a mask token.
    pub row_source: Vec<Option<usize>>,
}

pub(crate) fn assemble_for_decoder_cached<F: Scalar>(
    restore: &RestoreInfo<F>,
    model: &Model<F>,
) -> Result<(TokenSequence<F>, AssembleCache<F>)> {
    restore.check_ids()?;
    let cfg = &model.config;
    if restore.num_patches() != cfg.num_patches() {
        return Err(Error::Shape(format!(
            "restore info covers {} patches, model has {}",
            restore.num_patches(),
            cfg.num_patches()
        )));
    }
    if restore.visible_tokens.ncols() != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "restore tokens have width {}, encoder width is {}",
            restore.visible_tokens.ncols(),
            cfg.embed_dim
        )));
    }
    let vc = restore.visible_count();
    let projected = model.decoder.embed.forward(&restore.visible_tokens);
    let n = cfg.num_patches();
    let mut tokens = Array2::zeros((n, cfg.decoder_dim));
    let mut row_source = vec![None; n];
    for pos in 0..n {
        let slot = restore.restore_ids[pos];
        if slot < vc {
            tokens.slice_mut(s![pos, ..]).assign(&projected.row(slot));
            row_source[pos] = Some(slot);
        } else {
            tokens
                .slice_mut(s![pos, ..])
                .assign(&model.decoder.mask_token);
        }
    }
    Ok((
        TokenSequence {
            tokens,
            positions: (0..n).collect(),
        },
        AssembleCache {
            visible_raw: restore.visible_tokens.clone(),
            row_source,
        },
    ))
}

/// Rebuild a full-length decoder input: width-projected visible tokens at
/// their original positions, the learned mask token everywhere else.
pub fn assemble_for_decoder<F: Scalar>(
    restore: &RestoreInfo<F>,
    model: &Model<F>,
) -> Result<TokenSequence<F>> {
    assemble_for_decoder_cached(restore, model).map(|(seq, _)| seq)
}

/// Gradients of the assembly inputs given gradients of the assembled tokens.
pub(crate) fn assemble_backward<F: Scalar>(
    model: &Model<F>,
    cache: &AssembleCache<F>,
    d_tokens: &Array2<F>,
) -> (LinearGrads<F>, Array1<F>) {
    let vc = cache.visible_raw.nrows();
    let dec_dim = d_tokens.ncols();
    let mut d_projected = Array2::zeros((vc, dec_dim));
    let mut d_mask_token = Array1::zeros(dec_dim);
    for (row, source) in cache.row_source.iter().enumerate() {
        match source {
            Some(slot) => {
                for c in 0..dec_dim {
                    d_projected[[*slot, c]] = d_projected[[*slot, c]] + d_tokens[[row, c]];
                }
            }
            None => {
                for c in 0..dec_dim {
                    d_mask_token[c] = d_mask_token[c] + d_tokens[[row, c]];
                }
            }
        }
    }
    let (_, embed_grads) = LinearGrads::backward(
        &model.decoder.embed,
        &cache.visible_raw,
        &d_projected,
        true,
    );
    (embed_grads.unwrap(), d_mask_token)
}

/// Decode restore information back to an image:
/// `unpatchify(decoder(assemble(restore), prompt))`, label carried through.
pub fn reconstruct<F: Scalar>(
    model: &Model<F>,
    restore: &RestoreInfo<F>,
    prompt: Option<&ReconstructivePrompt<F>>,
) -> Result<ReconstructedImage<F>> {
    let seq = assemble_for_decoder(restore, model)?;
    let patches = decoder_forward(model, &seq, prompt)?;
    Ok(ReconstructedImage {
        pixels: unpatchify(model, &patches)?,
        label: restore.label,
    })
}
