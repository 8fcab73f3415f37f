//! Client-side local update: joint prompt/classifier optimization on private
//! task data, then extraction of labeled restore information for upload.

use ndarray::Array3;
use rayon::prelude::*;

use crate::data::Sample;
use crate::error::Result;
use crate::loss::{ce_loss, mse_loss, LossPixels};
use crate::masking::{assemble_for_decoder, extract_restore, make_mask_plan, MaskPlan, RestoreInfo};
use crate::math::Scalar;
use crate::model::classifier::{classify_backward, classify_cached};
use crate::model::decoder::{decoder_backward, decoder_forward_cached};
use crate::model::encoder::{classify_backward as encoder_prompt_backward, classify_forward_cached, patch_pixels};
use crate::model::params::{ClassifierParams, Model};
use crate::optim::{AdamOptions, AdamState};
use crate::prompts::{add_scaled, flatten, unflatten, DiscriminativePrompt, TransmittedParams};
use crate::rng::{sample_indices, stream, Prng};

/// One client's view of a round: its private slice and a private rng stream.
pub struct ClientState<'a, F> {
    pub client_id: usize,
    /// D_k^t with labels already in the global head index space.
    pub samples: Vec<Sample<'a, F>>,
    /// Derived from (run seed, round, client id).
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LocalUpdateOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Restore records to extract after training (u).
    pub restore_count: usize,
    pub loss_pixels: LossPixels,
    /// When false the reconstructive prompt is removed entirely: decodes run
    /// unprompted and its coordinates receive no gradient.
    pub use_recon_prompt: bool,
}

impl Default for LocalUpdateOptions {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            restore_count: 4,
            loss_pixels: LossPixels::All,
            use_recon_prompt: true,
        }
    }
}

pub struct LocalUpdateOutput<F> {
    pub params: TransmittedParams<F>,
    /// R_k^t, exactly `restore_count` records.
    pub restore_set: Vec<RestoreInfo<F>>,
    /// Optimization steps taken: ceil(n / batch) * epochs.
    pub steps: usize,
    /// Mean per-example loss for each local epoch.
    pub epoch_losses: Vec<f64>,
    /// |D_k^t|, the FedAvg weight.
    pub samples: usize,
}

/// Loss and gradients of the classification path for one example.
fn classification_example<F: Scalar>(
    model: &Model<F>,
    disc: &DiscriminativePrompt<F>,
    classifier: &ClassifierParams<F>,
    image: &Array3<F>,
    label: u32,
) -> Result<(F, Vec<ndarray::Array2<F>>, ClassifierParams<F>)> {
    let (features, cache) = classify_forward_cached(model, image, Some(disc))?;
    let (logits, pooled) = classify_cached(&features, classifier)?;
    let (loss, d_logits) = ce_loss(&logits, label as usize)?;
    let (clf_grads, d_tokens) = classify_backward(classifier, &pooled, features.len(), &d_logits);
    let prompt_grads = encoder_prompt_backward(model, &cache, &d_tokens);
    Ok((loss, prompt_grads, clf_grads))
}

/// Loss (and prompt gradient, when prompted) of the reconstruction path.
fn reconstruction_example<F: Scalar>(
    model: &Model<F>,
    w: &TransmittedParams<F>,
    image: &Array3<F>,
    label: u32,
    plan: &MaskPlan,
    pixels: LossPixels,
    use_prompt: bool,
) -> Result<(F, Option<ndarray::Array2<F>>)> {
    let restore = extract_restore(model, image, label, plan)?;
    let seq = assemble_for_decoder(&restore, model)?;
    let prompt = use_prompt.then_some(&w.recon);
    let (pred, cache) = decoder_forward_cached(model, &seq, prompt)?;
    let target = patch_pixels(model, image)?;
    let (loss, d_pred) = mse_loss(&pred, &target, pixels, &plan.masked_sorted())?;
    if !use_prompt {
        return Ok((loss, None));
    }
    let (_, d_prompt, _) = decoder_backward(&model.decoder, &cache, &d_pred, false);
    Ok((loss, d_prompt))
}

pub struct ClientLossOutput<F> {
    /// Sum over the batch of cross-entropy plus reconstruction loss.
    pub loss: F,
    /// Gradients of the sum w.r.t. the transmitted parameters only.
    pub grads: TransmittedParams<F>,
    pub ce_sum: F,
    pub mse_sum: F,
}

/// Joint loss of a batch: prompted-encoder cross-entropy plus masked
/// reconstruction error, with gradients w.r.t. w = (prompts, classifier).
/// `plans` supplies one mask plan per batch element.
pub fn client_loss<F: Scalar>(
    model: &Model<F>,
    w: &TransmittedParams<F>,
    batch: &[Sample<'_, F>],
    plans: &[MaskPlan],
    pixels: LossPixels,
    use_recon_prompt: bool,
) -> Result<ClientLossOutput<F>> {
    assert_eq!(batch.len(), plans.len(), "one mask plan per example");
    let per_example: Vec<Result<_>> = batch
        .par_iter()
        .zip(plans.par_iter())
        .map(|(sample, plan)| {
            let (ce, prompt_grads, clf_grads) =
                classification_example(model, &w.disc, &w.classifier, sample.image, sample.label)?;
            let (mse, recon_grad) = reconstruction_example(
                model,
                w,
                sample.image,
                sample.label,
                plan,
                pixels,
                use_recon_prompt,
            )?;
            Ok((ce, mse, prompt_grads, clf_grads, recon_grad))
        })
        .collect();

    let mut grads = w.zeros_like();
    let mut ce_sum = F::zero();
    let mut mse_sum = F::zero();
    for item in per_example {
        let (ce, mse, prompt_grads, clf_grads, recon_grad) = item?;
        ce_sum = ce_sum + ce;
        mse_sum = mse_sum + mse;
        for (acc, g) in grads.disc.segments.iter_mut().zip(prompt_grads.iter()) {
            acc.zip_mut_with(g, |a, &b| *a = *a + b);
        }
        grads
            .classifier
            .weight
            .zip_mut_with(&clf_grads.weight, |a, &b| *a = *a + b);
        grads
            .classifier
            .bias
            .zip_mut_with(&clf_grads.bias, |a, &b| *a = *a + b);
        if let Some(g) = recon_grad {
            grads.recon.tokens.zip_mut_with(&g, |a, &b| *a = *a + b);
        }
    }
    Ok(ClientLossOutput {
        loss: ce_sum + mse_sum,
        grads,
        ce_sum,
        mse_sum,
    })
}

fn fresh_plans<F: Scalar>(
    model: &Model<F>,
    rng: &mut Prng,
    count: usize,
) -> Result<Vec<MaskPlan>> {
    (0..count)
        .map(|_| make_mask_plan(model.config.num_patches(), model.config.mask_ratio, rng))
        .collect()
}

/// Algorithm: `epochs` passes of Adam over the private slice, then extraction
/// of `restore_count` labeled restore records with fresh mask plans.
/// Returns `None` when the client has no data this task (skipped round).
pub fn local_update<F: Scalar>(
    model: &Model<F>,
    state: &ClientState<'_, F>,
    broadcast: &TransmittedParams<F>,
    opts: &LocalUpdateOptions,
) -> Result<Option<LocalUpdateOutput<F>>> {
    let n = state.samples.len();
    if n == 0 {
        return Ok(None);
    }
    let mut w = broadcast.clone();
    // optimizer state is reset at every broadcast
    let mut adam = AdamState::new(w.flat_len());
    let adam_opts = AdamOptions::with_lr(opts.lr);
    let mut steps = 0usize;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut rng = stream(state.seed, &[2, epoch as u64]);
        let order = crate::rng::permutation(&mut rng, n);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Sample<F>> = chunk.iter().map(|&i| state.samples[i]).collect();
            let plans = fresh_plans(model, &mut rng, batch.len())?;
            let out = client_loss(model, &w, &batch, &plans, opts.loss_pixels, opts.use_recon_prompt)?;
            epoch_loss += out.loss.as_f64();
            // optimize the batch-mean objective
            let scale = F::of(1.0 / batch.len() as f64);
            let mut mean_grads = broadcast.zeros_like();
            add_scaled(&mut mean_grads, &out.grads, scale);
            let mut flat = flatten(&w);
            adam.step(&adam_opts, &mut flat, &flatten(&mean_grads));
            w = unflatten(&flat, &w)?;
            steps += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }

    // extract labeled restore information with fresh plans
    let mut rng = stream(state.seed, &[3]);
    let picks = sample_indices(&mut rng, n, opts.restore_count);
    let mut restore_set = Vec::with_capacity(picks.len());
    for idx in picks {
        let sample = &state.samples[idx];
        let plan = make_mask_plan(model.config.num_patches(), model.config.mask_ratio, &mut rng)?;
        restore_set.push(extract_restore(model, sample.image, sample.label, &plan)?);
    }

    Ok(Some(LocalUpdateOutput {
        params: w,
        restore_set,
        steps,
        epoch_losses,
        samples: n,
    }))
}
