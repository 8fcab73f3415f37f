//! Decoder pre-training: masked reconstruction with the encoder frozen and
//! unnormalized pixels as the target. Run once before any federated
//! experiment so the decoder can actually rebuild images.

use ndarray::{Array1, Array3};
use rayon::prelude::*;

use crate::error::Result;
use crate::loss::{mse_loss, LossPixels};
use crate::masking::{assemble_backward, assemble_for_decoder_cached, extract_restore, make_mask_plan};
use crate::math::Scalar;
use crate::model::decoder::{decoder_backward, decoder_forward_cached, PartialDecoderGrads};
use crate::model::params::{DecoderParams, LinearGrads, Model};
use crate::optim::{AdamOptions, AdamState};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_pixels: LossPixels,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 97,
            loss_pixels: LossPixels::All,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Held-out reconstruction MSE before any training.
    pub initial_holdout_mse: f64,
    /// Held-out MSE after each epoch.
    pub epoch_holdout_mse: Vec<f64>,
    pub steps: usize,
}

impl PretrainOutcome {
    pub fn final_holdout_mse(&self) -> f64 {
        self.epoch_holdout_mse
            .last()
            .copied()
            .unwrap_or(self.initial_holdout_mse)
    }
}

fn flatten_decoder<F: Scalar>(dec: &DecoderParams<F>) -> Vec<F> {
    let mut out = Vec::new();
    out.extend(dec.embed.weight.iter().cloned());
    out.extend(dec.embed.bias.iter().cloned());
    out.extend(dec.mask_token.iter().cloned());
    for b in &dec.blocks {
        out.extend(b.norm1.gamma.iter().cloned());
        out.extend(b.norm1.beta.iter().cloned());
        for lin in [&b.attn.query, &b.attn.key, &b.attn.value, &b.attn.output] {
            out.extend(lin.weight.iter().cloned());
            out.extend(lin.bias.iter().cloned());
        }
        out.extend(b.norm2.gamma.iter().cloned());
        out.extend(b.norm2.beta.iter().cloned());
        for lin in [&b.fc1, &b.fc2] {
            out.extend(lin.weight.iter().cloned());
            out.extend(lin.bias.iter().cloned());
        }
    }
    out.extend(dec.final_norm.gamma.iter().cloned());
    out.extend(dec.final_norm.beta.iter().cloned());
    out.extend(dec.head.weight.iter().cloned());
    out.extend(dec.head.bias.iter().cloned());
    out
}

fn write_back_decoder<F: Scalar>(flat: &[F], dec: &mut DecoderParams<F>) {
    let mut cursor = 0usize;
    let mut fill2 = |dst: &mut ndarray::Array2<F>, cursor: &mut usize| {
        for v in dst.iter_mut() {
            *v = flat[*cursor];
            *cursor += 1;
        }
    };
    let mut fill1 = |dst: &mut Array1<F>, cursor: &mut usize| {
        for v in dst.iter_mut() {
            *v = flat[*cursor];
            *cursor += 1;
        }
    };
    fill2(&mut dec.embed.weight, &mut cursor);
    fill1(&mut dec.embed.bias, &mut cursor);
    fill1(&mut dec.mask_token, &mut cursor);
    for b in dec.blocks.iter_mut() {
        fill1(&mut b.norm1.gamma, &mut cursor);
        fill1(&mut b.norm1.beta, &mut cursor);
        for lin in [&mut b.attn.query, &mut b.attn.key, &mut b.attn.value, &mut b.attn.output] {
            fill2(&mut lin.weight, &mut cursor);
            fill1(&mut lin.bias, &mut cursor);
        }
        fill1(&mut b.norm2.gamma, &mut cursor);
        fill1(&mut b.norm2.beta, &mut cursor);
        for lin in [&mut b.fc1, &mut b.fc2] {
            fill2(&mut lin.weight, &mut cursor);
            fill1(&mut lin.bias, &mut cursor);
        }
    }
    fill1(&mut dec.final_norm.gamma, &mut cursor);
    fill1(&mut dec.final_norm.beta, &mut cursor);
    fill2(&mut dec.head.weight, &mut cursor);
    fill1(&mut dec.head.bias, &mut cursor);
    debug_assert_eq!(cursor, flat.len());
}

fn flatten_decoder_grads<F: Scalar>(
    embed: &LinearGrads<F>,
    mask_token: &Array1<F>,
    partial: &PartialDecoderGrads<F>,
) -> Vec<F> {
    let mut out = Vec::new();
    out.extend(embed.weight.iter().cloned());
    out.extend(embed.bias.iter().cloned());
    out.extend(mask_token.iter().cloned());
    for b in &partial.blocks {
        out.extend(b.norm1_gamma.iter().cloned());
        out.extend(b.norm1_beta.iter().cloned());
        for lin in [&b.attn.query, &b.attn.key, &b.attn.value, &b.attn.output] {
            out.extend(lin.weight.iter().cloned());
            out.extend(lin.bias.iter().cloned());
        }
        out.extend(b.norm2_gamma.iter().cloned());
        out.extend(b.norm2_beta.iter().cloned());
        for lin in [&b.fc1, &b.fc2] {
            out.extend(lin.weight.iter().cloned());
            out.extend(lin.bias.iter().cloned());
        }
    }
    out.extend(partial.final_norm_gamma.iter().cloned());
    out.extend(partial.final_norm_beta.iter().cloned());
    out.extend(partial.head.weight.iter().cloned());
    out.extend(partial.head.bias.iter().cloned());
    out
}

/// Mean reconstruction MSE over held-out images with fixed per-image plans.
pub fn holdout_mse<F: Scalar>(model: &Model<F>, holdout: &[&Array3<F>], seed: u64) -> Result<f64> {
    let per_image: Vec<Result<f64>> = holdout
        .par_iter()
        .enumerate()
        .map(|(i, &image)| {
            let mut rng = stream(seed, &[5, i as u64]);
            let plan = make_mask_plan(model.config.num_patches(), model.config.mask_ratio, &mut rng)?;
            let restore = extract_restore(model, image, 0, &plan)?;
            let rec = crate::masking::reconstruct(model, &restore, None)?;
            let diff = &rec.pixels - image;
            Ok(diff.iter().map(|v| (v.as_f64()).powi(2)).sum::<f64>() / diff.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for v in per_image {
        sum += v?;
    }
    Ok(sum / holdout.len().max(1) as f64)
}

/// Train only the decoder by masked reconstruction; the encoder stays frozen.
pub fn pretrain_decoder<F: Scalar>(
    model: &mut Model<F>,
    train: &[&Array3<F>],
    holdout: &[&Array3<F>],
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    let encoder_before = model.encoder_digest();
    let initial = holdout_mse(model, holdout, opts.seed)?;
    let mut epoch_holdout = Vec::with_capacity(opts.epochs);
    let mut flat = flatten_decoder(&model.decoder);
    let mut adam = AdamState::new(flat.len());
    let adam_opts = AdamOptions::with_lr(opts.lr);
    let mut steps = 0usize;

    for epoch in 0..opts.epochs {
        let mut rng = stream(opts.seed, &[6, epoch as u64]);
        let order = crate::rng::permutation(&mut rng, train.len());
        for chunk in order.chunks(opts.batch_size) {
            let per_image: Vec<Result<Vec<F>>> = chunk
                .par_iter()
                .map(|&idx| {
                    let image = train[idx];
                    let mut rng = stream(opts.seed, &[7, epoch as u64, idx as u64]);
                    let plan = make_mask_plan(
                        model.config.num_patches(),
                        model.config.mask_ratio,
                        &mut rng,
                    )?;
                    let restore = extract_restore(model, image, 0, &plan)?;
                    let (seq, asm_cache) = assemble_for_decoder_cached(&restore, model)?;
                    let (pred, cache) = decoder_forward_cached(model, &seq, None)?;
                    let target = crate::model::encoder::patch_pixels(model, image)?;
                    let (_, d_pred) =
                        mse_loss(&pred, &target, opts.loss_pixels, &plan.masked_sorted())?;
                    let (d_tokens, _, partial) =
                        decoder_backward(&model.decoder, &cache, &d_pred, true);
                    let (d_embed, d_mask) = assemble_backward(model, &asm_cache, &d_tokens);
                    Ok(flatten_decoder_grads(
                        &d_embed,
                        &d_mask,
                        &partial.expect("param grads requested"),
                    ))
                })
                .collect();
            let mut grads = vec![F::zero(); flat.len()];
            for item in per_image {
                let g = item?;
                for (acc, v) in grads.iter_mut().zip(g.iter()) {
                    *acc = *acc + *v;
                }
            }
            let scale = F::of(1.0 / chunk.len() as f64);
            grads.iter_mut().for_each(|g| *g = *g * scale);
            adam.step(&adam_opts, &mut flat, &grads);
            write_back_decoder(&flat, &mut model.decoder);
            steps += 1;
        }
        epoch_holdout.push(holdout_mse(model, holdout, opts.seed)?);
    }

    debug_assert_eq!(model.encoder_digest(), encoder_before);
    Ok(PretrainOutcome {
        initial_holdout_mse: initial,
        epoch_holdout_mse: epoch_holdout,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::model::config::ModelConfig;

    #[test]
    fn decoder_flatten_roundtrip() {
        let model: Model<f64> = Model::init(ModelConfig::tiny(), 3).unwrap();
        let flat = flatten_decoder(&model.decoder);
        let mut copy = model.decoder.clone();
        write_back_decoder(&flat, &mut copy);
        assert_eq!(copy, model.decoder);
    }

    #[test]
    fn pretraining_reduces_holdout_mse_and_freezes_encoder() {
        let mut model: Model<f32> = Model::init(ModelConfig::tiny(), 4).unwrap();
        let corpus = synthetic_corpus::<f32>(2, 16, 6, 8, 1, 5);
        let train: Vec<&Array3<f32>> = corpus.train.iter().map(|i| &i.pixels).collect();
        let holdout: Vec<&Array3<f32>> = corpus.test.iter().map(|i| &i.pixels).collect();
        let enc_digest = model.encoder_digest();
        let opts = PretrainOptions {
            epochs: 10,
            batch_size: 8,
            ..Default::default()
        };
        let outcome = pretrain_decoder(&mut model, &train, &holdout, &opts).unwrap();
        assert_eq!(model.encoder_digest(), enc_digest);
        assert!(outcome.steps >= 10);
        assert!(
            outcome.final_holdout_mse() < outcome.initial_holdout_mse,
            "{} -> {}",
            outcome.initial_holdout_mse,
            outcome.final_holdout_mse()
        );
    }

    #[test]
    fn gradient_step_matches_finite_difference_loss_drop() {
        // one tiny decoder step in f64 should reduce the training-batch loss
        let mut model: Model<f64> = Model::init(ModelConfig::tiny(), 9).unwrap();
        let corpus = synthetic_corpus::<f64>(1, 4, 1, 8, 1, 6);
        let train: Vec<&Array3<f64>> = corpus.train.iter().map(|i| &i.pixels).collect();
        let holdout: Vec<&Array3<f64>> = corpus.test.iter().map(|i| &i.pixels).collect();
        let before = holdout_mse(&model, &train, 1).unwrap();
        let opts = PretrainOptions {
            epochs: 4,
            batch_size: 4,
            lr: 5e-3,
            ..Default::default()
        };
        pretrain_decoder(&mut model, &train, &holdout, &opts).unwrap();
        let after = holdout_mse(&model, &train, 1).unwrap();
        assert!(after < before, "{before} -> {after}");
    }
}
