//! The tunable payload exchanged each round: discriminative prompt,
//! classifier, reconstructive prompt — and its flat-vector view used by
//! aggregation and the optimizer.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::math::Scalar;
use crate::model::config::ModelConfig;
use crate::model::params::ClassifierParams;
use crate::rng::{uniform_f64, Prng};

/// Prompt tokens prepended inside the first prompted encoder blocks,
/// one independent segment per block.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminativePrompt<F> {
    /// Each (disc_prompt_len, embed_dim).
    pub segments: Vec<Array2<F>>,
}

/// Prompt tokens prepended inside the first decoder block only.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructivePrompt<F> {
    /// (recon_prompt_len, decoder_dim)
    pub tokens: Array2<F>,
}

const PROMPT_INIT_RANGE: f64 = 0.03;

impl<F: Scalar> DiscriminativePrompt<F> {
    pub fn init(config: &ModelConfig, rng: &mut Prng) -> Self {
        let segments = (0..config.prompted_blocks())
            .map(|_| {
                Array2::from_shape_fn((config.disc_prompt_len, config.embed_dim), |_| {
                    F::of(uniform_f64(rng, -PROMPT_INIT_RANGE, PROMPT_INIT_RANGE))
                })
            })
            .collect();
        Self { segments }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self.segments.iter().map(|s| Array2::zeros(s.raw_dim())).collect(),
        }
    }
}

impl<F: Scalar> ReconstructivePrompt<F> {
    pub fn init(config: &ModelConfig, rng: &mut Prng) -> Self {
        Self {
            tokens: Array2::from_shape_fn((config.recon_prompt_len, config.decoder_dim), |_| {
                F::of(uniform_f64(rng, -PROMPT_INIT_RANGE, PROMPT_INIT_RANGE))
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tokens: Array2::zeros(self.tokens.raw_dim()),
        }
    }
}

/// w = { discriminative prompt, classifier, reconstructive prompt }.
///
/// The same structure doubles as the gradient container: gradients of w have
/// exactly its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmittedParams<F> {
    pub disc: DiscriminativePrompt<F>,
    pub classifier: ClassifierParams<F>,
    pub recon: ReconstructivePrompt<F>,
}

/// Fresh tunable parameters: prompts uniform in ±0.03, classifier all zeros.
pub fn init_params<F: Scalar>(
    config: &ModelConfig,
    num_classes: usize,
    rng: &mut Prng,
) -> Result<TransmittedParams<F>> {
    if num_classes == 0 {
        return Err(Error::Config("classifier needs at least one class".into()));
    }
    Ok(TransmittedParams {
        disc: DiscriminativePrompt::init(config, rng),
        classifier: ClassifierParams::zeros(num_classes, config.embed_dim),
        recon: ReconstructivePrompt::init(config, rng),
    })
}

impl<F: Scalar> TransmittedParams<F> {
    pub fn zeros_like(&self) -> Self {
        Self {
            disc: self.disc.zeros_like(),
            classifier: ClassifierParams::zeros(
                self.classifier.num_classes(),
                self.classifier.weight.ncols(),
            ),
            recon: self.recon.zeros_like(),
        }
    }

    pub fn flat_len(&self) -> usize {
        let disc: usize = self.disc.segments.iter().map(|s| s.len()).sum();
        disc + self.classifier.weight.len() + self.classifier.bias.len() + self.recon.tokens.len()
    }

    /// Offset of the first reconstructive-prompt coordinate in [`flatten`] order.
    pub fn recon_offset(&self) -> usize {
        self.flat_len() - self.recon.tokens.len()
    }
}

/// Fixed linear ordering: prompt segments, classifier weight row-major,
/// classifier bias, reconstructive prompt.
pub fn flatten<F: Scalar>(w: &TransmittedParams<F>) -> Vec<F> {
    let mut out = Vec::with_capacity(w.flat_len());
    for seg in &w.disc.segments {
        out.extend(seg.iter().cloned());
    }
    out.extend(w.classifier.weight.iter().cloned());
    out.extend(w.classifier.bias.iter().cloned());
    out.extend(w.recon.tokens.iter().cloned());
    out
}

/// Inverse of [`flatten`] against a shape template.
pub fn unflatten<F: Scalar>(flat: &[F], template: &TransmittedParams<F>) -> Result<TransmittedParams<F>> {
    if flat.len() != template.flat_len() {
        return Err(Error::Shape(format!(
            "flat vector has {} coordinates, template needs {}",
            flat.len(),
            template.flat_len()
        )));
    }
    let mut cursor = 0usize;
    let mut take = |len: usize| {
        let slice = &flat[cursor..cursor + len];
        cursor += len;
        slice.to_vec()
    };
    let segments = template
        .disc
        .segments
        .iter()
        .map(|s| Array2::from_shape_vec(s.raw_dim(), take(s.len())).expect("sized above"))
        .collect();
    let weight = Array2::from_shape_vec(
        template.classifier.weight.raw_dim(),
        take(template.classifier.weight.len()),
    )
    .expect("sized above");
    let bias = Array1::from_vec(take(template.classifier.bias.len()));
    let tokens = Array2::from_shape_vec(
        template.recon.tokens.raw_dim(),
        take(template.recon.tokens.len()),
    )
    .expect("sized above");
    Ok(TransmittedParams {
        disc: DiscriminativePrompt { segments },
        classifier: ClassifierParams { weight, bias },
        recon: ReconstructivePrompt { tokens },
    })
}

/// acc += scale * x, coordinate-wise over the whole payload.
pub fn add_scaled<F: Scalar>(acc: &mut TransmittedParams<F>, x: &TransmittedParams<F>, scale: F) {
    for (a, b) in acc.disc.segments.iter_mut().zip(x.disc.segments.iter()) {
        a.zip_mut_with(b, |u, &v| *u = *u + scale * v);
    }
    acc.classifier
        .weight
        .zip_mut_with(&x.classifier.weight, |u, &v| *u = *u + scale * v);
    acc.classifier
        .bias
        .zip_mut_with(&x.classifier.bias, |u, &v| *u = *u + scale * v);
    acc.recon
        .tokens
        .zip_mut_with(&x.recon.tokens, |u, &v| *u = *u + scale * v);
}

/// Grow the classifier to cover `new_classes` more classes. Existing rows are
/// untouched; new rows and biases start at zero.
pub fn expand_classifier<F: Scalar>(
    w: &TransmittedParams<F>,
    new_classes: usize,
) -> TransmittedParams<F> {
    let old = &w.classifier;
    let dim = old.weight.ncols();
    let total = old.num_classes() + new_classes;
    let mut weight = Array2::zeros((total, dim));
    weight
        .slice_mut(ndarray::s![..old.num_classes(), ..])
        .assign(&old.weight);
    let mut bias = Array1::zeros(total);
    bias.slice_mut(ndarray::s![..old.num_classes()])
        .assign(&old.bias);
    TransmittedParams {
        disc: w.disc.clone(),
        classifier: ClassifierParams { weight, bias },
        recon: w.recon.clone(),
    }
}
