//! Parameter containers for the frozen backbone and the growable classifier.
//!
//! Encoder and decoder parameters are initialized (or loaded from a
//! checkpoint) once and never touched by client or server optimization;
//! only prompts and the classifier are tunable.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::math::{fnv1a64, sinusoidal_positions, Scalar};
use crate::model::config::ModelConfig;
use crate::rng::{normal_f64, Prng};

/// MLP hidden width as a multiple of the block width.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<F> {
    /// (in, out)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> LinearParams<F> {
    pub fn init(rng: &mut Prng, d_in: usize, d_out: usize, std: f64) -> Self {
        let weight =
            Array2::from_shape_fn((d_in, d_out), |_| F::of(normal_f64(rng, 0.0, std)));
        Self {
            weight,
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Gradients of a linear layer, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct LinearGrads<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> LinearGrads<F> {
    /// d_input; fills `grads` with (dW, db) when requested.
    pub fn backward(
        params: &LinearParams<F>,
        input: &Array2<F>,
        d_out: &Array2<F>,
        want_params: bool,
    ) -> (Array2<F>, Option<LinearGrads<F>>) {
        let d_input = d_out.dot(&params.weight.t());
        let grads = want_params.then(|| LinearGrads {
            weight: input.t().dot(d_out),
            bias: d_out.sum_axis(Axis(0)),
        });
        (d_input, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Scalar> LayerNormParams<F> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub query: LinearParams<F>,
    pub key: LinearParams<F>,
    pub value: LinearParams<F>,
    pub output: LinearParams<F>,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn init(rng: &mut Prng, dim: usize, std: f64) -> Self {
        Self {
            query: LinearParams::init(rng, dim, dim, std),
            key: LinearParams::init(rng, dim, dim, std),
            value: LinearParams::init(rng, dim, dim, std),
            output: LinearParams::init(rng, dim, dim, std),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub norm1: LayerNormParams<F>,
    pub attn: AttentionParams<F>,
    pub norm2: LayerNormParams<F>,
    pub fc1: LinearParams<F>,
    pub fc2: LinearParams<F>,
}

impl<F: Scalar> BlockParams<F> {
    pub fn init(rng: &mut Prng, dim: usize, std: f64) -> Self {
        Self {
            norm1: LayerNormParams::identity(dim),
            attn: AttentionParams::init(rng, dim, std),
            norm2: LayerNormParams::identity(dim),
            fc1: LinearParams::init(rng, dim, dim * MLP_RATIO, std),
            fc2: LinearParams::init(rng, dim * MLP_RATIO, dim, std),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub patch_embed: LinearParams<F>,
    /// Fixed sinusoidal encodings, (N, embed_dim).
    pub positions: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: LayerNormParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<F> {
    /// Projects encoder features (embed_dim) to decoder width.
    pub embed: LinearParams<F>,
    /// Placeholder token inserted at masked positions.
    pub mask_token: Array1<F>,
    /// Fixed sinusoidal encodings, (N, decoder_dim).
    pub positions: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: LayerNormParams<F>,
    /// Projects decoder tokens to per-patch pixels.
    pub head: LinearParams<F>,
}

/// Growable linear classification head: one row per seen class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<F> {
    /// (num_seen_classes, embed_dim)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> ClassifierParams<F> {
    /// Zero-initialized head over `classes` classes (uniform softmax).
    pub fn zeros(classes: usize, embed_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((classes, embed_dim)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }
}

const INIT_STD: f64 = 0.02;

/// The frozen encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<F>,
    pub decoder: DecoderParams<F>,
}

impl<F: Scalar> Model<F> {
    /// Randomly initialized backbone; deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.num_patches();
        let mut rng = crate::rng::stream(seed, &[0x6261636b]); // "back"
        let encoder = EncoderParams {
            patch_embed: LinearParams::init(&mut rng, config.patch_dim(), config.embed_dim, INIT_STD),
            positions: sinusoidal_positions(n, config.embed_dim),
            blocks: (0..config.encoder_blocks)
                .map(|_| BlockParams::init(&mut rng, config.embed_dim, INIT_STD))
                .collect(),
            final_norm: LayerNormParams::identity(config.embed_dim),
        };
        let decoder = DecoderParams {
            embed: LinearParams::init(&mut rng, config.embed_dim, config.decoder_dim, INIT_STD),
            mask_token: Array1::from_shape_fn(config.decoder_dim, |_| {
                F::of(normal_f64(&mut rng, 0.0, INIT_STD))
            }),
            positions: sinusoidal_positions(n, config.decoder_dim),
            blocks: (0..config.decoder_blocks)
                .map(|_| BlockParams::init(&mut rng, config.decoder_dim, INIT_STD))
                .collect(),
            final_norm: LayerNormParams::identity(config.decoder_dim),
            head: LinearParams::init(&mut rng, config.decoder_dim, config.patch_dim(), INIT_STD),
        };
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Digest over every backbone tensor (f32 little-endian encoding).
    /// Constant across a run if and only if the backbone stayed frozen.
    pub fn backbone_digest(&self) -> u64 {
        Self::digest_tensors(self.named_tensors().iter())
    }

    /// Digest over the encoder tensors only; pre-training may touch the
    /// decoder but never this.
    pub fn encoder_digest(&self) -> u64 {
        Self::digest_tensors(
            self.named_tensors()
                .iter()
                .filter(|t| t.name.starts_with("encoder.")),
        )
    }

    fn digest_tensors<'a>(tensors: impl Iterator<Item = &'a NamedTensor>) -> u64 {
        let mut bytes = Vec::new();
        for t in tensors {
            bytes.extend_from_slice(t.name.as_bytes());
            for d in &t.dims {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Every backbone tensor with a stable name, for checkpointing and digests.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        collect_linear(&mut out, "encoder.patch_embed", &self.encoder.patch_embed);
        push_tensor2(&mut out, "encoder.positions", &self.encoder.positions);
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            collect_block(&mut out, &format!("encoder.blocks.{i}"), b);
        }
        collect_norm(&mut out, "encoder.final_norm", &self.encoder.final_norm);
        collect_linear(&mut out, "decoder.embed", &self.decoder.embed);
        push_tensor1(&mut out, "decoder.mask_token", &self.decoder.mask_token);
        push_tensor2(&mut out, "decoder.positions", &self.decoder.positions);
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            collect_block(&mut out, &format!("decoder.blocks.{i}"), b);
        }
        collect_norm(&mut out, "decoder.final_norm", &self.decoder.final_norm);
        collect_linear(&mut out, "decoder.head", &self.decoder.head);
        out
    }

    /// Rebuild a model from checkpoint tensors.
    pub fn from_named_tensors(config: ModelConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut model = Model::init(config, 0)?;
        let mut map: std::collections::HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let expected = model.named_tensors();
        for want in &expected {
            let got = map.remove(want.name.as_str()).ok_or_else(|| {
                Error::Integrity(format!("checkpoint missing tensor {}", want.name))
            })?;
            if got.dims != want.dims {
                return Err(Error::Integrity(format!(
                    "tensor {} has dims {:?}, expected {:?}",
                    want.name, got.dims, want.dims
                )));
            }
            model.assign_tensor(&want.name, got)?;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Integrity(format!(
                "checkpoint has unexpected tensor {extra}"
            )));
        }
        Ok(model)
    }

    fn assign_tensor(&mut self, name: &str, t: &NamedTensor) -> Result<()> {
        let data: Vec<F> = t.data.iter().map(|&v| F::of(v as f64)).collect();
        let set1 = |dst: &mut Array1<F>| {
            *dst = Array1::from_vec(data.clone());
        };
        let set2 = |dst: &mut Array2<F>| {
            *dst = Array2::from_shape_vec((t.dims[0], t.dims[1]), data.clone())
                .expect("dims already validated");
        };
        let enc_blocks = self.encoder.blocks.len();
        match name {
            "encoder.patch_embed.weight" => set2(&mut self.encoder.patch_embed.weight),
            "encoder.patch_embed.bias" => set1(&mut self.encoder.patch_embed.bias),
            "encoder.positions" => set2(&mut self.encoder.positions),
            "encoder.final_norm.gamma" => set1(&mut self.encoder.final_norm.gamma),
            "encoder.final_norm.beta" => set1(&mut self.encoder.final_norm.beta),
            "decoder.embed.weight" => set2(&mut self.decoder.embed.weight),
            "decoder.embed.bias" => set1(&mut self.decoder.embed.bias),
            "decoder.mask_token" => set1(&mut self.decoder.mask_token),
            "decoder.positions" => set2(&mut self.decoder.positions),
            "decoder.final_norm.gamma" => set1(&mut self.decoder.final_norm.gamma),
            "decoder.final_norm.beta" => set1(&mut self.decoder.final_norm.beta),
            "decoder.head.weight" => set2(&mut self.decoder.head.weight),
            "decoder.head.bias" => set1(&mut self.decoder.head.bias),
            _ => {
                let (block, field) = parse_block_path(name)
                    .ok_or_else(|| Error::Integrity(format!("unknown tensor {name}")))?;
                let params = if name.starts_with("encoder.") {
                    &mut self.encoder.blocks[block]
                } else {
                    &mut self.decoder.blocks[block]
                };
                debug_assert!(block < enc_blocks || name.starts_with("decoder."));
                match field {
                    "norm1.gamma" => set1(&mut params.norm1.gamma),
                    "norm1.beta" => set1(&mut params.norm1.beta),
                    "norm2.gamma" => set1(&mut params.norm2.gamma),
                    "norm2.beta" => set1(&mut params.norm2.beta),
                    "attn.query.weight" => set2(&mut params.attn.query.weight),
                    "attn.query.bias" => set1(&mut params.attn.query.bias),
                    "attn.key.weight" => set2(&mut params.attn.key.weight),
                    "attn.key.bias" => set1(&mut params.attn.key.bias),
                    "attn.value.weight" => set2(&mut params.attn.value.weight),
                    "attn.value.bias" => set1(&mut params.attn.value.bias),
                    "attn.output.weight" => set2(&mut params.attn.output.weight),
                    "attn.output.bias" => set1(&mut params.attn.output.bias),
                    "fc1.weight" => set2(&mut params.fc1.weight),
                    "fc1.bias" => set1(&mut params.fc1.bias),
                    "fc2.weight" => set2(&mut params.fc2.weight),
                    "fc2.bias" => set1(&mut params.fc2.bias),
                    _ => return Err(Error::Integrity(format!("unknown tensor {name}"))),
                }
            }
        }
        Ok(())
    }
}

fn parse_block_path(name: &str) -> Option<(usize, &str)> {
    let rest = name
        .strip_prefix("encoder.blocks.")
        .or_else(|| name.strip_prefix("decoder.blocks."))?;
    let (idx, field) = rest.split_once('.')?;
    Some((idx.parse().ok()?, field))
}

/// A shape-annotated f32 tensor with a stable dotted name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn push_tensor1<F: Scalar>(out: &mut Vec<NamedTensor>, name: &str, t: &Array1<F>) {
    out.push(NamedTensor {
        name: name.to_string(),
        dims: vec![t.len()],
        data: t.iter().map(|v| v.as_f64() as f32).collect(),
    });
}

pub(crate) fn push_tensor2<F: Scalar>(out: &mut Vec<NamedTensor>, name: &str, t: &Array2<F>) {
    out.push(NamedTensor {
        name: name.to_string(),
        dims: vec![t.nrows(), t.ncols()],
        data: t.iter().map(|v| v.as_f64() as f32).collect(),
    });
}

fn collect_linear<F: Scalar>(out: &mut Vec<NamedTensor>, prefix: &str, l: &LinearParams<F>) {
    push_tensor2(out, &format!("{prefix}.weight"), &l.weight);
    push_tensor1(out, &format!("{prefix}.bias"), &l.bias);
}

fn collect_norm<F: Scalar>(out: &mut Vec<NamedTensor>, prefix: &str, n: &LayerNormParams<F>) {
    push_tensor1(out, &format!("{prefix}.gamma"), &n.gamma);
    push_tensor1(out, &format!("{prefix}.beta"), &n.beta);
}

fn collect_block<F: Scalar>(out: &mut Vec<NamedTensor>, prefix: &str, b: &BlockParams<F>) {
    collect_norm(out, &format!("{prefix}.norm1"), &b.norm1);
    collect_linear(out, &format!("{prefix}.attn.query"), &b.attn.query);
    collect_linear(out, &format!("{prefix}.attn.key"), &b.attn.key);
    collect_linear(out, &format!("{prefix}.attn.value"), &b.attn.value);
    collect_linear(out, &format!("{prefix}.attn.output"), &b.attn.output);
    collect_norm(out, &format!("{prefix}.norm2"), &b.norm2);
    collect_linear(out, &format!("{prefix}.fc1"), &b.fc1);
    collect_linear(out, &format!("{prefix}.fc2"), &b.fc2);
}
