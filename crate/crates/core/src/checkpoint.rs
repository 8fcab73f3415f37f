//! Parameter container file: a header with the model config and free-form
//! metadata, followed by shape-annotated little-endian f32 tensors.
//!
//! Used for backbones (pre-trained encoder/decoder pairs) and for snapshots
//! of the transmitted tunable parameters, tagged by round and task.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::bytes::{put_f32, put_u16, put_u32, Reader};
use crate::error::{Error, Result};
use crate::math::Scalar;
use crate::model::config::ModelConfig;
use crate::model::params::{ClassifierParams, Model, NamedTensor};
use crate::prompts::{DiscriminativePrompt, ReconstructivePrompt, TransmittedParams};

const MAGIC: &[u8; 4] = b"PMCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    let cfg = &ck.config;
    for v in [
        cfg.image_side,
        cfg.channels,
        cfg.patch_side,
        cfg.embed_dim,
        cfg.encoder_blocks,
        cfg.decoder_dim,
        cfg.decoder_blocks,
        cfg.heads,
        cfg.disc_prompt_len,
        cfg.disc_prompt_blocks,
        cfg.recon_prompt_len,
    ] {
        put_u32(&mut out, v as u32);
    }
    put_f32(&mut out, cfg.mask_ratio);
    put_u16(&mut out, ck.meta.len() as u16);
    for (k, v) in &ck.meta {
        put_u16(&mut out, k.len() as u16);
        out.extend_from_slice(k.as_bytes());
        put_u16(&mut out, v.len() as u16);
        out.extend_from_slice(v.as_bytes());
    }
    put_u32(&mut out, ck.tensors.len() as u32);
    for t in &ck.tensors {
        put_u16(&mut out, t.name.len() as u16);
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            put_u32(&mut out, d as u32);
        }
        for &v in &t.data {
            put_f32(&mut out, v);
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version_offset = r.offset;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Decode {
            offset: version_offset,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut fields = [0usize; 11];
    for f in fields.iter_mut() {
        *f = r.u32()? as usize;
    }
    let mask_ratio = r.f32()?;
    let config = ModelConfig {
        image_side: fields[0],
        channels: fields[1],
        patch_side: fields[2],
        embed_dim: fields[3],
        encoder_blocks: fields[4],
        decoder_dim: fields[5],
        decoder_blocks: fields[6],
        heads: fields[7],
        mask_ratio,
        disc_prompt_len: fields[8],
        disc_prompt_blocks: fields[9],
        recon_prompt_len: fields[10],
    };
    let meta_count = r.u16()? as usize;
    let mut meta = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let klen = r.u16()? as usize;
        let key = String::from_utf8(r.take(klen)?.to_vec()).map_err(|e| Error::Decode {
            offset: r.offset,
            reason: format!("meta key not utf-8: {e}"),
        })?;
        let vlen = r.u16()? as usize;
        let val = String::from_utf8(r.take(vlen)?.to_vec()).map_err(|e| Error::Decode {
            offset: r.offset,
            reason: format!("meta value not utf-8: {e}"),
        })?;
        meta.push((key, val));
    }
    let tensor_count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Decode {
            offset: r.offset,
            reason: format!("tensor name not utf-8: {e}"),
        })?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        tensors.push(NamedTensor { name, dims, data });
    }
    r.expect_end()?;
    Ok(Checkpoint {
        config,
        meta,
        tensors,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(ck))?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Save a backbone (encoder + decoder) to a checkpoint file.
pub fn save_model<F: Scalar>(path: &Path, model: &Model<F>, meta: &[(String, String)]) -> Result<()> {
    write_checkpoint(
        path,
        &Checkpoint {
            config: model.config,
            meta: meta.to_vec(),
            tensors: model.named_tensors(),
        },
    )
}

/// Load a backbone; the stored config must validate.
pub fn load_model<F: Scalar>(path: &Path) -> Result<Model<F>> {
    let ck = read_checkpoint(path)?;
    ck.config.validate()?;
    Model::from_named_tensors(ck.config, &ck.tensors)
}

fn params_tensors<F: Scalar>(params: &TransmittedParams<F>) -> Vec<NamedTensor> {
    use crate::model::params::{push_tensor1, push_tensor2};
    let mut out = Vec::new();
    for (i, seg) in params.disc.segments.iter().enumerate() {
        push_tensor2(&mut out, &format!("prompt.disc.{i}"), seg);
    }
    push_tensor2(&mut out, "classifier.weight", &params.classifier.weight);
    push_tensor1(&mut out, "classifier.bias", &params.classifier.bias);
    push_tensor2(&mut out, "prompt.recon", &params.recon.tokens);
    out
}

/// Save transmitted parameters with round/task tags in the metadata.
pub fn save_params<F: Scalar>(
    path: &Path,
    config: &ModelConfig,
    params: &TransmittedParams<F>,
    task: usize,
    round: usize,
) -> Result<()> {
    write_checkpoint(
        path,
        &Checkpoint {
            config: *config,
            meta: vec![
                ("task".into(), task.to_string()),
                ("round".into(), round.to_string()),
            ],
            tensors: params_tensors(params),
        },
    )
}

fn tensor2<F: Scalar>(t: &NamedTensor) -> Result<Array2<F>> {
    if t.dims.len() != 2 {
        return Err(Error::Integrity(format!(
            "tensor {} is not 2-d",
            t.name
        )));
    }
    Ok(Array2::from_shape_vec(
        (t.dims[0], t.dims[1]),
        t.data.iter().map(|&v| F::of(v as f64)).collect(),
    )
    .expect("dims cover data"))
}

/// Load transmitted parameters saved by [`save_params`].
pub fn load_params<F: Scalar>(path: &Path) -> Result<(TransmittedParams<F>, ModelConfig, Vec<(String, String)>)> {
    let ck = read_checkpoint(path)?;
    let mut segments = Vec::new();
    for i in 0.. {
        match ck.tensors.iter().find(|t| t.name == format!("prompt.disc.{i}")) {
            Some(t) => segments.push(tensor2(t)?),
            None => break,
        }
    }
    let find = |name: &str| {
        ck.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Integrity(format!("params checkpoint missing {name}")))
    };
    if segments.is_empty() {
        return Err(Error::Integrity("params checkpoint has no prompt segments".into()));
    }
    let weight = tensor2::<F>(find("classifier.weight")?)?;
    let bias_t = find("classifier.bias")?;
    let bias = Array1::from_vec(bias_t.data.iter().map(|&v| F::of(v as f64)).collect());
    let recon = tensor2::<F>(find("prompt.recon")?)?;
    let params = TransmittedParams {
        disc: DiscriminativePrompt { segments },
        classifier: ClassifierParams { weight, bias },
        recon: ReconstructivePrompt { tokens: recon },
    };
    Ok((params, ck.config, ck.meta))
}
