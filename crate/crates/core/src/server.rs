//! Server-side protocol: sample-weighted aggregation, global image
//! reconstruction from uploaded restore information, discriminative
//! fine-tuning, and the per-task restore pool.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::bytes::{put_f32, put_u16, put_u32, put_u64, Reader};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::ce_loss;
use crate::masking::{reconstruct, ReconstructedImage, RestoreInfo};
use crate::math::Scalar;
use crate::model::classifier::{classify_backward, classify_cached};
use crate::model::encoder::{classify_backward as encoder_prompt_backward, classify_forward_cached};
use crate::model::params::Model;
use crate::optim::{AdamOptions, AdamState};
use crate::prompts::{add_scaled, flatten, unflatten, ReconstructivePrompt, TransmittedParams};
use crate::rng::stream;
use crate::wire::{decode_restore_set, encode_restore_set};

/// Coordinate-wise weighted mean with weights `sizes_k / sum(sizes)`.
///
/// Per-coordinate terms are accumulated in f64 in a value-sorted order, so the
/// result is bitwise invariant under client permutations.
pub fn fedavg<F: Scalar>(
    params: &[TransmittedParams<F>],
    sizes: &[usize],
) -> Result<TransmittedParams<F>> {
    if params.is_empty() {
        return Err(Error::Protocol("fedavg over an empty client list".into()));
    }
    if params.len() != sizes.len() {
        return Err(Error::Aggregation(format!(
            "{} parameter sets but {} sizes",
            params.len(),
            sizes.len()
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Aggregation("client sample counts must be positive".into()));
    }
    let template = &params[0];
    let flat_len = template.flat_len();
    let flats: Vec<Vec<F>> = params
        .iter()
        .map(|p| {
            if p.flat_len() != flat_len
                || p.disc.segments.len() != template.disc.segments.len()
                || p.classifier.num_classes() != template.classifier.num_classes()
            {
                return Err(Error::Aggregation(
                    "client parameter sets have mismatched shapes".into(),
                ));
            }
            Ok(flatten(p))
        })
        .collect::<Result<_>>()?;
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / total).collect();

    let mut out = vec![F::zero(); flat_len];
    let mut terms = vec![0.0f64; params.len()];
    for (coord, slot) in out.iter_mut().enumerate() {
        for (k, flat) in flats.iter().enumerate() {
            terms[k] = weights[k] * flat[coord].as_f64();
        }
        terms.sort_by(|a, b| a.total_cmp(b));
        let sum: f64 = terms.iter().sum();
        *slot = F::of(sum);
    }
    unflatten(&out, template)
}

/// One completed task's archived rehearsal payload: the per-client restore
/// sets from its final round and the reconstructive prompt aggregated at that
/// round.
#[derive(Debug, Clone)]
pub struct RestorePoolEntry<F> {
    pub task: usize,
    pub restore_sets: Vec<Vec<RestoreInfo<F>>>,
    pub prompt: ReconstructivePrompt<F>,
}

impl<F> RestorePoolEntry<F> {
    pub fn record_count(&self) -> usize {
        self.restore_sets.iter().map(|s| s.len()).sum()
    }
}

/// Per-task archive enabling rehearsal across the whole task history.
#[derive(Debug, Clone, Default)]
pub struct RestorePool<F> {
    entries: Vec<RestorePoolEntry<F>>,
}

impl<F> RestorePool<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[RestorePoolEntry<F>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_records(&self) -> usize {
        self.entries.iter().map(|e| e.record_count()).sum()
    }
}

/// Append a completed task's aggregated restore sets and prompt.
pub fn pool_merge<F>(
    pool: &mut RestorePool<F>,
    task: usize,
    restore_sets: Vec<Vec<RestoreInfo<F>>>,
    prompt: ReconstructivePrompt<F>,
) -> Result<()> {
    if pool.entries.iter().any(|e| e.task == task) {
        return Err(Error::Protocol(format!(
            "restore pool already holds an entry for task {task}"
        )));
    }
    pool.entries.push(RestorePoolEntry {
        task,
        restore_sets,
        prompt,
    });
    Ok(())
}

/// Labeled images reconstructed on the server; held in memory only.
#[derive(Debug, Clone)]
pub struct GlobalReconstructedDataset<F> {
    pub images: Vec<ReconstructedImage<F>>,
}

impl<F> GlobalReconstructedDataset<F> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// What to reconstruct from: the current round's uploads with the current
/// aggregated prompt, or the whole pool with each task's archived prompt.
pub enum ReconstructionSource<'a, F> {
    CurrentRound {
        restore_sets: &'a [Vec<RestoreInfo<F>>],
        prompt: Option<&'a ReconstructivePrompt<F>>,
    },
    Pool(&'a RestorePool<F>),
}

fn decode_records<'a, F: Scalar>(
    model: &Model<F>,
    records: Vec<(&'a RestoreInfo<F>, Option<&'a ReconstructivePrompt<F>>)>,
) -> Result<Vec<ReconstructedImage<F>>> {
    let expect_hash = model.config.content_hash();
    for (r, _) in &records {
        if r.config_hash != expect_hash {
            return Err(Error::Integrity(format!(
                "restore record config hash {:#x} does not match model {:#x}",
                r.config_hash, expect_hash
            )));
        }
    }
    records
        .into_par_iter()
        .map(|(r, prompt)| reconstruct(model, r, prompt))
        .collect()
}

/// Decode every restore record into a labeled image. In pool mode each record
/// is decoded with the prompt archived alongside its own task. `use_prompt`
/// false drops the reconstructive prompt entirely (its ablation).
pub fn reconstruct_dataset<F: Scalar>(
    model: &Model<F>,
    source: ReconstructionSource<'_, F>,
    use_prompt: bool,
) -> Result<GlobalReconstructedDataset<F>> {
    let mut records = Vec::new();
    match source {
        ReconstructionSource::CurrentRound {
            restore_sets,
            prompt,
        } => {
            let prompt = if use_prompt { prompt } else { None };
            for set in restore_sets {
                for r in set {
                    records.push((r, prompt));
                }
            }
        }
        ReconstructionSource::Pool(pool) => {
            for entry in pool.entries() {
                let prompt = use_prompt.then_some(&entry.prompt);
                for set in &entry.restore_sets {
                    for r in set {
                        records.push((r, prompt));
                    }
                }
            }
        }
    }
    if records.is_empty() {
        return Ok(GlobalReconstructedDataset { images: Vec::new() });
    }
    Ok(GlobalReconstructedDataset {
        images: decode_records(model, records)?,
    })
}

#[derive(Debug, Clone)]
pub struct ServerFinetuneOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Full-batch below this size, else minibatches of `minibatch`.
    pub full_batch_limit: usize,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for ServerFinetuneOptions {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            full_batch_limit: 256,
            minibatch: 128,
            seed: 0,
        }
    }
}

pub struct ServerFinetuneOutput<F> {
    pub params: TransmittedParams<F>,
    pub epoch_losses: Vec<f64>,
    /// True when the dataset was empty and fine-tuning was skipped.
    pub skipped: bool,
}

/// Cross-entropy fine-tuning of the discriminative prompt and classifier on
/// reconstructed images. The reconstructive prompt is untouched bitwise.
pub fn server_finetune<F: Scalar>(
    model: &Model<F>,
    broadcast: &TransmittedParams<F>,
    data: &GlobalReconstructedDataset<F>,
    opts: &ServerFinetuneOptions,
) -> Result<ServerFinetuneOutput<F>> {
    if opts.epochs == 0 {
        return Err(Error::Config("server fine-tuning needs at least one epoch".into()));
    }
    if data.is_empty() {
        return Ok(ServerFinetuneOutput {
            params: broadcast.clone(),
            epoch_losses: Vec::new(),
            skipped: true,
        });
    }
    let n = data.len();
    let mut w = broadcast.clone();
    let mut adam = AdamState::new(w.flat_len());
    let adam_opts = AdamOptions::with_lr(opts.lr);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let order: Vec<usize> = if n <= opts.full_batch_limit {
            (0..n).collect()
        } else {
            let mut rng = stream(opts.seed, &[4, epoch as u64]);
            crate::rng::permutation(&mut rng, n)
        };
        let chunk_size = if n <= opts.full_batch_limit {
            n
        } else {
            opts.minibatch
        };
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(chunk_size) {
            let batch: Vec<Sample<F>> = chunk
                .iter()
                .map(|&i| Sample {
                    image: &data.images[i].pixels,
                    label: data.images[i].label,
                })
                .collect();
            let per_example: Vec<Result<_>> = batch
                .par_iter()
                .map(|sample| {
                    let (features, cache) =
                        classify_forward_cached(model, sample.image, Some(&w.disc))?;
                    let (logits, pooled) = classify_cached(&features, &w.classifier)?;
                    let (loss, d_logits) = ce_loss(&logits, sample.label as usize)?;
                    let (clf_grads, d_tokens) =
                        classify_backward(&w.classifier, &pooled, features.len(), &d_logits);
                    let prompt_grads = encoder_prompt_backward(model, &cache, &d_tokens);
                    Ok((loss, prompt_grads, clf_grads))
                })
                .collect();
            let mut grads = w.zeros_like();
            for item in per_example {
                let (loss, prompt_grads, clf_grads) = item?;
                epoch_loss += loss.as_f64();
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
                // recon prompt gradient is structurally zero
            }
            let scale = F::of(1.0 / batch.len() as f64);
            let mut mean_grads = w.zeros_like();
            add_scaled(&mut mean_grads, &grads, scale);
            let mut flat = flatten(&w);
            adam.step(&adam_opts, &mut flat, &flatten(&mean_grads));
            w = unflatten(&flat, &w)?;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(ServerFinetuneOutput {
        params: w,
        epoch_losses,
        skipped: false,
    })
}

const POOL_MAGIC: &[u8; 4] = b"PMPL";
const POOL_VERSION: u16 = 1;

/// Persist a pool so long runs can resume: restore-set wire records grouped
/// by task plus each task's prompt.
pub fn save_pool(path: &Path, pool: &RestorePool<f32>, config_hash: u64) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(POOL_MAGIC);
    put_u16(&mut out, POOL_VERSION);
    put_u64(&mut out, config_hash);
    put_u32(&mut out, pool.len() as u32);
    for entry in pool.entries() {
        put_u32(&mut out, entry.task as u32);
        put_u32(&mut out, entry.prompt.tokens.nrows() as u32);
        put_u32(&mut out, entry.prompt.tokens.ncols() as u32);
        for v in entry.prompt.tokens.iter() {
            put_f32(&mut out, *v);
        }
        put_u32(&mut out, entry.restore_sets.len() as u32);
        for set in &entry.restore_sets {
            out.extend_from_slice(&encode_restore_set(set)?);
        }
    }
    Ok(std::fs::write(path, out)?)
}

pub fn load_pool(path: &Path, expect_config_hash: u64) -> Result<RestorePool<f32>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(POOL_MAGIC)?;
    let version = r.u16()?;
    if version != POOL_VERSION {
        return Err(Error::Decode {
            offset: 4,
            reason: format!("unsupported pool version {version}"),
        });
    }
    let hash = r.u64()?;
    if hash != expect_config_hash {
        return Err(Error::Integrity(format!(
            "pool config hash {hash:#x} does not match model {expect_config_hash:#x}"
        )));
    }
    let entry_count = r.u32()? as usize;
    let mut pool = RestorePool::new();
    for _ in 0..entry_count {
        let task = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32()?);
        }
        let prompt = ReconstructivePrompt {
            tokens: Array2::from_shape_vec((rows, cols), data).expect("sized above"),
        };
        let set_count = r.u32()? as usize;
        let mut restore_sets = Vec::with_capacity(set_count);
        for _ in 0..set_count {
            // decode one count-prefixed restore set in place
            let count_offset = r.offset;
            let count = r.u32()? as usize;
            let mut set_bytes = Vec::new();
            put_u32(&mut set_bytes, count as u32);
            // records are self-delimiting; re-use the set decoder by slicing
            let start = r.offset;
            let mut probe = Reader::new(&bytes[start..]);
            for _ in 0..count {
                skip_record(&mut probe).map_err(|e| shift_offset(e, start))?;
            }
            set_bytes.extend_from_slice(&bytes[start..start + probe.offset]);
            let set = decode_restore_set(&set_bytes).map_err(|e| shift_offset(e, count_offset))?;
            r.take(probe.offset)?;
            restore_sets.push(set);
        }
        pool_merge(&mut pool, task, restore_sets, prompt)?;
    }
    r.expect_end()?;
    Ok(pool)
}

fn shift_offset(err: Error, base: usize) -> Error {
    match err {
        Error::Decode { offset, reason } => Error::Decode {
            offset: offset + base,
            reason,
        },
        other => other,
    }
}

fn skip_record(r: &mut Reader) -> Result<()> {
    r.magic(b"RSTR")?;
    r.u16()?;
    r.u64()?;
    let num_patches = r.u32()? as usize;
    let visible = r.u32()? as usize;
    let dim = r.u32()? as usize;
    r.u32()?;
    r.take(visible * dim * 4)?;
    for _ in 0..num_patches {
        r.varint()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{extract_restore, make_mask_plan};
    use crate::model::config::ModelConfig;
    use crate::prompts::init_params;
    use ndarray::Array3;

    fn params_with(seed: u64, classes: usize) -> TransmittedParams<f32> {
        let mut w = init_params(&ModelConfig::tiny(), classes, &mut stream(seed, &[])).unwrap();
        w.classifier
            .weight
            .mapv_inplace(|_| crate::rng::uniform_f64(&mut stream(seed, &[1]), -1.0, 1.0) as f32);
        w
    }

    #[test]
    fn identical_inputs_average_to_themselves() {
        let w = params_with(1, 3);
        let avg = fedavg(&[w.clone(), w.clone(), w.clone()], &[5, 1, 9]).unwrap();
        assert_eq!(avg, w);
    }

    #[test]
    fn weighted_mean_of_scalars() {
        let mut a = params_with(2, 2);
        let mut b = params_with(2, 2);
        a.classifier.bias[0] = 0.0;
        b.classifier.bias[0] = 4.0;
        let avg = fedavg(&[a, b], &[10, 30]).unwrap();
        assert!((avg.classifier.bias[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn single_input_is_reproduced_exactly() {
        let w = params_with(3, 4);
        let avg = fedavg(std::slice::from_ref(&w), &[17]).unwrap();
        assert_eq!(avg, w);
    }

    #[test]
    fn permutation_invariance_is_bitwise() {
        let clients: Vec<TransmittedParams<f32>> = (0..6).map(|s| params_with(s, 3)).collect();
        let sizes = [3usize, 11, 5, 2, 8, 13];
        let base = fedavg(&clients, &sizes).unwrap();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let shuffled: Vec<_> = perm.iter().map(|&i| clients[i].clone()).collect();
        let shuffled_sizes: Vec<usize> = perm.iter().map(|&i| sizes[i]).collect();
        let other = fedavg(&shuffled, &shuffled_sizes).unwrap();
        for (x, y) in flatten(&base).iter().zip(flatten(&other).iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let w = params_with(4, 2);
        assert!(matches!(
            fedavg::<f32>(&[], &[]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            fedavg(&[w.clone()], &[0]),
            Err(Error::Aggregation(_))
        ));
        let other = params_with(4, 3);
        assert!(matches!(
            fedavg(&[w.clone(), other], &[1, 1]),
            Err(Error::Aggregation(_))
        ));
        assert!(matches!(
            fedavg(&[w], &[1, 2]),
            Err(Error::Aggregation(_))
        ));
    }

    fn restore_sets(model: &Model<f32>, clients: usize, u: usize, seed: u64) -> Vec<Vec<crate::masking::RestoreInfo<f32>>> {
        let mut rng = stream(seed, &[]);
        (0..clients)
            .map(|_| {
                (0..u)
                    .map(|_| {
                        let image = Array3::from_shape_fn((1, 8, 8), |_| {
                            crate::rng::uniform_f64(&mut rng, 0.0, 1.0) as f32
                        });
                        let plan = make_mask_plan(4, 0.5, &mut rng).unwrap();
                        extract_restore(model, &image, 1, &plan).unwrap()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn pool_merge_counts_and_duplicate_rejection() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 5).unwrap();
        let mut pool = RestorePool::new();
        assert!(pool.is_empty());
        let prompt = ReconstructivePrompt::init(&ModelConfig::tiny(), &mut stream(6, &[]));
        pool_merge(&mut pool, 0, restore_sets(&model, 3, 2, 7), prompt.clone()).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.total_records(), 6);
        pool_merge(&mut pool, 1, restore_sets(&model, 3, 2, 8), prompt.clone()).unwrap();
        assert_eq!(pool.total_records(), 12);
        assert!(matches!(
            pool_merge(&mut pool, 1, vec![], prompt),
            Err(Error::Protocol(_))
        ));
        // earlier entries untouched
        assert_eq!(pool.entries()[0].record_count(), 6);
    }

    #[test]
    fn reconstruct_dataset_counts() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 5).unwrap();
        let sets = restore_sets(&model, 10, 4, 9);
        let data = reconstruct_dataset(
            &model,
            ReconstructionSource::CurrentRound {
                restore_sets: &sets,
                prompt: None,
            },
            true,
        )
        .unwrap();
        assert_eq!(data.len(), 40);

        let mut pool = RestorePool::new();
        let prompt = ReconstructivePrompt::init(&ModelConfig::tiny(), &mut stream(10, &[]));
        pool_merge(&mut pool, 0, restore_sets(&model, 10, 4, 11), prompt.clone()).unwrap();
        pool_merge(&mut pool, 1, restore_sets(&model, 10, 4, 12), prompt).unwrap();
        let data = reconstruct_dataset(&model, ReconstructionSource::Pool(&pool), true).unwrap();
        assert_eq!(data.len(), 80);
    }

    #[test]
    fn pool_mode_uses_each_tasks_own_prompt() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 5).unwrap();
        let mut pool = RestorePool::new();
        let prompt_a = ReconstructivePrompt::init(&ModelConfig::tiny(), &mut stream(13, &[]));
        let mut prompt_b = ReconstructivePrompt::init(&ModelConfig::tiny(), &mut stream(14, &[]));
        prompt_b.tokens.mapv_inplace(|v| v + 0.5); // clearly different
        let sets_a = restore_sets(&model, 1, 2, 15);
        let sets_b = restore_sets(&model, 1, 2, 16);
        pool_merge(&mut pool, 0, sets_a.clone(), prompt_a.clone()).unwrap();
        pool_merge(&mut pool, 1, sets_b.clone(), prompt_b.clone()).unwrap();
        let data = reconstruct_dataset(&model, ReconstructionSource::Pool(&pool), true).unwrap();
        // first two images must equal direct reconstruction with prompt_a,
        // last two with prompt_b — and differ from the swapped prompt.
        for (i, record) in sets_a[0].iter().enumerate() {
            let own = reconstruct(&model, record, Some(&prompt_a)).unwrap();
            let other = reconstruct(&model, record, Some(&prompt_b)).unwrap();
            assert_eq!(data.images[i].pixels, own.pixels);
            assert_ne!(data.images[i].pixels, other.pixels);
        }
        for (i, record) in sets_b[0].iter().enumerate() {
            let own = reconstruct(&model, record, Some(&prompt_b)).unwrap();
            assert_eq!(data.images[2 + i].pixels, own.pixels);
        }
    }

    #[test]
    fn config_hash_mismatch_is_integrity_error() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 5).unwrap();
        let mut sets = restore_sets(&model, 1, 1, 17);
        sets[0][0].config_hash ^= 1;
        assert!(matches!(
            reconstruct_dataset(
                &model,
                ReconstructionSource::CurrentRound {
                    restore_sets: &sets,
                    prompt: None
                },
                true
            ),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn finetune_leaves_recon_prompt_bitwise_intact() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 5).unwrap();
        let w = params_with(18, 2);
        let sets = restore_sets(&model, 2, 3, 19);
        let data = reconstruct_dataset(
            &model,
            ReconstructionSource::CurrentRound {
                restore_sets: &sets,
                prompt: Some(&w.recon),
            },
            true,
        )
        .unwrap();
        let out = server_finetune(&model, &w, &data, &ServerFinetuneOptions::default()).unwrap();
        assert!(!out.skipped);
        let before: Vec<u32> = w.recon.tokens.iter().map(|v| v.to_bits()).collect();
        let after: Vec<u32> = out.params.recon.tokens.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_ne!(out.params.classifier, w.classifier);
    }

    #[test]
    fn empty_dataset_skips_with_flag() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 5).unwrap();
        let w = params_with(20, 2);
        let data = GlobalReconstructedDataset { images: vec![] };
        let out = server_finetune(&model, &w, &data, &ServerFinetuneOptions::default()).unwrap();
        assert!(out.skipped);
        assert_eq!(out.params, w);
    }

    #[test]
    fn pool_persistence_roundtrip() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(), 5).unwrap();
        let mut pool = RestorePool::new();
        let prompt = ReconstructivePrompt::init(&ModelConfig::tiny(), &mut stream(21, &[]));
        pool_merge(&mut pool, 0, restore_sets(&model, 2, 2, 22), prompt.clone()).unwrap();
        pool_merge(&mut pool, 3, restore_sets(&model, 1, 4, 23), prompt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        let hash = model.config.content_hash();
        save_pool(&path, &pool, hash).unwrap();
        let loaded = load_pool(&path, hash).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.total_records(), pool.total_records());
        assert_eq!(loaded.entries()[1].task, 3);
        assert_eq!(
            loaded.entries()[0].restore_sets,
            pool.entries()[0].restore_sets
        );
        assert!(matches!(
            load_pool(&path, hash ^ 1),
            Err(Error::Integrity(_))
        ));
    }
}
