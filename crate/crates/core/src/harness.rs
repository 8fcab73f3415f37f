//! Experiment orchestration: task stream construction, round scheduling,
//! client fan-out, server aggregation/fine-tuning, and evaluation.

use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_update, ClientState, LocalUpdateOptions, LocalUpdateOutput};
use crate::data::{split_tasks, synthetic_corpus, Corpus, Sample, TaskStream};
use crate::error::{Error, Result};
use crate::loss::LossPixels;
use crate::masking::RestoreInfo;
use crate::metrics::{compute_metrics, MetricsLedger, MetricsSummary};
use crate::model::classifier::{argmax_class, classify};
use crate::model::config::ModelConfig;
use crate::model::encoder::encoder_forward;
use crate::model::params::Model;
use crate::partition::dirichlet_partition;
use crate::pretrain::{pretrain_decoder, PretrainOptions};
use crate::prompts::{expand_classifier, init_params, TransmittedParams};
use crate::server::{
    fedavg, pool_merge, reconstruct_dataset, server_finetune, ReconstructionSource, RestorePool,
    ServerFinetuneOptions,
};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The full protocol: prompt tuning plus server fine-tuning on
    /// reconstructed images.
    #[default]
    Pmae,
    /// Plain federated prompt tuning; the server only aggregates.
    NoServerFt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Remove the reconstructive prompt everywhere (training and decoding).
    ReconPrompt,
    /// Upload a single restore record per client per round.
    U1,
    /// Never merge into the restore pool; end-of-task fine-tuning sees only
    /// the current task's uploads.
    NoPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub corpus_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 32,
            test_per_class: 16,
            corpus_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// T disjoint tasks.
    pub tasks: usize,
    /// K clients.
    pub clients: usize,
    /// Total communication rounds; per-task rounds are `rounds_total / tasks`.
    pub rounds_total: usize,
    /// Local epochs E per round.
    pub local_epochs: usize,
    /// Server fine-tuning epochs.
    pub server_epochs: usize,
    /// Restore records uploaded per client per round (u).
    pub restore_per_client: usize,
    /// Dirichlet concentration; lower is more non-IID.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            clients: 4,
            rounds_total: 25,
            local_epochs: 2,
            server_epochs: 5,
            restore_per_client: 4,
            beta: 0.1,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Init seed for a fresh backbone when no checkpoint is given.
    pub seed: u64,
    /// Load a pre-trained backbone instead of initializing one.
    pub checkpoint: Option<PathBuf>,
    /// Decoder pre-training epochs when no checkpoint is given (0 skips).
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            checkpoint: None,
            pretrain_epochs: 30,
            pretrain_lr: 1e-3,
        }
    }
}

/// Everything a run needs; the documented key-value schema of config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub backbone: BackboneConfig,
    pub method: Method,
    pub ablation: Ablation,
    pub loss_pixels: LossPixels,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_scale()
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Communication rounds per task, R = rounds_total / tasks.
    pub fn rounds_per_task(&self) -> Result<usize> {
        let f = &self.federation;
        if f.tasks == 0 || f.rounds_total == 0 {
            return Err(Error::Config("tasks and rounds_total must be positive".into()));
        }
        if f.rounds_total % f.tasks != 0 {
            return Err(Error::Config(format!(
                "rounds_total {} not divisible by tasks {}",
                f.rounds_total, f.tasks
            )));
        }
        Ok(f.rounds_total / f.tasks)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rounds_per_task()?;
        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if f.local_epochs == 0 || f.server_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if f.restore_per_client == 0 {
            return Err(Error::Config("restore_per_client must be positive".into()));
        }
        if f.beta <= 0.0 {
            return Err(Error::Config("beta must be positive".into()));
        }
        if f.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.data.classes % f.tasks != 0 {
            return Err(Error::Config(format!(
                "{} classes cannot split into {} equal tasks",
                self.data.classes, f.tasks
            )));
        }
        if self.model.image_side != 0 && self.data.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        Ok(())
    }

    fn effective_u(&self) -> usize {
        match self.ablation {
            Ablation::U1 => 1,
            _ => self.federation.restore_per_client,
        }
    }

    fn use_recon_prompt(&self) -> bool {
        self.ablation != Ablation::ReconPrompt
    }

    fn use_pool(&self) -> bool {
        self.ablation != Ablation::NoPool
    }
}

/// Schedule log: every protocol action, for assertions and debugging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    ClientSkipped {
        task: usize,
        round: usize,
        client: usize,
    },
    RoundAggregated {
        task: usize,
        round: usize,
        participants: usize,
    },
    MidTaskFinetune {
        task: usize,
        round: usize,
        dataset: usize,
        skipped: bool,
    },
    PoolMerged {
        task: usize,
        records: usize,
        total_records: usize,
    },
    EndTaskFinetune {
        task: usize,
        dataset: usize,
        from_pool: bool,
        skipped: bool,
    },
    Evaluated {
        task: usize,
        stage_accuracy: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub events: Vec<TraceEvent>,
    pub backbone_digest_start: String,
    pub backbone_digest_end: String,
    /// Dataset class ids in global head-index order.
    pub label_order: Vec<u32>,
    pub pool_records: usize,
}

pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub ledger: MetricsLedger,
    pub summary: MetricsSummary,
    pub trace: RunTrace,
    /// Final global parameters (for inspection / snapshotting).
    pub final_params: TransmittedParams<f32>,
}

/// Debug hooks that do not alter results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write masked/unprompted/prompted/ground-truth panels after each task.
    pub dump_reconstructions: Option<PathBuf>,
}

/// Map raw dataset labels to global head indices (order of first appearance
/// in the task stream).
pub(crate) struct LabelSpace {
    order: Vec<u32>,
    index: HashMap<u32, u32>,
}

impl LabelSpace {
    fn new() -> Self {
        Self {
            order: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn extend(&mut self, classes: &[u32]) {
        for &c in classes {
            let next = self.order.len() as u32;
            self.index.insert(c, next);
            self.order.push(c);
        }
    }

    fn head(&self, raw: u32) -> u32 {
        self.index[&raw]
    }

    fn seen(&self) -> usize {
        self.order.len()
    }
}

/// Build the backbone for a run: load a checkpoint or initialize (optionally
/// pre-training the decoder inline on the run's corpus).
pub fn prepare_backbone(config: &ExperimentConfig, corpus: &Corpus<f32>) -> Result<Model<f32>> {
    if let Some(path) = &config.backbone.checkpoint {
        let model: Model<f32> = crate::checkpoint::load_model(path)?;
        if model.config != config.model {
            return Err(Error::Config(
                "checkpoint model config does not match experiment config".into(),
            ));
        }
        return Ok(model);
    }
    let mut model = Model::init(config.model, config.backbone.seed)?;
    if config.backbone.pretrain_epochs > 0 {
        let train: Vec<&ndarray::Array3<f32>> =
            corpus.train.iter().map(|i| &i.pixels).collect();
        let holdout: Vec<&ndarray::Array3<f32>> =
            corpus.test.iter().map(|i| &i.pixels).collect();
        pretrain_decoder(
            &mut model,
            &train,
            &holdout,
            &PretrainOptions {
                epochs: config.backbone.pretrain_epochs,
                lr: config.backbone.pretrain_lr,
                batch_size: config.federation.batch_size,
                seed: config.backbone.seed,
                loss_pixels: config.loss_pixels,
            },
        )?;
    }
    Ok(model)
}

fn evaluate_task(
    model: &Model<f32>,
    w: &TransmittedParams<f32>,
    corpus: &Corpus<f32>,
    task: &crate::data::TaskSpec,
    labels: &LabelSpace,
) -> Result<f64> {
    let correct: Vec<Result<bool>> = task
        .test
        .par_iter()
        .map(|&i| {
            let img = &corpus.test[i];
            let features = encoder_forward(model, &img.pixels, Some(&w.disc), None)?;
            let logits = classify(&features, &w.classifier)?;
            Ok(argmax_class(&logits) as u32 == labels.head(img.label))
        })
        .collect();
    let mut hits = 0usize;
    for c in correct {
        if c? {
            hits += 1;
        }
    }
    Ok(hits as f64 / task.test.len().max(1) as f64)
}

/// Execute the full protocol: per task, R rounds of broadcast, parallel local
/// updates, weighted aggregation, and (mid-task) fine-tuning on the current
/// round's reconstructions; at task end, pool merge and pool-wide
/// fine-tuning, then evaluation over every seen task.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let rounds = config.rounds_per_task()?;
    let fed = &config.federation;

    let corpus: Corpus<f32> = synthetic_corpus(
        config.data.classes,
        config.data.train_per_class,
        config.data.test_per_class,
        config.model.image_side,
        config.model.channels,
        config.data.corpus_seed,
    );
    let model = prepare_backbone(config, &corpus)?;
    let digest_start = model.backbone_digest();

    let tasks: TaskStream = split_tasks(&corpus, fed.tasks, &mut stream(config.seed, &[10]))?;
    let mut labels = LabelSpace::new();
    labels.extend(&tasks.tasks[0].classes);

    let mut w: TransmittedParams<f32> =
        init_params(&config.model, labels.seen(), &mut stream(config.seed, &[11]))?;
    let mut pool: RestorePool<f32> = RestorePool::new();
    let mut ledger = MetricsLedger::new();
    let mut events = Vec::new();

    for (t, task) in tasks.tasks.iter().enumerate() {
        if t > 0 {
            labels.extend(&task.classes);
            w = expand_classifier(&w, task.classes.len());
        }
        let partition = dirichlet_partition(
            &corpus,
            task,
            fed.clients,
            fed.beta,
            &mut stream(config.seed, &[12, t as u64]),
        )
        .map_err(|e| e.at(t, 0, None))?;

        let mut final_round_sets: Vec<Vec<RestoreInfo<f32>>> = Vec::new();
        for round in 1..=rounds {
            let broadcast = w.clone();
            let client_results: Vec<(usize, Result<Option<LocalUpdateOutput<f32>>>)> = (0
                ..fed.clients)
                .into_par_iter()
                .map(|k| {
                    let samples: Vec<Sample<f32>> = partition.per_client[k]
                        .iter()
                        .map(|&i| Sample {
                            image: &corpus.train[i].pixels,
                            label: labels.head(corpus.train[i].label),
                        })
                        .collect();
                    let state = ClientState {
                        client_id: k,
                        samples,
                        seed: crate::rng::derive_seed(
                            config.seed,
                            &[13, t as u64, round as u64, k as u64],
                        ),
                    };
                    let opts = LocalUpdateOptions {
                        epochs: fed.local_epochs,
                        batch_size: fed.batch_size,
                        lr: fed.lr,
                        restore_count: config.effective_u(),
                        loss_pixels: config.loss_pixels,
                        use_recon_prompt: config.use_recon_prompt(),
                    };
                    (k, local_update(&model, &state, &broadcast, &opts))
                })
                .collect();

            let mut params = Vec::new();
            let mut sizes = Vec::new();
            let mut round_sets: Vec<Vec<RestoreInfo<f32>>> = Vec::new();
            for (k, result) in client_results {
                match result.map_err(|e| e.at(t, round, Some(k)))? {
                    Some(output) => {
                        params.push(output.params);
                        sizes.push(output.samples);
                        round_sets.push(output.restore_set);
                    }
                    None => events.push(TraceEvent::ClientSkipped {
                        task: t,
                        round,
                        client: k,
                    }),
                }
            }
            w = fedavg(&params, &sizes).map_err(|e| e.at(t, round, None))?;
            events.push(TraceEvent::RoundAggregated {
                task: t,
                round,
                participants: params.len(),
            });

            if round != rounds {
                if config.method == Method::Pmae {
                    let data = reconstruct_dataset(
                        &model,
                        ReconstructionSource::CurrentRound {
                            restore_sets: &round_sets,
                            prompt: Some(&w.recon),
                        },
                        config.use_recon_prompt(),
                    )
                    .map_err(|e| e.at(t, round, None))?;
                    let out = server_finetune(
                        &model,
                        &w,
                        &data,
                        &ServerFinetuneOptions {
                            epochs: fed.server_epochs,
                            lr: fed.lr,
                            seed: crate::rng::derive_seed(
                                config.seed,
                                &[14, t as u64, round as u64],
                            ),
                            ..Default::default()
                        },
                    )
                    .map_err(|e| e.at(t, round, None))?;
                    events.push(TraceEvent::MidTaskFinetune {
                        task: t,
                        round,
                        dataset: data.len(),
                        skipped: out.skipped,
                    });
                    w = out.params;
                }
            } else {
                final_round_sets = round_sets;
            }
        }

        // end of task: archive the final round's uploads, then fine-tune on
        // the full history (or only the current task without a pool)
        let end_prompt = w.recon.clone();
        if config.use_pool() {
            let records: usize = final_round_sets.iter().map(|s| s.len()).sum();
            pool_merge(&mut pool, t, std::mem::take(&mut final_round_sets), end_prompt)
                .map_err(|e| e.at(t, rounds, None))?;
            events.push(TraceEvent::PoolMerged {
                task: t,
                records,
                total_records: pool.total_records(),
            });
        }
        if config.method == Method::Pmae {
            let (data, from_pool) = if config.use_pool() {
                (
                    reconstruct_dataset(
                        &model,
                        ReconstructionSource::Pool(&pool),
                        config.use_recon_prompt(),
                    )
                    .map_err(|e| e.at(t, rounds, None))?,
                    true,
                )
            } else {
                (
                    reconstruct_dataset(
                        &model,
                        ReconstructionSource::CurrentRound {
                            restore_sets: &final_round_sets,
                            prompt: Some(&w.recon),
                        },
                        config.use_recon_prompt(),
                    )
                    .map_err(|e| e.at(t, rounds, None))?,
                    false,
                )
            };
            let out = server_finetune(
                &model,
                &w,
                &data,
                &ServerFinetuneOptions {
                    epochs: fed.server_epochs,
                    lr: fed.lr,
                    seed: crate::rng::derive_seed(config.seed, &[15, t as u64]),
                    ..Default::default()
                },
            )
            .map_err(|e| e.at(t, rounds, None))?;
            events.push(TraceEvent::EndTaskFinetune {
                task: t,
                dataset: data.len(),
                from_pool,
                skipped: out.skipped,
            });
            w = out.params;
        }

        if let Some(dir) = &options.dump_reconstructions {
            crate::dump::dump_task_panels(&model, &w, &corpus, task, t, dir)
                .map_err(|e| e.at(t, rounds, None))?;
        }

        // score the post-fine-tune global model on every seen task
        let mut stage = Vec::with_capacity(t + 1);
        for prev in tasks.tasks.iter().take(t + 1) {
            stage.push(evaluate_task(&model, &w, &corpus, prev, &labels)?);
        }
        events.push(TraceEvent::Evaluated {
            task: t,
            stage_accuracy: stage.iter().sum::<f64>() / stage.len() as f64,
        });
        ledger.record_stage(stage)?;
    }

    let digest_end = model.backbone_digest();
    let summary = compute_metrics(&ledger.matrix)?;
    Ok(RunOutcome {
        config: config.clone(),
        summary,
        trace: RunTrace {
            events,
            backbone_digest_start: format!("{digest_start:016x}"),
            backbone_digest_end: format!("{digest_end:016x}"),
            label_order: labels.order.clone(),
            pool_records: pool.total_records(),
        },
        ledger,
        final_params: w,
    })
}

/// Small ready-made configurations for tests.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// A configuration small enough for protocol tests.
    pub(crate) fn tiny_experiment() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig::tiny(),
            data: DataConfig {
                classes: 4,
                train_per_class: 6,
                test_per_class: 4,
                corpus_seed: 3,
            },
            federation: FederationConfig {
                tasks: 2,
                clients: 2,
                rounds_total: 4,
                local_epochs: 1,
                server_epochs: 2,
                restore_per_client: 2,
                beta: 0.5,
                lr: 1e-3,
                batch_size: 8,
            },
            backbone: BackboneConfig {
                seed: 11,
                checkpoint: None,
                pretrain_epochs: 2,
                pretrain_lr: 1e-3,
            },
            method: Method::Pmae,
            ablation: Ablation::None,
            loss_pixels: LossPixels::All,
            seed: 2023,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::tiny_experiment;
    use super::*;

    #[test]
    fn rounds_per_task_arithmetic() {
        let mut cfg = ExperimentConfig::default();
        cfg.federation.rounds_total = 200;
        cfg.federation.tasks = 20;
        cfg.data.classes = 20;
        assert_eq!(cfg.rounds_per_task().unwrap(), 10);
        cfg.federation.rounds_total = 201;
        assert!(cfg.rounds_per_task().is_err());
    }

    #[test]
    fn toml_roundtrip_and_unknown_key_rejection() {
        let cfg = tiny_experiment();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(ExperimentConfig::from_toml_str("nonsense_key = 1").is_err());
    }

    #[test]
    fn schedule_matches_protocol() {
        let cfg = tiny_experiment();
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.ledger.stages(), 2);
        // backbone frozen across the entire run
        assert_eq!(out.trace.backbone_digest_start, out.trace.backbone_digest_end);
        // mid-task fine-tunes only on rounds != R, end-of-task always from pool
        let mid: Vec<_> = out
            .trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::MidTaskFinetune { round, .. } => Some(*round),
                _ => None,
            })
            .collect();
        assert_eq!(mid, vec![1, 1], "one mid-task FT per task at round 1 of 2");
        let ends: Vec<_> = out
            .trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::EndTaskFinetune { from_pool, dataset, .. } => {
                    Some((*from_pool, *dataset))
                }
                _ => None,
            })
            .collect();
        assert_eq!(ends.len(), 2);
        assert!(ends.iter().all(|(from_pool, _)| *from_pool));
        // pool grows by K*u per task
        assert_eq!(ends[0].1, 4);
        assert_eq!(ends[1].1, 8);
        assert_eq!(out.trace.pool_records, 8);
    }

    #[test]
    fn no_server_ft_skips_eq6_entirely() {
        let mut cfg = tiny_experiment();
        cfg.method = Method::NoServerFt;
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert!(!out.trace.events.iter().any(|e| matches!(
            e,
            TraceEvent::MidTaskFinetune { .. } | TraceEvent::EndTaskFinetune { .. }
        )));
    }

    #[test]
    fn no_pool_ablation_sees_only_current_task() {
        let mut cfg = tiny_experiment();
        cfg.ablation = Ablation::NoPool;
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert!(!out
            .trace
            .events
            .iter()
            .any(|e| matches!(e, TraceEvent::PoolMerged { .. })));
        let ends: Vec<_> = out
            .trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::EndTaskFinetune { from_pool, dataset, .. } => {
                    Some((*from_pool, *dataset))
                }
                _ => None,
            })
            .collect();
        assert!(ends.iter().all(|(from_pool, _)| !from_pool));
        // both tasks see exactly K*u = 4 records
        assert!(ends.iter().all(|(_, d)| *d == 4));
        assert_eq!(out.trace.pool_records, 0);
    }

    #[test]
    fn u1_ablation_reduces_uploads() {
        let mut cfg = tiny_experiment();
        cfg.ablation = Ablation::U1;
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        // pool gains K*1 records per task
        assert_eq!(out.trace.pool_records, 4);
    }

    #[test]
    fn single_task_average_equals_stage_accuracy() {
        let mut cfg = tiny_experiment();
        cfg.federation.tasks = 1;
        cfg.federation.rounds_total = 2;
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.summary.per_stage.len(), 1);
        assert_eq!(out.summary.average, out.summary.per_stage[0]);
    }

    #[test]
    fn identical_seeds_reproduce_identically() {
        let cfg = tiny_experiment();
        let a = run_experiment(&cfg, &RunOptions::default()).unwrap();
        let b = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.final_params, b.final_params);
    }
}
