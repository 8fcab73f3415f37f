//! Run directories: manifest, per-seed metrics, accuracy CSVs.
//!
//! A run directory is self-describing — everything `plot` needs is inside.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{run_experiment, ExperimentConfig, RunOptions, RunOutcome, RunTrace};

/// Top-level description of a (possibly multi-seed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// Fingerprint of the config and crate version driving this run.
    pub content_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Relative path of each seed's metrics file, in seed order.
    pub result_paths: Vec<String>,
    pub status: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub wall_seconds: Option<f64>,
}

/// Contents of `metrics.json`; fully determined by config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Lower-triangular accuracy matrix, rows by stage.
    pub matrix: Vec<Vec<f64>>,
    /// Stage accuracies A_t.
    pub per_stage: Vec<f64>,
    /// Overall average accuracy.
    pub average: f64,
}

/// Fingerprint over the canonical config text and the crate version.
pub fn content_hash(config: &ExperimentConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.to_toml_string().as_bytes());
    hasher.update([0u8]);
    hasher.update(env!("CARGO_PKG_VERSION").as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

fn accuracy_csv(per_stage: &[f64]) -> String {
    let mut out = String::from("stage,accuracy\n");
    for (i, a) in per_stage.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, a));
    }
    out
}

/// Run `config` under every seed, writing a self-describing run directory:
/// manifest.json, config.toml, and per-seed metrics/trace/CSV files.
/// The manifest is written before training starts and finalized after.
pub fn execute_run_dir(
    dir: &Path,
    config: &ExperimentConfig,
    seeds: &[u64],
    options: &RunOptions,
) -> Result<Vec<RunOutcome>> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    std::fs::create_dir_all(dir)?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let mut manifest = RunManifest {
        name,
        content_hash: content_hash(config),
        config: config.clone(),
        seeds: seeds.to_vec(),
        result_paths: seeds
            .iter()
            .map(|s| format!("seed_{s}/metrics.json"))
            .collect(),
        status: "running".into(),
        started_unix: now_unix(),
        finished_unix: None,
        wall_seconds: None,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    std::fs::write(dir.join("config.toml"), config.to_toml_string())?;

    let clock = Instant::now();
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let seed_dir = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        let mut seed_config = config.clone();
        seed_config.seed = seed;
        let seed_options = RunOptions {
            dump_reconstructions: options
                .dump_reconstructions
                .as_ref()
                .map(|_| seed_dir.join("reconstructions")),
        };
        let outcome = run_experiment(&seed_config, &seed_options)?;
        write_seed_outputs(&seed_dir, &outcome)?;
        outcomes.push(outcome);
    }

    manifest.status = "complete".into();
    manifest.finished_unix = Some(now_unix());
    manifest.wall_seconds = Some(clock.elapsed().as_secs_f64());
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(outcomes)
}

/// Write one seed's metrics.json, trace.json and accuracy CSV.
pub fn write_seed_outputs(seed_dir: &Path, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(seed_dir)?;
    let metrics = SeedMetrics {
        config: outcome.config.clone(),
        seed: outcome.config.seed,
        matrix: outcome.ledger.matrix.clone(),
        per_stage: outcome.summary.per_stage.clone(),
        average: outcome.summary.average,
    };
    write_json(&seed_dir.join("metrics.json"), &metrics)?;
    write_json(&seed_dir.join("trace.json"), &outcome.trace)?;
    std::fs::write(
        seed_dir.join("accuracy_curve.csv"),
        accuracy_csv(&outcome.summary.per_stage),
    )?;
    Ok(())
}

/// All per-seed metrics of a run directory, in manifest order.
pub fn load_run_metrics(dir: &Path) -> Result<(RunManifest, Vec<SeedMetrics>)> {
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut all = Vec::with_capacity(manifest.result_paths.len());
    for rel in &manifest.result_paths {
        let metrics: SeedMetrics = serde_json::from_str(&std::fs::read_to_string(dir.join(rel))?)?;
        all.push(metrics);
    }
    Ok((manifest, all))
}

/// Load a seed's trace (for debugging and tests).
pub fn load_trace(seed_dir: &Path) -> Result<RunTrace> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        seed_dir.join("trace.json"),
    )?)?)
}

/// Human-readable label for grouping runs in plots.
pub fn run_label(config: &ExperimentConfig) -> String {
    use crate::harness::{Ablation, Method};
    match (config.method, config.ablation) {
        (Method::Pmae, Ablation::None) => "pmae".into(),
        (Method::Pmae, Ablation::ReconPrompt) => "ablate-recon-prompt".into(),
        (Method::Pmae, Ablation::U1) => "reduce-u".into(),
        (Method::Pmae, Ablation::NoPool) => "remove-pool".into(),
        (Method::NoServerFt, Ablation::None) => "no-server-ft".into(),
        (Method::NoServerFt, a) => format!("no-server-ft+{a:?}").to_lowercase(),
    }
}

/// Where a seed's metrics live inside a run dir.
pub fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tests_support::tiny_experiment;

    #[test]
    fn run_dir_is_self_describing_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment();
        let run_dir = dir.path().join("tiny");
        execute_run_dir(&run_dir, &cfg, &[2023, 2024], &RunOptions::default()).unwrap();

        let (manifest, metrics) = load_run_metrics(&run_dir).unwrap();
        assert_eq!(manifest.status, "complete");
        assert_eq!(manifest.seeds, vec![2023, 2024]);
        assert_eq!(metrics.len(), 2);
        assert_eq!(metrics[0].seed, 2023);
        assert_eq!(metrics[0].matrix.len(), cfg.federation.tasks);
        assert!(manifest.wall_seconds.unwrap() > 0.0);
        assert_eq!(manifest.content_hash, content_hash(&cfg));

        // byte-identical metrics.json on re-run with the same config+seed
        let again = dir.path().join("tiny2");
        execute_run_dir(&again, &cfg, &[2023], &RunOptions::default()).unwrap();
        let a = std::fs::read(run_dir.join("seed_2023/metrics.json")).unwrap();
        let b = std::fs::read(again.join("seed_2023/metrics.json")).unwrap();
        assert_eq!(a, b);

        // CSV rows match metrics
        let csv = std::fs::read_to_string(run_dir.join("seed_2023/accuracy_curve.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + cfg.federation.tasks);
    }

    #[test]
    fn content_hash_tracks_config_changes() {
        let a = tiny_experiment();
        let mut b = a.clone();
        b.federation.beta = 0.123;
        assert_ne!(content_hash(&a), content_hash(&b));
        assert_eq!(content_hash(&a), content_hash(&a.clone()));
    }
}
