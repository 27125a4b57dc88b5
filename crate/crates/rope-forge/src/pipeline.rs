//! Orchestration: the progressive extend / fine-tune / re-search / recover
//! pipeline, length-keyed factor bundles for dynamic selection, and the
//! resumable run-directory layout with stage hashing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Split};
use crate::eval::{
    passkey_eval, ppl_sweep, CheckpointGenerator, EvalError, PasskeyReport, PplReport, StrideRule,
};
use crate::rope::{FactorFile, RescaleFactors, RopeError, RotaryConfig};
use crate::search::{
    baseline_seeds, composed_baseline_seeds, history_csv, run_search_with_seeds, PerplexityOracle,
    SearchConfig, SearchError, SearchOutcome, SearchSidecar,
};
use crate::tinyformer::checkpoint::{self, CheckpointError};
use crate::tinyformer::train::train_log_csv;
use crate::tinyformer::{
    finetune_progressive, train, ModelCheckpoint, ModelConfig, ModelError, TrainConfig, TrainError,
};

/// Environment variable overriding the run directory.
pub const RUN_DIR_ENV: &str = "ROPE_FORGE_RUN_DIR";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("run directory {path} is locked by another writer (remove {lock} if stale)")]
    Locked { path: String, lock: String },
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: String, hint: String },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("invalid factor bundle: {0}")]
    Bundle(String),
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Factor bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BundleEntry {
    pub max_len: usize,
    pub factors: RescaleFactors,
}

/// Length-keyed rescale factors for dynamic selection at inference: the
/// entry with the smallest max_len >= the sequence length wins, falling back
/// to the default (full-target) factors.
#[derive(Debug, Clone)]
pub struct FactorBundle {
    entries: Vec<BundleEntry>,
    default_factors: RescaleFactors,
}

impl FactorBundle {
    pub fn new(
        entries: Vec<BundleEntry>,
        default_factors: RescaleFactors,
    ) -> Result<Self, PipelineError> {
        for w in entries.windows(2) {
            if w[0].max_len >= w[1].max_len {
                return Err(PipelineError::Bundle(format!(
                    "entry max_len values must strictly increase, got {} then {}",
                    w[0].max_len, w[1].max_len
                )));
            }
        }
        for e in &entries {
            if e.factors.target_len() < e.max_len {
                return Err(PipelineError::Bundle(format!(
                    "entry at max_len {} has factors with target_len {} (too short)",
                    e.max_len,
                    e.factors.target_len()
                )));
            }
        }
        if entries.is_empty() {
            return Err(PipelineError::Bundle(
                "bundle needs at least the full-target entry".into(),
            ));
        }
        Ok(Self {
            entries,
            default_factors,
        })
    }

    /// Bundle holding only one set of factors (its own full-target entry).
    pub fn single(rf: RescaleFactors) -> Self {
        Self {
            entries: vec![BundleEntry {
                max_len: rf.target_len(),
                factors: rf.clone(),
            }],
            default_factors: rf,
        }
    }

    pub fn entries(&self) -> &[BundleEntry] {
        &self.entries
    }

    pub fn default_factors(&self) -> &RescaleFactors {
        &self.default_factors
    }

    /// Smallest entry covering `seq_len` (inclusive bound), else the default.
    pub fn select(&self, seq_len: usize) -> &RescaleFactors {
        self.entries
            .iter()
            .find(|e| e.max_len >= seq_len)
            .map(|e| &e.factors)
            .unwrap_or(&self.default_factors)
    }

    pub fn save(&self, path: &Path, rotary: &RotaryConfig) -> Result<(), PipelineError> {
        let file = BundleFile {
            entries: self
                .entries
                .iter()
                .map(|e| BundleEntryFile {
                    max_len: e.max_len,
                    factors: FactorFile::from_parts(rotary, &e.factors),
                })
                .collect(),
            default_factors: FactorFile::from_parts(rotary, &self.default_factors),
        };
        let text = serde_json::to_string_pretty(&file).expect("bundle serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<(Self, RotaryConfig), PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let file: BundleFile = serde_json::from_str(&text).map_err(|source| PipelineError::Json {
            path: path.display().to_string(),
            source,
        })?;
        let (rotary, default_factors) = file.default_factors.into_parts()?;
        let mut entries = Vec::new();
        for e in file.entries {
            let (r, rf) = e.factors.into_parts()?;
            if r != rotary {
                return Err(PipelineError::Bundle(
                    "bundle entries disagree on rotary geometry".into(),
                ));
            }
            entries.push(BundleEntry {
                max_len: e.max_len,
                factors: rf,
            });
        }
        Ok((Self::new(entries, default_factors)?, rotary))
    }
}

/// Pure selection helper mirroring `FactorBundle::select`.
pub fn select_factors<'a>(bundle: &'a FactorBundle, seq_len: usize) -> &'a RescaleFactors {
    bundle.select(seq_len)
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleEntryFile {
    max_len: usize,
    factors: FactorFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleFile {
    entries: Vec<BundleEntryFile>,
    default_factors: FactorFile,
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresetKind {
    Desk,
    Paper,
}

/// Stage target lengths: two first-stage search targets, the secondary
/// target reached without further fine-tuning, and the short recovery
/// lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTargets {
    pub s1_mid: usize,
    pub s1_full: usize,
    pub s2_final: usize,
    pub recovery: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub base_train: TrainConfig,
    pub finetune: TrainConfig,
    /// Steps for the two progressive fine-tune stages (2:3 ratio default).
    pub finetune_steps1: usize,
    pub finetune_steps2: usize,
    pub preset: PresetKind,
    pub targets: StageTargets,
    pub eval_lengths: Vec<usize>,
    pub eval_docs: usize,
    pub passkey_lengths: Vec<usize>,
    pub passkey_iterations: usize,
    pub fitness_docs_primary: usize,
    pub fitness_docs_extreme: usize,
    pub stride: StrideRule,
    pub split_ratios: (f64, f64, f64),
    pub run_dir: PathBuf,
    pub seed: u64,
    pub train_base_if_missing: bool,
    /// Synthetic sample corpus size used when no corpus paths are supplied.
    pub sample_docs: usize,
    pub sample_doc_bytes: usize,
}

impl PipelineConfig {
    /// Desk preset: runs end to end on one commodity core. Progressive
    /// targets 4x -> 8x, then 4x more on the fine-tuned model (32x total).
    pub fn desk(run_dir: PathBuf, seed: u64) -> Self {
        let model = ModelConfig::desk_default();
        let base_train = TrainConfig {
            steps: 600,
            batch_size: 8,
            seq_len: model.trained_len,
            seed,
            ..TrainConfig::desk_default()
        };
        let finetune = TrainConfig {
            steps: 0, // per-stage counts below
            batch_size: 4,
            seq_len: 0,
            learning_rate: 3e-4,
            seed: seed.wrapping_add(1),
            ..TrainConfig::desk_default()
        };
        Self {
            model,
            base_train,
            finetune,
            finetune_steps1: 40,
            finetune_steps2: 60,
            preset: PresetKind::Desk,
            targets: StageTargets {
                s1_mid: 512,
                s1_full: 1024,
                s2_final: 4096,
                recovery: vec![128, 256],
            },
            eval_lengths: vec![128, 256, 512, 1024, 4096],
            eval_docs: 3,
            passkey_lengths: vec![512, 1024, 4096],
            passkey_iterations: 10,
            fitness_docs_primary: 5,
            fitness_docs_extreme: 3,
            stride: StrideRule::DESK,
            split_ratios: (0.8, 0.1, 0.1),
            run_dir,
            seed,
            train_base_if_missing: true,
            sample_docs: 96,
            sample_doc_bytes: 64 * 1024,
        }
    }

    /// Reference-scale preset: the 8x -> 16x -> 8x progressive structure
    /// with the full P=64 search. Expect hours of wall clock.
    pub fn paper(run_dir: PathBuf, seed: u64) -> Self {
        let mut cfg = Self::desk(run_dir, seed);
        cfg.preset = PresetKind::Paper;
        cfg.targets = StageTargets {
            s1_mid: 1024,
            s1_full: 2048,
            s2_final: 16384,
            recovery: vec![128, 256],
        };
        cfg.eval_lengths = vec![128, 256, 1024, 2048, 16384];
        cfg.passkey_lengths = vec![1024, 2048, 16384];
        cfg.finetune_steps1 = 400;
        cfg.finetune_steps2 = 600;
        cfg.stride = StrideRule::PAPER;
        cfg
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let t = &self.targets;
        if !(t.s1_mid < t.s1_full && t.s1_full < t.s2_final) {
            return Err(PipelineError::Config(format!(
                "stage targets must increase: {} < {} < {} violated",
                t.s1_mid, t.s1_full, t.s2_final
            )));
        }
        let l = self.model.trained_len;
        if t.s1_mid <= l {
            return Err(PipelineError::Config(format!(
                "first search target {} must exceed trained length {l}",
                t.s1_mid
            )));
        }
        for &r in &t.recovery {
            if r < l || r > 2 * l {
                return Err(PipelineError::Config(format!(
                    "recovery length {r} outside [trained length {l}, 2x trained length {}]",
                    2 * l
                )));
            }
        }
        if self.finetune_steps1 == 0 || self.finetune_steps2 == 0 {
            return Err(PipelineError::Config(
                "progressive fine-tune stages need steps >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable fingerprint of everything that determines artifacts, with the
    /// run directory path itself excluded so runs can relocate.
    fn fingerprint(&self) -> String {
        let mut clone = self.clone();
        clone.run_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&clone).expect("config serializes").as_bytes())
    }

    /// Search configuration for one stage target under this preset.
    pub fn search_config_public(&self, target_len: usize, stage: &str) -> SearchConfig {
        let ratio = target_len as f64 / self.model.trained_len as f64;
        let seed = derive_seed(self.seed, stage);
        let extreme = target_len > self.targets.s1_full;
        match (self.preset, extreme) {
            (PresetKind::Desk, false) => SearchConfig::desk(ratio, seed),
            (PresetKind::Desk, true) => SearchConfig::desk_large_target(ratio, seed),
            (PresetKind::Paper, false) => SearchConfig::paper(ratio, seed),
            (PresetKind::Paper, true) => SearchConfig::large_target(ratio, seed),
        }
    }

    /// Fitness sample count: 5 documents for primary targets, 3 beyond
    /// the fine-tuned window.
    pub fn fitness_docs_public(&self, target_len: usize) -> usize {
        if target_len > self.targets.s1_full {
            self.fitness_docs_extreme
        } else {
            self.fitness_docs_primary
        }
    }
}

/// Stable per-stage seed derivation from the master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------------------
// Manifest and stage machinery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArtifactRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageRecord {
    inputs_hash: String,
    artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    stages: BTreeMap<String, StageRecord>,
}

/// Exclusive-writer guard on a run directory; the lock file is removed when
/// the guard drops.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked {
                    path: run_dir.display().to_string(),
                    lock: path.display().to_string(),
                })
            }
            Err(source) => Err(PipelineError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

struct RunContext {
    run_dir: PathBuf,
    manifest: Manifest,
    /// Human-readable trace of which stages ran vs. were skipped.
    pub events: Vec<String>,
}

impl RunContext {
    fn open(run_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let manifest_path = run_dir.join("MANIFEST.json");
        let manifest = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            serde_json::from_str(&text).map_err(|source| PipelineError::Json {
                path: manifest_path.display().to_string(),
                source,
            })?
        } else {
            Manifest {
                version: 1,
                ..Default::default()
            }
        };
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            manifest,
            events: Vec::new(),
        })
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        let path = self.run_dir.join("MANIFEST.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    fn artifacts_intact(&self, record: &StageRecord) -> bool {
        record.artifacts.iter().all(|a| {
            let p = self.run_dir.join(&a.path);
            p.exists() && sha256_file(&p).map(|h| h == a.sha256).unwrap_or(false)
        })
    }

    /// Run `f` unless the stage already completed with the same inputs and
    /// its artifacts are intact on disk. Returns whether the stage ran.
    fn stage(
        &mut self,
        name: &str,
        inputs_hash: &str,
        artifact_rel_paths: &[String],
        f: impl FnOnce(&Path) -> Result<(), PipelineError>,
    ) -> Result<bool, PipelineError> {
        if let Some(record) = self.manifest.stages.get(name) {
            if record.inputs_hash == inputs_hash && self.artifacts_intact(record) {
                self.events.push(format!("stage {name}: skipped (complete)"));
                return Ok(false);
            }
        }
        f(&self.run_dir)?;
        let mut artifacts = Vec::new();
        for rel in artifact_rel_paths {
            let p = self.run_dir.join(rel);
            if !p.exists() {
                return Err(PipelineError::MissingArtifact {
                    path: p.display().to_string(),
                    hint: format!("stage {name} did not produce it"),
                });
            }
            artifacts.push(ArtifactRecord {
                path: rel.clone(),
                sha256: sha256_file(&p)?,
            });
        }
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                inputs_hash: inputs_hash.to_string(),
                artifacts,
            },
        );
        self.save_manifest()?;
        self.events.push(format!("stage {name}: ran"));
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// Progressive run
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PipelineArtifacts {
    pub run_dir: PathBuf,
    pub base_ckpt_path: PathBuf,
    pub ft_ckpt_path: PathBuf,
    pub bundle: FactorBundle,
    pub ppl_report: PplReport,
    pub base_ppl_report: PplReport,
    pub passkey_report: PasskeyReport,
    pub events: Vec<String>,
}

fn save_factor_artifacts(
    run_dir: &Path,
    stem: &str,
    rotary: &RotaryConfig,
    outcome: &SearchOutcome,
    sc: &SearchConfig,
    target_len: usize,
) -> Result<(), PipelineError> {
    FactorFile::from_parts(rotary, &outcome.best.genome)
        .save(&run_dir.join(format!("{stem}.factors.json")))?;
    let logs_dir = run_dir.join("search_logs");
    std::fs::create_dir_all(&logs_dir).map_err(io_err(&logs_dir))?;
    let csv_path = logs_dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, history_csv(&outcome.history)).map_err(io_err(&csv_path))?;
    let sidecar = SearchSidecar::from_outcome(outcome, sc, target_len);
    let sidecar_path = logs_dir.join(format!("{stem}.sidecar.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&sidecar_path, text + "\n").map_err(io_err(&sidecar_path))?;

    // Elitism makes this structurally true; verify on every run anyway.
    let min_seed = outcome
        .seed_fitness
        .iter()
        .map(|(_, f)| *f)
        .fold(f64::INFINITY, f64::min);
    let best = outcome.best.fitness().expect("evaluated best");
    if best > min_seed {
        return Err(PipelineError::Config(format!(
            "search {stem} returned {best} worse than best seed {min_seed}"
        )));
    }
    Ok(())
}

fn load_factors(path: &Path) -> Result<RescaleFactors, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            hint: "expected factors from an earlier stage".into(),
        });
    }
    let (_, rf) = FactorFile::load(path)?.into_parts()?;
    Ok(rf)
}

fn run_search_stage(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    ckpt: &ModelCheckpoint,
    target_len: usize,
    stage: &str,
    seeds: &[(crate::search::Provenance, RescaleFactors)],
) -> Result<SearchOutcome, PipelineError> {
    let sc = cfg.search_config_public(target_len, stage);
    let docs = corpus.sample_eval_docs(
        Split::Val,
        cfg.fitness_docs_public(target_len),
        target_len,
        derive_seed(cfg.seed, &format!("docs:{stage}")),
    )?;
    let oracle = PerplexityOracle::new(
        ckpt,
        docs.iter().map(|d| d.to_vec()).collect(),
        target_len,
    )
    .map_err(|e| PipelineError::Config(e.to_string()))?;
    let outcome = run_search_with_seeds(&oracle, &cfg.model.rotary, &sc, seeds)?;
    Ok(outcome)
}

/// Execute (or resume) the full progressive pipeline in the configured run
/// directory. Completed stages are detected via the manifest's input and
/// artifact hashes and skipped.
pub fn run_progressive(
    cfg: &PipelineConfig,
    corpus: &Corpus,
) -> Result<PipelineArtifacts, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.run_dir).map_err(io_err(&cfg.run_dir))?;
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    let mut ctx = RunContext::open(&cfg.run_dir)?;
    let fp = cfg.fingerprint();
    let rotary = cfg.model.rotary;

    // Stage: base checkpoint (train it, or adopt an existing file).
    let base_path = cfg.run_dir.join("base.ckpt");
    let base_recorded = ctx.manifest.stages.contains_key("base");
    if base_path.exists() && !base_recorded {
        let hash = sha256_file(&base_path)?;
        ctx.manifest.stages.insert(
            "base".into(),
            StageRecord {
                inputs_hash: format!("external:{hash}"),
                artifacts: vec![ArtifactRecord {
                    path: "base.ckpt".into(),
                    sha256: hash,
                }],
            },
        );
        ctx.save_manifest()?;
        ctx.events.push("stage base: adopted existing checkpoint".into());
    } else {
        let base_inputs = format!("{fp}:base");
        if !base_path.exists() && !base_recorded && !cfg.train_base_if_missing {
            return Err(PipelineError::MissingArtifact {
                path: base_path.display().to_string(),
                hint: "no base checkpoint and base training is disabled".into(),
            });
        }
        let model = cfg.model.clone();
        let tc = cfg.base_train.clone();
        ctx.stage(
            "base",
            &base_inputs,
            &["base.ckpt".into(), "reports/train_base.csv".into()],
            |dir| {
                let init = crate::tinyformer::init_model(&model, tc.seed)?;
                let out = train(&init, corpus, &tc, None)?;
                checkpoint::save(&out.checkpoint, &dir.join("base.ckpt"))?;
                let reports = dir.join("reports");
                std::fs::create_dir_all(&reports).map_err(io_err(&reports))?;
                std::fs::write(reports.join("train_base.csv"), train_log_csv(&out.log))
                    .map_err(io_err(&reports))?;
                Ok(())
            },
        )?;
    }
    let base_ckpt = checkpoint::load(&base_path)?;
    if base_ckpt.config != cfg.model {
        return Err(PipelineError::Config(
            "existing base checkpoint's model config disagrees with the pipeline config".into(),
        ));
    }
    let base_hash = sha256_file(&base_path)?;

    // Stage: first-stage searches on the base model.
    for (stage, target) in [
        ("stage1_mid", cfg.targets.s1_mid),
        ("stage1_full", cfg.targets.s1_full),
    ] {
        let inputs = format!("{fp}:{stage}:{base_hash}");
        let artifacts = vec![
            format!("{stage}.factors.json"),
            format!("search_logs/{stage}.csv"),
            format!("search_logs/{stage}.sidecar.json"),
        ];
        ctx.stage(stage, &inputs, &artifacts, |dir| {
            let seeds = baseline_seeds(&rotary, target)?;
            let outcome = run_search_stage(cfg, corpus, &base_ckpt, target, stage, &seeds)?;
            let sc = cfg.search_config_public(target, stage);
            save_factor_artifacts(dir, stage, &rotary, &outcome, &sc, target)
        })?;
    }

    // Stage: progressive fine-tune under the two searched factor sets.
    let mid_factors_path = cfg.run_dir.join("stage1_mid.factors.json");
    let full_factors_path = cfg.run_dir.join("stage1_full.factors.json");
    let ft_path = cfg.run_dir.join("ft.ckpt");
    {
        let inputs = format!(
            "{fp}:finetune:{base_hash}:{}:{}",
            sha256_file(&mid_factors_path)?,
            sha256_file(&full_factors_path)?
        );
        ctx.stage(
            "finetune",
            &inputs,
            &["ft.ckpt".into(), "reports/train_ft.csv".into()],
            |dir| {
                let rf_mid = load_factors(&mid_factors_path)?;
                let rf_full = load_factors(&full_factors_path)?;
                let out = finetune_progressive(
                    &base_ckpt,
                    &rf_mid,
                    cfg.finetune_steps1,
                    &rf_full,
                    cfg.finetune_steps2,
                    corpus,
                    &cfg.finetune,
                )?;
                checkpoint::save(&out.checkpoint, &dir.join("ft.ckpt"))?;
                std::fs::write(dir.join("reports/train_ft.csv"), train_log_csv(&out.log))
                    .map_err(io_err(dir))?;
                Ok(())
            },
        )?;
    }
    let ft_ckpt = checkpoint::load(&ft_path)?;
    let ft_hash = sha256_file(&ft_path)?;

    // Stage: secondary search on the fine-tuned model, seeds composed with
    // the factors it was tuned under.
    {
        let inputs = format!("{fp}:stage2:{ft_hash}");
        let artifacts = vec![
            "stage2.factors.json".to_string(),
            "search_logs/stage2.csv".to_string(),
            "search_logs/stage2.sidecar.json".to_string(),
        ];
        ctx.stage("stage2", &inputs, &artifacts, |dir| {
            let prior = ft_ckpt.rescale_used.clone().ok_or_else(|| {
                PipelineError::Config("fine-tuned checkpoint lost its rescale factors".into())
            })?;
            let seeds = composed_baseline_seeds(&rotary, &prior, cfg.targets.s2_final)?;
            let outcome =
                run_search_stage(cfg, corpus, &ft_ckpt, cfg.targets.s2_final, "stage2", &seeds)?;
            let sc = cfg.search_config_public(cfg.targets.s2_final, "stage2");
            save_factor_artifacts(dir, "stage2", &rotary, &outcome, &sc, cfg.targets.s2_final)
        })?;
    }

    // Stage: recovery searches at short lengths with reduced factor bounds.
    for &len in &cfg.targets.recovery {
        let stage = format!("recovery_{len}");
        let inputs = format!("{fp}:{stage}:{ft_hash}");
        let artifacts = vec![
            format!("{stage}.factors.json"),
            format!("search_logs/{stage}.csv"),
            format!("search_logs/{stage}.sidecar.json"),
        ];
        ctx.stage(&stage, &inputs, &artifacts, |dir| {
            let seeds = baseline_seeds(&rotary, len)?;
            let outcome = run_search_stage(cfg, corpus, &ft_ckpt, len, &stage, &seeds)?;
            let sc = cfg.search_config_public(len, &stage);
            save_factor_artifacts(dir, &stage, &rotary, &outcome, &sc, len)
        })?;
    }

    // Stage: assemble the bundle. The full-target entry is the second-stage
    // winner verbatim.
    let bundle_path = cfg.run_dir.join("bundle.json");
    {
        let mut upstream_hashes = vec![sha256_file(&cfg.run_dir.join("stage2.factors.json"))?];
        for &len in &cfg.targets.recovery {
            upstream_hashes.push(sha256_file(
                &cfg.run_dir.join(format!("recovery_{len}.factors.json")),
            )?);
        }
        let inputs = format!("{fp}:bundle:{}", upstream_hashes.join(":"));
        ctx.stage("bundle", &inputs, &["bundle.json".into()], |dir| {
            let stage2 = load_factors(&dir.join("stage2.factors.json"))?;
            let mut lens = cfg.targets.recovery.clone();
            lens.sort_unstable();
            let mut entries = Vec::new();
            for len in lens {
                entries.push(BundleEntry {
                    max_len: len,
                    factors: load_factors(&dir.join(format!("recovery_{len}.factors.json")))?,
                });
            }
            entries.push(BundleEntry {
                max_len: cfg.targets.s2_final,
                factors: stage2.clone(),
            });
            let bundle = FactorBundle::new(entries, stage2)?;
            bundle.save(&dir.join("bundle.json"), &rotary)
        })?;
    }
    let (bundle, _) = FactorBundle::load(&bundle_path)?;

    // Stage: evaluation reports. The fine-tuned model is swept under the
    // bundle; the base model is swept under identity factors (pure
    // extrapolation) for the blow-up comparison; passkey runs on the bundle.
    {
        let bundle_hash = sha256_file(&bundle_path)?;
        let inputs = format!("{fp}:reports:{ft_hash}:{bundle_hash}");
        let artifacts = vec![
            "reports/ppl_sweep.csv".to_string(),
            "reports/ppl_base.csv".to_string(),
            "reports/passkey.csv".to_string(),
            "reports/summary.txt".to_string(),
        ];
        ctx.stage("reports", &inputs, &artifacts, |dir| {
            let reports = dir.join("reports");
            std::fs::create_dir_all(&reports).map_err(io_err(&reports))?;
            let sweep = ppl_sweep(
                &ft_ckpt,
                corpus,
                &cfg.eval_lengths,
                &bundle,
                Split::Test,
                cfg.eval_docs,
                cfg.stride,
                derive_seed(cfg.seed, "eval:sweep"),
            )?;
            std::fs::write(reports.join("ppl_sweep.csv"), sweep.to_csv())
                .map_err(io_err(&reports))?;

            let max_len = *cfg.eval_lengths.iter().max().expect("non-empty lengths");
            let identity = RescaleFactors::identity(&rotary, max_len);
            let base_bundle = FactorBundle::single(identity);
            let base_sweep = ppl_sweep(
                &base_ckpt,
                corpus,
                &cfg.eval_lengths,
                &base_bundle,
                Split::Test,
                cfg.eval_docs,
                cfg.stride,
                derive_seed(cfg.seed, "eval:sweep"),
            )?;
            std::fs::write(reports.join("ppl_base.csv"), base_sweep.to_csv())
                .map_err(io_err(&reports))?;

            let generator = CheckpointGenerator {
                ckpt: &ft_ckpt,
                bundle: &bundle,
            };
            let passkey = passkey_eval(
                &generator,
                &cfg.passkey_lengths,
                cfg.passkey_iterations,
                derive_seed(cfg.seed, "eval:passkey"),
            )?;
            std::fs::write(reports.join("passkey.csv"), passkey.to_csv())
                .map_err(io_err(&reports))?;

            let mut summary = String::new();
            summary.push_str("fine-tuned model, bundle factors:\n");
            summary.push_str(&sweep.to_table());
            summary.push_str("\nbase model, identity factors (direct extrapolation):\n");
            summary.push_str(&base_sweep.to_table());
            summary.push_str("\npasskey retrieval (fine-tuned model, bundle factors):\n");
            summary.push_str(&passkey.to_table());
            std::fs::write(reports.join("summary.txt"), summary).map_err(io_err(&reports))?;
            Ok(())
        })?;
    }

    let ppl_report = PplReport::from_csv(
        &std::fs::read_to_string(cfg.run_dir.join("reports/ppl_sweep.csv"))
            .map_err(io_err(&cfg.run_dir))?,
    )
    .map_err(PipelineError::Config)?;
    let base_ppl_report = PplReport::from_csv(
        &std::fs::read_to_string(cfg.run_dir.join("reports/ppl_base.csv"))
            .map_err(io_err(&cfg.run_dir))?,
    )
    .map_err(PipelineError::Config)?;
    let passkey_report = PasskeyReport::from_csv(
        &std::fs::read_to_string(cfg.run_dir.join("reports/passkey.csv"))
            .map_err(io_err(&cfg.run_dir))?,
    )
    .map_err(PipelineError::Config)?;

    Ok(PipelineArtifacts {
        run_dir: cfg.run_dir.clone(),
        base_ckpt_path: base_path,
        ft_ckpt_path: ft_path,
        bundle,
        ppl_report,
        base_ppl_report,
        passkey_report,
        events: ctx.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic;
    use crate::rope::pi_factors;

    fn rotary() -> RotaryConfig {
        RotaryConfig::with_default_base(8, 128).unwrap()
    }

    fn bundle_3() -> FactorBundle {
        let r = rotary();
        FactorBundle::new(
            vec![
                BundleEntry {
                    max_len: 128,
                    factors: RescaleFactors::identity(&r, 128),
                },
                BundleEntry {
                    max_len: 256,
                    factors: pi_factors(&r, 2.0).unwrap(),
                },
                BundleEntry {
                    max_len: 16384,
                    factors: pi_factors(&r, 128.0).unwrap(),
                },
            ],
            pi_factors(&r, 128.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn select_factors_exhaustive_mapping() {
        let b = bundle_3();
        for len in 1..=128usize {
            assert_eq!(b.select(len).target_len(), 128, "len {len}");
        }
        for len in 129..=256usize {
            assert_eq!(b.select(len).target_len(), 256, "len {len}");
        }
        assert_eq!(b.select(257).target_len(), 16384);
        assert_eq!(b.select(16384).target_len(), 16384);
        // Beyond every entry: the default.
        assert_eq!(b.select(99999).target_len(), 16384);
        assert_eq!(select_factors(&b, 200).target_len(), 256);
    }

    #[test]
    fn bundle_rejects_disorder() {
        let r = rotary();
        let err = FactorBundle::new(
            vec![
                BundleEntry {
                    max_len: 256,
                    factors: pi_factors(&r, 2.0).unwrap(),
                },
                BundleEntry {
                    max_len: 128,
                    factors: RescaleFactors::identity(&r, 128),
                },
            ],
            pi_factors(&r, 2.0).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::Bundle(_)));
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.json");
        let b = bundle_3();
        b.save(&path, &rotary()).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (loaded, r) = FactorBundle::load(&path).unwrap();
        assert_eq!(r, rotary());
        let path2 = dir.path().join("bundle2.json");
        loaded.save(&path2, &r).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
        assert_eq!(loaded.entries().len(), 3);
    }

    #[test]
    fn derive_seed_is_stable_and_distinct() {
        assert_eq!(derive_seed(5, "a"), derive_seed(5, "a"));
        assert_ne!(derive_seed(5, "a"), derive_seed(5, "b"));
        assert_ne!(derive_seed(5, "a"), derive_seed(6, "a"));
    }

    fn micro_config(run_dir: PathBuf, seed: u64) -> PipelineConfig {
        let model = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 258,
            trained_len: 32,
            tied_embeddings: true,
            rotary: RotaryConfig::with_default_base(8, 32).unwrap(),
        };
        let mut cfg = PipelineConfig::desk(run_dir, seed);
        cfg.model = model;
        cfg.base_train.steps = 4;
        cfg.base_train.batch_size = 2;
        cfg.base_train.seq_len = 32;
        cfg.finetune.batch_size = 2;
        cfg.finetune_steps1 = 2;
        cfg.finetune_steps2 = 2;
        cfg.targets = StageTargets {
            s1_mid: 48,
            s1_full: 64,
            s2_final: 128,
            recovery: vec![32, 48],
        };
        cfg.eval_lengths = vec![32, 64, 128];
        cfg.eval_docs = 2;
        cfg.passkey_lengths = vec![256];
        cfg.passkey_iterations = 2;
        cfg.fitness_docs_primary = 2;
        cfg.fitness_docs_extreme = 2;
        cfg
    }

    fn micro_corpus(seed: u64) -> Corpus {
        let docs = synthetic::sample_documents(24, 600, seed);
        Corpus::from_documents(
            docs.iter().map(|d| crate::corpus::tokenize(d)).collect(),
            (0.6, 0.2, 0.2),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn micro_pipeline_runs_resumes_and_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let mut cfg = micro_config(run_dir.clone(), 11);
        // The minimal passkey template needs ~270 tokens; the micro bundle
        // tops out at 128, so trials fail (and are recorded) without
        // aborting the report stage.
        cfg.passkey_lengths = vec![320];
        let corpus = micro_corpus(3);

        let first = run_progressive(&cfg, &corpus).unwrap();
        assert!(first.bundle.entries().len() >= 3);
        assert!(first.events.iter().all(|e| !e.contains("skipped")));
        let bundle_bytes = std::fs::read(run_dir.join("bundle.json")).unwrap();
        let sweep_bytes = std::fs::read(run_dir.join("reports/ppl_sweep.csv")).unwrap();

        // Rerun: every stage is a no-op.
        let second = run_progressive(&cfg, &corpus).unwrap();
        assert!(
            second.events.iter().all(|e| e.contains("skipped") || e.contains("adopted")),
            "events: {:?}",
            second.events
        );
        assert_eq!(std::fs::read(run_dir.join("bundle.json")).unwrap(), bundle_bytes);

        // Delete downstream artifacts and resume: identical bytes come back.
        std::fs::remove_file(run_dir.join("bundle.json")).unwrap();
        std::fs::remove_file(run_dir.join("reports/ppl_sweep.csv")).unwrap();
        let third = run_progressive(&cfg, &corpus).unwrap();
        assert_eq!(std::fs::read(run_dir.join("bundle.json")).unwrap(), bundle_bytes);
        assert_eq!(
            std::fs::read(run_dir.join("reports/ppl_sweep.csv")).unwrap(),
            sweep_bytes
        );
        assert!(third
            .events
            .iter()
            .any(|e| e.starts_with("stage bundle: ran")));

        // The final bundle's default factors equal the stage2 winner.
        let stage2 = load_factors(&run_dir.join("stage2.factors.json")).unwrap();
        assert_eq!(third.bundle.default_factors().factors(), stage2.factors());
        assert_eq!(
            third.bundle.default_factors().start_token(),
            stage2.start_token()
        );
    }

    #[test]
    fn lock_prevents_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        std::fs::create_dir_all(&run_dir).unwrap();
        let _lock = RunLock::acquire(&run_dir).unwrap();
        assert!(matches!(
            RunLock::acquire(&run_dir),
            Err(PipelineError::Locked { .. })
        ));
    }

    #[test]
    fn missing_base_without_training_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path().join("run"), 1);
        cfg.train_base_if_missing = false;
        let corpus = micro_corpus(1);
        let err = run_progressive(&cfg, &corpus).unwrap_err();
        match err {
            PipelineError::MissingArtifact { path, .. } => {
                assert!(path.contains("base.ckpt"), "path {path}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
