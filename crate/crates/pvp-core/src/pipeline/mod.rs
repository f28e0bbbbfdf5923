//! Pipeline orchestration: one config, staged artifacts, digest-checked
//! idempotence, and provenance records.
//!
//! Stage layout under the output root:
//!
//! ```text
//! dataset/  model/  eval/  trace/  steer/  attn/  pca/  report/
//! ```
//!
//! Every stage directory carries a `run.json` with the tool version, the
//! full config echo, the seeds, and digests of the stage's inputs and
//! outputs. A stage whose recorded inputs and outputs still match on disk
//! is reported up to date and skipped.

pub mod criteria;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, DatasetBundle, DatasetConfig, Sample, Split};
use crate::digest::{derive_seed, digest_bytes, digest_file};
use crate::error::{PvpError, Result};
use crate::model::{
    checkpoint_load, checkpoint_save, train, EpochLog, EvalProbe, ModelConfig, OwnedTrainItem,
    Params, TrainSchedule,
};
use crate::persist::{atomic_write, dataset_digest, read_dataset, write_dataset};
use crate::report::{
    accuracy_matrix, attention_delta_report, emit_report, pca_report, AccuracyMatrix,
    AttentionDeltaReport, PcaRow, PredRecord, ReportBundle, SteeringRow, TraceRecord,
};
use crate::steering::{
    compute_pvp, eval_flip_rate, load_vectors, save_vectors, search_window, Direction, FlipRecord,
    InterventionSpec, SteerPair, SteeringVectors, WindowBounds,
};
use crate::trace::{aggregate_flip_stats, answer_trace, count_flips, FlipStats, FlipSummary};
use crate::vocab::{PromptKind, Task, Variant};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub dataset: u64,
    pub init: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            dataset: 11,
            init: 21,
            train: 31,
        }
    }
}

/// Model shape settings; vocabulary size and image-token count are derived
/// from the dataset config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub patch_px: usize,
    pub max_seq: usize,
    pub tie_unembedding: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            mlp_hidden: 256,
            patch_px: 8,
            max_seq: 32,
            tie_unembedding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub alpha: f64,
    pub start_min: usize,
    pub start_max: usize,
    pub window_max: usize,
    /// Eval CF pairs used for attention and PCA probes, per task.
    pub probe_pairs: usize,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            start_min: 0,
            start_max: 7,
            window_max: 7,
            probe_pairs: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelSettings,
    pub train: TrainSchedule,
    pub steering: SteeringConfig,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            model: ModelSettings::default(),
            train: TrainSchedule::default(),
            steering: SteeringConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    /// Longest prompt (size task) plus the answer cue is 11 tokens.
    const MAX_PROMPT_TOKENS: usize = 11;

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(PvpError::Config(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        if self.dataset.canvas_px % self.model.patch_px != 0 {
            return Err(PvpError::Config(format!(
                "dataset.canvas_px: {} is not divisible by model.patch_px {}",
                self.dataset.canvas_px, self.model.patch_px
            )));
        }
        let model_cfg = self.model_config(1);
        model_cfg.validate()?;
        if model_cfg.n_image_tokens + Self::MAX_PROMPT_TOKENS > self.model.max_seq {
            return Err(PvpError::Config(format!(
                "model.max_seq: {} cannot hold {} image tokens plus prompts",
                self.model.max_seq, model_cfg.n_image_tokens
            )));
        }
        if self.steering.start_min > self.steering.start_max
            || self.steering.start_max >= self.model.n_layers
        {
            return Err(PvpError::Config(format!(
                "steering.start_min/start_max: [{}, {}] invalid for {} layers",
                self.steering.start_min, self.steering.start_max, self.model.n_layers
            )));
        }
        if !self.steering.alpha.is_finite() {
            return Err(PvpError::Config("steering.alpha: must be finite".into()));
        }
        if self.steering.probe_pairs == 0 {
            return Err(PvpError::Config("steering.probe_pairs: must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let patches_per_side = self.dataset.canvas_px / self.model.patch_px;
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            mlp_hidden: self.model.mlp_hidden,
            vocab_size,
            patch_px: self.model.patch_px,
            n_image_tokens: patches_per_side * patches_per_side,
            max_seq: self.model.max_seq,
            tie_unembedding: self.model.tie_unembedding,
        }
    }

    pub fn digest_of<T: Serialize>(part: &T) -> String {
        digest_bytes(
            serde_json::to_string(part)
                .expect("config parts serialize")
                .as_bytes(),
        )
    }
}

/// Parse and validate a config file. Unknown keys are rejected.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PvpError::io(path, e))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| PvpError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Seed override from a `stage=value` CLI flag.
pub fn apply_seed_override(config: &mut RunConfig, spec: &str) -> Result<()> {
    let (stage, value) = spec.split_once('=').ok_or_else(|| {
        PvpError::Config(format!("seed override `{spec}` is not of the form stage=n"))
    })?;
    let value: u64 = value
        .parse()
        .map_err(|_| PvpError::Config(format!("seed override value `{value}` is not an integer")))?;
    match stage {
        "dataset" => config.seeds.dataset = value,
        "init" => config.seeds.init = value,
        "train" => config.seeds.train = value,
        other => {
            return Err(PvpError::Config(format!(
                "unknown seed stage `{other}` (expected dataset, init or train)"
            )))
        }
    }
    Ok(())
}

/// Exclusive lock on an output root, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out_root: &Path) -> Result<OutputLock> {
        fs::create_dir_all(out_root).map_err(|e| PvpError::io(out_root, e))?;
        let path = out_root.join(".pvp-lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PvpError::Locked(
                format!(
                    "{} exists; another run may be active (remove the file if it is stale)",
                    path.display()
                ),
            )),
            Err(e) => Err(PvpError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Updated,
    UpToDate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunRecord {
    tool_version: String,
    schema_version: u32,
    stage: String,
    config: RunConfig,
    seeds: Seeds,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out_root: PathBuf,
    pub quiet: bool,
}

impl Pipeline {
    pub fn new(config: RunConfig, out_root: impl Into<PathBuf>, quiet: bool) -> Result<Pipeline> {
        config.validate()?;
        Ok(Pipeline {
            config,
            out_root: out_root.into(),
            quiet,
        })
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_root.join("dataset")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.out_root.join("model")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out_root.join("eval")
    }
    pub fn trace_dir(&self) -> PathBuf {
        self.out_root.join("trace")
    }
    pub fn steer_dir(&self) -> PathBuf {
        self.out_root.join("steer")
    }
    pub fn attn_dir(&self) -> PathBuf {
        self.out_root.join("attn")
    }
    pub fn pca_dir(&self) -> PathBuf {
        self.out_root.join("pca")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out_root.join("report")
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.model_dir().join("checkpoint.bin")
    }

    fn stage_up_to_date(&self, dir: &Path, stage: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Ok(text) = fs::read_to_string(dir.join("run.json")) else {
            return false;
        };
        let Ok(record) = serde_json::from_str::<RunRecord>(&text) else {
            return false;
        };
        if record.stage != stage || &record.inputs != inputs {
            return false;
        }
        record.outputs.iter().all(|(rel, digest)| {
            digest_file(dir.join(rel)).map(|d| &d == digest).unwrap_or(false)
        })
    }

    fn write_run_record(
        &self,
        dir: &Path,
        stage: &str,
        inputs: BTreeMap<String, String>,
        output_files: &[&str],
    ) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for rel in output_files {
            outputs.insert(rel.to_string(), digest_file(dir.join(rel))?);
        }
        let record = RunRecord {
            tool_version: TOOL_VERSION.to_string(),
            schema_version: CONFIG_SCHEMA_VERSION,
            stage: stage.to_string(),
            config: self.config.clone(),
            seeds: self.config.seeds,
            inputs,
            outputs,
        };
        let json = serde_json::to_vec_pretty(&record)
            .map_err(|e| PvpError::Generation(format!("run record encode: {e}")))?;
        atomic_write(dir.join("run.json"), &json)
    }

    fn require(&self, path: &Path, hint: &str) -> Result<()> {
        if !path.exists() {
            return Err(PvpError::MissingArtifact(format!(
                "{} not found; {hint}",
                path.display()
            )));
        }
        Ok(())
    }

    fn load_dataset(&self) -> Result<DatasetBundle> {
        self.require(&self.dataset_dir().join("manifest.json"), "run `gen` first")?;
        read_dataset(self.dataset_dir())
    }

    fn load_checkpoint(&self, dataset_digest_now: &str) -> Result<Params> {
        self.require(&self.checkpoint_path(), "run `train` first")?;
        let (params, trained_on) = checkpoint_load(self.checkpoint_path())?;
        if let Some(trained_on) = trained_on {
            if trained_on != dataset_digest_now {
                return Err(PvpError::StaleArtifact(format!(
                    "checkpoint was trained on dataset {trained_on}, current dataset is \
                     {dataset_digest_now}; re-run `train`"
                )));
            }
        }
        Ok(params)
    }

    // ---- gen ----

    pub fn gen(&self) -> Result<StageOutcome> {
        let dir = self.dataset_dir();
        let mut inputs = BTreeMap::new();
        inputs.insert(
            "dataset_config".into(),
            RunConfig::digest_of(&(&self.config.dataset, self.config.seeds.dataset)),
        );
        if self.stage_up_to_date(&dir, "gen", &inputs) {
            self.say("gen: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = generate_dataset(&self.config.dataset, self.config.seeds.dataset)?;
        fs::create_dir_all(&dir).map_err(|e| PvpError::io(&dir, e))?;
        write_dataset(&bundle, &dir)?;
        self.write_run_record(&dir, "gen", inputs, &["manifest.json"])?;
        self.say(&format!(
            "gen: wrote {} train / {} steer-fit / {} eval samples",
            bundle.train.len(),
            bundle.steerfit.len(),
            bundle.eval.len()
        ));
        Ok(StageOutcome::Updated)
    }

    // ---- train ----

    fn train_items(bundle: &DatasetBundle) -> Vec<OwnedTrainItem> {
        bundle
            .train
            .iter()
            .map(|s| OwnedTrainItem {
                image: s.image.clone(),
                tokens: s.tokens.clone(),
                target: match s.prompt_kind {
                    PromptKind::This => s.rendered_answer(),
                    PromptKind::Most => s.wk_answer,
                },
            })
            .collect()
    }

    fn eval_probes(bundle: &DatasetBundle) -> Vec<EvalProbe> {
        bundle
            .eval
            .iter()
            .filter(|s| s.variant.is_some())
            .map(|s| EvalProbe {
                image: s.image.clone(),
                tokens: s.tokens.clone(),
                target: s.scoring_target(),
                quadrant: s.quadrant(),
            })
            .collect()
    }

    pub fn train(&self) -> Result<StageOutcome> {
        let dir = self.model_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert(
            "train_config".into(),
            RunConfig::digest_of(&(
                &self.config.model,
                &self.config.train,
                self.config.seeds.init,
                self.config.seeds.train,
            )),
        );
        if self.stage_up_to_date(&dir, "train", &inputs) {
            self.say("train: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = self.load_dataset()?;
        let model_cfg = self.config.model_config(bundle.vocab.len());
        let mut params = Params::init(&model_cfg, self.config.seeds.init)?;
        let mut log_lines: Vec<String> = Vec::new();
        let quiet = self.quiet;
        run_curriculum(
            &mut params,
            &bundle,
            &self.config.train,
            self.config.seeds.train,
            |phase, log| {
                let mut value = serde_json::to_value(log).expect("epoch log serializes");
                value["phase"] = serde_json::Value::String(phase.to_string());
                log_lines.push(value.to_string());
                if !quiet {
                    let acc: Vec<String> = log
                        .accuracy
                        .iter()
                        .map(|(q, a)| format!("{q}={a:.1}"))
                        .collect();
                    println!(
                        "train: {phase} epoch {} loss {:.4} | {}",
                        log.epoch,
                        log.mean_loss,
                        acc.join(" ")
                    );
                }
            },
        )?;
        fs::create_dir_all(&dir).map_err(|e| PvpError::io(&dir, e))?;
        checkpoint_save(&params, Some(&ds_digest), self.checkpoint_path())?;
        atomic_write(dir.join("train_log.jsonl"), (log_lines.join("\n") + "\n").as_bytes())?;
        self.write_run_record(&dir, "train", inputs, &["checkpoint.bin", "train_log.jsonl"])?;
        self.say(&format!("train: checkpoint {}", params.digest()));
        Ok(StageOutcome::Updated)
    }

    // ---- eval ----

    pub fn eval(&self) -> Result<StageOutcome> {
        let dir = self.eval_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        self.require(&self.checkpoint_path(), "run `train` first")?;
        let ckpt_digest = digest_file(self.checkpoint_path())?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert("checkpoint".into(), ckpt_digest);
        if self.stage_up_to_date(&dir, "eval", &inputs) {
            self.say("eval: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;
        let (matrix, ledger) = accuracy_matrix(&params, &bundle.eval)?;
        fs::create_dir_all(&dir).map_err(|e| PvpError::io(&dir, e))?;
        atomic_write(
            dir.join("accuracy.json"),
            &serde_json::to_vec_pretty(&matrix)
                .map_err(|e| PvpError::Generation(format!("accuracy encode: {e}")))?,
        )?;
        let lines: Vec<String> = ledger
            .iter()
            .map(|r| serde_json::to_string(r).expect("ledger record serializes"))
            .collect();
        atomic_write(dir.join("ledger.jsonl"), (lines.join("\n") + "\n").as_bytes())?;
        self.write_run_record(&dir, "eval", inputs, &["accuracy.json", "ledger.jsonl"])?;
        for (cell, acc) in &matrix.cells {
            self.say(&format!(
                "eval: {cell} = {:.2}% ({}/{})",
                acc.accuracy_pct, acc.n_correct, acc.n
            ));
        }
        Ok(StageOutcome::Updated)
    }

    // ---- trace ----

    pub fn trace(&self) -> Result<StageOutcome> {
        let dir = self.trace_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        self.require(&self.checkpoint_path(), "run `train` first")?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert("checkpoint".into(), digest_file(self.checkpoint_path())?);
        if self.stage_up_to_date(&dir, "trace", &inputs) {
            self.say("trace: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;

        let mut records: Vec<TraceRecord> = Vec::new();
        let mut flip_summaries: BTreeMap<String, FlipSummary> = BTreeMap::new();
        for task in [Task::Color, Task::Size] {
            for kind in [PromptKind::This, PromptKind::Most] {
                let cell = bundle.eval_cell(task, kind, Variant::Cf);
                if cell.is_empty() {
                    continue;
                }
                let traced: Vec<Result<(String, crate::trace::DecodeTrace, FlipStats)>> = cell
                    .par_iter()
                    .map(|s| {
                        let t = answer_trace(&params, s)?;
                        let f = count_flips(&t)?;
                        Ok((s.id.clone(), t, f))
                    })
                    .collect();
                let mut layer_sum_wk = vec![0.0f64; params.config.n_layers];
                let mut layer_sum_cf = vec![0.0f64; params.config.n_layers];
                let mut stats = Vec::new();
                let n = cell.len();
                for item in traced {
                    let (id, t, f) = item?;
                    for (l, layer) in t.layers.iter().enumerate() {
                        layer_sum_wk[l] += layer.p_wk / n as f64;
                        layer_sum_cf[l] += layer.p_cf / n as f64;
                    }
                    records.push(TraceRecord::Sample {
                        sample_id: id,
                        task,
                        prompt_kind: kind,
                        p_wk: t.layers.iter().map(|l| l.p_wk).collect(),
                        p_cf: t.layers.iter().map(|l| l.p_cf).collect(),
                        flips: f,
                    });
                    stats.push(f);
                }
                records.push(TraceRecord::GroupAverage {
                    task,
                    prompt_kind: kind,
                    p_wk: layer_sum_wk,
                    p_cf: layer_sum_cf,
                    n,
                });
                if kind == PromptKind::Most {
                    let summary = aggregate_flip_stats(&stats)?;
                    records.push(TraceRecord::FirstFlipHistogram {
                        task,
                        counts: summary.first_flip_layers.iter().map(|(&l, &c)| (l, c)).collect(),
                    });
                    flip_summaries.insert(task.label().to_string(), summary);
                }
            }
        }
        fs::create_dir_all(&dir).map_err(|e| PvpError::io(&dir, e))?;
        let lines: Vec<String> = records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serializes"))
            .collect();
        atomic_write(dir.join("fig3_traces.jsonl"), (lines.join("\n") + "\n").as_bytes())?;
        atomic_write(
            dir.join("flips.json"),
            &serde_json::to_vec_pretty(&flip_summaries)
                .map_err(|e| PvpError::Generation(format!("flips encode: {e}")))?,
        )?;
        self.write_run_record(&dir, "trace", inputs, &["fig3_traces.jsonl", "flips.json"])?;
        for (task, s) in &flip_summaries {
            self.say(&format!(
                "trace: {task} most+cf flips: {:.1}% of {} samples flip",
                s.pct_with_flip, s.n_samples
            ));
        }
        Ok(StageOutcome::Updated)
    }

    // ---- steering ----

    fn vectors_path(&self, task: Task) -> PathBuf {
        self.steer_dir().join(format!("vectors_{}.bin", task.label()))
    }

    pub fn best_specs_path(&self) -> PathBuf {
        self.steer_dir().join("best_specs.json")
    }

    /// Steer-fit pairs are split by position parity: even pairs fit the
    /// vectors, odd pairs validate the window search.
    fn fit_validation_pairs<'a>(
        bundle: &'a DatasetBundle,
        task: Task,
    ) -> (Vec<(&'a Sample, &'a Sample)>, Vec<(&'a Sample, &'a Sample)>) {
        let pairs = bundle.paired(Split::SteerFit, task, Variant::Cf);
        let mut fit = Vec::new();
        let mut val = Vec::new();
        for (i, p) in pairs.into_iter().enumerate() {
            if i % 2 == 0 {
                fit.push(p);
            } else {
                val.push(p);
            }
        }
        (fit, val)
    }

    pub fn steer_fit(&self) -> Result<StageOutcome> {
        let dir = self.steer_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        self.require(&self.checkpoint_path(), "run `train` first")?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert("checkpoint".into(), digest_file(self.checkpoint_path())?);
        inputs.insert("stage".into(), "fit".into());
        let marker = dir.join("fit-run.json");
        if marker.exists() && self.stage_fit_up_to_date(&inputs) {
            self.say("steer fit: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;
        fs::create_dir_all(&dir).map_err(|e| PvpError::io(&dir, e))?;
        for task in [Task::Color, Task::Size] {
            let (fit, _) = Self::fit_validation_pairs(&bundle, task);
            if fit.is_empty() {
                return Err(PvpError::Argument(format!(
                    "no steer-fit pairs for task {}",
                    task.label()
                )));
            }
            let pairs: Vec<SteerPair<'_>> = fit
                .iter()
                .map(|(t, m)| SteerPair { this: t, most: m })
                .collect();
            let mut vectors = compute_pvp(&params, &pairs, task)?;
            // Snap to the f32 grid so the file round trip is exact.
            for layer in vectors.per_layer.iter_mut() {
                for x in layer.iter_mut() {
                    *x = *x as f32 as f64;
                }
            }
            save_vectors(&vectors, self.vectors_path(task))?;
            self.say(&format!(
                "steer fit: {} vectors over {} pairs",
                task.label(),
                vectors.n_pairs
            ));
        }
        let record = serde_json::to_vec_pretty(&inputs)
            .map_err(|e| PvpError::Generation(format!("fit record encode: {e}")))?;
        atomic_write(marker, &record)?;
        Ok(StageOutcome::Updated)
    }

    fn stage_fit_up_to_date(&self, inputs: &BTreeMap<String, String>) -> bool {
        let marker = self.steer_dir().join("fit-run.json");
        let Ok(text) = fs::read_to_string(marker) else {
            return false;
        };
        let Ok(recorded) = serde_json::from_str::<BTreeMap<String, String>>(&text) else {
            return false;
        };
        &recorded == inputs
            && self.vectors_path(Task::Color).exists()
            && self.vectors_path(Task::Size).exists()
    }

    fn load_task_vectors(&self, params: &Params, task: Task) -> Result<SteeringVectors> {
        let path = self.vectors_path(task);
        self.require(&path, "run `steer fit` first")?;
        let vectors = load_vectors(&path)?;
        if vectors.checkpoint_digest != params.digest() {
            return Err(PvpError::StaleArtifact(format!(
                "steering vectors for {} were fitted on checkpoint {}, current is {}; \
                 re-run `steer fit`",
                task.label(),
                vectors.checkpoint_digest,
                params.digest()
            )));
        }
        Ok(vectors)
    }

    pub fn steer_search(&self) -> Result<StageOutcome> {
        let dir = self.steer_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        self.require(&self.checkpoint_path(), "run `train` first")?;
        self.require(&self.vectors_path(Task::Color), "run `steer fit` first")?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert("checkpoint".into(), digest_file(self.checkpoint_path())?);
        inputs.insert("vectors_color".into(), digest_file(self.vectors_path(Task::Color))?);
        inputs.insert("vectors_size".into(), digest_file(self.vectors_path(Task::Size))?);
        inputs.insert("steering".into(), RunConfig::digest_of(&self.config.steering));
        if self.stage_up_to_date(&dir, "steer-search", &inputs) {
            self.say("steer search: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;
        let bounds = WindowBounds {
            start_min: self.config.steering.start_min,
            start_max: self.config.steering.start_max,
            window_max: self.config.steering.window_max,
        };
        let mut best: BTreeMap<String, InterventionSpec> = BTreeMap::new();
        let mut outputs: Vec<String> = Vec::new();
        for task in [Task::Color, Task::Size] {
            let vectors = self.load_task_vectors(&params, task)?;
            let (_, val) = Self::fit_validation_pairs(&bundle, task);
            for direction in [Direction::ToCf, Direction::ToWk] {
                let validation: Vec<&Sample> = val
                    .iter()
                    .map(|(t, m)| match direction {
                        Direction::ToCf => *m,
                        Direction::ToWk => *t,
                    })
                    .collect();
                let (spec, table) = search_window(
                    &params,
                    &vectors,
                    direction,
                    &validation,
                    &bounds,
                    self.config.steering.alpha,
                )?;
                let mut csv = String::from("start_layer,w,alpha,flip_rate,n\n");
                for cell in &table {
                    csv.push_str(&format!(
                        "{},{},{},{:.6},{}\n",
                        cell.start_layer, cell.window, cell.alpha, cell.flip_rate_pct, cell.n_target
                    ));
                }
                let name = format!("search_{}_{}.csv", task.label(), direction.label());
                atomic_write(dir.join(&name), csv.as_bytes())?;
                outputs.push(name);
                self.say(&format!(
                    "steer search: {} {} -> layers [{}, {}]",
                    task.label(),
                    direction.label(),
                    spec.start_layer,
                    spec.start_layer + spec.window
                ));
                best.insert(format!("{}/{}", task.label(), direction.label()), spec);
            }
        }
        atomic_write(
            self.best_specs_path(),
            &serde_json::to_vec_pretty(&best)
                .map_err(|e| PvpError::Generation(format!("best specs encode: {e}")))?,
        )?;
        outputs.push("best_specs.json".into());
        let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.write_run_record(&dir, "steer-search", inputs, &refs)?;
        Ok(StageOutcome::Updated)
    }

    pub fn load_best_specs(&self) -> Result<BTreeMap<String, InterventionSpec>> {
        let path = self.best_specs_path();
        self.require(&path, "run `steer search` first")?;
        let text = fs::read_to_string(&path).map_err(|e| PvpError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PvpError::Load {
            index: 0,
            message: format!("best_specs.json: {e}"),
        })
    }

    fn best_spec(
        specs: &BTreeMap<String, InterventionSpec>,
        task: Task,
        direction: Direction,
    ) -> Result<InterventionSpec> {
        specs
            .get(&format!("{}/{}", task.label(), direction.label()))
            .copied()
            .ok_or_else(|| {
                PvpError::MissingArtifact(format!(
                    "no searched window for {}/{}; run `steer search` first",
                    task.label(),
                    direction.label()
                ))
            })
    }

    pub fn steer_eval(&self) -> Result<StageOutcome> {
        let dir = self.steer_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        self.require(&self.checkpoint_path(), "run `train` first")?;
        self.require(&self.best_specs_path(), "run `steer search` first")?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert("checkpoint".into(), digest_file(self.checkpoint_path())?);
        inputs.insert("best_specs".into(), digest_file(self.best_specs_path())?);
        let marker = dir.join("eval-run.json");
        if marker.exists() {
            if let Ok(text) = fs::read_to_string(&marker) {
                if let Ok(recorded) = serde_json::from_str::<BTreeMap<String, String>>(&text) {
                    if recorded == inputs
                        && dir.join("steer_eval.json").exists()
                        && dir.join("steer_ledger.jsonl").exists()
                    {
                        self.say("steer eval: up to date");
                        return Ok(StageOutcome::UpToDate);
                    }
                }
            }
        }
        let bundle = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;
        let specs = self.load_best_specs()?;
        let mut rows: Vec<SteeringRow> = Vec::new();
        let mut ledger_lines: Vec<String> = Vec::new();
        for task in [Task::Color, Task::Size] {
            let vectors = self.load_task_vectors(&params, task)?;
            for direction in [Direction::ToCf, Direction::ToWk] {
                let spec = Self::best_spec(&specs, task, direction)?;
                let cell = match direction {
                    Direction::ToCf => bundle.eval_cell(task, PromptKind::Most, Variant::Cf),
                    Direction::ToWk => bundle.eval_cell(task, PromptKind::This, Variant::Cf),
                };
                let eval = eval_flip_rate(&params, &vectors, &spec, &cell)?;
                self.say(&format!(
                    "steer eval: {} {} flips {:.1}% of {} originally-incorrect samples",
                    task.label(),
                    direction.label(),
                    eval.flip_rate_pct,
                    eval.n_target
                ));
                for record in &eval.ledger {
                    #[derive(Serialize)]
                    struct LedgerLine<'a> {
                        task: &'a str,
                        direction: &'a str,
                        #[serde(flatten)]
                        record: &'a FlipRecord,
                    }
                    ledger_lines.push(
                        serde_json::to_string(&LedgerLine {
                            task: task.label(),
                            direction: direction.label(),
                            record,
                        })
                        .expect("ledger line serializes"),
                    );
                }
                rows.push(SteeringRow {
                    task,
                    direction,
                    spec,
                    flip_rate_pct: eval.flip_rate_pct,
                    n_target: eval.n_target,
                    n_flipped: eval.n_flipped,
                });
            }
        }
        atomic_write(
            dir.join("steer_eval.json"),
            &serde_json::to_vec_pretty(&rows)
                .map_err(|e| PvpError::Generation(format!("steer eval encode: {e}")))?,
        )?;
        atomic_write(
            dir.join("steer_ledger.jsonl"),
            (ledger_lines.join("\n") + "\n").as_bytes(),
        )?;
        let record = serde_json::to_vec_pretty(&inputs)
            .map_err(|e| PvpError::Generation(format!("eval record encode: {e}")))?;
        atomic_write(marker, &record)?;
        Ok(StageOutcome::Updated)
    }

    // ---- attention & pca ----

    fn probe_pairs<'a>(&self, bundle: &'a DatasetBundle, task: Task) -> Vec<(&'a Sample, &'a Sample)> {
        let mut pairs = bundle.paired(Split::Eval, task, Variant::Cf);
        pairs.truncate(self.config.steering.probe_pairs);
        pairs
    }

    pub fn attn(&self) -> Result<StageOutcome> {
        let dir = self.attn_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        self.require(&self.checkpoint_path(), "run `train` first")?;
        self.require(&self.best_specs_path(), "run `steer search` first")?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert("checkpoint".into(), digest_file(self.checkpoint_path())?);
        inputs.insert("best_specs".into(), digest_file(self.best_specs_path())?);
        inputs.insert("probe_pairs".into(), self.config.steering.probe_pairs.to_string());
        if self.stage_up_to_date(&dir, "attn", &inputs) {
            self.say("attn: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;
        let specs = self.load_best_specs()?;
        let mut reports: Vec<AttentionDeltaReport> = Vec::new();
        for task in [Task::Color, Task::Size] {
            let vectors = self.load_task_vectors(&params, task)?;
            let pairs = self.probe_pairs(&bundle, task);
            let report = attention_delta_report(
                &params,
                &vectors,
                &Self::best_spec(&specs, task, Direction::ToCf)?,
                &Self::best_spec(&specs, task, Direction::ToWk)?,
                &pairs,
            )?;
            for row in &report.rows {
                self.say(&format!(
                    "attn: {} {} intervention extreme {:.4} vs prompt {:.4}",
                    task.label(),
                    row.direction.label(),
                    row.intervention_extreme_all,
                    row.prompt_extreme_all
                ));
            }
            reports.push(report);
        }
        fs::create_dir_all(&dir).map_err(|e| PvpError::io(&dir, e))?;
        atomic_write(
            dir.join("attention.json"),
            &serde_json::to_vec_pretty(&reports)
                .map_err(|e| PvpError::Generation(format!("attention encode: {e}")))?,
        )?;
        self.write_run_record(&dir, "attn", inputs, &["attention.json"])?;
        Ok(StageOutcome::Updated)
    }

    pub fn pca(&self) -> Result<StageOutcome> {
        let dir = self.pca_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        self.require(&self.checkpoint_path(), "run `train` first")?;
        self.require(&self.best_specs_path(), "run `steer search` first")?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        inputs.insert("checkpoint".into(), digest_file(self.checkpoint_path())?);
        inputs.insert("best_specs".into(), digest_file(self.best_specs_path())?);
        inputs.insert("probe_pairs".into(), self.config.steering.probe_pairs.to_string());
        if self.stage_up_to_date(&dir, "pca", &inputs) {
            self.say("pca: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let bundle = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;
        let specs = self.load_best_specs()?;
        let mut all_rows: Vec<PcaRow> = Vec::new();
        for task in [Task::Color, Task::Size] {
            let vectors = self.load_task_vectors(&params, task)?;
            let pairs = self.probe_pairs(&bundle, task);
            let rows = pca_report(
                &params,
                &vectors,
                &Self::best_spec(&specs, task, Direction::ToCf)?,
                &Self::best_spec(&specs, task, Direction::ToWk)?,
                &pairs,
            )?;
            all_rows.extend(rows.into_iter().map(|mut r| {
                r.group = format!("{}/{}", task.label(), r.group);
                r
            }));
        }
        fs::create_dir_all(&dir).map_err(|e| PvpError::io(&dir, e))?;
        atomic_write(
            dir.join("rows.json"),
            &serde_json::to_vec_pretty(&all_rows)
                .map_err(|e| PvpError::Generation(format!("pca encode: {e}")))?,
        )?;
        self.write_run_record(&dir, "pca", inputs, &["rows.json"])?;
        self.say(&format!("pca: {} projected states", all_rows.len()));
        Ok(StageOutcome::Updated)
    }

    // ---- report ----

    fn read_json<T: serde::de::DeserializeOwned>(&self, path: &Path, hint: &str) -> Result<T> {
        self.require(path, hint)?;
        let text = fs::read_to_string(path).map_err(|e| PvpError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PvpError::Load {
            index: 0,
            message: format!("{}: {e}", path.display()),
        })
    }

    fn read_jsonl<T: serde::de::DeserializeOwned>(&self, path: &Path, hint: &str) -> Result<Vec<T>> {
        self.require(path, hint)?;
        let text = fs::read_to_string(path).map_err(|e| PvpError::io(path, e))?;
        let mut out = Vec::new();
        for (index, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line).map_err(|e| PvpError::Load {
                index,
                message: format!("{}: {e}", path.display()),
            })?);
        }
        Ok(out)
    }

    /// Gather all upstream stage outputs into a report bundle (without the
    /// criteria summary).
    pub fn collect_results(&self) -> Result<(ReportBundle, Vec<PredRecord>)> {
        let accuracy: AccuracyMatrix = self.read_json(
            &self.eval_dir().join("accuracy.json"),
            "run `eval` first",
        )?;
        let ledger: Vec<PredRecord> =
            self.read_jsonl(&self.eval_dir().join("ledger.jsonl"), "run `eval` first")?;
        let flips: BTreeMap<String, FlipSummary> =
            self.read_json(&self.trace_dir().join("flips.json"), "run `trace` first")?;
        let fig3: Vec<TraceRecord> = self.read_jsonl(
            &self.trace_dir().join("fig3_traces.jsonl"),
            "run `trace` first",
        )?;
        let steering: Vec<SteeringRow> = self.read_json(
            &self.steer_dir().join("steer_eval.json"),
            "run `steer eval` first",
        )?;
        let attention: Vec<AttentionDeltaReport> =
            self.read_json(&self.attn_dir().join("attention.json"), "run `attn` first")?;
        let pca: Vec<PcaRow> =
            self.read_json(&self.pca_dir().join("rows.json"), "run `pca` first")?;
        Ok((
            ReportBundle {
                accuracy,
                flips,
                fig3,
                steering,
                attention,
                pca,
                summary: BTreeMap::new(),
            },
            ledger,
        ))
    }

    pub fn report(&self) -> Result<StageOutcome> {
        let dir = self.report_dir();
        let ds_digest = dataset_digest(self.dataset_dir()).map_err(|_| {
            PvpError::MissingArtifact("dataset manifest not found; run `gen` first".into())
        })?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), ds_digest.clone());
        for (name, path) in [
            ("checkpoint", self.checkpoint_path()),
            ("accuracy", self.eval_dir().join("accuracy.json")),
            ("flips", self.trace_dir().join("flips.json")),
            ("steer_eval", self.steer_dir().join("steer_eval.json")),
            ("attention", self.attn_dir().join("attention.json")),
            ("pca", self.pca_dir().join("rows.json")),
        ] {
            self.require(&path, "run the upstream stages first")?;
            inputs.insert(name.into(), digest_file(&path)?);
        }
        if self.stage_up_to_date(&dir, "report", &inputs) {
            self.say("report: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let (mut bundle, ledger) = self.collect_results()?;
        let dataset = self.load_dataset()?;
        let params = self.load_checkpoint(&ds_digest)?;
        bundle.summary = criteria::evaluate(self, &params, &dataset, &bundle, &ledger)?;
        emit_report(&bundle, &dir)?;
        let artifacts: Vec<&str> = crate::report::REPORT_ARTIFACTS.to_vec();
        self.write_run_record(&dir, "report", inputs, &artifacts)?;
        for (id, c) in &bundle.summary {
            self.say(&format!(
                "report: {id}: {} (value {:.4}, threshold {:.4})",
                if c.pass { "PASS" } else { "FAIL" },
                c.value,
                c.threshold
            ));
        }
        Ok(StageOutcome::Updated)
    }

    /// Run every stage in order.
    pub fn run_all(&self) -> Result<()> {
        self.gen()?;
        self.train()?;
        self.eval()?;
        self.trace()?;
        self.steer_fit()?;
        self.steer_search()?;
        self.steer_eval()?;
        self.attn()?;
        self.pca()?;
        self.report()?;
        Ok(())
    }

    /// Re-evaluate every acceptance property from the persisted artifacts.
    /// Prints one line per criterion; returns true when all pass.
    pub fn verify(&self) -> Result<bool> {
        criteria::verify(self)
    }
}

/// Build owned train items and probes for external callers (tests).
pub fn training_inputs(bundle: &DatasetBundle) -> (Vec<OwnedTrainItem>, Vec<EvalProbe>) {
    (Pipeline::train_items(bundle), Pipeline::eval_probes(bundle))
}

/// Two-phase training: an image-free prior-installation phase over the
/// text-only records, then grounded training over the full split. Both
/// phases are seeded deterministically from the train seed.
pub fn run_curriculum(
    params: &mut Params,
    bundle: &DatasetBundle,
    schedule: &TrainSchedule,
    train_seed: u64,
    mut on_epoch: impl FnMut(&str, &EpochLog),
) -> Result<()> {
    let items = Pipeline::train_items(bundle);
    let probes = Pipeline::eval_probes(bundle);
    let text_items: Vec<OwnedTrainItem> = bundle
        .train
        .iter()
        .zip(&items)
        .filter(|(s, _)| s.image.is_none())
        .map(|(_, i)| i.clone())
        .collect();
    if schedule.prior_epochs > 0 && !text_items.is_empty() {
        let phase = TrainSchedule {
            epochs: schedule.prior_epochs,
            prior_epochs: 0,
            ..schedule.clone()
        };
        train(
            params,
            &text_items,
            &[],
            &phase,
            derive_seed(train_seed, "prior-phase"),
            |log| on_epoch("prior", log),
        )?;
    }
    let phase = TrainSchedule {
        prior_epochs: 0,
        ..schedule.clone()
    };
    train(
        params,
        &items,
        &probes,
        &phase,
        derive_seed(train_seed, "grounded-phase"),
        |log| on_epoch("grounded", log),
    )
}

/// An in-memory convenience used by tests: generate, train and return the
/// bundle and params without touching disk.
pub fn train_in_memory(config: &RunConfig) -> Result<(DatasetBundle, Params)> {
    config.validate()?;
    let bundle = generate_dataset(&config.dataset, config.seeds.dataset)?;
    let model_cfg = config.model_config(bundle.vocab.len());
    let mut params = Params::init(&model_cfg, config.seeds.init)?;
    run_curriculum(&mut params, &bundle, &config.train, config.seeds.train, |_, _| {})?;
    Ok((bundle, params))
}
