//! End-to-end commands over one output directory:
//!
//! ```text
//! <out>/dataset/                      synthesized trajectories
//! <out>/candidates/<id>.json          LLM candidates
//! <out>/curations/<id>.json           curated selections
//! <out>/runs/<name>/base/             pretrained base checkpoint
//! <out>/runs/<name>/model/            final checkpoint (base + adapters)
//! <out>/runs/<name>/{stats,split,config}.json, loss.csv, pretrain_loss.csv
//! <out>/reports/                      evaluation reports and comparisons
//! <out>/.pipeline.lock                held while a command runs
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::action::{fit_stats, CodecError, NormalizationStats};
use crate::dataset::{self, actions_of, DatasetError, DatasetSplit, LoadedDataset, Trajectory};
use crate::eval::{self, Comparison, EvalError, EvalReport};
use crate::instruction::{
    build_prompt, generate_all, parse_candidates, CuratedPairing, CurationService, CurationStore, InstructionError,
    LlmClient, RetryPolicy,
};
use crate::policy::{
    self, load_checkpoint, save_checkpoint, FixedInstruction, PolicyConfig, PolicyError, PolicyModel, PretrainConfig,
    TrainConfig, TrainItem,
};

pub const LOCK_FILE: &str = ".pipeline.lock";
const GENERATOR: &str = concat!("paravla ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0} is locked by another command; remove {1} if no command is running")]
    Locked(PathBuf, PathBuf),
    #[error("not found: {0}")]
    Missing(PathBuf),
    #[error("uncurated trajectories: {}", .0.join(", "))]
    Uncurated(Vec<String>),
    #[error("candidate generation failed for {} trajectories: {}", .0.len(), .0.iter().map(|(id, e)| format!("{id} ({e})")).collect::<Vec<_>>().join("; "))]
    Generation(Vec<(String, String)>),
    #[error("dataset has load failures: {}", .0.join("; "))]
    LoadFailures(Vec<String>),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad json in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::Missing(path.to_path_buf()),
        _ => io_err(path)(e),
    })?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct PipelineLock {
    path: PathBuf,
}

impl PipelineLock {
    pub fn acquire(out: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let path = out.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(out.to_path_buf(), path))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for PipelineLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Paths inside one output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    out: PathBuf,
}

impl Workspace {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.out.join("runs").join(name)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn store(&self) -> Result<CurationStore, PipelineError> {
        Ok(CurationStore::open(&self.out)?)
    }

    pub fn lock(&self) -> Result<PipelineLock, PipelineError> {
        PipelineLock::acquire(&self.out)
    }
}

fn require_dir(path: &Path) -> Result<(), PipelineError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(PipelineError::Missing(path.to_path_buf()))
    }
}

fn load_clean(root: &Path) -> Result<LoadedDataset, PipelineError> {
    let loaded = dataset::load(root)?;
    if !loaded.failures.is_empty() {
        return Err(PipelineError::LoadFailures(
            loaded.failures.iter().map(|f| format!("{}: {}", f.id, f.reason)).collect(),
        ));
    }
    Ok(loaded)
}

fn valid_name(name: &str) -> Result<(), PipelineError> {
    if dataset::is_safe_id(name) {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!("name {name:?} may only use letters, digits, '_' and '-'")))
    }
}

/// Write a synthetic dataset to `<out>/dataset`; returns its checksum.
pub fn cmd_synth(ws: &Workspace, n: usize, steps: usize, seed: u64) -> Result<String, PipelineError> {
    let _lock = ws.lock()?;
    let trajs = dataset::synthesize(n, steps, seed)?;
    let root = ws.dataset_dir();
    if root.exists() {
        fs::remove_dir_all(&root).map_err(io_err(&root))?;
    }
    let provenance = json!({ "command": "synth", "n": n, "steps": steps, "seed": seed, "generator": GENERATOR });
    let manifest = dataset::export(&root, &trajs, Some(provenance))?;
    log::info!("wrote {n} trajectories to {}", root.display());
    Ok(manifest.checksum.unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub written: usize,
}

/// Prompt the LLM for every trajectory and persist the parsed candidate
/// sets. A trajectory whose request or parse fails gets no file; the
/// command then fails listing them.
pub fn cmd_gen(
    ws: &Workspace,
    dataset_root: &Path,
    client: &dyn LlmClient,
    client_tag: &str,
    retry: &RetryPolicy,
    max_parallel: usize,
) -> Result<GenSummary, PipelineError> {
    require_dir(dataset_root)?;
    let _lock = ws.lock()?;
    let loaded = load_clean(dataset_root)?;
    let store = ws.store()?;
    let prompts = loaded.trajectories.iter().map(build_prompt).collect::<Result<Vec<_>, _>>()?;
    let responses = generate_all(client, &prompts, retry, max_parallel);
    let mut written = 0;
    let mut failed = Vec::new();
    for (prompt, response) in prompts.iter().zip(responses) {
        let id = &prompt.trajectory_id;
        let parsed = response.and_then(|raw| parse_candidates(&raw, id));
        match parsed {
            Ok(mut set) => {
                let digest = Sha256::digest(format!("{}\n{}", prompt.system_message, prompt.user_message));
                set.provenance = Some(json!({
                    "command": "gen",
                    "client": client_tag,
                    "prompt_sha256": hex::encode(digest),
                    "keyframes": prompt.keyframes.iter().map(|k| k.frame_index).collect::<Vec<_>>(),
                    "dataset_checksum": loaded.manifest.checksum,
                }));
                store.save_candidates(&set)?;
                written += 1;
            }
            Err(e) => failed.push((id.clone(), e.to_string())),
        }
    }
    if !failed.is_empty() {
        return Err(PipelineError::Generation(failed));
    }
    log::info!("stored {written} candidate sets");
    Ok(GenSummary { written })
}

/// Curation service over this workspace (the HTTP layer lives in the CLI).
pub fn curation_service(ws: &Workspace, dataset_root: &Path) -> Result<CurationService, PipelineError> {
    require_dir(dataset_root)?;
    Ok(CurationService::new(ws.store()?, dataset_root)?)
}

/// Accept all candidates for every uncurated trajectory.
pub fn cmd_curate_accept_all(ws: &Workspace, dataset_root: &Path, curator: &str) -> Result<usize, PipelineError> {
    let svc = curation_service(ws, dataset_root)?;
    let _lock = ws.lock()?;
    Ok(svc.accept_all(curator)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// `0` trains on every trajectory and leaves nothing to evaluate.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub run: String,
    /// Stop after the base: the fixed-phrasing baseline.
    pub single_instruction: bool,
    /// Reuse the base, stats and split of an earlier run instead of
    /// pretraining.
    pub base_run: Option<String>,
    pub split: SplitConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for TrainRequest {
    fn default() -> Self {
        Self {
            run: "run".into(),
            single_instruction: false,
            base_run: None,
            split: SplitConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub pretrain_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub frozen_digest: String,
}

fn by_id<'a>(loaded: &'a LoadedDataset, ids: &[String]) -> Result<Vec<&'a Trajectory>, PipelineError> {
    ids.iter()
        .map(|id| loaded.get(id).ok_or_else(|| PipelineError::Invalid(format!("split names unknown trajectory {id}"))))
        .collect()
}

/// Fit stats on the train split, obtain a base (pretrain or reuse), then
/// either stop (baseline) or LoRA-tune on curated paraphrases.
pub fn cmd_train(ws: &Workspace, dataset_root: &Path, req: &TrainRequest) -> Result<TrainSummary, PipelineError> {
    require_dir(dataset_root)?;
    valid_name(&req.run)?;
    let base_dir = req.base_run.as_deref().map(|b| valid_name(b).map(|_| ws.run_dir(b))).transpose()?;
    if let Some(b) = &base_dir {
        require_dir(&b.join("base"))?;
    }
    let _lock = ws.lock()?;
    let loaded = load_clean(dataset_root)?;
    let run_dir = ws.run_dir(&req.run);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;

    let (split, stats, mut model, pretrain_loss) = match &base_dir {
        Some(b) => {
            let split: DatasetSplit = read_json(&b.join("split.json"))?;
            let stats: NormalizationStats = read_json(&b.join("stats.json"))?;
            let (model, _) = load_checkpoint(&b.join("base"))?;
            (split, stats, model, None)
        }
        None => {
            let split = if req.split.test_fraction == 0.0 {
                // no held-out set: fit on everything (overfit checks)
                let train = loaded.trajectories.iter().map(|t| t.id.clone()).collect();
                DatasetSplit { train, test: Vec::new(), seed: req.split.seed, test_fraction: 0.0 }
            } else {
                dataset::split(&loaded.trajectories, req.split.test_fraction, req.split.seed)?
            };
            let train_trajs = by_id(&loaded, &split.train)?;
            // statistics come from the training split only
            let stats = fit_stats(&actions_of(train_trajs.iter().copied()))?;
            let mut model = PolicyModel::new(req.policy.clone(), req.pretrain.seed)?;
            let items = TrainItem::from_trajectories(&model, &train_trajs, &stats)?;
            let source = FixedInstruction::canonical(train_trajs.iter().copied())?;
            let outcome = policy::pretrain(&mut model, &items, &source, &req.pretrain)?;
            write_text(&run_dir.join("pretrain_loss.csv"), &outcome.to_csv())?;
            save_checkpoint(&model, &run_dir.join("base"), json!({ "stage": "pretrain", "pretrain": req.pretrain }))?;
            // continue from the stored (f32) weights so every later stage sees the same base
            let (model, _) = load_checkpoint(&run_dir.join("base"))?;
            (split, stats, model, outcome.final_loss())
        }
    };
    write_json(&run_dir.join("split.json"), &split)?;
    write_text(&run_dir.join("stats.json"), &(stats.to_json() + "\n"))?;
    let base_digest = model.frozen_digest();

    let final_loss = if req.single_instruction {
        pretrain_loss
    } else {
        let curated = ws.store()?.load_curations()?;
        let missing: Vec<String> = split.train.iter().filter(|id| !curated.contains_key(*id)).cloned().collect();
        if !missing.is_empty() {
            return Err(PipelineError::Uncurated(missing));
        }
        let train_trajs = by_id(&loaded, &split.train)?;
        let items = TrainItem::from_trajectories(&model, &train_trajs, &stats)?;
        let source = CuratedPairing::new(curated, req.train.seed);
        let outcome = policy::train(&mut model, &items, &source, &req.train)?;
        write_text(&run_dir.join("loss.csv"), &outcome.to_csv())?;
        if model.frozen_digest() != base_digest {
            return Err(PipelineError::Invalid("base weights changed during adapter training".into()));
        }
        outcome.final_loss()
    };

    let provenance = json!({
        "command": "train",
        "request": req,
        "dataset_checksum": loaded.manifest.checksum,
        "frozen_digest": base_digest,
        "generator": GENERATOR,
    });
    save_checkpoint(&model, &run_dir.join("model"), provenance.clone())?;
    write_json(&run_dir.join("config.json"), &provenance)?;
    log::info!("run {} written to {}", req.run, run_dir.display());
    Ok(TrainSummary { run_dir, pretrain_loss, final_loss, frozen_digest: base_digest })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionChoice {
    /// Every curated paraphrase of each trajectory.
    Curated,
    /// The single canonical instruction from metadata.
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub run: String,
    pub part: SplitPart,
    pub instructions: InstructionChoice,
    pub ks: Vec<u32>,
}

impl EvalRequest {
    pub fn new(run: &str) -> Self {
        Self {
            run: run.into(),
            part: SplitPart::Test,
            instructions: InstructionChoice::Curated,
            ks: eval::DEFAULT_KS.to_vec(),
        }
    }

    fn stem(&self) -> String {
        let part = match self.part {
            SplitPart::Train => "train",
            SplitPart::Test => "test",
        };
        let instr = match self.instructions {
            InstructionChoice::Curated => "curated",
            InstructionChoice::Canonical => "canonical",
        };
        format!("{}.{part}.{instr}", self.run)
    }
}

/// Score a trained run; writes `<stem>.json` and `<stem>.txt` under
/// `reports/` and returns the report with its JSON path.
pub fn cmd_eval(
    ws: &Workspace,
    dataset_root: &Path,
    req: &EvalRequest,
) -> Result<(EvalReport, PathBuf), PipelineError> {
    require_dir(dataset_root)?;
    valid_name(&req.run)?;
    let run_dir = ws.run_dir(&req.run);
    require_dir(&run_dir.join("model"))?;
    let _lock = ws.lock()?;
    let loaded = load_clean(dataset_root)?;
    let split: DatasetSplit = read_json(&run_dir.join("split.json"))?;
    let stats: NormalizationStats = read_json(&run_dir.join("stats.json"))?;
    let (model, _) = load_checkpoint(&run_dir.join("model"))?;
    let ids = match req.part {
        SplitPart::Train => &split.train,
        SplitPart::Test => &split.test,
    };
    let trajs = by_id(&loaded, ids)?;
    let instructions: BTreeMap<String, Vec<String>> = match req.instructions {
        InstructionChoice::Canonical => trajs
            .iter()
            .map(|t| {
                let text = t
                    .canonical_instruction()
                    .ok_or_else(|| PipelineError::Invalid(format!("{} has no canonical instruction", t.id)))?;
                Ok((t.id.clone(), vec![text.to_string()]))
            })
            .collect::<Result<_, PipelineError>>()?,
        InstructionChoice::Curated => {
            let curated = ws.store()?.load_curations()?;
            let missing: Vec<String> = ids.iter().filter(|id| !curated.contains_key(*id)).cloned().collect();
            if !missing.is_empty() {
                return Err(PipelineError::Uncurated(missing));
            }
            curated.into_iter().filter(|(id, _)| ids.contains(id)).map(|(id, c)| (id, c.selected)).collect()
        }
    };
    let dataset_tag =
        format!("{}:{}", loaded.manifest.checksum.clone().unwrap_or_default().get(..12).unwrap_or(""), req.stem());
    let (mut report, _) = eval::evaluate(&model, &trajs, &stats, &instructions, &req.ks, (&req.run, &dataset_tag))?;
    report.provenance = json!({
        "command": "eval",
        "request": req,
        "dataset_checksum": loaded.manifest.checksum,
        "split": { "seed": split.seed, "test_fraction": split.test_fraction },
        "frozen_digest": model.frozen_digest(),
        "generator": GENERATOR,
    });
    let json_path = ws.reports_dir().join(format!("{}.json", req.stem()));
    write_text(&json_path, &report.to_json())?;
    write_text(&ws.reports_dir().join(format!("{}.txt", req.stem())), &report.render_table())?;
    Ok((report, json_path))
}

/// Diff two report files; writes the comparison next to the reports.
pub fn cmd_compare(ws: &Workspace, a: &Path, b: &Path) -> Result<Comparison, PipelineError> {
    let ra: EvalReport = read_json(a)?;
    let rb: EvalReport = read_json(b)?;
    let _lock = ws.lock()?;
    let cmp = eval::compare(&ra, &rb)?;
    let stem = format!("compare.{}.{}", ra.model, rb.model);
    write_text(&ws.reports_dir().join(format!("{stem}.json")), &cmp.to_json())?;
    write_text(&ws.reports_dir().join(format!("{stem}.txt")), &cmp.render_table())?;
    Ok(cmp)
}
