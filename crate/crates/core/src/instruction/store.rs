//! One JSON file per trajectory under `candidates/` and `curations/`, and
//! the transport-independent logic behind the curation API.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{keyframe_indices, CandidateSet, CuratedSet, InstructionError};
use crate::dataset::{frame_image_path, is_safe_id, read_manifest};

pub const CANDIDATES_DIR: &str = "candidates";
pub const CURATIONS_DIR: &str = "curations";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> InstructionError + '_ {
    move |source| InstructionError::Io { path: path.to_path_buf(), source }
}

/// Write via a sibling temp file and rename, so readers never see a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), InstructionError> {
    let dir = path.parent().expect("store paths have a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).and_then(|_| tmp.as_file().sync_all()).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| InstructionError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, InstructionError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|source| InstructionError::Json { path: path.to_path_buf(), source }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn checked_id(id: &str) -> Result<&str, InstructionError> {
    if is_safe_id(id) {
        Ok(id)
    } else {
        Err(InstructionError::NotFound(format!("trajectory {id:?}")))
    }
}

#[derive(Debug)]
pub struct CurationStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl CurationStore {
    /// Open (creating if needed) the store rooted at `root`.
    pub fn open(root: &Path) -> Result<Self, InstructionError> {
        for sub in [CANDIDATES_DIR, CURATIONS_DIR] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self { root: root.to_path_buf(), write_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, sub: &str, id: &str) -> Result<PathBuf, InstructionError> {
        Ok(self.root.join(sub).join(format!("{}.json", checked_id(id)?)))
    }

    fn write<T: Serialize>(&self, sub: &str, id: &str, value: &T) -> Result<(), InstructionError> {
        let path = self.path(sub, id)?;
        let text = serde_json::to_string_pretty(value).expect("store records serialize") + "\n";
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        write_atomic(&path, text.as_bytes())
    }

    pub fn save_candidates(&self, set: &CandidateSet) -> Result<(), InstructionError> {
        self.write(CANDIDATES_DIR, &set.trajectory_id, set)
    }

    pub fn load_candidates(&self, id: &str) -> Result<Option<CandidateSet>, InstructionError> {
        read_json(&self.path(CANDIDATES_DIR, id)?)
    }

    /// Ids with a persisted candidate set, sorted.
    pub fn candidate_ids(&self) -> Result<Vec<String>, InstructionError> {
        let dir = self.root.join(CANDIDATES_DIR);
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let name = entry.map_err(io_err(&dir))?.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name.strip_suffix(".json").filter(|id| is_safe_id(id)) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Persist a curation after checking it against the stored candidates.
    /// Re-submitting replaces the previous curation.
    pub fn save_curation(&self, curation: &CuratedSet) -> Result<(), InstructionError> {
        let candidates = self
            .load_candidates(&curation.trajectory_id)?
            .ok_or_else(|| InstructionError::NotFound(format!("candidates for {}", curation.trajectory_id)))?;
        curation.validate_against(&candidates)?;
        self.write(CURATIONS_DIR, &curation.trajectory_id, curation)
    }

    pub fn load_curation(&self, id: &str) -> Result<Option<CuratedSet>, InstructionError> {
        read_json(&self.path(CURATIONS_DIR, id)?)
    }

    pub fn load_curations(&self) -> Result<BTreeMap<String, CuratedSet>, InstructionError> {
        let mut out = BTreeMap::new();
        for id in self.candidate_ids()? {
            if let Some(c) = self.load_curation(&id)? {
                out.insert(id, c);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub id: String,
    pub steps: usize,
    pub candidates: usize,
    pub curated: bool,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRef {
    pub frame_index: usize,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDetail {
    pub id: String,
    pub keyframes: Vec<KeyframeRef>,
    pub candidates: CandidateSet,
    pub curation: Option<CuratedSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRequest {
    pub selected: Vec<String>,
    #[serde(default = "default_curator")]
    pub curator: String,
}

fn default_curator() -> String {
    "anonymous".to_string()
}

/// Everything the curation HTTP endpoints do, minus HTTP.
#[derive(Debug)]
pub struct CurationService {
    store: CurationStore,
    dataset_root: PathBuf,
    steps: BTreeMap<String, usize>,
}

impl CurationService {
    pub fn new(store: CurationStore, dataset_root: &Path) -> Result<Self, InstructionError> {
        let manifest = read_manifest(dataset_root).map_err(|e| InstructionError::NotFound(e.to_string()))?;
        let steps = manifest.trajectories.iter().map(|t| (t.id.clone(), t.steps)).collect();
        Ok(Self { store, dataset_root: dataset_root.to_path_buf(), steps })
    }

    pub fn store(&self) -> &CurationStore {
        &self.store
    }

    fn steps_of(&self, id: &str) -> Result<usize, InstructionError> {
        self.steps.get(id).copied().ok_or_else(|| InstructionError::NotFound(format!("trajectory {id}")))
    }

    /// Every trajectory with a candidate set.
    pub fn list(&self) -> Result<Vec<TrajectorySummary>, InstructionError> {
        let mut out = Vec::new();
        for id in self.store.candidate_ids()? {
            let Some(steps) = self.steps.get(&id).copied() else {
                continue;
            };
            let candidates = self.store.load_candidates(&id)?.map_or(0, |c| c.candidates.len());
            let curation = self.store.load_curation(&id)?;
            out.push(TrajectorySummary {
                steps,
                candidates,
                curated: curation.is_some(),
                selected: curation.map_or(0, |c| c.selected.len()),
                id,
            });
        }
        Ok(out)
    }

    pub fn detail(&self, id: &str) -> Result<TrajectoryDetail, InstructionError> {
        let steps = self.steps_of(checked_id(id)?)?;
        let candidates = self
            .store
            .load_candidates(id)?
            .ok_or_else(|| InstructionError::NotFound(format!("candidates for {id}")))?;
        let keyframes = keyframe_indices(steps)?
            .iter()
            .map(|&i| KeyframeRef { frame_index: i, url: format!("/api/trajectories/{id}/frames/{i}") })
            .collect();
        Ok(TrajectoryDetail { id: id.to_string(), keyframes, candidates, curation: self.store.load_curation(id)? })
    }

    /// PNG bytes of frame `step`.
    pub fn frame_png(&self, id: &str, step: usize) -> Result<Vec<u8>, InstructionError> {
        if step >= self.steps_of(checked_id(id)?)? {
            return Err(InstructionError::NotFound(format!("frame {step} of {id}")));
        }
        let path = frame_image_path(&self.dataset_root, id, step)
            .ok_or_else(|| InstructionError::NotFound(format!("trajectory {id:?}")))?;
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn submit(&self, id: &str, req: CurationRequest) -> Result<CuratedSet, InstructionError> {
        self.steps_of(checked_id(id)?)?;
        let curation = CuratedSet {
            trajectory_id: id.to_string(),
            selected: req.selected,
            curator: req.curator,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        self.store.save_curation(&curation)?;
        Ok(curation)
    }

    /// Accept every candidate of each uncurated trajectory; returns how many
    /// curations were written.
    pub fn accept_all(&self, curator: &str) -> Result<usize, InstructionError> {
        let mut written = 0;
        for summary in self.list()? {
            if summary.curated {
                continue;
            }
            let Some(set) = self.store.load_candidates(&summary.id)? else {
                continue;
            };
            let req = CurationRequest { selected: set.texts().map(String::from).collect(), curator: curator.into() };
            self.submit(&summary.id, req)?;
            written += 1;
        }
        Ok(written)
    }
}
