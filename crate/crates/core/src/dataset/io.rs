//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<traj_id>/frames.jsonl      one frame per line
//! <root>/<traj_id>/imgs/<step>.png   8-bit grayscale
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetError, Frame, Observation, Trajectory};
use crate::action::{Action, ACTION_DIM};

pub const MANIFEST_FILE: &str = "manifest.json";
const FRAMES_FILE: &str = "frames.jsonl";
const IMAGE_DIR: &str = "imgs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub trajectories: Vec<ManifestEntry>,
    /// When present, only these trajectory ids are loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
    pub failures: Vec<LoadFailure>,
}

impl LoadedDataset {
    pub fn mean_length(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let total: usize = self.trajectories.iter().map(Trajectory::len).sum();
        total as f64 / self.trajectories.len() as f64
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    step: usize,
    action: Vec<serde_json::Value>,
    image: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Identifiers double as directory names, so only `[A-Za-z0-9_-]` is allowed.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Serialize one trajectory's frame table and images in the on-disk form.
fn render_trajectory(traj: &Trajectory) -> (String, Vec<(String, Vec<u8>)>) {
    let mut jsonl = String::new();
    let mut images = Vec::with_capacity(traj.frames.len());
    for (step, frame) in traj.frames.iter().enumerate() {
        let image = format!("{IMAGE_DIR}/{step}.png");
        let line = FrameLine {
            step,
            action: frame.action.as_array().iter().map(|&v| serde_json::Value::from(v)).collect(),
            image: image.clone(),
        };
        jsonl.push_str(&serde_json::to_string(&line).expect("frame serializes"));
        jsonl.push('\n');
        images.push((image, frame.observation.to_png()));
    }
    (jsonl, images)
}

fn trajectory_digest(jsonl: &[u8], images: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    h.update(jsonl);
    for img in images {
        h.update((img.len() as u64).to_le_bytes());
        h.update(img);
    }
    hex::encode(h.finalize())
}

fn dataset_checksum(entries: &[ManifestEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.id.as_bytes());
        h.update([0]);
        h.update(e.sha256.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Write `trajs` under `root` and return the manifest that was written.
pub fn export(
    root: &Path,
    trajs: &[Trajectory],
    provenance: Option<serde_json::Value>,
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut entries = Vec::with_capacity(trajs.len());
    for traj in trajs {
        if !is_safe_id(&traj.id) {
            return Err(DatasetError::InvalidArgument(format!("unsafe trajectory id {:?}", traj.id)));
        }
        let dir = root.join(&traj.id);
        let img_dir = dir.join(IMAGE_DIR);
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        let (jsonl, images) = render_trajectory(traj);
        let frames_path = dir.join(FRAMES_FILE);
        fs::write(&frames_path, jsonl.as_bytes()).map_err(io_err(&frames_path))?;
        for (rel, bytes) in &images {
            let p = dir.join(rel);
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        let bytes: Vec<Vec<u8>> = images.into_iter().map(|(_, b)| b).collect();
        entries.push(ManifestEntry {
            id: traj.id.clone(),
            steps: traj.frames.len(),
            sha256: Some(trajectory_digest(jsonl.as_bytes(), &bytes)),
            metadata: traj.metadata.clone(),
        });
    }
    let manifest = Manifest {
        version: 1,
        checksum: Some(dataset_checksum(&entries)),
        trajectories: entries,
        include: None,
        provenance,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(DatasetError::NoManifest(root.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.version != 1 {
        return Err(DatasetError::Manifest(format!("unsupported version {}", manifest.version)));
    }
    Ok(manifest)
}

fn parse_action(values: &[serde_json::Value], step: usize) -> Result<Action, DatasetError> {
    if values.len() != ACTION_DIM {
        return Err(DatasetError::CorruptFrame(format!(
            "step {step}: expected {ACTION_DIM} action values, got {}",
            values.len()
        )));
    }
    let mut out = [0.0; ACTION_DIM];
    for (d, v) in values.iter().enumerate() {
        out[d] = match v {
            serde_json::Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
            // serde_json writes non-finite floats as null
            serde_json::Value::Null => f64::NAN,
            serde_json::Value::String(s) => s.parse::<f64>().unwrap_or(f64::NAN),
            other => {
                return Err(DatasetError::CorruptFrame(format!("step {step}: action value {other}")));
            }
        };
    }
    Action::new(out).map_err(|e| DatasetError::CorruptFrame(format!("step {step}: {e}")))
}

fn load_trajectory(root: &Path, entry: &ManifestEntry) -> Result<Trajectory, DatasetError> {
    if !is_safe_id(&entry.id) {
        return Err(DatasetError::Manifest(format!("unsafe trajectory id {:?}", entry.id)));
    }
    let dir = root.join(&entry.id);
    let frames_path = dir.join(FRAMES_FILE);
    let jsonl = fs::read(&frames_path).map_err(io_err(&frames_path))?;
    let text = std::str::from_utf8(&jsonl).map_err(|e| DatasetError::CorruptFrame(e.to_string()))?;
    let mut frames = Vec::new();
    let mut image_bytes = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: FrameLine =
            serde_json::from_str(line).map_err(|e| DatasetError::CorruptFrame(format!("line {}: {e}", lineno + 1)))?;
        if parsed.step != frames.len() {
            return Err(DatasetError::CorruptFrame(format!(
                "line {}: step {} out of order (expected {})",
                lineno + 1,
                parsed.step,
                frames.len()
            )));
        }
        let action = parse_action(&parsed.action, parsed.step)?;
        let rel = Path::new(&parsed.image);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(DatasetError::CorruptFrame(format!("image path {:?} escapes the trajectory", parsed.image)));
        }
        let img_path = dir.join(rel);
        let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
        let observation = Observation::from_png(&bytes)?;
        image_bytes.push(bytes);
        frames.push(Frame { observation, action });
    }
    if frames.is_empty() {
        return Err(DatasetError::CorruptFrame("trajectory has no frames".into()));
    }
    if frames.len() != entry.steps {
        return Err(DatasetError::Manifest(format!("manifest says {} steps, found {}", entry.steps, frames.len())));
    }
    if let Some(expected) = &entry.sha256 {
        let actual = trajectory_digest(&jsonl, &image_bytes);
        if &actual != expected {
            return Err(DatasetError::Manifest(format!("checksum mismatch (expected {expected}, found {actual})")));
        }
    }
    Ok(Trajectory { id: entry.id.clone(), frames, metadata: entry.metadata.clone() })
}

/// Load every manifest-listed (and included) trajectory. Invalid
/// trajectories are skipped and reported in [`LoadedDataset::failures`].
pub fn load(root: &Path) -> Result<LoadedDataset, DatasetError> {
    let manifest = read_manifest(root)?;
    let mut trajectories = Vec::new();
    let mut failures = Vec::new();
    for entry in &manifest.trajectories {
        if let Some(include) = &manifest.include {
            if !include.contains(&entry.id) {
                continue;
            }
        }
        match load_trajectory(root, entry) {
            Ok(t) => trajectories.push(t),
            Err(e) => failures.push(LoadFailure { id: entry.id.clone(), reason: e.to_string() }),
        }
    }
    log::info!("loaded {} trajectories from {} ({} rejected)", trajectories.len(), root.display(), failures.len());
    Ok(LoadedDataset { manifest, trajectories, failures })
}

/// Path of one frame image, or `None` for an id that could escape the root.
/// `<id>/imgs/<step>.png`, relative to the dataset root.
pub fn frame_image_ref(id: &str, step: usize) -> String {
    format!("{id}/{IMAGE_DIR}/{step}.png")
}

pub fn frame_image_path(root: &Path, id: &str, step: usize) -> Option<PathBuf> {
    is_safe_id(id).then(|| root.join(id).join(IMAGE_DIR).join(format!("{step}.png")))
}
