//! Trajectory datasets: in-memory types, the on-disk layout, seeded
//! train/test splits, and a scripted pick-and-place generator.

mod io;
mod split;
mod synth;

use std::collections::BTreeMap;

pub use io::{
    export, frame_image_path, frame_image_ref, is_safe_id, load, read_manifest, LoadFailure, LoadedDataset, Manifest,
    ManifestEntry, MANIFEST_FILE,
};
pub use split::{split, DatasetSplit};
pub use synth::{synthesize, SynthBounds, GOALS, IMAGE_SIZE, OBJECTS};

use crate::action::Action;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("no manifest in {0}")]
    NoManifest(std::path::PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("corrupt frame: {0}")]
    CorruptFrame(String),
    #[error("image: {0}")]
    Image(String),
    #[error("test fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("need at least 2 trajectories to split, got {0}")]
    TooFewToSplit(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// Metadata key for the object being manipulated.
pub const META_OBJECT: &str = "object";
/// Metadata key for the goal location.
pub const META_GOAL: &str = "goal";
/// Metadata key for the single fixed instruction used by the baseline.
pub const META_CANONICAL: &str = "canonical_instruction";

/// Grayscale image with intensities stored as 8-bit levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Observation {
    pub fn from_levels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(DatasetError::Image(format!("{} pixels do not fill a {width}x{height} image", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    /// Quantizes intensities in `[0, 1]` to the nearest 8-bit level.
    pub fn from_intensities(width: usize, height: usize, values: &[f64]) -> Result<Self, DatasetError> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::Image(format!("intensity {v} outside [0, 1]")));
        }
        let pixels = values.iter().map(|v| (v * 255.0).round() as u8).collect();
        Self::from_levels(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn levels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn intensity(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x] as f64 / 255.0
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory png header");
            writer.write_image_data(&self.pixels).expect("in-memory png data");
        }
        out
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, DatasetError> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| DatasetError::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| DatasetError::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(DatasetError::Image(format!(
                "expected 8-bit grayscale, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Self::from_levels(info.width as usize, info.height as usize, buf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub frames: Vec<Frame>,
    pub metadata: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn canonical_instruction(&self) -> Option<&str> {
        self.metadata.get(META_CANONICAL).map(String::as_str)
    }
}

/// All actions of the given trajectories, in order.
pub fn actions_of<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Vec<Action> {
    trajs.into_iter().flat_map(|t| t.frames.iter().map(|f| f.action)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let obs = Observation::from_levels(4, 3, (0..12).map(|v| v * 20).collect()).unwrap();
        assert_eq!(Observation::from_png(&obs.to_png()).unwrap(), obs);
    }

    #[test]
    fn intensities_are_validated_and_quantized() {
        assert!(Observation::from_intensities(1, 2, &[0.5, 1.2]).is_err());
        let obs = Observation::from_intensities(2, 1, &[0.0, 1.0]).unwrap();
        assert_eq!(obs.levels(), &[0, 255]);
        assert_eq!(obs.intensity(1, 0), 1.0);
        assert!(Observation::from_levels(2, 2, vec![0; 3]).is_err());
    }
}
