//! The three-keyframe instruction-generation prompt.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::InstructionError;
use crate::dataset::{frame_image_ref, Trajectory};

pub const SYSTEM_MESSAGE: &str = "You are a linguistic expert specializing in robotic task annotation. \
Your goal is to provide diverse, natural language instructions based on visual observations of robot manipulation.";

/// User message with its three image placeholders still in place.
pub const USER_TEMPLATE: &str = r#"{Image 1: First frame of the trajectory}
{Image 2: Intermediate frame of the trajectory}
{Image 3: Last frame of the trajectory}

Task:
1. Scene Analysis: Briefly identify the primary object and the robot's objective from the provided image.
2. Instruction Generation: Synthesize exactly 5 distinct natural language instructions for the observed task.

Requirements:
- Ensure linguistic variety: Use different sentence structures (Imperative, Goal-oriented, and Conditional).
- Vary the level of abstraction: Include instructions ranging from low-level motor descriptions to high-level intent.
- Vocabulary diversity: Use synonyms for objects (e.g., "item," "target," "utensil") and actions (e.g., "grasp," "pick up," "relocate").
- Format: Return only the 5 instructions, each on a new line starting with "No. [Number]".

[Output Example]
No. 1 In order to pick up the object, the robot should...
No. 2 To move the item to a new location, the robot must..."#;

const PLACEHOLDERS: [&str; 3] = [
    "{Image 1: First frame of the trajectory}",
    "{Image 2: Intermediate frame of the trajectory}",
    "{Image 3: Last frame of the trajectory}",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame_index: usize,
    /// Path of the frame image relative to the dataset root.
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub trajectory_id: String,
    pub system_message: String,
    pub user_message: String,
    /// First, intermediate, last.
    pub keyframes: [Keyframe; 3],
    /// Trajectory metadata, for clients that cannot send images.
    pub metadata: BTreeMap<String, String>,
}

/// `0`, `⌊(n−1)/2⌋`, `n−1`.
pub fn keyframe_indices(n: usize) -> Result<[usize; 3], InstructionError> {
    if n < 3 {
        return Err(InstructionError::TrajectoryTooShort(n));
    }
    Ok([0, (n - 1) / 2, n - 1])
}

pub fn build_prompt(traj: &Trajectory) -> Result<PromptBundle, InstructionError> {
    let idx = keyframe_indices(traj.len())?;
    let keyframes = idx.map(|i| Keyframe { frame_index: i, image_ref: frame_image_ref(&traj.id, i) });
    let mut user_message = USER_TEMPLATE.to_string();
    for (k, (placeholder, kf)) in PLACEHOLDERS.iter().zip(&keyframes).enumerate() {
        user_message = user_message.replacen(placeholder, &format!("{{Image {}: {}}}", k + 1, kf.image_ref), 1);
    }
    Ok(PromptBundle {
        trajectory_id: traj.id.clone(),
        system_message: SYSTEM_MESSAGE.to_string(),
        user_message,
        keyframes,
        metadata: traj.metadata.clone(),
    })
}
