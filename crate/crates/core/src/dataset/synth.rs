//! Scripted pick-and-place episodes on a 32×32 grayscale tabletop.
//!
//! The end effector approaches the object, descends and closes the gripper,
//! carries the object to the target marker, then lowers and opens. One pixel
//! is one centimeter. Every action is a function of the rendered state, so a
//! policy can in principle recover it from the image alone.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, Frame, Observation, Trajectory, META_CANONICAL, META_GOAL, META_OBJECT};
use crate::action::Action;

pub const IMAGE_SIZE: usize = 32;
const METERS_PER_PIXEL: f64 = 0.01;

pub const OBJECTS: [&str; 8] = ["spoon", "fork", "cup", "block", "carrot", "sponge", "towel", "knife"];
pub const GOALS: [&str; 6] = ["plate", "pot", "drying rack", "cutting board", "left burner", "bowl"];

/// Per-step limits the generator respects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthBounds {
    pub translation: f64,
    pub vertical: f64,
    pub rotation: f64,
}

impl SynthBounds {
    pub const DEFAULT: SynthBounds = SynthBounds { translation: 0.05, vertical: 0.02, rotation: 0.2 };

    pub fn contains(&self, a: &Action) -> bool {
        let v = a.as_array();
        v[0].abs() <= self.translation
            && v[1].abs() <= self.translation
            && v[2].abs() <= self.vertical
            && v[3..6].iter().all(|r| r.abs() <= self.rotation)
            && (v[6] == 0.0 || v[6] == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Approach,
    Grasp,
    Transport,
    Release,
}

fn phase_at(step: usize, steps: usize) -> Phase {
    let approach = (2 * steps / 5).max(1);
    let grasp = (steps / 8).max(1);
    let release = (steps / 8).max(1);
    let transport = steps.saturating_sub(approach + grasp + release);
    if step < approach {
        Phase::Approach
    } else if step < approach + grasp {
        Phase::Grasp
    } else if step < approach + grasp + transport {
        Phase::Transport
    } else {
        Phase::Release
    }
}

struct Scene {
    gripper: (f64, f64),
    height: f64,
    object: (f64, f64),
    target: (f64, f64),
    closed: bool,
}

fn toward(from: f64, to: f64, gain: f64, limit: f64) -> f64 {
    ((to - from) * METERS_PER_PIXEL * gain).clamp(-limit, limit)
}

impl Scene {
    fn action(&self, phase: Phase, b: &SynthBounds) -> [f64; 7] {
        let (goal, gain, goal_height, gripper) = match phase {
            Phase::Approach => (self.object, 0.6, 0.03, 1.0),
            Phase::Grasp => (self.object, 1.0, 0.0, 0.0),
            Phase::Transport => (self.target, 0.5, 0.05, 0.0),
            Phase::Release => (self.target, 1.0, 0.01, 1.0),
        };
        let dx = toward(self.gripper.0, goal.0, gain, b.translation);
        let dy = toward(self.gripper.1, goal.1, gain, b.translation);
        let dz = ((goal_height - self.height) * 0.5).clamp(-b.vertical, b.vertical);
        let droll = (2.0 * dy).clamp(-b.rotation, b.rotation);
        let dpitch = (-2.0 * dx + 3.0 * dz).clamp(-b.rotation, b.rotation);
        let dyaw = 0.15 * (10.0 * (dx - dy)).tanh();
        [dx, dy, dz, droll, dpitch, dyaw, gripper]
    }

    fn apply(&mut self, a: &[f64; 7], phase: Phase) {
        self.gripper.0 = (self.gripper.0 + a[0] / METERS_PER_PIXEL).clamp(0.0, (IMAGE_SIZE - 1) as f64);
        self.gripper.1 = (self.gripper.1 + a[1] / METERS_PER_PIXEL).clamp(0.0, (IMAGE_SIZE - 1) as f64);
        self.height = (self.height + a[2]).max(0.0);
        self.closed = a[6] == 0.0;
        if matches!(phase, Phase::Grasp | Phase::Transport) && self.closed {
            self.object = self.gripper;
        }
    }

    fn render(&self) -> Observation {
        let n = IMAGE_SIZE;
        let mut img = vec![0.05f64; n * n];
        let ring_radius = 1.5 + self.height / METERS_PER_PIXEL * 0.5;
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64, y as f64);
                let mut v: f64 = img[y * n + x];
                // target: hollow square
                let (tx, ty) = ((fx - self.target.0).abs(), (fy - self.target.1).abs());
                let edge = tx.max(ty);
                if (2.5..=3.5).contains(&edge) {
                    v = v.max(0.35);
                }
                // object: gaussian blob
                let d2 = (fx - self.object.0).powi(2) + (fy - self.object.1).powi(2);
                v = v.max(0.9 * (-d2 / (2.0 * 1.2 * 1.2)).exp());
                // gripper: ring whose radius grows with height, filled when closed
                let dist = ((fx - self.gripper.0).powi(2) + (fy - self.gripper.1).powi(2)).sqrt();
                let ring = (-(dist - ring_radius).powi(2) / 0.5).exp();
                v = v.max(0.6 * ring);
                if self.closed && dist < ring_radius {
                    v = v.max(0.45);
                }
                img[y * n + x] = v.clamp(0.0, 1.0);
            }
        }
        Observation::from_intensities(n, n, &img).expect("rendered intensities are in range")
    }
}

fn random_point(rng: &mut ChaCha8Rng, margin: f64) -> (f64, f64) {
    let hi = IMAGE_SIZE as f64 - 1.0 - margin;
    (rng.random_range(margin..hi), rng.random_range(margin..hi))
}

/// Generate `n` scripted episodes of exactly `steps` frames.
pub fn synthesize(n: usize, steps: usize, seed: u64) -> Result<Vec<Trajectory>, DatasetError> {
    if n == 0 || steps < 3 {
        return Err(DatasetError::InvalidArgument(format!("need n >= 1 and steps >= 3, got n={n}, steps={steps}")));
    }
    let bounds = SynthBounds::DEFAULT;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let object_name = OBJECTS[rng.random_range(0..OBJECTS.len())];
        let goal_name = GOALS[rng.random_range(0..GOALS.len())];
        let object = random_point(&mut rng, 5.0);
        let target = loop {
            let p = random_point(&mut rng, 5.0);
            if (p.0 - object.0).hypot(p.1 - object.1) >= 8.0 {
                break p;
            }
        };
        let angle = rng.random_range(0.0..2.0 * PI);
        let reach = rng.random_range(6.0..12.0);
        let gripper = (
            (object.0 + reach * angle.cos()).clamp(2.0, IMAGE_SIZE as f64 - 3.0),
            (object.1 + reach * angle.sin()).clamp(2.0, IMAGE_SIZE as f64 - 3.0),
        );
        let mut scene = Scene { gripper, height: 0.06, object, target, closed: false };

        let mut frames = Vec::with_capacity(steps);
        for step in 0..steps {
            let phase = phase_at(step, steps);
            let observation = scene.render();
            let raw = scene.action(phase, &bounds);
            let action = Action::new(raw).expect("scripted actions are finite");
            scene.apply(&raw, phase);
            frames.push(Frame { observation, action });
        }

        let mut metadata = BTreeMap::new();
        metadata.insert(META_OBJECT.to_string(), object_name.to_string());
        metadata.insert(META_GOAL.to_string(), goal_name.to_string());
        metadata.insert(META_CANONICAL.to_string(), format!("put the {object_name} on the {goal_name}"));
        metadata.insert("generator".to_string(), "scripted-pick-place-v1".to_string());
        metadata.insert("seed".to_string(), seed.to_string());
        out.push(Trajectory { id: format!("traj_{i:04}"), frames, metadata });
    }
    Ok(out)
}
