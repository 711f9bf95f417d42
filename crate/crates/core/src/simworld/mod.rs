//! Procedural 3D scenes, scripted camera trajectories, and a plane renderer
//! that provides ground truth for every downstream test.

mod render;
mod scene;

pub use render::{depth_at, render_frame, render_image, synthesize_observations, visible_seeds, RenderedFrame};
pub use scene::{generate_scenario, raycast, Plane, RayHit, Scene, TrajectoryScript};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
}
