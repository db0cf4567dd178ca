//! The global Gaussian map: primitive spawning from aligned frames, the
//! weighted-sampling training pool, a differentiable isotropic splat
//! renderer, online optimization with depth supervision, per-image affine
//! appearance compensation, and pose refinement.

mod export;
pub(crate) mod render;
mod train;

pub use export::{export_ply, read_ply, save_depth_png, save_rgb_png};
pub use render::{render, render_f64, RenderCamera, RenderConfig, RenderOutput, RenderedF64};
pub use train::{
    frame_loss_and_grads, frame_total_loss, refined_camera_pose, rodrigues, rodrigues_jacobians,
    train_step, FrameContext, FrameGrads, LearningRates, LossTerms, StepLosses, TrainConfig,
};

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frame::{DataFrame, FrameId, GeometryPayload};
use crate::geometry::{Rotation3, Sim3Transform};

/// Opacity spawned for every new Gaussian.
pub const SPAWN_OPACITY: f64 = 0.3;
/// Lower bound kept on isotropic sigma (meters).
pub const SIGMA_MIN: f64 = 1e-4;
/// Opacities are kept inside the open unit interval by this margin.
pub const OPACITY_MARGIN: f64 = 1e-4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplatError {
    #[error("training pool is empty")]
    EmptyPool,
    #[error("gaussian map is empty")]
    EmptyMap,
}

/// One isotropic Gaussian primitive in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Isotropic standard deviation, meters.
    pub sigma: f64,
    /// Opacity in (0, 1).
    pub opacity: f64,
    /// RGB in [0, 1]^3.
    pub color: [f64; 3],
    /// Frame that spawned this primitive.
    pub source: FrameId,
}

impl Gaussian {
    /// Clamps sigma, opacity, and color into their valid ranges.
    pub fn new(mean: Vector3<f64>, sigma: f64, opacity: f64, color: [f64; 3], source: FrameId) -> Self {
        Self {
            mean,
            sigma: sigma.max(SIGMA_MIN),
            opacity: opacity.clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN),
            color: color.map(|c| c.clamp(0.0, 1.0)),
            source,
        }
    }
}

/// Dynamic store of Gaussian primitives.
#[derive(Debug, Clone, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn extend(&mut self, new: impl IntoIterator<Item = Gaussian>) {
        self.gaussians.extend(new);
    }

    /// Removes Gaussians with opacity below `alpha_min`; returns the count.
    /// `alpha_min = 0` is a no-op.
    pub fn prune(&mut self, alpha_min: f64) -> usize {
        let before = self.gaussians.len();
        self.gaussians.retain(|g| g.opacity >= alpha_min);
        before - self.gaussians.len()
    }
}

/// Per-image affine color compensation `c -> A c + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineColor {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
}

impl Default for AffineColor {
    fn default() -> Self {
        Self {
            a: Matrix3::identity(),
            b: Vector3::zeros(),
        }
    }
}

impl AffineColor {
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let v = self.a * Vector3::new(rgb[0], rgb[1], rgb[2]) + self.b;
        [v.x, v.y, v.z]
    }
}

/// Trainable SE(3) increment from the aligned camera pose to the refined
/// pose, applied on the camera side: axis-angle rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseOffset {
    pub theta: Vector3<f64>,
    pub delta: Vector3<f64>,
}

/// Trainable Sim(3) correction to an agent's local-to-global transform,
/// applied on the global side. Zero parameters mean the identity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorrectionParams {
    pub log_scale: f64,
    pub theta: Vector3<f64>,
    pub t: Vector3<f64>,
}

impl CorrectionParams {
    pub fn to_sim3(&self) -> Sim3Transform {
        let angle = self.theta.norm();
        let rotation = if angle < 1e-12 {
            Rotation3::identity()
        } else {
            Rotation3::from_axis_angle(self.theta / angle, angle)
        };
        Sim3Transform::new(self.log_scale.exp(), rotation, self.t)
    }
}

/// Per-agent alignment state used by the optimizer: the one-time base
/// transform plus its trainable correction.
#[derive(Debug, Clone, Default)]
pub struct AgentPoses {
    base: HashMap<u32, Sim3Transform>,
    correction: HashMap<u32, CorrectionParams>,
}

impl AgentPoses {
    pub fn set_base(&mut self, agent: u32, transform: Sim3Transform) {
        self.base.insert(agent, transform);
        self.correction.entry(agent).or_default();
    }

    pub fn base(&self, agent: u32) -> Option<&Sim3Transform> {
        self.base.get(&agent)
    }

    pub fn correction(&self, agent: u32) -> CorrectionParams {
        self.correction.get(&agent).copied().unwrap_or_default()
    }

    pub fn correction_mut(&mut self, agent: u32) -> &mut CorrectionParams {
        self.correction.entry(agent).or_default()
    }

    /// Corrected local-to-global transform for spawning and depth scaling.
    pub fn effective(&self, agent: u32) -> Option<Sim3Transform> {
        let base = self.base.get(&agent)?;
        Some(self.correction(agent).to_sim3().compose(base))
    }

    pub fn agents(&self) -> impl Iterator<Item = u32> + '_ {
        self.base.keys().copied()
    }
}

/// One pool entry: the frame (depth already rescaled to global metric at
/// ingest), its trainable pose offset, and its appearance compensation.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub frame: DataFrame,
    pub offset: PoseOffset,
    pub appearance: AffineColor,
}

/// Frame pool sampled with probability proportional to `1 / (1 + count)`.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    entries: Vec<PoolEntry>,
}

impl TrainingPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut PoolEntry {
        &mut self.entries[index]
    }

    /// Inserts an aligned frame. Depth payloads are rescaled from local to
    /// global metric here, once, so training targets stay fixed afterwards.
    pub fn insert(&mut self, mut frame: DataFrame, local_to_global_scale: f64) {
        if let GeometryPayload::Depth(d) = &mut frame.payload {
            if (local_to_global_scale - 1.0).abs() > f64::EPSILON {
                for v in d.iter_mut() {
                    *v = (*v as f64 * local_to_global_scale) as f32;
                }
            }
        }
        self.entries.push(PoolEntry {
            frame,
            offset: PoseOffset::default(),
            appearance: AffineColor::default(),
        });
    }

    /// Draws `n` distinct frames weighted by `1 / (1 + sample_count)` and
    /// increments the drawn counts. Candidates are enumerated in frame-id
    /// order so the draw depends only on pool content, not insertion order.
    pub fn sample_batch(&mut self, n: usize, seed: u64) -> Result<Vec<usize>, SplatError> {
        if self.entries.is_empty() {
            return Err(SplatError::EmptyPool);
        }
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by_key(|&i| self.entries[i].frame.id());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights: Vec<f64> = order
            .iter()
            .map(|&i| 1.0 / (1.0 + self.entries[i].frame.sample_count as f64))
            .collect();
        let mut picked = Vec::new();
        let draws = n.min(order.len());
        for _ in 0..draws {
            let total: f64 = weights.iter().sum();
            let mut u = rand::Rng::random_range(&mut rng, 0.0..total);
            let mut chosen = order.len() - 1;
            for (pos, w) in weights.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                if u < *w {
                    chosen = pos;
                    break;
                }
                u -= *w;
            }
            // Skip already-drawn slots if the remainder landed on one.
            if weights[chosen] <= 0.0 {
                chosen = weights
                    .iter()
                    .rposition(|w| *w > 0.0)
                    .expect("at least one undrawn candidate");
            }
            picked.push(order[chosen]);
            weights[chosen] = 0.0;
        }
        for &i in &picked {
            self.entries[i].frame.sample_count += 1;
        }
        Ok(picked)
    }
}

/// Spawns `k` Gaussians from one frame mapped through its local-to-global
/// transform. Depth frames unproject uniformly sampled valid-depth pixels;
/// point frames subsample the point list. Returns an empty list when the
/// frame carries no usable geometry.
pub fn spawn_from_frame(
    frame: &DataFrame,
    local_to_global: &Sim3Transform,
    k: usize,
    seed: u64,
) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera_center = local_to_global.apply_point(&frame.local_pose.translation);
    let fx = frame.intrinsics.fx;
    let mut out = Vec::new();

    match &frame.payload {
        GeometryPayload::Depth(depth) => {
            let width = frame.intrinsics.width as usize;
            let valid: Vec<usize> = depth
                .iter()
                .enumerate()
                .filter(|(_, d)| **d > 0.0 && d.is_finite())
                .map(|(i, _)| i)
                .collect();
            if valid.is_empty() {
                return out;
            }
            let count = k.min(valid.len());
            let picks = sample_indices(&mut rng, valid.len(), count);
            for p in picks.iter() {
                let idx = valid[p];
                let x = (idx % width) as f64;
                let y = (idx / width) as f64;
                let d = depth[idx] as f64;
                let p_cam = Vector3::new(
                    (x - frame.intrinsics.cx) / fx * d,
                    (y - frame.intrinsics.cy) / frame.intrinsics.fy * d,
                    d,
                );
                let p_local = frame.local_pose.apply_point(&p_cam);
                let p_global = local_to_global.apply_point(&p_local);
                let dist = (p_global - camera_center).norm();
                let color = [
                    frame.rgb[idx * 3] as f64 / 255.0,
                    frame.rgb[idx * 3 + 1] as f64 / 255.0,
                    frame.rgb[idx * 3 + 2] as f64 / 255.0,
                ];
                out.push(Gaussian::new(
                    p_global,
                    dist / fx,
                    SPAWN_OPACITY,
                    color,
                    frame.id(),
                ));
            }
        }
        GeometryPayload::Points { positions, colors } => {
            if positions.is_empty() {
                return out;
            }
            let count = k.min(positions.len());
            let picks = sample_indices(&mut rng, positions.len(), count);
            for p in picks.iter() {
                let pt = positions[p];
                let p_local = Vector3::new(pt[0] as f64, pt[1] as f64, pt[2] as f64);
                let p_global = local_to_global.apply_point(&p_local);
                let dist = (p_global - camera_center).norm();
                let c = colors[p];
                out.push(Gaussian::new(
                    p_global,
                    dist / fx,
                    SPAWN_OPACITY,
                    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0],
                    frame.id(),
                ));
            }
        }
    }
    out
}
