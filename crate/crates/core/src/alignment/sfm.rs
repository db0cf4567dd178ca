//! Localized structure-from-motion backends.
//!
//! A backend recovers camera poses for a small window of images in its own
//! arbitrary frame (the gauge). The real COLMAP-style backend is out of
//! scope; the synthetic backend replays ground-truth global poses through a
//! freshly sampled random Sim(3) gauge, with configurable noise, dropout,
//! and corruption for gate testing.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::frame::DataFrame;
use crate::geometry::{Rotation3, SE3Pose, Sim3Transform};

/// Per-image pose estimates in the backend's internal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SfmResult {
    pub poses: Vec<Option<SE3Pose>>,
    /// True only when every input image received a pose.
    pub success: bool,
}

pub trait SfmBackend: Send + Sync {
    fn solve(&self, frames: &[&DataFrame]) -> SfmResult;
}

#[derive(Debug, Clone)]
pub struct SyntheticSfmConfig {
    /// Translation noise, meters in the metric frame.
    pub sigma_t: f64,
    /// Rotation noise, degrees.
    pub sigma_r_deg: f64,
    /// Per-image probability of failing to register.
    pub p_drop: f64,
    pub seed: u64,
    /// Translation bias injected into every other image, meters. Zero
    /// disables corruption.
    pub corrupt_translation_bias: f64,
    /// Rotation bias injected into every other image, degrees.
    pub corrupt_rotation_bias_deg: f64,
}

impl Default for SyntheticSfmConfig {
    fn default() -> Self {
        Self {
            sigma_t: 0.0,
            sigma_r_deg: 0.0,
            p_drop: 0.0,
            seed: 0,
            corrupt_translation_bias: 0.0,
            corrupt_rotation_bias_deg: 0.0,
        }
    }
}

/// Gauge-randomized backend built on simulator ground truth.
pub struct SyntheticSfm {
    config: SyntheticSfmConfig,
    agent_truth: HashMap<u32, Sim3Transform>,
    invocation: AtomicU64,
}

impl SyntheticSfm {
    pub fn new(config: SyntheticSfmConfig, agent_truth: HashMap<u32, Sim3Transform>) -> Self {
        Self {
            config,
            agent_truth,
            invocation: AtomicU64::new(0),
        }
    }

    fn random_gauge(rng: &mut ChaCha8Rng) -> Sim3Transform {
        let scale = (rng.random_range(-1.4f64..1.4)).exp();
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
        );
        let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
        let rotation = Rotation3::from_axis_angle(axis, rng.random_range(-3.1..3.1));
        let translation = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Sim3Transform::new(scale, rotation, translation)
    }
}

impl SfmBackend for SyntheticSfm {
    fn solve(&self, frames: &[&DataFrame]) -> SfmResult {
        let call = self.invocation.fetch_add(1, Ordering::SeqCst);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ call.wrapping_mul(0x9e37_79b9));
        let gauge = Self::random_gauge(&mut rng);

        let mut poses = Vec::with_capacity(frames.len());
        let mut success = true;
        for (i, frame) in frames.iter().enumerate() {
            // Derive drop/noise draws for every image regardless of outcome
            // so the random stream stays aligned across configurations.
            let dropped = rng.random_bool(self.config.p_drop.clamp(0.0, 1.0));
            let truth = match self.agent_truth.get(&frame.agent) {
                Some(t) => t,
                None => {
                    success = false;
                    poses.push(None);
                    continue;
                }
            };
            let mut global = truth.apply_to_pose(&frame.local_pose);

            if self.config.sigma_t > 0.0 {
                let noise = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ) * self.config.sigma_t;
                global.translation += noise;
            }
            if self.config.sigma_r_deg > 0.0 {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                );
                let axis = if axis.norm() < 1e-6 { Vector3::y() } else { axis };
                let angle: f64 = StandardNormal.sample(&mut rng);
                let spin = Rotation3::from_axis_angle(
                    axis,
                    angle * self.config.sigma_r_deg.to_radians(),
                );
                global.rotation = spin.compose(&global.rotation);
            }
            if i % 2 == 0 {
                if self.config.corrupt_translation_bias != 0.0 {
                    global.translation.x += self.config.corrupt_translation_bias;
                }
                if self.config.corrupt_rotation_bias_deg != 0.0 {
                    let spin = Rotation3::from_axis_angle(
                        Vector3::z(),
                        self.config.corrupt_rotation_bias_deg.to_radians(),
                    );
                    global.rotation = spin.compose(&global.rotation);
                }
            }

            if dropped {
                success = false;
                poses.push(None);
            } else {
                poses.push(Some(gauge.apply_to_pose(&global)));
            }
        }
        SfmResult { poses, success }
    }
}
