//! Ground-truth synthetic scenes for the simulated fleet.
//!
//! A scene is a set of colored, object-tagged Gaussians (a handful of
//! labeled blobs over a floor/backdrop) plus per-agent scripts: an orbit
//! trajectory expressed in the global frame, the agent's ground-truth
//! local-to-global transform, start delay, and frame rate. The whole scene
//! serializes to JSON as the truth sidecar used by the synthetic providers
//! and the eval harness.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frame::{FrameId, PayloadKind};
use crate::geometry::{Rotation3, SE3Pose, Sim3Transform};
use crate::splatmap::{Gaussian, GaussianMap};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGaussian {
    pub position: [f64; 3],
    pub sigma: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// 0 = background (no semantic label).
    pub object_id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub label: String,
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl SceneObject {
    pub fn contains(&self, p: &Vector3<f64>, slack: f64) -> bool {
        (0..3).all(|d| (p[d] - self.center[d]).abs() <= self.half_extent[d] + slack)
    }
}

/// Serializable Sim(3): scale, quaternion wxyz, translation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Sim3Record {
    pub scale: f64,
    pub quat_wxyz: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Sim3Transform> for Sim3Record {
    fn from(t: &Sim3Transform) -> Self {
        let (w, x, y, z) = t.rotation.wxyz();
        Self {
            scale: t.scale,
            quat_wxyz: [w, x, y, z],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl Sim3Record {
    pub fn to_transform(&self) -> Sim3Transform {
        let [w, x, y, z] = self.quat_wxyz;
        Sim3Transform::new(
            self.scale,
            Rotation3::from_quat(w, x, y, z).expect("valid quaternion in scene file"),
            Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
        )
    }
}

/// Global-frame orbit around the scene center, looking inward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitTrajectory {
    pub radius: f64,
    pub height: f64,
    pub height_wobble: f64,
    pub phase_rad: f64,
    pub angular_rate_rad_s: f64,
}

impl OrbitTrajectory {
    /// Camera-to-global pose at time `t`, looking at the origin.
    pub fn pose_at(&self, t: f64) -> SE3Pose {
        let ang = self.phase_rad + self.angular_rate_rad_s * t;
        let pos = Vector3::new(
            self.radius * ang.cos(),
            self.height + self.height_wobble * (0.7 * ang).sin(),
            self.radius * ang.sin(),
        );
        look_at(pos, Vector3::zeros())
    }
}

/// Camera-to-world pose with +z forward toward `target` and image-up
/// aligned against world +y.
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> SE3Pose {
    let forward = (target - position).normalize();
    let world_up = Vector3::y();
    let right = world_up.cross(&forward).normalize();
    let down = forward.cross(&right); // +y in camera space maps down in image space
    let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    SE3Pose::new(Rotation3::project_matrix(&m), position)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentScript {
    pub agent: u32,
    pub metric: bool,
    pub payload: String, // "depth" | "points"
    pub true_transform: Sim3Record,
    pub trajectory: OrbitTrajectory,
    pub start_delay_s: f64,
    pub frame_rate_hz: f64,
    pub duration_s: f64,
}

impl AgentScript {
    pub fn payload_kind(&self) -> PayloadKind {
        if self.payload == "points" {
            PayloadKind::Points
        } else {
            PayloadKind::Depth
        }
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.frame_rate_hz).round() as u64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub semantic_dim: u16,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    pub gaussians: Vec<SceneGaussian>,
    pub objects: Vec<SceneObject>,
    /// Label name -> unit target vector, aligned with `objects`.
    pub labels: Vec<(String, Vec<f32>)>,
    pub agents: Vec<AgentScript>,
}

#[derive(Debug, Clone)]
pub struct SceneParams {
    pub seed: u64,
    pub num_agents: usize,
    pub num_objects: usize,
    pub gaussians_per_object: usize,
    pub background_gaussians: usize,
    pub semantic_dim: u16,
    pub image_size: u32,
    pub duration_s: f64,
    pub frame_rate_hz: f64,
    /// Staggered start offset between consecutive agents.
    pub start_stagger_s: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            num_agents: 3,
            num_objects: 10,
            gaussians_per_object: 120,
            background_gaussians: 600,
            semantic_dim: 16,
            image_size: 64,
            duration_s: 20.0,
            frame_rate_hz: 3.0,
            start_stagger_s: 2.0,
        }
    }
}

fn random_unit_vec(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| (x / n) as f32).collect();
        }
    }
}

impl SyntheticScene {
    /// Builds a seeded desk-scale scene and validates that every agent's
    /// trajectory keeps the scene in view for at least 80% of its frames.
    pub fn generate(params: &SceneParams) -> Self {
        assert!(params.num_agents >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5ce0_5ce0_5ce0_5ce0);

        let mut gaussians = Vec::new();
        let mut objects = Vec::new();
        let mut labels = Vec::new();

        // Labeled blobs spread on a ring so boxes stay disjoint.
        for k in 0..params.num_objects {
            let id = k as u32 + 1;
            let ring = 1.3 + 0.15 * ((k % 3) as f64);
            let ang = k as f64 / params.num_objects as f64 * std::f64::consts::TAU
                + rng.random_range(-0.1..0.1);
            let center = Vector3::new(
                ring * ang.cos(),
                rng.random_range(-0.3..0.4),
                ring * ang.sin(),
            );
            let half = Vector3::new(
                rng.random_range(0.15..0.3),
                rng.random_range(0.15..0.3),
                rng.random_range(0.15..0.3),
            );
            let color = [
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
            ];
            for _ in 0..params.gaussians_per_object {
                let p = Vector3::new(
                    center.x + rng.random_range(-half.x..half.x) * 0.9,
                    center.y + rng.random_range(-half.y..half.y) * 0.9,
                    center.z + rng.random_range(-half.z..half.z) * 0.9,
                );
                gaussians.push(SceneGaussian {
                    position: [p.x, p.y, p.z],
                    sigma: rng.random_range(0.03..0.07),
                    opacity: rng.random_range(0.6..0.9),
                    color: [
                        (color[0] + rng.random_range(-0.08..0.08f64)).clamp(0.0, 1.0),
                        (color[1] + rng.random_range(-0.08..0.08f64)).clamp(0.0, 1.0),
                        (color[2] + rng.random_range(-0.08..0.08f64)).clamp(0.0, 1.0),
                    ],
                    object_id: id,
                });
            }
            objects.push(SceneObject {
                id,
                label: format!("obj{k:02}"),
                center: [center.x, center.y, center.z],
                half_extent: [half.x, half.y, half.z],
            });
            labels.push((
                format!("obj{k:02}"),
                random_unit_vec(&mut rng, params.semantic_dim as usize),
            ));
        }

        // Background floor disk, object id 0.
        for _ in 0..params.background_gaussians {
            let r = rng.random_range(0.0..2.2f64).sqrt() * 2.2;
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let shade = rng.random_range(0.25..0.45);
            gaussians.push(SceneGaussian {
                position: [r * ang.cos(), -0.8 + rng.random_range(-0.02..0.02), r * ang.sin()],
                sigma: rng.random_range(0.05..0.12),
                opacity: rng.random_range(0.5..0.8),
                color: [shade, shade * 1.05, shade * 1.1],
                object_id: 0,
            });
        }

        let mut agents = Vec::new();
        for a in 0..params.num_agents {
            let agent = a as u32;
            let metric = a == 0;
            let true_transform = if metric {
                Sim3Transform::identity()
            } else {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                );
                let axis = if axis.norm() < 1e-6 { Vector3::y() } else { axis };
                Sim3Transform::new(
                    rng.random_range(0.5..2.0),
                    Rotation3::from_axis_angle(axis, rng.random_range(-3.0..3.0)),
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ),
                )
            };
            let payload = if a % 3 == 2 { "points" } else { "depth" };
            agents.push(AgentScript {
                agent,
                metric,
                payload: payload.to_string(),
                true_transform: Sim3Record::from(&true_transform),
                trajectory: OrbitTrajectory {
                    radius: rng.random_range(2.6..3.2),
                    height: rng.random_range(0.6..1.2),
                    height_wobble: rng.random_range(0.0..0.15),
                    phase_rad: a as f64 * 2.1 + rng.random_range(-0.2..0.2),
                    angular_rate_rad_s: 0.35 + 0.03 * a as f64,
                },
                start_delay_s: a as f64 * params.start_stagger_s,
                frame_rate_hz: params.frame_rate_hz,
                duration_s: params.duration_s,
            });
        }

        let scene = Self {
            seed: params.seed,
            semantic_dim: params.semantic_dim,
            image_width: params.image_size,
            image_height: params.image_size,
            focal: params.image_size as f64 * 0.9,
            gaussians,
            objects,
            labels,
            agents,
        };
        scene.validate_coverage();
        scene
    }

    /// Scene centroid must project inside the image for >= 80% of frames.
    fn validate_coverage(&self) {
        let centroid = self
            .gaussians
            .iter()
            .fold(Vector3::zeros(), |acc, g| {
                acc + Vector3::new(g.position[0], g.position[1], g.position[2])
            })
            / self.gaussians.len().max(1) as f64;
        for script in &self.agents {
            let n = script.frame_count();
            let mut visible = 0u64;
            for s in 0..n {
                let t = s as f64 / script.frame_rate_hz;
                let pose = script.trajectory.pose_at(t);
                let r_wc = pose.rotation.to_matrix().transpose();
                let cam = r_wc * (centroid - pose.translation);
                if cam.z > 0.05 {
                    let u = self.focal * cam.x / cam.z + self.image_width as f64 / 2.0;
                    let v = self.focal * cam.y / cam.z + self.image_height as f64 / 2.0;
                    if u >= 0.0 && v >= 0.0 && u < self.image_width as f64 && v < self.image_height as f64 {
                        visible += 1;
                    }
                }
            }
            assert!(
                visible * 5 >= n * 4,
                "agent {} keeps the scene in view only {visible}/{n} frames",
                script.agent
            );
        }
    }

    pub fn intrinsics(&self) -> crate::frame::Intrinsics {
        crate::frame::Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.image_width as f64 / 2.0,
            cy: self.image_height as f64 / 2.0,
            width: self.image_width,
            height: self.image_height,
        }
    }

    /// Ground-truth map for rendering sensor data and oracle baselines.
    pub fn to_map(&self) -> (GaussianMap, Vec<u32>) {
        let mut map = GaussianMap::new();
        let ids = self.gaussians.iter().map(|g| g.object_id).collect();
        map.extend(self.gaussians.iter().map(|g| {
            Gaussian::new(
                Vector3::new(g.position[0], g.position[1], g.position[2]),
                g.sigma,
                g.opacity,
                g.color,
                FrameId::new(u32::MAX, 0),
            )
        }));
        (map, ids)
    }

    pub fn agent_truths(&self) -> HashMap<u32, Sim3Transform> {
        self.agents
            .iter()
            .map(|a| (a.agent, a.true_transform.to_transform()))
            .collect()
    }

    pub fn label_vector(&self, label: &str) -> Option<&[f32]> {
        self.labels
            .iter()
            .find(|(name, _)| name == label)
            .map(|(_, v)| v.as_slice())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string(self).expect("scene serializes");
        std::fs::write(path, json)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
