//! Configuration file: TOML with sections for server, solver, pool,
//! renderer, field, and simulator. Every key is optional and falls back to
//! the built-in defaults.

use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use crate::alignment::AlignmentConfig;
use crate::correspondence::CorrespondenceConfig;
use crate::semantics::FieldConfig;
use crate::splatmap::{LearningRates, RenderConfig, TrainConfig};
use crate::stream::scene::SceneParams;
use crate::stream::sim::SimParams;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub pool: PoolSection,
    #[serde(default)]
    pub renderer: RendererSection,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub sim: SimSection,
}

macro_rules! section {
    ($name:ident { $($field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Debug, Clone, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            $(pub $field: $ty,)*
        }
        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }
    };
}

section!(ServerSection {
    bind: String = "127.0.0.1:7444".to_string(),
    holdout_n: u64 = 10,
    steps_per_frame: u32 = 2,
    post_stream_steps: u32 = 200,
    proposal_cadence_s: f64 = 2.0,
    stats_interval_s: f64 = 5.0,
    max_runtime_s: f64 = 0.0,
    exit_on_idle: bool = true,
    cache_cap: usize = 10_000,
    ingest_queue_cap: usize = 1024,
    seed: u64 = 0,
    descriptor_dim: usize = 64,
    initial_gamma: f64 = 0.1,
    match_ratio_xi: f64 = 0.25,
    nn_ratio: f64 = 0.9,
});

section!(SolverSection {
    epsilon: f64 = 1e-3,
    window: usize = 16,
    translation_gate_m: f64 = 0.1,
    rotation_gate_deg: f64 = 10.0,
});

section!(PoolSection {
    batch_size: usize = 4,
    lambda_depth: f64 = 0.2,
    beta_t: f64 = 10.0,
    beta_r: f64 = 10.0,
    spawn_per_frame: usize = 1024,
    lr_mean: f64 = 3e-1,
    lr_sigma: f64 = 1e-1,
    lr_opacity: f64 = 3e2,
    lr_color: f64 = 3e2,
    lr_pose: f64 = 1e-4,
    lr_affine: f64 = 1e-2,
    lr_agent: f64 = 1e-5,
});

section!(RendererSection {
    z_near: f64 = 0.05,
    truncation: f64 = 3.0,
    transmittance_floor: f64 = 1e-6,
});

section!(FieldSection {
    enabled: bool = true,
    out_dim: usize = 16,
    levels: usize = 4,
    features_per_level: usize = 4,
    table_size: usize = 1 << 16,
    base_resolution: u32 = 16,
    hidden_width: usize = 32,
    bbox_min: f64 = -4.0,
    bbox_max: f64 = 4.0,
    lr: f64 = 1e-2,
    interleave: u64 = 4,
    batch: usize = 512,
});

section!(SimSection {
    scene_seed: u64 = 0,
    agents: usize = 3,
    objects: usize = 10,
    gaussians_per_object: usize = 120,
    background_gaussians: usize = 600,
    semantic_dim: u16 = 16,
    image_size: u32 = 64,
    duration_s: f64 = 20.0,
    frame_rate_hz: f64 = 3.0,
    start_stagger_s: f64 = 2.0,
    points_per_frame: usize = 1024,
    semantic_every: u64 = 4,
    descriptor_length_scale: f64 = 1.5,
    descriptor_noise: f64 = 0.01,
});

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            z_near: self.renderer.z_near,
            truncation: self.renderer.truncation,
            transmittance_floor: self.renderer.transmittance_floor,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.pool.batch_size,
            lambda_depth: self.pool.lambda_depth,
            beta_t: self.pool.beta_t,
            beta_r: self.pool.beta_r,
            render: self.render_config(),
            lr: LearningRates {
                mean: self.pool.lr_mean,
                sigma: self.pool.lr_sigma,
                opacity: self.pool.lr_opacity,
                color: self.pool.lr_color,
                pose: self.pool.lr_pose,
                affine: self.pool.lr_affine,
                agent: self.pool.lr_agent,
            },
        }
    }

    pub fn alignment_config(&self) -> AlignmentConfig {
        AlignmentConfig {
            window: self.solver.window,
            epsilon: self.solver.epsilon,
            translation_gate_m: self.solver.translation_gate_m,
            rotation_gate_deg: self.solver.rotation_gate_deg,
        }
    }

    pub fn correspondence_config(&self) -> CorrespondenceConfig {
        CorrespondenceConfig {
            initial_gamma: self.server.initial_gamma,
            match_ratio_xi: self.server.match_ratio_xi,
            nn_ratio: self.server.nn_ratio,
        }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            out_dim: self.field.out_dim,
            levels: self.field.levels,
            features_per_level: self.field.features_per_level,
            table_size: self.field.table_size,
            base_resolution: self.field.base_resolution,
            hidden_width: self.field.hidden_width,
            bbox_min: Vector3::from_element(self.field.bbox_min),
            bbox_max: Vector3::from_element(self.field.bbox_max),
            seed: self.server.seed,
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            seed: self.sim.scene_seed,
            num_agents: self.sim.agents,
            num_objects: self.sim.objects,
            gaussians_per_object: self.sim.gaussians_per_object,
            background_gaussians: self.sim.background_gaussians,
            semantic_dim: self.sim.semantic_dim,
            image_size: self.sim.image_size,
            duration_s: self.sim.duration_s,
            frame_rate_hz: self.sim.frame_rate_hz,
            start_stagger_s: self.sim.start_stagger_s,
        }
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            points_per_frame: self.sim.points_per_frame,
            semantic_every: self.sim.semantic_every,
            descriptor: crate::correspondence::SyntheticProviderConfig {
                dim: self.server.descriptor_dim,
                length_scale: self.sim.descriptor_length_scale,
                orientation_weight: 0.75,
                noise_sigma: self.sim.descriptor_noise,
                seed: self.server.seed,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.server.holdout_n, 10);
        assert_eq!(cfg.solver.window, 16);
        assert_eq!(cfg.pool.batch_size, 4);
    }

    #[test]
    fn sections_override() {
        let cfg: FileConfig = toml::from_str(
            "[server]\nholdout_n = 5\n[solver]\nepsilon = 0.01\n[field]\nenabled = false\n",
        )
        .unwrap();
        assert_eq!(cfg.server.holdout_n, 5);
        assert!((cfg.solver.epsilon - 0.01).abs() < 1e-12);
        assert!(!cfg.field.enabled);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<FileConfig>("[server]\nbogus = 1\n");
        assert!(err.is_err());
    }
}
