//! Differentiable isotropic splat renderer.
//!
//! Gaussians are projected to screen space, sorted front-to-back, and
//! alpha-composited per pixel:
//!
//! ```text
//!   w_k(p) = alpha_k * exp(-||p - q_k||^2 / (2 sigma2d_k^2)),   sigma2d_k = fx * sigma_k / z_k
//!   rgb    = sum c_k w_k T_k          T_k = prod_{m<k} (1 - w_m)
//!   depth  = sum z_k w_k T_k / max(sum w_k T_k, 1e-8)
//!   alpha  = sum w_k T_k
//! ```
//!
//! Contributions are truncated beyond `truncation * sigma2d`. Pixel `(x, y)`
//! sits at coordinates `(x, y)` exactly. The f64 path is the one the
//! training gradients differentiate; the f32 output is the export surface.

use nalgebra::{Matrix3, Vector3};

use super::GaussianMap;
use crate::frame::Intrinsics;
use crate::geometry::SE3Pose;

/// Denominator floor for the normalized depth output.
pub(crate) const DEPTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    /// Camera-space near plane; closer Gaussians are culled.
    pub z_near: f64,
    /// Contribution cutoff radius in units of sigma2d.
    pub truncation: f64,
    /// Pixels whose remaining transmittance falls below this stop
    /// compositing; spawned maps stack many Gaussians along each ray and
    /// the tail contributes under 1e-6 of a color unit.
    pub transmittance_floor: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            z_near: 0.05,
            truncation: 3.0,
            transmittance_floor: 1e-6,
        }
    }
}

/// Edge length of the rasterization tiles.
pub(crate) const TILE: usize = 16;

/// A camera in the global frame (camera-to-world pose).
#[derive(Debug, Clone, Copy)]
pub struct RenderCamera {
    pub intrinsics: Intrinsics,
    pub pose: SE3Pose,
}

/// Public render output, row-major.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
}

/// Full-precision render, plus the raw depth numerator needed by the
/// backward pass.
#[derive(Debug, Clone)]
pub struct RenderedF64 {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub(crate) weighted_z: Vec<f64>,
}

/// One projected Gaussian: screen center, camera depth, screen sigma, and
/// the clipped pixel bounding box it can touch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat {
    pub idx: usize,
    pub q: [f64; 2],
    pub z: f64,
    pub sigma2d: f64,
    pub x_cam: Vector3<f64>,
    pub x0: i64,
    pub x1: i64,
    pub y0: i64,
    pub y1: i64,
}

/// World-to-camera rotation and camera center for a camera-to-world pose.
pub(crate) fn world_to_camera(pose: &SE3Pose) -> (Matrix3<f64>, Vector3<f64>) {
    (pose.rotation.to_matrix().transpose(), pose.translation)
}

/// Projects all Gaussians, culls against the near plane and image bounds,
/// and returns splats sorted front-to-back.
pub(crate) fn project_splats(
    map: &GaussianMap,
    r_wc: &Matrix3<f64>,
    cam_center: &Vector3<f64>,
    intrinsics: &Intrinsics,
    config: &RenderConfig,
) -> Vec<Splat> {
    let mut splats = Vec::new();
    let (w, h) = (intrinsics.width as i64, intrinsics.height as i64);
    for (idx, g) in map.gaussians().iter().enumerate() {
        let x_cam = r_wc * (g.mean - cam_center);
        let z = x_cam.z;
        if z <= config.z_near {
            continue;
        }
        let qx = intrinsics.fx * x_cam.x / z + intrinsics.cx;
        let qy = intrinsics.fy * x_cam.y / z + intrinsics.cy;
        let sigma2d = intrinsics.fx * g.sigma / z;
        let r = config.truncation * sigma2d;
        let x0 = (qx - r).ceil().max(0.0) as i64;
        let x1 = (qx + r).floor().min((w - 1) as f64) as i64;
        let y0 = (qy - r).ceil().max(0.0) as i64;
        let y1 = (qy + r).floor().min((h - 1) as f64) as i64;
        if x0 > x1 || y0 > y1 || (qx + r) < 0.0 || (qy + r) < 0.0 {
            continue;
        }
        splats.push(Splat {
            idx,
            q: [qx, qy],
            z,
            sigma2d,
            x_cam,
            x0,
            x1,
            y0,
            y1,
        });
    }
    splats.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap_or(std::cmp::Ordering::Equal));
    splats
}

/// Splats binned into screen tiles; bin order preserves the global
/// front-to-back order, so per-pixel compositing is identical to a
/// sequential pass over all splats.
pub(crate) struct TiledSplats {
    pub splats: Vec<Splat>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile: indices into `splats`, front-to-back.
    pub bins: Vec<Vec<u32>>,
}

impl TiledSplats {
    pub(crate) fn build(splats: Vec<Splat>, intrinsics: &Intrinsics) -> Self {
        let tiles_x = (intrinsics.width as usize).div_ceil(TILE);
        let tiles_y = (intrinsics.height as usize).div_ceil(TILE);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in splats.iter().enumerate() {
            let tx0 = s.x0 as usize / TILE;
            let tx1 = s.x1 as usize / TILE;
            let ty0 = s.y0 as usize / TILE;
            let ty1 = s.y1 as usize / TILE;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        Self {
            splats,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    /// Pixel bounds of one tile: (x0, x1, y0, y1), exclusive upper.
    pub(crate) fn tile_bounds(&self, tile: usize, intrinsics: &Intrinsics) -> (i64, i64, i64, i64) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = (tx * TILE) as i64;
        let y0 = (ty * TILE) as i64;
        (
            x0,
            ((tx + 1) * TILE).min(intrinsics.width as usize) as i64,
            y0,
            ((ty + 1) * TILE).min(intrinsics.height as usize) as i64,
        )
    }
}

pub fn render_f64(map: &GaussianMap, camera: &RenderCamera, config: &RenderConfig) -> RenderedF64 {
    let (r_wc, center) = world_to_camera(&camera.pose);
    render_raw(map, &r_wc, &center, &camera.intrinsics, config)
}

/// Matrix-form entry point shared with the gradient pass, which must see
/// exactly the same arithmetic as the forward render.
pub(crate) fn render_raw(
    map: &GaussianMap,
    r_wc: &Matrix3<f64>,
    center: &Vector3<f64>,
    intr: &Intrinsics,
    config: &RenderConfig,
) -> RenderedF64 {
    let tiled = TiledSplats::build(project_splats(map, r_wc, center, intr, config), intr);
    render_tiled(map, &tiled, intr, config)
}

pub(crate) fn render_tiled(
    map: &GaussianMap,
    tiled: &TiledSplats,
    intr: &Intrinsics,
    config: &RenderConfig,
) -> RenderedF64 {
    use rayon::prelude::*;

    struct TileOut {
        tile: usize,
        rgb: Vec<f64>,
        weight_sum: Vec<f64>,
        weighted_z: Vec<f64>,
    }

    let tile_outputs: Vec<TileOut> = (0..tiled.bins.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tiled.tile_bounds(tile, intr);
            let tw = (x1 - x0) as usize;
            let th = (y1 - y0) as usize;
            let count = tw * th;
            let mut rgb = vec![0.0; count * 3];
            let mut weight_sum = vec![0.0; count];
            let mut weighted_z = vec![0.0; count];
            let mut transmittance = vec![1.0f64; count];
            for &si in &tiled.bins[tile] {
                let s = &tiled.splats[si as usize];
                let g = &map.gaussians()[s.idx];
                let cutoff_sq = (config.truncation * s.sigma2d).powi(2);
                let inv_two_var = 1.0 / (2.0 * s.sigma2d * s.sigma2d);
                for py in s.y0.max(y0)..=s.y1.min(y1 - 1) {
                    for px in s.x0.max(x0)..=s.x1.min(x1 - 1) {
                        let p = ((py - y0) as usize) * tw + (px - x0) as usize;
                        if transmittance[p] < config.transmittance_floor {
                            continue;
                        }
                        let dx = px as f64 - s.q[0];
                        let dy = py as f64 - s.q[1];
                        let r_sq = dx * dx + dy * dy;
                        if r_sq > cutoff_sq {
                            continue;
                        }
                        let w = g.opacity * (-r_sq * inv_two_var).exp();
                        let contrib = w * transmittance[p];
                        rgb[p * 3] += g.color[0] * contrib;
                        rgb[p * 3 + 1] += g.color[1] * contrib;
                        rgb[p * 3 + 2] += g.color[2] * contrib;
                        weight_sum[p] += contrib;
                        weighted_z[p] += s.z * contrib;
                        transmittance[p] *= 1.0 - w;
                    }
                }
            }
            TileOut {
                tile,
                rgb,
                weight_sum,
                weighted_z,
            }
        })
        .collect();

    let pixels = intr.pixel_count();
    let width = intr.width as usize;
    let mut rgb = vec![0.0; pixels * 3];
    let mut weight_sum = vec![0.0; pixels];
    let mut weighted_z = vec![0.0; pixels];
    for out in tile_outputs {
        let (x0, x1, y0, y1) = tiled.tile_bounds(out.tile, intr);
        let tw = (x1 - x0) as usize;
        for py in y0..y1 {
            for px in x0..x1 {
                let local = ((py - y0) as usize) * tw + (px - x0) as usize;
                let p = py as usize * width + px as usize;
                rgb[p * 3] = out.rgb[local * 3];
                rgb[p * 3 + 1] = out.rgb[local * 3 + 1];
                rgb[p * 3 + 2] = out.rgb[local * 3 + 2];
                weight_sum[p] = out.weight_sum[local];
                weighted_z[p] = out.weighted_z[local];
            }
        }
    }

    let depth = weight_sum
        .iter()
        .zip(&weighted_z)
        .map(|(w, wz)| wz / w.max(DEPTH_EPS))
        .collect();

    RenderedF64 {
        width: intr.width,
        height: intr.height,
        rgb,
        depth,
        alpha: weight_sum,
        weighted_z,
    }
}

/// Renders color, depth, and accumulated alpha as f32 buffers.
pub fn render(map: &GaussianMap, camera: &RenderCamera, config: &RenderConfig) -> RenderOutput {
    let full = render_f64(map, camera, config);
    RenderOutput {
        width: full.width,
        height: full.height,
        rgb: full.rgb.iter().map(|v| *v as f32).collect(),
        depth: full.depth.iter().map(|v| *v as f32).collect(),
        alpha: full.alpha.iter().map(|v| *v as f32).collect(),
    }
}
