//! Online map optimization.
//!
//! One step samples a batch from the pool, renders each frame at its refined
//! pose, applies the frame's affine color compensation, and takes an SGD
//! step on Gaussian parameters, per-frame pose offsets, per-agent transform
//! corrections, and the affine compensation. Depth supervision uses the
//! frame's depth payload (already in global metric) on valid pixels only.
//!
//! All gradients are analytic, derived from the compositing equations in
//! [`super::render`]; the finite-difference tests hold them to < 1e-3
//! relative error.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::render::{project_splats, render_raw, RenderConfig, RenderedF64, DEPTH_EPS};
use super::{
    AffineColor, AgentPoses, CorrectionParams, GaussianMap, PoseOffset, SplatError, TrainingPool,
    OPACITY_MARGIN, SIGMA_MIN,
};
use crate::frame::{DataFrame, GeometryPayload};
use crate::geometry::{SE3Pose, Sim3Transform};

#[derive(Debug, Clone, Copy)]
pub struct LearningRates {
    pub mean: f64,
    pub sigma: f64,
    pub opacity: f64,
    pub color: f64,
    pub pose: f64,
    pub affine: f64,
    pub agent: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        // Plain SGD on image-mean losses: per-parameter gradients carry a
        // 1/(3HW) factor, so the rates look large.
        Self {
            mean: 3e-1,
            sigma: 1e-1,
            opacity: 3e2,
            color: 3e2,
            pose: 1e-4,
            affine: 1e-2,
            agent: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Weight of the depth L1 term.
    pub lambda_depth: f64,
    /// Translation regularization on pose offsets and corrections.
    pub beta_t: f64,
    /// Rotation regularization on pose offsets and corrections.
    pub beta_r: f64,
    pub render: RenderConfig,
    pub lr: LearningRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lambda_depth: 0.2,
            beta_t: 10.0,
            beta_r: 10.0,
            render: RenderConfig::default(),
            lr: LearningRates::default(),
        }
    }
}

/// Losses measured before the parameter step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub rgb_l1: f64,
    pub depth_l1: f64,
}

/// Everything that parameterizes one frame's loss besides the map itself.
#[derive(Debug, Clone, Copy)]
pub struct FrameContext<'a> {
    pub frame: &'a DataFrame,
    pub offset: PoseOffset,
    pub appearance: AffineColor,
    pub base: Sim3Transform,
    pub correction: CorrectionParams,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub rgb_l1: f64,
    pub depth_l1: f64,
    pub regularization: f64,
    pub total: f64,
    pub has_depth: bool,
}

/// Gradients of one frame's total loss.
#[derive(Debug, Clone)]
pub struct FrameGrads {
    pub d_mean: Vec<Vector3<f64>>,
    pub d_sigma: Vec<f64>,
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
    pub d_offset_theta: Vector3<f64>,
    pub d_offset_delta: Vector3<f64>,
    pub d_affine_a: Matrix3<f64>,
    pub d_affine_b: Vector3<f64>,
    pub d_corr_log_scale: f64,
    pub d_corr_theta: Vector3<f64>,
    pub d_corr_t: Vector3<f64>,
}

impl FrameGrads {
    fn zeros(n: usize) -> Self {
        Self {
            d_mean: vec![Vector3::zeros(); n],
            d_sigma: vec![0.0; n],
            d_opacity: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
            d_offset_theta: Vector3::zeros(),
            d_offset_delta: Vector3::zeros(),
            d_affine_a: Matrix3::zeros(),
            d_affine_b: Vector3::zeros(),
            d_corr_log_scale: 0.0,
            d_corr_theta: Vector3::zeros(),
            d_corr_t: Vector3::zeros(),
        }
    }
}

/// Rodrigues rotation from an axis-angle vector, with a Taylor branch near
/// zero so the map stays smooth where the gradient tests probe it.
pub fn rodrigues(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle_sq = theta.norm_squared();
    let hat = skew(theta);
    if angle_sq < 1e-8 {
        // sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        let a = 1.0 - angle_sq / 6.0;
        let b = 0.5 - angle_sq / 24.0;
        Matrix3::identity() + a * hat + b * (hat * hat)
    } else {
        let angle = angle_sq.sqrt();
        let a = angle.sin() / angle;
        let b = (1.0 - angle.cos()) / angle_sq;
        Matrix3::identity() + a * hat + b * (hat * hat)
    }
}

/// Partial derivatives of the Rodrigues map with respect to each axis-angle
/// component, evaluated at `theta` with `r = rodrigues(theta)`.
pub fn rodrigues_jacobians(theta: &Vector3<f64>, r: &Matrix3<f64>) -> [Matrix3<f64>; 3] {
    let angle_sq = theta.norm_squared();
    let mut out = [Matrix3::zeros(); 3];
    if angle_sq < 1e-14 {
        for i in 0..3 {
            out[i] = skew(&basis(i));
        }
        return out;
    }
    let hat = skew(theta);
    for i in 0..3 {
        let e = basis(i);
        let v = theta.cross(&((Matrix3::identity() - r) * e));
        out[i] = ((theta[i] * hat + skew(&v)) / angle_sq) * r;
    }
    out
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn basis(i: usize) -> Vector3<f64> {
    let mut v = Vector3::zeros();
    v[i] = 1.0;
    v
}

/// Camera transform chain for a refined frame, keeping each intermediate
/// the gradient pass needs.
struct CameraChain {
    /// `R_base * R_local`, constant for the frame.
    p: Matrix3<f64>,
    /// `s_base * R_base * t_local + t_base`, constant for the frame.
    u: Vector3<f64>,
    s_corr: f64,
    r_corr: Matrix3<f64>,
    r_global: Matrix3<f64>,
    t_global: Vector3<f64>,
    r_offset: Matrix3<f64>,
    /// Camera-to-world rotation after all refinements.
    r_c2w: Matrix3<f64>,
    cam_center: Vector3<f64>,
}

fn build_chain(
    local_pose: &SE3Pose,
    base: &Sim3Transform,
    correction: &CorrectionParams,
    offset: &PoseOffset,
) -> CameraChain {
    let r_base = base.rotation.to_matrix();
    let r_local = local_pose.rotation.to_matrix();
    let p = r_base * r_local;
    let u = base.scale * (r_base * local_pose.translation) + base.translation;

    let s_corr = correction.log_scale.exp();
    let r_corr = rodrigues(&correction.theta);
    let r_global = r_corr * p;
    let t_global = s_corr * (r_corr * u) + correction.t;

    let r_offset = rodrigues(&offset.theta);
    let r_c2w = r_global * r_offset;
    let cam_center = t_global + r_global * offset.delta;

    CameraChain {
        p,
        u,
        s_corr,
        r_corr,
        r_global,
        t_global,
        r_offset,
        r_c2w,
        cam_center,
    }
}

/// Camera-to-global pose of a frame after alignment, correction, and its
/// per-frame offset; the pose renders and supervision are evaluated at.
pub fn refined_camera_pose(
    local_pose: &SE3Pose,
    base: &Sim3Transform,
    correction: &CorrectionParams,
    offset: &PoseOffset,
) -> SE3Pose {
    let chain = build_chain(local_pose, base, correction, offset);
    SE3Pose::new(
        crate::geometry::Rotation3::project_matrix(&chain.r_c2w),
        chain.cam_center,
    )
}

struct LossBackward {
    terms: LossTerms,
    /// dL/d rendered rgb, per pixel.
    d_rgb: Vec<Vector3<f64>>,
    /// dL/d S_w (weight sum), per pixel.
    d_weight: Vec<f64>,
    /// dL/d S_wz (depth numerator), per pixel.
    d_weighted_z: Vec<f64>,
    d_affine_a: Matrix3<f64>,
    d_affine_b: Vector3<f64>,
}

/// Image-space part of the loss: affine compensation, rgb L1, depth L1 on
/// valid target pixels, and the pose regularization terms.
fn image_loss(rendered: &RenderedF64, ctx: &FrameContext, cfg: &TrainConfig) -> LossBackward {
    let pixels = rendered.rgb.len() / 3;
    let denom_rgb = (pixels * 3) as f64;
    let mut d_rgb = vec![Vector3::zeros(); pixels];
    let mut d_weight = vec![0.0; pixels];
    let mut d_weighted_z = vec![0.0; pixels];
    let mut d_affine_a = Matrix3::zeros();
    let mut d_affine_b = Vector3::zeros();

    let a_t = ctx.appearance.a.transpose();
    let mut rgb_l1 = 0.0;
    for p in 0..pixels {
        let raw = Vector3::new(rendered.rgb[p * 3], rendered.rgb[p * 3 + 1], rendered.rgb[p * 3 + 2]);
        let out = ctx.appearance.a * raw + ctx.appearance.b;
        let mut d_out = Vector3::zeros();
        for ch in 0..3 {
            let target = ctx.frame.rgb[p * 3 + ch] as f64 / 255.0;
            let resid = out[ch] - target;
            rgb_l1 += resid.abs();
            d_out[ch] = sign(resid) / denom_rgb;
        }
        d_rgb[p] = a_t * d_out;
        d_affine_a += d_out * raw.transpose();
        d_affine_b += d_out;
    }
    rgb_l1 /= denom_rgb;

    let mut depth_l1 = 0.0;
    let mut has_depth = false;
    if let GeometryPayload::Depth(target_depth) = &ctx.frame.payload {
        let valid: Vec<usize> = (0..pixels)
            .filter(|&p| target_depth[p] > 0.0 && target_depth[p].is_finite())
            .collect();
        if !valid.is_empty() {
            has_depth = true;
            let denom = valid.len() as f64;
            for &p in &valid {
                let resid = rendered.depth[p] - target_depth[p] as f64;
                depth_l1 += resid.abs();
                let d_depth = cfg.lambda_depth * sign(resid) / denom;
                let w_floor = rendered.alpha[p].max(DEPTH_EPS);
                d_weighted_z[p] = d_depth / w_floor;
                if rendered.alpha[p] > DEPTH_EPS {
                    d_weight[p] = -d_depth * rendered.weighted_z[p] / (w_floor * w_floor);
                }
            }
            depth_l1 /= denom;
        }
    }

    let reg = cfg.beta_t * (ctx.offset.delta.norm_squared() + ctx.correction.t.norm_squared())
        + cfg.beta_r * (ctx.offset.theta.norm_squared() + ctx.correction.theta.norm_squared())
        + cfg.beta_t * ctx.correction.log_scale * ctx.correction.log_scale;

    let total = rgb_l1 + cfg.lambda_depth * depth_l1 + reg;
    LossBackward {
        terms: LossTerms {
            rgb_l1,
            depth_l1,
            regularization: reg,
            total,
            has_depth,
        },
        d_rgb,
        d_weight,
        d_weighted_z,
        d_affine_a,
        d_affine_b,
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Total loss for one frame at the given parameters. This is the exact
/// function the finite-difference checks probe.
pub fn frame_total_loss(map: &GaussianMap, ctx: &FrameContext, cfg: &TrainConfig) -> LossTerms {
    let chain = build_chain(&ctx.frame.local_pose, &ctx.base, &ctx.correction, &ctx.offset);
    let rendered = render_raw(
        map,
        &chain.r_c2w.transpose(),
        &chain.cam_center,
        &ctx.frame.intrinsics,
        &cfg.render,
    );
    image_loss(&rendered, ctx, cfg).terms
}

/// Loss and analytic gradients for one frame.
pub fn frame_loss_and_grads(
    map: &GaussianMap,
    ctx: &FrameContext,
    cfg: &TrainConfig,
) -> (LossTerms, FrameGrads) {
    let chain = build_chain(&ctx.frame.local_pose, &ctx.base, &ctx.correction, &ctx.offset);
    let intr = &ctx.frame.intrinsics;
    let r_wc = chain.r_c2w.transpose();
    let rendered = render_raw(map, &r_wc, &chain.cam_center, intr, &cfg.render);
    let back = image_loss(&rendered, ctx, cfg);

    let mut grads = FrameGrads::zeros(map.len());
    grads.d_affine_a = back.d_affine_a;
    grads.d_affine_b = back.d_affine_b;

    // Re-walk the compositing in the same tile/front-to-back order as the
    // forward pass, keeping per-pixel running transmittance and the suffix
    // sums of later contributions. Each tile produces per-splat partials in
    // screen space, reduced deterministically afterwards.
    use rayon::prelude::*;
    use super::render::TiledSplats;

    let tiled = TiledSplats::build(
        project_splats(map, &r_wc, &chain.cam_center, intr, &cfg.render),
        intr,
    );
    let width = intr.width as usize;

    // [dq.x, dq.y, d_sigma2d, dz, dc0, dc1, dc2, d_opacity]
    let tile_partials: Vec<Vec<[f64; 8]>> = (0..tiled.bins.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tiled.tile_bounds(tile, intr);
            let tw = (x1 - x0) as usize;
            let th = (y1 - y0) as usize;
            let count = tw * th;
            let mut transmittance = vec![1.0f64; count];
            let mut rem_rgb = vec![Vector3::<f64>::zeros(); count];
            let mut rem_weight = vec![0.0f64; count];
            let mut rem_weighted_z = vec![0.0f64; count];
            for py in y0..y1 {
                for px in x0..x1 {
                    let local = ((py - y0) as usize) * tw + (px - x0) as usize;
                    let p = py as usize * width + px as usize;
                    rem_rgb[local] = Vector3::new(
                        rendered.rgb[p * 3],
                        rendered.rgb[p * 3 + 1],
                        rendered.rgb[p * 3 + 2],
                    );
                    rem_weight[local] = rendered.alpha[p];
                    rem_weighted_z[local] = rendered.weighted_z[p];
                }
            }

            let mut partials = vec![[0.0f64; 8]; tiled.bins[tile].len()];
            for (bin_pos, &si) in tiled.bins[tile].iter().enumerate() {
                let s = &tiled.splats[si as usize];
                let g = &map.gaussians()[s.idx];
                let color = Vector3::new(g.color[0], g.color[1], g.color[2]);
                let cutoff_sq = (cfg.render.truncation * s.sigma2d).powi(2);
                let inv_two_var = 1.0 / (2.0 * s.sigma2d * s.sigma2d);
                let acc = &mut partials[bin_pos];
                for py in s.y0.max(y0)..=s.y1.min(y1 - 1) {
                    for px in s.x0.max(x0)..=s.x1.min(x1 - 1) {
                        let local = ((py - y0) as usize) * tw + (px - x0) as usize;
                        let t_here = transmittance[local];
                        if t_here < cfg.render.transmittance_floor {
                            continue;
                        }
                        let dx = px as f64 - s.q[0];
                        let dy = py as f64 - s.q[1];
                        let r_sq = dx * dx + dy * dy;
                        if r_sq > cutoff_sq {
                            continue;
                        }
                        let gauss = (-r_sq * inv_two_var).exp();
                        let w = g.opacity * gauss;
                        let contrib = w * t_here;

                        rem_rgb[local] -= color * contrib;
                        rem_weight[local] -= contrib;
                        rem_weighted_z[local] -= s.z * contrib;

                        let p = py as usize * width + px as usize;
                        let d_c = back.d_rgb[p];
                        let d_w_sum = back.d_weight[p];
                        let d_wz_sum = back.d_weighted_z[p];

                        let gain = d_c.dot(&color) + d_w_sum + d_wz_sum * s.z;
                        let suffix = d_c.dot(&rem_rgb[local])
                            + d_w_sum * rem_weight[local]
                            + d_wz_sum * rem_weighted_z[local];
                        let d_w = t_here * gain - suffix / (1.0 - w);

                        acc[4] += d_c.x * contrib;
                        acc[5] += d_c.y * contrib;
                        acc[6] += d_c.z * contrib;
                        acc[7] += gauss * d_w;

                        let d_gauss = g.opacity * d_w;
                        let d_r_sq = -inv_two_var * gauss * d_gauss;
                        acc[0] += -2.0 * dx * d_r_sq;
                        acc[1] += -2.0 * dy * d_r_sq;
                        acc[2] += d_gauss * gauss * r_sq / (s.sigma2d * s.sigma2d * s.sigma2d);
                        acc[3] += d_wz_sum * contrib;

                        transmittance[local] = t_here * (1.0 - w);
                    }
                }
            }
            partials
        })
        .collect();

    // Deterministic reduction over tiles into per-splat screen gradients.
    let mut splat_grads = vec![[0.0f64; 8]; tiled.splats.len()];
    for (tile, partials) in tile_partials.iter().enumerate() {
        for (bin_pos, part) in partials.iter().enumerate() {
            let si = tiled.bins[tile][bin_pos] as usize;
            for k in 0..8 {
                splat_grads[si][k] += part[k];
            }
        }
    }

    // Pose-chain accumulators.
    let mut sum_h = Vector3::<f64>::zeros();
    let mut y_outer = Matrix3::<f64>::zeros();
    let mut m_outer = Matrix3::<f64>::zeros();

    for (s, acc) in tiled.splats.iter().zip(&splat_grads) {
        let g = &map.gaussians()[s.idx];
        let acc_dq = Vector2::new(acc[0], acc[1]);
        let acc_dsigma2d = acc[2];
        let acc_dz = acc[3];
        grads.d_color[s.idx][0] += acc[4];
        grads.d_color[s.idx][1] += acc[5];
        grads.d_color[s.idx][2] += acc[6];
        grads.d_opacity[s.idx] += acc[7];

        // Chain screen-space gradients back to camera space.
        let (x, y, z) = (s.x_cam.x, s.x_cam.y, s.x_cam.z);
        let d_x = acc_dq.x * intr.fx / z;
        let d_y = acc_dq.y * intr.fy / z;
        let d_z = -acc_dq.x * intr.fx * x / (z * z) - acc_dq.y * intr.fy * y / (z * z)
            - acc_dsigma2d * intr.fx * g.sigma / (z * z)
            + acc_dz;
        grads.d_sigma[s.idx] += acc_dsigma2d * intr.fx / z;

        let g_cam = Vector3::new(d_x, d_y, d_z);
        grads.d_mean[s.idx] += chain.r_c2w * g_cam;

        // x_cam = R_offset^T * y_int with y_int = R_global^T (mu - t_global) - delta.
        let h = chain.r_offset * g_cam;
        let y_int = chain.r_offset * s.x_cam;
        sum_h += h;
        y_outer += y_int * g_cam.transpose();
        let m = map.gaussians()[s.idx].mean - chain.t_global;
        m_outer += m * (chain.p * h).transpose();
    }

    // Frame pose offset.
    let dr_offset = rodrigues_jacobians(&ctx.offset.theta, &chain.r_offset);
    for i in 0..3 {
        grads.d_offset_theta[i] = frobenius(&dr_offset[i], &y_outer);
    }
    grads.d_offset_delta = -sum_h;

    // Agent correction.
    let dr_corr = rodrigues_jacobians(&ctx.correction.theta, &chain.r_corr);
    let v = chain.r_global * sum_h;
    let corr_mat = m_outer - chain.s_corr * (v * chain.u.transpose());
    for i in 0..3 {
        grads.d_corr_theta[i] = frobenius(&dr_corr[i], &corr_mat);
    }
    grads.d_corr_t = -v;
    grads.d_corr_log_scale = -chain.s_corr * (chain.p.transpose() * chain.u).dot(&sum_h);

    // Regularization.
    grads.d_offset_delta += 2.0 * cfg.beta_t * ctx.offset.delta;
    grads.d_offset_theta += 2.0 * cfg.beta_r * ctx.offset.theta;
    grads.d_corr_t += 2.0 * cfg.beta_t * ctx.correction.t;
    grads.d_corr_theta += 2.0 * cfg.beta_r * ctx.correction.theta;
    grads.d_corr_log_scale += 2.0 * cfg.beta_t * ctx.correction.log_scale;

    (back.terms, grads)
}

fn frobenius(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One SGD step over a sampled batch. Returns batch-mean losses measured
/// before the step. Learning-rate-zero parameter groups are left untouched
/// bit for bit.
pub fn train_step(
    map: &mut GaussianMap,
    pool: &mut TrainingPool,
    agents: &mut AgentPoses,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StepLosses, SplatError> {
    if map.is_empty() {
        return Err(SplatError::EmptyMap);
    }
    let batch = pool.sample_batch(cfg.batch_size, seed)?;
    let n = batch.len() as f64;

    let contexts: Vec<FrameContext> = batch
        .iter()
        .map(|&i| {
            let entry = &pool.entries()[i];
            let agent = entry.frame.agent;
            let base = *agents
                .base(agent)
                .expect("pool entries belong to aligned agents");
            FrameContext {
                frame: &entry.frame,
                offset: entry.offset,
                appearance: entry.appearance,
                base,
                correction: agents.correction(agent),
            }
        })
        .collect();

    let results: Vec<(LossTerms, FrameGrads)> = contexts
        .par_iter()
        .map(|ctx| frame_loss_and_grads(map, ctx, cfg))
        .collect();
    let frame_agents: Vec<u32> = contexts.iter().map(|ctx| ctx.frame.agent).collect();
    drop(contexts);

    let mut losses = StepLosses::default();
    let mut depth_frames = 0usize;
    for (terms, _) in &results {
        losses.rgb_l1 += terms.rgb_l1 / n;
        if terms.has_depth {
            losses.depth_l1 += terms.depth_l1;
            depth_frames += 1;
        }
    }
    if depth_frames > 0 {
        losses.depth_l1 /= depth_frames as f64;
    }

    // Gaussian parameters: batch-mean gradients.
    let lr = &cfg.lr;
    if lr.mean != 0.0 || lr.sigma != 0.0 || lr.opacity != 0.0 || lr.color != 0.0 {
        let count = map.len();
        for k in 0..count {
            let mut d_mean = Vector3::zeros();
            let mut d_sigma = 0.0;
            let mut d_opacity = 0.0;
            let mut d_color = [0.0; 3];
            for (_, g) in &results {
                d_mean += g.d_mean[k];
                d_sigma += g.d_sigma[k];
                d_opacity += g.d_opacity[k];
                for ch in 0..3 {
                    d_color[ch] += g.d_color[k][ch];
                }
            }
            let gauss = &mut map.gaussians_mut()[k];
            if lr.mean != 0.0 {
                gauss.mean -= lr.mean / n * d_mean;
            }
            if lr.sigma != 0.0 && d_sigma != 0.0 {
                gauss.sigma = (gauss.sigma - lr.sigma / n * d_sigma).max(SIGMA_MIN);
            }
            if lr.opacity != 0.0 && d_opacity != 0.0 {
                // Step in logit space to stay inside (0, 1).
                let a = gauss.opacity;
                let g_logit = d_opacity / n * a * (1.0 - a);
                let stepped = sigmoid(logit(a) - lr.opacity * g_logit);
                gauss.opacity = stepped.clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
            }
            if lr.color != 0.0 {
                for ch in 0..3 {
                    if d_color[ch] == 0.0 {
                        continue;
                    }
                    let c = gauss.color[ch].clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
                    let g_logit = d_color[ch] / n * c * (1.0 - c);
                    gauss.color[ch] =
                        sigmoid(logit(c) - lr.color * g_logit).clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
                }
            }
        }
    }

    // Per-frame pose offsets and appearance.
    for (&pool_idx, (_, g)) in batch.iter().zip(&results) {
        let entry = pool.entry_mut(pool_idx);
        if lr.pose != 0.0 {
            entry.offset.theta -= lr.pose / n * g.d_offset_theta;
            entry.offset.delta -= lr.pose / n * g.d_offset_delta;
        }
        if lr.affine != 0.0 {
            let prev_a = entry.appearance.a;
            entry.appearance.a -= lr.affine / n * g.d_affine_a;
            entry.appearance.b -= lr.affine / n * g.d_affine_b;
            // Keep det(A) positive; revert the A step if it would cross zero.
            if entry.appearance.a.determinant() <= 1e-6 {
                entry.appearance.a = prev_a;
            }
        }
    }

    // Per-agent corrections: summed over the frames that touched the agent.
    if lr.agent != 0.0 {
        for (&agent, (_, g)) in frame_agents.iter().zip(&results) {
            let corr = agents.correction_mut(agent);
            corr.log_scale -= lr.agent / n * g.d_corr_log_scale;
            corr.theta -= lr.agent / n * g.d_corr_theta;
            corr.t -= lr.agent / n * g.d_corr_t;
        }
    }

    Ok(losses)
}
