//! Rotation-aware absolute orientation.
//!
//! Finds the similarity transform `(s, R, t)` minimizing
//!
//! ```text
//!   sum_k ||s R a_k + t - b_k||^2 + eps * sum_k ||R A_k - B_k||_F^2
//! ```
//!
//! over source translations/rotations `(a_k, A_k)` and target
//! translations/rotations `(b_k, B_k)`. The regularizer uses the squared
//! Frobenius norm, which keeps every block update in closed form. There is
//! no joint closed form, so the solver iterates block-coordinate updates:
//! each block step is the exact minimizer for its block, so the objective
//! never increases.

use nalgebra::{Matrix3, Vector3};

use super::{GeometryError, PosePairSet, Rotation3, Sim3Transform};

const MAX_ITERATIONS: usize = 50;
const CONVERGENCE_EPS: f64 = 1e-12;
const SCALE_CLAMP: (f64, f64) = (1e-6, 1e6);
/// Source translations closer together than this carry no scale information.
const COINCIDENT_EPS: f64 = 1e-12;

/// Solver output: the transform plus residual diagnostics.
#[derive(Debug, Clone)]
pub struct OrientationSolution {
    pub transform: Sim3Transform,
    /// RMS of `||s R a_k + t - b_k||`, in target-frame units.
    pub translation_rmse: f64,
    /// RMS geodesic angle between `R A_k` and `B_k`, degrees.
    pub rotation_rmse_deg: f64,
    /// Final value of the objective.
    pub objective: f64,
    /// Objective after each block-coordinate iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// True when source translations were coincident and scale was pinned to 1.
    pub scale_fixed: bool,
}

/// Evaluates the solver objective at a candidate transform. Shared between
/// the iteration loop and external verification.
pub fn orientation_objective(pairs: &PosePairSet, epsilon: f64, t: &Sim3Transform) -> f64 {
    let r = t.rotation.to_matrix();
    let mut obj = 0.0;
    for pair in pairs.pairs() {
        let mapped = t.scale * (r * pair.source.translation) + t.translation;
        obj += (mapped - pair.target.translation).norm_squared();
        let rot_residual = r * pair.source.rotation.to_matrix() - pair.target.rotation.to_matrix();
        obj += epsilon * rot_residual.norm_squared();
    }
    obj
}

pub fn solve_absolute_orientation(
    pairs: &PosePairSet,
    epsilon: f64,
) -> Result<OrientationSolution, GeometryError> {
    if pairs.is_empty() {
        return Err(GeometryError::DegenerateInput);
    }
    let n = pairs.len() as f64;

    let mu_src: Vector3<f64> = pairs
        .pairs()
        .iter()
        .map(|p| p.source.translation)
        .sum::<Vector3<f64>>()
        / n;
    let mu_tgt: Vector3<f64> = pairs
        .pairs()
        .iter()
        .map(|p| p.target.translation)
        .sum::<Vector3<f64>>()
        / n;

    let mut c_t = Matrix3::zeros();
    let mut c_r = Matrix3::zeros();
    let mut src_spread = 0.0;
    let mut max_src_dev: f64 = 0.0;
    for pair in pairs.pairs() {
        let a = pair.source.translation - mu_src;
        let b = pair.target.translation - mu_tgt;
        c_t += b * a.transpose();
        c_r += pair.target.rotation.to_matrix() * pair.source.rotation.to_matrix().transpose();
        src_spread += a.norm_squared();
        max_src_dev = max_src_dev.max(a.norm());
    }

    let scale_fixed = max_src_dev <= COINCIDENT_EPS;

    let mut scale = 1.0;
    let mut rotation;
    let mut translation;
    let mut objective_trace = Vec::new();
    let mut prev_obj = f64::INFINITY;
    let mut iterations = 0;

    loop {
        iterations += 1;

        let m = scale * c_t + epsilon * c_r;
        rotation = Rotation3::project_matrix(&m);

        if !scale_fixed {
            let num = (rotation.to_matrix().transpose() * c_t).trace();
            scale = (num / src_spread).clamp(SCALE_CLAMP.0, SCALE_CLAMP.1);
        }

        translation = mu_tgt - scale * rotation.apply(&mu_src);

        let candidate = Sim3Transform {
            scale,
            rotation,
            translation,
        };
        let obj = orientation_objective(pairs, epsilon, &candidate);
        debug_assert!(
            obj <= prev_obj + CONVERGENCE_EPS,
            "block-coordinate step increased the objective: {prev_obj} -> {obj}"
        );
        objective_trace.push(obj);
        let improved = prev_obj - obj;
        prev_obj = obj;
        if improved < CONVERGENCE_EPS || iterations >= MAX_ITERATIONS {
            break;
        }
    }

    let transform = Sim3Transform {
        scale,
        rotation,
        translation: mu_tgt - scale * rotation.apply(&mu_src),
    };

    let mut trans_sq = 0.0;
    let mut rot_sq = 0.0;
    for pair in pairs.pairs() {
        let mapped = transform.apply_point(&pair.source.translation);
        trans_sq += (mapped - pair.target.translation).norm_squared();
        let ang = transform
            .rotation
            .compose(&pair.source.rotation)
            .angle_to(&pair.target.rotation)
            .to_degrees();
        rot_sq += ang * ang;
    }

    Ok(OrientationSolution {
        transform,
        translation_rmse: (trans_sq / n).sqrt(),
        rotation_rmse_deg: (rot_sq / n).sqrt(),
        objective: prev_obj,
        objective_trace,
        iterations,
        scale_fixed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PosePair, SE3Pose};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> SE3Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
        );
        let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis };
        SE3Pose::new(
            Rotation3::from_axis_angle(axis, rng.random_range(-3.0..3.0)),
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    fn make_pairs(
        truth: &Sim3Transform,
        w: usize,
        rng: &mut impl Rng,
        sigma_t: f64,
    ) -> PosePairSet {
        let pairs = (0..w)
            .map(|_| {
                let source = random_pose(rng);
                let mut target = truth.apply_to_pose(&source);
                if sigma_t > 0.0 {
                    use rand_distr::{Distribution, StandardNormal};
                    let noise = Vector3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    ) * sigma_t;
                    target.translation += noise;
                }
                PosePair { source, target }
            })
            .collect();
        PosePairSet::new(pairs)
    }

    fn known_transform() -> Sim3Transform {
        Sim3Transform::new(
            2.5,
            Rotation3::from_axis_angle(Vector3::z(), 30f64.to_radians()),
            Vector3::new(1.0, -2.0, 0.5),
        )
    }

    #[test]
    fn empty_input_is_degenerate() {
        let err = solve_absolute_orientation(&PosePairSet::default(), 1e-3).unwrap_err();
        assert_eq!(err, GeometryError::DegenerateInput);
    }

    #[test]
    fn identity_on_identical_pose_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for w in [1usize, 2, 16] {
            let poses: Vec<SE3Pose> = (0..w).map(|_| random_pose(&mut rng)).collect();
            let pairs = PosePairSet::from_poses(&poses, &poses);
            let sol = solve_absolute_orientation(&pairs, 1e-3).unwrap();
            assert_abs_diff_eq!(sol.transform.scale, 1.0, epsilon = 1e-9);
            assert!(sol.transform.rotation.angle_to(&Rotation3::identity()) < 1e-9);
            assert_abs_diff_eq!(sol.transform.translation.norm(), 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(sol.translation_rmse, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(sol.rotation_rmse_deg, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn recovers_known_transform_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = known_transform();
        let pairs = make_pairs(&truth, 16, &mut rng, 0.0);
        let sol = solve_absolute_orientation(&pairs, 1e-3).unwrap();
        assert_abs_diff_eq!(sol.transform.scale, truth.scale, epsilon = 1e-6);
        assert!(sol.transform.rotation.angle_to(&truth.rotation) < 1e-6);
        assert_abs_diff_eq!(
            (sol.transform.translation - truth.translation).norm(),
            0.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let truth = crate::geometry::tests::random_sim3(&mut rng);
            let pairs = make_pairs(&truth, 16, &mut rng, 0.01);
            let sol = solve_absolute_orientation(&pairs, 1e-3).unwrap();
            for w in sol.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "objective increased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn coincident_sources_pin_scale_and_still_solve_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spin = Rotation3::from_axis_angle(Vector3::new(1.0, 2.0, -1.0), 0.9);
        let pairs: Vec<PosePair> = (0..8)
            .map(|_| {
                let rot = crate::geometry::tests::random_rotation(&mut rng);
                let source = SE3Pose::new(rot, Vector3::new(1.0, 2.0, 3.0));
                let target = SE3Pose::new(spin.compose(&rot), Vector3::new(-1.0, 0.5, 2.0));
                PosePair { source, target }
            })
            .collect();
        let sol = solve_absolute_orientation(&PosePairSet::new(pairs), 1e-3).unwrap();
        assert!(sol.scale_fixed);
        assert_abs_diff_eq!(sol.transform.scale, 1.0, epsilon = 1e-12);
        assert!(sol.transform.rotation.angle_to(&spin) < 1e-6);
    }

    #[test]
    fn gauge_equivariance_in_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let truth = crate::geometry::tests::random_sim3(&mut rng);
            let pairs = make_pairs(&truth, 16, &mut rng, 0.0);
            let gauge = crate::geometry::tests::random_sim3(&mut rng);
            let shifted = PosePairSet::new(
                pairs
                    .pairs()
                    .iter()
                    .map(|p| PosePair {
                        source: p.source,
                        target: gauge.apply_to_pose(&p.target),
                    })
                    .collect(),
            );
            let base = solve_absolute_orientation(&pairs, 1e-3).unwrap().transform;
            let moved = solve_absolute_orientation(&shifted, 1e-3).unwrap().transform;
            let expected = gauge.compose(&base);
            assert_abs_diff_eq!(moved.scale, expected.scale, epsilon = 1e-6 * expected.scale);
            assert!(moved.rotation.angle_to(&expected.rotation) < 1e-6);
            assert_abs_diff_eq!(
                (moved.translation - expected.translation).norm(),
                0.0,
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn left_invariance_in_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let truth = crate::geometry::tests::random_sim3(&mut rng);
            let pairs = make_pairs(&truth, 16, &mut rng, 0.0);
            let gauge = crate::geometry::tests::random_sim3(&mut rng);
            let shifted = PosePairSet::new(
                pairs
                    .pairs()
                    .iter()
                    .map(|p| PosePair {
                        source: gauge.apply_to_pose(&p.source),
                        target: p.target,
                    })
                    .collect(),
            );
            let base = solve_absolute_orientation(&pairs, 1e-3).unwrap().transform;
            let moved = solve_absolute_orientation(&shifted, 1e-3).unwrap().transform;
            let expected = base.compose(&gauge.inverse());
            assert_abs_diff_eq!(moved.scale, expected.scale, epsilon = 1e-6 * expected.scale);
            assert!(moved.rotation.angle_to(&expected.rotation) < 1e-6);
            assert_abs_diff_eq!(
                (moved.translation - expected.translation).norm(),
                0.0,
                epsilon = 1e-6
            );
        }
    }

    /// Classical scaled-orthogonal-Procrustes closed form, written
    /// independently as a second route for the epsilon = 0 case.
    fn umeyama_closed_form(pairs: &PosePairSet) -> Sim3Transform {
        let n = pairs.len() as f64;
        let mu_a: Vector3<f64> =
            pairs.pairs().iter().map(|p| p.source.translation).sum::<Vector3<f64>>() / n;
        let mu_b: Vector3<f64> =
            pairs.pairs().iter().map(|p| p.target.translation).sum::<Vector3<f64>>() / n;
        let mut h = Matrix3::zeros();
        let mut var_a = 0.0;
        for p in pairs.pairs() {
            let a = p.source.translation - mu_a;
            let b = p.target.translation - mu_b;
            h += b * a.transpose();
            var_a += a.norm_squared();
        }
        let svd = h.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let d = (u * v_t).determinant().signum();
        let s_mat = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        let r = u * s_mat * v_t;
        let sing = svd.singular_values;
        let scale = (sing[0] + sing[1] + d * sing[2]) / var_a;
        let rotation = Rotation3::project_matrix(&r);
        Sim3Transform {
            scale,
            rotation,
            translation: mu_b - scale * rotation.apply(&mu_a),
        }
    }

    #[test]
    fn matches_umeyama_without_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..50 {
            let truth = crate::geometry::tests::random_sim3(&mut rng);
            let pairs = make_pairs(&truth, 8, &mut rng, 0.02);
            let sol = solve_absolute_orientation(&pairs, 0.0).unwrap().transform;
            let reference = umeyama_closed_form(&pairs);
            assert_abs_diff_eq!(sol.scale, reference.scale, epsilon = 1e-9);
            assert!(sol.rotation.angle_to(&reference.rotation) < 1e-9);
            assert_abs_diff_eq!(
                (sol.translation - reference.translation).norm(),
                0.0,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn mirrored_point_sets_yield_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Targets are a mirror image of the sources; the best similarity
        // transform cannot reproduce a reflection, but the estimate must
        // stay in SO(3).
        let pairs: Vec<PosePair> = (0..16)
            .map(|_| {
                let source = random_pose(&mut rng);
                let mut target = source;
                target.translation.x = -target.translation.x;
                PosePair { source, target }
            })
            .collect();
        let sol = solve_absolute_orientation(&PosePairSet::new(pairs), 1e-3).unwrap();
        let r = sol.transform.rotation.to_matrix();
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-9);
    }
}
