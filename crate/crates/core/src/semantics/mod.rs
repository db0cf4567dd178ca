//! Continuous semantic feature field over global 3D space.
//!
//! The field is supervised from labeled point clouds built by re-projecting
//! map-rendered depth together with per-pixel semantic images. Gradient flow
//! stops at the point cloud: training the field never touches the Gaussian
//! map. Queries score map Gaussians by embedding similarity at their means.

mod field;

pub use field::{EvalScratch, FeatureField, FieldConfig, FieldGrads};

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::frame::DataFrame;
use crate::splatmap::{render_f64, GaussianMap, RenderCamera, RenderConfig};

/// Minimum rendered alpha for a pixel to contribute supervision.
pub const ALPHA_CUTOFF: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SemanticsError {
    #[error("frame carries no semantic payload")]
    NoSemanticPayload,
    #[error("empty training batch")]
    EmptyBatch,
}

/// One supervision sample: a global position and its unit-normalized target
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub position: Vector3<f64>,
    pub target: Vec<f64>,
}

/// Re-projects map-rendered depth into labeled 3D points. Pixels need
/// rendered alpha above [`ALPHA_CUTOFF`] and a non-background (non-zero)
/// semantic vector; targets come back unit-normalized. The camera is the
/// frame's refined pose in the global frame.
pub fn build_supervision(
    map: &GaussianMap,
    frame: &DataFrame,
    camera: &RenderCamera,
    render_config: &RenderConfig,
) -> Result<Vec<LabeledPoint>, SemanticsError> {
    let semantic = frame.semantic.as_ref().ok_or(SemanticsError::NoSemanticPayload)?;
    let d_s = frame.semantic_dim as usize;
    let rendered = render_f64(map, camera, render_config);
    let intr = &camera.intrinsics;
    let width = intr.width as usize;

    let mut points = Vec::new();
    for p in 0..intr.pixel_count() {
        if rendered.alpha[p] <= ALPHA_CUTOFF {
            continue;
        }
        let target_raw = &semantic[p * d_s..(p + 1) * d_s];
        let norm = target_raw.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // background
        }
        let d = rendered.depth[p];
        let x = (p % width) as f64;
        let y = (p / width) as f64;
        let p_cam = Vector3::new(
            (x - intr.cx) / intr.fx * d,
            (y - intr.cy) / intr.fy * d,
            d,
        );
        points.push(LabeledPoint {
            position: camera.pose.apply_point(&p_cam),
            target: target_raw.iter().map(|v| *v as f64 / norm).collect(),
        });
    }
    Ok(points)
}

/// Ranks map Gaussians by cosine similarity between the field embedding at
/// their means and the query embedding. Ties break by index ascending;
/// scores are invariant to positive scaling of the query.
pub fn query(
    map: &GaussianMap,
    field: &FeatureField,
    embedding: &[f64],
    top_k: usize,
) -> Vec<(usize, f64)> {
    if top_k == 0 || map.is_empty() {
        return Vec::new();
    }
    let q_norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut scored: Vec<(usize, f64)> = map
        .gaussians()
        .par_iter()
        .enumerate()
        .map_init(
            || (EvalScratch::for_field(field), vec![0.0; field.out_dim()]),
            |(scratch, f), (i, g)| {
                field.eval_into(&g.mean, scratch, f);
                let f_norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let dot: f64 = f.iter().zip(embedding).map(|(a, b)| a * b).sum();
                (i, dot / (f_norm * q_norm))
            },
        )
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(top_k);
    scored
}

/// Label table sidecar: records of (label length-prefixed u16 + utf8 bytes,
/// d_s little-endian f32 vector).
pub fn write_label_table(path: &Path, labels: &[(String, Vec<f32>)]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (label, vector) in labels {
        let bytes = label.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        for v in vector {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    w.flush()
}

pub fn read_label_table(path: &Path, d_s: usize) -> std::io::Result<Vec<(String, Vec<f32>)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    loop {
        let len = match r.read_u16::<LittleEndian>() {
            Ok(v) => v as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let label = String::from_utf8(name)
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad label utf8"))?;
        let mut vector = vec![0f32; d_s];
        r.read_f32_into::<LittleEndian>(&mut vector)?;
        out.push((label, vector));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{FrameId, GeometryPayload, Intrinsics};
    use crate::geometry::SE3Pose;
    use crate::splatmap::Gaussian;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> FieldConfig {
        FieldConfig {
            out_dim: 8,
            levels: 2,
            features_per_level: 2,
            table_size: 1 << 10,
            base_resolution: 4,
            hidden_width: 8,
            bbox_min: Vector3::new(-2.0, -2.0, -2.0),
            bbox_max: Vector3::new(2.0, 2.0, 2.0),
            seed: 11,
        }
    }

    fn unit_target(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn eval_is_deterministic_and_small_at_init() {
        let field = FeatureField::new(FieldConfig::default());
        let x = Vector3::new(0.3, -1.2, 0.8);
        let a = field.eval(&x);
        let b = field.eval(&x);
        assert_eq!(a, b);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1.0, "init output norm {norm}");
    }

    #[test]
    fn eval_is_continuous_along_a_path() {
        let field = FeatureField::new(FieldConfig::default());
        // Lipschitz-style probe: output steps shrink with input steps.
        let start = Vector3::new(-0.5, 0.2, 0.7);
        let dir = Vector3::new(1.0, 0.3, -0.5).normalize();
        let coarse = 1e-2;
        let fine = 1e-5;
        let step_norm = |h: f64| {
            let a = field.eval(&start);
            let b = field.eval(&(start + dir * h));
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let big = step_norm(coarse);
        let small = step_norm(fine);
        assert!(small < big.max(1e-9), "fine step {small} vs coarse {big}");
        assert!(small < 1e-5, "discontinuity suspected: {small}");
    }

    #[test]
    fn same_cell_points_differ_only_by_interpolation() {
        let field = FeatureField::new(toy_config());
        // Two nearby points inside one finest-level cell: outputs differ,
        // but by a bounded amount.
        let a = field.eval(&Vector3::new(0.01, 0.01, 0.01));
        let b = field.eval(&Vector3::new(0.02, 0.02, 0.02));
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff < 1e-2);
    }

    #[test]
    fn field_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut field = FeatureField::new(toy_config());
        // Move away from the tiny random init so tanh inputs are generic.
        let warm: Vec<LabeledPoint> = (0..10)
            .map(|_| LabeledPoint {
                position: Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ),
                target: unit_target(&mut rng, 8),
            })
            .collect();
        for _ in 0..20 {
            field.train_step(&warm, 1e-2).unwrap();
        }

        let points: Vec<LabeledPoint> = (0..5)
            .map(|_| LabeledPoint {
                position: Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ),
                target: unit_target(&mut rng, 8),
            })
            .collect();
        let (_, grads) = field.loss_and_grads(&points).unwrap();

        let h = 1e-4;
        let tol = 1e-3;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);

        // Probe a spread of parameters from every block.
        let loss_of = |f: &FeatureField| f.loss_and_grads(&points).unwrap().0;

        // Grid entries actually touched by the batch.
        let touched: Vec<(usize, usize)> = grads.grids[0]
            .iter()
            .enumerate()
            .filter(|(_, g)| g.abs() > 1e-9)
            .take(10)
            .map(|(i, _)| (0usize, i))
            .collect();
        assert!(!touched.is_empty());
        for (level, i) in touched {
            let mut plus = field.clone();
            plus.test_grid_mut(level)[i] += h;
            let mut minus = field.clone();
            minus.test_grid_mut(level)[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(
                rel(grads.grids[level][i], fd) < tol,
                "grid[{level}][{i}]: analytic {} fd {fd}",
                grads.grids[level][i]
            );
        }
        for i in (0..field.test_w1().len()).step_by(5) {
            let mut plus = field.clone();
            plus.test_w1_mut()[i] += h;
            let mut minus = field.clone();
            minus.test_w1_mut()[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(rel(grads.w1[i], fd) < tol, "w1[{i}]: analytic {} fd {fd}", grads.w1[i]);
        }
        for i in (0..field.test_w2().len()).step_by(7) {
            let mut plus = field.clone();
            plus.test_w2_mut()[i] += h;
            let mut minus = field.clone();
            minus.test_w2_mut()[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(rel(grads.w2[i], fd) < tol, "w2[{i}]: analytic {} fd {fd}", grads.w2[i]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut field = FeatureField::new(toy_config());
        let snapshot = field.clone();
        let points = vec![LabeledPoint {
            position: Vector3::new(0.5, 0.5, 0.5),
            target: unit_target(&mut rng, 8),
        }];
        let loss = field.train_step(&points, 0.0).unwrap();
        assert!(loss.is_finite());
        assert_eq!(field.test_w1(), snapshot.test_w1());
        assert_eq!(field.test_grid(0), snapshot.test_grid(0));
    }

    #[test]
    fn single_point_overfits() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut field = FeatureField::new(toy_config());
        let point = LabeledPoint {
            position: Vector3::new(0.3, -0.4, 0.9),
            target: unit_target(&mut rng, 8),
        };
        for _ in 0..200 {
            field.train_step(std::slice::from_ref(&point), 1e-2).unwrap();
        }
        let f = field.eval(&point.position);
        let f_norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos: f64 = f.iter().zip(&point.target).map(|(a, b)| a * b).sum::<f64>() / f_norm;
        assert!(cos > 0.99, "cosine after overfit {cos}");
    }

    #[test]
    fn loss_non_increasing_on_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut field = FeatureField::new(toy_config());
        let points: Vec<LabeledPoint> = (0..50)
            .map(|_| LabeledPoint {
                position: Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ),
                target: unit_target(&mut rng, 8),
            })
            .collect();
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let loss = field.train_step(&points, 1e-2).unwrap();
            assert!(loss <= last + 1e-9, "loss rose: {last} -> {loss}");
            last = loss;
        }
    }

    #[test]
    fn empty_batch_errors() {
        let mut field = FeatureField::new(toy_config());
        assert_eq!(field.train_step(&[], 1e-2).unwrap_err(), SemanticsError::EmptyBatch);
    }

    fn camera_16() -> RenderCamera {
        RenderCamera {
            intrinsics: Intrinsics {
                fx: 40.0,
                fy: 40.0,
                cx: 8.0,
                cy: 8.0,
                width: 16,
                height: 16,
            },
            pose: SE3Pose::identity(),
        }
    }

    fn semantic_frame(d_s: u16, semantic: Vec<f32>) -> DataFrame {
        let intr = camera_16().intrinsics;
        DataFrame {
            agent: 0,
            seq: 0,
            timestamp_ns: 0,
            local_pose: SE3Pose::identity(),
            intrinsics: intr,
            rgb: vec![0; intr.pixel_count() * 3],
            payload: GeometryPayload::Depth(vec![1.0; intr.pixel_count()]),
            semantic: Some(semantic),
            semantic_dim: d_s,
            sample_count: 0,
        }
    }

    #[test]
    fn supervision_empty_map_yields_no_points() {
        let map = GaussianMap::new();
        let frame = semantic_frame(4, vec![1.0; 16 * 16 * 4]);
        let points =
            build_supervision(&map, &frame, &camera_16(), &RenderConfig::default()).unwrap();
        assert!(points.is_empty());
    }

    #[test]
    fn supervision_requires_semantic_payload() {
        let map = GaussianMap::new();
        let mut frame = semantic_frame(4, vec![1.0; 16 * 16 * 4]);
        frame.semantic = None;
        let err = build_supervision(&map, &frame, &camera_16(), &RenderConfig::default()).unwrap_err();
        assert_eq!(err, SemanticsError::NoSemanticPayload);
    }

    #[test]
    fn supervision_single_gaussian_depth_and_targets() {
        let mut map = GaussianMap::new();
        map.extend([Gaussian::new(
            Vector3::new(0.0, 0.0, 2.0),
            0.5,
            0.95,
            [1.0, 0.0, 0.0],
            FrameId::new(0, 0),
        )]);
        let mut semantic = vec![0.0f32; 16 * 16 * 4];
        for p in 0..16 * 16 {
            semantic[p * 4] = 2.0; // uniform label, non-unit on purpose
        }
        let frame = semantic_frame(4, semantic);
        let points =
            build_supervision(&map, &frame, &camera_16(), &RenderConfig::default()).unwrap();
        assert!(!points.is_empty());
        for p in &points {
            assert_abs_diff_eq!(p.position.z, 2.0, epsilon = 1e-2);
            assert_abs_diff_eq!(p.target[0], 1.0, epsilon = 1e-9);
            let norm = p.target.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn supervision_excludes_background_pixels() {
        let mut map = GaussianMap::new();
        map.extend([Gaussian::new(
            Vector3::new(0.0, 0.0, 2.0),
            0.5,
            0.95,
            [1.0, 0.0, 0.0],
            FrameId::new(0, 0),
        )]);
        // All-zero semantics: everything is background.
        let frame = semantic_frame(4, vec![0.0; 16 * 16 * 4]);
        let points =
            build_supervision(&map, &frame, &camera_16(), &RenderConfig::default()).unwrap();
        assert!(points.is_empty());
    }

    #[test]
    fn query_ranking_invariant_to_query_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let field = FeatureField::new(toy_config());
        let mut map = GaussianMap::new();
        map.extend((0..50).map(|_| {
            Gaussian::new(
                Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ),
                0.05,
                0.5,
                [0.5; 3],
                FrameId::new(0, 0),
            )
        }));
        let q = unit_target(&mut rng, 8);
        let q_scaled: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
        let a = query(&map, &field, &q, 10);
        let b = query(&map, &field, &q_scaled, 10);
        let order_a: Vec<usize> = a.iter().map(|(i, _)| *i).collect();
        let order_b: Vec<usize> = b.iter().map(|(i, _)| *i).collect();
        assert_eq!(order_a, order_b);
        for ((_, sa), (_, sb)) in a.iter().zip(&b) {
            assert_abs_diff_eq!(sa, sb, epsilon = 1e-9);
        }
        assert!(query(&map, &field, &q, 0).is_empty());
    }

    #[test]
    fn checkpoint_reload_reproduces_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut field = FeatureField::new(toy_config());
        let points: Vec<LabeledPoint> = (0..20)
            .map(|_| LabeledPoint {
                position: Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ),
                target: unit_target(&mut rng, 8),
            })
            .collect();
        for _ in 0..30 {
            field.train_step(&points, 1e-2).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.hfld");
        field.save(&path).unwrap();
        let cfg = toy_config();
        let loaded = FeatureField::load(&path, cfg.bbox_min, cfg.bbox_max).unwrap();
        assert_eq!(loaded.config().hidden_width, cfg.hidden_width);

        // Save/load is idempotent: a second roundtrip evaluates bit-equal.
        let path2 = dir.path().join("field2.hfld");
        loaded.save(&path2).unwrap();
        let loaded2 = FeatureField::load(&path2, cfg.bbox_min, cfg.bbox_max).unwrap();
        for _ in 0..20 {
            let x = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let a = loaded.eval(&x);
            let b = loaded2.eval(&x);
            assert_eq!(a, b);
            // And the f32 quantization is the only drift from the source.
            let orig = field.eval(&x);
            for (u, v) in orig.iter().zip(&a) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn label_table_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.bin");
        let labels = vec![
            ("chair".to_string(), vec![0.5f32, -0.5, 0.25, 0.0]),
            ("table".to_string(), vec![0.0f32, 1.0, 0.0, 0.0]),
        ];
        write_label_table(&path, &labels).unwrap();
        let back = read_label_table(&path, 4).unwrap();
        assert_eq!(back, labels);
    }
}

