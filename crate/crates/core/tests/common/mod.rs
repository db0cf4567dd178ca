//! Shared helpers for integration and acceptance tests: the brute-force
//! absolute-orientation oracle, test-instance generators, and an offline
//! training harness mirroring the server's schedule.

#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use splatfuse::geometry::{
    orientation_objective, PosePair, PosePairSet, Rotation3, SE3Pose, Sim3Transform,
};
use splatfuse::semantics::{build_supervision, FeatureField};
use splatfuse::splatmap::{
    refined_camera_pose, spawn_from_frame, train_step, AgentPoses, GaussianMap, RenderCamera,
    StepLosses, TrainConfig, TrainingPool,
};
use splatfuse::stream::{generate_agent_frames, is_holdout, SimParams, SyntheticScene};

pub fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0f64),
    );
    let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
    Rotation3::from_axis_angle(axis, rng.random_range(-3.0..3.0))
}

pub fn random_sim3(rng: &mut impl Rng) -> Sim3Transform {
    Sim3Transform::new(
        rng.random_range(0.3..3.0),
        random_rotation(rng),
        Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ),
    )
}

pub fn random_pose(rng: &mut impl Rng) -> SE3Pose {
    SE3Pose::new(
        random_rotation(rng),
        Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ),
    )
}

/// Pose pairs generated by a known transform plus optional noise on the
/// targets: translation sigma in meters, rotation sigma in degrees.
pub fn noisy_pairs(
    truth: &Sim3Transform,
    w: usize,
    sigma_t: f64,
    sigma_r_deg: f64,
    rng: &mut impl Rng,
) -> PosePairSet {
    let pairs = (0..w)
        .map(|_| {
            let source = random_pose(rng);
            let mut target = truth.apply_to_pose(&source);
            if sigma_t > 0.0 {
                target.translation += Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ) * sigma_t;
            }
            if sigma_r_deg > 0.0 {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                );
                let axis = if axis.norm() < 1e-6 { Vector3::y() } else { axis };
                let ang: f64 = StandardNormal.sample(rng);
                let spin = Rotation3::from_axis_angle(axis, ang * sigma_r_deg.to_radians());
                target.rotation = spin.compose(&target.rotation);
            }
            PosePair { source, target }
        })
        .collect();
    PosePairSet::new(pairs)
}

fn params_to_transform(p: &[f64; 7]) -> Option<Sim3Transform> {
    if p[0] <= 1e-6 || !p[0].is_finite() {
        return None;
    }
    let theta = Vector3::new(p[1], p[2], p[3]);
    let angle = theta.norm();
    let rotation = if angle < 1e-12 {
        Rotation3::identity()
    } else {
        Rotation3::from_axis_angle(theta / angle, angle)
    };
    Some(Sim3Transform::new(
        p[0],
        rotation,
        Vector3::new(p[4], p[5], p[6]),
    ))
}

fn oracle_objective(pairs: &PosePairSet, epsilon: f64, p: &[f64; 7]) -> f64 {
    match params_to_transform(p) {
        Some(t) => orientation_objective(pairs, epsilon, &t),
        None => f64::INFINITY,
    }
}

/// Nelder-Mead over (s, axis-angle, t).
fn nelder_mead(
    pairs: &PosePairSet,
    epsilon: f64,
    start: [f64; 7],
    iterations: usize,
) -> ([f64; 7], f64) {
    const N: usize = 7;
    let f = |p: &[f64; 7]| oracle_objective(pairs, epsilon, p);

    let mut simplex: Vec<([f64; 7], f64)> = Vec::with_capacity(N + 1);
    simplex.push((start, f(&start)));
    for i in 0..N {
        let mut v = start;
        let step = if v[i].abs() > 0.1 { v[i] * 0.15 } else { 0.1 };
        v[i] += step;
        simplex.push((v, f(&v)));
    }

    for _ in 0..iterations {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[N].1;
        if (worst - best).abs() < 1e-14 * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = [0.0; 7];
        for s in &simplex[..N] {
            for i in 0..N {
                centroid[i] += s.0[i] / N as f64;
            }
        }
        let mut reflect = [0.0; 7];
        for i in 0..N {
            reflect[i] = centroid[i] + (centroid[i] - simplex[N].0[i]);
        }
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let mut expand = [0.0; 7];
            for i in 0..N {
                expand[i] = centroid[i] + 2.0 * (centroid[i] - simplex[N].0[i]);
            }
            let fe = f(&expand);
            simplex[N] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (reflect, fr);
        } else {
            let mut contract = [0.0; 7];
            for i in 0..N {
                contract[i] = centroid[i] + 0.5 * (simplex[N].0[i] - centroid[i]);
            }
            let fc = f(&contract);
            if fc < simplex[N].1 {
                simplex[N] = (contract, fc);
            } else {
                let best_v = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    for i in 0..N {
                        s.0[i] = best_v[i] + 0.5 * (s.0[i] - best_v[i]);
                    }
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    simplex[0]
}

/// Brute-force oracle: random-restart nonlinear minimization of the Eq-style
/// objective over (s, axis-angle, t). Independent of the closed-form solver.
pub fn brute_force_oracle(
    pairs: &PosePairSet,
    epsilon: f64,
    restarts: usize,
    seed: u64,
) -> (Sim3Transform, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<([f64; 7], f64)> = None;
    for _ in 0..restarts {
        let start = [
            (rng.random_range(-1.2f64..1.2)).exp(),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ];
        let (p, obj) = nelder_mead(pairs, epsilon, start, 150);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((p, obj));
        }
    }
    let (p, obj) = best.expect("at least one restart");
    (params_to_transform(&p).expect("best restart is valid"), obj)
}

/// Offline training harness mirroring the server's schedule: frames ingest
/// in timestamp order (holdouts skipped), `steps_per_frame` optimizer steps
/// follow each ingest, then a post-stream budget. Field training interleaves
/// at the configured ratio when semantic frames exist.
pub struct OfflineRun {
    pub map: GaussianMap,
    pub pool: TrainingPool,
    pub agents: AgentPoses,
    pub field: Option<FeatureField>,
    pub losses: Vec<StepLosses>,
    pub steps: u64,
}

pub struct OfflineParams {
    pub spawn_per_frame: usize,
    pub steps_per_frame: u32,
    pub post_steps: u32,
    pub holdout_n: u64,
    pub seed: u64,
    pub train: TrainConfig,
    pub field: Option<FeatureField>,
    pub field_interleave: u64,
    pub field_lr: f64,
    pub field_batch: usize,
}

pub fn offline_run(
    scene: &SyntheticScene,
    sim_params: &SimParams,
    transforms: &HashMap<u32, Sim3Transform>,
    params: OfflineParams,
) -> OfflineRun {
    let mut frames = Vec::new();
    for script in &scene.agents {
        for frame in generate_agent_frames(scene, script, sim_params) {
            frames.push(frame);
        }
    }
    frames.sort_by_key(|f| (f.timestamp_ns, f.agent, f.seq));

    let mut run = OfflineRun {
        map: GaussianMap::new(),
        pool: TrainingPool::new(),
        agents: AgentPoses::default(),
        field: params.field,
        losses: Vec::new(),
        steps: 0,
    };
    for (agent, t) in transforms {
        run.agents.set_base(*agent, *t);
    }

    let mut semantic_entries: Vec<usize> = Vec::new();
    let mut field_steps = 0u64;
    let mut do_step = |run: &mut OfflineRun, semantic_entries: &[usize]| {
        if run.map.is_empty() || run.pool.is_empty() {
            return;
        }
        let seed = mix_seed(params.seed ^ 0x7ead, run.steps, 0);
        if let Ok(losses) = train_step(&mut run.map, &mut run.pool, &mut run.agents, &params.train, seed)
        {
            run.losses.push(losses);
            run.steps += 1;
            if params.field_interleave > 0 && run.steps % params.field_interleave == 0 {
                if let (Some(field), false) = (run.field.as_mut(), semantic_entries.is_empty()) {
                    let idx = semantic_entries[field_steps as usize % semantic_entries.len()];
                    let entry = &run.pool.entries()[idx];
                    let base = run.agents.base(entry.frame.agent).copied().unwrap();
                    let correction = run.agents.correction(entry.frame.agent);
                    let camera = RenderCamera {
                        intrinsics: entry.frame.intrinsics,
                        pose: refined_camera_pose(
                            &entry.frame.local_pose,
                            &base,
                            &correction,
                            &entry.offset,
                        ),
                    };
                    if let Ok(mut points) =
                        build_supervision(&run.map, &entry.frame, &camera, &params.train.render)
                    {
                        if !points.is_empty() {
                            let batch = params.field_batch.min(points.len());
                            if batch < points.len() {
                                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                                    params.seed ^ 0xf1e1d,
                                    field_steps,
                                    0,
                                ));
                                let picks = rand::seq::index::sample(&mut rng, points.len(), batch);
                                points = picks.iter().map(|i| points[i].clone()).collect();
                            }
                            let _ = field.train_step(&points, params.field_lr);
                            field_steps += 1;
                        }
                    }
                }
            }
        }
    };

    for frame in frames {
        if is_holdout(frame.seq, params.holdout_n) {
            continue;
        }
        let t = transforms[&frame.agent];
        let seed = mix_seed(params.seed, frame.agent as u64, frame.seq);
        run.map
            .extend(spawn_from_frame(&frame, &t, params.spawn_per_frame, seed));
        let has_semantic = frame.semantic.is_some();
        run.pool.insert(frame, t.scale);
        if has_semantic {
            semantic_entries.push(run.pool.len() - 1);
        }
        for _ in 0..params.steps_per_frame {
            do_step(&mut run, &semantic_entries);
        }
    }
    for _ in 0..params.post_steps {
        do_step(&mut run, &semantic_entries);
    }
    run
}

pub fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_add(b.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(c.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 29;
    x
}
