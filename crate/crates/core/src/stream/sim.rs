//! Simulated agent fleet.
//!
//! Sensor images are rendered from the ground-truth scene with the same
//! compositing math as the map renderer, then re-expressed in each agent's
//! local frame: poses through the inverse of the agent's true transform,
//! depth divided by its scale. Output goes to a recorded-stream container
//! (`.hamr` wire messages plus descriptor, label, and truth sidecars) or
//! live to a server socket.

use std::collections::HashMap;
use std::io::Write;
use std::net::TcpStream;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{AgentScript, SyntheticScene};
use super::wire::{encode_message, WireMessage};
use crate::correspondence::{
    write_descriptor_sidecar, DescriptorProvider, LocalFeatureProvider, LocalFeatureSet,
    PlaceDescriptor, SyntheticProvider, SyntheticProviderConfig,
};
use crate::frame::{DataFrame, DeviceProfile, GeometryPayload, PayloadKind};
use crate::geometry::Sim3Transform;
use crate::semantics::write_label_table;
use crate::splatmap::{render_f64, GaussianMap, RenderCamera, RenderConfig};

/// Rendered alpha below this marks a depth pixel invalid (0).
pub const DEPTH_VALID_ALPHA: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SimParams {
    /// Points per frame for point-cloud agents.
    pub points_per_frame: usize,
    /// Attach a semantic image every Nth frame (0 = never).
    pub semantic_every: u64,
    pub descriptor: SyntheticProviderConfig,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            points_per_frame: 1024,
            semantic_every: 4,
            descriptor: SyntheticProviderConfig::default(),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct SimStats {
    pub frames: u64,
    pub messages: u64,
    pub bytes_total: u64,
    /// agent -> (bytes, stream seconds); Mbps is informational.
    pub per_agent: HashMap<u32, (u64, f64)>,
}

impl SimStats {
    pub fn mbps(&self, agent: u32) -> f64 {
        match self.per_agent.get(&agent) {
            Some((bytes, secs)) if *secs > 0.0 => *bytes as f64 * 8.0 / 1e6 / secs,
            _ => 0.0,
        }
    }
}

/// One rendered sensor packet in the global frame.
struct SensorRender {
    rgb: Vec<u8>,
    depth_global: Vec<f32>,
    semantic: Option<Vec<f32>>,
}

/// Renders rgb/depth from the ground-truth map; per-pixel semantic vectors
/// come from the object id with the largest compositing contribution.
fn render_sensor(
    map: &GaussianMap,
    object_ids: &[u32],
    id_vectors: &HashMap<u32, Vec<f32>>,
    camera: &RenderCamera,
    semantic_dim: u16,
    want_semantic: bool,
    config: &RenderConfig,
) -> SensorRender {
    let out = render_f64(map, camera, config);
    let pixels = camera.intrinsics.pixel_count();
    let rgb: Vec<u8> = out
        .rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let depth_global: Vec<f32> = (0..pixels)
        .map(|p| {
            if out.alpha[p] > DEPTH_VALID_ALPHA {
                out.depth[p] as f32
            } else {
                0.0
            }
        })
        .collect();

    let semantic = if want_semantic && semantic_dim > 0 {
        let ids = dominant_object_ids(map, object_ids, camera, config, &out.alpha);
        let mut sem = vec![0f32; pixels * semantic_dim as usize];
        for p in 0..pixels {
            if let Some(vec) = id_vectors.get(&ids[p]) {
                sem[p * semantic_dim as usize..(p + 1) * semantic_dim as usize]
                    .copy_from_slice(vec);
            }
        }
        Some(sem)
    } else {
        None
    };

    SensorRender {
        rgb,
        depth_global,
        semantic,
    }
}

/// Object id with the largest `w * T` contribution per pixel; 0 where the
/// pixel has no meaningful coverage.
fn dominant_object_ids(
    map: &GaussianMap,
    object_ids: &[u32],
    camera: &RenderCamera,
    config: &RenderConfig,
    alpha: &[f64],
) -> Vec<u32> {
    use crate::splatmap::render::{project_splats, world_to_camera};
    let intr = &camera.intrinsics;
    let (r_wc, center) = world_to_camera(&camera.pose);
    let splats = project_splats(map, &r_wc, &center, intr, config);
    let pixels = intr.pixel_count();
    let width = intr.width as i64;
    let mut best = vec![(0.0f64, 0u32); pixels];
    let mut transmittance = vec![1.0f64; pixels];
    for s in &splats {
        let g = &map.gaussians()[s.idx];
        let cutoff_sq = (config.truncation * s.sigma2d).powi(2);
        let inv_two_var = 1.0 / (2.0 * s.sigma2d * s.sigma2d);
        for py in s.y0..=s.y1 {
            for px in s.x0..=s.x1 {
                let dx = px as f64 - s.q[0];
                let dy = py as f64 - s.q[1];
                let r_sq = dx * dx + dy * dy;
                if r_sq > cutoff_sq {
                    continue;
                }
                let p = (py * width + px) as usize;
                let w = g.opacity * (-r_sq * inv_two_var).exp();
                let contrib = w * transmittance[p];
                if contrib > best[p].0 {
                    best[p] = (contrib, object_ids[s.idx]);
                }
                transmittance[p] *= 1.0 - w;
            }
        }
    }
    best.iter()
        .enumerate()
        .map(|(p, (_, id))| if alpha[p] > DEPTH_VALID_ALPHA { *id } else { 0 })
        .collect()
}

/// All frames for one agent script, in its local frame and scale.
pub fn generate_agent_frames(
    scene: &SyntheticScene,
    script: &AgentScript,
    params: &SimParams,
) -> Vec<DataFrame> {
    let (map, object_ids) = scene.to_map();
    let id_vectors: HashMap<u32, Vec<f32>> = scene
        .objects
        .iter()
        .zip(&scene.labels)
        .map(|(o, (_, v))| (o.id, v.clone()))
        .collect();
    let truth = script.true_transform.to_transform();
    let inv_truth = truth.inverse();
    let intr = scene.intrinsics();
    let config = RenderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ (script.agent as u64) << 17 ^ 0xa5a5);

    let mut frames = Vec::new();
    for seq in 0..script.frame_count() {
        let t = seq as f64 / script.frame_rate_hz;
        let global_pose = script.trajectory.pose_at(t);
        let want_semantic =
            params.semantic_every > 0 && seq % params.semantic_every == 0 && scene.semantic_dim > 0;
        let sensor = render_sensor(
            &map,
            &object_ids,
            &id_vectors,
            &RenderCamera {
                intrinsics: intr,
                pose: global_pose,
            },
            scene.semantic_dim,
            want_semantic,
            &config,
        );

        let local_pose = inv_truth.apply_to_pose(&global_pose);
        // Local-scale depth: global distances divided by the agent's scale.
        let depth_local: Vec<f32> = sensor
            .depth_global
            .iter()
            .map(|d| (*d as f64 / truth.scale) as f32)
            .collect();

        let payload = match script.payload_kind() {
            PayloadKind::Depth => GeometryPayload::Depth(depth_local),
            PayloadKind::Points => {
                let valid: Vec<usize> = depth_local
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| **d > 0.0)
                    .map(|(i, _)| i)
                    .collect();
                let count = params.points_per_frame.min(valid.len());
                let picks = rand::seq::index::sample(&mut rng, valid.len().max(1), count);
                let mut positions = Vec::with_capacity(count);
                let mut colors = Vec::with_capacity(count);
                for k in picks.iter() {
                    let idx = valid[k];
                    let x = (idx % intr.width as usize) as f64;
                    let y = (idx / intr.width as usize) as f64;
                    let d = depth_local[idx] as f64;
                    let p_cam = Vector3::new(
                        (x - intr.cx) / intr.fx * d,
                        (y - intr.cy) / intr.fy * d,
                        d,
                    );
                    let p_local = local_pose.apply_point(&p_cam);
                    positions.push([p_local.x as f32, p_local.y as f32, p_local.z as f32]);
                    colors.push([
                        sensor.rgb[idx * 3],
                        sensor.rgb[idx * 3 + 1],
                        sensor.rgb[idx * 3 + 2],
                    ]);
                }
                GeometryPayload::Points { positions, colors }
            }
        };

        let semantic_dim = if sensor.semantic.is_some() {
            scene.semantic_dim
        } else {
            0
        };
        frames.push(DataFrame {
            agent: script.agent,
            seq,
            timestamp_ns: ((script.start_delay_s + t) * 1e9) as u64,
            local_pose,
            intrinsics: intr,
            rgb: sensor.rgb,
            payload,
            semantic: sensor.semantic,
            semantic_dim,
            sample_count: 0,
        });
    }
    frames
}

pub fn device_profile(scene: &SyntheticScene, script: &AgentScript) -> DeviceProfile {
    DeviceProfile {
        payload_kind: script.payload_kind(),
        metric: script.metric,
        intrinsics: scene.intrinsics(),
        semantic_dim: scene.semantic_dim,
    }
}

/// Wire messages for the whole fleet, interleaved by timestamp. HELLO
/// arrives at the agent's start delay, BYE just after its last frame.
pub fn fleet_messages(scene: &SyntheticScene, params: &SimParams) -> Vec<(u64, WireMessage)> {
    let mut timeline: Vec<(u64, u8, WireMessage)> = Vec::new();
    for script in &scene.agents {
        let hello_ts = (script.start_delay_s * 1e9) as u64;
        timeline.push((
            hello_ts,
            0,
            WireMessage::Hello {
                agent: script.agent,
                profile: device_profile(scene, script),
            },
        ));
        let mut last_ts = hello_ts;
        for frame in generate_agent_frames(scene, script, params) {
            last_ts = frame.timestamp_ns;
            timeline.push((frame.timestamp_ns, 1, WireMessage::Frame(frame)));
        }
        timeline.push((last_ts + 1, 2, WireMessage::Bye { agent: script.agent }));
    }
    timeline.sort_by_key(|(ts, kind, msg)| (*ts, *kind, msg.agent()));
    timeline.into_iter().map(|(ts, _, msg)| (ts, msg)).collect()
}

/// Paths of one recorded-stream container, sharing a basename.
#[derive(Debug, Clone)]
pub struct RecordingPaths {
    pub stream: PathBuf,
    pub descriptors: PathBuf,
    pub labels: PathBuf,
    pub truth: PathBuf,
}

impl RecordingPaths {
    pub fn for_basename(basename: &Path) -> Self {
        let base = basename.to_string_lossy();
        Self {
            stream: PathBuf::from(format!("{base}.hamr")),
            descriptors: PathBuf::from(format!("{base}.desc")),
            labels: PathBuf::from(format!("{base}.labels")),
            truth: PathBuf::from(format!("{base}.truth.json")),
        }
    }
}

/// Records the fleet to a container on disk. Deterministic for a fixed
/// scene seed.
pub fn simulate_record(
    scene: &SyntheticScene,
    params: &SimParams,
    basename: &Path,
) -> std::io::Result<(RecordingPaths, SimStats)> {
    let paths = RecordingPaths::for_basename(basename);
    let messages = fleet_messages(scene, params);

    let mut stats = SimStats::default();
    let mut stream = std::io::BufWriter::new(std::fs::File::create(&paths.stream)?);
    let provider = SyntheticProvider::new(params.descriptor.clone(), scene.agent_truths());
    let mut descriptor_records = Vec::new();
    for (_, msg) in &messages {
        let bytes = encode_message(msg);
        stream.write_all(&bytes)?;
        stats.messages += 1;
        stats.bytes_total += bytes.len() as u64;
        let entry = stats.per_agent.entry(msg.agent()).or_insert((0, 0.0));
        entry.0 += bytes.len() as u64;
        if let WireMessage::Frame(f) = msg {
            stats.frames += 1;
            if let Some(desc) = provider.describe(f) {
                descriptor_records.push((f.id(), desc.vector().to_vec()));
            }
        }
    }
    stream.flush()?;
    for script in &scene.agents {
        if let Some(entry) = stats.per_agent.get_mut(&script.agent) {
            entry.1 = script.duration_s;
        }
    }

    write_descriptor_sidecar(&paths.descriptors, params.descriptor.dim as u16, &descriptor_records)?;
    write_label_table(&paths.labels, &scene.labels)?;
    scene.save(&paths.truth)?;
    Ok((paths, stats))
}

/// Streams the fleet live to a server, one connection per agent, paced by
/// `delay_multiplier` (1 = real time, 0 = as fast as possible). Returns the
/// total frames sent.
pub fn simulate_live(
    scene: &SyntheticScene,
    params: &SimParams,
    addr: &str,
    delay_multiplier: f64,
) -> std::io::Result<u64> {
    let mut handles = Vec::new();
    for script in scene.agents.clone() {
        let scene = scene.clone();
        let params = params.clone();
        let addr = addr.to_string();
        handles.push(std::thread::spawn(move || -> std::io::Result<u64> {
            let mut conn = TcpStream::connect(&addr)?;
            let start_offset = script.start_delay_s;
            if delay_multiplier > 0.0 {
                std::thread::sleep(std::time::Duration::from_secs_f64(
                    start_offset * delay_multiplier,
                ));
            }
            conn.write_all(&encode_message(&WireMessage::Hello {
                agent: script.agent,
                profile: device_profile(&scene, &script),
            }))?;
            let mut sent = 0u64;
            let mut last_t = start_offset;
            for frame in generate_agent_frames(&scene, &script, &params) {
                let t = frame.timestamp_ns as f64 / 1e9;
                if delay_multiplier > 0.0 && t > last_t {
                    std::thread::sleep(std::time::Duration::from_secs_f64(
                        (t - last_t) * delay_multiplier,
                    ));
                }
                last_t = t;
                conn.write_all(&encode_message(&WireMessage::Frame(frame)))?;
                sent += 1;
            }
            conn.write_all(&encode_message(&WireMessage::Bye {
                agent: script.agent,
            }))?;
            conn.flush()?;
            Ok(sent)
        }));
    }
    let mut total = 0;
    for h in handles {
        total += h.join().expect("sim agent thread")?;
    }
    Ok(total)
}

/// Replays a recorded stream into a socket, preserving inter-frame timing
/// scaled by `delay_multiplier` (0 = flat out). Stops cleanly at the last
/// complete message of a truncated file; returns frames sent.
pub fn replay(file: &Path, delay_multiplier: f64, addr: &str) -> std::io::Result<u64> {
    use super::wire::{WireCodec, WireError};
    let bytes = std::fs::read(file)?;
    let mut conn = TcpStream::connect(addr)?;
    let mut codec = WireCodec::new();
    let mut cursor = std::io::Cursor::new(&bytes);
    let mut frames = 0u64;
    let mut last_ts: Option<u64> = None;
    loop {
        let start = cursor.position() as usize;
        let msg = match codec.decode_from(&mut cursor) {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(WireError::Truncated) => {
                log::warn!("replay: truncated file, stopping at last complete message");
                break;
            }
            Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())),
        };
        let end = cursor.position() as usize;
        if let WireMessage::Frame(f) = &msg {
            if delay_multiplier > 0.0 {
                if let Some(prev) = last_ts {
                    let dt = f.timestamp_ns.saturating_sub(prev) as f64 / 1e9;
                    std::thread::sleep(std::time::Duration::from_secs_f64(dt * delay_multiplier));
                }
            }
            last_ts = Some(f.timestamp_ns);
            frames += 1;
        }
        conn.write_all(&bytes[start..end])?;
    }
    conn.flush()?;
    Ok(frames)
}

/// Landmark-based local features from ground truth: a fixed set of scene
/// points with seeded descriptors, projected into each frame's true camera.
/// Overlapping views share landmarks and therefore match.
pub struct SyntheticFeatureProvider {
    landmarks: Vec<(Vector3<f64>, Vec<f32>)>,
    agent_truth: HashMap<u32, Sim3Transform>,
    descriptor_dim: usize,
}

impl SyntheticFeatureProvider {
    pub fn from_scene(scene: &SyntheticScene, num_landmarks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed_beef);
        let object_points: Vec<&super::scene::SceneGaussian> = scene
            .gaussians
            .iter()
            .filter(|g| g.object_id != 0)
            .collect();
        let count = num_landmarks.min(object_points.len());
        let picks = rand::seq::index::sample(&mut rng, object_points.len().max(1), count);
        let dim = 32;
        let landmarks = picks
            .iter()
            .map(|i| {
                let g = object_points[i];
                let desc: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (
                    Vector3::new(g.position[0], g.position[1], g.position[2]),
                    desc,
                )
            })
            .collect();
        Self {
            landmarks,
            agent_truth: scene.agent_truths(),
            descriptor_dim: dim,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }
}

impl LocalFeatureProvider for SyntheticFeatureProvider {
    fn features(&self, frame: &DataFrame) -> LocalFeatureSet {
        let Some(truth) = self.agent_truth.get(&frame.agent) else {
            return LocalFeatureSet::default();
        };
        let global = truth.apply_to_pose(&frame.local_pose);
        let r_wc = global.rotation.to_matrix().transpose();
        let intr = &frame.intrinsics;
        let mut keypoints = Vec::new();
        let mut descriptors = Vec::new();
        for (pos, desc) in &self.landmarks {
            let cam = r_wc * (pos - global.translation);
            if cam.z <= 0.1 {
                continue;
            }
            let u = intr.fx * cam.x / cam.z + intr.cx;
            let v = intr.fy * cam.y / cam.z + intr.cy;
            if u < 0.0 || v < 0.0 || u >= intr.width as f64 || v >= intr.height as f64 {
                continue;
            }
            keypoints.push([u as f32, v as f32]);
            descriptors.push(desc.clone());
        }
        LocalFeatureSet::new(intr.width, intr.height, keypoints, descriptors)
            .unwrap_or_default()
    }
}

/// Descriptor provider facade used by the server: synthetic from truth, or
/// preloaded from the descriptor sidecar.
pub enum Descriptors {
    Synthetic(SyntheticProvider),
    File(crate::correspondence::FileProvider),
}

impl DescriptorProvider for Descriptors {
    fn dim(&self) -> usize {
        match self {
            Descriptors::Synthetic(p) => p.dim(),
            Descriptors::File(p) => p.dim(),
        }
    }

    fn describe(&self, frame: &DataFrame) -> Option<PlaceDescriptor> {
        match self {
            Descriptors::Synthetic(p) => p.describe(frame),
            Descriptors::File(p) => p.describe(frame),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::scene::SceneParams;

    fn small_scene() -> SyntheticScene {
        SyntheticScene::generate(&SceneParams {
            num_agents: 1,
            num_objects: 3,
            gaussians_per_object: 30,
            background_gaussians: 60,
            image_size: 32,
            duration_s: 10.0,
            frame_rate_hz: 1.0,
            ..Default::default()
        })
    }

    #[test]
    fn frame_counts_match_script() {
        let scene = small_scene();
        let params = SimParams::default();
        let msgs = fleet_messages(&scene, &params);
        let frames = msgs
            .iter()
            .filter(|(_, m)| matches!(m, WireMessage::Frame(_)))
            .count();
        assert_eq!(frames, 10);
        let hellos = msgs
            .iter()
            .filter(|(_, m)| matches!(m, WireMessage::Hello { .. }))
            .count();
        let byes = msgs
            .iter()
            .filter(|(_, m)| matches!(m, WireMessage::Bye { .. }))
            .count();
        assert_eq!(hellos, 1);
        assert_eq!(byes, 1);
    }

    #[test]
    fn scaled_agent_emits_scaled_depth() {
        let mut scene = SyntheticScene::generate(&SceneParams {
            num_agents: 2,
            num_objects: 3,
            gaussians_per_object: 30,
            background_gaussians: 60,
            image_size: 32,
            duration_s: 3.0,
            frame_rate_hz: 1.0,
            ..Default::default()
        });
        // Pin agent 1's scale to exactly 2 for the check.
        let mut t = scene.agents[1].true_transform.to_transform();
        t.scale = 2.0;
        scene.agents[1].true_transform = super::super::scene::Sim3Record::from(&t);
        // Same trajectory as agent 0 so renders align.
        scene.agents[1].trajectory = scene.agents[0].trajectory.clone();
        scene.agents[1].start_delay_s = 0.0;

        let params = SimParams::default();
        let f0 = generate_agent_frames(&scene, &scene.agents[0], &params);
        let f1 = generate_agent_frames(&scene, &scene.agents[1], &params);
        let (GeometryPayload::Depth(d0), GeometryPayload::Depth(d1)) =
            (&f0[0].payload, &f1[0].payload)
        else {
            panic!("expected depth payloads");
        };
        let mut checked = 0;
        for (a, b) in d0.iter().zip(d1) {
            if *a > 0.0 && *b > 0.0 {
                assert!((b * 2.0 - a).abs() < 1e-3, "{b} * 2 != {a}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn recording_is_deterministic() {
        let scene = small_scene();
        let params = SimParams::default();
        let dir = tempfile::tempdir().unwrap();
        let (p1, s1) = simulate_record(&scene, &params, &dir.path().join("a")).unwrap();
        let (p2, s2) = simulate_record(&scene, &params, &dir.path().join("b")).unwrap();
        assert_eq!(
            std::fs::read(&p1.stream).unwrap(),
            std::fs::read(&p2.stream).unwrap()
        );
        assert_eq!(
            std::fs::read(&p1.descriptors).unwrap(),
            std::fs::read(&p2.descriptors).unwrap()
        );
        assert_eq!(s1.frames, s2.frames);
        assert!(s1.mbps(0) > 0.0);
    }

    #[test]
    fn overlapping_views_share_features() {
        let scene = small_scene();
        let provider = SyntheticFeatureProvider::from_scene(&scene, 200, 1);
        let params = SimParams::default();
        let frames = generate_agent_frames(&scene, &scene.agents[0], &params);
        let a = provider.features(&frames[0]);
        let b = provider.features(&frames[1]);
        assert!(a.len() > 20, "few features: {}", a.len());
        let ratio = crate::correspondence::match_ratio(&a, &b, 0.9);
        assert!(ratio > 0.25, "adjacent views should verify, got {ratio}");
    }
}
