//! Place-descriptor providers.
//!
//! Real place-recognition networks are out of scope; these providers supply
//! interface-compatible descriptors. The synthetic one maps the ground-truth
//! global camera pose through a smooth random-feature projection so that
//! spatially close views score high cosine similarity; the file provider
//! replays precomputed descriptors from a sidecar file.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PlaceDescriptor;
use crate::frame::{DataFrame, FrameId};
use crate::geometry::Sim3Transform;

const SIDECAR_MAGIC: &[u8; 4] = b"HDSC";
const SIDECAR_VERSION: u16 = 1;

pub trait DescriptorProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// Descriptor for one frame; `None` when the provider has nothing for it.
    fn describe(&self, frame: &DataFrame) -> Option<PlaceDescriptor>;
}

#[derive(Debug, Clone)]
pub struct SyntheticProviderConfig {
    pub dim: usize,
    /// Spatial kernel width in meters; similarity decays over this distance.
    pub length_scale: f64,
    /// Meters of positional weight given to one radian of view direction.
    pub orientation_weight: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticProviderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            length_scale: 1.5,
            orientation_weight: 0.75,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Random-Fourier-feature projection of the ground-truth global camera pose.
pub struct SyntheticProvider {
    config: SyntheticProviderConfig,
    /// Projection frequencies, one row of 6 per output dimension.
    omega: Vec<[f64; 6]>,
    phase: Vec<f64>,
    agent_truth: HashMap<u32, Sim3Transform>,
}

impl SyntheticProvider {
    /// `agent_truth` maps each agent to its ground-truth local-to-global
    /// transform, used to recover the global camera pose from local poses.
    pub fn new(config: SyntheticProviderConfig, agent_truth: HashMap<u32, Sim3Transform>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let inv_scale = 1.0 / config.length_scale;
        let omega = (0..config.dim)
            .map(|_| {
                let mut row = [0.0; 6];
                for v in &mut row {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = n * inv_scale;
                }
                row
            })
            .collect();
        let phase = (0..config.dim)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Self {
            config,
            omega,
            phase,
            agent_truth,
        }
    }
}

fn frame_noise_seed(seed: u64, frame: FrameId) -> u64 {
    // splitmix-style mix of (seed, agent, seq)
    let mut x = seed
        .wrapping_add((frame.agent as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(frame.seq.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x
}

impl DescriptorProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn describe(&self, frame: &DataFrame) -> Option<PlaceDescriptor> {
        let truth = self.agent_truth.get(&frame.agent)?;
        let global = truth.apply_to_pose(&frame.local_pose);
        let forward = global.rotation.apply(&Vector3::z()) * self.config.orientation_weight;
        let x = [
            global.translation.x,
            global.translation.y,
            global.translation.z,
            forward.x,
            forward.y,
            forward.z,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(frame_noise_seed(self.config.seed, frame.id()));
        let vector: Vec<f32> = self
            .omega
            .iter()
            .zip(&self.phase)
            .map(|(w, p)| {
                let dot: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                ((dot + p).cos() + noise * self.config.noise_sigma) as f32
            })
            .collect();
        PlaceDescriptor::new(frame.id(), vector)
    }
}

/// Descriptors preloaded from a sidecar file, keyed by frame id.
pub struct FileProvider {
    dim: usize,
    records: HashMap<FrameId, Vec<f32>>,
}

impl FileProvider {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let (dim, records) = read_descriptor_sidecar(path)?;
        Ok(Self {
            dim: dim as usize,
            records: records.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl DescriptorProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn describe(&self, frame: &DataFrame) -> Option<PlaceDescriptor> {
        self.records
            .get(&frame.id())
            .and_then(|v| PlaceDescriptor::new(frame.id(), v.clone()))
    }
}

/// Writes the descriptor sidecar: header (magic, version u16, D_p u16) then
/// records of (agent u32, seq u64, D_p little-endian f32).
pub fn write_descriptor_sidecar(
    path: &Path,
    dim: u16,
    records: &[(FrameId, Vec<f32>)],
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(SIDECAR_MAGIC)?;
    w.write_u16::<LittleEndian>(SIDECAR_VERSION)?;
    w.write_u16::<LittleEndian>(dim)?;
    for (frame, vector) in records {
        assert_eq!(vector.len(), dim as usize, "descriptor dim mismatch");
        w.write_u32::<LittleEndian>(frame.agent)?;
        w.write_u64::<LittleEndian>(frame.seq)?;
        for v in vector {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    w.flush()
}

pub fn read_descriptor_sidecar(path: &Path) -> std::io::Result<(u16, Vec<(FrameId, Vec<f32>)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SIDECAR_MAGIC {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad descriptor sidecar magic",
        ));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != SIDECAR_VERSION {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unsupported descriptor sidecar version {version}"),
        ));
    }
    let dim = r.read_u16::<LittleEndian>()?;
    let mut records = Vec::new();
    loop {
        let agent = match r.read_u32::<LittleEndian>() {
            Ok(v) => v,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let seq = r.read_u64::<LittleEndian>()?;
        let mut vector = vec![0f32; dim as usize];
        r.read_f32_into::<LittleEndian>(&mut vector)?;
        records.push((FrameId::new(agent, seq), vector));
    }
    Ok((dim, records))
}
