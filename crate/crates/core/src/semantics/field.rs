//! Multi-resolution hashed feature grid with a small perceptron head.
//!
//! Each level is a hashed voxel grid over the configured bounding box, with
//! the base resolution doubling per level. A position is trilinearly
//! interpolated within every level, the per-level features are concatenated,
//! and a two-layer tanh perceptron maps them to the output embedding.
//!
//! The spatial hash is fixed: per-dimension multipliers 1, 2654435761,
//! 805459861 (wrapping u32), XOR-folded, masked to the table size. This
//! keeps serialized fields loading back to identical outputs.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledPoint, SemanticsError};

const CHECKPOINT_MAGIC: &[u8; 4] = b"HFLD";
const CHECKPOINT_VERSION: u16 = 1;
const HASH_P2: u32 = 2_654_435_761;
const HASH_P3: u32 = 805_459_861;

#[derive(Debug, Clone)]
pub struct FieldConfig {
    /// Output embedding width `d_s`.
    pub out_dim: usize,
    pub levels: usize,
    pub features_per_level: usize,
    /// Hash table entries per level; must be a power of two.
    pub table_size: usize,
    /// Grid resolution of level 0; doubles per level.
    pub base_resolution: u32,
    pub hidden_width: usize,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            out_dim: 16,
            levels: 4,
            features_per_level: 4,
            table_size: 1 << 16,
            base_resolution: 16,
            hidden_width: 32,
            bbox_min: Vector3::new(-4.0, -4.0, -4.0),
            bbox_max: Vector3::new(4.0, 4.0, 4.0),
            seed: 0,
        }
    }
}

/// Continuous map from global 3D position to a `d_s`-dim embedding.
#[derive(Debug, Clone)]
pub struct FeatureField {
    config: FieldConfig,
    /// Per level: `table_size * features_per_level` entries.
    grids: Vec<Vec<f64>>,
    /// Hidden x (levels * features_per_level), row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// Out x hidden, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Reusable intermediate buffers for [`FeatureField::eval_into`].
pub struct EvalScratch {
    features: Vec<f64>,
    hidden: Vec<f64>,
}

impl EvalScratch {
    pub fn for_field(field: &FeatureField) -> Self {
        Self {
            features: vec![0.0; field.config.levels * field.config.features_per_level],
            hidden: vec![0.0; field.config.hidden_width],
        }
    }
}

/// Gradients mirroring the field's parameter layout.
pub struct FieldGrads {
    pub grids: Vec<Vec<f64>>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn hash_corner(x: u32, y: u32, z: u32, mask: usize) -> usize {
    let h = x ^ y.wrapping_mul(HASH_P2) ^ z.wrapping_mul(HASH_P3);
    h as usize & mask
}

impl FeatureField {
    pub fn new(config: FieldConfig) -> Self {
        assert!(config.table_size.is_power_of_two(), "table size must be a power of two");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
        // Grid entries start at a moderate scale: the cosine loss is badly
        // conditioned when the output norm is near zero.
        let grids = (0..config.levels)
            .map(|_| {
                (0..config.table_size * config.features_per_level)
                    .map(|_| rng.random_range(-5e-2..5e-2))
                    .collect()
            })
            .collect();
        let in_dim = config.levels * config.features_per_level;
        let w1_scale = 1.0 / (in_dim as f64).sqrt();
        let w1 = (0..config.hidden_width * in_dim)
            .map(|_| rng.random_range(-w1_scale..w1_scale))
            .collect();
        let b1 = vec![0.0; config.hidden_width];
        let w2_scale = 1.0 / (config.hidden_width as f64).sqrt();
        let w2 = (0..config.out_dim * config.hidden_width)
            .map(|_| rng.random_range(-w2_scale..w2_scale))
            .collect();
        let b2 = vec![0.0; config.out_dim];
        Self {
            config,
            grids,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// Trilinear corner lookups for one level: 8 (table index, weight) pairs.
    fn corners(&self, level: usize, x: &Vector3<f64>) -> [(usize, f64); 8] {
        let cfg = &self.config;
        let res = (cfg.base_resolution << level) as f64;
        let mask = cfg.table_size - 1;
        let mut cell = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for d in 0..3 {
            let span = cfg.bbox_max[d] - cfg.bbox_min[d];
            let u = ((x[d] - cfg.bbox_min[d]) / span).clamp(0.0, 1.0);
            let v = u * res;
            let c = v.floor().min(res - 1.0);
            cell[d] = c as u32;
            frac[d] = v - c;
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (i, slot) in out.iter_mut().enumerate() {
            let dx = (i & 1) as u32;
            let dy = ((i >> 1) & 1) as u32;
            let dz = ((i >> 2) & 1) as u32;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            let idx = hash_corner(cell[0] + dx, cell[1] + dy, cell[2] + dz, mask);
            *slot = (idx, wx * wy * wz);
        }
        out
    }

    fn interpolate_into(&self, x: &Vector3<f64>, features: &mut [f64]) {
        let f = self.config.features_per_level;
        features.fill(0.0);
        for level in 0..self.config.levels {
            let corners = self.corners(level, x);
            let grid = &self.grids[level];
            let base = level * f;
            for (idx, w) in corners {
                for k in 0..f {
                    features[base + k] += w * grid[idx * f + k];
                }
            }
        }
    }

    fn head_into(&self, features: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let cfg = &self.config;
        let in_dim = cfg.levels * cfg.features_per_level;
        for h in 0..cfg.hidden_width {
            let mut z = self.b1[h];
            let row = &self.w1[h * in_dim..(h + 1) * in_dim];
            for (wv, feat) in row.iter().zip(features) {
                z += wv * feat;
            }
            hidden[h] = z.tanh();
        }
        for o in 0..cfg.out_dim {
            let mut z = self.b2[o];
            let row = &self.w2[o * cfg.hidden_width..(o + 1) * cfg.hidden_width];
            for (wv, act) in row.iter().zip(hidden.iter()) {
                z += wv * act;
            }
            out[o] = z;
        }
    }

    /// Embedding at a position; out-of-box positions are clamped to the box.
    pub fn eval(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut scratch = EvalScratch::for_field(self);
        let mut out = vec![0.0; self.config.out_dim];
        self.eval_into(x, &mut scratch, &mut out);
        out
    }

    /// Allocation-free evaluation for bulk queries.
    pub fn eval_into(&self, x: &Vector3<f64>, scratch: &mut EvalScratch, out: &mut [f64]) {
        self.interpolate_into(x, &mut scratch.features);
        self.head_into(&scratch.features, &mut scratch.hidden, out);
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            grids: self
                .grids
                .iter()
                .map(|g| vec![0.0; g.len()])
                .collect(),
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Accumulates gradients of a scalar loss with upstream derivative
    /// `d_out = dL/d eval(x)` into `grads`.
    fn backprop(&self, x: &Vector3<f64>, d_out: &[f64], grads: &mut FieldGrads) {
        let cfg = &self.config;
        let in_dim = cfg.levels * cfg.features_per_level;
        let mut features = vec![0.0; in_dim];
        self.interpolate_into(x, &mut features);
        let mut hidden = vec![0.0; cfg.hidden_width];
        let mut out = vec![0.0; cfg.out_dim];
        self.head_into(&features, &mut hidden, &mut out);

        let mut d_hidden = vec![0.0; cfg.hidden_width];
        for o in 0..cfg.out_dim {
            grads.b2[o] += d_out[o];
            for h in 0..cfg.hidden_width {
                grads.w2[o * cfg.hidden_width + h] += d_out[o] * hidden[h];
                d_hidden[h] += d_out[o] * self.w2[o * cfg.hidden_width + h];
            }
        }
        let mut d_features = vec![0.0; in_dim];
        for h in 0..cfg.hidden_width {
            let dz = d_hidden[h] * (1.0 - hidden[h] * hidden[h]);
            grads.b1[h] += dz;
            for i in 0..in_dim {
                grads.w1[h * in_dim + i] += dz * features[i];
                d_features[i] += dz * self.w1[h * in_dim + i];
            }
        }
        let f = cfg.features_per_level;
        for level in 0..cfg.levels {
            let corners = self.corners(level, x);
            let base = level * f;
            for (idx, w) in corners {
                for k in 0..f {
                    grads.grids[level][idx * f + k] += w * d_features[base + k];
                }
            }
        }
    }

    /// Mean cosine-distance loss over the batch, plus its gradients.
    pub fn loss_and_grads(&self, points: &[LabeledPoint]) -> Result<(f64, FieldGrads), SemanticsError> {
        if points.is_empty() {
            return Err(SemanticsError::EmptyBatch);
        }
        let mut grads = self.zero_grads();
        let n = points.len() as f64;
        let mut loss = 0.0;
        for p in points {
            let f = self.eval(&p.position);
            let f_norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let dot: f64 = f.iter().zip(&p.target).map(|(a, b)| a * b).sum();
            let cos = dot / f_norm;
            loss += (1.0 - cos) / n;
            // d(1 - cos)/df = -(t / |f| - (f.t) f / |f|^3)
            let d_out: Vec<f64> = f
                .iter()
                .zip(&p.target)
                .map(|(fi, ti)| (-(ti / f_norm) + dot * fi / (f_norm * f_norm * f_norm)) / n)
                .collect();
            self.backprop(&p.position, &d_out, &mut grads);
        }
        Ok((loss, grads))
    }

    /// One SGD step; returns the pre-step loss. `lr = 0` leaves parameters
    /// untouched.
    ///
    /// Each grid entry is touched by only a handful of batch points while
    /// the head sees every one, so under a batch-mean loss the grids train
    /// at a higher rate ([`GRID_LR_RATIO`] * lr) than the head.
    pub fn train_step(&mut self, points: &[LabeledPoint], lr: f64) -> Result<f64, SemanticsError> {
        /// Grid-entry learning-rate multiplier relative to the head.
        pub const GRID_LR_RATIO: f64 = 1.0;
        let (loss, grads) = self.loss_and_grads(points)?;
        if lr != 0.0 {
            let grid_lr = lr * GRID_LR_RATIO;
            for (grid, g) in self.grids.iter_mut().zip(&grads.grids) {
                for (p, d) in grid.iter_mut().zip(g) {
                    *p -= grid_lr * d;
                }
            }
            for (p, d) in self.w1.iter_mut().zip(&grads.w1) {
                *p -= lr * d;
            }
            for (p, d) in self.b1.iter_mut().zip(&grads.b1) {
                *p -= lr * d;
            }
            for (p, d) in self.w2.iter_mut().zip(&grads.w2) {
                *p -= lr * d;
            }
            for (p, d) in self.b2.iter_mut().zip(&grads.b2) {
                *p -= lr * d;
            }
        }
        Ok(loss)
    }

    #[cfg(test)]
    pub(crate) fn test_grid(&self, level: usize) -> &[f64] {
        &self.grids[level]
    }

    #[cfg(test)]
    pub(crate) fn test_grid_mut(&mut self, level: usize) -> &mut [f64] {
        &mut self.grids[level]
    }

    #[cfg(test)]
    pub(crate) fn test_w1(&self) -> &[f64] {
        &self.w1
    }

    #[cfg(test)]
    pub(crate) fn test_w1_mut(&mut self) -> &mut [f64] {
        &mut self.w1
    }

    #[cfg(test)]
    pub(crate) fn test_w2(&self) -> &[f64] {
        &self.w2
    }

    #[cfg(test)]
    pub(crate) fn test_w2_mut(&mut self) -> &mut [f64] {
        &mut self.w2
    }

    /// Checkpoint layout: header (magic, version u16, d_s u16, L u16, F u16,
    /// T_h u32, base resolution u32) followed by little-endian f32 parameter
    /// blocks in declaration order: per-level grids, then w1, b1, w2, b2.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let cfg = &self.config;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u16::<LittleEndian>(cfg.out_dim as u16)?;
        w.write_u16::<LittleEndian>(cfg.levels as u16)?;
        w.write_u16::<LittleEndian>(cfg.features_per_level as u16)?;
        w.write_u32::<LittleEndian>(cfg.table_size as u32)?;
        w.write_u32::<LittleEndian>(cfg.base_resolution)?;
        let mut write_block = |block: &[f64]| -> std::io::Result<()> {
            for v in block {
                w.write_f32::<LittleEndian>(*v as f32)?;
            }
            Ok(())
        };
        for grid in &self.grids {
            write_block(grid)?;
        }
        write_block(&self.w1)?;
        write_block(&self.b1)?;
        write_block(&self.w2)?;
        write_block(&self.b2)?;
        Ok(())
    }

    /// Loads a checkpoint. The bounding box is scene configuration rather
    /// than a learned parameter and is supplied by the caller; the hidden
    /// width is recovered from the parameter block length.
    pub fn load(path: &Path, bbox_min: Vector3<f64>, bbox_max: Vector3<f64>) -> std::io::Result<Self> {
        let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad field checkpoint magic"));
        }
        if r.read_u16::<LittleEndian>()? != CHECKPOINT_VERSION {
            return Err(bad("unsupported field checkpoint version"));
        }
        let out_dim = r.read_u16::<LittleEndian>()? as usize;
        let levels = r.read_u16::<LittleEndian>()? as usize;
        let features_per_level = r.read_u16::<LittleEndian>()? as usize;
        let table_size = r.read_u32::<LittleEndian>()? as usize;
        let base_resolution = r.read_u32::<LittleEndian>()?;

        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if rest.len() % 4 != 0 {
            return Err(bad("field checkpoint truncated"));
        }
        let total = rest.len() / 4;
        let grid_params = levels * table_size * features_per_level;
        let in_dim = levels * features_per_level;
        if total < grid_params + out_dim {
            return Err(bad("field checkpoint too short"));
        }
        // total = grid + hidden*in + hidden + out*hidden + out
        let hidden_num = total - grid_params - out_dim;
        let hidden_den = in_dim + 1 + out_dim;
        if hidden_num % hidden_den != 0 {
            return Err(bad("field checkpoint block sizes inconsistent"));
        }
        let hidden_width = hidden_num / hidden_den;

        let mut values = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

        let grids = (0..levels)
            .map(|_| take(table_size * features_per_level))
            .collect();
        let w1 = take(hidden_width * in_dim);
        let b1 = take(hidden_width);
        let w2 = take(out_dim * hidden_width);
        let b2 = take(out_dim);

        Ok(Self {
            config: FieldConfig {
                out_dim,
                levels,
                features_per_level,
                table_size,
                base_resolution,
                hidden_width,
                bbox_min,
                bbox_max,
                seed: 0,
            },
            grids,
            w1,
            b1,
            w2,
            b2,
        })
    }
}
