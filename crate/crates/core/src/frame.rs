//! Sensor data frames shared by the ingestion, alignment, and mapping paths.

use crate::geometry::SE3Pose;
use thiserror::Error;

/// Identifies one frame within the whole deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameId {
    pub agent: u32,
    pub seq: u64,
}

impl FrameId {
    pub fn new(agent: u32, seq: u64) -> Self {
        Self { agent, seq }
    }
}

/// Pinhole intrinsics. Pixel coordinates are indexed so that pixel `(x, y)`
/// sits at exactly `(x, y)` in projection space (no half-pixel offset).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0
    }
}

/// What kind of geometric payload a device emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Depth,
    Points,
}

/// Geometric payload of one frame: a depth image (meters in the agent's
/// local scale, 0 = invalid) or a colored point list in the local frame.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometryPayload {
    Depth(Vec<f32>),
    Points {
        positions: Vec<[f32; 3]>,
        colors: Vec<[u8; 3]>,
    },
}

impl GeometryPayload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            GeometryPayload::Depth(_) => PayloadKind::Depth,
            GeometryPayload::Points { .. } => PayloadKind::Points,
        }
    }
}

/// Per-device static description exchanged at session start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceProfile {
    pub payload_kind: PayloadKind,
    /// True when the device's SLAM poses are already metric.
    pub metric: bool,
    pub intrinsics: Intrinsics,
    /// Semantic embedding width carried per pixel; 0 = no semantics.
    pub semantic_dim: u16,
}

/// One timestamped sensor packet.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFrame {
    pub agent: u32,
    pub seq: u64,
    pub timestamp_ns: u64,
    /// Camera-to-local pose reported by the device's own SLAM.
    pub local_pose: SE3Pose,
    pub intrinsics: Intrinsics,
    /// Row-major H x W x 3 bytes.
    pub rgb: Vec<u8>,
    pub payload: GeometryPayload,
    /// Row-major H x W x semantic_dim values, if present.
    pub semantic: Option<Vec<f32>>,
    pub semantic_dim: u16,
    /// Number of times the training pool has drawn this frame.
    pub sample_count: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("intrinsics must be positive and image dimensions non-zero")]
    BadIntrinsics,
    #[error("rgb buffer size {got} does not match {expected}")]
    BadRgbSize { expected: usize, got: usize },
    #[error("depth buffer size {got} does not match {expected}")]
    BadDepthSize { expected: usize, got: usize },
    #[error("point payload positions/colors length mismatch")]
    BadPointSize,
    #[error("semantic buffer size {got} does not match {expected}")]
    BadSemanticSize { expected: usize, got: usize },
}

impl DataFrame {
    pub fn id(&self) -> FrameId {
        FrameId::new(self.agent, self.seq)
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if !self.intrinsics.is_valid() {
            return Err(FrameError::BadIntrinsics);
        }
        let pixels = self.intrinsics.pixel_count();
        if self.rgb.len() != pixels * 3 {
            return Err(FrameError::BadRgbSize {
                expected: pixels * 3,
                got: self.rgb.len(),
            });
        }
        match &self.payload {
            GeometryPayload::Depth(d) => {
                if d.len() != pixels {
                    return Err(FrameError::BadDepthSize {
                        expected: pixels,
                        got: d.len(),
                    });
                }
            }
            GeometryPayload::Points { positions, colors } => {
                if positions.len() != colors.len() {
                    return Err(FrameError::BadPointSize);
                }
            }
        }
        if let Some(sem) = &self.semantic {
            let expected = pixels * self.semantic_dim as usize;
            if sem.len() != expected {
                return Err(FrameError::BadSemanticSize {
                    expected,
                    got: sem.len(),
                });
            }
        }
        Ok(())
    }
}
