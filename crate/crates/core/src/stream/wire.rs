//! Wire protocol.
//!
//! Every message is framed as magic `HAMR`, type u8, body length u32, body;
//! all multi-byte values little-endian. HELLO carries the device profile,
//! FRAME one sensor packet (sizes fixed by the sender's HELLO), BYE closes
//! the session. Decoding FRAME therefore requires the sender's profile; the
//! codec tracks profiles from the HELLOs it has seen.

use std::collections::HashMap;
use std::io::Read;

use byteorder::{LittleEndian, ReadBytesExt};
use nalgebra::Vector3;
use thiserror::Error;

use crate::frame::{DataFrame, DeviceProfile, GeometryPayload, Intrinsics, PayloadKind};
use crate::geometry::{Rotation3, SE3Pose};

pub const WIRE_MAGIC: &[u8; 4] = b"HAMR";
const TYPE_HELLO: u8 = 1;
const TYPE_FRAME: u8 = 2;
const TYPE_BYE: u8 = 3;
const FLAG_POINTS: u8 = 0b0000_0001;
const FLAG_SEMANTIC: u8 = 0b0000_0010;
/// Sanity cap on declared body sizes (64 MiB).
const MAX_BODY: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("declared body length {declared} does not match content ({expected})")]
    LengthMismatch { declared: u32, expected: u32 },
    #[error("frame from unknown agent {0}")]
    UnknownAgent(u32),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("stream truncated mid-message")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello { agent: u32, profile: DeviceProfile },
    Frame(DataFrame),
    Bye { agent: u32 },
}

impl WireMessage {
    pub fn agent(&self) -> u32 {
        match self {
            WireMessage::Hello { agent, .. } => *agent,
            WireMessage::Frame(f) => f.agent,
            WireMessage::Bye { agent } => *agent,
        }
    }
}

fn payload_kind_byte(kind: PayloadKind) -> u8 {
    match kind {
        PayloadKind::Depth => 0,
        PayloadKind::Points => 1,
    }
}

fn encode_hello(agent: u32, profile: &DeviceProfile, out: &mut Vec<u8>) {
    out.extend_from_slice(&agent.to_le_bytes());
    out.push(payload_kind_byte(profile.payload_kind));
    out.push(profile.metric as u8);
    let i = &profile.intrinsics;
    for v in [
        i.fx as f32,
        i.fy as f32,
        i.cx as f32,
        i.cy as f32,
        i.width as f32,
        i.height as f32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(i.width as u16).to_le_bytes());
    out.extend_from_slice(&(i.height as u16).to_le_bytes());
    out.extend_from_slice(&profile.semantic_dim.to_le_bytes());
}

fn encode_frame(f: &DataFrame, out: &mut Vec<u8>) {
    out.extend_from_slice(&f.agent.to_le_bytes());
    out.extend_from_slice(&f.seq.to_le_bytes());
    out.extend_from_slice(&f.timestamp_ns.to_le_bytes());
    let (qw, qx, qy, qz) = f.local_pose.rotation.wxyz();
    let t = f.local_pose.translation;
    for v in [qw, qx, qy, qz, t.x, t.y, t.z] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut flags = 0u8;
    if f.payload.kind() == PayloadKind::Points {
        flags |= FLAG_POINTS;
    }
    if f.semantic.is_some() {
        flags |= FLAG_SEMANTIC;
    }
    out.push(flags);
    out.extend_from_slice(&f.rgb);
    match &f.payload {
        GeometryPayload::Depth(d) => {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GeometryPayload::Points { positions, colors } => {
            out.extend_from_slice(&(positions.len() as u32).to_le_bytes());
            for p in positions {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            for c in colors {
                out.extend_from_slice(c);
            }
        }
    }
    if let Some(sem) = &f.semantic {
        for v in sem {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Encodes one message with its envelope.
pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let mut body = Vec::new();
    let ty = match msg {
        WireMessage::Hello { agent, profile } => {
            encode_hello(*agent, profile, &mut body);
            TYPE_HELLO
        }
        WireMessage::Frame(frame) => {
            debug_assert!(frame.validate().is_ok(), "encoding an invalid frame");
            encode_frame(frame, &mut body);
            TYPE_FRAME
        }
        WireMessage::Bye { agent } => {
            body.extend_from_slice(&agent.to_le_bytes());
            TYPE_BYE
        }
    };
    let mut out = Vec::with_capacity(9 + body.len());
    out.extend_from_slice(WIRE_MAGIC);
    out.push(ty);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Stateful decoder: HELLOs register the device profile that later FRAMEs
/// from the same agent are decoded against.
#[derive(Debug, Default)]
pub struct WireCodec {
    profiles: HashMap<u32, DeviceProfile>,
}

impl WireCodec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn profile(&self, agent: u32) -> Option<&DeviceProfile> {
        self.profiles.get(&agent)
    }

    /// Decodes the next message from a byte stream. Returns `Ok(None)` on a
    /// clean end of stream; a partial trailing message is `Truncated`.
    pub fn decode_from(&mut self, r: &mut impl Read) -> Result<Option<WireMessage>, WireError> {
        let mut magic = [0u8; 4];
        match r.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        if &magic != WIRE_MAGIC {
            return Err(WireError::BadMagic);
        }
        let read_rest = |r: &mut dyn Read| -> Result<(u8, Vec<u8>), WireError> {
            let mut ty = [0u8; 1];
            r.read_exact(&mut ty).map_err(map_eof)?;
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(map_eof)?;
            let len = u32::from_le_bytes(len);
            if len > MAX_BODY {
                return Err(WireError::Malformed(format!("body length {len} too large")));
            }
            let mut body = vec![0u8; len as usize];
            r.read_exact(&mut body).map_err(map_eof)?;
            Ok((ty[0], body))
        };
        let (ty, body) = read_rest(r)?;
        self.decode_body(ty, &body).map(Some)
    }

    fn decode_body(&mut self, ty: u8, body: &[u8]) -> Result<WireMessage, WireError> {
        match ty {
            TYPE_HELLO => self.decode_hello(body),
            TYPE_FRAME => self.decode_frame(body),
            TYPE_BYE => {
                if body.len() != 4 {
                    return Err(WireError::LengthMismatch {
                        declared: body.len() as u32,
                        expected: 4,
                    });
                }
                Ok(WireMessage::Bye {
                    agent: u32::from_le_bytes(body.try_into().unwrap()),
                })
            }
            other => Err(WireError::BadType(other)),
        }
    }

    fn decode_hello(&mut self, body: &[u8]) -> Result<WireMessage, WireError> {
        const HELLO_LEN: u32 = 4 + 1 + 1 + 24 + 4 + 2;
        if body.len() as u32 != HELLO_LEN {
            return Err(WireError::LengthMismatch {
                declared: body.len() as u32,
                expected: HELLO_LEN,
            });
        }
        let mut r = body;
        let agent = r.read_u32::<LittleEndian>()?;
        let kind = match r.read_u8()? {
            0 => PayloadKind::Depth,
            1 => PayloadKind::Points,
            other => return Err(WireError::Malformed(format!("payload kind {other}"))),
        };
        let metric = match r.read_u8()? {
            0 => false,
            1 => true,
            other => return Err(WireError::Malformed(format!("metric flag {other}"))),
        };
        let fx = r.read_f32::<LittleEndian>()? as f64;
        let fy = r.read_f32::<LittleEndian>()? as f64;
        let cx = r.read_f32::<LittleEndian>()? as f64;
        let cy = r.read_f32::<LittleEndian>()? as f64;
        let w_f = r.read_f32::<LittleEndian>()?;
        let h_f = r.read_f32::<LittleEndian>()?;
        let width = r.read_u16::<LittleEndian>()? as u32;
        let height = r.read_u16::<LittleEndian>()? as u32;
        if w_f as u32 != width || h_f as u32 != height {
            return Err(WireError::Malformed(
                "intrinsics dimensions disagree with image dims".into(),
            ));
        }
        let semantic_dim = r.read_u16::<LittleEndian>()?;
        let intrinsics = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        if !intrinsics.is_valid() {
            return Err(WireError::Malformed("non-positive intrinsics".into()));
        }
        let profile = DeviceProfile {
            payload_kind: kind,
            metric,
            intrinsics,
            semantic_dim,
        };
        self.profiles.insert(agent, profile);
        Ok(WireMessage::Hello { agent, profile })
    }

    fn decode_frame(&mut self, body: &[u8]) -> Result<WireMessage, WireError> {
        let mut r = body;
        if body.len() < 4 + 8 + 8 + 56 + 1 {
            return Err(WireError::Truncated);
        }
        let agent = r.read_u32::<LittleEndian>()?;
        let profile = *self
            .profiles
            .get(&agent)
            .ok_or(WireError::UnknownAgent(agent))?;
        let seq = r.read_u64::<LittleEndian>()?;
        let timestamp_ns = r.read_u64::<LittleEndian>()?;
        let mut pose = [0f64; 7];
        for v in &mut pose {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let rotation = Rotation3::from_quat(pose[0], pose[1], pose[2], pose[3])
            .ok_or_else(|| WireError::Malformed("degenerate pose quaternion".into()))?;
        let local_pose = SE3Pose::new(rotation, Vector3::new(pose[4], pose[5], pose[6]));
        let flags = r.read_u8()?;
        let wire_kind = if flags & FLAG_POINTS != 0 {
            PayloadKind::Points
        } else {
            PayloadKind::Depth
        };
        if wire_kind != profile.payload_kind {
            return Err(WireError::Malformed(
                "frame payload kind disagrees with HELLO".into(),
            ));
        }
        let has_semantic = flags & FLAG_SEMANTIC != 0;

        let pixels = profile.intrinsics.pixel_count();
        let header_len = 4 + 8 + 8 + 56 + 1;
        let rgb_len = pixels * 3;
        let sem_len = if has_semantic {
            pixels * profile.semantic_dim as usize * 4
        } else {
            0
        };
        if has_semantic && profile.semantic_dim == 0 {
            return Err(WireError::Malformed(
                "semantic block on a device with d_s = 0".into(),
            ));
        }

        let payload_len = match profile.payload_kind {
            PayloadKind::Depth => pixels * 4,
            PayloadKind::Points => {
                if body.len() < header_len + rgb_len + 4 {
                    return Err(WireError::Truncated);
                }
                let count_pos = header_len + rgb_len;
                let m = u32::from_le_bytes(body[count_pos..count_pos + 4].try_into().unwrap())
                    as usize;
                4 + m * 12 + m * 3
            }
        };
        let expected = (header_len + rgb_len + payload_len + sem_len) as u32;
        if body.len() as u32 != expected {
            return Err(WireError::LengthMismatch {
                declared: body.len() as u32,
                expected,
            });
        }

        let mut rgb = vec![0u8; rgb_len];
        r.read_exact(&mut rgb)?;
        let payload = match profile.payload_kind {
            PayloadKind::Depth => {
                let mut depth = vec![0f32; pixels];
                r.read_f32_into::<LittleEndian>(&mut depth)?;
                GeometryPayload::Depth(depth)
            }
            PayloadKind::Points => {
                let m = r.read_u32::<LittleEndian>()? as usize;
                let mut positions = Vec::with_capacity(m);
                for _ in 0..m {
                    let mut p = [0f32; 3];
                    r.read_f32_into::<LittleEndian>(&mut p)?;
                    positions.push(p);
                }
                let mut colors = Vec::with_capacity(m);
                for _ in 0..m {
                    let mut c = [0u8; 3];
                    r.read_exact(&mut c)?;
                    colors.push(c);
                }
                GeometryPayload::Points { positions, colors }
            }
        };
        let semantic = if has_semantic {
            let mut sem = vec![0f32; pixels * profile.semantic_dim as usize];
            r.read_f32_into::<LittleEndian>(&mut sem)?;
            Some(sem)
        } else {
            None
        };

        let frame = DataFrame {
            agent,
            seq,
            timestamp_ns,
            local_pose,
            intrinsics: profile.intrinsics,
            rgb,
            payload,
            semantic,
            semantic_dim: if has_semantic { profile.semantic_dim } else { 0 },
            sample_count: 0,
        };
        frame
            .validate()
            .map_err(|e| WireError::Malformed(e.to_string()))?;
        Ok(WireMessage::Frame(frame))
    }
}

fn map_eof(e: std::io::Error) -> WireError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        WireError::Truncated
    } else {
        WireError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_profile(rng: &mut impl Rng) -> DeviceProfile {
        let width = rng.random_range(2u32..12);
        let height = rng.random_range(2u32..12);
        DeviceProfile {
            payload_kind: if rng.random_bool(0.5) {
                PayloadKind::Depth
            } else {
                PayloadKind::Points
            },
            metric: rng.random_bool(0.3),
            intrinsics: Intrinsics {
                // f32-representable so the HELLO roundtrip is exact.
                fx: rng.random_range(10u32..200) as f64,
                fy: rng.random_range(10u32..200) as f64,
                cx: (width / 2) as f64,
                cy: (height / 2) as f64,
                width,
                height,
            },
            semantic_dim: if rng.random_bool(0.4) {
                rng.random_range(1u16..6)
            } else {
                0
            },
        }
    }

    pub(crate) fn random_frame(rng: &mut impl Rng, agent: u32, profile: &DeviceProfile) -> DataFrame {
        let pixels = profile.intrinsics.pixel_count();
        let payload = match profile.payload_kind {
            PayloadKind::Depth => GeometryPayload::Depth(
                (0..pixels)
                    .map(|_| {
                        if rng.random_bool(0.9) {
                            rng.random_range(0.1f32..5.0)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            PayloadKind::Points => {
                let m = rng.random_range(0usize..50);
                GeometryPayload::Points {
                    positions: (0..m)
                        .map(|_| {
                            [
                                rng.random_range(-3.0f32..3.0),
                                rng.random_range(-3.0f32..3.0),
                                rng.random_range(-3.0f32..3.0),
                            ]
                        })
                        .collect(),
                    colors: (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
                }
            }
        };
        let semantic = if profile.semantic_dim > 0 && rng.random_bool(0.7) {
            Some(
                (0..pixels * profile.semantic_dim as usize)
                    .map(|_| rng.random_range(-1.0f32..1.0))
                    .collect(),
            )
        } else {
            None
        };
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
        );
        let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
        let semantic_dim = if semantic.is_some() { profile.semantic_dim } else { 0 };
        DataFrame {
            agent,
            seq: rng.random(),
            timestamp_ns: rng.random(),
            local_pose: SE3Pose::new(
                Rotation3::from_axis_angle(axis, rng.random_range(-3.0..3.0)),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            ),
            intrinsics: profile.intrinsics,
            rgb: (0..pixels * 3).map(|_| rng.random()).collect(),
            payload,
            semantic,
            semantic_dim,
            sample_count: 0,
        }
    }

    #[test]
    fn fuzz_roundtrip_1000_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut encoder_side = Vec::new();
        let mut originals = Vec::new();
        let mut agents_seen = Vec::new();
        for i in 0..1000u32 {
            let msg = match rng.random_range(0..10) {
                0..=2 => {
                    let agent = i;
                    let profile = random_profile(&mut rng);
                    agents_seen.push((agent, profile));
                    WireMessage::Hello { agent, profile }
                }
                3..=8 if !agents_seen.is_empty() => {
                    let (agent, profile) =
                        agents_seen[rng.random_range(0..agents_seen.len())];
                    WireMessage::Frame(random_frame(&mut rng, agent, &profile))
                }
                _ if !agents_seen.is_empty() => WireMessage::Bye {
                    agent: agents_seen[rng.random_range(0..agents_seen.len())].0,
                },
                _ => {
                    let agent = i;
                    let profile = random_profile(&mut rng);
                    agents_seen.push((agent, profile));
                    WireMessage::Hello { agent, profile }
                }
            };
            encoder_side.extend_from_slice(&encode_message(&msg));
            originals.push(msg);
        }

        let mut codec = WireCodec::new();
        let mut cursor = std::io::Cursor::new(&encoder_side);
        let mut decoded = Vec::new();
        while let Some(msg) = codec.decode_from(&mut cursor).unwrap() {
            decoded.push(msg);
        }
        assert_eq!(decoded.len(), originals.len());
        for (a, b) in originals.iter().zip(&decoded) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut codec = WireCodec::new();
        let bytes = b"HAMX\x03\x04\x00\x00\x00\x00\x00\x00\x00";
        let err = codec
            .decode_from(&mut std::io::Cursor::new(&bytes[..]))
            .unwrap_err();
        assert!(matches!(err, WireError::BadMagic));
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let profile = DeviceProfile {
            payload_kind: PayloadKind::Depth,
            ..random_profile(&mut rng)
        };
        let hello = encode_message(&WireMessage::Hello { agent: 5, profile });
        let frame = random_frame(&mut rng, 5, &profile);
        let mut bytes = encode_message(&WireMessage::Frame(frame));
        // Chop one byte off the body and fix up the declared length.
        bytes.pop();
        let body_len = (bytes.len() - 9) as u32;
        bytes[5..9].copy_from_slice(&body_len.to_le_bytes());

        let mut codec = WireCodec::new();
        let mut stream = hello;
        stream.extend_from_slice(&bytes);
        let mut cursor = std::io::Cursor::new(&stream);
        codec.decode_from(&mut cursor).unwrap();
        let err = codec.decode_from(&mut cursor).unwrap_err();
        assert!(matches!(err, WireError::LengthMismatch { .. }), "{err:?}");
    }

    #[test]
    fn frame_before_hello_is_unknown_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let profile = random_profile(&mut rng);
        let frame = random_frame(&mut rng, 9, &profile);
        let bytes = encode_message(&WireMessage::Frame(frame));
        let mut codec = WireCodec::new();
        let err = codec
            .decode_from(&mut std::io::Cursor::new(&bytes))
            .unwrap_err();
        assert!(matches!(err, WireError::UnknownAgent(9)));
    }

    #[test]
    fn truncated_file_stops_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let profile = random_profile(&mut rng);
        let mut bytes = encode_message(&WireMessage::Hello { agent: 1, profile });
        let full = encode_message(&WireMessage::Frame(random_frame(&mut rng, 1, &profile)));
        bytes.extend_from_slice(&full[..full.len() / 2]);

        let mut codec = WireCodec::new();
        let mut cursor = std::io::Cursor::new(&bytes);
        assert!(codec.decode_from(&mut cursor).unwrap().is_some());
        let err = codec.decode_from(&mut cursor).unwrap_err();
        assert!(matches!(err, WireError::Truncated));
    }
}
