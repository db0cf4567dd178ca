//! One-time per-agent alignment.
//!
//! A verified correspondence selects a temporal window of frames from both
//! agents, a localized-SfM backend recovers their poses in an arbitrary
//! gauge, two absolute-orientation solves bridge local -> gauge -> global,
//! and the composed transform is gated on residuals before the agent is
//! promoted. An agent aligns at most once; afterwards every attempt is a
//! no-op.

mod sfm;

pub use sfm::{SfmBackend, SfmResult, SyntheticSfm, SyntheticSfmConfig};

use thiserror::Error;

use crate::correspondence::CandidateCorrespondence;
use crate::frame::{DataFrame, DeviceProfile};
use crate::geometry::{
    solve_absolute_orientation, GeometryError, PosePairSet, SE3Pose, Sim3Transform,
};

pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_TRANSLATION_GATE_M: f64 = 0.1;
pub const DEFAULT_ROTATION_GATE_DEG: f64 = 10.0;
pub const DEFAULT_CACHE_CAP: usize = 10_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignmentError {
    #[error("cache holds {have} frames, window needs {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("correspondence frame not present in the cache")]
    FrameNotCached,
    #[error("session is not in the required state")]
    WrongState,
    #[error("solver failed: {0}")]
    Solver(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentState {
    Unaligned,
    Aligning,
    Aligned,
}

/// Per-agent lifecycle state on the server.
#[derive(Debug, Clone)]
pub struct AgentSession {
    agent_id: u32,
    state: AgentState,
    local_to_global: Option<Sim3Transform>,
    cache: Vec<DataFrame>,
    profile: DeviceProfile,
    cache_cap: usize,
    dropped_frames: u64,
}

impl AgentSession {
    pub fn new(agent_id: u32, profile: DeviceProfile, cache_cap: usize) -> Self {
        Self {
            agent_id,
            state: AgentState::Unaligned,
            local_to_global: None,
            cache: Vec::new(),
            profile,
            cache_cap,
            dropped_frames: 0,
        }
    }

    /// The origin agent defines the global frame: created aligned with the
    /// identity transform. Its profile must be metric.
    pub fn new_origin(agent_id: u32, profile: DeviceProfile) -> Self {
        assert!(profile.metric, "origin agent must provide metric poses");
        Self {
            agent_id,
            state: AgentState::Aligned,
            local_to_global: Some(Sim3Transform::identity()),
            cache: Vec::new(),
            profile,
            cache_cap: DEFAULT_CACHE_CAP,
            dropped_frames: 0,
        }
    }

    pub fn agent_id(&self) -> u32 {
        self.agent_id
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn local_to_global(&self) -> Option<&Sim3Transform> {
        self.local_to_global.as_ref()
    }

    pub fn cache(&self) -> &[DataFrame] {
        &self.cache
    }

    pub fn dropped_frames(&self) -> u64 {
        self.dropped_frames
    }

    /// Caches a frame while unaligned; oldest frames drop beyond the cap.
    pub fn cache_frame(&mut self, frame: DataFrame) {
        self.cache.push(frame);
        if self.cache.len() > self.cache_cap {
            self.cache.remove(0);
            self.dropped_frames += 1;
        }
    }

    pub fn begin_alignment(&mut self) -> Result<(), AlignmentError> {
        if self.state != AgentState::Unaligned {
            return Err(AlignmentError::WrongState);
        }
        self.state = AgentState::Aligning;
        Ok(())
    }

    pub fn abort_alignment(&mut self) {
        if self.state == AgentState::Aligning {
            self.state = AgentState::Unaligned;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentConfig {
    pub window: usize,
    /// Rotation regularizer weight in the orientation solver.
    pub epsilon: f64,
    /// Accept only if the map-frame translation RMSE stays below this.
    pub translation_gate_m: f64,
    pub rotation_gate_deg: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            epsilon: 1e-3,
            translation_gate_m: DEFAULT_TRANSLATION_GATE_M,
            rotation_gate_deg: DEFAULT_ROTATION_GATE_DEG,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    SfmFailed,
    TranslationGate,
    RotationGate,
    DegenerateSolve,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::SfmFailed => "sfm_failed",
            RejectReason::TranslationGate => "translation_gate",
            RejectReason::RotationGate => "rotation_gate",
            RejectReason::DegenerateSolve => "degenerate_solve",
        }
    }
}

/// Outcome of one registration attempt. Stage 1 bridges the unaligned
/// agent's SLAM frame to the SfM gauge, stage 2 the gauge to the global
/// frame; translation residuals are reported in the map frame.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub agent: u32,
    pub transform: Option<Sim3Transform>,
    pub stage1_translation_rmse: f64,
    pub stage1_rotation_rmse_deg: f64,
    pub stage2_translation_rmse: f64,
    pub stage2_rotation_rmse_deg: f64,
    /// Max of the two stages, map frame.
    pub translation_rmse: f64,
    pub rotation_rmse_deg: f64,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

impl AlignmentReport {
    fn rejected(agent: u32, reason: RejectReason) -> Self {
        Self {
            agent,
            transform: None,
            stage1_translation_rmse: f64::NAN,
            stage1_rotation_rmse_deg: f64::NAN,
            stage2_translation_rmse: f64::NAN,
            stage2_rotation_rmse_deg: f64::NAN,
            translation_rmse: f64::NAN,
            rotation_rmse_deg: f64::NAN,
            accepted: false,
            reject_reason: Some(reason),
        }
    }

    /// Line-delimited structured-text record for the eval harness.
    pub fn log_line(&self, timestamp_s: f64) -> String {
        format!(
            "ALIGN t={:.3} agent={} stage1_t={:.6} stage1_r={:.4} stage2_t={:.6} stage2_r={:.4} accepted={} reason={}",
            timestamp_s,
            self.agent,
            self.stage1_translation_rmse,
            self.stage1_rotation_rmse_deg,
            self.stage2_translation_rmse,
            self.stage2_rotation_rmse_deg,
            self.accepted,
            self.reject_reason.map_or("none", |r| r.as_str()),
        )
    }
}

/// Selects `w` frames temporally centered on the correspondence frame,
/// shifted toward the interior near cache edges. Returned frames are
/// snapshots, in strictly increasing timestamp order.
pub fn select_window(
    cache: &[DataFrame],
    anchor_seq: u64,
    w: usize,
) -> Result<Vec<DataFrame>, AlignmentError> {
    if cache.len() < w {
        return Err(AlignmentError::InsufficientData {
            have: cache.len(),
            need: w,
        });
    }
    let center = cache
        .iter()
        .position(|f| f.seq == anchor_seq)
        .ok_or(AlignmentError::FrameNotCached)?;
    let start = center.saturating_sub(w / 2).min(cache.len() - w);
    Ok(cache[start..start + w].to_vec())
}

pub fn select_windows(
    candidate: &CandidateCorrespondence,
    cache_i: &[DataFrame],
    cache_j: &[DataFrame],
    w: usize,
) -> Result<(Vec<DataFrame>, Vec<DataFrame>), AlignmentError> {
    let frames_i = select_window(cache_i, candidate.frame_i.seq, w)?;
    let frames_j = select_window(cache_j, candidate.frame_j.seq, w)?;
    Ok((frames_i, frames_j))
}

/// Runs the backend over the aligned agent's window followed by the
/// unaligned agent's window and splits the result.
pub fn run_localized_sfm(
    frames_i: &[DataFrame],
    frames_j: &[DataFrame],
    backend: &dyn SfmBackend,
) -> (SfmResult, SfmResult) {
    let all: Vec<&DataFrame> = frames_i.iter().chain(frames_j.iter()).collect();
    let result = backend.solve(&all);
    let (poses_i, poses_j) = result.poses.split_at(frames_i.len());
    (
        SfmResult {
            poses: poses_i.to_vec(),
            success: result.success && poses_i.iter().all(Option::is_some),
        },
        SfmResult {
            poses: poses_j.to_vec(),
            success: result.success && poses_j.iter().all(Option::is_some),
        },
    )
}

/// Two-stage registration: `T_{j->s}` from agent j's SLAM poses to its SfM
/// poses, `T_{s->g}` from agent i's SfM poses to its aligned global poses,
/// composed into `T_{j->g}` and gated.
pub fn register(
    agent_j: u32,
    frames_j: &[DataFrame],
    sfm_j: &SfmResult,
    frames_i: &[DataFrame],
    sfm_i: &SfmResult,
    global_poses_i: &[SE3Pose],
    config: &AlignmentConfig,
) -> AlignmentReport {
    if !sfm_i.success || !sfm_j.success {
        return AlignmentReport::rejected(agent_j, RejectReason::SfmFailed);
    }
    let sfm_poses_j: Vec<SE3Pose> = sfm_j.poses.iter().map(|p| p.unwrap()).collect();
    let sfm_poses_i: Vec<SE3Pose> = sfm_i.poses.iter().map(|p| p.unwrap()).collect();
    let local_poses_j: Vec<SE3Pose> = frames_j.iter().map(|f| f.local_pose).collect();
    debug_assert_eq!(frames_i.len(), global_poses_i.len());

    let stage1 = match solve_absolute_orientation(
        &PosePairSet::from_poses(&local_poses_j, &sfm_poses_j),
        config.epsilon,
    ) {
        Ok(s) => s,
        Err(_) => return AlignmentReport::rejected(agent_j, RejectReason::DegenerateSolve),
    };
    let stage2 = match solve_absolute_orientation(
        &PosePairSet::from_poses(&sfm_poses_i, global_poses_i),
        config.epsilon,
    ) {
        Ok(s) => s,
        Err(_) => return AlignmentReport::rejected(agent_j, RejectReason::DegenerateSolve),
    };

    let composed = stage2.transform.compose(&stage1.transform);

    // Stage-1 residuals live in the SfM gauge; the gauge-to-map scale puts
    // them in map-frame meters, where the gates are defined.
    let stage1_translation = stage1.translation_rmse * stage2.transform.scale;
    let translation_rmse = stage1_translation.max(stage2.translation_rmse);
    let rotation_rmse_deg = stage1.rotation_rmse_deg.max(stage2.rotation_rmse_deg);

    let mut reject_reason = None;
    if translation_rmse > config.translation_gate_m {
        reject_reason = Some(RejectReason::TranslationGate);
    } else if rotation_rmse_deg > config.rotation_gate_deg {
        reject_reason = Some(RejectReason::RotationGate);
    }

    AlignmentReport {
        agent: agent_j,
        transform: Some(composed),
        stage1_translation_rmse: stage1_translation,
        stage1_rotation_rmse_deg: stage1.rotation_rmse_deg,
        stage2_translation_rmse: stage2.translation_rmse,
        stage2_rotation_rmse_deg: stage2.rotation_rmse_deg,
        translation_rmse,
        rotation_rmse_deg,
        accepted: reject_reason.is_none(),
        reject_reason,
    }
}

#[derive(Debug)]
pub enum PromotionOutcome {
    /// Cache drained in timestamp order, ready for map ingestion.
    Promoted(Vec<DataFrame>),
    /// Report rejected; session back to Unaligned with its cache intact.
    Rejected,
    /// Session was already aligned; nothing changed.
    AlreadyAligned,
}

pub fn promote(session: &mut AgentSession, report: &AlignmentReport) -> PromotionOutcome {
    if session.state == AgentState::Aligned {
        return PromotionOutcome::AlreadyAligned;
    }
    if !report.accepted {
        session.abort_alignment();
        return PromotionOutcome::Rejected;
    }
    let transform = report
        .transform
        .expect("accepted reports carry a transform");
    session.state = AgentState::Aligned;
    session.local_to_global = Some(transform);
    let mut frames = std::mem::take(&mut session.cache);
    frames.sort_by_key(|f| (f.timestamp_ns, f.seq));
    PromotionOutcome::Promoted(frames)
}

/// Full attempt around one verified candidate: window selection, localized
/// SfM, registration, promotion. On any failure the session returns to
/// Unaligned and the cache is kept.
pub fn attempt_alignment(
    session_j: &mut AgentSession,
    candidate: &CandidateCorrespondence,
    cache_i: &[DataFrame],
    transform_i: &Sim3Transform,
    backend: &dyn SfmBackend,
    config: &AlignmentConfig,
) -> Result<(AlignmentReport, PromotionOutcome), AlignmentError> {
    let (frames_i, frames_j) =
        select_windows(candidate, cache_i, session_j.cache(), config.window)?;
    session_j.begin_alignment()?;

    let (sfm_i, sfm_j) = run_localized_sfm(&frames_i, &frames_j, backend);
    let global_poses_i: Vec<SE3Pose> = frames_i
        .iter()
        .map(|f| transform_i.apply_to_pose(&f.local_pose))
        .collect();
    let report = register(
        session_j.agent_id(),
        &frames_j,
        &sfm_j,
        &frames_i,
        &sfm_i,
        &global_poses_i,
        config,
    );
    debug_assert!(
        !report.accepted
            || (report.translation_rmse <= config.translation_gate_m
                && report.rotation_rmse_deg <= config.rotation_gate_deg),
        "accepted report violates a gate"
    );
    let outcome = promote(session_j, &report);
    Ok((report, outcome))
}
