//! Map-fusion server.
//!
//! One acceptor thread, one reader thread per connection feeding an event
//! channel, and a single engine thread that owns all mutable state:
//! sessions, the correspondence engine, the Gaussian map, the training
//! pool, and the feature field. A malformed connection is dropped with a
//! logged reason and never disturbs the others.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::config::FileConfig;
use super::eval::is_holdout;
use crate::alignment::{
    attempt_alignment, AgentSession, AgentState, PromotionOutcome, SfmBackend,
};
use crate::correspondence::{
    CorrespondenceEngine, DescriptorProvider, LocalFeatureProvider, PlaceDescriptor,
};
use crate::frame::{DataFrame, FrameId};
use crate::geometry::Sim3Transform;
use crate::semantics::{build_supervision, FeatureField};
use crate::splatmap::{
    refined_camera_pose, spawn_from_frame, train_step, AgentPoses, GaussianMap, RenderCamera,
    TrainingPool,
};
use crate::stream::wire::{WireCodec, WireMessage};

/// Backends the server cannot synthesize on its own.
pub struct ServerDeps {
    pub descriptors: Arc<dyn DescriptorProvider>,
    pub features: Arc<dyn LocalFeatureProvider>,
    pub sfm: Arc<dyn SfmBackend>,
}

#[derive(Debug)]
enum Event {
    Message(WireMessage),
    /// Connection ended (cleanly or not).
    Closed { reason: Option<String> },
}

/// Final state handed back when the engine stops.
pub struct ServerOutcome {
    pub map: GaussianMap,
    pub field: Option<FeatureField>,
    pub pool: TrainingPool,
    /// One-time alignment transforms, per agent.
    pub transforms: HashMap<u32, Sim3Transform>,
    /// Alignment transforms with trained corrections applied.
    pub effective_transforms: HashMap<u32, Sim3Transform>,
    pub frames_received: u64,
    pub frames_ingested: u64,
    pub frames_held_out: u64,
    pub frames_dropped: u64,
    pub optimizer_steps: u64,
    pub field_steps: u64,
    pub align_log: Vec<String>,
    pub stat_lines: Vec<String>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: std::thread::JoinHandle<std::io::Result<ServerOutcome>>,
}

impl ServerHandle {
    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    pub fn stop(self) -> std::io::Result<ServerOutcome> {
        self.shutdown.store(true, Ordering::SeqCst);
        self.join()
    }

    pub fn join(self) -> std::io::Result<ServerOutcome> {
        self.thread.join().expect("server thread panicked")
    }
}

/// Binds and runs the server on a background thread.
pub fn spawn_server(config: FileConfig, deps: ServerDeps) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(&config.server.bind)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let thread = std::thread::spawn(move || serve(listener, config, deps, flag));
    Ok(ServerHandle {
        addr,
        shutdown,
        thread,
    })
}

/// Runs the server until idle (when configured), the runtime limit, or the
/// shutdown flag.
pub fn serve(
    listener: TcpListener,
    config: FileConfig,
    deps: ServerDeps,
    shutdown: Arc<AtomicBool>,
) -> std::io::Result<ServerOutcome> {
    let (tx, rx) = unbounded();
    let accept_shutdown = shutdown.clone();
    listener.set_nonblocking(true)?;
    let acceptor = std::thread::spawn(move || acceptor_loop(listener, tx, accept_shutdown));

    let outcome = Engine::new(config, deps, shutdown.clone()).run(rx);
    shutdown.store(true, Ordering::SeqCst);
    let _ = acceptor.join();
    Ok(outcome)
}

fn acceptor_loop(listener: TcpListener, tx: Sender<Event>, shutdown: Arc<AtomicBool>) {
    let mut readers = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("connection from {peer}");
                let tx = tx.clone();
                readers.push(std::thread::spawn(move || reader_loop(stream, tx)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                break;
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

/// Decodes one connection; any protocol error drops just this connection.
fn reader_loop(stream: TcpStream, tx: Sender<Event>) {
    let mut codec = WireCodec::new();
    let mut reader = std::io::BufReader::new(stream);
    loop {
        match codec.decode_from(&mut reader) {
            Ok(Some(msg)) => {
                if tx.send(Event::Message(msg)).is_err() {
                    return;
                }
            }
            Ok(None) => {
                let _ = tx.send(Event::Closed { reason: None });
                return;
            }
            Err(e) => {
                let _ = tx.send(Event::Closed {
                    reason: Some(e.to_string()),
                });
                return;
            }
        }
    }
}

struct Engine {
    config: FileConfig,
    deps: ServerDeps,
    shutdown: Arc<AtomicBool>,

    sessions: BTreeMap<u32, AgentSession>,
    have_origin: bool,
    descriptors: BTreeMap<u32, Vec<PlaceDescriptor>>,
    correspondence: CorrespondenceEngine,
    consumed_candidates: HashSet<(FrameId, FrameId)>,

    map: GaussianMap,
    pool: TrainingPool,
    agents: AgentPoses,
    field: Option<FeatureField>,
    semantic_entries: Vec<usize>,

    ingest: BTreeMap<u32, VecDeque<DataFrame>>,
    open_connections: usize,
    saw_connection: bool,

    frames_received: u64,
    frames_ingested: u64,
    frames_held_out: u64,
    frames_dropped: u64,
    steps: u64,
    field_steps: u64,
    post_steps_done: u32,
    align_log: Vec<String>,
    stat_lines: Vec<String>,
    start: Instant,
    last_cadence: Instant,
    last_stats: Instant,
    frames_at_last_stats: u64,
}

impl Engine {
    fn new(config: FileConfig, deps: ServerDeps, shutdown: Arc<AtomicBool>) -> Self {
        let field = config.field.enabled.then(|| FeatureField::new(config.field_config()));
        let correspondence = CorrespondenceEngine::new(config.correspondence_config());
        Self {
            config,
            deps,
            shutdown,
            sessions: BTreeMap::new(),
            have_origin: false,
            descriptors: BTreeMap::new(),
            correspondence,
            consumed_candidates: HashSet::new(),
            map: GaussianMap::new(),
            pool: TrainingPool::new(),
            agents: AgentPoses::default(),
            field,
            semantic_entries: Vec::new(),
            ingest: BTreeMap::new(),
            open_connections: 0,
            saw_connection: false,
            frames_received: 0,
            frames_ingested: 0,
            frames_held_out: 0,
            frames_dropped: 0,
            steps: 0,
            field_steps: 0,
            post_steps_done: 0,
            align_log: Vec::new(),
            stat_lines: Vec::new(),
            start: Instant::now(),
            last_cadence: Instant::now(),
            last_stats: Instant::now(),
            frames_at_last_stats: 0,
        }
    }

    fn run(mut self, rx: Receiver<Event>) -> ServerOutcome {
        loop {
            let mut did_work = false;
            while let Ok(event) = rx.try_recv() {
                did_work = true;
                self.handle_event(event);
            }
            did_work |= self.process_ingest();

            let streams_done = self.saw_connection && self.open_connections == 0;
            let cadence_due = self.last_cadence.elapsed().as_secs_f64()
                >= self.config.server.proposal_cadence_s;
            if cadence_due || streams_done {
                self.last_cadence = Instant::now();
                self.run_alignment_round();
            }

            if streams_done
                && self.ingest.values().all(VecDeque::is_empty)
                && self.alignment_settled()
            {
                if self.post_steps_done < self.config.server.post_stream_steps {
                    self.optimizer_step();
                    self.post_steps_done += 1;
                    did_work = true;
                } else if self.config.server.exit_on_idle {
                    break;
                }
            }

            self.maybe_stats();
            if self.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let limit = self.config.server.max_runtime_s;
            if limit > 0.0 && self.start.elapsed().as_secs_f64() > limit {
                log::info!("runtime limit reached");
                break;
            }
            if !did_work {
                std::thread::sleep(Duration::from_millis(2));
            }
        }
        self.finish()
    }

    fn handle_event(&mut self, event: Event) {
        match event {
            Event::Message(WireMessage::Hello { agent, profile }) => {
                if self.sessions.contains_key(&agent) {
                    log::warn!("duplicate HELLO for agent {agent}, ignored");
                    return;
                }
                self.saw_connection = true;
                self.open_connections += 1;
                let session = if profile.metric && !self.have_origin {
                    self.have_origin = true;
                    self.agents.set_base(agent, Sim3Transform::identity());
                    log::info!("agent {agent} joins as metric origin");
                    AgentSession::new_origin(agent, profile)
                } else {
                    log::info!("agent {agent} joins unaligned");
                    AgentSession::new(agent, profile, self.config.server.cache_cap)
                };
                self.sessions.insert(agent, session);
                self.descriptors.entry(agent).or_default();
            }
            Event::Message(WireMessage::Frame(frame)) => self.handle_frame(frame),
            Event::Message(WireMessage::Bye { agent }) => {
                log::info!("agent {agent} says bye");
            }
            Event::Closed { reason } => {
                if let Some(reason) = reason {
                    log::warn!("connection dropped: {reason}");
                }
                self.open_connections = self.open_connections.saturating_sub(1);
            }
        }
    }

    fn handle_frame(&mut self, frame: DataFrame) {
        let Some(session) = self.sessions.get_mut(&frame.agent) else {
            log::warn!("frame from unknown agent {}, discarded", frame.agent);
            return;
        };
        self.frames_received += 1;

        if let Some(desc) = self.deps.descriptors.describe(&frame) {
            self.descriptors.entry(frame.agent).or_default().push(desc);
        }

        let holdout = is_holdout(frame.seq, self.config.server.holdout_n);
        match session.state() {
            AgentState::Aligned => {
                // Aligned agents keep a window cache for future alignments
                // of others, and feed the ingestion queue.
                session.cache_frame(frame.clone());
                if holdout {
                    self.frames_held_out += 1;
                    return;
                }
                let queue = self.ingest.entry(frame.agent).or_default();
                queue.push_back(frame);
                if queue.len() > self.config.server.ingest_queue_cap {
                    queue.pop_front();
                    self.frames_dropped += 1;
                }
            }
            _ => {
                session.cache_frame(frame);
            }
        }
    }

    /// Pops queued frames round-robin in agent order, spawning Gaussians and
    /// feeding the pool, with optimizer steps interleaved per frame.
    fn process_ingest(&mut self) -> bool {
        let mut any = false;
        loop {
            let mut progressed = false;
            let agents: Vec<u32> = self.ingest.keys().copied().collect();
            for agent in agents {
                let Some(frame) = self.ingest.get_mut(&agent).and_then(VecDeque::pop_front)
                else {
                    continue;
                };
                progressed = true;
                any = true;
                self.ingest_frame(frame);
                for _ in 0..self.config.server.steps_per_frame {
                    self.optimizer_step();
                }
            }
            if !progressed {
                break;
            }
        }
        any
    }

    fn ingest_frame(&mut self, frame: DataFrame) {
        let Some(effective) = self.agents.effective(frame.agent) else {
            log::warn!("frame for unaligned agent {} reached ingestion", frame.agent);
            return;
        };
        let seed = mix_seed(self.config.server.seed, frame.agent as u64, frame.seq);
        let spawned = spawn_from_frame(
            &frame,
            &effective,
            self.config.pool.spawn_per_frame,
            seed,
        );
        self.map.extend(spawned);
        let has_semantic = frame.semantic.is_some();
        self.pool.insert(frame, effective.scale);
        if has_semantic {
            self.semantic_entries.push(self.pool.len() - 1);
        }
        self.frames_ingested += 1;
    }

    fn optimizer_step(&mut self) {
        if self.map.is_empty() || self.pool.is_empty() {
            return;
        }
        let cfg = self.config.train_config();
        let seed = mix_seed(self.config.server.seed ^ 0x7ead, self.steps, 0);
        if train_step(&mut self.map, &mut self.pool, &mut self.agents, &cfg, seed).is_ok() {
            self.steps += 1;
            let interleave = self.config.field.interleave;
            if interleave > 0 && self.steps % interleave == 0 {
                self.field_step();
            }
        }
    }

    fn field_step(&mut self) {
        let Some(field) = self.field.as_mut() else {
            return;
        };
        if self.semantic_entries.is_empty() {
            return;
        }
        // Cycle through semantic frames so every viewpoint keeps
        // supervising the field.
        let entry_idx = self.semantic_entries[self.field_steps as usize % self.semantic_entries.len()];
        let entry = &self.pool.entries()[entry_idx];
        let Some(base) = self.agents.base(entry.frame.agent).copied() else {
            return;
        };
        let correction = self.agents.correction(entry.frame.agent);
        let camera = RenderCamera {
            intrinsics: entry.frame.intrinsics,
            pose: refined_camera_pose(&entry.frame.local_pose, &base, &correction, &entry.offset),
        };
        let Ok(mut points) =
            build_supervision(&self.map, &entry.frame, &camera, &self.config.render_config())
        else {
            return;
        };
        if points.is_empty() {
            return;
        }
        // Subsample to the configured batch, seeded by the step counter.
        let batch = self.config.field.batch.min(points.len());
        if batch < points.len() {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
                self.config.server.seed ^ 0xf1e1d,
                self.field_steps,
                0,
            ));
            let picks = rand::seq::index::sample(&mut rng, points.len(), batch);
            points = picks.iter().map(|i| points[i].clone()).collect();
        }
        if field.train_step(&points, self.config.field.lr).is_ok() {
            self.field_steps += 1;
        }
    }

    /// One alignment attempt per unaligned agent, using the single best
    /// verified candidate; failing rounds raise the pair thresholds.
    fn run_alignment_round(&mut self) {
        let unaligned: Vec<u32> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.state() == AgentState::Unaligned)
            .map(|(a, _)| *a)
            .collect();
        let aligned: Vec<u32> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.state() == AgentState::Aligned)
            .map(|(a, _)| *a)
            .collect();
        if aligned.is_empty() {
            return;
        }
        let aligned_descs: Vec<PlaceDescriptor> = aligned
            .iter()
            .flat_map(|a| self.descriptors.get(a).cloned().unwrap_or_default())
            .collect();

        for agent_j in unaligned {
            let descs_j = self.descriptors.get(&agent_j).cloned().unwrap_or_default();
            if descs_j.is_empty() {
                continue;
            }
            let candidates = self
                .correspondence
                .propose_candidates(&descs_j, &aligned_descs);
            let mut attempted = false;
            let mut any_verified = false;
            for candidate in &candidates {
                if self
                    .consumed_candidates
                    .contains(&(candidate.frame_i, candidate.frame_j))
                {
                    continue;
                }
                let Some((feats_i, feats_j)) = self.candidate_features(candidate) else {
                    continue;
                };
                let verified = self
                    .correspondence
                    .verify_candidate(candidate, &feats_i, &feats_j);
                if !verified.verified {
                    continue;
                }
                any_verified = true;
                // Snapshot the aligned cache; ingestion keeps running on
                // fresher frames without disturbing this attempt.
                let cache_i = self.sessions[&candidate.frame_i.agent].cache().to_vec();
                let transform_i = *self.sessions[&candidate.frame_i.agent]
                    .local_to_global()
                    .expect("aligned agent has a transform");
                let session_j = self.sessions.get_mut(&agent_j).expect("session exists");
                match attempt_alignment(
                    session_j,
                    &verified,
                    &cache_i,
                    &transform_i,
                    self.deps.sfm.as_ref(),
                    &self.config.alignment_config(),
                ) {
                    Ok((report, outcome)) => {
                        attempted = true;
                        let line = report.log_line(self.start.elapsed().as_secs_f64());
                        log::info!("{line}");
                        self.align_log.push(line);
                        match outcome {
                            PromotionOutcome::Promoted(frames) => {
                                let transform =
                                    report.transform.expect("accepted report has transform");
                                self.agents.set_base(agent_j, transform);
                                for frame in frames {
                                    if is_holdout(frame.seq, self.config.server.holdout_n) {
                                        self.frames_held_out += 1;
                                        continue;
                                    }
                                    self.ingest_frame(frame);
                                    for _ in 0..self.config.server.steps_per_frame {
                                        self.optimizer_step();
                                    }
                                }
                            }
                            PromotionOutcome::Rejected => {
                                self.consumed_candidates
                                    .insert((verified.frame_i, verified.frame_j));
                            }
                            PromotionOutcome::AlreadyAligned => {
                                log::info!("agent {agent_j} already aligned, ignoring report");
                            }
                        }
                    }
                    Err(crate::alignment::AlignmentError::InsufficientData { .. }) => {
                        // Candidate retained; more frames may arrive.
                    }
                    Err(e) => {
                        log::warn!("alignment attempt failed: {e}");
                        self.consumed_candidates
                            .insert((verified.frame_i, verified.frame_j));
                    }
                }
                // One attempt per cadence tick.
                break;
            }
            if !any_verified && !attempted {
                for agent_i in &aligned {
                    let observed = self.correspondence.observed_similarities(*agent_i, agent_j);
                    self.correspondence.raise_threshold(*agent_i, agent_j, &observed);
                }
            }
        }
    }

    fn candidate_features(
        &self,
        candidate: &crate::correspondence::CandidateCorrespondence,
    ) -> Option<(crate::correspondence::LocalFeatureSet, crate::correspondence::LocalFeatureSet)>
    {
        let frame_i = self
            .sessions
            .get(&candidate.frame_i.agent)?
            .cache()
            .iter()
            .find(|f| f.seq == candidate.frame_i.seq)?;
        let frame_j = self
            .sessions
            .get(&candidate.frame_j.agent)?
            .cache()
            .iter()
            .find(|f| f.seq == candidate.frame_j.seq)?;
        Some((
            self.deps.features.features(frame_i),
            self.deps.features.features(frame_j),
        ))
    }

    /// No unaligned agent can make progress: no unconsumed candidates can
    /// verify right now.
    fn alignment_settled(&mut self) -> bool {
        let unaligned: Vec<u32> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.state() == AgentState::Unaligned)
            .map(|(a, _)| *a)
            .collect();
        if unaligned.is_empty() {
            return true;
        }
        let aligned_descs: Vec<PlaceDescriptor> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.state() == AgentState::Aligned)
            .flat_map(|(a, _)| self.descriptors.get(a).cloned().unwrap_or_default())
            .collect();
        for agent_j in unaligned {
            let descs_j = self.descriptors.get(&agent_j).cloned().unwrap_or_default();
            let candidates = self
                .correspondence
                .propose_candidates(&descs_j, &aligned_descs);
            if candidates
                .iter()
                .any(|c| !self.consumed_candidates.contains(&(c.frame_i, c.frame_j)))
            {
                return false;
            }
        }
        true
    }

    fn maybe_stats(&mut self) {
        let elapsed = self.last_stats.elapsed().as_secs_f64();
        if elapsed < self.config.server.stats_interval_s {
            return;
        }
        let fps = (self.frames_received - self.frames_at_last_stats) as f64 / elapsed;
        let aligned = self
            .sessions
            .values()
            .filter(|s| s.state() == AgentState::Aligned)
            .count();
        let line = format!(
            "STAT t={:.1} agents={} aligned={} gaussians={} pool={} fps={:.1}",
            self.start.elapsed().as_secs_f64(),
            self.sessions.len(),
            aligned,
            self.map.len(),
            self.pool.len(),
            fps
        );
        println!("{line}");
        self.stat_lines.push(line);
        self.last_stats = Instant::now();
        self.frames_at_last_stats = self.frames_received;
    }

    fn finish(self) -> ServerOutcome {
        let transforms: HashMap<u32, Sim3Transform> = self
            .sessions
            .iter()
            .filter_map(|(a, s)| s.local_to_global().map(|t| (*a, *t)))
            .collect();
        let effective_transforms: HashMap<u32, Sim3Transform> = transforms
            .keys()
            .filter_map(|a| self.agents.effective(*a).map(|t| (*a, t)))
            .collect();
        ServerOutcome {
            map: self.map,
            field: self.field,
            pool: self.pool,
            transforms,
            effective_transforms,
            frames_received: self.frames_received,
            frames_ingested: self.frames_ingested,
            frames_held_out: self.frames_held_out,
            frames_dropped: self.frames_dropped,
            optimizer_steps: self.steps,
            field_steps: self.field_steps,
            align_log: self.align_log,
            stat_lines: self.stat_lines,
        }
    }
}

pub(crate) fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_add(b.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(c.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 29;
    x
}
