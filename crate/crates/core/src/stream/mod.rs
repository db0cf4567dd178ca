//! Wire protocol, server front-end, recorded-stream files, the simulated
//! agent fleet, and the evaluation harness.

pub mod config;
pub mod eval;
pub mod scene;
pub mod server;
pub mod sim;
pub mod wire;

pub use config::FileConfig;
pub use eval::{evaluate, is_holdout, psnr_db, AgentEval, EvalReport, PSNR_CAP_DB};
pub use scene::{AgentScript, SceneParams, SyntheticScene};
pub use server::{serve, spawn_server, ServerDeps, ServerHandle, ServerOutcome};
pub use sim::{
    fleet_messages, generate_agent_frames, replay, simulate_live, simulate_record, Descriptors,
    RecordingPaths, SimParams, SimStats, SyntheticFeatureProvider,
};
pub use wire::{encode_message, WireCodec, WireError, WireMessage};
