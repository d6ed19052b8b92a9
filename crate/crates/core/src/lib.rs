//! Mining GUI-agent trajectories with Monte Carlo tree search.
//!
//! The crate is organised around one artifact: the *intent-trajectory tree*.
//! A tree is grown against a [`simenv`] session by a three-role agent
//! protocol ([`agents`]) driven by the search [`engine`]; finished trees are
//! then harvested for extra intents ([`recycle`]), exported as training
//! channels ([`dataset`]), and chained into staged mining plans ([`stages`]).

pub mod agents;
pub mod dataset;
pub mod engine;
pub mod recycle;
pub mod simenv;
pub mod stages;
pub mod tree;
pub mod util;

pub use agents::{AgentSet, BackendProfile, JudgeVerdict};
pub use dataset::{CostParams, DataChannel, MinedTrajectory, PreferencePair};
pub use engine::{mine, MiningConfig, MiningOutcome, MiningResult, SearchMode};
pub use recycle::{run_recycle, RecycleOptions, RecycleReport};
pub use simenv::{EnvSession, EnvState, GoalStatus, NavOracle, Observation, ScreenGraph};
pub use stages::{run_loop, LoopPlan, LoopRun, StagePlan, StageReport};
pub use tree::{GuiAction, IntentRecord, IntentTree, NodeId, NodeStatus, TreeNode};
