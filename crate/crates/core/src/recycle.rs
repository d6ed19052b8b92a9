//! Intent recycling: the abandoned branches of a finished tree are mined a
//! second time. Every root-to-node path becomes a candidate trajectory; a
//! filter scores it, a generator writes the intent it accomplishes, and the
//! judge verifies the pair before it is attached to the tree alongside the
//! original intent.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    extract_json, fill, render_history, AgentError, BackendProfile, ChatClient, JudgeAgent,
    JudgeContext, JudgeVerdict,
};
use crate::dataset::{DatasetError, MinedTrajectory};
use crate::simenv::{
    EnvError, EnvSession, GoalStatus, NavOracle, ScreenGraph, TransitionOutcome,
};
use crate::tree::{
    IntentOrigin, IntentRecord, IntentTree, NodeId, NodeStatus, Stage, TreeError,
};

/// Oracle filters score {0, 1}, so anything in (0, 1] behaves the same
/// there; the midpoint leaves headroom for graded backends.
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RecycleError {
    #[error("invalid recycle input: {0}")]
    Validation(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

// ---------------------------------------------------------------------------
// Candidates
// ---------------------------------------------------------------------------

/// One recyclable path. It starts labeled with the tree's original intent
/// (that is what the search was chasing when it recorded the path) and is
/// re-labeled once the generator writes the intent it actually serves.
#[derive(Debug, Clone)]
pub struct RecycleCandidate {
    pub tree_id: String,
    pub endpoint: NodeId,
    pub trajectory: MinedTrajectory,
    pub filter_score: f64,
    pub generated_intent: Option<IntentRecord>,
    pub verdict: Option<JudgeVerdict>,
}

impl RecycleCandidate {
    /// A candidate counts as accepted only with a success verdict on a
    /// generated intent.
    pub fn is_accepted(&self) -> bool {
        self.generated_intent.is_some()
            && matches!(&self.verdict, Some(v) if v.status == NodeStatus::Success)
    }
}

/// One candidate per non-root node, in node-id order: the path from the
/// root to that node. Node ids are dense, so this is `len() - 1` entries.
pub fn enumerate_paths(tree: &IntentTree) -> Result<Vec<RecycleCandidate>, RecycleError> {
    let mut out = Vec::with_capacity(tree.len().saturating_sub(1));
    for node in tree.nodes() {
        if node.id == tree.root() {
            continue;
        }
        let trajectory = MinedTrajectory::from_tree_path(
            tree,
            tree.original_intent.clone(),
            node.id,
            node.status,
        )?;
        out.push(RecycleCandidate {
            tree_id: tree.tree_id.clone(),
            endpoint: node.id,
            trajectory,
            filter_score: 0.0,
            generated_intent: None,
            verdict: None,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Scores a candidate trajectory in [0, 1].
pub trait RecycleFilter: Send + Sync {
    fn score(&self, tree: &IntentTree, candidate: &RecycleCandidate) -> Result<f64, AgentError>;
}

/// Writes the instruction a candidate trajectory accomplishes.
pub trait IntentGenerator: Send + Sync {
    fn generate(
        &self,
        tree: &IntentTree,
        candidate: &RecycleCandidate,
    ) -> Result<String, AgentError>;
}

fn as_contract(e: TreeError) -> AgentError {
    AgentError::Contract(e.to_string())
}

/// Ground-truth filter: 1.0 exactly when the endpoint satisfies a latent
/// goal, no node on the path is a failure, and no step was a no-op
/// (consecutive states on the path never repeat).
pub struct LatentGoalFilter {
    pub nav: Arc<NavOracle>,
}

impl RecycleFilter for LatentGoalFilter {
    fn score(&self, tree: &IntentTree, c: &RecycleCandidate) -> Result<f64, AgentError> {
        let mut cur = c.endpoint;
        loop {
            if tree.node(cur).map_err(as_contract)?.status == NodeStatus::Failure {
                return Ok(0.0);
            }
            match tree.parent_of(cur).map_err(as_contract)? {
                Some(p) => cur = p,
                None => break,
            }
        }
        let endpoint_ref = tree.node(c.endpoint).map_err(as_contract)?.state_ref;
        let steps = &c.trajectory.steps;
        for (i, step) in steps.iter().enumerate() {
            let arrival = steps
                .get(i + 1)
                .map(|s| s.state_ref)
                .unwrap_or(endpoint_ref);
            if step.state_ref == arrival {
                return Ok(0.0);
            }
        }
        let Some(state) = self.nav.state_by_fingerprint(endpoint_ref) else {
            return Ok(0.0);
        };
        let graph = self.nav.graph();
        for latent in graph.latent_intents() {
            let status = graph
                .goal_check(&latent.text, state)
                .map_err(|e| AgentError::Config(e.to_string()))?;
            if status == GoalStatus::Satisfied {
                return Ok(1.0);
            }
        }
        Ok(0.0)
    }
}

/// Ground-truth generator: the declared text of the first latent goal the
/// endpoint satisfies, in declaration order.
pub struct LatentIntentGenerator {
    pub nav: Arc<NavOracle>,
}

impl IntentGenerator for LatentIntentGenerator {
    fn generate(&self, tree: &IntentTree, c: &RecycleCandidate) -> Result<String, AgentError> {
        let endpoint_ref = tree.node(c.endpoint).map_err(as_contract)?.state_ref;
        let state = self.nav.state_by_fingerprint(endpoint_ref).ok_or_else(|| {
            AgentError::Contract(format!("endpoint state {endpoint_ref} is not reachable"))
        })?;
        let graph = self.nav.graph();
        for latent in graph.latent_intents() {
            let status = graph
                .goal_check(&latent.text, state)
                .map_err(|e| AgentError::Config(e.to_string()))?;
            if status == GoalStatus::Satisfied {
                return Ok(latent.text.clone());
            }
        }
        Err(AgentError::Contract(format!(
            "endpoint {} satisfies no latent goal",
            c.endpoint
        )))
    }
}

/// MLLM-backed filter: asks for `{"score": <0..1>}` over the rendered
/// trajectory.
pub struct HttpRecycleFilter {
    pub client: Arc<ChatClient>,
}

impl RecycleFilter for HttpRecycleFilter {
    fn score(&self, tree: &IntentTree, c: &RecycleCandidate) -> Result<f64, AgentError> {
        let endpoint_ref = tree.node(c.endpoint).map_err(as_contract)?.state_ref;
        let slots = BTreeMap::from([
            ("intent", tree.original_intent.text.clone()),
            ("trajectory", render_history(&c.trajectory.steps)),
        ]);
        let user = fill(&self.client.templates().recycle_filter.clone(), &slots);
        let reply = self.client.chat(
            "You assess recorded GUI trajectories for training value.",
            &user,
            &endpoint_ref.to_string(),
        )?;
        let value = extract_json(&reply)?;
        let score = value
            .get("score")
            .and_then(|s| s.as_f64())
            .ok_or_else(|| AgentError::Malformed("reply lacks a numeric \"score\"".into()))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(AgentError::Malformed(format!(
                "score {score} outside [0, 1]"
            )));
        }
        Ok(score)
    }
}

/// MLLM-backed generator: asks for `{"intent": "..."}` over the rendered
/// trajectory.
pub struct HttpIntentGenerator {
    pub client: Arc<ChatClient>,
}

impl IntentGenerator for HttpIntentGenerator {
    fn generate(&self, tree: &IntentTree, c: &RecycleCandidate) -> Result<String, AgentError> {
        let endpoint_ref = tree.node(c.endpoint).map_err(as_contract)?.state_ref;
        let slots = BTreeMap::from([("trajectory", render_history(&c.trajectory.steps))]);
        let user = fill(&self.client.templates().recycle_generate.clone(), &slots);
        let reply = self.client.chat(
            "You write the user instruction a recorded GUI trajectory accomplishes.",
            &user,
            &endpoint_ref.to_string(),
        )?;
        let value = extract_json(&reply)?;
        let text = value
            .get("intent")
            .and_then(|s| s.as_str())
            .ok_or_else(|| AgentError::Malformed("reply lacks an \"intent\" string".into()))?;
        Ok(text.to_string())
    }
}

/// Filter/generator pair matching a backend profile, so staged runs can
/// swap recycling backends the same way they swap mining agents.
pub fn recycle_backends(
    profile: &BackendProfile,
    graph: &Arc<ScreenGraph>,
) -> Result<(Box<dyn RecycleFilter>, Box<dyn IntentGenerator>), RecycleError> {
    match profile {
        BackendProfile::Oracle { .. } => {
            let nav = Arc::new(NavOracle::build_arc(Arc::clone(graph))?);
            Ok((
                Box::new(LatentGoalFilter { nav: Arc::clone(&nav) }),
                Box::new(LatentIntentGenerator { nav }),
            ))
        }
        BackendProfile::Http(cfg) => {
            let client = Arc::new(ChatClient::new(cfg.clone())?);
            Ok((
                Box::new(HttpRecycleFilter { client: Arc::clone(&client) }),
                Box::new(HttpIntentGenerator { client }),
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

/// Scores candidates and keeps those at or above `threshold`. A backend
/// failure excludes the candidate and is logged rather than aborting the
/// batch.
pub fn filter_candidates(
    tree: &IntentTree,
    candidates: Vec<RecycleCandidate>,
    filter: &dyn RecycleFilter,
    threshold: f64,
) -> Result<Vec<RecycleCandidate>, RecycleError> {
    let scored = score_candidates(tree, candidates, filter);
    let mut out = validate_threshold(threshold).map(|_| Vec::new())?;
    for c in scored {
        if c.filter_score >= threshold {
            out.push(c);
        }
    }
    Ok(out)
}

fn validate_threshold(threshold: f64) -> Result<(), RecycleError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(RecycleError::Validation(format!(
            "filter threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Runs the filter over every candidate, keeping the evaluated ones with
/// their scores. Backend failures drop the candidate.
fn score_candidates(
    tree: &IntentTree,
    candidates: Vec<RecycleCandidate>,
    filter: &dyn RecycleFilter,
) -> Vec<RecycleCandidate> {
    let mut out = Vec::with_capacity(candidates.len());
    for mut c in candidates {
        match filter.score(tree, &c) {
            Ok(score) if (0.0..=1.0).contains(&score) => {
                c.filter_score = score;
                out.push(c);
            }
            Ok(score) => {
                log::warn!(
                    "filter returned out-of-range score {score} for {}; candidate excluded",
                    c.endpoint
                );
            }
            Err(e) => {
                log::warn!("filter failed on {}: {e}; candidate excluded", c.endpoint);
            }
        }
    }
    out
}

/// Asks the generator for the candidate's intent and re-labels the
/// candidate with it. Empty output is a validation failure: the candidate
/// should be dropped by the caller.
pub fn generate_intent(
    tree: &IntentTree,
    candidate: &mut RecycleCandidate,
    generator: &dyn IntentGenerator,
    stage: Stage,
) -> Result<IntentRecord, RecycleError> {
    let text = generator.generate(tree, candidate)?;
    if text.trim().is_empty() {
        return Err(RecycleError::Validation(format!(
            "generator produced an empty intent for {}",
            candidate.endpoint
        )));
    }
    let record = IntentRecord::with_source(
        text.trim(),
        IntentOrigin::Recycled,
        stage,
        Some(tree.tree_id.clone()),
    );
    candidate.generated_intent = Some(record.clone());
    candidate.trajectory.intent = record.clone();
    Ok(record)
}

/// Replays the trajectory in a fresh session, asks the judge to grade the
/// generated intent at its endpoint, and attaches the pair on a success
/// verdict. A failed judge call is retried once, then the candidate is
/// dropped. Returns whether the candidate was accepted.
pub fn verify_and_attach(
    tree: &mut IntentTree,
    candidate: &mut RecycleCandidate,
    judge: &dyn JudgeAgent,
    graph: &Arc<ScreenGraph>,
) -> Result<bool, RecycleError> {
    let intent = candidate.generated_intent.clone().ok_or_else(|| {
        RecycleError::Validation(format!(
            "candidate {} has no generated intent to verify",
            candidate.endpoint
        ))
    })?;

    let mut session = EnvSession::new(Arc::clone(graph));
    for step in &candidate.trajectory.steps {
        if session.state().fingerprint() != step.state_ref {
            log::warn!(
                "candidate {} does not replay (state drift); dropped",
                candidate.endpoint
            );
            return Ok(false);
        }
        match session.execute(&step.action) {
            Ok((_, TransitionOutcome::Moved)) => {}
            Ok((_, outcome)) => {
                log::warn!(
                    "candidate {} does not replay ({outcome:?} step); dropped",
                    candidate.endpoint
                );
                return Ok(false);
            }
            Err(e) => {
                log::warn!("candidate {} does not replay: {e}; dropped", candidate.endpoint);
                return Ok(false);
            }
        }
    }
    let (_, observation) = session.observe()?;
    let ctx = JudgeContext {
        observation: &observation,
        intent: &intent,
        trajectory: &candidate.trajectory.steps,
    };
    let verdict = match judge.judge(&ctx) {
        Ok(v) => v,
        Err(first) => {
            log::warn!(
                "judge failed on {}: {first}; retrying once",
                candidate.endpoint
            );
            match judge.judge(&ctx) {
                Ok(v) => v,
                Err(second) => {
                    log::warn!(
                        "judge failed again on {}: {second}; candidate dropped",
                        candidate.endpoint
                    );
                    return Ok(false);
                }
            }
        }
    };
    candidate.verdict = Some(verdict.clone());
    if verdict.status != NodeStatus::Success {
        return Ok(false);
    }
    tree.attach_intent(intent, candidate.endpoint)?;
    Ok(true)
}

// ---------------------------------------------------------------------------
// The whole pass
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RecycleOptions {
    pub threshold: f64,
    /// Stage stamped onto generated intents.
    pub stage: Stage,
}

impl Default for RecycleOptions {
    fn default() -> Self {
        RecycleOptions { threshold: DEFAULT_FILTER_THRESHOLD, stage: Stage::Stage3 }
    }
}

/// One line of the recycle report: what happened to a single candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecycleRow {
    pub endpoint: NodeId,
    pub filter_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecycleReport {
    pub tree_id: String,
    /// All enumerated candidates (`nodes - 1`).
    pub candidates: u64,
    /// Candidates skipped because their endpoint already records the
    /// original intent.
    pub excluded_original: u64,
    pub survivors: u64,
    pub accepted: u64,
    /// Intents actually added to the tree this pass; zero when the pass is
    /// a re-run.
    pub attached_new: u64,
    pub rows: Vec<RecycleRow>,
}

/// Runs the full recycle pass over one tree: enumerate, filter, generate,
/// verify, attach. Accepted pairs land in the tree's intent attachments;
/// the returned candidates carry scores, intents, and verdicts. The pass is
/// idempotent — re-running attaches nothing new.
pub fn run_recycle(
    tree: &mut IntentTree,
    graph: &Arc<ScreenGraph>,
    filter: &dyn RecycleFilter,
    generator: &dyn IntentGenerator,
    judge: &dyn JudgeAgent,
    options: &RecycleOptions,
) -> Result<(RecycleReport, Vec<RecycleCandidate>), RecycleError> {
    validate_threshold(options.threshold)?;
    let all = enumerate_paths(tree)?;
    let total = all.len() as u64;

    // The original intent's own trajectory is already recorded; never
    // re-label it.
    let original_endpoints: BTreeSet<NodeId> = tree
        .attachments()
        .iter()
        .filter(|a| a.intent.text == tree.original_intent.text)
        .map(|a| a.endpoint)
        .collect();
    let (kept, excluded): (Vec<_>, Vec<_>) = all
        .into_iter()
        .partition(|c| !original_endpoints.contains(&c.endpoint));
    let excluded_original = excluded.len() as u64;

    let scored = score_candidates(tree, kept, filter);
    let mut rows: Vec<RecycleRow> = Vec::with_capacity(scored.len());
    let mut finished: Vec<RecycleCandidate> = Vec::with_capacity(scored.len());
    let mut survivors = 0u64;
    let mut accepted = 0u64;
    let mut attached_new = 0u64;

    for mut c in scored {
        let mut row = RecycleRow {
            endpoint: c.endpoint,
            filter_score: c.filter_score,
            intent: None,
            accepted: false,
        };
        if c.filter_score >= options.threshold {
            survivors += 1;
            match generate_intent(tree, &mut c, generator, options.stage) {
                Ok(record) => {
                    row.intent = Some(record.text.clone());
                    let before = tree.attachments().len();
                    if verify_and_attach(tree, &mut c, judge, graph)? {
                        accepted += 1;
                        row.accepted = true;
                        if tree.attachments().len() > before {
                            attached_new += 1;
                        }
                    }
                }
                Err(RecycleError::Validation(reason)) | Err(RecycleError::Agent(AgentError::Contract(reason))) => {
                    log::warn!("intent generation dropped {}: {reason}", c.endpoint);
                }
                Err(RecycleError::Agent(e)) => {
                    log::warn!("intent generation failed on {}: {e}; dropped", c.endpoint);
                }
                Err(other) => return Err(other),
            }
        }
        rows.push(row);
        finished.push(c);
    }

    let report = RecycleReport {
        tree_id: tree.tree_id.clone(),
        candidates: total,
        excluded_original,
        survivors,
        accepted,
        attached_new,
        rows,
    };
    Ok((report, finished))
}
