//! The tree-search mining engine.
//!
//! One mining run grows an [`IntentTree`](crate::tree::IntentTree) against a
//! live environment session until the intent succeeds or the iteration
//! budget runs out. Each iteration selects a node (unvisited children first,
//! then the UCT rule), expands one child, grades it, and backpropagates the
//! reward along the root path.
//!
//! Three search modes share that skeleton and differ only in how children
//! are proposed and graded:
//!
//! * **accelerated** — the full three-role protocol: infer proposes `k`
//!   candidates once per node, orchestra merges and ranks them into a
//!   pending queue drained one environment step at a time, and the judge
//!   grades every new node.
//! * **vanilla** — classic search: a random untried canonical action per
//!   expansion and a uniform random rollout for the reward signal.
//! * **infer_only** — the proposal model expands (top candidate only) and
//!   rolls out, with no orchestra or judge in the loop.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, AgentSet, BackendProfile, InferContext, JudgeContext, OrchestraContext};
use crate::simenv::{
    EnvError, EnvSession, EnvState, GoalStatus, NavOracle, Observation, ScreenGraph, SnapshotToken,
    TransitionOutcome,
};
use crate::tree::{
    terminal_reward, unvisited_bonus, uct_score, GuiAction, IntentRecord, IntentTree, NodeId,
    NodeStatus, PathStep, StateFingerprint, TreeError, TreeNode,
};
use crate::util::fnv1a64_parts;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("agent backend failed: {0}")]
    Agent(#[from] AgentError),
    #[error("invalid mining request: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Accelerated,
    Vanilla,
    InferOnly,
}

impl std::fmt::Display for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SearchMode::Accelerated => "accelerated",
            SearchMode::Vanilla => "vanilla",
            SearchMode::InferOnly => "infer_only",
        })
    }
}

impl std::str::FromStr for SearchMode {
    type Err = EngineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accelerated" => Ok(SearchMode::Accelerated),
            "vanilla" => Ok(SearchMode::Vanilla),
            "infer_only" => Ok(SearchMode::InferOnly),
            other => Err(EngineError::Validation(format!("unknown search mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub mode: SearchMode,
    /// Candidates requested from the infer role per expansion batch.
    pub k_candidates: usize,
    pub exploration_c: f64,
    /// First-visit bonus scale and its per-rank decay.
    pub prior_bonus_b: f64,
    pub prior_gamma: f64,
    pub max_iterations: u32,
    pub max_depth: u32,
    pub max_rollout_steps: u32,
    /// Extra attempts per agent call before the iteration is abandoned.
    pub agent_retries: u32,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            mode: SearchMode::Accelerated,
            k_candidates: 3,
            exploration_c: 1.0,
            prior_bonus_b: 1.0,
            prior_gamma: 0.5,
            max_iterations: 200,
            max_depth: 15,
            max_rollout_steps: 10,
            agent_retries: 2,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Validation(m.into()));
        if self.k_candidates == 0 {
            return bad("k_candidates must be at least 1");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !self.exploration_c.is_finite() || self.exploration_c < 0.0 {
            return bad("exploration_c must be finite and non-negative");
        }
        if !self.prior_bonus_b.is_finite() || self.prior_bonus_b < 0.0 {
            return bad("prior_bonus_b must be finite and non-negative");
        }
        if !(self.prior_gamma > 0.0 && self.prior_gamma <= 1.0) {
            return bad("prior_gamma must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningOutcome {
    Success,
    BudgetExhausted,
}

#[derive(Debug)]
pub struct MiningResult {
    pub outcome: MiningOutcome,
    pub tree: IntentTree,
    pub success_node: Option<NodeId>,
    /// Completed select/expand/grade/backpropagate cycles; always equal to
    /// the root's visit count.
    pub iterations_used: u32,
    pub env_steps_used: u64,
    pub mode: SearchMode,
    pub seed: u64,
    /// Whether the environment's own goal predicate agreed with the
    /// success verdict (unset when no success or no predicate declared).
    pub goal_verified: Option<bool>,
}

impl MiningResult {
    /// The successful root path, when there is one.
    pub fn trajectory(&self) -> Result<Option<Vec<PathStep>>, EngineError> {
        match self.success_node {
            Some(id) => Ok(Some(self.tree.path_to(id)?)),
            None => Ok(None),
        }
    }

    pub fn summary(&self) -> Result<MiningSummary, EngineError> {
        Ok(MiningSummary {
            schema: "m2mine/1".into(),
            tree_id: self.tree.tree_id.clone(),
            intent: self.tree.original_intent.text.clone(),
            mode: self.mode,
            seed: self.seed,
            outcome: self.outcome,
            iterations_used: self.iterations_used,
            env_steps_used: self.env_steps_used,
            node_count: self.tree.len(),
            trajectory_len: self.trajectory()?.map(|t| t.len()),
            goal_verified: self.goal_verified,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningSummary {
    pub schema: String,
    pub tree_id: String,
    pub intent: String,
    pub mode: SearchMode,
    pub seed: u64,
    pub outcome: MiningOutcome,
    pub iterations_used: u32,
    pub env_steps_used: u64,
    pub node_count: usize,
    pub trajectory_len: Option<usize>,
    pub goal_verified: Option<bool>,
}

/// Selection rule over materialized children: any unvisited child wins
/// before UCT applies, highest first-visit bonus first; visited children
/// compete on UCT. All ties break toward the lower rank, then lower id.
pub fn choose_child(
    tree: &IntentTree,
    parent: NodeId,
    candidates: &[NodeId],
    exploration_c: f64,
) -> Result<NodeId, EngineError> {
    if candidates.is_empty() {
        return Err(EngineError::Validation("no candidates to choose from".into()));
    }
    let nodes: Vec<&TreeNode> = candidates
        .iter()
        .map(|&id| tree.node(id))
        .collect::<Result<_, _>>()?;
    let tiebreak = |n: &TreeNode| (n.prior_rank, n.id.0);
    let mut fresh: Option<&TreeNode> = None;
    for n in nodes.iter().copied().filter(|n| n.visit_count == 0) {
        fresh = match fresh {
            None => Some(n),
            Some(b)
                if n.prior_bonus > b.prior_bonus
                    || (n.prior_bonus == b.prior_bonus && tiebreak(n) < tiebreak(b)) =>
            {
                Some(n)
            }
            keep => keep,
        };
    }
    if let Some(best) = fresh {
        return Ok(best.id);
    }
    let parent_visits = tree.node(parent)?.visit_count;
    let mut best: Option<(f64, &TreeNode)> = None;
    for n in &nodes {
        let score = uct_score(n.q_value, parent_visits, n.visit_count, exploration_c)?;
        best = match best {
            None => Some((score, n)),
            Some((s, b)) if score > s || (score == s && tiebreak(n) < tiebreak(b)) => {
                Some((score, n))
            }
            keep => keep,
        };
    }
    Ok(best.expect("candidates checked non-empty").1.id)
}

// Iteration-local error split: `Abort` ends the current iteration without
// touching the tree, `Fatal` ends the whole run.
enum IterErr {
    Fatal(EngineError),
    Abort(String),
}

impl From<TreeError> for IterErr {
    fn from(e: TreeError) -> Self {
        IterErr::Fatal(EngineError::Tree(e))
    }
}

fn env_err(e: EnvError) -> IterErr {
    match e {
        // Misconfiguration can never heal across iterations.
        EnvError::UnknownIntent(_)
        | EnvError::UnknownScreen(_)
        | EnvError::Schema(_)
        | EnvError::ForeignSnapshot => IterErr::Fatal(EngineError::Env(e)),
        _ => IterErr::Abort(e.to_string()),
    }
}

enum StepOutcome {
    Completed { node: NodeId, success: bool },
    Aborted,
    Exhausted,
}

struct PendingChild {
    action: GuiAction,
    rationale: Option<String>,
}

struct NodeRuntime {
    snapshot: SnapshotToken,
    state: EnvState,
    /// Whether the one-shot infer batch has run (accelerated mode).
    generated: bool,
    /// No further children can ever come from this node.
    exhausted: bool,
    pending: VecDeque<PendingChild>,
    /// Every action already turned into a child or consumed trying.
    attempted: Vec<GuiAction>,
}

impl NodeRuntime {
    fn at(session: &EnvSession, state: EnvState) -> Self {
        NodeRuntime {
            snapshot: session.snapshot(),
            state,
            generated: false,
            exhausted: false,
            pending: VecDeque::new(),
            attempted: Vec::new(),
        }
    }
}

struct Prepared {
    parent: NodeId,
    action: GuiAction,
    rationale: Option<String>,
    child_fp: StateFingerprint,
    child_state: EnvState,
    child_obs: Observation,
    snapshot: SnapshotToken,
    /// The action terminated the session; the child can never be expanded.
    closed: bool,
}

struct Miner<'a> {
    graph: Arc<ScreenGraph>,
    session: EnvSession,
    tree: IntentTree,
    intent: IntentRecord,
    agents: &'a AgentSet,
    config: &'a MiningConfig,
    rng: ChaCha8Rng,
    runtime: Vec<NodeRuntime>,
    goal_verified: Option<bool>,
}

fn state_of(obs: &Observation) -> EnvState {
    EnvState {
        screen: obs.screen_id.clone(),
        bindings: obs.bindings.clone(),
        step_count: 0,
    }
}

impl<'a> Miner<'a> {
    fn n(&self, id: NodeId) -> &TreeNode {
        self.tree.node(id).expect("engine only holds ids it created")
    }

    fn kids(&self, id: NodeId) -> &[NodeId] {
        self.tree.children(id).expect("engine only holds ids it created")
    }

    fn rt(&mut self, id: NodeId) -> &mut NodeRuntime {
        &mut self.runtime[id.0 as usize]
    }

    /// Runs `f` with the configured number of retries. Deterministic errors
    /// fail the whole run; retryable ones exhaust into an iteration abort.
    fn call_agent<T>(&self, what: &str, f: impl Fn() -> Result<T, AgentError>) -> Result<T, IterErr> {
        let mut last = None;
        for attempt in 0..=self.config.agent_retries {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    log::warn!("{what} call failed (attempt {attempt}): {e}");
                    last = Some(e);
                }
                Err(e) => return Err(IterErr::Fatal(EngineError::Agent(e))),
            }
        }
        Err(IterErr::Abort(format!(
            "{what} still failing after {} retries: {}",
            self.config.agent_retries,
            last.expect("at least one attempt ran")
        )))
    }

    fn is_expandable(&self, id: NodeId) -> bool {
        let node = self.n(id);
        if node.status != NodeStatus::Intermediate {
            return false;
        }
        let rt = &self.runtime[id.0 as usize];
        if rt.exhausted {
            return false;
        }
        let depth = self.tree.depth(id).expect("engine only holds ids it created");
        if depth >= self.config.max_depth as usize {
            return false;
        }
        match self.config.mode {
            SearchMode::Accelerated => !rt.generated || !rt.pending.is_empty(),
            SearchMode::Vanilla => match self.graph.canonical_actions(&rt.state) {
                Ok(legal) => {
                    let tried: Vec<String> =
                        rt.attempted.iter().map(|a| a.canonical_key()).collect();
                    legal.iter().any(|a| !tried.contains(&a.canonical_key()))
                }
                Err(_) => false,
            },
            // Stays expandable until an infer batch comes back empty.
            SearchMode::InferOnly => true,
        }
    }

    /// A subtree is worth descending into if it can still grow somewhere,
    /// or ends in a failure leaf whose zero reward is still a signal.
    fn is_live(&self, id: NodeId) -> bool {
        if self.is_expandable(id) {
            return true;
        }
        match self.n(id).status {
            NodeStatus::Failure => true,
            NodeStatus::Success => false,
            NodeStatus::Intermediate => self.kids(id).iter().any(|&c| self.is_live(c)),
        }
    }

    /// Descends from the root to the next node to work on: the first
    /// expandable node on the best-child path, or a terminal leaf. `None`
    /// means the whole tree is exhausted.
    fn select(&self) -> Result<Option<NodeId>, EngineError> {
        let mut cur = self.tree.root();
        loop {
            if self.is_expandable(cur) {
                return Ok(Some(cur));
            }
            if self.n(cur).status == NodeStatus::Failure {
                return Ok(Some(cur));
            }
            let live: Vec<NodeId> = self
                .kids(cur)
                .iter()
                .copied()
                .filter(|&c| self.is_live(c))
                .collect();
            if live.is_empty() {
                return Ok(None);
            }
            cur = choose_child(&self.tree, cur, &live, self.config.exploration_c)?;
        }
    }

    fn run_iteration(&mut self) -> Result<StepOutcome, EngineError> {
        let Some(selected) = self.select()? else {
            return Ok(StepOutcome::Exhausted);
        };
        // Terminal leaves are revisitable: their fixed reward re-shapes the
        // ancestors' statistics without any expansion.
        if self.n(selected).status == NodeStatus::Failure {
            let reward = terminal_reward(NodeStatus::Failure)?;
            self.backpropagate(selected, reward)?;
            return Ok(StepOutcome::Completed { node: selected, success: false });
        }
        let prepared = match self.prepare(selected) {
            Ok(p) => p,
            Err(IterErr::Abort(why)) => {
                log::debug!("iteration abandoned at {selected}: {why}");
                return Ok(StepOutcome::Aborted);
            }
            Err(IterErr::Fatal(e)) => return Err(e),
        };
        let (status, reward) = match self.grade(&prepared) {
            Ok(v) => v,
            Err(IterErr::Abort(why)) => {
                log::debug!("iteration abandoned grading {selected}: {why}");
                return Ok(StepOutcome::Aborted);
            }
            Err(IterErr::Fatal(e)) => return Err(e),
        };
        let child = self.commit(prepared, status, reward)?;
        Ok(StepOutcome::Completed { node: child, success: status == NodeStatus::Success })
    }

    fn prepare(&mut self, node: NodeId) -> Result<Prepared, IterErr> {
        match self.config.mode {
            SearchMode::Accelerated => self.prepare_accelerated(node),
            SearchMode::Vanilla => self.prepare_vanilla(node),
            SearchMode::InferOnly => self.prepare_infer_only(node),
        }
    }

    fn prepare_accelerated(&mut self, node: NodeId) -> Result<Prepared, IterErr> {
        if !self.runtime[node.0 as usize].generated {
            let snapshot = self.runtime[node.0 as usize].snapshot.clone();
            self.session.restore(&snapshot).map_err(env_err)?;
            let (_, obs) = self.session.observe().map_err(env_err)?;
            let history = self.tree.path_to(node)?;
            let ctx = InferContext {
                observation: &obs,
                intent: &self.intent,
                history: &history,
                already_generated: &[],
                k: self.config.k_candidates,
            };
            let candidates = self.call_agent("infer", || self.agents.infer.infer_candidates(&ctx))?;
            if candidates.is_empty() {
                self.rt(node).exhausted = true;
                return Err(IterErr::Abort("infer produced no candidates".into()));
            }
            let octx = OrchestraContext { observation: &obs, intent: &self.intent };
            let ranked =
                self.call_agent("orchestra", || self.agents.orchestra.orchestrate(&octx, &candidates))?;
            let rt = self.rt(node);
            rt.pending = ranked
                .survivors
                .into_iter()
                .map(|c| PendingChild { action: c.action, rationale: c.rationale })
                .collect();
            rt.generated = true;
        }
        let Some(next) = self.rt(node).pending.pop_front() else {
            self.rt(node).exhausted = true;
            return Err(IterErr::Abort("pending children drained".into()));
        };
        self.execute_from(node, next.action, next.rationale)
    }

    fn prepare_vanilla(&mut self, node: NodeId) -> Result<Prepared, IterErr> {
        let rt = &self.runtime[node.0 as usize];
        let tried: Vec<String> = rt.attempted.iter().map(|a| a.canonical_key()).collect();
        let untried: Vec<GuiAction> = self
            .graph
            .canonical_actions(&rt.state)
            .map_err(env_err)?
            .into_iter()
            .filter(|a| !tried.contains(&a.canonical_key()))
            .collect();
        if untried.is_empty() {
            self.rt(node).exhausted = true;
            return Err(IterErr::Abort("all canonical actions tried".into()));
        }
        let pick = untried[self.rng.gen_range(0..untried.len())].clone();
        self.rt(node).attempted.push(pick.clone());
        self.execute_from(node, pick, None)
    }

    fn prepare_infer_only(&mut self, node: NodeId) -> Result<Prepared, IterErr> {
        let snapshot = self.runtime[node.0 as usize].snapshot.clone();
        self.session.restore(&snapshot).map_err(env_err)?;
        let (_, obs) = self.session.observe().map_err(env_err)?;
        let history = self.tree.path_to(node)?;
        let attempted = self.runtime[node.0 as usize].attempted.clone();
        let ctx = InferContext {
            observation: &obs,
            intent: &self.intent,
            history: &history,
            already_generated: &attempted,
            k: 1,
        };
        let candidates = self.call_agent("infer", || self.agents.infer.infer_candidates(&ctx))?;
        let Some(first) = candidates.into_iter().next() else {
            self.rt(node).exhausted = true;
            return Err(IterErr::Abort("infer produced no new action".into()));
        };
        self.rt(node).attempted.push(first.action.clone());
        self.execute_from(node, first.action, first.rationale)
    }

    /// Restores the session to `node` and takes one environment step.
    fn execute_from(
        &mut self,
        node: NodeId,
        action: GuiAction,
        rationale: Option<String>,
    ) -> Result<Prepared, IterErr> {
        let snapshot = self.runtime[node.0 as usize].snapshot.clone();
        self.session.restore(&snapshot).map_err(env_err)?;
        let (child_fp, outcome) = self.session.execute(&action).map_err(env_err)?;
        // A child landing in a state already on its own root path is a
        // no-op or a loop; materializing it would let the tree replicate
        // itself one wasted step deeper, so the candidate is consumed and
        // dropped. The environment step stays on the meter: it was spent.
        let mut ancestor = Some(node);
        while let Some(id) = ancestor {
            if self.n(id).state_ref == child_fp {
                return Err(IterErr::Abort(format!(
                    "{} already holds this state on the path",
                    id
                )));
            }
            ancestor = self.tree.parent_of(id)?;
        }
        let closed = outcome == TransitionOutcome::Terminated;
        let snapshot = self.session.snapshot();
        let (_, child_obs) = self.session.observe().map_err(env_err)?;
        let child_state = state_of(&child_obs);
        Ok(Prepared {
            parent: node,
            action,
            rationale,
            child_fp,
            child_state,
            child_obs,
            snapshot,
            closed,
        })
    }

    fn grade(&mut self, prep: &Prepared) -> Result<(NodeStatus, f64), IterErr> {
        match self.config.mode {
            SearchMode::Accelerated => {
                let mut trajectory = self.tree.path_to(prep.parent)?;
                trajectory.push(PathStep {
                    state_ref: self.n(prep.parent).state_ref,
                    action: prep.action.clone(),
                    meta: prep
                        .rationale
                        .clone()
                        .unwrap_or_else(|| prep.action.summary()),
                });
                let ctx = JudgeContext {
                    observation: &prep.child_obs,
                    intent: &self.intent,
                    trajectory: &trajectory,
                };
                let verdict = self.call_agent("judge", || self.agents.judge.judge(&ctx))?;
                if verdict.status == NodeStatus::Success {
                    // Record whether the environment's own predicate agrees;
                    // disagreements surface later as quality metrics.
                    self.goal_verified = match self.graph.goal_check(&self.intent.text, &prep.child_state)
                    {
                        Ok(g) => Some(g == GoalStatus::Satisfied),
                        Err(_) => None,
                    };
                }
                Ok((verdict.status, verdict.reward))
            }
            SearchMode::Vanilla | SearchMode::InferOnly => {
                let gs = self
                    .graph
                    .goal_check(&self.intent.text, &prep.child_state)
                    .map_err(env_err)?;
                match gs {
                    GoalStatus::Satisfied => {
                        self.goal_verified = Some(true);
                        Ok((NodeStatus::Success, 1.0))
                    }
                    GoalStatus::Violated => Ok((NodeStatus::Failure, 0.0)),
                    GoalStatus::Open if prep.closed => Ok((NodeStatus::Intermediate, 0.0)),
                    GoalStatus::Open => Ok((NodeStatus::Intermediate, self.rollout()?)),
                }
            }
        }
    }

    /// Plays forward from wherever the session stands (the just-expanded
    /// child) for up to `max_rollout_steps`, scoring 1 exactly when the
    /// goal is reached along the way.
    fn rollout(&mut self) -> Result<f64, IterErr> {
        for _ in 0..self.config.max_rollout_steps {
            if self.session.is_closed() {
                break;
            }
            let (_, obs) = self.session.observe().map_err(env_err)?;
            let state = state_of(&obs);
            let action = match self.config.mode {
                SearchMode::Vanilla => {
                    let legal = self.graph.canonical_actions(&state).map_err(env_err)?;
                    if legal.is_empty() {
                        break;
                    }
                    legal[self.rng.gen_range(0..legal.len())].clone()
                }
                SearchMode::InferOnly => {
                    let ctx = InferContext {
                        observation: &obs,
                        intent: &self.intent,
                        history: &[],
                        already_generated: &[],
                        k: 1,
                    };
                    let candidates =
                        self.call_agent("infer", || self.agents.infer.infer_candidates(&ctx))?;
                    match candidates.into_iter().next() {
                        Some(c) => c.action,
                        None => break,
                    }
                }
                SearchMode::Accelerated => unreachable!("accelerated mode never rolls out"),
            };
            if self.session.execute(&action).is_err() {
                break;
            }
            let (_, after) = self.session.observe().map_err(env_err)?;
            match self
                .graph
                .goal_check(&self.intent.text, &state_of(&after))
                .map_err(env_err)?
            {
                GoalStatus::Satisfied => return Ok(1.0),
                GoalStatus::Violated => return Ok(0.0),
                GoalStatus::Open => {}
            }
        }
        Ok(0.0)
    }

    /// Materializes the prepared child and backpropagates its reward. This
    /// is the only place an iteration touches the tree, so everything that
    /// can fail has already happened.
    fn commit(&mut self, prep: Prepared, status: NodeStatus, reward: f64) -> Result<NodeId, EngineError> {
        let rank = self.tree.children(prep.parent)?.len() as u32;
        let bonus = unvisited_bonus(self.config.prior_bonus_b, self.config.prior_gamma, rank);
        let meta = prep
            .rationale
            .unwrap_or_else(|| prep.action.summary());
        let child = self
            .tree
            .add_child(prep.parent, prep.action, prep.child_fp, meta, rank, bonus)?;
        if status != NodeStatus::Intermediate {
            self.tree.set_status(child, status)?;
        }
        let mut rt = NodeRuntime::at(&self.session, prep.child_state);
        rt.snapshot = prep.snapshot;
        rt.exhausted = prep.closed;
        self.runtime.push(rt);
        debug_assert_eq!(self.runtime.len(), self.tree.len());
        self.backpropagate(child, reward)?;
        Ok(child)
    }

    fn backpropagate(&mut self, from: NodeId, reward: f64) -> Result<(), EngineError> {
        let mut cur = Some(from);
        while let Some(id) = cur {
            self.tree.apply_reward(id, reward)?;
            cur = self.tree.parent_of(id)?;
        }
        Ok(())
    }

    /// Grades the root before any search: a goal satisfied (or dead) at
    /// the initial state needs no tree.
    fn grade_root(&mut self, obs: &Observation) -> Result<Option<NodeStatus>, EngineError> {
        match self.config.mode {
            SearchMode::Accelerated => {
                let ctx = JudgeContext { observation: obs, intent: &self.intent, trajectory: &[] };
                match self.call_agent("judge", || self.agents.judge.judge(&ctx)) {
                    Ok(v) if v.status != NodeStatus::Intermediate => {
                        if v.status == NodeStatus::Success {
                            self.goal_verified =
                                match self.graph.goal_check(&self.intent.text, &self.graph.initial_state()) {
                                    Ok(g) => Some(g == GoalStatus::Satisfied),
                                    Err(_) => None,
                                };
                        }
                        Ok(Some(v.status))
                    }
                    Ok(_) => Ok(None),
                    Err(IterErr::Fatal(e)) => Err(e),
                    Err(IterErr::Abort(why)) => {
                        log::warn!("root grading skipped: {why}");
                        Ok(None)
                    }
                }
            }
            SearchMode::Vanilla | SearchMode::InferOnly => {
                match self.graph.goal_check(&self.intent.text, &self.graph.initial_state())? {
                    GoalStatus::Satisfied => {
                        self.goal_verified = Some(true);
                        Ok(Some(NodeStatus::Success))
                    }
                    GoalStatus::Violated => Ok(Some(NodeStatus::Failure)),
                    GoalStatus::Open => Ok(None),
                }
            }
        }
    }
}

/// Deterministic identity for a mining run's tree.
fn tree_id_for(graph: &ScreenGraph, intent: &IntentRecord, mode: SearchMode, seed: u64) -> String {
    let id = fnv1a64_parts([
        b"tree".as_slice(),
        &graph.fingerprint().to_le_bytes(),
        intent.id.as_bytes(),
        mode.to_string().as_bytes(),
        &seed.to_le_bytes(),
    ]);
    format!("t{id:016x}")
}

/// Mines one intent against a fresh session of `graph`, growing a tree
/// until the intent succeeds or the budget runs out.
pub fn mine(
    graph: &Arc<ScreenGraph>,
    intent: &IntentRecord,
    agents: &AgentSet,
    config: &MiningConfig,
) -> Result<MiningResult, EngineError> {
    config.validate()?;
    let session = EnvSession::new(Arc::clone(graph));
    let (root_fp, root_obs) = session.observe()?;
    let tree = IntentTree::new(
        tree_id_for(graph, intent, config.mode, config.seed),
        intent.clone(),
        root_fp,
    );
    let rng_seed = fnv1a64_parts([
        b"engine-rng".as_slice(),
        &config.seed.to_le_bytes(),
        intent.id.as_bytes(),
    ]);
    let root_rt = NodeRuntime::at(&session, graph.initial_state());
    let mut miner = Miner {
        graph: Arc::clone(graph),
        session,
        tree,
        intent: intent.clone(),
        agents,
        config,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        runtime: vec![root_rt],
        goal_verified: None,
    };

    let root = miner.tree.root();
    if let Some(status) = miner.grade_root(&root_obs)? {
        miner.tree.set_status(root, status)?;
        let success = status == NodeStatus::Success;
        if success {
            miner.tree.attach_intent(intent.clone(), root)?;
        }
        return Ok(MiningResult {
            outcome: if success { MiningOutcome::Success } else { MiningOutcome::BudgetExhausted },
            success_node: success.then_some(root),
            iterations_used: 0,
            env_steps_used: miner.session.steps_used(),
            mode: config.mode,
            seed: config.seed,
            goal_verified: miner.goal_verified,
            tree: miner.tree,
        });
    }

    let mut completed: u32 = 0;
    let mut outcome = MiningOutcome::BudgetExhausted;
    let mut success_node = None;
    // Abandoned iterations consume attempts, not budget. Every abort eats
    // a finite resource (a pending candidate, an untried action, or an
    // agent's retry allowance), so the cap is sized to only ever trip on a
    // persistently failing backend, never on structural aborts.
    let attempt_cap = config.max_iterations.saturating_mul(12).saturating_add(64);
    let mut attempts: u32 = 0;
    while completed < config.max_iterations && attempts < attempt_cap {
        attempts += 1;
        match miner.run_iteration()? {
            StepOutcome::Exhausted => break,
            StepOutcome::Aborted => continue,
            StepOutcome::Completed { node, success } => {
                completed += 1;
                if success {
                    miner.tree.attach_intent(intent.clone(), node)?;
                    success_node = Some(node);
                    outcome = MiningOutcome::Success;
                    break;
                }
            }
        }
    }

    Ok(MiningResult {
        outcome,
        success_node,
        iterations_used: completed,
        env_steps_used: miner.session.steps_used(),
        mode: config.mode,
        seed: config.seed,
        goal_verified: miner.goal_verified,
        tree: miner.tree,
    })
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub modes: Vec<SearchMode>,
    /// Ground-truth optimal lengths; each must match a declared task.
    pub lengths: Vec<u32>,
    pub seeds: Vec<u64>,
    pub base: MiningConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: SearchMode,
    pub length: u32,
    pub runs: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub mean_env_steps: f64,
    pub mean_iterations: f64,
}

/// Runs the mode-by-task-length grid and averages over seeds. Oracle
/// backends are re-seeded per run so seeds vary the noise, not just the
/// engine's own choices.
pub fn ablate(
    graph: &Arc<ScreenGraph>,
    spec: &AblationSpec,
    backend: &BackendProfile,
) -> Result<Vec<AblationRow>, EngineError> {
    if spec.seeds.is_empty() || spec.modes.is_empty() || spec.lengths.is_empty() {
        return Err(EngineError::Validation(
            "ablation needs at least one mode, length, and seed".into(),
        ));
    }
    let nav = NavOracle::build_arc(Arc::clone(graph))?;
    let initial = graph.initial_state();
    let mut intents = Vec::new();
    for &len in &spec.lengths {
        let found = graph
            .intents()
            .iter()
            .find(|i| nav.distance(&i.text, &initial).ok().flatten() == Some(len));
        match found {
            Some(i) => intents.push((len, i.text.clone())),
            None => {
                return Err(EngineError::Validation(format!(
                    "no declared task with optimal length {len}"
                )))
            }
        }
    }

    let mut rows = Vec::new();
    for &mode in &spec.modes {
        for (len, text) in &intents {
            let mut env_steps = 0u64;
            let mut iterations = 0u64;
            let mut successes = 0u32;
            for &seed in &spec.seeds {
                let profile = match backend {
                    BackendProfile::Oracle { epsilon, .. } => {
                        BackendProfile::Oracle { epsilon: *epsilon, seed }
                    }
                    http => http.clone(),
                };
                let agents = profile.build(graph)?;
                let config = MiningConfig { mode, seed, ..spec.base.clone() };
                let intent = IntentRecord::seed(text.clone(), crate::tree::Stage::Stage1);
                let result = mine(graph, &intent, &agents, &config)?;
                env_steps += result.env_steps_used;
                iterations += u64::from(result.iterations_used);
                if result.outcome == MiningOutcome::Success {
                    successes += 1;
                }
            }
            let runs = spec.seeds.len() as u32;
            rows.push(AblationRow {
                mode,
                length: *len,
                runs,
                successes,
                success_rate: f64::from(successes) / f64::from(runs),
                mean_env_steps: env_steps as f64 / f64::from(runs),
                mean_iterations: iterations as f64 / f64::from(runs),
            });
        }
    }
    Ok(rows)
}

/// Stable CSV rendering of an ablation grid.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,length,runs,successes,success_rate,mean_env_steps,mean_iterations\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.3},{:.3}\n",
            r.mode, r.length, r.runs, r.successes, r.success_rate, r.mean_env_steps, r.mean_iterations
        ));
    }
    out
}
