//! Intent-trajectory trees.
//!
//! A tree records one mining run: nodes are visited GUI states, edges are
//! executed actions, and every node carries the running statistics the
//! search formulas below operate on. Extra intents harvested from the same
//! tree are attached as `(intent, endpoint)` pairs next to the original.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{canonical_json, canonical_json_pretty, fnv1a64_parts};

pub const TREE_SCHEMA: &str = "m2tree/1";

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("{which} must be >= 1")]
    InvalidVisitCount { which: &'static str },
    #[error("exploration constant must be finite and >= 0 (got {0})")]
    InvalidExploration(f64),
    #[error("judge logits must be finite (got valid={0}, invalid={1})")]
    NonFiniteLogit(f64, f64),
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("terminal reward requested for intermediate status")]
    TerminalRewardOnIntermediate,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {child} already has a parent")]
    DuplicateParent { child: NodeId },
    #[error("cannot expand {parent}: terminal status {status}")]
    ExpandTerminal { parent: NodeId, status: NodeStatus },
    #[error("tree invariant violated: {0}")]
    Invariant(String),
    #[error("tree document rejected: {0}")]
    Schema(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

/// Integer pixel position, `[x, y]` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPoint(pub i32, pub i32);

impl PixelPoint {
    pub fn x(&self) -> i32 {
        self.0
    }
    pub fn y(&self) -> i32 {
        self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SystemButton {
    Back,
    Home,
    Menu,
    Enter,
}

impl fmt::Display for SystemButton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SystemButton::Back => "Back",
            SystemButton::Home => "Home",
            SystemButton::Menu => "Menu",
            SystemButton::Enter => "Enter",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminateStatus {
    Success,
    Failure,
}

/// The eight-way GUI action surface. Each variant carries exactly the
/// parameters its kind needs, so malformed combinations are unrepresentable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuiAction {
    Click { coordinate: PixelPoint },
    LongPress { coordinate: PixelPoint, duration_s: f64 },
    Swipe { coordinate: PixelPoint, coordinate2: PixelPoint },
    Type { text: String },
    Key { text: String },
    Wait { duration_s: f64 },
    SystemButton { button: SystemButton },
    Terminate { status: TerminateStatus },
}

impl GuiAction {
    pub fn kind(&self) -> &'static str {
        match self {
            GuiAction::Click { .. } => "click",
            GuiAction::LongPress { .. } => "long_press",
            GuiAction::Swipe { .. } => "swipe",
            GuiAction::Type { .. } => "type",
            GuiAction::Key { .. } => "key",
            GuiAction::Wait { .. } => "wait",
            GuiAction::SystemButton { .. } => "system_button",
            GuiAction::Terminate { .. } => "terminate",
        }
    }

    /// Canonical serialized form; two actions are syntactically identical
    /// exactly when their keys are equal.
    pub fn canonical_key(&self) -> String {
        canonical_json(self).expect("actions always serialize")
    }

    /// One-line rendering for DOT edge labels and log lines.
    pub fn summary(&self) -> String {
        match self {
            GuiAction::Click { coordinate: c } => format!("click({},{})", c.x(), c.y()),
            GuiAction::LongPress { coordinate: c, duration_s } => {
                format!("long_press({},{},{}s)", c.x(), c.y(), duration_s)
            }
            GuiAction::Swipe { coordinate: a, coordinate2: b } => {
                format!("swipe({},{})->({},{})", a.x(), a.y(), b.x(), b.y())
            }
            GuiAction::Type { text } => format!("type({text:?})"),
            GuiAction::Key { text } => format!("key({text:?})"),
            GuiAction::Wait { duration_s } => format!("wait({duration_s}s)"),
            GuiAction::SystemButton { button } => format!("button({button})"),
            GuiAction::Terminate { status } => match status {
                TerminateStatus::Success => "terminate(success)".into(),
                TerminateStatus::Failure => "terminate(failure)".into(),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Nodes and intents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Stable 64-bit hash of an environment state, rendered as 16 hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateFingerprint(pub u64);

impl fmt::Display for StateFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for StateFingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StateFingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(StateFingerprint)
            .map_err(|_| serde::de::Error::custom(format!("bad fingerprint {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Success,
    Failure,
    Intermediate,
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeStatus::Success => "success",
            NodeStatus::Failure => "failure",
            NodeStatus::Intermediate => "intermediate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentOrigin {
    Seed,
    Rewritten,
    Combined,
    Recycled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Stage1,
    Stage2,
    Stage3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Warmup => "warmup",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warmup" => Ok(Stage::Warmup),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "stage3" => Ok(Stage::Stage3),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// A natural-language task plus where it came from. Recycled intents must
/// point back at the tree they were harvested from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub id: String,
    pub text: String,
    pub origin: IntentOrigin,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tree: Option<String>,
}

impl IntentRecord {
    pub fn new(text: impl Into<String>, origin: IntentOrigin, stage: Stage) -> Self {
        Self::with_source(text, origin, stage, None)
    }

    pub fn seed(text: impl Into<String>, stage: Stage) -> Self {
        Self::new(text, IntentOrigin::Seed, stage)
    }

    pub fn with_source(
        text: impl Into<String>,
        origin: IntentOrigin,
        stage: Stage,
        source_tree: Option<String>,
    ) -> Self {
        let text = text.into();
        let id = format!(
            "i{:016x}",
            fnv1a64_parts([
                "intent",
                text.as_str(),
                &format!("{origin:?}"),
                &stage.to_string(),
                source_tree.as_deref().unwrap_or(""),
            ])
        );
        Self { id, text, origin, stage, source_tree }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub state_ref: StateFingerprint,
    /// Short description of the action that arrived here; empty at the root.
    pub meta: String,
    pub q_value: f64,
    pub visit_count: u64,
    pub status: NodeStatus,
    /// Rank this node's arriving action held in its sibling queue (dense from 0).
    pub prior_rank: u32,
    pub prior_bonus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub parent: NodeId,
    pub action: GuiAction,
    pub child: NodeId,
}

/// An intent whose trajectory ends at `endpoint`, together with the verdict
/// that admitted it. Only success verdicts are ever attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentAttachment {
    pub intent: IntentRecord,
    pub endpoint: NodeId,
    pub verdict: NodeStatus,
}

/// One step of a root path: the state an action was taken in, the action,
/// and the description of the node it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStep {
    pub state_ref: StateFingerprint,
    pub action: GuiAction,
    pub meta: String,
}

// ---------------------------------------------------------------------------
// Search formulas
// ---------------------------------------------------------------------------

/// Upper-confidence score for a visited child:
/// `Q̄ + c * sqrt(ln(parent_visits) / child_visits)`.
///
/// Unvisited children never reach this formula; callers route them through
/// the first-visit rule ([`unvisited_bonus`]) instead.
pub fn uct_score(
    child_q: f64,
    parent_visits: u64,
    child_visits: u64,
    exploration_c: f64,
) -> Result<f64, TreeError> {
    if parent_visits == 0 {
        return Err(TreeError::InvalidVisitCount { which: "parent_visits" });
    }
    if child_visits == 0 {
        return Err(TreeError::InvalidVisitCount { which: "child_visits" });
    }
    if !exploration_c.is_finite() || exploration_c < 0.0 {
        return Err(TreeError::InvalidExploration(exploration_c));
    }
    let explore = ((parent_visits as f64).ln() / child_visits as f64).sqrt();
    Ok(child_q + exploration_c * explore)
}

/// Selection score of a child that has never been visited: `B * gamma^rank`.
/// Higher-ranked (lower `prior_rank`) children surface first.
pub fn unvisited_bonus(bonus_b: f64, gamma: f64, prior_rank: u32) -> f64 {
    bonus_b * gamma.powi(prior_rank as i32)
}

/// Collapses a judge's validity/invalidity logits into a reward in (0, 1):
/// `exp(lv) / (exp(lv) + exp(li))`, evaluated as a sigmoid of the logit
/// difference so extreme logits cannot overflow.
pub fn normalize_intermediate_reward(
    logit_valid: f64,
    logit_invalid: f64,
) -> Result<f64, TreeError> {
    if !logit_valid.is_finite() || !logit_invalid.is_finite() {
        return Err(TreeError::NonFiniteLogit(logit_valid, logit_invalid));
    }
    let d = logit_valid - logit_invalid;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    })
}

/// Folds one reward into a node's running mean:
/// `Q' = (Q * N + R) / (N + 1)`, `N' = N + 1`.
/// With `n_prev = 0` the previous Q is ignored entirely.
pub fn update_q(q_prev: f64, n_prev: u64, reward: f64) -> Result<(f64, u64), TreeError> {
    if !(0.0..=1.0).contains(&reward) {
        return Err(TreeError::RewardOutOfRange(reward));
    }
    if n_prev == 0 {
        return Ok((reward, 1));
    }
    let n = n_prev as f64;
    Ok(((q_prev * n + reward) / (n + 1.0), n_prev + 1))
}

/// Reward for a terminal verdict: success is 1, failure is 0. Asking for a
/// terminal reward on an intermediate status is a caller bug.
pub fn terminal_reward(status: NodeStatus) -> Result<f64, TreeError> {
    match status {
        NodeStatus::Success => Ok(1.0),
        NodeStatus::Failure => Ok(0.0),
        NodeStatus::Intermediate => Err(TreeError::TerminalRewardOnIntermediate),
    }
}

// ---------------------------------------------------------------------------
// The tree itself
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IntentTree {
    pub tree_id: String,
    pub original_intent: IntentRecord,
    root: NodeId,
    nodes: Vec<TreeNode>,
    edges: Vec<TreeEdge>,
    intents: Vec<IntentAttachment>,
    // Derived adjacency, rebuilt on load, never serialized.
    parents: Vec<Option<(NodeId, usize)>>,
    children: Vec<Vec<NodeId>>,
}

impl PartialEq for IntentTree {
    fn eq(&self, other: &Self) -> bool {
        self.tree_id == other.tree_id
            && self.original_intent == other.original_intent
            && self.root == other.root
            && self.nodes == other.nodes
            && self.edges == other.edges
            && self.intents == other.intents
    }
}

/// Serialized form (`m2tree/1`). Node ids are dense indexes, so the node
/// list is already in id order and round-trips byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeDoc {
    schema: String,
    tree_id: String,
    original_intent: IntentRecord,
    root: NodeId,
    nodes: Vec<TreeNode>,
    edges: Vec<TreeEdge>,
    intents: Vec<IntentAttachment>,
}

impl IntentTree {
    pub fn new(
        tree_id: impl Into<String>,
        original_intent: IntentRecord,
        root_state: StateFingerprint,
    ) -> Self {
        let root = TreeNode {
            id: NodeId(0),
            state_ref: root_state,
            meta: String::new(),
            q_value: 0.0,
            visit_count: 0,
            status: NodeStatus::Intermediate,
            prior_rank: 0,
            prior_bonus: 0.0,
        };
        IntentTree {
            tree_id: tree_id.into(),
            original_intent,
            root: NodeId(0),
            nodes: vec![root],
            edges: Vec::new(),
            intents: Vec::new(),
            parents: vec![None],
            children: vec![Vec::new()],
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a tree always has its root
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode, TreeError> {
        self.nodes
            .get(id.0 as usize)
            .ok_or(TreeError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut TreeNode, TreeError> {
        self.nodes
            .get_mut(id.0 as usize)
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter()
    }

    pub fn edges(&self) -> &[TreeEdge] {
        &self.edges
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId], TreeError> {
        self.children
            .get(id.0 as usize)
            .map(|v| v.as_slice())
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn parent_of(&self, id: NodeId) -> Result<Option<NodeId>, TreeError> {
        self.parents
            .get(id.0 as usize)
            .map(|p| p.map(|(pid, _)| pid))
            .ok_or(TreeError::UnknownNode(id))
    }

    /// Action on the edge arriving at `id` (none for the root).
    pub fn arriving_action(&self, id: NodeId) -> Result<Option<&GuiAction>, TreeError> {
        match self.parents.get(id.0 as usize) {
            None => Err(TreeError::UnknownNode(id)),
            Some(None) => Ok(None),
            Some(Some((_, edge_idx))) => Ok(Some(&self.edges[*edge_idx].action)),
        }
    }

    pub fn depth(&self, id: NodeId) -> Result<usize, TreeError> {
        let mut d = 0;
        let mut cur = id;
        self.node(cur)?;
        while let Some((p, _)) = self.parents[cur.0 as usize] {
            d += 1;
            cur = p;
        }
        Ok(d)
    }

    /// Grows the tree with one materialized child. Terminal parents refuse
    /// expansion; the new node starts unvisited with Q = 0.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        action: GuiAction,
        state_ref: StateFingerprint,
        meta: impl Into<String>,
        prior_rank: u32,
        prior_bonus: f64,
    ) -> Result<NodeId, TreeError> {
        let pstatus = self.node(parent)?.status;
        if pstatus != NodeStatus::Intermediate {
            return Err(TreeError::ExpandTerminal { parent, status: pstatus });
        }
        let id = NodeId(self.nodes.len() as u64);
        self.nodes.push(TreeNode {
            id,
            state_ref,
            meta: meta.into(),
            q_value: 0.0,
            visit_count: 0,
            status: NodeStatus::Intermediate,
            prior_rank,
            prior_bonus,
        });
        let edge_idx = self.edges.len();
        self.edges.push(TreeEdge { parent, action, child: id });
        self.parents.push(Some((parent, edge_idx)));
        self.children.push(Vec::new());
        self.children[parent.0 as usize].push(id);
        Ok(id)
    }

    pub fn set_status(&mut self, id: NodeId, status: NodeStatus) -> Result<(), TreeError> {
        if status == NodeStatus::Success && !self.children[id.0 as usize].is_empty() {
            return Err(TreeError::Invariant(format!(
                "{id} has children and cannot be marked success"
            )));
        }
        self.node_mut(id)?.status = status;
        Ok(())
    }

    /// Applies one reward to a single node's running statistics.
    pub fn apply_reward(&mut self, id: NodeId, reward: f64) -> Result<(), TreeError> {
        let node = self.node_mut(id)?;
        let (q, n) = update_q(node.q_value, node.visit_count, reward)?;
        node.q_value = q;
        node.visit_count = n;
        Ok(())
    }

    /// Records that `intent`'s trajectory ends at `endpoint`. Re-attaching
    /// an identical pair is a no-op; returns whether anything was added.
    pub fn attach_intent(
        &mut self,
        intent: IntentRecord,
        endpoint: NodeId,
    ) -> Result<bool, TreeError> {
        self.node(endpoint)?;
        if self
            .intents
            .iter()
            .any(|a| a.endpoint == endpoint && a.intent.text == intent.text)
        {
            return Ok(false);
        }
        self.intents.push(IntentAttachment {
            intent,
            endpoint,
            verdict: NodeStatus::Success,
        });
        Ok(true)
    }

    pub fn attachments(&self) -> &[IntentAttachment] {
        &self.intents
    }

    /// The unique root path to `id` as `(state acted in, action, arrival
    /// description)` steps. The root itself yields an empty path.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<PathStep>, TreeError> {
        self.node(id)?;
        let mut rev = Vec::new();
        let mut cur = id;
        while let Some((parent, edge_idx)) = self.parents[cur.0 as usize] {
            let edge = &self.edges[edge_idx];
            rev.push(PathStep {
                state_ref: self.nodes[parent.0 as usize].state_ref,
                action: edge.action.clone(),
                meta: self.nodes[cur.0 as usize].meta.clone(),
            });
            cur = parent;
        }
        rev.reverse();
        Ok(rev)
    }

    /// Checks every structural invariant the type cannot enforce on its own:
    /// single-parent acyclicity, Q ranges, dense sibling ranks, terminal
    /// leaves, visit conservation, and attachment verdicts.
    pub fn check_invariants(&self) -> Result<(), TreeError> {
        let fail = |msg: String| Err(TreeError::Invariant(msg));
        if self.nodes.is_empty() || self.root != NodeId(0) {
            return fail("root must be node 0".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.0 != i as u64 {
                return fail(format!("node at index {i} has id {}", n.id));
            }
            if !(0.0..=1.0).contains(&n.q_value) {
                return fail(format!("{} has Q {} outside [0,1]", n.id, n.q_value));
            }
            if n.status == NodeStatus::Success && !self.children[i].is_empty() {
                return fail(format!("{} is success but has children", n.id));
            }
        }
        // Every non-root node reachable from the root exactly once.
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if seen[id.0 as usize] {
                return fail(format!("{id} reached twice; not a tree"));
            }
            seen[id.0 as usize] = true;
            stack.extend(self.children[id.0 as usize].iter().copied());
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return fail(format!("n{orphan} unreachable from root"));
        }
        // Sibling ranks dense from 0; child visits never exceed the parent's.
        for (i, kids) in self.children.iter().enumerate() {
            let mut ranks: Vec<u32> = kids
                .iter()
                .map(|c| self.nodes[c.0 as usize].prior_rank)
                .collect();
            ranks.sort_unstable();
            for (want, got) in ranks.iter().enumerate() {
                if *got != want as u32 {
                    return fail(format!("n{i} sibling ranks not dense from 0"));
                }
            }
            let child_visits: u64 = kids
                .iter()
                .map(|c| self.nodes[c.0 as usize].visit_count)
                .sum();
            if child_visits > self.nodes[i].visit_count {
                return fail(format!(
                    "n{i} visits {} < children total {}",
                    self.nodes[i].visit_count, child_visits
                ));
            }
        }
        for a in &self.intents {
            if a.verdict != NodeStatus::Success {
                return fail(format!(
                    "attachment for {:?} at {} carries non-success verdict",
                    a.intent.text, a.endpoint
                ));
            }
            if a.endpoint.0 as usize >= self.nodes.len() {
                return fail(format!("attachment endpoint {} missing", a.endpoint));
            }
        }
        Ok(())
    }

    // -- serialization ------------------------------------------------------

    pub fn to_json_string(&self) -> Result<String, TreeError> {
        let doc = TreeDoc {
            schema: TREE_SCHEMA.to_string(),
            tree_id: self.tree_id.clone(),
            original_intent: self.original_intent.clone(),
            root: self.root,
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            intents: self.intents.clone(),
        };
        Ok(canonical_json_pretty(&doc)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self, TreeError> {
        let doc: TreeDoc = serde_json::from_str(s)?;
        if doc.schema != TREE_SCHEMA {
            return Err(TreeError::Schema(format!(
                "expected schema {TREE_SCHEMA:?}, got {:?}",
                doc.schema
            )));
        }
        let n = doc.nodes.len();
        let mut parents: Vec<Option<(NodeId, usize)>> = vec![None; n];
        let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (idx, e) in doc.edges.iter().enumerate() {
            let (p, c) = (e.parent.0 as usize, e.child.0 as usize);
            if p >= n || c >= n {
                return Err(TreeError::Schema(format!(
                    "edge {} -> {} references missing node",
                    e.parent, e.child
                )));
            }
            if parents[c].is_some() || e.child == doc.root {
                return Err(TreeError::Schema(format!("{} has two parents", e.child)));
            }
            parents[c] = Some((e.parent, idx));
            children[p].push(e.child);
        }
        let tree = IntentTree {
            tree_id: doc.tree_id,
            original_intent: doc.original_intent,
            root: doc.root,
            nodes: doc.nodes,
            edges: doc.edges,
            intents: doc.intents,
            parents,
            children,
        };
        tree.check_invariants()
            .map_err(|e| TreeError::Schema(e.to_string()))?;
        Ok(tree)
    }

    /// Graphviz rendering: one record node per tree node
    /// (`id | Q=…,N=… | status`), edges labelled with action summaries.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph intent_tree {\n");
        out.push_str("  rankdir=TB;\n  node [shape=record];\n");
        for n in &self.nodes {
            out.push_str(&format!(
                "  {} [label=\"{} | Q={:.4},N={} | {}\"];\n",
                n.id, n.id, n.q_value, n.visit_count, n.status
            ));
        }
        for e in &self.edges {
            out.push_str(&format!(
                "  {} -> {} [label=\"{}\"];\n",
                e.parent,
                e.child,
                dot_escape(&e.action.summary())
            ));
        }
        out.push_str("}\n");
        out
    }
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '"' | '\\' | '|' | '{' | '}' | '<' | '>' => {
                out.push('\\');
                out.push(ch);
            }
            _ => out.push(ch),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn click(x: i32, y: i32) -> GuiAction {
        GuiAction::Click { coordinate: PixelPoint(x, y) }
    }

    #[test]
    fn uct_matches_frozen_value() {
        // 0.5 + 1.0 * sqrt(ln(2) / 1), evaluated at 40 digits and frozen.
        let got = uct_score(0.5, 2, 1, 1.0).unwrap();
        assert!((got - 1.3325546111576978).abs() < TOL);
    }

    #[test]
    fn uct_with_zero_exploration_is_pure_exploitation() {
        assert_eq!(uct_score(0.75, 100, 3, 0.0).unwrap(), 0.75);
    }

    #[test]
    fn uct_rejects_zero_visits_and_bad_constants() {
        assert!(matches!(
            uct_score(0.5, 0, 1, 1.0),
            Err(TreeError::InvalidVisitCount { which: "parent_visits" })
        ));
        assert!(matches!(
            uct_score(0.5, 2, 0, 1.0),
            Err(TreeError::InvalidVisitCount { which: "child_visits" })
        ));
        assert!(matches!(
            uct_score(0.5, 2, 1, -0.5),
            Err(TreeError::InvalidExploration(_))
        ));
    }

    #[test]
    fn reward_normalization_matches_frozen_values() {
        // sigmoid(1) at 40 digits.
        let one_step = normalize_intermediate_reward(1.0, 0.0).unwrap();
        assert!((one_step - 0.7310585786300049).abs() < TOL);
        assert_eq!(normalize_intermediate_reward(0.0, 0.0).unwrap(), 0.5);
        // Extreme logits saturate without overflowing.
        let hot = normalize_intermediate_reward(50.0, -50.0).unwrap();
        assert!((hot - 1.0).abs() < TOL);
        let cold = normalize_intermediate_reward(-50.0, 50.0).unwrap();
        assert!(cold > 0.0 && cold < 1e-40);
    }

    #[test]
    fn reward_normalization_rejects_non_finite_logits() {
        assert!(normalize_intermediate_reward(f64::NAN, 0.0).is_err());
        assert!(normalize_intermediate_reward(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn q_update_matches_running_mean() {
        let (q, n) = update_q(0.8, 3, 0.2).unwrap();
        assert!((q - 0.65).abs() < TOL);
        assert_eq!(n, 4);
        // Fresh node: previous Q is ignored even if garbage.
        let (q, n) = update_q(f64::NAN, 0, 0.7).unwrap();
        assert_eq!((q, n), (0.7, 1));
    }

    #[test]
    fn q_update_rejects_out_of_range_rewards() {
        assert!(matches!(update_q(0.5, 1, 1.2), Err(TreeError::RewardOutOfRange(_))));
        assert!(update_q(0.5, 1, -0.1).is_err());
        assert!(update_q(0.5, 1, f64::NAN).is_err());
    }

    #[test]
    fn terminal_rewards_are_binary() {
        assert_eq!(terminal_reward(NodeStatus::Success).unwrap(), 1.0);
        assert_eq!(terminal_reward(NodeStatus::Failure).unwrap(), 0.0);
        assert!(matches!(
            terminal_reward(NodeStatus::Intermediate),
            Err(TreeError::TerminalRewardOnIntermediate)
        ));
    }

    #[test]
    fn unvisited_bonus_decays_geometrically() {
        assert_eq!(unvisited_bonus(1.0, 0.5, 0), 1.0);
        assert_eq!(unvisited_bonus(1.0, 0.5, 1), 0.5);
        assert_eq!(unvisited_bonus(1.0, 0.5, 2), 0.25);
    }

    proptest! {
        // Direct oracle comparison: the exploration term recomputed through
        // an independent exp/log route must agree to 1e-12.
        #[test]
        fn uct_matches_alternate_route_oracle(
            q in 0.0..=1.0f64,
            parent in 2u64..1_000_000_000,
            child_frac in 0.0..=1.0f64,
            c in 0.0..10.0f64,
        ) {
            let child = (1 + (child_frac * (parent - 1) as f64) as u64).min(parent);
            let s = uct_score(q, parent, child, c).unwrap();
            let explore = (0.5 * ((parent as f64).ln().ln() - (child as f64).ln())).exp();
            let oracle = q + c * explore;
            prop_assert!((s - oracle).abs() <= 1e-12);
        }

        #[test]
        fn uct_monotone_in_parent_and_child(
            q in 0.0..=1.0f64,
            parent in 2u64..1_000_000,
            child in 1u64..1_000,
            c in 0.01..10.0f64,
        ) {
            prop_assume!(child <= parent);
            let s = uct_score(q, parent, child, c).unwrap();
            prop_assert!(uct_score(q, parent * 2, child, c).unwrap() > s);
            prop_assert!(uct_score(q, parent, child + 1, c).unwrap() < s);
        }

        // Cross-check against the direct two-exponential form computed with
        // max-subtraction -- an independent evaluation route.
        #[test]
        fn reward_normalization_matches_direct_softmax(
            lv in -700.0..700.0f64,
            li in -700.0..700.0f64,
        ) {
            let got = normalize_intermediate_reward(lv, li).unwrap();
            let m = lv.max(li);
            let oracle = (lv - m).exp() / ((lv - m).exp() + (li - m).exp());
            prop_assert!((got - oracle).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
            // Strict interior wherever f64 resolution allows one; beyond a
            // ~37 logit gap the true value rounds onto the boundary.
            if (lv - li).abs() < 30.0 {
                prop_assert!(got > 0.0 && got < 1.0);
            }
        }

        #[test]
        fn reward_normalization_complement_and_shift(
            lv in -300.0..300.0f64,
            li in -300.0..300.0f64,
            shift in -300.0..300.0f64,
        ) {
            let r = normalize_intermediate_reward(lv, li).unwrap();
            let flipped = normalize_intermediate_reward(li, lv).unwrap();
            prop_assert!((r + flipped - 1.0).abs() < 1e-12);
            let shifted = normalize_intermediate_reward(lv + shift, li + shift).unwrap();
            prop_assert!((r - shifted).abs() < 1e-9);
        }

        // Folding k rewards equals their arithmetic mean.
        #[test]
        fn q_update_fold_equals_mean(rewards in prop::collection::vec(0.0..=1.0f64, 1..50)) {
            let mut q = 0.0;
            let mut n = 0u64;
            for &r in &rewards {
                let (nq, nn) = update_q(q, n, r).unwrap();
                q = nq;
                n = nn;
            }
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            prop_assert_eq!(n, rewards.len() as u64);
            prop_assert!((q - mean).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&q));
        }
    }

    // -- structure ----------------------------------------------------------

    fn three_branch_tree() -> (IntentTree, NodeId) {
        let intent = IntentRecord::seed("demo", Stage::Stage1);
        let mut t = IntentTree::new("t0", intent, StateFingerprint(1));
        // Depth-4 path inside a tree where every expanded node has 3 children.
        let mut deep = t.root();
        for level in 0..4u64 {
            let mut first = None;
            for rank in 0..3u32 {
                let id = t
                    .add_child(
                        deep,
                        click(10 * (rank as i32 + 1), 20 * (level as i32 + 1)),
                        StateFingerprint(100 * level + rank as u64 + 2),
                        format!("level {level} rank {rank}"),
                        rank,
                        unvisited_bonus(1.0, 0.5, rank),
                    )
                    .unwrap();
                if rank == 0 {
                    first = Some(id);
                }
            }
            deep = first.unwrap();
        }
        (t, deep)
    }

    #[test]
    fn path_to_matches_exhaustive_edge_walk() {
        let (t, deep) = three_branch_tree();
        assert_eq!(t.depth(deep).unwrap(), 4);
        let path = t.path_to(deep).unwrap();
        assert_eq!(path.len(), 4);
        assert_eq!(path[0].state_ref, StateFingerprint(1));

        // Independent oracle: find the unique root path by scanning the raw
        // edge list backwards from the endpoint.
        let mut oracle_rev = Vec::new();
        let mut cur = deep;
        'walk: while cur != t.root() {
            for e in t.edges() {
                if e.child == cur {
                    oracle_rev.push((t.node(e.parent).unwrap().state_ref, e.action.clone()));
                    cur = e.parent;
                    continue 'walk;
                }
            }
            panic!("no parent edge for {cur}");
        }
        oracle_rev.reverse();
        let got: Vec<_> = path.iter().map(|s| (s.state_ref, s.action.clone())).collect();
        assert_eq!(got, oracle_rev);
    }

    #[test]
    fn path_to_root_is_empty() {
        let (t, _) = three_branch_tree();
        assert!(t.path_to(t.root()).unwrap().is_empty());
    }

    #[test]
    fn success_nodes_refuse_children() {
        let (mut t, deep) = three_branch_tree();
        t.set_status(deep, NodeStatus::Success).unwrap();
        let err = t.add_child(deep, click(1, 1), StateFingerprint(9), "x", 0, 1.0);
        assert!(matches!(err, Err(TreeError::ExpandTerminal { .. })));
        // And a node with children cannot be flipped to success.
        let parent = t.parent_of(deep).unwrap().unwrap();
        assert!(t.set_status(parent, NodeStatus::Success).is_err());
    }

    #[test]
    fn attach_intent_is_idempotent() {
        let (mut t, deep) = three_branch_tree();
        let extra = IntentRecord::new("side quest", IntentOrigin::Recycled, Stage::Stage3);
        assert!(t.attach_intent(extra.clone(), deep).unwrap());
        assert!(!t.attach_intent(extra, deep).unwrap());
        assert_eq!(t.attachments().len(), 1);
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let (mut t, deep) = three_branch_tree();
        let mut cur = Some(deep);
        while let Some(id) = cur {
            t.apply_reward(id, 0.73).unwrap();
            cur = t.parent_of(id).unwrap();
        }
        t.set_status(deep, NodeStatus::Success).unwrap();
        t.attach_intent(t.original_intent.clone(), deep).unwrap();
        let a = t.to_json_string().unwrap();
        let parsed = IntentTree::from_json_str(&a).unwrap();
        assert_eq!(parsed, t);
        let b = parsed.to_json_string().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schema_and_structure_violations_are_rejected() {
        let (t, _) = three_branch_tree();
        let good = t.to_json_string().unwrap();
        let bad_schema = good.replace("m2tree/1", "m2tree/2");
        assert!(matches!(
            IntentTree::from_json_str(&bad_schema),
            Err(TreeError::Schema(_)) | Err(TreeError::Json(_))
        ));
        // Duplicate a child edge: no longer a tree.
        let mut doc: serde_json::Value = serde_json::from_str(&good).unwrap();
        let edges = doc["edges"].as_array_mut().unwrap();
        let dup = edges[0].clone();
        edges.push(dup);
        let mangled = serde_json::to_string(&doc).unwrap();
        assert!(IntentTree::from_json_str(&mangled).is_err());
    }

    #[test]
    fn dot_export_matches_golden() {
        let intent = IntentRecord::seed("demo", Stage::Stage1);
        let mut t = IntentTree::new("t0", intent, StateFingerprint(0xabc));
        let a = t
            .add_child(t.root(), click(150, 260), StateFingerprint(0xdef), "open", 0, 1.0)
            .unwrap();
        t.add_child(
            a,
            GuiAction::Type { text: "a|b".into() },
            StateFingerprint(0x123),
            "fill",
            0,
            1.0,
        )
        .unwrap();
        t.apply_reward(a, 0.5).unwrap();
        t.apply_reward(t.root(), 0.5).unwrap();
        let golden = "digraph intent_tree {\n  rankdir=TB;\n  node [shape=record];\n  n0 [label=\"n0 | Q=0.5000,N=1 | intermediate\"];\n  n1 [label=\"n1 | Q=0.5000,N=1 | intermediate\"];\n  n2 [label=\"n2 | Q=0.0000,N=0 | intermediate\"];\n  n0 -> n1 [label=\"click(150,260)\"];\n  n1 -> n2 [label=\"type(\\\"a\\|b\\\")\"];\n}\n";
        assert_eq!(t.to_dot(), golden);
    }

    #[test]
    fn action_serde_shapes_are_stable() {
        let cases = [
            (click(3, 4), r#"{"coordinate":[3,4],"kind":"click"}"#),
            (
                GuiAction::LongPress { coordinate: PixelPoint(1, 2), duration_s: 1.5 },
                r#"{"coordinate":[1,2],"duration_s":1.5,"kind":"long_press"}"#,
            ),
            (
                GuiAction::Swipe {
                    coordinate: PixelPoint(0, 9),
                    coordinate2: PixelPoint(0, 1),
                },
                r#"{"coordinate":[0,9],"coordinate2":[0,1],"kind":"swipe"}"#,
            ),
            (GuiAction::Type { text: "hi".into() }, r#"{"kind":"type","text":"hi"}"#),
            (GuiAction::Key { text: "volume_up".into() }, r#"{"kind":"key","text":"volume_up"}"#),
            (GuiAction::Wait { duration_s: 2.0 }, r#"{"duration_s":2.0,"kind":"wait"}"#),
            (
                GuiAction::SystemButton { button: SystemButton::Back },
                r#"{"button":"Back","kind":"system_button"}"#,
            ),
            (
                GuiAction::Terminate { status: TerminateStatus::Success },
                r#"{"kind":"terminate","status":"success"}"#,
            ),
        ];
        for (action, wire) in cases {
            assert_eq!(action.canonical_key(), wire);
            let back: GuiAction = serde_json::from_str(wire).unwrap();
            assert_eq!(back, action);
        }
    }

    proptest! {
        // Random growth sequences keep every structural invariant.
        #[test]
        fn random_growth_preserves_invariants(
            ops in prop::collection::vec((0usize..20, 0.0..=1.0f64), 1..60)
        ) {
            let intent = IntentRecord::seed("p", Stage::Warmup);
            let mut t = IntentTree::new("tp", intent, StateFingerprint(7));
            for (pick, reward) in ops {
                let target = NodeId((pick % t.len()) as u64);
                if t.node(target).unwrap().status == NodeStatus::Intermediate {
                    let rank = t.children(target).unwrap().len() as u32;
                    let id = t.add_child(
                        target,
                        click(rank as i32, 0),
                        StateFingerprint(1000 + t.len() as u64),
                        "step",
                        rank,
                        unvisited_bonus(1.0, 0.5, rank),
                    ).unwrap();
                    // Visit the new leaf and every ancestor, as a search would.
                    let mut cur = Some(id);
                    while let Some(c) = cur {
                        t.apply_reward(c, reward).unwrap();
                        cur = t.parent_of(c).unwrap();
                    }
                }
            }
            t.check_invariants().unwrap();
            for node in t.nodes() {
                prop_assert_eq!(t.path_to(node.id).unwrap().len(), t.depth(node.id).unwrap());
            }
        }
    }
}
