//! Training-data extraction from finished trees, the metric suite used to
//! grade mining runs (SR/TP/MSR/DQA), and the annotation-cost estimator.
//!
//! Three row channels are exported as JSONL: `act` (one action per step),
//! `des` (one description per step), and `pref` (preference pairs built
//! from success-path actions versus their abandoned siblings). Exports are
//! canonical — sorted keys, stable float formatting — so identical inputs
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simenv::{EnvError, GoalStatus, ScreenGraph, TransitionOutcome};
use crate::tree::{
    GuiAction, IntentAttachment, IntentRecord, IntentTree, NodeId, NodeStatus, PathStep,
    StateFingerprint, TreeError,
};
use crate::util::{canonical_json, canonical_json_pretty, write_atomic};

pub const DATA_SCHEMA: &str = "m2data/1";

/// Per-node ceiling on rejected siblings when building preference pairs.
pub const DEFAULT_PREF_CAP: usize = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset input: {0}")]
    Validation(String),
    #[error("export rejected: {0}")]
    Schema(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// One finished trajectory lifted out of a tree: the intent it serves, the
/// ordered steps that realize it, and the verdict its endpoint carried.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedTrajectory {
    pub intent: IntentRecord,
    pub steps: Vec<PathStep>,
    pub terminal_status: NodeStatus,
    pub source_tree: String,
}

impl MinedTrajectory {
    /// Lifts the root path ending at `endpoint` out of `tree`. The root
    /// itself is rejected: a trajectory with nothing in it trains nothing.
    pub fn from_tree_path(
        tree: &IntentTree,
        intent: IntentRecord,
        endpoint: NodeId,
        terminal_status: NodeStatus,
    ) -> Result<Self, DatasetError> {
        let steps = tree.path_to(endpoint)?;
        if steps.is_empty() {
            return Err(DatasetError::Validation(format!(
                "endpoint {endpoint} is the root; trajectories need at least one step"
            )));
        }
        Ok(MinedTrajectory {
            intent,
            steps,
            terminal_status,
            source_tree: tree.tree_id.clone(),
        })
    }

    pub fn from_attachment(
        tree: &IntentTree,
        attachment: &IntentAttachment,
    ) -> Result<Self, DatasetError> {
        Self::from_tree_path(
            tree,
            attachment.intent.clone(),
            attachment.endpoint,
            attachment.verdict,
        )
    }

    pub fn actions(&self) -> impl Iterator<Item = &GuiAction> {
        self.steps.iter().map(|s| &s.action)
    }
}

/// Every exportable trajectory in a tree: one per attached intent, in
/// attachment order. Attachments sitting on the root (goal already held
/// before any action) are skipped — they have no steps to export.
pub fn tree_trajectories(tree: &IntentTree) -> Result<Vec<MinedTrajectory>, DatasetError> {
    let mut out = Vec::new();
    for att in tree.attachments() {
        if att.endpoint == tree.root() {
            log::debug!(
                "skipping zero-step trajectory for {:?} in {}",
                att.intent.text,
                tree.tree_id
            );
            continue;
        }
        out.push(MinedTrajectory::from_attachment(tree, att)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Preference pairs
// ---------------------------------------------------------------------------

/// The decision point a preference pair was lifted from: which intent was
/// being mined, which state the agent stood in, and how it got there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceContext {
    pub intent: IntentRecord,
    pub state_ref: StateFingerprint,
    pub history: Vec<GuiAction>,
}

/// A success-path action paired against one sibling the search tried and
/// did not pursue to success. Both actions left the same node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: PreferenceContext,
    pub chosen: GuiAction,
    pub rejected: GuiAction,
}

/// Builds preference pairs from every attached intent's success path. At
/// each path node the arriving action of the next path node is `chosen`;
/// every sibling child that did not end in success contributes one
/// `rejected` action, worst Q first, at most `cap_per_node` per node.
pub fn extract_preference_pairs(
    tree: &IntentTree,
    cap_per_node: usize,
) -> Result<Vec<PreferencePair>, DatasetError> {
    let mut out = Vec::new();
    for att in tree.attachments() {
        let steps = tree.path_to(att.endpoint)?;
        // Walk the node ids alongside the steps: path_nodes[i] is the node
        // the i-th action was taken in.
        let mut path_nodes = Vec::with_capacity(steps.len() + 1);
        let mut cur = att.endpoint;
        path_nodes.push(cur);
        while let Some(p) = tree.parent_of(cur)? {
            path_nodes.push(p);
            cur = p;
        }
        path_nodes.reverse();

        let path_keys: Vec<String> =
            steps.iter().map(|s| s.action.canonical_key()).collect();
        let mut history: Vec<GuiAction> = Vec::new();
        for (i, step) in steps.iter().enumerate() {
            let here = path_nodes[i];
            let next_on_path = path_nodes[i + 1];
            let mut losers: Vec<(f64, NodeId, GuiAction)> = Vec::new();
            for &sib in tree.children(here)? {
                if sib == next_on_path {
                    continue;
                }
                let n = tree.node(sib)?;
                if n.status == NodeStatus::Success {
                    continue;
                }
                let action = tree
                    .arriving_action(sib)?
                    .expect("non-root nodes always have an arriving action")
                    .clone();
                // An action demonstrated anywhere on the success path is
                // never also held out as a negative for the same intent.
                if path_keys.contains(&action.canonical_key()) {
                    continue;
                }
                losers.push((n.q_value, sib, action));
            }
            losers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            losers.truncate(cap_per_node);
            for (_, _, rejected) in losers {
                out.push(PreferencePair {
                    context: PreferenceContext {
                        intent: att.intent.clone(),
                        state_ref: step.state_ref,
                        history: history.clone(),
                    },
                    chosen: step.action.clone(),
                    rejected,
                });
            }
            history.push(step.action.clone());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Export / import
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataChannel {
    Act,
    Des,
    Pref,
}

impl DataChannel {
    pub fn name(&self) -> &'static str {
        match self {
            DataChannel::Act => "act",
            DataChannel::Des => "des",
            DataChannel::Pref => "pref",
        }
    }

    fn file_name(&self) -> &'static str {
        match self {
            DataChannel::Act => "act.jsonl",
            DataChannel::Des => "des.jsonl",
            DataChannel::Pref => "pref.jsonl",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ActRow {
    channel: String,
    source_tree: String,
    intent: IntentRecord,
    step_index: u64,
    state_ref: StateFingerprint,
    action: GuiAction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DesRow {
    channel: String,
    source_tree: String,
    intent: IntentRecord,
    step_index: u64,
    state_ref: StateFingerprint,
    description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrefRow {
    channel: String,
    source_tree: String,
    context: PreferenceContext,
    chosen: GuiAction,
    rejected: GuiAction,
}

/// What an export produced: row counts and file names per channel. Written
/// next to the data files as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub schema: String,
    pub channels: Vec<String>,
    pub trees: u64,
    pub trajectories: u64,
    pub rows: BTreeMap<String, u64>,
    pub files: BTreeMap<String, String>,
}

/// Writes the requested channels for `trees` under `out_dir` and returns
/// the manifest. `act`/`des` get one row per (intent, step); `pref` one row
/// per preference pair. Output is canonical: rerunning on equal input
/// yields byte-identical files.
pub fn export_trajectories(
    trees: &[IntentTree],
    out_dir: &Path,
    channels: &[DataChannel],
) -> Result<ExportManifest, DatasetError> {
    if channels.is_empty() {
        return Err(DatasetError::Validation(
            "select at least one export channel".into(),
        ));
    }
    let mut wanted: Vec<DataChannel> = channels.to_vec();
    wanted.sort_unstable();
    wanted.dedup();

    for tree in trees {
        tree.check_invariants()?;
    }

    let mut rows: BTreeMap<String, u64> = BTreeMap::new();
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut trajectory_count = 0u64;

    let mut act_lines = String::new();
    let mut des_lines = String::new();
    let mut pref_lines = String::new();

    for tree in trees {
        let trajectories = tree_trajectories(tree)?;
        trajectory_count += trajectories.len() as u64;
        for traj in &trajectories {
            debug_assert_eq!(traj.terminal_status, NodeStatus::Success);
            for (i, step) in traj.steps.iter().enumerate() {
                if wanted.contains(&DataChannel::Act) {
                    push_row(
                        &mut act_lines,
                        &ActRow {
                            channel: "act".into(),
                            source_tree: traj.source_tree.clone(),
                            intent: traj.intent.clone(),
                            step_index: i as u64,
                            state_ref: step.state_ref,
                            action: step.action.clone(),
                        },
                    )?;
                }
                if wanted.contains(&DataChannel::Des) {
                    push_row(
                        &mut des_lines,
                        &DesRow {
                            channel: "des".into(),
                            source_tree: traj.source_tree.clone(),
                            intent: traj.intent.clone(),
                            step_index: i as u64,
                            state_ref: step.state_ref,
                            description: step.meta.clone(),
                        },
                    )?;
                }
            }
        }
        if wanted.contains(&DataChannel::Pref) {
            for pair in extract_preference_pairs(tree, DEFAULT_PREF_CAP)? {
                push_row(
                    &mut pref_lines,
                    &PrefRow {
                        channel: "pref".into(),
                        source_tree: tree.tree_id.clone(),
                        context: pair.context.clone(),
                        chosen: pair.chosen.clone(),
                        rejected: pair.rejected.clone(),
                    },
                )?;
            }
        }
    }

    for ch in &wanted {
        let (content, count) = match ch {
            DataChannel::Act => (&act_lines, act_lines.lines().count() as u64),
            DataChannel::Des => (&des_lines, des_lines.lines().count() as u64),
            DataChannel::Pref => (&pref_lines, pref_lines.lines().count() as u64),
        };
        write_atomic(&out_dir.join(ch.file_name()), content.as_bytes())?;
        rows.insert(ch.name().to_string(), count);
        files.insert(ch.name().to_string(), ch.file_name().to_string());
    }

    let manifest = ExportManifest {
        schema: DATA_SCHEMA.to_string(),
        channels: wanted.iter().map(|c| c.name().to_string()).collect(),
        trees: trees.len() as u64,
        trajectories: trajectory_count,
        rows,
        files,
    };
    write_atomic(
        &out_dir.join("manifest.json"),
        canonical_json_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

fn push_row<T: Serialize>(buf: &mut String, row: &T) -> Result<(), DatasetError> {
    buf.push_str(&canonical_json(row)?);
    buf.push('\n');
    Ok(())
}

/// Reads an export directory back into trajectories. Steps come from the
/// `act` channel; descriptions are joined in from `des` when it was
/// exported (absent `des`, metas come back empty). Trajectory order is the
/// order rows first appear, which is the order they were exported in.
pub fn import_trajectories(dir: &Path) -> Result<Vec<MinedTrajectory>, DatasetError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: ExportManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.schema != DATA_SCHEMA {
        return Err(DatasetError::Schema(format!(
            "expected schema {DATA_SCHEMA:?}, got {:?}",
            manifest.schema
        )));
    }
    let act_path = manifest
        .files
        .get("act")
        .map(|f| dir.join(f))
        .ok_or_else(|| {
            DatasetError::Schema("import needs the act channel to rebuild steps".into())
        })?;

    let mut order: Vec<(String, String)> = Vec::new();
    let mut grouped: BTreeMap<(String, String), (IntentRecord, Vec<(u64, PathStep)>)> =
        BTreeMap::new();
    for line in read_lines(&act_path)? {
        let row: ActRow = serde_json::from_str(&line)?;
        let key = (row.source_tree.clone(), row.intent.id.clone());
        let entry = grouped.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (row.intent.clone(), Vec::new())
        });
        entry.1.push((
            row.step_index,
            PathStep {
                state_ref: row.state_ref,
                action: row.action,
                meta: String::new(),
            },
        ));
    }

    if let Some(des_file) = manifest.files.get("des") {
        let mut metas: BTreeMap<(String, String, u64), String> = BTreeMap::new();
        for line in read_lines(&dir.join(des_file))? {
            let row: DesRow = serde_json::from_str(&line)?;
            metas.insert(
                (row.source_tree, row.intent.id, row.step_index),
                row.description,
            );
        }
        for ((tree_id, intent_id), (_, steps)) in grouped.iter_mut() {
            for (idx, step) in steps.iter_mut() {
                if let Some(m) = metas.get(&(tree_id.clone(), intent_id.clone(), *idx)) {
                    step.meta = m.clone();
                }
            }
        }
    }

    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let (intent, mut steps) = grouped.remove(&key).expect("keyed by appearance");
        steps.sort_by_key(|(i, _)| *i);
        for (want, (got, _)) in steps.iter().enumerate() {
            if *got != want as u64 {
                return Err(DatasetError::Schema(format!(
                    "trajectory {} in {} skips step {want}",
                    key.1, key.0
                )));
            }
        }
        out.push(MinedTrajectory {
            intent,
            steps: steps.into_iter().map(|(_, s)| s).collect(),
            terminal_status: NodeStatus::Success,
            source_tree: key.0,
        });
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>, DatasetError> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Step-level accuracy of predicted actions against ground truth. `SR`
/// counts exact matches (type and every parameter); `TP` counts matches of
/// the action type alone, so `SR <= TP` by construction.
pub fn compute_sr_tp(
    predicted: &[GuiAction],
    truth: &[GuiAction],
) -> Result<(f64, f64), DatasetError> {
    if predicted.len() != truth.len() {
        return Err(DatasetError::Validation(format!(
            "prediction/truth length mismatch: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(DatasetError::Validation(
            "step accuracy needs at least one step".into(),
        ));
    }
    let mut exact = 0usize;
    let mut typed = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        if p.kind() == t.kind() {
            typed += 1;
            if p.canonical_key() == t.canonical_key() {
                exact += 1;
            }
        }
    }
    let n = truth.len() as f64;
    Ok((exact as f64 / n, typed as f64 / n))
}

/// Fraction of mining attempts that succeeded.
pub fn compute_msr(successes: &[bool]) -> Result<f64, DatasetError> {
    if successes.is_empty() {
        return Err(DatasetError::Validation(
            "mining success rate needs at least one attempt".into(),
        ));
    }
    let hits = successes.iter().filter(|s| **s).count();
    Ok(hits as f64 / successes.len() as f64)
}

/// Fraction of trajectories that replay cleanly: every recorded state
/// matches, every action applies without error and actually moves the
/// environment (a no-op step disqualifies), and the final state satisfies
/// the trajectory's intent.
pub fn compute_dqa(
    trajectories: &[MinedTrajectory],
    graph: &ScreenGraph,
) -> Result<f64, DatasetError> {
    if trajectories.is_empty() {
        return Err(DatasetError::Validation(
            "data quality needs at least one trajectory".into(),
        ));
    }
    let mut correct = 0usize;
    for traj in trajectories {
        if replays_correctly(traj, graph)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / trajectories.len() as f64)
}

fn replays_correctly(
    traj: &MinedTrajectory,
    graph: &ScreenGraph,
) -> Result<bool, DatasetError> {
    let mut state = graph.initial_state();
    for step in &traj.steps {
        if state.fingerprint() != step.state_ref {
            return Ok(false);
        }
        match graph.apply(&state, &step.action) {
            Ok((next, TransitionOutcome::Moved)) => state = next,
            // No-ops and terminations are wasted or premature steps; any
            // rejected action disqualifies outright.
            Ok((_, _)) | Err(_) => return Ok(false),
        }
    }
    Ok(graph.goal_check(&traj.intent.text, &state)? == GoalStatus::Satisfied)
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// One compute phase: wall hours on a number of GPUs at a price per
/// GPU-hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputePhase {
    pub hours: f64,
    pub gpus: f64,
    pub price_per_gpu_hour: f64,
}

impl ComputePhase {
    pub const ZERO: ComputePhase = ComputePhase {
        hours: 0.0,
        gpus: 0.0,
        price_per_gpu_hour: 0.0,
    };

    pub fn new(hours: f64, gpus: f64, price_per_gpu_hour: f64) -> Self {
        ComputePhase { hours, gpus, price_per_gpu_hour }
    }

    fn cost(&self) -> f64 {
        self.hours * self.gpus * self.price_per_gpu_hour
    }

    fn is_valid(&self) -> bool {
        [self.hours, self.gpus, self.price_per_gpu_hour]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Rates behind the cost estimate: an hourly wage, per-image annotation and
/// inspection times, and the two compute phases a mined dataset pays for
/// (training the agents, then running the miner).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub r_wage: f64,
    pub t_annot: f64,
    pub t_inspect: f64,
    pub train: ComputePhase,
    pub mine: ComputePhase,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            r_wage: 7.0,
            t_annot: 0.05,
            t_inspect: 0.0014,
            train: ComputePhase::ZERO,
            mine: ComputePhase::ZERO,
        }
    }
}

impl CostParams {
    fn validate(&self) -> Result<(), DatasetError> {
        let rates_ok = [self.r_wage, self.t_annot, self.t_inspect]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !rates_ok || !self.train.is_valid() || !self.mine.is_valid() {
            return Err(DatasetError::Validation(
                "cost parameters must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostPipeline {
    /// Humans annotate and inspect every image.
    Manual,
    /// The miner generates the data; humans only inspect, and the GPUs are
    /// paid for.
    Mined,
}

impl std::fmt::Display for CostPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CostPipeline::Manual => "manual",
            CostPipeline::Mined => "mined",
        })
    }
}

/// Dollar breakdown of building a dataset. Values are exact; rounding to
/// whole currency units happens only at presentation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub annotation: f64,
    pub inspection: f64,
    pub compute: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn rounded_total(&self) -> i64 {
        self.total.round() as i64
    }
}

/// Estimated cost of `n_img` images. Manual pipelines pay wage-hours for
/// annotation plus inspection; mined pipelines pay inspection wage-hours
/// plus the training and mining compute in `params`.
pub fn estimate_cost(
    params: &CostParams,
    n_img: u64,
    pipeline: CostPipeline,
) -> Result<CostBreakdown, DatasetError> {
    params.validate()?;
    let n = n_img as f64;
    let inspection = n * params.t_inspect * params.r_wage;
    let (annotation, compute) = match pipeline {
        CostPipeline::Manual => (n * params.t_annot * params.r_wage, 0.0),
        CostPipeline::Mined => (0.0, params.train.cost() + params.mine.cost()),
    };
    Ok(CostBreakdown {
        annotation,
        inspection,
        compute,
        total: annotation + inspection + compute,
    })
}

// ---------------------------------------------------------------------------
// CSV emitters
// ---------------------------------------------------------------------------

/// One line of a cost comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLine {
    pub label: String,
    pub images: u64,
    pub pipeline: CostPipeline,
    pub breakdown: CostBreakdown,
}

/// Renders cost lines as CSV. Currency columns are rounded to whole units
/// here and nowhere earlier.
pub fn cost_table_csv(lines: &[CostLine]) -> String {
    let mut out = String::from("label,images,pipeline,annotation,inspection,compute,total\n");
    for l in lines {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&l.label),
            l.images,
            l.pipeline,
            l.breakdown.annotation.round() as i64,
            l.breakdown.inspection.round() as i64,
            l.breakdown.compute.round() as i64,
            l.breakdown.rounded_total(),
        ));
    }
    out
}

/// One row of a per-label metric table (a stage, a mode, a dataset...).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLine {
    pub label: String,
    pub msr: f64,
    pub dqa: f64,
}

pub fn metric_table_csv(lines: &[MetricLine]) -> String {
    let mut out = String::from("label,msr,dqa\n");
    for l in lines {
        out.push_str(&format!(
            "{},{:.4},{:.4}\n",
            csv_field(&l.label),
            l.msr,
            l.dqa
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{chain3, map_app, EnvSession, NavOracle};
    use crate::tree::{IntentOrigin, PixelPoint, Stage};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn click(x: i32) -> GuiAction {
        GuiAction::Click { coordinate: PixelPoint(x, 100) }
    }

    fn fp(v: u64) -> StateFingerprint {
        StateFingerprint(v)
    }

    /// Root -> a -> b -> c straight line with the intent attached at `c`,
    /// plus `extras` additional children of `a` (siblings of `b`).
    fn line_tree(extras: usize) -> IntentTree {
        let intent = IntentRecord::seed("reach the end", Stage::Stage1);
        let mut t = IntentTree::new("t-line", intent.clone(), fp(0));
        let a = t
            .add_child(t.root(), click(1), fp(1), "opened a", 0, 1.0)
            .unwrap();
        let b = t.add_child(a, click(2), fp(2), "opened b", 0, 1.0).unwrap();
        for i in 0..extras {
            let s = t
                .add_child(a, click(100 + i as i32), fp(100 + i as u64), "detour", 1 + i as u32, 0.5)
                .unwrap();
            // Backpropagate so visit counts stay conserved up the tree.
            for id in [s, a, t.root()] {
                t.apply_reward(id, 0.1 * (i + 1) as f64).unwrap();
            }
            t.set_status(s, NodeStatus::Failure).unwrap();
        }
        let c = t.add_child(b, click(3), fp(3), "reached c", 0, 1.0).unwrap();
        t.set_status(c, NodeStatus::Success).unwrap();
        t.attach_intent(intent, c).unwrap();
        t
    }

    #[test]
    fn trajectory_lifts_the_root_path() {
        let t = line_tree(0);
        let trajs = tree_trajectories(&t).unwrap();
        assert_eq!(trajs.len(), 1);
        let traj = &trajs[0];
        assert_eq!(traj.steps.len(), 3);
        assert_eq!(traj.terminal_status, NodeStatus::Success);
        assert_eq!(traj.source_tree, "t-line");
        assert_eq!(traj.steps[0].state_ref, fp(0));
        assert_eq!(traj.steps[1].state_ref, fp(1));
        assert_eq!(traj.steps[2].meta, "reached c");
        assert_eq!(
            traj.actions().map(|a| a.summary()).collect::<Vec<_>>(),
            ["click(1,100)", "click(2,100)", "click(3,100)"]
        );
    }

    #[test]
    fn root_endpoint_is_rejected_as_a_trajectory() {
        let t = line_tree(0);
        let err = MinedTrajectory::from_tree_path(
            &t,
            t.original_intent.clone(),
            t.root(),
            NodeStatus::Success,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::Validation(_)));
    }

    #[test]
    fn act_export_writes_one_row_per_step() {
        let t = line_tree(0);
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_trajectories(
            std::slice::from_ref(&t),
            dir.path(),
            &[DataChannel::Act],
        )
        .unwrap();
        assert_eq!(manifest.rows["act"], 3);
        assert_eq!(manifest.trajectories, 1);
        assert_eq!(manifest.channels, ["act"]);
        assert!(dir.path().join("act.jsonl").exists());
        assert!(dir.path().join("manifest.json").exists());
        assert!(!dir.path().join("pref.jsonl").exists());
    }

    #[test]
    fn single_sibling_yields_exactly_one_preference_row() {
        let t = line_tree(1);
        let pairs = extract_preference_pairs(&t, DEFAULT_PREF_CAP).unwrap();
        assert_eq!(pairs.len(), 1);
        let p = &pairs[0];
        assert_eq!(p.chosen.summary(), "click(2,100)");
        assert_eq!(p.rejected.summary(), "click(100,100)");
        assert_eq!(p.context.state_ref, fp(1));
        assert_eq!(p.context.history.len(), 1);
        assert_eq!(p.context.history[0].summary(), "click(1,100)");
        assert_ne!(p.chosen, p.rejected);

        let dir = tempfile::tempdir().unwrap();
        let manifest = export_trajectories(
            std::slice::from_ref(&t),
            dir.path(),
            &[DataChannel::Pref],
        )
        .unwrap();
        assert_eq!(manifest.rows["pref"], 1);
    }

    #[test]
    fn preference_cap_keeps_the_worst_siblings() {
        let t = line_tree(5);
        let pairs = extract_preference_pairs(&t, 3).unwrap();
        assert_eq!(pairs.len(), 3);
        // Siblings got rewards 0.1..0.5; the three lowest Q survive.
        let kept: Vec<String> = pairs.iter().map(|p| p.rejected.summary()).collect();
        assert_eq!(kept, ["click(100,100)", "click(101,100)", "click(102,100)"]);
    }

    #[test]
    fn export_import_round_trips() {
        let mut trees = vec![line_tree(1), line_tree(0)];
        trees[1].tree_id = "t-other".into();
        let dir = tempfile::tempdir().unwrap();
        export_trajectories(
            &trees,
            dir.path(),
            &[DataChannel::Act, DataChannel::Des, DataChannel::Pref],
        )
        .unwrap();
        let imported = import_trajectories(dir.path()).unwrap();
        let expected: Vec<MinedTrajectory> = trees
            .iter()
            .flat_map(|t| tree_trajectories(t).unwrap())
            .collect();
        assert_eq!(imported, expected);
    }

    #[test]
    fn reexport_is_byte_identical() {
        let trees = vec![line_tree(2)];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let all = [DataChannel::Act, DataChannel::Des, DataChannel::Pref];
        export_trajectories(&trees, a.path(), &all).unwrap();
        export_trajectories(&trees, b.path(), &all).unwrap();
        for name in ["act.jsonl", "des.jsonl", "pref.jsonl", "manifest.json"] {
            let left = fs::read(a.path().join(name)).unwrap();
            let right = fs::read(b.path().join(name)).unwrap();
            assert_eq!(left, right, "{name} differs between identical exports");
        }
    }

    #[test]
    fn empty_channel_selection_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_trajectories(&[], dir.path(), &[]),
            Err(DatasetError::Validation(_))
        ));
    }

    #[test]
    fn step_accuracy_definitions() {
        let truth = vec![click(1), click(2), GuiAction::Key { text: "enter".into() }];
        let (sr, tp) = compute_sr_tp(&truth, &truth).unwrap();
        assert_eq!((sr, tp), (1.0, 1.0));

        // Right types, wrong coordinates on half the steps.
        let truth = vec![click(1), click(2), click(3), click(4)];
        let predicted = vec![click(1), click(2), click(30), click(40)];
        let (sr, tp) = compute_sr_tp(&predicted, &truth).unwrap();
        assert_eq!((sr, tp), (0.5, 1.0));

        assert!(compute_sr_tp(&truth, &truth[..2]).is_err());
        assert!(compute_sr_tp(&[], &[]).is_err());
    }

    #[test]
    fn step_accuracy_matches_a_hand_count_on_a_random_fixture() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut truth = Vec::new();
        let mut predicted = Vec::new();
        let mut exact_hits = 0u32;
        let mut type_hits = 0u32;
        for i in 0..20 {
            let t = click(i);
            // Three prediction behaviours: exact copy, same type with
            // perturbed coordinates, or a different action type.
            let p = match rng.gen_range(0..3u8) {
                0 => {
                    exact_hits += 1;
                    type_hits += 1;
                    t.clone()
                }
                1 => {
                    type_hits += 1;
                    click(i + 1000)
                }
                _ => GuiAction::Wait { duration_s: 1.0 },
            };
            truth.push(t);
            predicted.push(p);
        }
        let (sr, tp) = compute_sr_tp(&predicted, &truth).unwrap();
        assert!((sr - exact_hits as f64 / 20.0).abs() < 1e-15);
        assert!((tp - type_hits as f64 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn mining_success_rate_is_a_plain_ratio() {
        assert_eq!(compute_msr(&[true, true, true, false]).unwrap(), 0.75);
        assert!(compute_msr(&[]).is_err());
    }

    /// Builds a clean trajectory for a declared intent by walking the
    /// navigation index greedily.
    fn optimal_trajectory(
        graph: &Arc<ScreenGraph>,
        nav: &NavOracle,
        intent_text: &str,
    ) -> MinedTrajectory {
        let mut state = graph.initial_state();
        let mut steps = Vec::new();
        while graph.goal_check(intent_text, &state).unwrap() != GoalStatus::Satisfied {
            let action = nav.optimal_actions(intent_text, &state).unwrap()[0].clone();
            let before = state.fingerprint();
            let (next, outcome) = graph.apply(&state, &action).unwrap();
            assert_eq!(outcome, TransitionOutcome::Moved);
            steps.push(PathStep { state_ref: before, action, meta: String::new() });
            state = next;
        }
        MinedTrajectory {
            intent: IntentRecord::seed(intent_text, Stage::Stage1),
            steps,
            terminal_status: NodeStatus::Success,
            source_tree: "t-replay".into(),
        }
    }

    #[test]
    fn replay_quality_detects_wasted_and_wrong_steps() {
        let graph = Arc::new(chain3());
        let nav = NavOracle::build_arc(Arc::clone(&graph)).unwrap();
        let intent = graph.intents().last().unwrap().text.clone();

        let good = optimal_trajectory(&graph, &nav, &intent);
        assert_eq!(compute_dqa(&[good.clone()], &graph).unwrap(), 1.0);

        // A wait in the middle is a no-op: endpoint still reaches the goal,
        // but the trajectory no longer counts as clean.
        let mut padded = good.clone();
        let mid_state = padded.steps[1].state_ref;
        padded.steps.insert(
            1,
            PathStep {
                state_ref: mid_state,
                action: GuiAction::Wait { duration_s: 1.0 },
                meta: String::new(),
            },
        );
        // The wait leaves the fingerprint unchanged apart from step_count,
        // which fingerprints ignore, so the recorded refs stay consistent.
        assert_eq!(compute_dqa(&[padded], &graph).unwrap(), 0.0);

        // Truncating the last step leaves the goal unmet.
        let mut short = good.clone();
        short.steps.pop();
        assert_eq!(compute_dqa(&[short], &graph).unwrap(), 0.0);

        assert!(compute_dqa(&[], &graph).is_err());
    }

    #[test]
    fn replay_quality_matches_a_session_replay_oracle_on_a_mixed_batch() {
        let graph = Arc::new(map_app());
        let nav = NavOracle::build_arc(Arc::clone(&graph)).unwrap();
        let mut batch = Vec::new();
        let mut texts: Vec<String> = graph.intents().iter().map(|i| i.text.clone()).collect();
        texts.extend(graph.latent_intents().iter().map(|i| i.text.clone()));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for i in 0..10 {
            let text = &texts[i % texts.len()];
            let mut traj = optimal_trajectory(&graph, &nav, text);
            match rng.gen_range(0..4u8) {
                0 => {} // leave clean
                1 => {
                    let at = traj.steps.len() / 2;
                    let state_ref = traj.steps[at].state_ref;
                    traj.steps.insert(
                        at,
                        PathStep {
                            state_ref,
                            action: GuiAction::Wait { duration_s: 0.5 },
                            meta: String::new(),
                        },
                    );
                }
                2 => {
                    traj.steps.pop();
                    if traj.steps.is_empty() {
                        traj.steps.push(PathStep {
                            state_ref: graph.initial_state().fingerprint(),
                            action: GuiAction::Wait { duration_s: 0.5 },
                            meta: String::new(),
                        });
                    }
                }
                _ => {
                    // Point the first click somewhere outside every widget.
                    traj.steps[0].action = GuiAction::Click { coordinate: PixelPoint(5, 5) };
                }
            }
            batch.push(traj);
        }

        // Independent oracle: run every trajectory through a live session
        // and count the clean goal-reaching ones.
        let mut expected_correct = 0usize;
        for traj in &batch {
            let mut session = EnvSession::new(Arc::clone(&graph));
            let mut clean = true;
            for step in &traj.steps {
                if session.state().fingerprint() != step.state_ref {
                    clean = false;
                    break;
                }
                match session.execute(&step.action) {
                    Ok((_, TransitionOutcome::Moved)) => {}
                    _ => {
                        clean = false;
                        break;
                    }
                }
            }
            if clean
                && graph.goal_check(&traj.intent.text, session.state()).unwrap()
                    == GoalStatus::Satisfied
            {
                expected_correct += 1;
            }
        }
        let expected = expected_correct as f64 / batch.len() as f64;
        assert!(expected > 0.0 && expected < 1.0, "fixture should be mixed");
        assert_eq!(compute_dqa(&batch, &graph).unwrap(), expected);
    }

    #[test]
    fn manual_cost_reproduces_published_totals() {
        let params = CostParams::default();
        for (images, want_exact, want_rounded) in [
            (18_000u64, 6476.4, 6476i64),
            (119_000, 42_816.2, 42_816),
            (88_000, 31_662.4, 31_662),
        ] {
            let c = estimate_cost(&params, images, CostPipeline::Manual).unwrap();
            assert!(
                (c.total - want_exact).abs() < 1e-9,
                "{images} images: got {}, want {want_exact}",
                c.total
            );
            assert_eq!(c.rounded_total(), want_rounded);
            assert_eq!(c.compute, 0.0);
        }
    }

    #[test]
    fn mined_cost_splits_inspection_and_compute() {
        let params = CostParams {
            train: ComputePhase::new(24.0, 8.0, 0.924),
            mine: ComputePhase::new(26.7, 8.0, 0.433),
            ..CostParams::default()
        };
        let c = estimate_cost(&params, 20_000, CostPipeline::Mined).unwrap();
        assert!((c.inspection - 196.0).abs() < 1e-9);
        assert_eq!(c.annotation, 0.0);
        assert_eq!(c.compute.round() as i64, 270);
        assert_eq!(c.rounded_total(), 466);
    }

    #[test]
    fn negative_rates_are_rejected() {
        let params = CostParams { r_wage: -1.0, ..CostParams::default() };
        assert!(estimate_cost(&params, 10, CostPipeline::Manual).is_err());
    }

    #[test]
    fn cost_csv_rounds_at_the_edge() {
        let params = CostParams::default();
        let line = CostLine {
            label: "aitz".into(),
            images: 18_000,
            pipeline: CostPipeline::Manual,
            breakdown: estimate_cost(&params, 18_000, CostPipeline::Manual).unwrap(),
        };
        let csv = cost_table_csv(&[line]);
        assert_eq!(
            csv,
            "label,images,pipeline,annotation,inspection,compute,total\n\
             aitz,18000,manual,6300,176,0,6476\n"
        );
    }

    #[test]
    fn metric_csv_quotes_awkward_labels() {
        let csv = metric_table_csv(&[MetricLine {
            label: "stage 1, warmup".into(),
            msr: 0.75,
            dqa: 1.0,
        }]);
        assert_eq!(csv, "label,msr,dqa\n\"stage 1, warmup\",0.7500,1.0000\n");
    }

    proptest! {
        #[test]
        fn exact_matches_never_exceed_type_matches(
            pairs in proptest::collection::vec((0..4u8, 0..4u8, 0i32..50), 1..40)
        ) {
            let mk = |kind: u8, x: i32| match kind {
                0 => click(x),
                1 => GuiAction::Type { text: format!("t{x}") },
                2 => GuiAction::Key { text: format!("k{x}") },
                _ => GuiAction::Wait { duration_s: (x + 1) as f64 },
            };
            let truth: Vec<GuiAction> = pairs.iter().map(|(k, _, x)| mk(*k, *x)).collect();
            let predicted: Vec<GuiAction> = pairs.iter().map(|(_, k, x)| mk(*k, *x)).collect();
            let (sr, tp) = compute_sr_tp(&predicted, &truth).unwrap();
            prop_assert!(sr <= tp);
            prop_assert!((0.0..=1.0).contains(&sr));
            prop_assert!((0.0..=1.0).contains(&tp));
        }

        #[test]
        fn manual_cost_is_linear_in_image_count(n in 1u64..1_000_000) {
            let params = CostParams::default();
            let one = estimate_cost(&params, n, CostPipeline::Manual).unwrap();
            let two = estimate_cost(&params, 2 * n, CostPipeline::Manual).unwrap();
            prop_assert!((two.total - 2.0 * one.total).abs() < 1e-6);
        }

        #[test]
        fn preference_pairs_are_sound(
            shape in proptest::collection::vec((0usize..6, 0.0f64..1.0), 2..24),
            cap in 1usize..4
        ) {
            // Grow a random tree: each entry parents onto an existing node
            // (index modulo current size) and carries a reward.
            let intent = IntentRecord::new("walk", IntentOrigin::Seed, Stage::Stage1);
            let mut t = IntentTree::new("t-prop", intent.clone(), fp(0));
            let mut ids = vec![t.root()];
            for (i, (p, reward)) in shape.iter().enumerate() {
                let parent = ids[p % ids.len()];
                let rank = t.children(parent).unwrap().len() as u32;
                let id = t.add_child(
                    parent,
                    click(i as i32),
                    fp(1 + i as u64),
                    "step",
                    rank,
                    0.5,
                ).unwrap();
                let mut cur = Some(id);
                while let Some(c) = cur {
                    t.apply_reward(c, *reward).unwrap();
                    cur = t.parent_of(c).unwrap();
                }
                ids.push(id);
            }
            // Deepest node hosts the intent; other leaves become failures.
            let endpoint = *ids
                .iter()
                .max_by_key(|id| t.depth(**id).unwrap())
                .unwrap();
            let on_path: Vec<NodeId> = {
                let mut v = vec![endpoint];
                let mut cur = endpoint;
                while let Some(p) = t.parent_of(cur).unwrap() {
                    v.push(p);
                    cur = p;
                }
                v
            };
            for id in &ids {
                if !on_path.contains(id) && t.children(*id).unwrap().is_empty() {
                    t.set_status(*id, NodeStatus::Failure).unwrap();
                }
            }
            t.attach_intent(intent, endpoint).unwrap();

            let pairs = extract_preference_pairs(&t, cap).unwrap();
            let path_actions: Vec<String> = t
                .path_to(endpoint)
                .unwrap()
                .iter()
                .map(|s| s.action.canonical_key())
                .collect();
            let mut per_node: BTreeMap<(String, usize), usize> = BTreeMap::new();
            for pair in &pairs {
                prop_assert_ne!(&pair.chosen, &pair.rejected);
                // The chosen action is the next success-path step after the
                // history prefix.
                let chosen_key = pair.chosen.canonical_key();
                prop_assert_eq!(&path_actions[pair.context.history.len()], &chosen_key);
                // The rejected action is a real sibling edge of the same
                // parent and never an edge of the chosen root path.
                let parent = on_path[on_path.len() - 1 - pair.context.history.len()];
                let sibling_edges: Vec<String> = t
                    .children(parent)
                    .unwrap()
                    .iter()
                    .map(|c| t.arriving_action(*c).unwrap().unwrap().canonical_key())
                    .collect();
                prop_assert!(sibling_edges.contains(&pair.rejected.canonical_key()));
                prop_assert!(!path_actions.contains(&pair.rejected.canonical_key()));
                *per_node
                    .entry((pair.context.intent.id.clone(), pair.context.history.len()))
                    .or_default() += 1;
            }
            for count in per_node.values() {
                prop_assert!(*count <= cap);
            }
        }
    }
}
