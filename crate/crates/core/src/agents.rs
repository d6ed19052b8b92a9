//! The three-role agent protocol.
//!
//! Expansion asks an *infer* agent for up to `k` candidate actions, an
//! *orchestra* agent to merge equivalent candidates and rank the survivors,
//! and a *judge* agent to grade each executed step. Two backend families
//! implement the roles: scripted oracles driven by the environment's BFS
//! index (exact at `epsilon = 0`, increasingly noisy up to `epsilon = 1`),
//! and an HTTP adapter speaking the `chat/completions` wire format.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simenv::{EnvState, NavOracle, Observation, ScreenGraph};
use crate::tree::{
    normalize_intermediate_reward, terminal_reward, GuiAction, IntentRecord, NodeStatus, PathStep,
    PixelPoint,
};
use crate::util::fnv1a64_parts;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {snippet}")]
    Http { status: u16, snippet: String },
    #[error("could not interpret backend reply: {0}")]
    Malformed(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("protocol contract violated: {0}")]
    Contract(String),
}

impl AgentError {
    /// Whether a retry could plausibly change the answer. Configuration and
    /// contract errors are deterministic and fail fast.
    pub fn is_retryable(&self) -> bool {
        match self {
            AgentError::Transport(_) | AgentError::Malformed(_) => true,
            AgentError::Http { status, .. } => *status >= 500 || *status == 429,
            AgentError::Config(_) | AgentError::Contract(_) => false,
        }
    }
}

// ---------------------------------------------------------------------------
// Protocol types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAction {
    pub action: GuiAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl CandidateAction {
    pub fn bare(action: GuiAction) -> Self {
        CandidateAction { action, rationale: None }
    }
}

/// Orchestra output: surviving candidates in execution-priority order, plus
/// which input indices were merged into each survivor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedActions {
    pub survivors: Vec<CandidateAction>,
    pub merge_map: Vec<Vec<usize>>,
}

impl RankedActions {
    /// Merge groups must partition the input exactly.
    pub fn validate(&self, input_len: usize) -> Result<(), AgentError> {
        if self.survivors.len() != self.merge_map.len() {
            return Err(AgentError::Contract(
                "survivors and merge map lengths differ".into(),
            ));
        }
        let mut seen = vec![false; input_len];
        for group in &self.merge_map {
            if group.is_empty() {
                return Err(AgentError::Contract("empty merge group".into()));
            }
            for &i in group {
                if i >= input_len || seen[i] {
                    return Err(AgentError::Contract(format!(
                        "merge map does not partition the {input_len} candidates"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(AgentError::Contract("merge map drops a candidate".into()));
        }
        Ok(())
    }
}

/// A judge's grade for one node. `reward` is always recomputable from the
/// rest of the record: terminal statuses pin it to 1/0, intermediate ones
/// normalize the logit pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub status: NodeStatus,
    pub logit_valid: f64,
    pub logit_invalid: f64,
    pub reward: f64,
}

impl JudgeVerdict {
    pub fn terminal(status: NodeStatus) -> Result<Self, AgentError> {
        let reward = terminal_reward(status)
            .map_err(|_| AgentError::Contract("terminal verdict needs a terminal status".into()))?;
        Ok(JudgeVerdict { status, logit_valid: 0.0, logit_invalid: 0.0, reward })
    }

    pub fn intermediate(logit_valid: f64, logit_invalid: f64) -> Result<Self, AgentError> {
        let reward = normalize_intermediate_reward(logit_valid, logit_invalid)
            .map_err(|e| AgentError::Contract(e.to_string()))?;
        Ok(JudgeVerdict {
            status: NodeStatus::Intermediate,
            logit_valid,
            logit_invalid,
            reward,
        })
    }

    /// Re-derives the reward from the rest of the record and compares.
    pub fn is_consistent(&self) -> bool {
        let expected = match self.status {
            NodeStatus::Intermediate => {
                normalize_intermediate_reward(self.logit_valid, self.logit_invalid)
            }
            s => terminal_reward(s),
        };
        matches!(expected, Ok(r) if r == self.reward)
    }
}

/// Everything an infer call may look at.
pub struct InferContext<'a> {
    pub observation: &'a Observation,
    pub intent: &'a IntentRecord,
    pub history: &'a [PathStep],
    /// Actions already produced for this node; candidates must not repeat them.
    pub already_generated: &'a [GuiAction],
    pub k: usize,
}

pub struct OrchestraContext<'a> {
    pub observation: &'a Observation,
    pub intent: &'a IntentRecord,
}

pub struct JudgeContext<'a> {
    pub observation: &'a Observation,
    pub intent: &'a IntentRecord,
    pub trajectory: &'a [PathStep],
}

pub trait InferAgent: Send + Sync {
    fn infer_candidates(&self, ctx: &InferContext) -> Result<Vec<CandidateAction>, AgentError>;
}

pub trait OrchestraAgent: Send + Sync {
    fn orchestrate(
        &self,
        ctx: &OrchestraContext,
        candidates: &[CandidateAction],
    ) -> Result<RankedActions, AgentError>;
}

pub trait JudgeAgent: Send + Sync {
    fn judge(&self, ctx: &JudgeContext) -> Result<JudgeVerdict, AgentError>;
}

pub struct AgentSet {
    pub infer: Box<dyn InferAgent>,
    pub orchestra: Box<dyn OrchestraAgent>,
    pub judge: Box<dyn JudgeAgent>,
}

impl AgentSet {
    /// Scripted oracle backends sharing one BFS index.
    pub fn oracle(nav: Arc<NavOracle>, epsilon: f64, seed: u64) -> Self {
        let seed = fnv1a64_parts([
            b"oracle-agents".as_slice(),
            &seed.to_le_bytes(),
            &nav.graph().rng_seed.to_le_bytes(),
        ]);
        AgentSet {
            infer: Box::new(ScriptedInfer { nav: Arc::clone(&nav), epsilon, seed }),
            orchestra: Box::new(ScriptedOrchestra { nav: Arc::clone(&nav), epsilon, seed }),
            judge: Box::new(ScriptedJudge { nav, epsilon, seed }),
        }
    }

    /// HTTP-backed agents sharing one chat client.
    pub fn http(config: HttpChatConfig) -> Result<Self, AgentError> {
        let client = Arc::new(ChatClient::new(config)?);
        Ok(AgentSet {
            infer: Box::new(HttpInfer { client: Arc::clone(&client) }),
            orchestra: Box::new(HttpOrchestra { client: Arc::clone(&client), tolerance_px: 8 }),
            judge: Box::new(HttpJudge { client }),
        })
    }
}

/// Backend selection as configuration, so staged plans can swap it between
/// stages without touching the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum BackendProfile {
    Oracle { epsilon: f64, seed: u64 },
    Http(HttpChatConfig),
}

impl BackendProfile {
    pub fn build(&self, graph: &Arc<ScreenGraph>) -> Result<AgentSet, AgentError> {
        match self {
            BackendProfile::Oracle { epsilon, seed } => {
                let nav = NavOracle::build_arc(Arc::clone(graph))
                    .map_err(|e| AgentError::Config(e.to_string()))?;
                Ok(AgentSet::oracle(Arc::new(nav), *epsilon, *seed))
            }
            BackendProfile::Http(cfg) => AgentSet::http(cfg.clone()),
        }
    }
}

fn state_of(obs: &Observation) -> EnvState {
    EnvState {
        screen: obs.screen_id.clone(),
        bindings: obs.bindings.clone(),
        step_count: 0,
    }
}

// ---------------------------------------------------------------------------
// Scripted oracle backends
// ---------------------------------------------------------------------------

/// Per-call RNG: a pure function of the backend seed and the call inputs,
/// so identical calls always produce identical outputs.
fn call_rng(seed: u64, role: &str, obs: &Observation, intent: &IntentRecord, extra: &[String]) -> ChaCha8Rng {
    let mut parts: Vec<Vec<u8>> = vec![
        seed.to_le_bytes().to_vec(),
        role.as_bytes().to_vec(),
        obs.fingerprint.to_string().into_bytes(),
        intent.id.clone().into_bytes(),
    ];
    parts.extend(extra.iter().map(|s| s.clone().into_bytes()));
    ChaCha8Rng::seed_from_u64(fnv1a64_parts(parts))
}

pub struct ScriptedInfer {
    nav: Arc<NavOracle>,
    epsilon: f64,
    seed: u64,
}

impl InferAgent for ScriptedInfer {
    fn infer_candidates(&self, ctx: &InferContext) -> Result<Vec<CandidateAction>, AgentError> {
        let state = state_of(ctx.observation);
        let graph = self.nav.graph();
        let taken: Vec<String> = ctx.already_generated.iter().map(|a| a.canonical_key()).collect();
        let pool: Vec<GuiAction> = graph
            .canonical_actions(&state)
            .map_err(|e| AgentError::Config(e.to_string()))?
            .into_iter()
            .filter(|a| !taken.contains(&a.canonical_key()))
            .collect();
        if pool.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = call_rng(self.seed, "infer", ctx.observation, ctx.intent, &taken);

        // Order the pool by how close each action lands to the goal, ties
        // in canonical order. Each slot then takes the best remaining
        // action with probability 1 - epsilon, otherwise a uniform random
        // one: an exact model proposes the k best moves, a fully noisy one
        // proposes a random sample.
        let dist_after = |a: &GuiAction| -> u64 {
            graph
                .apply(&state, a)
                .ok()
                .and_then(|(next, _)| self.nav.distance(&ctx.intent.text, &next).ok().flatten())
                .map(u64::from)
                .unwrap_or(u64::MAX)
        };
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by_key(|&i| (dist_after(&pool[i]), i));
        let mut remaining: Vec<GuiAction> = order.into_iter().map(|i| pool[i].clone()).collect();
        let mut out: Vec<CandidateAction> = Vec::new();
        while out.len() < ctx.k && !remaining.is_empty() {
            let i = if rng.gen::<f64>() >= self.epsilon {
                0
            } else {
                rng.gen_range(0..remaining.len())
            };
            out.push(CandidateAction::bare(remaining.remove(i)));
        }
        Ok(out)
    }
}

pub struct ScriptedOrchestra {
    nav: Arc<NavOracle>,
    epsilon: f64,
    seed: u64,
}

impl OrchestraAgent for ScriptedOrchestra {
    fn orchestrate(
        &self,
        ctx: &OrchestraContext,
        candidates: &[CandidateAction],
    ) -> Result<RankedActions, AgentError> {
        if candidates.is_empty() {
            return Err(AgentError::Contract("orchestrate needs candidates".into()));
        }
        let state = state_of(ctx.observation);
        let graph = self.nav.graph();

        // Merge by simulated successor: candidates landing in the same
        // state are one action in different clothes. Unsimulatable
        // candidates group by their own syntax and never merge.
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, cand) in candidates.iter().enumerate() {
            let key = match graph.apply(&state, &cand.action) {
                Ok((next, _)) => next.fingerprint().to_string(),
                Err(_) => format!("invalid:{}", cand.action.canonical_key()),
            };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(i),
                None => groups.push((key, vec![i])),
            }
        }

        // Rank by true progress: distance to goal after the action,
        // unreachable last; stable on ties.
        let dist_after = |idx: usize| -> u64 {
            graph
                .apply(&state, &candidates[idx].action)
                .ok()
                .and_then(|(next, _)| self.nav.distance(&ctx.intent.text, &next).ok().flatten())
                .map(|d| d as u64)
                .unwrap_or(u64::MAX)
        };
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by_key(|&g| (dist_after(groups[g].1[0]), groups[g].1[0]));

        // Error-rate noise: each adjacent pair may swap once.
        let keys: Vec<String> = candidates.iter().map(|c| c.action.canonical_key()).collect();
        let mut rng = call_rng(self.seed, "orchestra", ctx.observation, ctx.intent, &keys);
        for i in 1..order.len() {
            if rng.gen::<f64>() < self.epsilon {
                order.swap(i - 1, i);
            }
        }

        let ranked = RankedActions {
            survivors: order
                .iter()
                .map(|&g| candidates[groups[g].1[0]].clone())
                .collect(),
            merge_map: order.iter().map(|&g| groups[g].1.clone()).collect(),
        };
        ranked.validate(candidates.len())?;
        Ok(ranked)
    }
}

pub struct ScriptedJudge {
    nav: Arc<NavOracle>,
    epsilon: f64,
    seed: u64,
}

impl JudgeAgent for ScriptedJudge {
    fn judge(&self, ctx: &JudgeContext) -> Result<JudgeVerdict, AgentError> {
        let state = state_of(ctx.observation);
        let graph = self.nav.graph();
        let status = graph
            .goal_check(&ctx.intent.text, &state)
            .map_err(|e| AgentError::Config(e.to_string()))?;
        match status {
            // Terminal verdicts stay exact at every error rate: the noise
            // models unreliable progress assessment, not a broken goal test.
            crate::simenv::GoalStatus::Satisfied => JudgeVerdict::terminal(NodeStatus::Success),
            crate::simenv::GoalStatus::Violated => JudgeVerdict::terminal(NodeStatus::Failure),
            crate::simenv::GoalStatus::Open => {
                // Grade the latest step with a binary verdict: did it move
                // the task forward? The pre-step state is recovered by
                // replaying the trajectory from the initial state, so the
                // verdict stays a pure function of the call inputs. An
                // empty trajectory has no step to grade and stays neutral.
                let mut delta = if ctx.trajectory.is_empty() {
                    0.0
                } else {
                    let mut before = graph.initial_state();
                    let earlier = &ctx.trajectory[..ctx.trajectory.len() - 1];
                    for step in earlier {
                        before = graph
                            .apply(&before, &step.action)
                            .map_err(|e| {
                                AgentError::Contract(format!("unreplayable trajectory: {e}"))
                            })?
                            .0;
                    }
                    let d_before = self
                        .nav
                        .distance(&ctx.intent.text, &before)
                        .map_err(|e| AgentError::Config(e.to_string()))?;
                    let d_now = self
                        .nav
                        .distance(&ctx.intent.text, &state)
                        .map_err(|e| AgentError::Config(e.to_string()))?;
                    match (d_before, d_now) {
                        (Some(a), Some(b)) if b < a => 1.0,
                        _ => -1.0,
                    }
                };
                let extra = vec![ctx.trajectory.len().to_string()];
                let mut rng = call_rng(self.seed, "judge", ctx.observation, ctx.intent, &extra);
                if rng.gen::<f64>() < self.epsilon {
                    delta = -delta;
                }
                // Symmetric conviction: logits for and against mirror each
                // other, so a forward step is graded sigmoid(2) and a
                // wasted one sigmoid(-2).
                JudgeVerdict::intermediate(delta, -delta)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP adapter
// ---------------------------------------------------------------------------

pub const API_KEY_ENV: &str = "M2_API_KEY";

/// Prompt skeletons with `{slot}` placeholders. Defaults are built in;
/// callers may supply their own. Missing fields in a config file fall back
/// to the defaults field by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    #[serde(default = "default_infer_template")]
    pub infer: String,
    #[serde(default = "default_orchestra_template")]
    pub orchestra: String,
    #[serde(default = "default_judge_template")]
    pub judge: String,
    #[serde(default = "default_recycle_filter_template")]
    pub recycle_filter: String,
    #[serde(default = "default_recycle_generate_template")]
    pub recycle_generate: String,
    #[serde(default = "default_basic_intents_template")]
    pub basic_intents: String,
}

fn default_infer_template() -> String {
    "You operate a phone GUI to finish a task.\nTask: {intent}\nScreen (JSON): {observation}\nSteps so far: {history}\nDo not repeat these already-proposed actions: {already_generated}\nPropose exactly one next action as JSON with a \"kind\" field (click, long_press, swipe, type, key, wait, system_button, terminate) and its parameters, plus an optional \"rationale\". Reply inside a ```json fence.".into()
}

fn default_orchestra_template() -> String {
    "You pick the most promising next step for a phone task.\nTask: {intent}\nScreen (JSON): {observation}\nCandidates (indexed): {candidates}\nReply {\"choice\": <index of the best candidate>} inside a ```json fence.".into()
}

fn default_judge_template() -> String {
    "You grade progress of a phone task.\nTask: {intent}\nTrajectory so far: {trajectory}\nScreen (JSON): {observation}\nReply {\"status\": \"success\" | \"failure\" | \"intermediate\", \"confidence\": <0..1>} inside a ```json fence.".into()
}

fn default_recycle_filter_template() -> String {
    "You rate whether a recorded GUI trajectory is worth keeping as training data.\nOriginal task: {intent}\nTrajectory: {trajectory}\nScore the trajectory's quality: coherent, no wasted steps, ends somewhere meaningful.\nReply {\"score\": <0..1>} inside a ```json fence.".into()
}

fn default_recycle_generate_template() -> String {
    "You write the user instruction a recorded GUI trajectory accomplishes.\nTrajectory: {trajectory}\nReply {\"intent\": \"<one imperative sentence>\"} inside a ```json fence.".into()
}

fn default_basic_intents_template() -> String {
    "You list everyday tasks a user could start from this home screen.\nScreen (JSON): {observation}\nPropose up to {k} short imperative tasks.\nReply {\"intents\": [\"...\"]} inside a ```json fence.".into()
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            infer: default_infer_template(),
            orchestra: default_orchestra_template(),
            judge: default_judge_template(),
            recycle_filter: default_recycle_filter_template(),
            recycle_generate: default_recycle_generate_template(),
            basic_intents: default_basic_intents_template(),
        }
    }
}

pub(crate) fn fill(template: &str, slots: &BTreeMap<&str, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    pub base_url: String,
    pub model: String,
    /// Taken from the `M2_API_KEY` environment variable when unset here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after a retryable failure.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub templates: Option<PromptTemplates>,
}

fn default_temperature() -> f64 {
    0.0
}
fn default_timeout_ms() -> u64 {
    10_000
}
fn default_max_retries() -> u32 {
    2
}

/// Shared `chat/completions` client. Its `Debug` form and every log line it
/// emits reveal only whether a key is present, never the key itself.
pub struct ChatClient {
    http: ureq::Agent,
    base_url: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_retries: u32,
    templates: PromptTemplates,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("has_api_key", &self.api_key.is_some())
            .finish()
    }
}

impl ChatClient {
    pub fn new(cfg: HttpChatConfig) -> Result<Self, AgentError> {
        if cfg.base_url.is_empty() {
            return Err(AgentError::Config("base_url must be set".into()));
        }
        let api_key = cfg
            .api_key
            .clone()
            .or_else(|| std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty()));
        let http = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_millis(cfg.timeout_ms))
            .build();
        Ok(ChatClient {
            http,
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            model: cfg.model,
            api_key,
            temperature: cfg.temperature,
            max_retries: cfg.max_retries,
            templates: cfg.templates.unwrap_or_default(),
        })
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// One chat turn: system + user text + an opaque image reference for the
    /// current screen. Retries retryable failures up to `max_retries` times
    /// and returns the assistant's text content.
    pub fn chat(&self, system: &str, user: &str, image_ref: &str) -> Result<String, AgentError> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": [
                    {"type": "text", "text": user},
                    {"type": "image_ref", "ref": image_ref},
                ]},
            ],
        });
        let mut last = AgentError::Transport("no attempt made".into());
        for attempt in 0..=self.max_retries {
            log::debug!(
                "chat request attempt={attempt} url={url} model={} has_api_key={}",
                self.model,
                self.api_key.is_some()
            );
            match self.send_once(&url, &body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("chat request failed (attempt {attempt}): {e}");
                    if !e.is_retryable() {
                        return Err(e);
                    }
                    last = e;
                }
            }
        }
        Err(last)
    }

    fn send_once(&self, url: &str, body: &serde_json::Value) -> Result<String, AgentError> {
        let mut req = self.http.post(url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body.clone()) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, resp)) => {
                let snippet: String = resp
                    .into_string()
                    .unwrap_or_default()
                    .chars()
                    .take(200)
                    .collect();
                return Err(AgentError::Http { status, snippet });
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(AgentError::Transport(t.to_string()));
            }
        };
        let parsed: ChatResponse = resp
            .into_json()
            .map_err(|e| AgentError::Malformed(format!("bad response envelope: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| AgentError::Malformed("response had no choices".into()))
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

/// Pulls the first parseable JSON value out of free-form model text:
/// fenced ```json blocks first, then any fenced block, then the first
/// balanced object or array anywhere in the text.
pub fn extract_json(text: &str) -> Result<serde_json::Value, AgentError> {
    for block in fenced_blocks(text) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(block.trim()) {
            return Ok(v);
        }
    }
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'{' || b == b'[' {
            let mut stream =
                serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
            if let Some(Ok(v)) = stream.next() {
                return Ok(v);
            }
        }
    }
    Err(AgentError::Malformed(format!(
        "no JSON found in reply ({} chars)",
        text.len()
    )))
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        // Skip an optional language tag up to the first newline.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                out.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => break,
        }
    }
    out
}

pub(crate) fn render_history(steps: &[PathStep]) -> String {
    if steps.is_empty() {
        return "(none)".into();
    }
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {} ({})", i + 1, s.action.summary(), s.meta))
        .collect::<Vec<_>>()
        .join("; ")
}

fn obs_json(obs: &Observation) -> String {
    crate::util::canonical_json(obs).expect("observations always serialize")
}

pub struct HttpInfer {
    client: Arc<ChatClient>,
}

impl InferAgent for HttpInfer {
    /// One request per candidate slot, each seeing everything generated so
    /// far; syntactic repeats are dropped rather than re-asked.
    fn infer_candidates(&self, ctx: &InferContext) -> Result<Vec<CandidateAction>, AgentError> {
        let mut out: Vec<CandidateAction> = Vec::new();
        let mut taken: Vec<String> = ctx.already_generated.iter().map(|a| a.canonical_key()).collect();
        for _ in 0..ctx.k {
            let generated: Vec<String> = ctx
                .already_generated
                .iter()
                .map(|a| a.summary())
                .chain(out.iter().map(|c| c.action.summary()))
                .collect();
            let slots = BTreeMap::from([
                ("intent", ctx.intent.text.clone()),
                ("observation", obs_json(ctx.observation)),
                ("history", render_history(ctx.history)),
                (
                    "already_generated",
                    if generated.is_empty() { "(none)".into() } else { generated.join("; ") },
                ),
                ("k", ctx.k.to_string()),
            ]);
            let user = fill(&self.client.templates().infer.clone(), &slots);
            let reply = self.client.chat(
                "You propose the single next GUI action for a task.",
                &user,
                &ctx.observation.fingerprint.to_string(),
            )?;
            let value = extract_json(&reply)?;
            let cand = parse_candidate(value)?;
            let key = cand.action.canonical_key();
            if !taken.contains(&key) {
                taken.push(key);
                out.push(cand);
            }
        }
        Ok(out)
    }
}

/// Accepts either a bare action object or `{"action": {...}, "rationale": "..."}`.
fn parse_candidate(value: serde_json::Value) -> Result<CandidateAction, AgentError> {
    if let Some(obj) = value.as_object() {
        if obj.contains_key("action") {
            let action: GuiAction = serde_json::from_value(obj["action"].clone())
                .map_err(|e| AgentError::Malformed(format!("bad action: {e}")))?;
            let rationale = obj
                .get("rationale")
                .and_then(|r| r.as_str())
                .map(str::to_string);
            return Ok(CandidateAction { action, rationale });
        }
    }
    let rationale = value
        .get("rationale")
        .and_then(|r| r.as_str())
        .map(str::to_string);
    let action: GuiAction = serde_json::from_value(value)
        .map_err(|e| AgentError::Malformed(format!("bad action: {e}")))?;
    Ok(CandidateAction { action, rationale })
}

pub struct HttpOrchestra {
    client: Arc<ChatClient>,
    tolerance_px: i32,
}

impl HttpOrchestra {
    /// Syntactic equivalence for backends that cannot simulate: same kind,
    /// coordinates within the pixel tolerance, identical everything else.
    fn equivalent(&self, a: &GuiAction, b: &GuiAction) -> bool {
        let t = self.tolerance_px;
        let near = |p: &PixelPoint, q: &PixelPoint| {
            (p.x() - q.x()).abs() <= t && (p.y() - q.y()).abs() <= t
        };
        match (a, b) {
            (GuiAction::Click { coordinate: p }, GuiAction::Click { coordinate: q }) => near(p, q),
            (
                GuiAction::LongPress { coordinate: p, .. },
                GuiAction::LongPress { coordinate: q, .. },
            ) => near(p, q),
            (
                GuiAction::Swipe { coordinate: p1, coordinate2: p2 },
                GuiAction::Swipe { coordinate: q1, coordinate2: q2 },
            ) => near(p1, q1) && near(p2, q2),
            _ => a == b,
        }
    }
}

impl OrchestraAgent for HttpOrchestra {
    /// Local merge by the tolerance rule, then ranking through repeated
    /// best-of-the-rest queries: exactly `survivors - 1` requests.
    fn orchestrate(
        &self,
        ctx: &OrchestraContext,
        candidates: &[CandidateAction],
    ) -> Result<RankedActions, AgentError> {
        if candidates.is_empty() {
            return Err(AgentError::Contract("orchestrate needs candidates".into()));
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, cand) in candidates.iter().enumerate() {
            match groups
                .iter_mut()
                .find(|g| self.equivalent(&candidates[g[0]].action, &cand.action))
            {
                Some(g) => g.push(i),
                None => groups.push(vec![i]),
            }
        }
        let mut remaining: Vec<Vec<usize>> = groups;
        let mut ranked: Vec<Vec<usize>> = Vec::new();
        while remaining.len() > 1 {
            let menu: Vec<String> = remaining
                .iter()
                .enumerate()
                .map(|(i, g)| format!("{i}: {}", candidates[g[0]].action.summary()))
                .collect();
            let slots = BTreeMap::from([
                ("intent", ctx.intent.text.clone()),
                ("observation", obs_json(ctx.observation)),
                ("candidates", menu.join("; ")),
            ]);
            let user = fill(&self.client.templates().orchestra.clone(), &slots);
            let reply = self.client.chat(
                "You rank candidate GUI actions by how promising they are.",
                &user,
                &ctx.observation.fingerprint.to_string(),
            )?;
            let value = extract_json(&reply)?;
            let choice = value
                .get("choice")
                .and_then(|c| c.as_u64())
                .ok_or_else(|| AgentError::Malformed("reply lacks a \"choice\" index".into()))?
                as usize;
            if choice >= remaining.len() {
                return Err(AgentError::Malformed(format!(
                    "choice {choice} out of range ({} remain)",
                    remaining.len()
                )));
            }
            ranked.push(remaining.remove(choice));
        }
        ranked.extend(remaining);
        let out = RankedActions {
            survivors: ranked.iter().map(|g| candidates[g[0]].clone()).collect(),
            merge_map: ranked,
        };
        out.validate(candidates.len())?;
        Ok(out)
    }
}

pub struct HttpJudge {
    client: Arc<ChatClient>,
}

impl JudgeAgent for HttpJudge {
    fn judge(&self, ctx: &JudgeContext) -> Result<JudgeVerdict, AgentError> {
        let slots = BTreeMap::from([
            ("intent", ctx.intent.text.clone()),
            ("observation", obs_json(ctx.observation)),
            ("trajectory", render_history(ctx.trajectory)),
        ]);
        let user = fill(&self.client.templates().judge.clone(), &slots);
        let reply = self.client.chat(
            "You judge whether a GUI task has succeeded, failed, or is still in progress.",
            &user,
            &ctx.observation.fingerprint.to_string(),
        )?;
        let value = extract_json(&reply)?;
        let status = value
            .get("status")
            .and_then(|s| s.as_str())
            .ok_or_else(|| AgentError::Malformed("reply lacks \"status\"".into()))?;
        match status {
            "success" => JudgeVerdict::terminal(NodeStatus::Success),
            "failure" => JudgeVerdict::terminal(NodeStatus::Failure),
            "intermediate" => {
                let p = value
                    .get("confidence")
                    .and_then(|c| c.as_f64())
                    .unwrap_or(0.5)
                    .clamp(1e-9, 1.0 - 1e-9);
                // Confidence becomes a logit pair via the log-odds map.
                JudgeVerdict::intermediate((p / (1.0 - p)).ln(), 0.0)
            }
            other => Err(AgentError::Malformed(format!("unknown status {other:?}"))),
        }
    }
}
