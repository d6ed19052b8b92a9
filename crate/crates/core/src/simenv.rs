//! Deterministic synthetic GUI environments.
//!
//! An environment is a finite screen graph: screens hold tappable widgets,
//! text fields, optional scroll paging, system-button wiring, and hardware
//! keys. A session executes [`GuiAction`]s against one mutable state
//! (current screen + accumulated bindings) and can snapshot/restore that
//! state, which is what lets a tree search jump between branches. The same
//! graph also answers ground-truth questions — goal checks and BFS
//! distances — that the scripted agents and the test oracles rely on.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{GuiAction, PixelPoint, StateFingerprint, SystemButton};
use crate::util::{canonical_json, fnv1a64, fnv1a64_parts};

pub const ENV_SCHEMA: &str = "m2env/1";

/// Hard cap on explored states when indexing an environment; a fixture that
/// exceeds it is rejected rather than looping forever.
const MAX_INDEXED_STATES: usize = 200_000;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment definition rejected: {0}")]
    Schema(String),
    #[error("screen {screen:?} references missing screen {reference:?}")]
    DanglingScreen { screen: String, reference: String },
    #[error("latent intent {0:?} has no reachable satisfying state")]
    UnreachableLatentGoal(String),
    #[error("no goal predicate declared for intent {0:?}")]
    UnknownIntent(String),
    #[error("unknown screen {0:?}")]
    UnknownScreen(String),
    #[error("action rejected: {0}")]
    InvalidAction(String),
    #[error("session is closed (a terminate action was executed)")]
    SessionClosed,
    #[error("snapshot token belongs to a different environment")]
    ForeignSnapshot,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Definition types (the m2env/1 document)
// ---------------------------------------------------------------------------

/// `[x, y, width, height]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect(pub i32, pub i32, pub i32, pub i32);

impl Rect {
    pub fn contains(&self, p: PixelPoint) -> bool {
        p.x() >= self.0 && p.x() < self.0 + self.2 && p.y() >= self.1 && p.y() < self.1 + self.3
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint(self.0 + self.2 / 2, self.1 + self.3 / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WidgetTrigger {
    #[default]
    Click,
    LongPress,
}

/// A tappable region. Firing it applies `set` bindings and/or navigates to
/// `goto`, but only once every `requires` binding is in place; otherwise the
/// tap lands but nothing happens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Widget {
    pub name: String,
    #[serde(default)]
    pub on: WidgetTrigger,
    pub rect: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goto: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub set: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub requires: BTreeMap<String, String>,
}

/// A named input slot. Typing fills the first still-empty field on the
/// current screen; `options` lists the values enumeration-based callers
/// (search oracles, random agents) may type into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextField {
    pub name: String,
    pub rect: Rect,
    #[serde(default)]
    pub options: Vec<String>,
}

/// Effect of a system button press on a given screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysEffect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goto: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screen {
    pub id: String,
    /// Dead ends mark states from which unfinished goals are unreachable;
    /// goal checks report `Violated` here instead of `Open`.
    #[serde(default)]
    pub dead_end: bool,
    #[serde(default)]
    pub widgets: Vec<Widget>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub text_fields: Vec<TextField>,
    /// Ordered page list this screen belongs to; vertical swipes move
    /// through it (up = forward).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scroll_pages: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub system_buttons: BTreeMap<SystemButton, SysEffect>,
    /// Hardware keys this screen reacts to; pressing one records a binding.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keys: Vec<String>,
}

/// Conjunctive goal: be on `screen` with every listed binding present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalPredicate {
    pub screen: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bindings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredIntent {
    pub name: String,
    pub text: String,
    pub goal: GoalPredicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphDoc", into = "GraphDoc")]
pub struct ScreenGraph {
    pub name: String,
    pub screen_bounds: (i32, i32),
    pub rng_seed: u64,
    pub initial_screen: String,
    screens: Vec<Screen>,
    intents: Vec<DeclaredIntent>,
    latent_intents: Vec<DeclaredIntent>,
    #[serde(skip)]
    screen_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphDoc {
    schema: String,
    name: String,
    screen_bounds: (i32, i32),
    rng_seed: u64,
    initial_screen: String,
    screens: Vec<Screen>,
    #[serde(default)]
    intents: Vec<DeclaredIntent>,
    #[serde(default)]
    latent_intents: Vec<DeclaredIntent>,
}

impl From<ScreenGraph> for GraphDoc {
    fn from(g: ScreenGraph) -> Self {
        GraphDoc {
            schema: ENV_SCHEMA.to_string(),
            name: g.name,
            screen_bounds: g.screen_bounds,
            rng_seed: g.rng_seed,
            initial_screen: g.initial_screen,
            screens: g.screens,
            intents: g.intents,
            latent_intents: g.latent_intents,
        }
    }
}

impl TryFrom<GraphDoc> for ScreenGraph {
    type Error = String;

    fn try_from(doc: GraphDoc) -> Result<Self, String> {
        if doc.schema != ENV_SCHEMA {
            return Err(format!("expected schema {ENV_SCHEMA:?}, got {:?}", doc.schema));
        }
        let mut screen_index = HashMap::new();
        for (i, s) in doc.screens.iter().enumerate() {
            if screen_index.insert(s.id.clone(), i).is_some() {
                return Err(format!("duplicate screen id {:?}", s.id));
            }
        }
        Ok(ScreenGraph {
            name: doc.name,
            screen_bounds: doc.screen_bounds,
            rng_seed: doc.rng_seed,
            initial_screen: doc.initial_screen,
            screens: doc.screens,
            intents: doc.intents,
            latent_intents: doc.latent_intents,
            screen_index,
        })
    }
}

// ---------------------------------------------------------------------------
// Runtime state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub screen: String,
    pub bindings: BTreeMap<String, String>,
    pub step_count: u64,
}

impl EnvState {
    /// Stable hash of `(screen, sorted bindings)`. Step count is bookkeeping,
    /// not identity: two states that look and behave the same must collide.
    pub fn fingerprint(&self) -> StateFingerprint {
        let mut parts: Vec<&str> = vec!["state", &self.screen];
        for (k, v) in &self.bindings {
            parts.push(k);
            parts.push(v);
        }
        StateFingerprint(fnv1a64_parts(parts))
    }

    fn same_situation(&self, other: &EnvState) -> bool {
        self.screen == other.screen && self.bindings == other.bindings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionOutcome {
    Moved,
    NoOp,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalStatus {
    Satisfied,
    Violated,
    Open,
}

/// What an agent gets to see: the current screen's full surface plus the
/// bindings accumulated so far.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub screen_id: String,
    pub fingerprint: StateFingerprint,
    pub dead_end: bool,
    pub widgets: Vec<ObsWidget>,
    pub text_fields: Vec<ObsField>,
    pub scroll: Option<ObsScroll>,
    pub system_buttons: Vec<SystemButton>,
    pub keys: Vec<String>,
    pub bindings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObsWidget {
    pub name: String,
    pub on: WidgetTrigger,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObsField {
    pub name: String,
    pub rect: Rect,
    pub value: Option<String>,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObsScroll {
    pub page_index: usize,
    pub page_count: usize,
}

/// Opaque, clonable capture of a session state. Only the environment that
/// minted it will accept it back.
#[derive(Debug, Clone)]
pub struct SnapshotToken {
    graph_fp: u64,
    state: EnvState,
}

// ---------------------------------------------------------------------------
// Graph behaviour
// ---------------------------------------------------------------------------

impl ScreenGraph {
    /// Parses and fully validates an `m2env/1` document: schema shape,
    /// reference integrity, widget geometry, and latent-goal reachability.
    pub fn from_json_str(s: &str) -> Result<ScreenGraph, EnvError> {
        let graph: ScreenGraph =
            serde_json::from_str(s).map_err(|e| EnvError::Schema(e.to_string()))?;
        graph.validate()?;
        Ok(graph)
    }

    pub fn to_json_string(&self) -> Result<String, EnvError> {
        Ok(crate::util::canonical_json_pretty(self)?)
    }

    fn validate(&self) -> Result<(), EnvError> {
        let (w, h) = self.screen_bounds;
        if w <= 0 || h <= 0 {
            return Err(EnvError::Schema(format!("screen bounds {w}x{h} are empty")));
        }
        self.screen(&self.initial_screen).map_err(|_| EnvError::DanglingScreen {
            screen: "<initial>".into(),
            reference: self.initial_screen.clone(),
        })?;
        let check_ref = |from: &str, target: &Option<String>| -> Result<(), EnvError> {
            if let Some(t) = target {
                if !self.screen_index.contains_key(t) {
                    return Err(EnvError::DanglingScreen {
                        screen: from.to_string(),
                        reference: t.clone(),
                    });
                }
            }
            Ok(())
        };
        for s in &self.screens {
            let in_bounds = |r: &Rect, what: &str| -> Result<(), EnvError> {
                if r.2 <= 0 || r.3 <= 0 || r.0 < 0 || r.1 < 0 || r.0 + r.2 > w || r.1 + r.3 > h {
                    return Err(EnvError::Schema(format!(
                        "{what} on screen {:?} has rect {:?} outside {w}x{h}",
                        s.id, r
                    )));
                }
                Ok(())
            };
            for wdg in &s.widgets {
                in_bounds(&wdg.rect, &format!("widget {:?}", wdg.name))?;
                check_ref(&s.id, &wdg.goto)?;
            }
            for f in &s.text_fields {
                in_bounds(&f.rect, &format!("text field {:?}", f.name))?;
            }
            for eff in s.system_buttons.values() {
                check_ref(&s.id, &eff.goto)?;
            }
            if let Some(pages) = &s.scroll_pages {
                for p in pages {
                    check_ref(&s.id, &Some(p.clone()))?;
                }
                if !pages.contains(&s.id) {
                    return Err(EnvError::Schema(format!(
                        "screen {:?} lists scroll pages that do not include itself",
                        s.id
                    )));
                }
            }
        }
        for intent in self.intents.iter().chain(&self.latent_intents) {
            if !self.screen_index.contains_key(&intent.goal.screen) {
                return Err(EnvError::DanglingScreen {
                    screen: format!("<goal of {:?}>", intent.name),
                    reference: intent.goal.screen.clone(),
                });
            }
        }
        // Every latent goal must be genuinely minable: some reachable state
        // has to satisfy it.
        let nav = NavOracle::build(self)?;
        for latent in &self.latent_intents {
            if nav.distance(&latent.text, &self.initial_state())?.is_none() {
                return Err(EnvError::UnreachableLatentGoal(latent.name.clone()));
            }
        }
        Ok(())
    }

    pub fn screen(&self, id: &str) -> Result<&Screen, EnvError> {
        self.screen_index
            .get(id)
            .map(|&i| &self.screens[i])
            .ok_or_else(|| EnvError::UnknownScreen(id.to_string()))
    }

    pub fn screens(&self) -> &[Screen] {
        &self.screens
    }

    pub fn intents(&self) -> &[DeclaredIntent] {
        &self.intents
    }

    pub fn latent_intents(&self) -> &[DeclaredIntent] {
        &self.latent_intents
    }

    pub fn find_intent(&self, text: &str) -> Option<&DeclaredIntent> {
        self.intents
            .iter()
            .chain(&self.latent_intents)
            .find(|i| i.text == text)
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            screen: self.initial_screen.clone(),
            bindings: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Identity hash of the whole definition; snapshot tokens carry it.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(canonical_json(self).expect("graphs always serialize").as_bytes())
    }

    /// Pure transition function. Returns the successor state (step count
    /// already advanced) and what kind of transition happened. Malformed
    /// actions — out-of-bounds coordinates, degenerate swipes — are
    /// rejected rather than treated as taps that missed.
    pub fn apply(
        &self,
        state: &EnvState,
        action: &GuiAction,
    ) -> Result<(EnvState, TransitionOutcome), EnvError> {
        let screen = self.screen(&state.screen)?;
        let mut next = state.clone();
        next.step_count += 1;
        let outcome = match action {
            GuiAction::Click { coordinate } => {
                self.check_bounds(*coordinate)?;
                self.fire_widget(screen, WidgetTrigger::Click, *coordinate, &mut next)?
            }
            GuiAction::LongPress { coordinate, duration_s } => {
                self.check_bounds(*coordinate)?;
                if !duration_s.is_finite() || *duration_s <= 0.0 {
                    return Err(EnvError::InvalidAction(format!(
                        "long_press duration {duration_s} must be positive"
                    )));
                }
                self.fire_widget(screen, WidgetTrigger::LongPress, *coordinate, &mut next)?
            }
            GuiAction::Swipe { coordinate, coordinate2 } => {
                self.check_bounds(*coordinate)?;
                self.check_bounds(*coordinate2)?;
                if coordinate == coordinate2 {
                    return Err(EnvError::InvalidAction(
                        "swipe endpoints must differ".into(),
                    ));
                }
                self.swipe(screen, *coordinate, *coordinate2, &mut next)
            }
            GuiAction::Type { text } => {
                match screen
                    .text_fields
                    .iter()
                    .find(|f| !next.bindings.contains_key(&f.name))
                {
                    Some(field) => {
                        next.bindings.insert(field.name.clone(), text.clone());
                        TransitionOutcome::Moved
                    }
                    None => TransitionOutcome::NoOp,
                }
            }
            GuiAction::Key { text } => {
                if screen.keys.iter().any(|k| k == text) {
                    next.bindings.insert(text.clone(), "pressed".into());
                    TransitionOutcome::Moved
                } else {
                    TransitionOutcome::NoOp
                }
            }
            GuiAction::Wait { duration_s } => {
                if !duration_s.is_finite() || *duration_s <= 0.0 {
                    return Err(EnvError::InvalidAction(format!(
                        "wait duration {duration_s} must be positive"
                    )));
                }
                TransitionOutcome::NoOp
            }
            GuiAction::SystemButton { button } => match screen.system_buttons.get(button) {
                Some(eff) => {
                    let eff = eff.clone();
                    self.apply_effect(&eff.goto, &eff.set, &mut next)?;
                    TransitionOutcome::Moved
                }
                None => TransitionOutcome::NoOp,
            },
            GuiAction::Terminate { .. } => TransitionOutcome::Terminated,
        };
        // "Moved" must mean it: anything that left the situation unchanged
        // reports as a no-op regardless of which path produced it.
        let outcome = match outcome {
            TransitionOutcome::Moved if next.same_situation(state) => TransitionOutcome::NoOp,
            o => o,
        };
        Ok((next, outcome))
    }

    fn check_bounds(&self, p: PixelPoint) -> Result<(), EnvError> {
        let (w, h) = self.screen_bounds;
        if p.x() < 0 || p.y() < 0 || p.x() >= w || p.y() >= h {
            return Err(EnvError::InvalidAction(format!(
                "coordinate ({},{}) outside {w}x{h}",
                p.x(),
                p.y()
            )));
        }
        Ok(())
    }

    fn fire_widget(
        &self,
        screen: &Screen,
        trigger: WidgetTrigger,
        point: PixelPoint,
        next: &mut EnvState,
    ) -> Result<TransitionOutcome, EnvError> {
        let hit = screen
            .widgets
            .iter()
            .find(|w| w.on == trigger && w.rect.contains(point));
        match hit {
            Some(w) => {
                let gated = w
                    .requires
                    .iter()
                    .any(|(k, v)| next.bindings.get(k) != Some(v));
                if gated {
                    return Ok(TransitionOutcome::NoOp);
                }
                let (goto, set) = (w.goto.clone(), w.set.clone());
                self.apply_effect(&goto, &set, next)?;
                Ok(TransitionOutcome::Moved)
            }
            None => Ok(TransitionOutcome::NoOp),
        }
    }

    fn apply_effect(
        &self,
        goto: &Option<String>,
        set: &[(String, String)],
        next: &mut EnvState,
    ) -> Result<(), EnvError> {
        for (k, v) in set {
            next.bindings.insert(k.clone(), v.clone());
        }
        if let Some(target) = goto {
            self.screen(target)?;
            next.screen = target.clone();
        }
        Ok(())
    }

    fn swipe(
        &self,
        screen: &Screen,
        from: PixelPoint,
        to: PixelPoint,
        next: &mut EnvState,
    ) -> TransitionOutcome {
        let (dx, dy) = (to.x() - from.x(), to.y() - from.y());
        let Some(pages) = &screen.scroll_pages else {
            return TransitionOutcome::NoOp;
        };
        if dy.abs() <= dx.abs() {
            return TransitionOutcome::NoOp;
        }
        let here = pages.iter().position(|p| p == &screen.id).unwrap_or(0);
        let target = if dy < 0 {
            // Swipe up: move forward through the pages.
            pages.get(here + 1)
        } else if here > 0 {
            pages.get(here - 1)
        } else {
            None
        };
        match target {
            Some(t) => {
                next.screen = t.clone();
                TransitionOutcome::Moved
            }
            None => TransitionOutcome::NoOp,
        }
    }

    /// The finite action menu of a state, in a fixed order: widget taps at
    /// rect centers, one `type` per option of the first empty field, scroll
    /// swipes, wired system buttons, then unpressed keys. This is the action
    /// alphabet shared by the BFS index, the scripted agents, and random
    /// rollouts; `terminate` and `wait` are deliberately absent.
    pub fn canonical_actions(&self, state: &EnvState) -> Result<Vec<GuiAction>, EnvError> {
        let screen = self.screen(&state.screen)?;
        let mut out = Vec::new();
        for w in &screen.widgets {
            let coordinate = w.rect.center();
            out.push(match w.on {
                WidgetTrigger::Click => GuiAction::Click { coordinate },
                WidgetTrigger::LongPress => {
                    GuiAction::LongPress { coordinate, duration_s: 1.0 }
                }
            });
        }
        if let Some(field) = screen
            .text_fields
            .iter()
            .find(|f| !state.bindings.contains_key(&f.name))
        {
            for option in &field.options {
                out.push(GuiAction::Type { text: option.clone() });
            }
        }
        if let Some(pages) = &screen.scroll_pages {
            let (w, h) = self.screen_bounds;
            let here = pages.iter().position(|p| p == &screen.id).unwrap_or(0);
            if here + 1 < pages.len() {
                out.push(GuiAction::Swipe {
                    coordinate: PixelPoint(w / 2, h * 3 / 4),
                    coordinate2: PixelPoint(w / 2, h / 4),
                });
            }
            if here > 0 {
                out.push(GuiAction::Swipe {
                    coordinate: PixelPoint(w / 2, h / 4),
                    coordinate2: PixelPoint(w / 2, h * 3 / 4),
                });
            }
        }
        for button in screen.system_buttons.keys() {
            out.push(GuiAction::SystemButton { button: *button });
        }
        for key in &screen.keys {
            if !state.bindings.contains_key(key) {
                out.push(GuiAction::Key { text: key.clone() });
            }
        }
        Ok(out)
    }

    /// Ground-truth goal check for a declared intent (seed or latent).
    pub fn goal_check(&self, intent_text: &str, state: &EnvState) -> Result<GoalStatus, EnvError> {
        let intent = self
            .find_intent(intent_text)
            .ok_or_else(|| EnvError::UnknownIntent(intent_text.to_string()))?;
        let goal = &intent.goal;
        let satisfied = state.screen == goal.screen
            && goal
                .bindings
                .iter()
                .all(|(k, v)| state.bindings.get(k) == Some(v));
        if satisfied {
            return Ok(GoalStatus::Satisfied);
        }
        if self.screen(&state.screen)?.dead_end {
            return Ok(GoalStatus::Violated);
        }
        Ok(GoalStatus::Open)
    }
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

/// Exclusive controller of one mutable environment state. Several sessions
/// may share one immutable graph.
#[derive(Debug, Clone)]
pub struct EnvSession {
    graph: Arc<ScreenGraph>,
    graph_fp: u64,
    state: EnvState,
    env_step_counter: u64,
    closed: bool,
}

impl EnvSession {
    pub fn new(graph: Arc<ScreenGraph>) -> Self {
        let state = graph.initial_state();
        let graph_fp = graph.fingerprint();
        EnvSession { graph, graph_fp, state, env_step_counter: 0, closed: false }
    }

    pub fn graph(&self) -> &Arc<ScreenGraph> {
        &self.graph
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Total actions this session has executed. Counts every executed
    /// action including no-ops, and is never rolled back by `restore`.
    pub fn steps_used(&self) -> u64 {
        self.env_step_counter
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn observe(&self) -> Result<(StateFingerprint, Observation), EnvError> {
        let screen = self.graph.screen(&self.state.screen)?;
        let fingerprint = self.state.fingerprint();
        let obs = Observation {
            screen_id: screen.id.clone(),
            fingerprint,
            dead_end: screen.dead_end,
            widgets: screen
                .widgets
                .iter()
                .map(|w| ObsWidget { name: w.name.clone(), on: w.on, rect: w.rect })
                .collect(),
            text_fields: screen
                .text_fields
                .iter()
                .map(|f| ObsField {
                    name: f.name.clone(),
                    rect: f.rect,
                    value: self.state.bindings.get(&f.name).cloned(),
                    options: f.options.clone(),
                })
                .collect(),
            scroll: screen.scroll_pages.as_ref().map(|pages| ObsScroll {
                page_index: pages.iter().position(|p| p == &screen.id).unwrap_or(0),
                page_count: pages.len(),
            }),
            system_buttons: screen.system_buttons.keys().copied().collect(),
            keys: screen.keys.clone(),
            bindings: self.state.bindings.clone(),
        };
        Ok((fingerprint, obs))
    }

    pub fn execute(
        &mut self,
        action: &GuiAction,
    ) -> Result<(StateFingerprint, TransitionOutcome), EnvError> {
        if self.closed {
            return Err(EnvError::SessionClosed);
        }
        let (next, outcome) = self.graph.apply(&self.state, action)?;
        self.env_step_counter += 1;
        self.state = next;
        if outcome == TransitionOutcome::Terminated {
            self.closed = true;
        }
        Ok((self.state.fingerprint(), outcome))
    }

    pub fn snapshot(&self) -> SnapshotToken {
        SnapshotToken { graph_fp: self.graph_fp, state: self.state.clone() }
    }

    pub fn restore(&mut self, token: &SnapshotToken) -> Result<(), EnvError> {
        if token.graph_fp != self.graph_fp {
            return Err(EnvError::ForeignSnapshot);
        }
        self.state = token.state.clone();
        self.closed = false;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reachability index
// ---------------------------------------------------------------------------

/// BFS index over the reachable state space: exact distances from any
/// reachable state to any declared goal, and which actions shrink them.
pub struct NavOracle {
    graph: Arc<ScreenGraph>,
    states: Vec<EnvState>,
    index: HashMap<StateKey, usize>,
    successors: Vec<Vec<usize>>,
    /// intent text -> distance-to-goal per state index.
    dist: HashMap<String, Vec<Option<u32>>>,
}

type StateKey = (String, BTreeMap<String, String>);

fn key_of(state: &EnvState) -> StateKey {
    (state.screen.clone(), state.bindings.clone())
}

impl NavOracle {
    pub fn build(graph: &ScreenGraph) -> Result<NavOracle, EnvError> {
        Self::build_arc(Arc::new(graph.clone()))
    }

    pub fn build_arc(graph: Arc<ScreenGraph>) -> Result<NavOracle, EnvError> {
        let mut states = vec![graph.initial_state()];
        let mut index = HashMap::new();
        index.insert(key_of(&states[0]), 0usize);
        let mut successors: Vec<Vec<usize>> = Vec::new();
        let mut frontier = VecDeque::from([0usize]);
        while let Some(i) = frontier.pop_front() {
            let mut succ = Vec::new();
            for action in graph.canonical_actions(&states[i])? {
                let (next, _) = graph.apply(&states[i], &action)?;
                let k = key_of(&next);
                let j = match index.get(&k) {
                    Some(&j) => j,
                    None => {
                        let j = states.len();
                        if j >= MAX_INDEXED_STATES {
                            return Err(EnvError::Schema(format!(
                                "state space exceeds {MAX_INDEXED_STATES} states"
                            )));
                        }
                        index.insert(k, j);
                        states.push(EnvState { step_count: 0, ..next });
                        frontier.push_back(j);
                        j
                    }
                };
                succ.push(j);
            }
            if successors.len() <= i {
                successors.resize(i + 1, Vec::new());
            }
            successors[i] = succ;
        }
        successors.resize(states.len(), Vec::new());

        // Reverse BFS per declared goal from every satisfying state.
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); states.len()];
        for (i, succ) in successors.iter().enumerate() {
            for &j in succ {
                reverse[j].push(i);
            }
        }
        let mut dist = HashMap::new();
        for intent in graph.intents().iter().chain(graph.latent_intents()) {
            let mut d: Vec<Option<u32>> = vec![None; states.len()];
            let mut q = VecDeque::new();
            for (i, s) in states.iter().enumerate() {
                if graph.goal_check(&intent.text, s)? == GoalStatus::Satisfied {
                    d[i] = Some(0);
                    q.push_back(i);
                }
            }
            while let Some(i) = q.pop_front() {
                let base = d[i].unwrap();
                for &p in &reverse[i] {
                    if d[p].is_none() {
                        d[p] = Some(base + 1);
                        q.push_back(p);
                    }
                }
            }
            dist.insert(intent.text.clone(), d);
        }
        Ok(NavOracle { graph, states, index, successors, dist })
    }

    pub fn graph(&self) -> &Arc<ScreenGraph> {
        &self.graph
    }

    pub fn reachable_states(&self) -> usize {
        self.states.len()
    }

    fn state_index(&self, state: &EnvState) -> Option<usize> {
        self.index.get(&key_of(state)).copied()
    }

    /// Reverse lookup: the reachable state behind a fingerprint, if any.
    /// Fingerprints ignore step counts, so any hit is canonical.
    pub fn state_by_fingerprint(&self, fp: StateFingerprint) -> Option<&EnvState> {
        self.states.iter().find(|s| s.fingerprint() == fp)
    }

    /// Exact BFS distance from `state` to the goal of the named intent.
    /// `None` means the goal cannot be reached from here (or the state
    /// itself was never reachable from the initial screen).
    pub fn distance(&self, intent_text: &str, state: &EnvState) -> Result<Option<u32>, EnvError> {
        let d = self
            .dist
            .get(intent_text)
            .ok_or_else(|| EnvError::UnknownIntent(intent_text.to_string()))?;
        Ok(self.state_index(state).and_then(|i| d[i]))
    }

    /// Canonical actions from `state` that strictly reduce the distance to
    /// the intent's goal, in canonical enumeration order.
    pub fn optimal_actions(
        &self,
        intent_text: &str,
        state: &EnvState,
    ) -> Result<Vec<GuiAction>, EnvError> {
        let Some(here) = self.distance(intent_text, state)? else {
            return Ok(Vec::new());
        };
        if here == 0 {
            return Ok(Vec::new());
        }
        let d = &self.dist[intent_text];
        let i = self.state_index(state).expect("distance() checked this");
        let actions = self.graph.canonical_actions(state)?;
        let mut out = Vec::new();
        for (a, &j) in actions.into_iter().zip(&self.successors[i]) {
            if d[j] == Some(here - 1) {
                out.push(a);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Bundled fixtures
// ---------------------------------------------------------------------------

/// Three-screen linear chain; the shortest demo the engine can walk.
pub fn chain3() -> ScreenGraph {
    ScreenGraph::from_json_str(include_str!("../../../fixtures/chain3.json"))
        .expect("bundled chain3 fixture is valid")
}

/// Nine-step hotel booking flow with waypoint intents at depths 1/3/5/7/9,
/// a photo-gallery latent goal, and a dead-end profile screen.
pub fn hotel_booking() -> ScreenGraph {
    ScreenGraph::from_json_str(include_str!("../../../fixtures/hotel-booking.json"))
        .expect("bundled hotel-booking fixture is valid")
}

/// Map app whose ride-booking button is one tap off the route-planning
/// path; the recycling demo.
pub fn map_app() -> ScreenGraph {
    ScreenGraph::from_json_str(include_str!("../../../fixtures/map-app.json"))
        .expect("bundled map-app fixture is valid")
}
