//! Macro actions: the agent's action vocabulary, pre-dispatch validation and
//! the per-action state machines that hide transitional screens.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::screen::Screen;

/// Overall tick budget of one macro.
pub const MACRO_TIMEOUT_TICKS: u32 = 50;
/// Budget of each `focus_and_type` sub-step.
pub const SUBSTEP_TIMEOUT_TICKS: u32 = 10;
/// How long a screen-changing macro waits for the first change before it
/// falls through to the stability check.
pub const CHANGE_WAIT_TICKS: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    FocusAndType,
    Dismiss,
    Wait,
    Back,
    Scroll,
    OpenApp,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::Click,
        ActionKind::FocusAndType,
        ActionKind::Dismiss,
        ActionKind::Wait,
        ActionKind::Back,
        ActionKind::Scroll,
        ActionKind::OpenApp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_element_action(self) -> bool {
        matches!(
            self,
            ActionKind::Click | ActionKind::FocusAndType | ActionKind::Dismiss
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::FocusAndType => "focus_and_type",
            ActionKind::Dismiss => "dismiss",
            ActionKind::Wait => "wait",
            ActionKind::Back => "back",
            ActionKind::Scroll => "scroll",
            ActionKind::OpenApp => "open_app",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MacroAction {
    pub kind: ActionKind,
    #[serde(default)]
    pub element_id: Option<String>,
    #[serde(default)]
    pub argument: Option<String>,
    #[serde(default)]
    pub press_enter: bool,
}

impl MacroAction {
    pub fn click(id: &str) -> Self {
        Self::element(ActionKind::Click, id)
    }
    pub fn dismiss(id: &str) -> Self {
        Self::element(ActionKind::Dismiss, id)
    }
    pub fn focus_and_type(id: &str, text: &str, press_enter: bool) -> Self {
        Self {
            kind: ActionKind::FocusAndType,
            element_id: Some(id.to_owned()),
            argument: Some(text.to_owned()),
            press_enter,
        }
    }
    pub fn wait() -> Self {
        Self::global(ActionKind::Wait, None)
    }
    pub fn back() -> Self {
        Self::global(ActionKind::Back, None)
    }
    pub fn scroll(dir: Direction) -> Self {
        Self::global(ActionKind::Scroll, Some(dir.as_str().to_owned()))
    }
    pub fn open_app(name: &str) -> Self {
        Self::global(ActionKind::OpenApp, Some(name.to_owned()))
    }

    fn element(kind: ActionKind, id: &str) -> Self {
        Self {
            kind,
            element_id: Some(id.to_owned()),
            argument: None,
            press_enter: false,
        }
    }

    fn global(kind: ActionKind, argument: Option<String>) -> Self {
        Self {
            kind,
            element_id: None,
            argument,
            press_enter: false,
        }
    }

    /// Checks the structural invariants of the action.
    pub fn check(&self) -> Result<(), ActionError> {
        let bad = |why: &str| Err(ActionError::Malformed(format!("{}: {why}", self.kind.name())));
        if self.kind.is_element_action() != self.element_id.is_some() {
            return bad("element_id must be present exactly for element actions");
        }
        if self.press_enter && self.kind != ActionKind::FocusAndType {
            return bad("press_enter is only meaningful for focus_and_type");
        }
        match self.kind {
            ActionKind::FocusAndType => {
                if self.argument.as_deref().map_or(true, str::is_empty) {
                    return bad("text argument must be non-empty");
                }
            }
            ActionKind::Scroll => {
                if self.argument.as_deref().and_then(Direction::parse).is_none() {
                    return bad("scroll needs one of left/right/up/down");
                }
            }
            ActionKind::OpenApp => {
                if self.argument.as_deref().map_or(true, str::is_empty) {
                    return bad("open_app needs an app name");
                }
            }
            ActionKind::Click | ActionKind::Dismiss | ActionKind::Wait | ActionKind::Back => {
                if self.argument.is_some() {
                    return bad("takes no argument");
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for MacroAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.name())?;
        if let Some(id) = &self.element_id {
            write!(f, " <{id}>")?;
        }
        if let Some(arg) = &self.argument {
            write!(f, " {arg:?}")?;
        }
        if self.press_enter {
            write!(f, " +enter")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ActionError {
    #[error("malformed action: {0}")]
    Malformed(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Stale,
}

/// Checks that an action predicted on `predicted_on` still applies to
/// `current`: global actions always do, element actions need the element to
/// be present with unchanged bbox, text and state flags.
pub fn validate(a: &MacroAction, predicted_on: &Screen, current: &Screen) -> Validity {
    let Some(id) = &a.element_id else {
        return Validity::Valid;
    };
    match (predicted_on.element(id), current.element(id)) {
        (Some(before), Some(now)) if before.same_appearance(now) => Validity::Valid,
        _ => Validity::Stale,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalState {
    #[serde(rename = "S5_failure")]
    S5Failure,
    #[serde(rename = "S6_success")]
    S6Success,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub terminal_state: TerminalState,
    pub screens_consumed: u32,
    pub elapsed_steps: u32,
    pub detail: String,
}

impl ActionOutcome {
    pub fn succeeded(&self) -> bool {
        self.terminal_state == TerminalState::S6Success
    }
}

/// Low-level operation understood by a device.
#[derive(Clone, Debug, PartialEq)]
pub enum LowLevelOp {
    /// Tap at a point. `element` names the intended target so the device can
    /// route the tap even when scaled bboxes overlap; `None` means hit-test.
    Tap { x: f32, y: f32, element: Option<String> },
    TypeText(String),
    PressEnter,
    Back,
    Scroll(Direction),
    Launch(String),
    Noop,
}

/// The device surface macros drive.
pub trait SimHandle {
    /// Current rendering, possibly a transitional screen.
    fn current_screen(&self) -> Screen;
    fn dispatch(&mut self, op: LowLevelOp) -> Result<(), String>;
    fn tick(&mut self);
    /// Incremented whenever the rendered screen changes.
    fn screen_version(&self) -> u64;
    fn is_stable(&self) -> bool;
    fn is_focused(&self, element_id: &str) -> bool;
    fn field_text(&self, element_id: &str) -> Option<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MacroState {
    /// Idle, nothing dispatched.
    S0,
    /// Dispatch issued, awaiting acknowledgement.
    S1,
    /// Awaiting the first screen change.
    S2,
    /// Awaiting a stable screen.
    S3,
    /// Screen settled; post-conditions are being checked.
    S4,
    S5,
    S6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroEvent {
    Start,
    Dispatched,
    Rejected,
    ScreenChanged,
    ScreenStable,
    Tick,
    Verified(bool),
}

/// State machine shared by all screen-changing macros.
///
/// ```text
/// S0 --start--> S1 --dispatched--> S2 (change expected) | S3
/// S1 --rejected--> S5
/// S2 --screen_changed--> S3        S2 --tick x CHANGE_WAIT--> S3
/// S3 --screen_stable--> S4         S3 --screen_changed|tick--> S3
/// S4 --verified(ok)--> S6          S4 --verified(fail)--> S5
/// timeout in S2/S3: S5 when a change was expected, otherwise S6
/// ```
#[derive(Clone, Debug)]
pub struct MacroMachine {
    pub current: MacroState,
    pub timeout_ticks: u32,
    expects_change: bool,
    ticks: u32,
    ticks_in_state: u32,
}

impl MacroMachine {
    pub fn new(expects_change: bool, timeout_ticks: u32) -> Self {
        Self {
            current: MacroState::S0,
            timeout_ticks,
            expects_change,
            ticks: 0,
            ticks_in_state: 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.current, MacroState::S5 | MacroState::S6)
    }

    pub fn ticks(&self) -> u32 {
        self.ticks
    }

    fn go(&mut self, s: MacroState) {
        if s != self.current {
            self.ticks_in_state = 0;
        }
        self.current = s;
    }

    /// Applies one event. Events that have no edge from the current state are
    /// rejected so callers cannot walk off the graph.
    pub fn on(&mut self, ev: MacroEvent) -> Result<MacroState, ActionError> {
        use MacroEvent as E;
        use MacroState as S;
        let is_tick = matches!(ev, E::ScreenChanged | E::ScreenStable | E::Tick);
        if is_tick {
            self.ticks += 1;
            self.ticks_in_state += 1;
        }
        let next = match (self.current, ev) {
            (S::S0, E::Start) => S::S1,
            (S::S1, E::Dispatched) if self.expects_change => S::S2,
            (S::S1, E::Dispatched) => S::S3,
            (S::S1, E::Rejected) => S::S5,
            (S::S2, E::ScreenChanged) => S::S3,
            (S::S2, E::ScreenStable | E::Tick) if self.ticks_in_state >= CHANGE_WAIT_TICKS => S::S3,
            (S::S2, E::ScreenStable | E::Tick) => S::S2,
            (S::S3, E::ScreenStable) => S::S4,
            (S::S3, E::ScreenChanged | E::Tick) => S::S3,
            (S::S4, E::Verified(true)) => S::S6,
            (S::S4, E::Verified(false)) => S::S5,
            (s, e) => {
                return Err(ActionError::InvalidAction(format!(
                    "no transition from {s:?} on {e:?}"
                )))
            }
        };
        self.go(next);
        if is_tick
            && matches!(self.current, S::S2 | S::S3)
            && self.ticks >= self.timeout_ticks
        {
            self.go(if self.expects_change { S::S5 } else { S::S6 });
        }
        Ok(self.current)
    }
}

/// Tracks screen versions over ticks and turns them into machine events.
struct Observer {
    last_version: u64,
    screens_consumed: u32,
}

impl Observer {
    fn new(env: &dyn SimHandle) -> Self {
        Self {
            last_version: env.screen_version(),
            screens_consumed: 0,
        }
    }

    fn tick(&mut self, env: &mut dyn SimHandle) -> MacroEvent {
        env.tick();
        let v = env.screen_version();
        let stable = env.is_stable();
        if v != self.last_version {
            self.last_version = v;
            if !stable {
                self.screens_consumed += 1;
            }
            MacroEvent::ScreenChanged
        } else if stable {
            MacroEvent::ScreenStable
        } else {
            MacroEvent::Tick
        }
    }
}

fn outcome(state: TerminalState, consumed: u32, ticks: u32, detail: impl Into<String>) -> ActionOutcome {
    ActionOutcome {
        terminal_state: state,
        screens_consumed: consumed,
        elapsed_steps: ticks,
        detail: detail.into(),
    }
}

/// Dispatches `op` and drives the machine until it terminates.
fn run_machine(
    env: &mut dyn SimHandle,
    op: LowLevelOp,
    expects_change: bool,
    timeout: u32,
    obs: &mut Observer,
    verify: &dyn Fn(&dyn SimHandle) -> bool,
) -> (MacroState, u32, String) {
    let mut m = MacroMachine::new(expects_change, timeout);
    m.on(MacroEvent::Start).expect("S0 start");
    match env.dispatch(op) {
        Ok(()) => m.on(MacroEvent::Dispatched).expect("S1 dispatched"),
        Err(reason) => {
            m.on(MacroEvent::Rejected).expect("S1 rejected");
            return (m.current, 0, format!("dispatch rejected: {reason}"));
        }
    };
    while !m.is_terminal() {
        let ev = obs.tick(env);
        m.on(ev).expect("tick events are valid in S2/S3");
        if m.current == MacroState::S4 {
            let ok = verify(env);
            m.on(MacroEvent::Verified(ok)).expect("S4 verify");
        }
    }
    let detail = match m.current {
        MacroState::S6 => "ok".to_owned(),
        _ if m.ticks() >= timeout => "timed out waiting for a stable screen".to_owned(),
        _ => "post-condition failed".to_owned(),
    };
    (m.current, m.ticks(), detail)
}

fn terminal(s: MacroState) -> TerminalState {
    if s == MacroState::S6 {
        TerminalState::S6Success
    } else {
        TerminalState::S5Failure
    }
}

/// Point used by `dismiss`: the screen corner farthest from the bbox center.
pub fn dismiss_point(bbox: &crate::screen::BBox) -> (f32, f32) {
    let (cx, cy) = bbox.center();
    let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
    let mut best = corners[0];
    let mut best_d = -1.0f32;
    for c in corners {
        let d = (c.0 - cx).powi(2) + (c.1 - cy).powi(2);
        if d > best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Executes a validated macro action atomically against `env`.
pub fn execute(a: &MacroAction, env: &mut dyn SimHandle) -> Result<ActionOutcome, ActionError> {
    a.check()?;
    let screen = env.current_screen();
    let target = match &a.element_id {
        Some(id) => Some(screen.element(id).cloned().ok_or_else(|| {
            ActionError::InvalidAction(format!("element {id} is not on screen {}", screen.screen_id))
        })?),
        None => None,
    };
    if a.kind == ActionKind::FocusAndType {
        return execute_focus_and_type(a, env);
    }
    let (op, expects_change) = match a.kind {
        ActionKind::Click => {
            let t = target.as_ref().unwrap();
            let (x, y) = t.bbox.center();
            (
                LowLevelOp::Tap {
                    x,
                    y,
                    element: Some(t.id.clone()),
                },
                true,
            )
        }
        ActionKind::Dismiss => {
            let (x, y) = dismiss_point(&target.as_ref().unwrap().bbox);
            (LowLevelOp::Tap { x, y, element: None }, true)
        }
        ActionKind::Wait => (LowLevelOp::Noop, false),
        ActionKind::Back => (LowLevelOp::Back, true),
        ActionKind::Scroll => (
            LowLevelOp::Scroll(Direction::parse(a.argument.as_deref().unwrap()).unwrap()),
            true,
        ),
        ActionKind::OpenApp => (LowLevelOp::Launch(a.argument.clone().unwrap()), true),
        ActionKind::FocusAndType => unreachable!(),
    };
    let mut obs = Observer::new(env);
    let (state, ticks, detail) = run_machine(env, op, expects_change, MACRO_TIMEOUT_TICKS, &mut obs, &|_| true);
    Ok(outcome(terminal(state), obs.screens_consumed, ticks, detail))
}

/// The four-step `focus_and_type` macro: click the field, wait for focus,
/// type the text, optionally press Enter. Each sub-step has its own budget.
pub fn execute_focus_and_type(
    a: &MacroAction,
    env: &mut dyn SimHandle,
) -> Result<ActionOutcome, ActionError> {
    if a.kind != ActionKind::FocusAndType {
        return Err(ActionError::InvalidAction("not a focus_and_type action".into()));
    }
    a.check()?;
    let id = a.element_id.clone().unwrap();
    let text = a.argument.clone().unwrap();
    let screen = env.current_screen();
    let target = screen
        .element(&id)
        .cloned()
        .ok_or_else(|| ActionError::InvalidAction(format!("element {id} is not on screen")))?;
    let fail = |consumed, ticks, detail: String| {
        Ok(outcome(TerminalState::S5Failure, consumed, ticks, detail))
    };
    if !target.state_flags.editable {
        return fail(0, 0, format!("NotEditable: {id}"));
    }
    let mut obs = Observer::new(env);
    let mut ticks = 0u32;

    // 1. click the field
    let (x, y) = target.bbox.center();
    if let Err(reason) = env.dispatch(LowLevelOp::Tap {
        x,
        y,
        element: Some(id.clone()),
    }) {
        return fail(0, 0, format!("click rejected: {reason}"));
    }

    // 2. wait for the cursor
    let mut waited = 0;
    while !env.is_focused(&id) {
        if waited >= SUBSTEP_TIMEOUT_TICKS {
            return fail(obs.screens_consumed, ticks, format!("focus not granted on {id}"));
        }
        obs.tick(env);
        waited += 1;
        ticks += 1;
    }

    // 3. type
    let before = env.field_text(&id).unwrap_or_default();
    if let Err(reason) = env.dispatch(LowLevelOp::TypeText(text.clone())) {
        return fail(obs.screens_consumed, ticks, format!("typing rejected: {reason}"));
    }
    let expected = format!("{before}{text}");
    let mut waited = 0;
    while env.field_text(&id).as_deref() != Some(expected.as_str()) {
        if waited >= SUBSTEP_TIMEOUT_TICKS {
            return fail(obs.screens_consumed, ticks, format!("text did not appear in {id}"));
        }
        obs.tick(env);
        waited += 1;
        ticks += 1;
    }

    // 4. optional Enter, then settle
    let (op, expects_change) = if a.press_enter {
        (LowLevelOp::PressEnter, true)
    } else {
        (LowLevelOp::Noop, false)
    };
    let budget = SUBSTEP_TIMEOUT_TICKS.min(MACRO_TIMEOUT_TICKS.saturating_sub(ticks));
    let (state, t, detail) = run_machine(env, op, expects_change, budget, &mut obs, &|_| true);
    ticks += t;
    Ok(outcome(terminal(state), obs.screens_consumed, ticks, detail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::fixtures::element;
    use crate::screen::ElemType;

    #[test]
    fn action_invariants() {
        assert!(MacroAction::click("a").check().is_ok());
        assert!(MacroAction::scroll(Direction::Up).check().is_ok());
        assert!(MacroAction::focus_and_type("f", "", false).check().is_err());
        let mut a = MacroAction::wait();
        a.element_id = Some("x".into());
        assert!(a.check().is_err());
        let mut s = MacroAction::back();
        s.kind = ActionKind::Scroll;
        s.argument = Some("sideways".into());
        assert!(s.check().is_err());
    }

    #[test]
    fn action_json_field_names() {
        let j = serde_json::to_value(MacroAction::focus_and_type("q", "tiktok", true)).unwrap();
        assert_eq!(j["kind"], "focus_and_type");
        assert_eq!(j["element_id"], "q");
        assert_eq!(j["argument"], "tiktok");
        assert_eq!(j["press_enter"], true);
    }

    #[test]
    fn validation() {
        let a = element("a", ElemType::Button, "OK", [0.1, 0.1, 0.3, 0.2]);
        let s = Screen::new("s", true, vec![a.clone()]);
        assert_eq!(validate(&MacroAction::click("a"), &s, &s), Validity::Valid);
        assert_eq!(validate(&MacroAction::back(), &s, &s), Validity::Valid);
        let gone = Screen::new(
            "s",
            true,
            vec![element("b", ElemType::Button, "OK", [0.1, 0.1, 0.3, 0.2])],
        );
        assert_eq!(validate(&MacroAction::click("a"), &s, &gone), Validity::Stale);
        let mut moved = a.clone();
        moved.bbox.0[1] += 0.05;
        let shifted = Screen::new("s", true, vec![moved]);
        assert_eq!(validate(&MacroAction::click("a"), &s, &shifted), Validity::Stale);
        // Monotone: asking again gives the same answer.
        assert_eq!(validate(&MacroAction::click("a"), &s, &shifted), Validity::Stale);
    }

    #[test]
    fn dismiss_uses_farthest_corner() {
        let b = crate::screen::BBox::new(0.1, 0.1, 0.3, 0.2);
        assert_eq!(dismiss_point(&b), (1.0, 1.0));
        let b = crate::screen::BBox::new(0.7, 0.8, 0.9, 0.9);
        assert_eq!(dismiss_point(&b), (0.0, 0.0));
    }

    #[test]
    fn machine_rejects_off_graph_events() {
        let mut m = MacroMachine::new(true, 50);
        assert!(m.on(MacroEvent::Dispatched).is_err());
        m.on(MacroEvent::Start).unwrap();
        assert!(m.on(MacroEvent::Verified(true)).is_err());
    }

    #[test]
    fn machine_times_out_without_stability() {
        let mut m = MacroMachine::new(true, 50);
        m.on(MacroEvent::Start).unwrap();
        m.on(MacroEvent::Dispatched).unwrap();
        m.on(MacroEvent::ScreenChanged).unwrap();
        while !m.is_terminal() {
            m.on(MacroEvent::Tick).unwrap();
        }
        assert_eq!(m.current, MacroState::S5);
        assert_eq!(m.ticks(), 50);
    }

    #[test]
    fn wait_machine_needs_one_stable_tick() {
        let mut m = MacroMachine::new(false, 50);
        m.on(MacroEvent::Start).unwrap();
        m.on(MacroEvent::Dispatched).unwrap();
        assert_eq!(m.on(MacroEvent::ScreenStable).unwrap(), MacroState::S4);
        assert_eq!(m.on(MacroEvent::Verified(true)).unwrap(), MacroState::S6);
        assert_eq!(m.ticks(), 1);
    }
}
