//! The simulated device: app rules over a hashable state, plus a ticking
//! front-end that implements [`SimHandle`].
//!
//! [`World`] holds the pure rules. Both the ticking [`Device`] and the oracle
//! planner go through it, so planning and execution cannot drift apart.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{dismiss_point, ActionKind, Direction, LowLevelOp, MacroAction, SimHandle};
use crate::screen::{BBox, ElemType, Screen, StateFlags, UiElement};

use super::spec::{Condition, Effect, ElementSpec, MockAppSpec, PopupSpec, ScreenSpec};
use super::suite::{Suite, LAUNCHER};

/// Bboxes are snapped to this grid so transformed geometry is exact.
pub const GRID: f64 = 4096.0;
/// Upper bound on ticks spent settling after an action.
pub const SETTLE_TICKS: u32 = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    Portrait,
    Landscape,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub font_scale: f32,
    pub density_factor: f32,
    pub orientation: Orientation,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            font_scale: 1.0,
            density_factor: 1.0,
            orientation: Orientation::Portrait,
        }
    }
}

/// Element types whose box follows the font scale.
pub fn is_text_type(t: ElemType) -> bool {
    matches!(
        t,
        ElemType::Button | ElemType::TextField | ElemType::Label | ElemType::ListItem | ElemType::Checkbox
    )
}

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

fn scale_about_center(b: [f64; 4], s: f64) -> [f64; 4] {
    let cx = 0.5 * (b[0] + b[2]);
    let cy = 0.5 * (b[1] + b[3]);
    [
        cx + (b[0] - cx) * s,
        cy + (b[1] - cy) * s,
        cx + (b[2] - cx) * s,
        cy + (b[3] - cy) * s,
    ]
}

impl Geometry {
    /// Font scale (text elements), then density, clamp, snap, then the
    /// landscape axis swap.
    pub fn apply(&self, bbox: [f32; 4], text_element: bool) -> BBox {
        let mut b = bbox.map(f64::from);
        if text_element {
            b = scale_about_center(b, f64::from(self.font_scale));
        }
        b = scale_about_center(b, f64::from(self.density_factor));
        let mut b = b.map(|v| snap(v.clamp(0.0, 1.0)));
        let min = 1.0 / GRID;
        for (lo, hi) in [(0, 2), (1, 3)] {
            if b[hi] - b[lo] < min {
                if b[lo] + min <= 1.0 {
                    b[hi] = b[lo] + min;
                } else {
                    b[lo] = b[hi] - min;
                }
            }
        }
        let b = match self.orientation {
            Orientation::Portrait => b,
            Orientation::Landscape => [b[1], b[0], b[3], b[2]],
        };
        BBox(b.map(|v| v as f32))
    }
}

type Key = (String, String);

fn key(a: &str, b: &str) -> Key {
    (a.to_owned(), b.to_owned())
}

/// Everything that determines the device's behavior apart from timing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct DeviceState {
    pub app: String,
    pub screen: String,
    pub fields: BTreeMap<Key, String>,
    pub toggles: BTreeMap<Key, bool>,
    pub focused: Option<String>,
    /// Index into the current app's popups.
    pub popup: Option<usize>,
    pub popups_seen: BTreeSet<Key>,
    pub scroll: BTreeMap<Key, u32>,
    /// Latest submission per (app, form).
    pub submissions: BTreeMap<Key, BTreeMap<String, String>>,
    pub last_submitted: BTreeMap<Key, String>,
}

impl DeviceState {
    pub fn field(&self, app: &str, name: &str) -> &str {
        self.fields.get(&key(app, name)).map(String::as_str).unwrap_or("")
    }
    pub fn toggle(&self, app: &str, name: &str) -> Option<bool> {
        self.toggles.get(&key(app, name)).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Mutation {
    Enter { app: String, screen: String },
    ClearField(String),
    Toggle(String),
    Submit { form: String, fields: Vec<String> },
    Focus(String),
    Unfocus,
    Append(String),
    ClosePopup,
    Scroll(i32),
}

/// Deferred state change produced by a dispatched operation.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Transition {
    pub muts: Vec<Mutation>,
    /// Ticks before the change (or the loading screen) appears.
    pub delay: u32,
    /// Ticks the loading screen stays up before the change lands.
    pub loading: u32,
}

impl Transition {
    fn now(muts: Vec<Mutation>) -> Self {
        Self { muts, delay: 1, loading: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Screen,
    Popup,
    Loading,
}

/// An element placed on the current rendering.
#[derive(Clone, Debug)]
pub struct Placed<'a> {
    pub spec: &'a ElementSpec,
    pub bbox: BBox,
    pub source: Source,
}

static LOADING: std::sync::OnceLock<ElementSpec> = std::sync::OnceLock::new();

fn loading_spinner() -> &'static ElementSpec {
    LOADING.get_or_init(|| ElementSpec {
        id: "loading_spinner".into(),
        elem_type: ElemType::Image,
        text: String::new(),
        desc: "Loading".into(),
        rid: "android:id/progress".into(),
        bbox: [0.4, 0.45, 0.6, 0.55],
        clickable: false,
        enabled: true,
        field: None,
        toggle: None,
        visible_if: None,
        scrolls: false,
        focus_delay: Some(1),
        on_click: Vec::new(),
    })
}

/// Pure app rules.
#[derive(Clone, Debug)]
pub struct World {
    pub suite: Arc<Suite>,
    pub geometry: Geometry,
}

impl World {
    pub fn new(suite: Arc<Suite>, geometry: Geometry) -> Self {
        Self { suite, geometry }
    }

    fn app(&self, name: &str) -> &MockAppSpec {
        &self.suite.apps[name]
    }

    fn screen_spec<'a>(&'a self, st: &DeviceState) -> &'a ScreenSpec {
        &self.app(&st.app).screens[&st.screen]
    }

    pub fn active_popup<'a>(&'a self, st: &DeviceState) -> Option<&'a PopupSpec> {
        st.popup.map(|i| &self.app(&st.app).popups[i])
    }

    /// Initial state: every app's toggles at their defaults, `app` open at
    /// its initial screen.
    pub fn initial_state(&self, app: &str) -> DeviceState {
        let mut st = DeviceState::default();
        for (name, spec) in &self.suite.apps {
            for (t, v) in &spec.toggles {
                st.toggles.insert(key(name, t), *v);
            }
        }
        st.app = app.to_owned();
        st.screen = self.app(app).initial_screen.clone();
        st
    }

    fn holds(&self, st: &DeviceState, c: &Condition) -> bool {
        let app = &st.app;
        match c {
            Condition::FieldNonempty(f) => !st.field(app, f).is_empty(),
            Condition::FieldEmpty(f) => st.field(app, f).is_empty(),
            Condition::Submitted(form) => st.submissions.contains_key(&key(app, form)),
            Condition::ToggleOn(t) => st.toggle(app, t).unwrap_or(false),
        }
    }

    /// Current rendering's elements in order, with transformed boxes.
    pub fn layout<'a>(&'a self, st: &DeviceState, transient: bool) -> Vec<Placed<'a>> {
        let g = self.geometry;
        let place = |spec: &'a ElementSpec, b: [f32; 4], source| Placed {
            spec,
            bbox: g.apply(b, is_text_type(spec.elem_type)),
            source,
        };
        if transient {
            let s = loading_spinner();
            return vec![place(s, s.bbox, Source::Loading)];
        }
        if let Some(p) = self.active_popup(st) {
            return p.elements.iter().map(|e| place(e, e.bbox, Source::Popup)).collect();
        }
        let spec = self.screen_spec(st);
        let offset = st.scroll.get(&key(&st.app, &st.screen)).copied().unwrap_or(0);
        let mut out = Vec::with_capacity(spec.elements.len());
        for e in &spec.elements {
            if let Some(c) = &e.visible_if {
                if !self.holds(st, c) {
                    continue;
                }
            }
            let mut b = e.bbox;
            if e.scrolls {
                if let Some(sc) = &spec.scroll {
                    let dy = sc.step * offset as f32;
                    b[1] -= dy;
                    b[3] -= dy;
                    if b[1] < sc.view_top || b[3] > sc.view_bottom {
                        continue;
                    }
                }
            }
            out.push(place(e, b, Source::Screen));
        }
        out
    }

    fn expand_text(&self, st: &DeviceState, s: &str) -> String {
        if !s.contains("${") {
            return s.to_owned();
        }
        let mut out = String::new();
        let mut rest = s;
        while let Some(i) = rest.find("${") {
            out.push_str(&rest[..i]);
            let Some(j) = rest[i..].find('}') else {
                out.push_str(&rest[i..]);
                return out;
            };
            let token = &rest[i + 2..i + j];
            let value = match token.split_once(':') {
                Some(("field", f)) => st.field(&st.app, f).to_owned(),
                Some(("submitted", f)) => st
                    .last_submitted
                    .get(&key(&st.app, f))
                    .cloned()
                    .unwrap_or_default(),
                _ => String::new(),
            };
            out.push_str(&value);
            rest = &rest[i + j + 1..];
        }
        out.push_str(rest);
        out
    }

    pub fn screen_id(&self, st: &DeviceState, transient: bool) -> String {
        if transient {
            return format!("{}/loading", st.app);
        }
        match self.active_popup(st) {
            Some(p) => format!("{}/{}/popup:{}", st.app, st.screen, p.id),
            None => format!("{}/{}", st.app, st.screen),
        }
    }

    pub fn render(&self, st: &DeviceState, transient: bool) -> Screen {
        let elements = self
            .layout(st, transient)
            .into_iter()
            .map(|p| {
                let e = p.spec;
                let checked = e
                    .toggle
                    .as_ref()
                    .and_then(|t| st.toggle(&st.app, t))
                    .unwrap_or(false);
                UiElement {
                    id: e.id.clone(),
                    elem_type: e.elem_type,
                    text: self.expand_text(st, &e.text),
                    content_desc: e.desc.clone(),
                    resource_id: e.rid.clone(),
                    bbox: p.bbox,
                    state_flags: StateFlags {
                        checked,
                        focused: !transient && st.focused.as_deref() == Some(e.id.as_str()),
                        enabled: e.enabled,
                        clickable: e.clickable || e.field.is_some(),
                        editable: e.field.is_some(),
                    },
                    critical: false,
                    text_embed_override: None,
                }
            })
            .collect();
        Screen::new(self.screen_id(st, transient), !transient, elements)
    }

    fn effects(&self, st: &DeviceState, effects: &[Effect]) -> Vec<Mutation> {
        effects
            .iter()
            .map(|e| match e {
                Effect::Goto(s) => Mutation::Enter {
                    app: st.app.clone(),
                    screen: s.clone(),
                },
                Effect::OpenApp { app, screen } => Mutation::Enter {
                    app: app.clone(),
                    screen: screen.clone().unwrap_or_else(|| self.app(app).initial_screen.clone()),
                },
                Effect::ClearField(f) => Mutation::ClearField(f.clone()),
                Effect::Toggle(t) => Mutation::Toggle(t.clone()),
                Effect::Submit { form, fields } => Mutation::Submit {
                    form: form.clone(),
                    fields: fields.clone(),
                },
            })
            .collect()
    }

    /// The element the device focuses for typing, if it is on screen.
    fn focused_field<'a>(&'a self, st: &DeviceState, transient: bool) -> Option<&'a ElementSpec> {
        let id = st.focused.as_deref()?;
        self.layout(st, transient)
            .into_iter()
            .find(|p| p.spec.id == id && p.spec.field.is_some())
            .map(|p| p.spec)
    }

    /// Interprets a low-level operation. `Ok(None)` means accepted without
    /// effect.
    pub(crate) fn resolve(
        &self,
        st: &DeviceState,
        transient: bool,
        op: &LowLevelOp,
    ) -> Result<Option<Transition>, String> {
        if transient && !matches!(op, LowLevelOp::Noop) {
            return Err("screen is loading".into());
        }
        match op {
            LowLevelOp::Noop => Ok(None),
            LowLevelOp::Tap { x, y, element } => self.resolve_tap(st, *x, *y, element.as_deref()),
            LowLevelOp::TypeText(s) => match self.focused_field(st, transient) {
                Some(_) => Ok(Some(Transition::now(vec![Mutation::Append(s.clone())]))),
                None => Err("no focused text field".into()),
            },
            LowLevelOp::PressEnter => {
                let Some(f) = self.focused_field(st, transient) else {
                    return Ok(None);
                };
                let name = f.field.as_ref().unwrap();
                let on_enter = self
                    .app(&st.app)
                    .fields
                    .get(name)
                    .map(|fs| fs.on_enter.as_slice())
                    .unwrap_or(&[]);
                if on_enter.is_empty() {
                    return Ok(None);
                }
                Ok(Some(Transition::now(self.effects(st, on_enter))))
            }
            LowLevelOp::Back => {
                if let Some(p) = self.active_popup(st) {
                    return Ok(p.back_closes.then(|| Transition::now(vec![Mutation::ClosePopup])));
                }
                let spec = self.screen_spec(st);
                if spec.reject_back {
                    return Err(format!("back is rejected on {}", st.screen));
                }
                let target = match &spec.parent {
                    Some(p) => Mutation::Enter {
                        app: st.app.clone(),
                        screen: p.clone(),
                    },
                    None if st.app == LAUNCHER => return Ok(None),
                    None => Mutation::Enter {
                        app: LAUNCHER.into(),
                        screen: self.app(LAUNCHER).initial_screen.clone(),
                    },
                };
                Ok(Some(Transition::now(vec![target])))
            }
            LowLevelOp::Scroll(dir) => {
                if st.popup.is_some() {
                    return Ok(None);
                }
                let Some(sc) = self.screen_spec(st).scroll else {
                    return Ok(None);
                };
                let offset = st.scroll.get(&key(&st.app, &st.screen)).copied().unwrap_or(0);
                let delta = match dir {
                    Direction::Down if offset < sc.max_offset => 1,
                    Direction::Up if offset > 0 => -1,
                    _ => return Ok(None),
                };
                Ok(Some(Transition::now(vec![Mutation::Scroll(delta)])))
            }
            LowLevelOp::Launch(app) => match self.suite.apps.get(app) {
                Some(spec) => Ok(Some(Transition::now(vec![Mutation::Enter {
                    app: app.clone(),
                    screen: spec.initial_screen.clone(),
                }]))),
                None => Err(format!("no app named {app}")),
            },
        }
    }

    fn resolve_tap(
        &self,
        st: &DeviceState,
        x: f32,
        y: f32,
        element: Option<&str>,
    ) -> Result<Option<Transition>, String> {
        let items = self.layout(st, false);
        let target = match element {
            Some(id) => Some(
                items
                    .iter()
                    .find(|p| p.spec.id == id)
                    .ok_or_else(|| format!("no element {id} on screen"))?,
            ),
            None => items.iter().rev().find(|p| p.bbox.contains(x, y)),
        };
        if let Some(p) = self.active_popup(st) {
            let panel = items.iter().find(|i| i.spec.id == p.panel).map(|i| i.bbox);
            return Ok(match target {
                Some(t) if p.dismiss_element.as_deref() == Some(t.spec.id.as_str()) => {
                    Some(Transition::now(vec![Mutation::ClosePopup]))
                }
                Some(t) if t.spec.id != p.panel && t.spec.enabled && !t.spec.on_click.is_empty() => {
                    Some(Transition::now(self.effects(st, &t.spec.on_click)))
                }
                None if p.outside_closes && !panel.is_some_and(|b| b.contains(x, y)) => {
                    Some(Transition::now(vec![Mutation::ClosePopup]))
                }
                _ => None,
            });
        }
        let Some(t) = target else { return Ok(None) };
        let e = t.spec;
        if !e.enabled {
            return Ok(None);
        }
        if e.field.is_some() {
            if st.focused.as_deref() == Some(e.id.as_str()) {
                return Ok(None);
            }
            return Ok(e.focus_delay.map(|d| Transition {
                muts: vec![Mutation::Focus(e.id.clone())],
                delay: d.max(1),
                loading: 0,
            }));
        }
        if !e.clickable {
            return Ok(None);
        }
        let mut muts = Vec::new();
        if let (Some(tg), true) = (&e.toggle, e.on_click.is_empty()) {
            muts.push(Mutation::Toggle(tg.clone()));
        }
        muts.extend(self.effects(st, &e.on_click));
        if muts.is_empty() {
            return Ok(None);
        }
        if st.focused.is_some() {
            muts.insert(0, Mutation::Unfocus);
        }
        let loading = self
            .app(&st.app)
            .interstitials
            .iter()
            .find(|i| i.screen == st.screen && i.element == e.id)
            .map_or(0, |i| i.delay);
        Ok(Some(Transition { muts, delay: 1, loading }))
    }

    /// Applies one mutation. Popups roll only when `rng` is given.
    pub(crate) fn apply(&self, st: &mut DeviceState, m: &Mutation, rng: Option<&mut ChaCha8Rng>) {
        let app = st.app.clone();
        match m {
            Mutation::Enter { app, screen } => {
                st.app = app.clone();
                st.screen = screen.clone();
                st.focused = None;
                st.popup = None;
                if let Some(rng) = rng {
                    self.roll_popups(st, rng);
                }
            }
            Mutation::ClearField(f) => {
                st.fields.remove(&key(&app, f));
            }
            Mutation::Toggle(t) => {
                let v = st.toggles.entry(key(&app, t)).or_insert(false);
                *v = !*v;
            }
            Mutation::Submit { form, fields } => {
                let mut values = BTreeMap::new();
                for f in fields {
                    let v = st.field(&app, f).to_owned();
                    st.last_submitted.insert(key(&app, f), v.clone());
                    values.insert(f.clone(), v);
                }
                st.submissions.insert(key(&app, form), values);
            }
            Mutation::Focus(id) => st.focused = Some(id.clone()),
            Mutation::Unfocus => st.focused = None,
            Mutation::Append(s) => {
                let field = st.focused.as_ref().and_then(|id| {
                    self.layout(st, false)
                        .into_iter()
                        .find(|p| &p.spec.id == id)
                        .and_then(|p| p.spec.field.clone())
                });
                if let Some(f) = field {
                    st.fields.entry(key(&app, &f)).or_default().push_str(s);
                }
            }
            Mutation::ClosePopup => {
                st.popup = None;
                if let Some(rng) = rng {
                    self.roll_popups(st, rng);
                }
            }
            Mutation::Scroll(d) => {
                let o = st.scroll.entry(key(&app, &st.screen)).or_insert(0);
                *o = (*o as i64 + *d as i64).max(0) as u32;
            }
        }
    }

    /// Rolls each not-yet-seen popup of the current screen in order until one
    /// fires. Each popup is rolled at most once per episode.
    pub(crate) fn roll_popups(&self, st: &mut DeviceState, rng: &mut ChaCha8Rng) {
        if st.popup.is_some() {
            return;
        }
        let spec = self.app(&st.app);
        for (i, p) in spec.popups.iter().enumerate() {
            if !p.screens.contains(&st.screen) || st.popups_seen.contains(&key(&st.app, &p.id)) {
                continue;
            }
            st.popups_seen.insert(key(&st.app, &p.id));
            if rng.gen::<f64>() < p.probability {
                st.popup = Some(i);
                return;
            }
        }
    }

    fn apply_now(&self, st: &mut DeviceState, op: &LowLevelOp) -> Result<(), String> {
        if let Some(t) = self.resolve(st, false, op)? {
            for m in &t.muts {
                self.apply(st, m, None);
            }
        }
        Ok(())
    }

    /// State after `a` with instant effects and no popups; `None` if the
    /// action is not applicable on the current rendering.
    pub fn successor(&self, st: &DeviceState, a: &MacroAction) -> Option<DeviceState> {
        let mut next = st.clone();
        let items = self.layout(st, false);
        let target = match &a.element_id {
            Some(id) => Some(items.iter().find(|p| &p.spec.id == id)?),
            None => None,
        };
        let op = match a.kind {
            ActionKind::Click => {
                let t = target?;
                let (x, y) = t.bbox.center();
                LowLevelOp::Tap {
                    x,
                    y,
                    element: Some(t.spec.id.clone()),
                }
            }
            ActionKind::Dismiss => {
                let (x, y) = dismiss_point(&target?.bbox);
                LowLevelOp::Tap { x, y, element: None }
            }
            ActionKind::FocusAndType => {
                let t = target?;
                t.spec.field.as_ref()?;
                let (x, y) = t.bbox.center();
                self.apply_now(
                    &mut next,
                    &LowLevelOp::Tap {
                        x,
                        y,
                        element: Some(t.spec.id.clone()),
                    },
                )
                .ok()?;
                if next.focused.as_deref() != Some(t.spec.id.as_str()) {
                    return Some(next);
                }
                self.apply_now(&mut next, &LowLevelOp::TypeText(a.argument.clone()?)).ok()?;
                if a.press_enter {
                    self.apply_now(&mut next, &LowLevelOp::PressEnter).ok()?;
                }
                return Some(next);
            }
            ActionKind::Wait => LowLevelOp::Noop,
            ActionKind::Back => LowLevelOp::Back,
            ActionKind::Scroll => LowLevelOp::Scroll(Direction::parse(a.argument.as_deref()?)?),
            ActionKind::OpenApp => LowLevelOp::Launch(a.argument.clone()?),
        };
        self.apply_now(&mut next, &op).ok()?;
        Some(next)
    }
}

#[derive(Clone, Debug)]
struct Pending {
    transition: Transition,
    ticks_left: u32,
    loading_shown: bool,
}

/// A ticking device. Dispatched operations take effect on later ticks, and
/// interstitials show a transitional loading screen first.
#[derive(Clone, Debug)]
pub struct Device {
    world: World,
    state: DeviceState,
    rng: ChaCha8Rng,
    pending: VecDeque<Pending>,
    transient: bool,
    version: u64,
    rendered: Screen,
    clock: u64,
}

impl Device {
    pub fn new(world: World, state: DeviceState, rng: ChaCha8Rng) -> Self {
        let rendered = world.render(&state, false);
        Self {
            world,
            state,
            rng,
            pending: VecDeque::new(),
            transient: false,
            version: 0,
            rendered,
            clock: 0,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty() && !self.transient
    }

    /// Ticks until no change is in flight, bounded by [`SETTLE_TICKS`].
    pub fn settle(&mut self) {
        let mut n = 0;
        while !self.is_idle() && n < SETTLE_TICKS {
            self.tick();
            n += 1;
        }
    }

    fn refresh(&mut self) {
        let r = self.world.render(&self.state, self.transient);
        if r != self.rendered {
            self.rendered = r;
            self.version += 1;
        }
    }

    fn landing(&mut self, p: Pending) {
        if p.transition.loading > 0 && !p.loading_shown {
            self.transient = true;
            self.pending.push_front(Pending {
                ticks_left: p.transition.loading,
                loading_shown: true,
                transition: p.transition,
            });
            return;
        }
        self.transient = false;
        for m in &p.transition.muts {
            self.world.apply(&mut self.state, m, Some(&mut self.rng));
        }
    }
}

impl SimHandle for Device {
    fn current_screen(&self) -> Screen {
        self.rendered.clone()
    }

    fn dispatch(&mut self, op: LowLevelOp) -> Result<(), String> {
        if let Some(t) = self.world.resolve(&self.state, self.transient, &op)? {
            self.pending.push_back(Pending {
                ticks_left: t.delay.max(1),
                transition: t,
                loading_shown: false,
            });
        }
        Ok(())
    }

    fn tick(&mut self) {
        self.clock += 1;
        if let Some(front) = self.pending.front_mut() {
            front.ticks_left = front.ticks_left.saturating_sub(1);
            if front.ticks_left == 0 {
                let p = self.pending.pop_front().unwrap();
                self.landing(p);
            }
        }
        self.refresh();
    }

    fn screen_version(&self) -> u64 {
        self.version
    }

    fn is_stable(&self) -> bool {
        !self.transient
    }

    fn is_focused(&self, element_id: &str) -> bool {
        !self.transient && self.state.focused.as_deref() == Some(element_id)
    }

    fn field_text(&self, element_id: &str) -> Option<String> {
        let items = self.world.layout(&self.state, self.transient);
        let p = items.iter().find(|p| p.spec.id == element_id)?;
        let f = p.spec.field.as_ref()?;
        Some(self.state.field(&self.state.app, f).to_owned())
    }
}
