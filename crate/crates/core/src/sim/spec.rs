//! Declarative mock-app and task schema (`v1`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::screen::ElemType;

pub const APP_SCHEMA_VERSION: &str = "v1";

fn yes() -> bool {
    true
}

fn one() -> Option<u32> {
    Some(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockAppSpec {
    pub v: String,
    pub app_name: String,
    pub initial_screen: String,
    pub screens: BTreeMap<String, ScreenSpec>,
    #[serde(default)]
    pub popups: Vec<PopupSpec>,
    #[serde(default)]
    pub interstitials: Vec<InterstitialSpec>,
    #[serde(default)]
    pub fields: BTreeMap<String, FieldSpec>,
    /// Initial toggle values by name.
    #[serde(default)]
    pub toggles: BTreeMap<String, bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenSpec {
    pub elements: Vec<ElementSpec>,
    /// Target of `back`; `None` leaves the app for the launcher.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub reject_back: bool,
    #[serde(default)]
    pub scroll: Option<ScrollSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrollSpec {
    pub max_offset: u32,
    /// Vertical shift per scroll step.
    pub step: f32,
    /// Scrolling elements are only rendered when fully inside this band.
    pub view_top: f32,
    pub view_bottom: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementSpec {
    pub id: String,
    #[serde(rename = "type")]
    pub elem_type: ElemType,
    /// May reference `${field:NAME}` or `${submitted:NAME}`.
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub desc: String,
    #[serde(default)]
    pub rid: String,
    pub bbox: [f32; 4],
    #[serde(default = "yes")]
    pub clickable: bool,
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Editable text field bound to this app field.
    #[serde(default)]
    pub field: Option<String>,
    /// Switch or checkbox bound to this toggle.
    #[serde(default)]
    pub toggle: Option<String>,
    #[serde(default)]
    pub visible_if: Option<Condition>,
    #[serde(default)]
    pub scrolls: bool,
    /// Ticks until focus is granted after a tap; `null` never grants it.
    #[serde(default = "one")]
    pub focus_delay: Option<u32>,
    #[serde(default)]
    pub on_click: Vec<Effect>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    FieldNonempty(String),
    FieldEmpty(String),
    Submitted(String),
    ToggleOn(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Goto(String),
    OpenApp { app: String, screen: Option<String> },
    ClearField(String),
    Toggle(String),
    Submit { form: String, fields: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopupSpec {
    pub id: String,
    pub screens: Vec<String>,
    pub probability: f64,
    pub elements: Vec<ElementSpec>,
    /// Id of the popup's panel element used for outside taps.
    pub panel: String,
    #[serde(default)]
    pub dismiss_element: Option<String>,
    #[serde(default)]
    pub back_closes: bool,
    #[serde(default)]
    pub outside_closes: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterstitialSpec {
    pub screen: String,
    pub element: String,
    pub delay: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct FieldSpec {
    #[serde(default)]
    pub prefill: Option<String>,
    #[serde(default)]
    pub prefill_probability: f64,
    #[serde(default)]
    pub on_enter: Vec<Effect>,
}

/// One task of the suite. String values in `setup` and `goal` may reference
/// slots as `{slot}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub app: String,
    pub template_id: String,
    #[serde(default)]
    pub slots: BTreeMap<String, SlotPool>,
    #[serde(default)]
    pub setup: Vec<SetupStep>,
    pub goal: Goal,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
}

fn default_max_steps() -> u32 {
    20
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotPool {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupStep {
    SetToggle { name: String, value: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Submitted {
        app: String,
        form: String,
        fields: BTreeMap<String, String>,
    },
    Toggle {
        app: String,
        name: String,
        value: bool,
    },
    Screen {
        app: String,
        screen: String,
    },
}

impl Goal {
    pub fn app(&self) -> &str {
        match self {
            Goal::Submitted { app, .. } | Goal::Toggle { app, .. } | Goal::Screen { app, .. } => app,
        }
    }

    /// Substitutes `{slot}` references with slot values.
    pub fn instantiate(&self, slots: &BTreeMap<String, String>) -> Goal {
        let sub = |s: &str| substitute(s, slots);
        match self {
            Goal::Submitted { app, form, fields } => Goal::Submitted {
                app: sub(app),
                form: sub(form),
                fields: fields.iter().map(|(k, v)| (k.clone(), sub(v))).collect(),
            },
            Goal::Toggle { app, name, value } => Goal::Toggle {
                app: sub(app),
                name: sub(name),
                value: *value,
            },
            Goal::Screen { app, screen } => Goal::Screen {
                app: sub(app),
                screen: sub(screen),
            },
        }
    }
}

pub fn substitute(s: &str, slots: &BTreeMap<String, String>) -> String {
    let mut out = s.to_owned();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// The discrete randomization knobs used by episode sampling.
pub const FONT_SCALES: [f32; 4] = [0.85, 1.0, 1.15, 1.3];
pub const DENSITY_FACTORS: [f32; 3] = [0.75, 1.0, 1.25];
pub const MAX_RANDOM_CLICKS: u32 = 5;
