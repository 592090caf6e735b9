//! Loading and validating a suite: app specs, tasks and utterance templates.
//!
//! A suite directory holds `apps/*.json` (one [`MockAppSpec`] each),
//! `tasks.json` and `templates.tsv`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::text::TemplateRegistry;

use super::spec::{Effect, ElementSpec, Goal, MockAppSpec, SetupStep, TaskSpec, APP_SCHEMA_VERSION};
use super::SimError;

/// The home-screen app every suite must provide.
pub const LAUNCHER: &str = "Launcher";

#[derive(Debug, Serialize, Deserialize)]
struct TasksDoc {
    v: String,
    tasks: Vec<TaskSpec>,
}

#[derive(Clone, Debug)]
pub struct Suite {
    pub apps: BTreeMap<String, MockAppSpec>,
    pub tasks: Vec<TaskSpec>,
    pub templates: TemplateRegistry,
}

const BUILTIN_APPS: [&str; 5] = [
    include_str!("../../data/suite/apps/launcher.json"),
    include_str!("../../data/suite/apps/tube.json"),
    include_str!("../../data/suite/apps/shop.json"),
    include_str!("../../data/suite/apps/mail.json"),
    include_str!("../../data/suite/apps/settings.json"),
];
const BUILTIN_TASKS: &str = include_str!("../../data/suite/tasks.json");
const BUILTIN_TEMPLATES: &str = include_str!("../../data/suite/templates.tsv");

const SCENARIO_APPS: [&str; 2] = [
    include_str!("../../data/scenarios/apps/launcher.json"),
    include_str!("../../data/scenarios/apps/lab.json"),
];
const SCENARIO_TASKS: &str = include_str!("../../data/scenarios/tasks.json");
const SCENARIO_TEMPLATES: &str = include_str!("../../data/scenarios/templates.tsv");

fn spec_err(origin: &str, reason: impl Into<String>) -> SimError {
    SimError::Spec {
        origin: origin.to_owned(),
        reason: reason.into(),
    }
}

impl Suite {
    /// The synthetic suite shipped with the crate.
    pub fn builtin() -> Arc<Suite> {
        static CELL: std::sync::OnceLock<Arc<Suite>> = std::sync::OnceLock::new();
        CELL.get_or_init(|| {
            Arc::new(
                Suite::from_sources(&BUILTIN_APPS, BUILTIN_TASKS, BUILTIN_TEMPLATES, "builtin")
                    .expect("shipped suite is valid"),
            )
        })
        .clone()
    }

    /// An app exercising device edge cases: back-rejecting roots,
    /// interstitials, slow loads, fields that never focus, non-editable
    /// targets, scrolling and outside-dismissed popups.
    pub fn scenarios() -> Arc<Suite> {
        static CELL: std::sync::OnceLock<Arc<Suite>> = std::sync::OnceLock::new();
        CELL.get_or_init(|| {
            Arc::new(
                Suite::from_sources(&SCENARIO_APPS, SCENARIO_TASKS, SCENARIO_TEMPLATES, "scenarios")
                    .expect("scenario suite is valid"),
            )
        })
        .clone()
    }

    pub fn from_sources(apps: &[&str], tasks: &str, templates: &str, origin: &str) -> Result<Suite, SimError> {
        let mut map = BTreeMap::new();
        for (i, src) in apps.iter().enumerate() {
            let app: MockAppSpec =
                serde_json::from_str(src).map_err(|e| spec_err(&format!("{origin} app #{i}"), e.to_string()))?;
            if map.insert(app.app_name.clone(), app).is_some() {
                return Err(spec_err(origin, "duplicate app name"));
            }
        }
        let doc: TasksDoc =
            serde_json::from_str(tasks).map_err(|e| spec_err(&format!("{origin} tasks"), e.to_string()))?;
        if doc.v != APP_SCHEMA_VERSION {
            return Err(spec_err(origin, format!("tasks schema {} is not {APP_SCHEMA_VERSION}", doc.v)));
        }
        let templates = TemplateRegistry::parse(templates)?;
        let suite = Suite {
            apps: map,
            tasks: doc.tasks,
            templates,
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn load_dir(dir: &Path) -> Result<Suite, SimError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.join("apps"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let apps = paths
            .iter()
            .map(std::fs::read_to_string)
            .collect::<Result<Vec<_>, _>>()?;
        let tasks = std::fs::read_to_string(dir.join("tasks.json"))?;
        let templates = std::fs::read_to_string(dir.join("templates.tsv"))?;
        let refs: Vec<&str> = apps.iter().map(String::as_str).collect();
        Suite::from_sources(&refs, &tasks, &templates, &dir.display().to_string())
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec, SimError> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| SimError::UnknownTask(task_id.to_owned()))
    }

    /// Launchable apps in name order, excluding the launcher.
    pub fn app_names(&self) -> Vec<String> {
        self.apps.keys().filter(|a| *a != LAUNCHER).cloned().collect()
    }

    /// Whether the goal can be satisfied in principle by the app's rules.
    pub fn goal_feasible(&self, goal: &Goal) -> bool {
        let Some(app) = self.apps.get(goal.app()) else {
            return false;
        };
        match goal {
            Goal::Toggle { name, .. } => app.toggles.contains_key(name),
            Goal::Screen { screen, .. } => app.screens.contains_key(screen),
            Goal::Submitted { form, fields, .. } => {
                let submits = |effects: &[Effect]| {
                    effects.iter().any(|e| match e {
                        Effect::Submit { form: f, fields: fs } => {
                            f == form && fields.keys().all(|k| fs.contains(k))
                        }
                        _ => false,
                    })
                };
                app.fields.values().any(|f| submits(&f.on_enter))
                    || app
                        .screens
                        .values()
                        .flat_map(|s| s.elements.iter())
                        .chain(app.popups.iter().flat_map(|p| p.elements.iter()))
                        .any(|e| submits(&e.on_click))
            }
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !self.apps.contains_key(LAUNCHER) {
            return Err(spec_err("suite", format!("missing the {LAUNCHER} app")));
        }
        for app in self.apps.values() {
            self.validate_app(app)?;
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            let origin = format!("task {}", t.task_id);
            if !seen.insert(&t.task_id) {
                return Err(spec_err(&origin, "duplicate task id"));
            }
            if !self.apps.contains_key(&t.app) || t.app == LAUNCHER {
                return Err(SimError::UnknownApp(t.app.clone()));
            }
            let tpl = self
                .templates
                .get(&t.template_id)
                .ok_or_else(|| spec_err(&origin, format!("unknown template {}", t.template_id)))?;
            let declared: BTreeSet<&String> = t.slots.keys().collect();
            let used: BTreeSet<&String> = tpl.slot_names.iter().collect();
            if declared != used {
                return Err(spec_err(&origin, "slot pools do not match the template's slots"));
            }
            for (name, pool) in &t.slots {
                if pool.train.is_empty() || pool.heldout.is_empty() {
                    return Err(spec_err(&origin, format!("slot {name} has an empty pool")));
                }
            }
            for s in &t.setup {
                let SetupStep::SetToggle { name, .. } = s;
                if !name.contains('{') && !self.apps[&t.app].toggles.contains_key(name) {
                    return Err(spec_err(&origin, format!("setup names unknown toggle {name}")));
                }
            }
            if t.max_steps == 0 {
                return Err(spec_err(&origin, "max_steps must be positive"));
            }
        }
        Ok(())
    }

    fn validate_app(&self, app: &MockAppSpec) -> Result<(), SimError> {
        let origin = format!("app {}", app.app_name);
        let err = |r: String| spec_err(&origin, r);
        if app.v != APP_SCHEMA_VERSION {
            return Err(err(format!("schema {} is not {APP_SCHEMA_VERSION}", app.v)));
        }
        if !app.screens.contains_key(&app.initial_screen) {
            return Err(err(format!("initial screen {} does not exist", app.initial_screen)));
        }
        let check_elements = |where_: &str, elems: &[ElementSpec]| -> Result<(), SimError> {
            let mut ids = BTreeSet::new();
            for e in elems {
                if !ids.insert(&e.id) {
                    return Err(err(format!("{where_}: duplicate element id {}", e.id)));
                }
                let [l, t, r, b] = e.bbox;
                if !(l < r && t < b) {
                    return Err(err(format!("{where_}: degenerate bbox on {}", e.id)));
                }
                if let Some(f) = &e.field {
                    if !app.fields.contains_key(f) {
                        return Err(err(format!("{where_}: unknown field {f}")));
                    }
                }
                if let Some(tg) = &e.toggle {
                    if !app.toggles.contains_key(tg) {
                        return Err(err(format!("{where_}: unknown toggle {tg}")));
                    }
                }
                self.check_effects(app, &e.on_click).map_err(|r| err(format!("{where_}/{}: {r}", e.id)))?;
            }
            Ok(())
        };
        for (sid, s) in &app.screens {
            check_elements(sid, &s.elements)?;
            if let Some(p) = &s.parent {
                if !app.screens.contains_key(p) {
                    return Err(err(format!("{sid}: parent {p} does not exist")));
                }
            }
            if let Some(sc) = &s.scroll {
                if !(sc.step > 0.0 && sc.view_top < sc.view_bottom) {
                    return Err(err(format!("{sid}: bad scroll spec")));
                }
            }
        }
        for p in &app.popups {
            check_elements(&format!("popup {}", p.id), &p.elements)?;
            if !p.elements.iter().any(|e| e.id == p.panel) {
                return Err(err(format!("popup {}: panel {} missing", p.id, p.panel)));
            }
            if let Some(d) = &p.dismiss_element {
                if !p.elements.iter().any(|e| &e.id == d) {
                    return Err(err(format!("popup {}: dismiss element {d} missing", p.id)));
                }
            }
            if let Some(s) = p.screens.iter().find(|s| !app.screens.contains_key(*s)) {
                return Err(err(format!("popup {}: screen {s} does not exist", p.id)));
            }
            if !(0.0..=1.0).contains(&p.probability) {
                return Err(err(format!("popup {}: probability out of range", p.id)));
            }
        }
        for i in &app.interstitials {
            let ok = app
                .screens
                .get(&i.screen)
                .is_some_and(|s| s.elements.iter().any(|e| e.id == i.element));
            if !ok {
                return Err(err(format!("interstitial on {}/{} has no such element", i.screen, i.element)));
            }
        }
        for (name, f) in &app.fields {
            self.check_effects(app, &f.on_enter).map_err(|r| err(format!("field {name}: {r}")))?;
        }
        Ok(())
    }

    fn check_effects(&self, app: &MockAppSpec, effects: &[Effect]) -> Result<(), String> {
        for e in effects {
            match e {
                Effect::Goto(s) if !app.screens.contains_key(s) => {
                    return Err(format!("goto target {s} does not exist"))
                }
                Effect::OpenApp { app: a, screen } => {
                    let target = self.apps.get(a).ok_or_else(|| format!("unknown app {a}"))?;
                    if let Some(s) = screen {
                        if !target.screens.contains_key(s) {
                            return Err(format!("screen {a}/{s} does not exist"));
                        }
                    }
                }
                Effect::ClearField(f) if !app.fields.contains_key(f) => return Err(format!("unknown field {f}")),
                Effect::Toggle(t) if !app.toggles.contains_key(t) => return Err(format!("unknown toggle {t}")),
                Effect::Submit { fields, .. } => {
                    if let Some(f) = fields.iter().find(|f| !app.fields.contains_key(*f)) {
                        return Err(format!("submit names unknown field {f}"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}
