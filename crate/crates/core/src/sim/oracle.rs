//! Shortest-path oracle over the device rules.
//!
//! Breadth-first search over [`DeviceState`] with instant effects and no
//! popups. Successors are generated in action-kind order, then element order,
//! then argument order, so the first plan found is the tie-broken optimum.
//! Two domain restrictions keep the frontier small: text is only typed into
//! empty fields, and the search never enters an app other than the task's
//! (or the launcher, or the app it started in).

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::action::{Direction, MacroAction};

use super::device::{DeviceState, Source, World};
use super::spec::Goal;
use super::suite::LAUNCHER;
use super::TaskInstance;

/// Maximum plan length considered.
pub const MAX_PLAN_DEPTH: usize = 16;
/// Node budget; exceeding it means the suite is too large for the oracle.
pub const MAX_NODES: usize = 200_000;

pub fn goal_satisfied(st: &DeviceState, goal: &Goal) -> bool {
    match goal {
        Goal::Submitted { app, form, fields } => st
            .submissions
            .get(&(app.clone(), form.clone()))
            .is_some_and(|got| fields.iter().all(|(k, v)| got.get(k) == Some(v))),
        Goal::Toggle { app, name, value } => st.toggle(app, name) == Some(*value),
        Goal::Screen { app, screen } => &st.app == app && &st.screen == screen && st.popup.is_none(),
    }
}

/// Candidate actions on the current rendering in tie-break order.
pub fn candidate_actions(world: &World, st: &DeviceState, task: &TaskInstance) -> Vec<MacroAction> {
    let items = world.layout(st, false);
    let mut out = Vec::new();
    for p in &items {
        let e = p.spec;
        if e.enabled && (e.clickable || e.field.is_some()) {
            out.push(MacroAction::click(&e.id));
        }
    }
    for p in &items {
        let Some(f) = &p.spec.field else { continue };
        if !st.field(&st.app, f).is_empty() {
            continue;
        }
        let mut seen = Vec::new();
        for v in &task.entities {
            if seen.contains(&v) {
                continue;
            }
            seen.push(v);
            out.push(MacroAction::focus_and_type(&p.spec.id, v, false));
            out.push(MacroAction::focus_and_type(&p.spec.id, v, true));
        }
    }
    if items.iter().any(|p| p.source == Source::Popup) {
        for p in &items {
            out.push(MacroAction::dismiss(&p.spec.id));
        }
    }
    out.push(MacroAction::back());
    for d in Direction::ALL {
        out.push(MacroAction::scroll(d));
    }
    for app in world.suite.app_names() {
        out.push(MacroAction::open_app(&app));
    }
    out
}

/// Shortest action sequence from `start` to the task goal. `Some(vec![])`
/// when the goal already holds; `None` for infeasible tasks or when no plan
/// exists within the depth bound.
pub fn plan(world: &World, start: &DeviceState, task: &TaskInstance) -> Option<Vec<MacroAction>> {
    if !task.feasible {
        return None;
    }
    if goal_satisfied(start, &task.goal) {
        return Some(Vec::new());
    }
    let allowed = |app: &str| app == task.app || app == LAUNCHER || app == start.app;
    struct Node {
        state: DeviceState,
        parent: usize,
        action: Option<MacroAction>,
        depth: usize,
    }
    let mut nodes = vec![Node {
        state: start.clone(),
        parent: usize::MAX,
        action: None,
        depth: 0,
    }];
    let mut visited: HashSet<DeviceState> = HashSet::new();
    visited.insert(start.clone());
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        if nodes[i].depth >= MAX_PLAN_DEPTH {
            continue;
        }
        for a in candidate_actions(world, &nodes[i].state, task) {
            let Some(next) = world.successor(&nodes[i].state, &a) else {
                continue;
            };
            if next == nodes[i].state || !allowed(&next.app) || visited.contains(&next) {
                continue;
            }
            let done = goal_satisfied(&next, &task.goal);
            visited.insert(next.clone());
            nodes.push(Node {
                state: next,
                parent: i,
                action: Some(a),
                depth: nodes[i].depth + 1,
            });
            let j = nodes.len() - 1;
            if done {
                let mut path = Vec::new();
                let mut k = j;
                while let Some(a) = nodes[k].action.take() {
                    path.push(a);
                    k = nodes[k].parent;
                }
                path.reverse();
                return Some(path);
            }
            if nodes.len() >= MAX_NODES {
                log::warn!("oracle node budget exhausted for task {}", task.task_id);
                return None;
            }
            queue.push_back(j);
        }
    }
    None
}

/// Ground-truth policy: the first step of the current shortest plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OraclePolicy {
    pub task_id: String,
}

impl OraclePolicy {
    pub fn new(task_id: &str) -> Self {
        Self {
            task_id: task_id.to_owned(),
        }
    }

    pub fn act(&self, world: &World, st: &DeviceState, task: &TaskInstance) -> Option<MacroAction> {
        plan(world, st, task).and_then(|p| p.into_iter().next())
    }
}
