//! Episodes: configuration sampling, reset with randomized starts, stepping
//! and ground-truth verdicts.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{self, validate, ActionOutcome, MacroAction, Validity};
use crate::screen::Screen;

use super::device::{Device, Geometry, Orientation, World};
use super::oracle::{self, goal_satisfied};
use super::spec::{substitute, Goal, SetupStep, DENSITY_FACTORS, FONT_SCALES, MAX_RANDOM_CLICKS};
use super::suite::Suite;
use super::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub seed: u64,
    pub task_id: String,
    pub utterance: String,
    pub font_scale: f32,
    pub orientation: Orientation,
    pub density_factor: f32,
    pub n_random_clicks: u32,
    pub max_steps: u32,
}

/// Which slot-value pool an episode draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSplit {
    Train,
    Heldout,
}

fn config_rng(seed: u64) -> ChaCha8Rng {
    // Distinct stream from the episode's runtime generator.
    ChaCha8Rng::seed_from_u64(seed ^ 0xC0F1_6A5E_ED00_0001)
}

impl EpisodeConfig {
    /// Slot values drawn from `split`; default geometry and no random clicks.
    pub fn clean(suite: &Suite, task_id: &str, seed: u64, split: SlotSplit) -> Result<Self, SimError> {
        let task = suite.task(task_id)?;
        let tpl = suite
            .templates
            .get(&task.template_id)
            .ok_or_else(|| SimError::UnknownTask(task_id.to_owned()))?;
        let mut rng = config_rng(seed);
        let values: Vec<String> = tpl
            .slot_names
            .iter()
            .map(|s| {
                let pool = &task.slots[s];
                let pool = match split {
                    SlotSplit::Train => &pool.train,
                    SlotSplit::Heldout => &pool.heldout,
                };
                pool.choose(&mut rng).expect("non-empty pool").clone()
            })
            .collect();
        let refs: Vec<&str> = values.iter().map(String::as_str).collect();
        Ok(Self {
            seed,
            task_id: task_id.to_owned(),
            utterance: tpl.render(&refs),
            font_scale: 1.0,
            orientation: Orientation::Portrait,
            density_factor: 1.0,
            n_random_clicks: 0,
            max_steps: task.max_steps,
        })
    }

    /// Fully randomized start: slot values, geometry knobs and random clicks.
    pub fn sample(suite: &Suite, task_id: &str, seed: u64, split: SlotSplit) -> Result<Self, SimError> {
        let mut cfg = Self::clean(suite, task_id, seed, split)?;
        let mut rng = config_rng(seed.rotate_left(17));
        cfg.font_scale = *FONT_SCALES.choose(&mut rng).unwrap();
        cfg.density_factor = *DENSITY_FACTORS.choose(&mut rng).unwrap();
        cfg.orientation = if rng.gen_bool(0.5) {
            Orientation::Portrait
        } else {
            Orientation::Landscape
        };
        cfg.n_random_clicks = rng.gen_range(0..=MAX_RANDOM_CLICKS);
        Ok(cfg)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            font_scale: self.font_scale,
            density_factor: self.density_factor,
            orientation: self.orientation,
        }
    }
}

/// A task bound to one utterance's slot values.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub task_id: String,
    pub app: String,
    pub goal: Goal,
    /// Slot values in template order.
    pub entities: Vec<String>,
    pub slots: BTreeMap<String, String>,
    pub feasible: bool,
}

impl TaskInstance {
    pub fn new(suite: &Suite, task_id: &str, utterance: &str) -> Result<Self, SimError> {
        let task = suite.task(task_id)?;
        let tpl = suite
            .templates
            .get(&task.template_id)
            .ok_or_else(|| SimError::UnknownTask(task_id.to_owned()))?;
        let entities = tpl.extract(utterance).ok_or_else(|| SimError::BadUtterance {
            task: task_id.to_owned(),
            utterance: utterance.to_owned(),
        })?;
        let slots: BTreeMap<String, String> = tpl.slot_names.iter().cloned().zip(entities.iter().cloned()).collect();
        let goal = task.goal.instantiate(&slots);
        Ok(Self {
            task_id: task_id.to_owned(),
            app: task.app.clone(),
            feasible: suite.goal_feasible(&goal),
            goal,
            entities,
            slots,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvVerdict {
    Success,
    Failure,
    Pending,
    Infeasible,
}

impl EnvVerdict {
    pub fn is_terminal(self) -> bool {
        self != EnvVerdict::Pending
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub screen: Screen,
    pub verdict: EnvVerdict,
    pub outcome: ActionOutcome,
}

/// One episode against the simulated device. Single owner, no shared state.
#[derive(Clone, Debug)]
pub struct SimEnv {
    cfg: EpisodeConfig,
    task: TaskInstance,
    device: Device,
    steps: u32,
    verdict: EnvVerdict,
    observation: Screen,
    plan: Option<Vec<MacroAction>>,
}

impl SimEnv {
    pub fn reset(suite: Arc<Suite>, cfg: EpisodeConfig) -> Result<Self, SimError> {
        let spec = suite.task(&cfg.task_id)?;
        if !suite.apps.contains_key(&spec.app) {
            return Err(SimError::UnknownApp(spec.app.clone()));
        }
        let task = TaskInstance::new(&suite, &cfg.task_id, &cfg.utterance)?;
        let setup = spec.setup.clone();
        let world = World::new(suite.clone(), cfg.geometry());
        let mut state = world.initial_state(&task.app);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (name, app) in &suite.apps {
            for (field, f) in &app.fields {
                if let Some(value) = &f.prefill {
                    if rng.gen::<f64>() < f.prefill_probability {
                        state.fields.insert((name.clone(), field.clone()), value.clone());
                    }
                }
            }
        }
        for step in &setup {
            let SetupStep::SetToggle { name, value } = step;
            state
                .toggles
                .insert((task.app.clone(), substitute(name, &task.slots)), *value);
        }
        world.roll_popups(&mut state, &mut rng);
        let device = Device::new(world, state, rng);
        let observation = device.world().render(device.state(), false);
        let mut env = Self {
            cfg,
            task,
            device,
            steps: 0,
            verdict: EnvVerdict::Pending,
            observation,
            plan: None,
        };
        env.random_clicks();
        env.verdict = if !env.task.feasible {
            EnvVerdict::Infeasible
        } else if goal_satisfied(env.device.state(), &env.task.goal) {
            EnvVerdict::Success
        } else {
            EnvVerdict::Pending
        };
        env.observe();
        Ok(env)
    }

    /// Clicks elements chosen by the episode generator, skipping any click
    /// that would complete the task.
    fn random_clicks(&mut self) {
        for _ in 0..self.cfg.n_random_clicks {
            let screen = action::SimHandle::current_screen(&self.device);
            let candidates: Vec<String> = screen
                .elements
                .iter()
                .filter(|e| e.state_flags.clickable && e.state_flags.enabled)
                .map(|e| MacroAction::click(&e.id))
                .filter(|a| {
                    self.device
                        .world()
                        .successor(self.device.state(), a)
                        .is_some_and(|s| !goal_satisfied(&s, &self.task.goal))
                })
                .map(|a| a.element_id.unwrap())
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let pick = self.device.rng_mut().gen_range(0..candidates.len());
            let a = MacroAction::click(&candidates[pick]);
            // Rejections are part of the dirty start; ignore them.
            let _ = action::execute(&a, &mut self.device);
            self.device.settle();
        }
    }

    /// Renders the current screen, tagging elements the oracle still needs.
    fn observe(&mut self) {
        let mut screen = action::SimHandle::current_screen(&self.device);
        self.plan = if self.verdict == EnvVerdict::Pending {
            oracle::plan(self.device.world(), self.device.state(), &self.task)
        } else {
            None
        };
        if let Some(plan) = &self.plan {
            for e in &mut screen.elements {
                e.critical = plan.iter().any(|a| a.element_id.as_deref() == Some(e.id.as_str()));
            }
        }
        self.observation = screen;
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn task(&self) -> &TaskInstance {
        &self.task
    }

    pub fn observation(&self) -> &Screen {
        &self.observation
    }

    pub fn verdict(&self) -> EnvVerdict {
        self.verdict
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Remaining oracle plan from the current state.
    pub fn oracle_plan(&self) -> Option<&[MacroAction]> {
        self.plan.as_deref()
    }

    pub fn oracle_action(&self) -> Option<&MacroAction> {
        self.plan.as_ref().and_then(|p| p.first())
    }

    /// Executes `a` after checking it against the screen it was predicted on.
    pub fn step_checked(&mut self, a: &MacroAction, predicted_on: &Screen) -> Result<StepResult, SimError> {
        if self.verdict.is_terminal() {
            return Err(SimError::EpisodeOver);
        }
        if validate(a, predicted_on, &self.observation) == Validity::Stale {
            return Err(SimError::StaleAction(format!(
                "{a} was predicted on {} but the device shows {}",
                predicted_on.screen_id, self.observation.screen_id
            )));
        }
        self.step(a)
    }

    pub fn step(&mut self, a: &MacroAction) -> Result<StepResult, SimError> {
        if self.verdict.is_terminal() {
            return Err(SimError::EpisodeOver);
        }
        let outcome = action::execute(a, &mut self.device)?;
        self.device.settle();
        self.steps += 1;
        self.verdict = if goal_satisfied(self.device.state(), &self.task.goal) {
            EnvVerdict::Success
        } else if self.steps >= self.cfg.max_steps {
            EnvVerdict::Failure
        } else {
            EnvVerdict::Pending
        };
        self.observe();
        Ok(StepResult {
            screen: self.observation.clone(),
            verdict: self.verdict,
            outcome,
        })
    }
}

/// One row of [`catalog`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub task_id: String,
    pub app_name: String,
    pub feasible: bool,
    pub min_path: usize,
    pub max_path: usize,
}

/// Seeds probed per task when estimating oracle path-length bounds.
pub const CATALOG_SEEDS: u64 = 24;

/// Tasks of `suite` with oracle path lengths observed over randomized starts.
pub fn catalog(suite: &Arc<Suite>) -> Vec<CatalogEntry> {
    suite
        .tasks
        .iter()
        .map(|t| {
            let mut lens = Vec::new();
            let mut feasible = true;
            for seed in 0..CATALOG_SEEDS {
                let Ok(cfg) = EpisodeConfig::sample(suite, &t.task_id, seed, SlotSplit::Train) else {
                    continue;
                };
                let Ok(env) = SimEnv::reset(suite.clone(), cfg) else { continue };
                feasible = env.task().feasible;
                if let Some(p) = env.oracle_plan() {
                    lens.push(p.len());
                }
            }
            CatalogEntry {
                task_id: t.task_id.clone(),
                app_name: t.app.clone(),
                feasible,
                min_path: lens.iter().copied().min().unwrap_or(0),
                max_path: lens.iter().copied().max().unwrap_or(0),
            }
        })
        .collect()
}
