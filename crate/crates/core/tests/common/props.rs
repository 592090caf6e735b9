//! Whole-system property checks shared by the property tests and the
//! acceptance report. Each returns how many cases it examined.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uinav_core::action::{Direction, MacroAction, MACRO_TIMEOUT_TICKS};
use uinav_core::agent::{AgentNet, ArgumentVocab};
use uinav_core::checkpoint::{load_agent, load_referee, params_hash, save_agent, save_referee};
use uinav_core::demo::{augment_screen, record, replay, trace_files, Demonstration, Oracle, Provenance};
use uinav_core::referee::RefereeNet;
use uinav_core::screen::Screen;
use uinav_core::sim::{EnvVerdict, EpisodeConfig, SimEnv, SlotSplit, Suite};
use uinav_core::text::mask_or_unmasked;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/corpus")
}

/// Runs the oracle on `seeds` randomized starts of every task; feasible
/// tasks must succeed within their step budget, infeasible ones must be
/// flagged at reset.
pub fn oracle_sweep(suite: &Arc<Suite>, seeds: std::ops::Range<u64>) -> Result<usize, String> {
    let mut n = 0;
    for t in &suite.tasks {
        for seed in seeds.clone() {
            let cfg = EpisodeConfig::sample(suite, &t.task_id, seed, SlotSplit::Train).map_err(|e| e.to_string())?;
            let mut env = SimEnv::reset(suite.clone(), cfg.clone()).map_err(|e| e.to_string())?;
            while env.verdict() == EnvVerdict::Pending {
                let a = env
                    .oracle_action()
                    .cloned()
                    .ok_or_else(|| format!("{} seed {seed}: no plan at step {}", t.task_id, env.steps()))?;
                env.step(&a).map_err(|e| format!("{} seed {seed}: {e}", t.task_id))?;
            }
            let want = if env.task().feasible {
                EnvVerdict::Success
            } else {
                EnvVerdict::Infeasible
            };
            if env.verdict() != want {
                return Err(format!("{} seed {seed}: {:?} after {} steps", t.task_id, env.verdict(), env.steps()));
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Every macro action expressible on `screen`.
pub fn all_actions(screen: &Screen, apps: &[String], text: &str) -> Vec<MacroAction> {
    let mut out = vec![MacroAction::wait(), MacroAction::back()];
    out.extend(Direction::ALL.into_iter().map(MacroAction::scroll));
    out.extend(apps.iter().map(|a| MacroAction::open_app(a)));
    for e in &screen.elements {
        out.push(MacroAction::click(&e.id));
        out.push(MacroAction::dismiss(&e.id));
        out.push(MacroAction::focus_and_type(&e.id, text, false));
        out.push(MacroAction::focus_and_type(&e.id, text, true));
    }
    out
}

/// Walks the oracle path of every task from a randomized start and, on
/// each screen along it, executes every possible action on a copy of the
/// episode. Each must return, within the macro tick budget.
pub fn macro_termination(suite: &Arc<Suite>, seed: u64) -> Result<usize, String> {
    let apps = suite.app_names();
    let mut n = 0;
    for t in &suite.tasks {
        let cfg = EpisodeConfig::sample(suite, &t.task_id, seed, SlotSplit::Train).map_err(|e| e.to_string())?;
        let mut env = SimEnv::reset(suite.clone(), cfg).map_err(|e| e.to_string())?;
        loop {
            for a in all_actions(env.observation(), &apps, "probe") {
                let mut probe = env.clone();
                match probe.step(&a) {
                    Ok(r) if r.outcome.elapsed_steps > MACRO_TIMEOUT_TICKS => {
                        return Err(format!("{a} on {} took {} ticks", env.observation().screen_id, r.outcome.elapsed_steps));
                    }
                    Ok(_) | Err(_) => n += 1,
                }
            }
            match env.oracle_action().cloned() {
                Some(a) if !env.verdict().is_terminal() => {
                    env.step(&a).map_err(|e| e.to_string())?;
                }
                _ => break,
            }
        }
    }
    Ok(n)
}

fn recorded_screens(seed: u64) -> Vec<Screen> {
    let s = Suite::builtin();
    let task = &s.tasks[seed as usize % s.tasks.len()];
    let cfg = EpisodeConfig::sample(&s, &task.task_id, seed, SlotSplit::Train).unwrap();
    record(&s, cfg, &Oracle, Provenance::Oracle)
        .unwrap()
        .steps
        .into_iter()
        .map(|st| st.screen)
        .collect()
}

/// Augmentation leaves critical elements bit-identical, keeps every bbox
/// valid and never adds, drops or reorders elements.
pub fn augmentation_preserves(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0;
    for screen in recorded_screens(seed) {
        let out = augment_screen(&screen, &mut rng);
        if out.elements.len() != screen.elements.len() {
            return Err("element count changed".into());
        }
        for (a, b) in screen.elements.iter().zip(&out.elements) {
            if a.id != b.id {
                return Err(format!("order changed at {}", a.id));
            }
            if a.critical && a != b {
                return Err(format!("critical element {} was modified", a.id));
            }
            if !b.bbox.is_valid() {
                return Err(format!("invalid bbox {:?} on {}", b.bbox, b.id));
            }
        }
        n += 1;
    }
    Ok(n)
}

/// Every shipped trace re-executes to identical screens, outcomes and
/// labels.
pub fn corpus_replays() -> Result<usize, String> {
    let suite = Suite::builtin();
    let files = trace_files(&corpus_dir()).map_err(|e| e.to_string())?;
    if files.is_empty() {
        return Err("corpus is empty".into());
    }
    for f in &files {
        let d = Demonstration::load(f).map_err(|e| format!("{}: {e}", f.display()))?;
        replay(&suite, &d).map_err(|e| format!("{}: {e}", f.display()))?;
        let again = Demonstration::from_jsonl(&d.to_jsonl()).map_err(|e| e.to_string())?;
        if again != d {
            return Err(format!("{} does not re-serialize identically", f.display()));
        }
    }
    Ok(files.len())
}

/// Save then load reproduces parameters bit for bit; the loaded agent
/// predicts exactly what the saved one did.
pub fn checkpoint_round_trip(seed: u64) -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = Suite::builtin();
    let vocab = ArgumentVocab::new(&s.app_names());
    let agent = AgentNet::new(vocab.clone(), seed);
    let referee = RefereeNet::new(seed);
    let (ap, rp) = (dir.path().join("a.ckpt"), dir.path().join("r.ckpt"));
    let hash = s.templates.content_hash();
    save_agent(&ap, &agent, &hash).map_err(|e| e.to_string())?;
    save_referee(&rp, &referee, &hash).map_err(|e| e.to_string())?;
    let a2 = load_agent(&ap, Some(&hash), Some(&vocab)).map_err(|e| e.to_string())?;
    let r2 = load_referee(&rp, Some(&hash)).map_err(|e| e.to_string())?;
    let bits = |ts: &[uinav_core::nn::Tensor<f32>]| -> Vec<u32> {
        ts.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
    };
    if bits(a2.params.tensors()) != bits(agent.params.tensors()) || params_hash(&a2.params) != params_hash(&agent.params) {
        return Err("agent parameters changed".into());
    }
    if bits(r2.params.tensors()) != bits(referee.params.tensors()) {
        return Err("referee parameters changed".into());
    }
    let screen = &recorded_screens(seed)[0];
    let u = mask_or_unmasked("search for cats on tube", &s.templates, true);
    if agent.predict(screen, &u).map_err(|e| e.to_string())? != a2.predict(screen, &u).map_err(|e| e.to_string())? {
        return Err("loaded agent predicts differently".into());
    }
    Ok(2)
}

/// Permuting a screen's elements permutes the element weights the same way
/// and leaves the action-kind and argument distributions unchanged.
pub fn permutation_equivariance(seed: u64) -> Result<usize, String> {
    let s = Suite::builtin();
    let net = AgentNet::new(ArgumentVocab::new(&s.app_names()), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = &s.tasks[seed as usize % s.tasks.len()];
    let cfg = EpisodeConfig::sample(&s, &task.task_id, seed, SlotSplit::Train).map_err(|e| e.to_string())?;
    let u = mask_or_unmasked(&cfg.utterance, &s.templates, true);
    let mut n = 0;
    for screen in recorded_screens(seed) {
        let mut order: Vec<usize> = (0..screen.elements.len()).collect();
        order.shuffle(&mut rng);
        let mut permuted = screen.clone();
        permuted.elements = order.iter().map(|&i| screen.elements[i].clone()).collect();
        let p = net.predict(&screen, &u).map_err(|e| e.to_string())?;
        let q = net.predict(&permuted, &u).map_err(|e| e.to_string())?;
        let close = |a: f32, b: f32| (a - b).abs() <= 1e-5 + 1e-4 * a.abs().max(b.abs());
        for (j, &i) in order.iter().enumerate() {
            if !close(q.element_weights[j], p.element_weights[i]) {
                return Err(format!("element weight {i} moved: {} vs {}", p.element_weights[i], q.element_weights[j]));
            }
        }
        let same = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y));
        if !same(&p.action_kind, &q.action_kind) || !same(&p.argument, &q.argument) {
            return Err("head distributions depend on element order".into());
        }
        n += 1;
    }
    Ok(n)
}
