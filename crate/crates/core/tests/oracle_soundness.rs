mod common;

use common::props::oracle_sweep;
use uinav_core::sim::Suite;

#[test]
fn oracle_solves_every_shipped_task_over_200_seeds() {
    let suite = Suite::builtin();
    assert!(suite.tasks.len() >= 6 && suite.app_names().len() >= 3);
    assert_eq!(oracle_sweep(&suite, 0..200).unwrap(), 200 * suite.tasks.len());
}

#[test]
fn oracle_solves_the_scenario_catalog() {
    let suite = Suite::scenarios();
    assert_eq!(oracle_sweep(&suite, 0..50).unwrap(), 50 * suite.tasks.len());
}
