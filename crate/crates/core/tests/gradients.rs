//! Finite-difference checks for every differentiable op, layer and both
//! full networks.

mod common;

use common::grad_cases as cases;

macro_rules! check {
    ($($name:ident),* $(,)?) => {$(
        #[test]
        fn $name() {
            let n = cases::$name().unwrap();
            assert!(n > 0);
        }
    )*};
}

check!(
    linear_into_softmax_cross_entropy,
    layernorm_with_learned_gain,
    elementwise_nonlinearities,
    segmented_self_attention_over_ragged_batch,
    pointer_cross_attention_and_its_losses,
    column_and_row_plumbing,
    gru_through_three_chained_steps,
    repeated_param_use_accumulates,
    agent_network,
    referee_network,
);
