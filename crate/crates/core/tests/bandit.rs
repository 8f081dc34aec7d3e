mod common;

use common::bandit_accuracy;
use spectune::ppo::PpoConfig;

#[test]
fn standard_ppo_learns_state_conditional_argmax() {
    let acc = bandit_accuracy(&PpoConfig::standard(), 3);
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn max_entropy_ppo_learns_state_conditional_argmax() {
    let acc = bandit_accuracy(&PpoConfig::max_entropy(), 4);
    assert!(acc >= 0.95, "accuracy {acc}");
}
