mod common;

use common::{gae_max_error, gradient_checks, zero_entropy_matches_standard};

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20 {
        let [actor, critic, ent] = gradient_checks(seed);
        assert!(actor < 1e-4, "net {seed}: surrogate gradient error {actor:e}");
        assert!(critic < 1e-4, "net {seed}: value gradient error {critic:e}");
        assert!(ent < 1e-4, "net {seed}: entropy gradient error {ent:e}");
    }
}

#[test]
fn gae_matches_double_sum() {
    for seed in 0..200 {
        let err = gae_max_error(seed);
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
    }
}

#[test]
fn zero_entropy_weight_reduces_to_standard() {
    for seed in 0..5 {
        assert!(zero_entropy_matches_standard(seed));
    }
}
