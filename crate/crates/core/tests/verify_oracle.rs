mod common;

use common::{chain_tv_worst, enumerate_branches, rng};
use rand::Rng;
use spectune::action::{enumerate_actions, Action};
use spectune::cost::CostModel;
use spectune::engine::{Decision, Turn};
use spectune::lm::{ModelConfig, TargetModel};
use spectune::tree::{build_tree, rerank};
use spectune::verify::{verify_greedy_tree, verify_stochastic_chain};

#[test]
fn stochastic_chain_matches_target_distribution() {
    let worst = chain_tv_worst(31, 24);
    assert!(worst <= 1e-9, "total variation {worst:e}");
}

#[test]
fn identical_draft_always_accepts() {
    let target = TargetModel::new(ModelConfig::default()).unwrap();
    let pair = target.pair(0.0).unwrap();
    for branch in enumerate_branches(|ch| verify_stochastic_chain(&pair, &[2, 5], &[1, 4], ch).unwrap()) {
        assert_eq!(branch.0.accept_len, 2);
    }
}

fn seed7() -> TargetModel {
    TargetModel::new(ModelConfig {
        seed: 7,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn random_actions_are_lossless() {
    let target = seed7();
    let cost = CostModel::default();
    let actions = enumerate_actions();
    let mut r = rng(7);
    for q in 0..200u64 {
        let ctx = common::random_context(&mut r, target.vocab_size());
        let noise = r.random_range(0.0..1.0);
        let pair = target.pair(noise).unwrap();
        let max_new = 48;
        let mut turn = Turn::new(pair, &cost, ctx.clone(), 1, max_new, q, 0).unwrap();
        while !turn.is_done() {
            let a = actions[r.random_range(0..actions.len())];
            turn.step(|_| {
                Ok(Decision {
                    action: a,
                    index: None,
                    state: None,
                    log_prob: 0.0,
                    value: 0.0,
                })
            })
            .unwrap();
        }
        assert_eq!(
            turn.output(),
            target.greedy_decode(&ctx, max_new).unwrap(),
            "prompt {q}"
        );
    }
}

#[test]
fn greedy_walk_is_prefix_of_greedy_decoding() {
    let target = seed7();
    let mut r = rng(8);
    for _ in 0..300 {
        let pair = target.pair(r.random_range(0.0..1.0)).unwrap();
        let ctx = common::random_context(&mut r, 16);
        let a = loop {
            let a = common::random_limits(&mut r, 32, 5, 8);
            if a.is_feasible() {
                break a;
            }
        };
        let tree = build_tree(&pair, &ctx, &a).unwrap();
        let cands = rerank(&tree, a.total_tokens as usize);
        let v = verify_greedy_tree(&target, &ctx, &tree, &cands).unwrap();
        let emitted = v.emitted();
        assert_eq!(emitted, target.greedy_decode(&ctx, emitted.len()).unwrap());
        assert_eq!(v.accept_len, v.accepted.len());
    }
}

#[test]
fn exact_draft_accepts_the_argmax_path() {
    let target = seed7();
    let pair = target.pair(0.0).unwrap();
    let a = Action::new(32, 4, 8);
    let tree = build_tree(&pair, &[0], &a).unwrap();
    let cands = rerank(&tree, 32);
    let v = verify_greedy_tree(&target, &[0], &tree, &cands).unwrap();
    // the draft is the target, so the greedy path is the top-ranked path
    assert_eq!(v.accept_len, 4);
}
