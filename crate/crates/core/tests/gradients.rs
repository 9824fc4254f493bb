mod common;

use common::*;
use cot_mdp::grpo::kl_and_grad;
use cot_mdp::policy::{self, nll_and_grad};
use cot_mdp::tasks::oracle_trajectory;
use cot_mdp::Seed;

const TOL: f64 = 1e-4;

#[test]
fn action_logprob_gradient() {
    let worst = action_logprob_fd(40, Seed(11));
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn action_gradient_is_sum_of_token_gradients() {
    for (p, s, a) in random_state_actions(20, Seed(12)) {
        let whole = policy::grad_action_logprob(&p, &s, &a);
        let mut summed = vec![0.0; p.len()];
        let mut ctx = s.tokens().to_vec();
        for &t in a.tokens() {
            p.accumulate_token_grad(&ctx, t, 1.0, &mut summed);
            ctx.push(t);
        }
        let diff = whole.iter().zip(&summed).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff:e}");
    }
}

#[test]
fn supervised_nll_gradient() {
    let m = mdp();
    let mut rng = Seed(13).rng();
    for i in 0..20u64 {
        let p = random_policy(6, 8, 0.5, Seed(13).child(i));
        let trajs: Vec<_> = (0..3).map(|k| oracle_trajectory(&instance(2 + k, i * 10 + k as u64), &m)).collect();
        let batch: Vec<_> = trajs.iter().collect();
        let (_, g) = nll_and_grad(&p, &batch, &m);
        let d = random_direction(p.len(), &mut rng);
        let num = directional_fd(|v| nll_and_grad(&with_params(&p, v), &batch, &m).0, p.as_slice(), &d);
        assert!(rel_err(dot(&g, &d), num) < TOL);
    }
}

#[test]
fn bce_gradient() {
    let worst = bce_fd(30, Seed(14));
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn td_gradient() {
    let worst = td_fd(30, Seed(15));
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn kl_gradient() {
    let m = mdp();
    let mut rng = Seed(16).rng();
    for i in 0..20u64 {
        let p = random_policy(6, 8, 0.5, Seed(16).child(i));
        let q = random_policy(6, 8, 0.5, Seed(17).child(i));
        let traj = oracle_trajectory(&instance(3, i), &m);
        let toks = traj.tokens(&m.vocab);
        let contexts: Vec<_> = (traj.question.len() + 1..toks.len()).map(|n| toks[..n].to_vec()).collect();
        let (_, g) = kl_and_grad(&p, &q, &contexts);
        let d = random_direction(p.len(), &mut rng);
        let num = directional_fd(|v| kl_and_grad(&with_params(&p, v), &q, &contexts).0, p.as_slice(), &d);
        assert!(rel_err(dot(&g, &d), num) < TOL);
    }
}

#[test]
fn grpo_step_level_gradient() {
    let worst = grpo_fd(30, Seed(18), false);
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn grpo_token_level_gradient() {
    let worst = grpo_fd(30, Seed(19), true);
    assert!(worst < TOL, "max relative error {worst:e}");
}
