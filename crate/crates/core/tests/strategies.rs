mod support;

use lowbit::strategies::StrategySet;
use support::strategy_cases::{self as cases, Fixture};

fn fixture() -> Fixture {
    cases::synthetic(96, 3)
}

fn check(r: cases::Outcome) {
    if let Err(e) = r {
        panic!("{e}");
    }
}

#[test]
fn k32_matches_a_quantization_free_model() {
    check(cases::k32_equivalence(&fixture(), 2, 16, 11));
}

#[test]
fn lambda_zero_twin_trains_like_solo_fine_tuning() {
    check(cases::guided_lambda_zero_is_solo(&fixture(), 2, 5));
}

#[test]
fn frozen_teacher_is_untouched() {
    check(cases::frozen_teacher(&fixture(), 5));
}

#[test]
fn two_stage_stage2_starts_from_stage1() {
    let set = StrategySet {
        ts: true,
        ..Default::default()
    };
    check(cases::phases_chain(&fixture(), set, 2, 7));
}

#[test]
fn progressive_rungs_start_from_the_previous_rung() {
    let set = StrategySet {
        pq: true,
        ..Default::default()
    };
    check(cases::phases_chain(&fixture(), set, 2, 7));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    check(cases::divergence_is_reported(&fixture(), 1));
}

#[test]
fn same_seed_same_model() {
    check(cases::runs_are_deterministic(&fixture(), 9));
}
