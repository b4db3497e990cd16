mod common;

use common::checks;
use mappohr::rules::{action_mask, Action, MaskContext, RuleConfig};
use proptest::prelude::*;

#[test]
fn each_rule_flips_its_fixture() {
    checks::rule_fixtures().unwrap();
}

fn previous() -> impl Strategy<Value = Option<Action>> {
    prop::option::of(prop::sample::select(Action::ALL.to_vec()))
}

proptest! {
    #[test]
    fn masks_are_never_empty(
        flags in prop::array::uniform7(any::<bool>()),
        conflicts in prop::collection::vec(any::<bool>(), 0..24),
        previous_action in previous(),
        mask_rules in prop::array::uniform6(any::<bool>()),
        shaping in prop::array::uniform3(any::<bool>()),
    ) {
        let ctx = MaskContext {
            done: flags[0],
            collided: flags[1],
            all_others_done: flags[2],
            guidance_stale: flags[3],
            route_longer_than_global: flags[4],
            lookahead_conflicts: &conflicts,
            previous_action,
            all_others_waited: flags[5],
            heuristics: flags[6],
        };
        let rules = RuleConfig { mask: mask_rules, shaping, penalty: -5.0 };
        let mask = action_mask(&ctx, &rules);
        prop_assert!(mask.count() > 0);
        if !ctx.heuristics {
            prop_assert!(!mask.allows(Action::Replan));
        }
        if mask_rules[0] && (ctx.done || ctx.collided) {
            prop_assert_eq!(mask.actions().collect::<Vec<_>>(), vec![Action::Wait]);
        }
    }
}
