//! Domain rules: action masks applied at the policy output and shaping
//! penalties added to rewards.
//!
//! Mask rules, highest priority first:
//!
//! 1. An agent that reached its goal or collided may only `Wait`.
//! 2. When every other agent is done, the agent heads straight for its goal:
//!    `Replan` if its current guidance predates that moment and either its
//!    whole route is longer than the global guidance or the next step is
//!    blocked; otherwise `Move`, or `Wait` if the next step is blocked.
//! 3. No conflict anywhere in the lookahead window: `Move` along the guidance.
//! 4. Conflict on the very next guidance step: `Move` is forbidden.
//! 5. Previous action was `Back` and the next step is still conflicted:
//!    `Back` is forbidden, so the agent does not oscillate.
//! 6. Every other active agent waited on the previous step: `Back` is
//!    forbidden; the agent should go forward or replan.
//!
//! Rules 1-3 force a single action; 4-6 only remove actions, so `Wait`
//! survives them. Turning the heuristic planner off removes `Replan`.

use serde::{Deserialize, Serialize};

/// The discrete action set, in logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Move = 0,
    Wait = 1,
    Back = 2,
    Replan = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Move, Action::Wait, Action::Back, Action::Replan];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Move => "Move",
            Action::Wait => "Wait",
            Action::Back => "Back",
            Action::Replan => "Replan",
        }
    }
}

impl std::str::FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown action `{s}`"))
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which actions the policy may choose, aligned with [`Action::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub allowed: [bool; 4],
}

impl ActionMask {
    pub const ALL: ActionMask = ActionMask {
        allowed: [true; 4],
    };

    pub fn only(action: Action) -> Self {
        let mut allowed = [false; 4];
        allowed[action.index()] = true;
        Self { allowed }
    }

    pub fn allows(&self, action: Action) -> bool {
        self.allowed[action.index()]
    }

    pub fn forbid(&mut self, action: Action) {
        self.allowed[action.index()] = false;
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        Action::ALL.into_iter().filter(|a| self.allows(*a))
    }

    pub fn as_f64(&self) -> [f64; 4] {
        self.allowed.map(|a| if a { 1.0 } else { 0.0 })
    }
}

/// Rule switches. `mask[k]` enables mask rule `k + 1`; `shaping` enables the
/// all-wait, all-replan and mixed-conflict penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub mask: [bool; 6],
    pub shaping: [bool; 3],
    /// Penalty added per triggering step; not taken from any reference value.
    pub penalty: f64,
}

pub const DEFAULT_RULE_PENALTY: f64 = -5.0;

impl Default for RuleConfig {
    fn default() -> Self {
        Self::on()
    }
}

impl RuleConfig {
    pub fn on() -> Self {
        Self {
            mask: [true; 6],
            shaping: [true; 3],
            penalty: DEFAULT_RULE_PENALTY,
        }
    }

    /// Rules off. Rule 1 stays: a finished agent has nothing left to do.
    pub fn off() -> Self {
        Self {
            mask: [true, false, false, false, false, false],
            shaping: [false; 3],
            penalty: DEFAULT_RULE_PENALTY,
        }
    }

    pub fn enabled(&self) -> bool {
        self.mask[1..].iter().any(|&m| m) || self.shaping.iter().any(|&s| s)
    }
}

/// Everything the mask rules look at for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskContext<'a> {
    pub done: bool,
    pub collided: bool,
    /// At least one other agent exists and all of them are done.
    pub all_others_done: bool,
    /// Current guidance was planned before all others became done.
    pub guidance_stale: bool,
    /// Distance travelled plus remaining guidance exceeds the global guidance.
    pub route_longer_than_global: bool,
    /// Per lookahead step: would that guidance placement collide?
    pub lookahead_conflicts: &'a [bool],
    pub previous_action: Option<Action>,
    /// At least one other active agent and each of them waited last step.
    pub all_others_waited: bool,
    /// Whether the heuristic planner (`Replan`) is available.
    pub heuristics: bool,
}

impl MaskContext<'_> {
    fn next_step_conflicted(&self) -> bool {
        self.lookahead_conflicts.first().copied().unwrap_or(false)
    }
}

pub fn action_mask(ctx: &MaskContext<'_>, rules: &RuleConfig) -> ActionMask {
    let mask = raw_mask(ctx, rules);
    let mut mask = mask;
    if !ctx.heuristics {
        mask.forbid(Action::Replan);
    }
    if mask.count() == 0 {
        ActionMask::only(Action::Wait)
    } else {
        mask
    }
}

fn raw_mask(ctx: &MaskContext<'_>, rules: &RuleConfig) -> ActionMask {
    if rules.mask[0] && (ctx.done || ctx.collided) {
        return ActionMask::only(Action::Wait);
    }
    let blocked = ctx.next_step_conflicted();
    if rules.mask[1] && ctx.all_others_done {
        let replan = ctx.guidance_stale && (ctx.route_longer_than_global || blocked);
        return if replan && ctx.heuristics {
            ActionMask::only(Action::Replan)
        } else if blocked {
            ActionMask::only(Action::Wait)
        } else {
            ActionMask::only(Action::Move)
        };
    }
    if rules.mask[2] && ctx.lookahead_conflicts.iter().all(|&c| !c) {
        return ActionMask::only(Action::Move);
    }
    let mut mask = ActionMask::ALL;
    if rules.mask[3] && blocked {
        mask.forbid(Action::Move);
    }
    if rules.mask[4] && ctx.previous_action == Some(Action::Back) && blocked {
        mask.forbid(Action::Back);
    }
    if rules.mask[5] && ctx.all_others_waited {
        mask.forbid(Action::Back);
    }
    mask
}

/// Which shaping condition fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapingKind {
    AllWait,
    AllReplan,
    MixedConflictReplan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingEvent {
    pub kind: ShapingKind,
    pub penalty: f64,
    pub agents: Vec<usize>,
}

/// Shaping penalties for one resolved joint step.
///
/// `active[i]` is false for agents that were already done; they neither
/// trigger nor receive penalties. `risk_pairs` lists agent pairs with a
/// collision risk before the step.
pub fn shaping_penalty(
    actions: &[Action],
    active: &[bool],
    risk_pairs: &[(usize, usize)],
    rules: &RuleConfig,
) -> (Vec<f64>, Vec<ShapingEvent>) {
    let n = actions.len();
    let mut penalties = vec![0.0; n];
    let mut events = Vec::new();
    let active_ids: Vec<usize> = (0..n).filter(|&i| active[i]).collect();

    let all_do = |a: Action| active_ids.len() >= 2 && active_ids.iter().all(|&i| actions[i] == a);
    for (enabled, action, kind) in [
        (rules.shaping[0], Action::Wait, ShapingKind::AllWait),
        (rules.shaping[1], Action::Replan, ShapingKind::AllReplan),
    ] {
        if enabled && all_do(action) {
            for &i in &active_ids {
                penalties[i] += rules.penalty;
            }
            events.push(ShapingEvent {
                kind,
                penalty: rules.penalty,
                agents: active_ids.clone(),
            });
        }
    }

    if rules.shaping[2] {
        let moving = |a: Action| matches!(a, Action::Move | Action::Back);
        for &(i, j) in risk_pairs {
            if !(active[i] && active[j]) {
                continue;
            }
            let (a, b) = (actions[i], actions[j]);
            if (moving(a) && b == Action::Replan) || (a == Action::Replan && moving(b)) {
                penalties[i] += rules.penalty;
                penalties[j] += rules.penalty;
                events.push(ShapingEvent {
                    kind: ShapingKind::MixedConflictReplan,
                    penalty: rules.penalty,
                    agents: vec![i, j],
                });
            }
        }
    }
    (penalties, events)
}
