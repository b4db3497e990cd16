//! Randomised comparisons between the library and the reference oracles.
//! Each returns a short summary on success and a counterexample on failure.

use std::collections::BTreeSet;
use std::sync::Arc;

use mappohr::collision::{polygons_collide, DetectionModel, FootprintLibrary, FootprintStamp};
use mappohr::dstar::{self, DStarLite, ObstacleSnapshot, Timing};
use mappohr::env::{EnvConfig, Environment, Observation};
use mappohr::geometry::{ConvexPolygon, Point};
use mappohr::grid::{Cell, Connectivity, GridMap, Metric, Roadmap};
use mappohr::mappo::{actor_loss, critic_dim, critic_input, critic_loss, ActorBatch, CriticBatch};
use mappohr::nn::{masked_softmax, CellKind, NetConfig, Network};
use mappohr::rules::{action_mask, shaping_penalty, Action, ActionMask, MaskContext, RuleConfig};
use mappohr::Scenario;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn to_convex(p: &Poly) -> ConvexPolygon {
    ConvexPolygon::from_ccw(p.iter().map(|&(x, y)| Point::new(x, y)).collect())
}

fn valid_cells(oracle: &DijkstraOracle<'_>, map: &GridMap) -> Vec<Cell> {
    map.free_cells().filter(|&c| oracle.placement_ok(c)).collect()
}

/// Planned lengths versus Dijkstra on random maps and footprints.
pub fn planner_optimality(
    maps: usize,
    seed: u64,
    connectivity: Connectivity,
    tolerance: f64,
) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roadmap = Roadmap {
        connectivity,
        metric: Metric::Euclidean,
    };
    let mut reachable = 0;
    let mut compared = 0;
    while compared < maps {
        let map = random_map(&mut rng, 20, 20, 0.2);
        let footprint = random_convex(&mut rng, 1.5);
        let d = [0.0, 0.5, 1.0][compared % 3];
        let oracle = DijkstraOracle {
            map: &map,
            footprint: footprint.clone(),
            d,
            steps: connectivity.steps().to_vec(),
            euclidean: true,
        };
        let valid = valid_cells(&oracle, &map);
        if valid.len() < 2 {
            continue;
        }
        // Prefer a reachable pair; fall back to whatever the last draw was.
        let mut pick = None;
        for _ in 0..6 {
            let s = valid[rng.random_range(0..valid.len())];
            let g = valid[rng.random_range(0..valid.len())];
            let expected = oracle.shortest(s, g);
            let found = expected.is_some();
            pick = Some((s, g, expected));
            if found {
                break;
            }
        }
        let (start, goal, expected) = pick.unwrap();
        let stamp = Arc::new(FootprintStamp::new(to_model(&footprint), d, connectivity));
        let map = Arc::new(map.clone());
        let got = dstar::plan(
            ObstacleSnapshot::static_only(map.clone()),
            stamp,
            roadmap,
            start,
            goal,
        );
        match (got, expected) {
            (Ok(path), Some(len)) => {
                if (path.total_length - len).abs() > tolerance {
                    return Err(format!(
                        "map {compared}: planner {} vs oracle {len} from {start} to {goal} (d={d})",
                        path.total_length
                    ));
                }
                let sum = dstar::path_length(&path.waypoints, Metric::Euclidean);
                if sum != path.total_length || path.start() != start || path.goal() != goal {
                    return Err(format!("map {compared}: malformed path {path}"));
                }
                reachable += 1;
            }
            (Err(dstar::PlanError::Unreachable { .. }), None) => {}
            (got, expected) => {
                return Err(format!(
                    "map {compared}: planner {got:?} vs oracle {expected:?} from {start} to {goal} (d={d})"
                ))
            }
        }
        compared += 1;
    }
    Ok(format!("{compared} maps, {reachable} reachable"))
}

/// Incremental replans after obstacle toggles versus planning from scratch.
pub fn incremental_consistency(
    sequences: usize,
    toggles: usize,
    seed: u64,
) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roadmap = Roadmap::default();
    let mut replans = 0;
    let mut done = 0;
    while done < sequences {
        let map = Arc::new(random_map(&mut rng, 20, 20, 0.15));
        let footprint = random_convex(&mut rng, 1.2);
        let d = [0.0, 0.5][done % 2];
        let model = to_model(&footprint);
        let stamp = Arc::new(FootprintStamp::new(model, d, roadmap.connectivity));
        let free: Vec<Cell> = map
            .free_cells()
            .filter(|&c| !stamp.static_collision(c, &map))
            .collect();
        if free.len() < 20 {
            continue;
        }
        let mut start = free[rng.random_range(0..free.len())];
        let goal = free[rng.random_range(0..free.len())];
        let mut planner = DStarLite::new(
            ObstacleSnapshot::static_only(map.clone()),
            stamp.clone(),
            roadmap,
            Timing::Wall,
            start,
            goal,
        );
        let mut path = planner.plan(f64::INFINITY, 0).ok().map(|o| o.path);
        let mut dynamic: BTreeSet<Cell> = BTreeSet::new();
        for k in 0..toggles {
            // Sometimes advance along the current path first.
            if let Some(p) = &path {
                if p.waypoints.len() > 1 && rng.random_bool(0.4) {
                    start = p.waypoints[1];
                }
            }
            let cell = loop {
                let c = Cell::new(rng.random_range(0..20), rng.random_range(0..20));
                if !map.is_blocked(c) && c != goal && c != start {
                    break c;
                }
            };
            if !dynamic.remove(&cell) {
                dynamic.insert(cell);
            }
            let incremental = planner.replan(&[cell], start, f64::INFINITY, k + 1);
            let scratch = DStarLite::new(
                ObstacleSnapshot::new(map.clone(), dynamic.iter().copied(), []),
                stamp.clone(),
                roadmap,
                Timing::Wall,
                start,
                goal,
            )
            .plan(f64::INFINITY, k + 1);
            match (&incremental, &scratch) {
                (Ok(a), Ok(b)) if a.path.total_length == b.path.total_length => {}
                (Err(a), Err(b)) if a == b => {}
                _ => {
                    return Err(format!(
                        "sequence {done} toggle {k}: incremental {:?} vs scratch {:?}",
                        incremental.as_ref().map(|o| o.path.total_length),
                        scratch.as_ref().map(|o| o.path.total_length)
                    ))
                }
            }
            if !planner.queue_matches_inconsistency() {
                return Err(format!("sequence {done} toggle {k}: queue out of sync"));
            }
            path = incremental.ok().map(|o| o.path);
            replans += 1;
        }
        done += 1;
    }
    Ok(format!("{sequences} sequences, {replans} replans"))
}

/// Library polygon distance and collision predicate versus the Minkowski oracle.
pub fn distance_equivalence(pairs: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let a = translate(&random_convex(&mut rng, 2.5), rng.random_range(-1.0..1.0), 0.0);
        let b = translate(
            &random_convex(&mut rng, 2.5),
            rng.random_range(-6.0..6.0),
            rng.random_range(-6.0..6.0),
        );
        let expected = minkowski_distance(&a, &b);
        let got = to_convex(&a).distance(&to_convex(&b));
        let err = (expected - got).abs();
        worst = worst.max(err);
        if err > 1e-6 {
            return Err(format!("pair {i}: distance {got} vs oracle {expected}\n{a:?}\n{b:?}"));
        }
        let d = rng.random_range(0.0..2.0);
        if (expected - d).abs() > 1e-6 {
            let oracle_hit = overlap_area(&a, &b) > AREA_EPS || expected < d;
            if polygons_collide(&to_convex(&a), &to_convex(&b), d) != oracle_hit {
                return Err(format!("pair {i}: collision predicate disagrees at d={d}"));
            }
        }
    }
    Ok(format!("{pairs} pairs, max |error| {worst:.2e}"))
}

/// Covered and detection cells versus brute-force rasterisation.
pub fn rasterization_equivalence(polygons: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..polygons {
        let half = rng.random_range(0.6..3.5);
        let p = random_convex(&mut rng, half);
        let model = to_model(&p);
        let covered: BTreeSet<(i32, i32)> = model.covered_offsets().into_iter().collect();
        let expected = rasterize(&p, 0.0);
        if covered != expected {
            return Err(format!(
                "polygon {i}: covered {covered:?} vs oracle {expected:?}\n{p:?}"
            ));
        }
        let d = [0.3, 0.5, 1.0][i % 3];
        let detection: BTreeSet<(i32, i32)> =
            DetectionModel::new(model, d).covered_offsets().into_iter().collect();
        let expected = rasterize(&p, d);
        if detection != expected {
            return Err(format!("polygon {i}: detection cells differ at d={d}\n{p:?}"));
        }
    }
    Ok(format!("{polygons} polygons"))
}

fn unit_scenario(map_text: &str, agents: &str, d: f64) -> Scenario {
    let map = Arc::new(GridMap::parse(map_text).unwrap());
    let text = format!("safety_distance {d}\n{agents}");
    Scenario::parse(&text, map, &FootprintLibrary::builtin()).unwrap()
}

fn scripted(env: &mut Environment, script: &[&[Action]]) -> Result<(Vec<f64>, Vec<Vec<f64>>), String> {
    env.reset();
    let mut shared = Vec::new();
    let mut per_agent = Vec::new();
    for (t, actions) in script.iter().enumerate() {
        let out = env.step(actions).map_err(|e| format!("step {t}: {e}"))?;
        shared.push(out.shared_reward);
        per_agent.push(out.rewards);
    }
    if !env.is_finished() {
        return Err("script ended before the episode".into());
    }
    Ok((shared, per_agent))
}

fn undiscounted(rewards: &[f64]) -> f64 {
    rewards.iter().fold(0.0, |acc, r| acc + r)
}

/// Three scripted episodes whose returns are worked out by hand.
pub fn reward_fixtures() -> Result<String, String> {
    use Action::{Move, Wait};
    let config = EnvConfig {
        timing: Timing::deterministic(),
        ..EnvConfig::default()
    };

    // One agent, four cells to the goal: step costs 1/4, 1/3, 1/2, then the goal.
    let corridor = "type octile\nheight 1\nwidth 5\nmap\n.....\n";
    let mut env = Environment::new(unit_scenario(corridor, "a unit 0 0 0 4\n", 0.0), config.clone())
        .map_err(|e| e.to_string())?;
    let (shared, _) = scripted(&mut env, &[&[Move], &[Move], &[Move], &[Move]])?;
    let expected = vec![-1.0 / 4.0, -1.0 / 3.0, -1.0 / 2.0, 200.0];
    if shared != expected || undiscounted(&shared) != -1.0 / 4.0 - 1.0 / 3.0 - 1.0 / 2.0 + 200.0 {
        return Err(format!("goal fixture: rewards {shared:?}, expected {expected:?}"));
    }

    // Head-on swap: a step of 1/3 each, then both collide mid-move.
    let lane = "type octile\nheight 1\nwidth 4\nmap\n....\n";
    let off = EnvConfig {
        rules: RuleConfig::off(),
        ..config.clone()
    };
    let mut env = Environment::new(unit_scenario(lane, "a unit 0 0 0 3\nb unit 0 3 0 0\n", 0.0), off)
        .map_err(|e| e.to_string())?;
    let (shared, per_agent) = scripted(&mut env, &[&[Move, Move], &[Move, Move]])?;
    if per_agent != vec![vec![-1.0 / 3.0; 2], vec![-100.0; 2]]
        || undiscounted(&shared) != -1.0 / 3.0 - 100.0
    {
        return Err(format!("collision fixture: rewards {per_agent:?}"));
    }

    // Two separated lanes; both wait once (shaping -5 each), then drive home.
    let lanes = "type octile\nheight 3\nwidth 3\nmap\n...\n@@@\n...\n";
    let shaping_only = EnvConfig {
        rules: RuleConfig {
            shaping: [true; 3],
            ..RuleConfig::off()
        },
        ..config
    };
    let mut env = Environment::new(unit_scenario(lanes, "a unit 0 0 0 2\nb unit 2 0 2 2\n", 0.0), shaping_only)
        .map_err(|e| e.to_string())?;
    let (shared, _) = scripted(&mut env, &[&[Wait, Wait], &[Move, Move], &[Move, Move]])?;
    if shared != vec![-5.5, -0.5, 200.0] || undiscounted(&shared) != 194.0 {
        return Err(format!("wait fixture: rewards {shared:?}"));
    }
    if env.metrics().waiting != 2.0 {
        return Err(format!("wait fixture: waiting {}", env.metrics().waiting));
    }
    Ok("goal 199.0833, collision -100.3333, shaped wait 194".into())
}

fn mask_of(actions: &[Action]) -> ActionMask {
    let mut m = ActionMask::ALL;
    for a in Action::ALL {
        if !actions.contains(&a) {
            m.forbid(a);
        }
    }
    m
}

/// Each mask rule and shaping rule, on and off, on a fixture where it fires.
pub fn rule_fixtures() -> Result<String, String> {
    use Action::{Back, Move, Replan, Wait};
    let clear = [false; 23];
    let mut next_blocked = [false; 23];
    next_blocked[0] = true;
    let mut later_blocked = [false; 23];
    later_blocked[1] = true;
    let base = MaskContext {
        done: false,
        collided: false,
        all_others_done: false,
        guidance_stale: false,
        route_longer_than_global: false,
        lookahead_conflicts: &clear,
        previous_action: None,
        all_others_waited: false,
        heuristics: true,
    };
    let fixtures: [(MaskContext<'_>, &[Action], &[Action]); 6] = [
        (MaskContext { done: true, ..base.clone() }, &[Wait], &[Move]),
        (
            MaskContext {
                all_others_done: true,
                guidance_stale: true,
                route_longer_than_global: true,
                ..base.clone()
            },
            &[Replan],
            &[Move],
        ),
        (base.clone(), &[Move], &[Move, Wait, Back, Replan]),
        (
            MaskContext { lookahead_conflicts: &next_blocked, ..base.clone() },
            &[Wait, Back, Replan],
            &[Move, Wait, Back, Replan],
        ),
        (
            MaskContext {
                lookahead_conflicts: &next_blocked,
                previous_action: Some(Back),
                ..base.clone()
            },
            &[Wait, Replan],
            &[Wait, Back, Replan],
        ),
        (
            MaskContext {
                lookahead_conflicts: &later_blocked,
                all_others_waited: true,
                ..base.clone()
            },
            &[Move, Wait, Replan],
            &[Move, Wait, Back, Replan],
        ),
    ];
    for (k, (ctx, with, without)) in fixtures.iter().enumerate() {
        let mut rules = RuleConfig::on();
        let on = action_mask(ctx, &rules);
        rules.mask[k] = false;
        let off = action_mask(ctx, &rules);
        if on != mask_of(with) || off != mask_of(without) {
            return Err(format!(
                "mask rule {}: on {:?} off {:?}, expected {with:?} / {without:?}",
                k + 1,
                on.actions().collect::<Vec<_>>(),
                off.actions().collect::<Vec<_>>()
            ));
        }
    }
    let shaping: [(&[Action], &[(usize, usize)]); 3] = [
        (&[Wait, Wait], &[]),
        (&[Replan, Replan], &[]),
        (&[Move, Replan], &[(0, 1)]),
    ];
    for (k, (actions, risk)) in shaping.iter().enumerate() {
        let mut rules = RuleConfig::on();
        let (on, _) = shaping_penalty(actions, &[true, true], risk, &rules);
        rules.shaping[k] = false;
        let (off, _) = shaping_penalty(actions, &[true, true], risk, &rules);
        if on != vec![-5.0, -5.0] || off != vec![0.0, 0.0] {
            return Err(format!("shaping rule {}: on {on:?} off {off:?}", k + 1));
        }
    }
    // A mixed step without a risk pair is not penalised.
    let (quiet, _) = shaping_penalty(&[Move, Replan], &[true, true], &[], &RuleConfig::on());
    if quiet != vec![0.0, 0.0] {
        return Err(format!("mixed replan without risk penalised: {quiet:?}"));
    }
    Ok("6 mask rules and 3 shaping rules flip when toggled".into())
}

/// Actor and critic input sizes for the default and for other settings.
pub fn observation_dims() -> Result<String, String> {
    let open = "type octile\nheight 12\nwidth 12\nmap\n".to_string() + &"............\n".repeat(12);
    let mut seen = Vec::new();
    for (agents, lookahead) in [(2, 23), (3, 23), (2, 10), (4, 5)] {
        let lines: String = (0..agents).map(|i| format!("a{i} unit {} 0 {} 11\n", 3 * i, 3 * i)).collect();
        let config = EnvConfig {
            lookahead,
            ..EnvConfig::default()
        };
        let mut env = Environment::new(unit_scenario(&open, &lines, 0.0), config).map_err(|e| e.to_string())?;
        let obs = env.reset();
        let features: Vec<Vec<f64>> = obs.iter().map(Observation::features).collect();
        let dim = 1 + (agents - 1) + 3 * lookahead;
        let critic = agents * dim + agents + (agents - 1);
        if env.observation_dim() != dim || features.iter().any(|f| f.len() != dim) {
            return Err(format!("{agents} agents, lookahead {lookahead}: observation {} != {dim}", features[0].len()));
        }
        let input = critic_input(&features, &obs, 0, true);
        if input.len() != critic || critic_dim(agents, dim, true) != critic {
            return Err(format!("{agents} agents, lookahead {lookahead}: critic {} != {critic}", input.len()));
        }
        if critic_input(&features, &obs, 0, false).len() != dim {
            return Err("per-agent critic input is not the own observation".into());
        }
        seen.push(format!("N={agents} n={lookahead}: {dim}/{critic}"));
    }
    if !seen[0].ends_with("71/145") {
        return Err(format!("default dims {}", seen[0]));
    }
    Ok(seen.join(", "))
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Central differences over every parameter of `net` against `analytic`.
fn compare_gradients(
    net: &Network,
    analytic: &[Array2<f64>],
    loss: impl Fn(&Network) -> f64,
) -> Result<f64, String> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for k in 0..net.params.len() {
        for idx in 0..net.params[k].len() {
            let (r, c) = (idx / net.params[k].ncols(), idx % net.params[k].ncols());
            let orig = net.params[k][[r, c]];
            probe.params[k][[r, c]] = orig + h;
            let up = loss(&probe);
            probe.params[k][[r, c]] = orig - h;
            let down = loss(&probe);
            probe.params[k][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[k][[r, c]], numeric);
            if err > worst {
                worst = err;
            }
            if err >= 1e-4 {
                return Err(format!(
                    "param {k}[{r},{c}]: analytic {} numeric {numeric}",
                    analytic[k][[r, c]]
                ));
            }
        }
    }
    Ok(worst)
}

/// PPO actor and critic losses on 8-unit recurrent networks versus central
/// finite differences.
pub fn ppo_gradient_check(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (steps, batch, input) = (3, 3, 6);
    let rows = steps * batch;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for cell in [CellKind::Gru, CellKind::Rnn] {
        let config = NetConfig {
            input,
            hidden: 8,
            layers: 2,
            cell,
            output: Action::COUNT,
        };
        let actor = Network::new(config, 1.0, &mut rng);
        let x = random_matrix(&mut rng, rows, input, 1.0);
        let h0 = random_matrix(&mut rng, batch, 8, 0.5);
        let masks: Vec<ActionMask> = (0..rows)
            .map(|i| {
                let mut m = ActionMask::ALL;
                for a in Action::ALL {
                    if rng.random_bool(0.3) && m.count() > 1 {
                        m.forbid(a);
                    }
                }
                if i == rows - 1 {
                    m = ActionMask::only(Action::Wait);
                }
                m
            })
            .collect();
        let actions: Vec<usize> = masks
            .iter()
            .map(|m| {
                let allowed: Vec<Action> = m.actions().collect();
                allowed[rng.random_range(0..allowed.len())].index()
            })
            .collect();
        let (logits, _) = actor.forward_seq(&x, &h0, steps);
        let old_log_probs: Vec<f64> = (0..rows)
            .map(|i| {
                let p = masked_softmax(logits.row(i).as_slice().unwrap(), &masks[i].allowed);
                p[actions[i]].ln() + rng.random_range(-0.3..0.3)
            })
            .collect();
        let weights: Vec<f64> = masks
            .iter()
            .enumerate()
            .map(|(i, m)| if m.count() > 1 && i != 1 { 1.0 } else { 0.0 })
            .collect();
        let actor_batch = ActorBatch {
            steps,
            x: x.clone(),
            h0: h0.clone(),
            masks,
            actions,
            old_log_probs,
            advantages: (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect(),
            weights,
        };
        let (_, grads) = actor_loss(&actor, &actor_batch, 0.1, 0.01);
        worst = worst.max(
            compare_gradients(&actor, &grads, |n| actor_loss(n, &actor_batch, 0.1, 0.01).0.total)
                .map_err(|e| format!("{cell:?} actor: {e}"))?,
        );
        checked += actor.num_parameters();

        let critic = Network::new(NetConfig { output: 1, ..config }, 1.0, &mut rng);
        let (values, _) = critic.forward_seq(&x, &h0, steps);
        let critic_batch = CriticBatch {
            steps,
            x,
            h0,
            // Half the old values sit close enough that clipping is inactive.
            old_values: (0..rows)
                .map(|i| values[[i, 0]] + if i % 2 == 0 { 0.03 } else { 0.5 })
                .collect(),
            returns: (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect(),
            weights: (0..rows).map(|i| if i == rows - 1 { 0.0 } else { 1.0 }).collect(),
        };
        let (_, grads) = critic_loss(&critic, &critic_batch, 0.2, 0.5);
        worst = worst.max(
            compare_gradients(&critic, &grads, |n| critic_loss(n, &critic_batch, 0.2, 0.5).0)
                .map_err(|e| format!("{cell:?} critic: {e}"))?,
        );
        checked += critic.num_parameters();
    }
    Ok(format!("{checked} parameters, max relative error {worst:.2e}"))
}
