use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mappohr::dstar::Timing;
use mappohr::env::{EpisodeTrace, StepRecord};
use mappohr::harness::{self, ExperimentConfig, PolicyKind, SuiteReport, Variant};
use mappohr::mappo::{self, Checkpoint};
use mappohr::rules::RuleConfig;
use mappohr::{Cell, FootprintStamp, GridMap, Scenario};

#[derive(Parser)]
#[command(name = "mappohr", version, about = "Multi-robot grid planning: suites, training, evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for suite generation, training and evaluation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with optional [env], [train] and [suite] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Measure planning time by node expansions instead of the wall clock.
    #[arg(long, global = true)]
    deterministic_timing: bool,
    /// Enable or disable the rule masks and shaping penalties.
    #[arg(long, global = true, value_enum)]
    rules: Option<Toggle>,
    /// Shaping penalty applied by the reward rules.
    #[arg(long, global = true, allow_negative_numbers = true)]
    rule_penalty: Option<f64>,
    /// Centralised critic input (on) or per-agent critic (off).
    #[arg(long, global = true, value_enum, num_args = 0..=1, default_missing_value = "on")]
    share_critic: Option<Toggle>,
    /// Allow the heuristic Replan action (on) or remove it (off).
    #[arg(long, global = true, value_enum, num_args = 0..=1, default_missing_value = "on")]
    heuristic_mask: Option<Toggle>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a conflict suite on an airport-style map.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        conflict_rate: Option<f64>,
    },
    /// Train a policy on a suite.
    Train {
        #[arg(long)]
        suite: PathBuf,
        /// Directory for checkpoints and the reward curve.
        #[arg(long)]
        out: PathBuf,
        /// Preset for rules, heuristics and critic sharing; explicit flags win.
        #[arg(long)]
        variant: Option<Variant>,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate one policy on a suite and write the cost report.
    Eval {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, value_enum, default_value = "learned")]
        policy: PolicyChoice,
        #[arg(long, required_if_eq("policy", "learned"))]
        checkpoint: Option<PathBuf>,
        /// Report CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-case episode traces.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Exit with status 2 when the success rate is below this.
        #[arg(long)]
        min_success: Option<f64>,
    },
    /// Compare the learned policy against the baselines on a suite.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for one report CSV per policy.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an episode trace step by step.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Scenario file; when given, each step is drawn on the map.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyChoice {
    Learned,
    Replanner,
    Rules,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if common.deterministic_timing {
        cfg.env.timing = Timing::deterministic();
    }
    cfg.train.seed = common.seed;
    apply_flags(common, &mut cfg);
    Ok(cfg)
}

fn apply_flags(common: &Common, cfg: &mut ExperimentConfig) {
    if let Some(t) = common.rules {
        let penalty = cfg.env.rules.penalty;
        cfg.env.rules = if t.on() { RuleConfig::on() } else { RuleConfig::off() };
        cfg.env.rules.penalty = penalty;
    }
    if let Some(p) = common.rule_penalty {
        cfg.env.rules.penalty = p;
    }
    if let Some(t) = common.share_critic {
        cfg.train.share_critic = t.on();
    }
    if let Some(t) = common.heuristic_mask {
        cfg.env.heuristics = t.on();
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = &cli.common;
    let mut cfg = load_config(common)?;
    match cli.command {
        Command::Gen {
            out,
            cases,
            conflict_rate,
        } => {
            if let Some(c) = cases {
                cfg.suite.cases = c;
            }
            if let Some(r) = conflict_rate {
                cfg.suite.conflict_rate = r;
            }
            let suite = harness::generate_suite(common.seed, &cfg.suite)?;
            suite.write(&out)?;
            println!(
                "wrote {} cases to {}: {} conflicted (target {}), rate {:.2}",
                suite.cases.len(),
                out.display(),
                suite.conflicted(),
                suite.target_conflicted,
                suite.achieved_rate()
            );
            if suite.cases.len() < cfg.suite.cases || suite.conflicted() != suite.target_conflicted {
                eprintln!("warning: target mix not reached within {} attempts", cfg.suite.max_attempts);
            }
        }
        Command::Train {
            suite,
            out,
            variant,
            steps,
            lr,
            quiet,
        } => {
            if let Some(v) = variant {
                v.apply(&mut cfg.env, &mut cfg.train);
                // Explicit flags override the preset.
                apply_flags(common, &mut cfg);
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            let (_, scenarios) = harness::load_suite(&suite)?;
            fs::create_dir_all(&out)?;
            let result = mappo::train(&scenarios, &cfg.env, &cfg.train, |p, s| {
                if !quiet {
                    println!(
                        "update {:>4}  steps {:>6}  reward {:>9.3}  success {:.2}  entropy {:.3}  clip {:.3}",
                        p.update_index, p.env_steps, p.mean_episode_reward, p.success_rate, s.entropy, s.clip_fraction
                    );
                }
            });
            let outcome = match result {
                Ok(o) => o,
                Err(mappo::TrainError::Diverged {
                    update,
                    what,
                    last_good,
                }) => {
                    last_good.save(&out.join("checkpoint.json"))?;
                    return Err(format!("diverged at update {update}: {what}; last good checkpoint saved").into());
                }
                Err(e) => return Err(e.into()),
            };
            outcome.best.save(&out.join("checkpoint.json"))?;
            outcome.last.save(&out.join("last.json"))?;
            mappo::write_curve(&outcome.curve, &out.join("curve.csv"))?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            println!(
                "trained {} steps in {} updates; final reward {:.3}; best checkpoint from update {}",
                outcome.last.env_steps,
                outcome.last.updates,
                mappo::final_reward(&outcome.curve, 10),
                outcome.best.updates
            );
        }
        Command::Eval {
            suite,
            policy,
            checkpoint,
            out,
            traces,
            min_success,
        } => {
            let kind = policy_kind(policy, checkpoint.as_deref())?;
            let (names, scenarios) = harness::load_suite(&suite)?;
            let report = harness::run_suite(&kind, &scenarios, &names, &cfg.env, common.seed)?;
            match &out {
                Some(p) => {
                    report.write_csv(fs::File::create(p)?)?;
                    println!("{report}");
                }
                None => print!("{}", report.to_csv_string()),
            }
            if let Some(dir) = traces {
                write_traces(&report, &dir)?;
            }
            if let Some(min) = min_success {
                if report.success_rate() < min {
                    eprintln!("success rate {:.2} below {min}", report.success_rate());
                    return Ok(ExitCode::from(2));
                }
            }
        }
        Command::Bench {
            suite,
            checkpoint,
            out,
        } => {
            let (names, scenarios) = harness::load_suite(&suite)?;
            let mut kinds = vec![PolicyKind::PureReplanner, PolicyKind::RuleOnly];
            if let Some(cp) = &checkpoint {
                kinds.push(PolicyKind::Learned(Box::new(Checkpoint::load(cp)?)));
            }
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
            }
            println!("{:<10} {:>9} {:>9} {:>9} {:>9} {:>8}", "policy", "added", "planning", "waiting", "total", "success");
            for kind in &kinds {
                let report = harness::run_suite(kind, &scenarios, &names, &cfg.env, common.seed)?;
                let t = report.totals();
                println!(
                    "{:<10} {:>9.1} {:>9.1} {:>9.1} {:>9.1} {:>8.2}",
                    report.policy,
                    t[0],
                    t[1],
                    t[2],
                    t[3],
                    report.success_rate()
                );
                if let Some(dir) = &out {
                    report.write_csv(fs::File::create(dir.join(format!("{}.csv", report.policy)))?)?;
                }
            }
        }
        Command::Replay { trace, scenario } => {
            let t = EpisodeTrace::read(std::io::BufReader::new(fs::File::open(&trace)?))?;
            let scenario = scenario.map(|p| harness::load_scenario(&p)).transpose()?;
            replay(&t, scenario.as_ref());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn policy_kind(choice: PolicyChoice, checkpoint: Option<&Path>) -> Result<PolicyKind> {
    Ok(match choice {
        PolicyChoice::Replanner => PolicyKind::PureReplanner,
        PolicyChoice::Rules => PolicyKind::RuleOnly,
        PolicyChoice::Learned => {
            let path = checkpoint.ok_or("--checkpoint is required for the learned policy")?;
            PolicyKind::Learned(Box::new(Checkpoint::load(path)?))
        }
    })
}

fn write_traces(report: &SuiteReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (row, trace) in report.rows.iter().zip(&report.traces) {
        if let Some(t) = trace {
            t.write(fs::File::create(dir.join(format!("{}.trace", row.case)))?)?;
        }
    }
    Ok(())
}

fn replay(trace: &EpisodeTrace, scenario: Option<&Scenario>) {
    let m = trace.metrics();
    println!(
        "{} agents, {} steps; added {:.2} planning {:.2} waiting {} total {:.2} success {}",
        trace.agents.len(),
        trace.steps.len(),
        m.added,
        m.planning,
        m.waiting,
        m.total,
        u8::from(m.success)
    );
    let stamps: Option<Vec<Arc<FootprintStamp>>> = scenario.map(|s| {
        s.agents
            .iter()
            .map(|a| {
                Arc::new(FootprintStamp::new(
                    a.model.clone(),
                    s.safety_distance,
                    Default::default(),
                ))
            })
            .collect()
    });
    let starts: Vec<Cell> = trace.agents.iter().map(|a| a.start).collect();
    if let (Some(s), Some(st)) = (scenario, &stamps) {
        println!("t=0");
        print!("{}", draw(&s.map, st, &starts));
    }
    for step in &trace.steps {
        println!("{}", step_line(trace, step));
        if let (Some(s), Some(st)) = (scenario, &stamps) {
            let cells: Vec<Cell> = step.agents.iter().map(|a| a.cell).collect();
            print!("{}", draw(&s.map, st, &cells));
        }
    }
}

fn step_line(trace: &EpisodeTrace, step: &StepRecord) -> String {
    let parts: Vec<String> = trace
        .agents
        .iter()
        .zip(&step.agents)
        .map(|(a, r)| {
            let mut s = format!("{} {} -> {} {:+.3}", a.id, r.action, r.cell, r.reward);
            if r.effective != r.action {
                s.push_str(&format!(" (as {})", r.effective));
            }
            if r.planning_seconds > 0.0 {
                s.push_str(&format!(" tp={:.3}", r.planning_seconds));
            }
            if r.collided {
                s.push_str(" COLLIDED");
            } else if r.done {
                s.push_str(" done");
            }
            s
        })
        .collect();
    format!("t={:<3} {}", step.t + 1, parts.join(" | "))
}

/// Obstacles as `@`, agent footprints as letters, the agent cell in upper case.
fn draw(map: &GridMap, stamps: &[Arc<FootprintStamp>], cells: &[Cell]) -> String {
    let (h, w) = (map.height(), map.width());
    let mut grid: Vec<Vec<char>> = (0..h)
        .map(|r| {
            (0..w)
                .map(|c| if map.is_blocked(Cell::new(r as i32, c as i32)) { '@' } else { '.' })
                .collect()
        })
        .collect();
    for (i, (stamp, &cell)) in stamps.iter().zip(cells).enumerate() {
        let letter = (b'a' + (i % 26) as u8) as char;
        for c in stamp.covered(cell) {
            if map.in_bounds(c) {
                grid[c.row as usize][c.col as usize] = letter;
            }
        }
        if map.in_bounds(cell) {
            grid[cell.row as usize][cell.col as usize] = letter.to_ascii_uppercase();
        }
    }
    grid.into_iter().map(|row| row.into_iter().collect::<String>() + "\n").collect()
}
