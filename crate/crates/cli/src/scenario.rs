//! The six shipped experiments: environments, attack wiring, per-scenario
//! default settings, and a library-level runner whose outcome the artifact
//! writer and the test suites share.

use crate::config::{Resolved, Scenario, Settings};
use decrl::env::{
    make_maze, make_maze_with, value_iteration, Action, Cell, EnvError, GridMdp, MazeParams,
    StateEncoding,
};
use decrl::eval::{
    bandit_case, bound_check, drift_chain_case, equivalence_gap, general_grid_case,
    sample_histories, BoundCheck, EquivalenceReport,
};
use decrl::policy::{
    lipschitz_estimate, soft_optimal_policy, value_exact, Actor, PolicyError, TrainConfig,
    DEFAULT_TAU_FRACTION,
};
use decrl::protocol::{
    run_protocol, AttackSpec, BadPolicySpec, ProtocolConfig, ProtocolError, ProtocolOutcome,
};
use decrl::seed;
use decrl::trigger::{
    compose_backdoor, decompose_trigger, make_trigger, partition_orthogonal, safe_subspace,
    sample_occupancy, ActivationRule, DimensionRule, SafeSubspace, TriggerError, TriggerFunction,
    DEFAULT_GATE_BANDWIDTH_FRACTION, DEFAULT_GATE_FRACTION,
};
use std::collections::BTreeSet;

/// 11×10 demo maze. The short route runs straight up through the two-cell
/// gap (region `1`) in a double wall; the only alternative loops around the
/// wall's right end, ten moves longer.
pub const DEMO_MAZE: &str = "\
...........
.....G.....
...........
...........
#####1####.
#####1####.
...........
...........
.....S.....
...........";

/// 6×6 open grid with start and goal in opposite corners. The goal pays
/// out, so clean returns are positive and halving them is a real loss.
const OPEN_GRID: &str = "\
S.....
......
......
......
......
.....G";

const OPEN_GRID_GOAL_REWARD: f64 = 20.0;

/// How far the trigger's activation region extends around the wall gap
/// (Chebyshev radius, in cells).
const GAP_TRIGGER_RADIUS: usize = 2;

/// Obstacle radius the planted detour policy plans around.
const GAP_OBSTACLE_RADIUS: usize = 1;

pub fn demo_maze() -> GridMdp {
    make_maze(DEMO_MAZE).expect("embedded maze layout parses")
}

pub fn open_grid() -> GridMdp {
    let params = MazeParams { step_reward: -1.0, gamma: 0.95, goal_reward: OPEN_GRID_GOAL_REWARD };
    make_maze_with(OPEN_GRID, params).expect("embedded grid layout parses")
}

/// The wall-gap cells of the demo maze (its labeled region 1).
pub fn maze_gap(mdp: &GridMdp) -> BTreeSet<Cell> {
    mdp.labeled_regions().get(&1).cloned().expect("demo maze declares region 1")
}

/// Baseline settings for a scenario; the config file and flags override
/// these field by field.
pub fn default_settings(scenario: Scenario) -> Settings {
    let base = Settings {
        seed: 0,
        agents: 4,
        rounds: 10,
        train_steps: 15_000,
        lr: 0.1,
        epsilon: 0.1,
        max_episode_len: 120,
        encoding_dim: 8,
        tau_fraction: DEFAULT_TAU_FRACTION,
        eval_episodes: 400,
        eval_max_steps: 200,
        covertness_states: 400,
        bound_histories: 0,
        parallel: true,
        magnitude_fraction: 2.0,
        gate_fraction: DEFAULT_GATE_FRACTION,
        gate_bandwidth_fraction: DEFAULT_GATE_BANDWIDTH_FRACTION,
        subspace_samples: 4000,
        bound_seeds: 5,
        bound_trajectories: 1500,
        bound_max_len: 12,
        bound_components: 3,
        bound_agents: 6,
        equiv_bandit: 10,
        equiv_drift: 10,
        equiv_general: 5,
    };
    match scenario {
        Scenario::MazeBenign => base,
        // One attacker out of two and two out of four keep the attacker
        // share of the average at one half in both maze attacks, so their
        // assembled aggregates are directly comparable.
        Scenario::MazeSbpa => Settings { agents: 2, bound_histories: 40, ..base },
        Scenario::MazeCbpa => Settings { bound_histories: 40, ..base },
        Scenario::GridworldCbpa => Settings { agents: 6, rounds: 6, eval_episodes: 600, ..base },
        Scenario::BoundVerify => base,
        Scenario::AggregationEquiv => base,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{0}")]
    Invalid(String),
}

fn apply_attack_settings(spec: &mut AttackSpec, s: &Settings) {
    spec.magnitude_fraction = s.magnitude_fraction;
    spec.gate_fraction = s.gate_fraction;
    spec.gate_bandwidth_fraction = s.gate_bandwidth_fraction;
    spec.subspace_samples = s.subspace_samples;
}

fn maze_attack(attackers: Vec<usize>, s: &Settings, gap: BTreeSet<Cell>) -> AttackSpec {
    let rule =
        ActivationRule::NearCells { cells: gap.clone(), radius: GAP_TRIGGER_RADIUS, latch: true };
    let mut spec = AttackSpec::trigger(attackers, rule, vec![(gap, GAP_OBSTACLE_RADIUS)]);
    apply_attack_settings(&mut spec, s);
    spec
}

fn grid_attack(attackers: Vec<usize>, s: &Settings) -> AttackSpec {
    let mut spec = AttackSpec::trigger(attackers, ActivationRule::Always, Vec::new());
    spec.bad_policy = BadPolicySpec::FixedAction(Action::Down);
    apply_attack_settings(&mut spec, s);
    spec
}

/// The last `count` agent indices, after checking that at least one benign
/// agent remains.
fn tail_attackers(scenario: Scenario, agents: usize, count: usize) -> Result<Vec<usize>, ScenarioError> {
    if agents <= count {
        return Err(ScenarioError::Invalid(format!(
            "{} needs at least {} agents ({} attackers plus one benign), got {}",
            scenario.name(),
            count + 1,
            count,
            agents
        )));
    }
    Ok(((agents - count)..agents).collect())
}

/// Environment and protocol configuration for the four protocol-driven
/// scenarios, exposed so tests can rerun variants (for example stripping
/// the attack for an all-benign baseline) without duplicating the wiring.
pub fn protocol_parts(resolved: &Resolved) -> Result<(GridMdp, ProtocolConfig), ScenarioError> {
    let s = &resolved.settings;
    let (mdp, attack) = match resolved.scenario {
        Scenario::MazeBenign => (demo_maze(), None),
        Scenario::MazeSbpa => {
            let mdp = demo_maze();
            let gap = maze_gap(&mdp);
            let attackers = tail_attackers(resolved.scenario, s.agents, 1)?;
            (mdp, Some(maze_attack(attackers, s, gap)))
        }
        Scenario::MazeCbpa => {
            let mdp = demo_maze();
            let gap = maze_gap(&mdp);
            let attackers = tail_attackers(resolved.scenario, s.agents, 2)?;
            (mdp, Some(maze_attack(attackers, s, gap)))
        }
        Scenario::GridworldCbpa => {
            let attackers = tail_attackers(resolved.scenario, s.agents, 3)?;
            (open_grid(), Some(grid_attack(attackers, s)))
        }
        other => {
            return Err(ScenarioError::Invalid(format!(
                "{} does not run the sharing protocol",
                other.name()
            )))
        }
    };
    let cfg = ProtocolConfig {
        agents: s.agents,
        rounds: s.rounds,
        train: TrainConfig {
            steps: s.train_steps,
            lr: s.lr,
            epsilon: s.epsilon,
            seed: 0, // the protocol derives per-agent seeds from master_seed
            max_episode_len: s.max_episode_len,
        },
        encoding_dim: s.encoding_dim,
        tau_fraction: s.tau_fraction,
        master_seed: s.seed,
        eval_episodes: s.eval_episodes,
        eval_max_steps: s.eval_max_steps,
        covertness_states: s.covertness_states,
        bound_histories: s.bound_histories,
        parallel: s.parallel,
        attack,
    };
    Ok((mdp, cfg))
}

/// A greedy rollout in the clean environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Walk {
    /// Visited cells, starting cell first.
    pub cells: Vec<Cell>,
    pub reached_goal: bool,
}

impl Walk {
    /// Number of moves taken (cells minus one).
    pub fn moves(&self) -> usize {
        self.cells.len() - 1
    }
}

/// First maximal-probability action, in Up, Down, Left, Right order.
pub fn argmax_action(probs: &[f64]) -> Action {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    Action::from_index(best)
}

/// Walk the actor greedily from the start cell until a goal or `max_steps`.
/// The actor sees the encoded cell (so a trigger-composed actor perturbs
/// its own observations), but the environment stays clean.
pub fn walk_greedy(
    mdp: &GridMdp,
    enc: &StateEncoding,
    actor: &mut dyn Actor,
    max_steps: usize,
) -> Walk {
    let starts = mdp.start_distribution();
    assert_eq!(starts.len(), 1, "greedy walks need a single fixed start");
    actor.reset();
    let mut cell = starts[0].0;
    let mut cells = vec![cell];
    let mut reached = mdp.is_terminal(cell);
    for _ in 0..max_steps {
        if reached {
            break;
        }
        let probs = actor.action_distribution(enc.encode(cell));
        let step = mdp.step(cell, argmax_action(&probs), &[]).expect("walking a free cell");
        cell = step.next;
        cells.push(cell);
        reached = step.terminal;
    }
    Walk { cells, reached_goal: reached }
}

/// Result of a protocol-driven scenario.
#[derive(Debug)]
pub struct ProtocolRun {
    pub mdp: GridMdp,
    pub outcome: ProtocolOutcome,
    /// Moves on a shortest start-to-goal path.
    pub optimal_moves: usize,
    /// Greedy walk of the final deployed aggregate (maze scenarios only).
    pub clean_walk: Option<Walk>,
    /// Greedy walk of the trigger-composed aggregate (maze attack scenarios).
    pub triggered_walk: Option<Walk>,
}

/// Result of the direct perturbation-bound audit.
#[derive(Debug)]
pub struct BoundRun {
    /// Exact clean value of the audited policy.
    pub clean_value: f64,
    /// Sampled two-point Lipschitz estimate, for tightness context next to
    /// the analytic constant inside each check.
    pub lipschitz_empirical: f64,
    /// One check per sub-seed.
    pub checks: Vec<BoundCheck>,
    pub trigger: TriggerFunction,
    pub components: Vec<TriggerFunction>,
    pub subspace: SafeSubspace,
}

impl BoundRun {
    pub fn total_histories(&self) -> usize {
        self.checks.iter().map(|c| c.histories).sum()
    }

    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

/// Result of the aggregation-equivalence table.
#[derive(Debug)]
pub struct EquivRun {
    pub reports: Vec<EquivalenceReport>,
}

#[derive(Debug)]
pub enum RunKind {
    Protocol(ProtocolRun),
    Bound(BoundRun),
    Equiv(EquivRun),
}

/// Everything a finished run knows, consumed by the artifact writer and by
/// the test suites.
#[derive(Debug)]
pub struct ScenarioOutcome {
    pub resolved: Resolved,
    pub kind: RunKind,
}

impl ScenarioOutcome {
    pub fn protocol(&self) -> Option<&ProtocolRun> {
        match &self.kind {
            RunKind::Protocol(run) => Some(run),
            _ => None,
        }
    }

    pub fn bound(&self) -> Option<&BoundRun> {
        match &self.kind {
            RunKind::Bound(run) => Some(run),
            _ => None,
        }
    }

    pub fn equiv(&self) -> Option<&EquivRun> {
        match &self.kind {
            RunKind::Equiv(run) => Some(run),
            _ => None,
        }
    }
}

/// Execute a resolved run request.
pub fn run_scenario(resolved: &Resolved) -> Result<ScenarioOutcome, ScenarioError> {
    let kind = match resolved.scenario {
        Scenario::MazeBenign
        | Scenario::MazeSbpa
        | Scenario::MazeCbpa
        | Scenario::GridworldCbpa => RunKind::Protocol(run_protocol_scenario(resolved)?),
        Scenario::BoundVerify => RunKind::Bound(run_bound_verify(&resolved.settings)?),
        Scenario::AggregationEquiv => RunKind::Equiv(run_equivalence(&resolved.settings)?),
    };
    Ok(ScenarioOutcome { resolved: resolved.clone(), kind })
}

fn run_protocol_scenario(resolved: &Resolved) -> Result<ProtocolRun, ScenarioError> {
    let (mdp, cfg) = protocol_parts(resolved)?;
    let outcome = run_protocol(&mdp, cfg)?;
    let optimal = value_iteration(&mdp, 1e-10).greedy_path(&mdp, mdp.width() * mdp.height());
    let optimal_moves = optimal.len() - 1;
    let is_maze = matches!(
        resolved.scenario,
        Scenario::MazeBenign | Scenario::MazeSbpa | Scenario::MazeCbpa
    );
    let (clean_walk, triggered_walk) = if is_maze {
        let cap = mdp.width() * mdp.height();
        let mut deployed = outcome.deployed.clone();
        let clean = walk_greedy(&mdp, &outcome.encoding, &mut deployed, cap);
        let triggered = outcome.trigger.clone().map(|t| {
            let mut actor = compose_backdoor(outcome.deployed.clone(), t);
            walk_greedy(&mdp, &outcome.encoding, &mut actor, cap)
        });
        (Some(clean), triggered)
    } else {
        (None, None)
    };
    Ok(ProtocolRun { mdp, outcome, optimal_moves, clean_walk, triggered_walk })
}

fn run_bound_verify(s: &Settings) -> Result<BoundRun, ScenarioError> {
    let mdp = demo_maze();
    let enc = StateEncoding::for_mdp(&mdp, s.encoding_dim)?;
    let tau = s.tau_fraction * enc.delta_sep();
    let policy = soft_optimal_policy(&mdp, &enc, s.epsilon, tau);
    let samples = sample_occupancy(
        &mdp,
        &enc,
        &policy,
        s.subspace_samples,
        seed::derive(s.seed, "bound-subspace", 0),
    );
    let subspace = safe_subspace(&samples, DimensionRule::TraceFraction(0.999))?;
    let partition = partition_orthogonal(&subspace, s.bound_components, None)?;
    let magnitude = s.magnitude_fraction * enc.delta_sep();
    let trigger =
        make_trigger(&subspace, &partition, enc.anchors(), ActivationRule::Always, magnitude)?;
    let components = decompose_trigger(&trigger, &partition, s.bound_agents)?;
    let mut checks = Vec::with_capacity(s.bound_seeds);
    for k in 0..s.bound_seeds {
        let trajectories = sample_histories(
            &mdp,
            &enc,
            &policy,
            s.bound_trajectories,
            s.bound_max_len,
            seed::derive(s.seed, "bound-traj", k as u64),
        );
        checks.push(bound_check(&policy, &trigger, &components, &trajectories)?);
    }
    let lipschitz_empirical =
        lipschitz_estimate(&policy, &enc.anchors(), 4000, seed::derive(s.seed, "bound-lip", 0));
    Ok(BoundRun {
        clean_value: value_exact(&mdp, &enc, &policy),
        lipschitz_empirical,
        checks,
        trigger,
        components,
        subspace,
    })
}

fn run_equivalence(s: &Settings) -> Result<EquivRun, ScenarioError> {
    let mut reports = Vec::new();
    for i in 0..s.equiv_bandit {
        let (mdp, enc, policies) = bandit_case(seed::derive(s.seed, "equiv-bandit", i as u64));
        reports.push(equivalence_gap(format!("bandit-{i}"), &mdp, &enc, &policies, true)?);
    }
    for i in 0..s.equiv_drift {
        let (mdp, enc, policies) = drift_chain_case(seed::derive(s.seed, "equiv-drift", i as u64));
        reports.push(equivalence_gap(format!("drift-{i}"), &mdp, &enc, &policies, true)?);
    }
    for i in 0..s.equiv_general {
        let (mdp, enc, policies) =
            general_grid_case(seed::derive(s.seed, "equiv-general", i as u64));
        reports.push(equivalence_gap(format!("grid-{i}"), &mdp, &enc, &policies, false)?);
    }
    for r in &reports {
        if r.policy_independent && r.gap > 1e-9 {
            return Err(ScenarioError::Invalid(format!(
                "case {}: policy-independent value gap {} exceeds 1e-9",
                r.label, r.gap
            )));
        }
    }
    Ok(EquivRun { reports })
}
