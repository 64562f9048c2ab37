//! Multi-agent training rounds with knowledge sharing.
//!
//! Each round every agent produces a policy to share — benign agents by
//! training locally on the clean environment, attackers either by training
//! on a privately poisoned environment or by wrapping the current consensus
//! in a trigger-gated blend — and the shares are averaged pointwise and
//! distilled back to a common parametric form that everyone adopts
//! (synchronous sharing). Per-agent randomness is derived from the master
//! seed by (round, agent), so runs are reproducible and independent of
//! thread scheduling.

use crate::env::{poison_env, Action, Cell, EnvError, GridMdp, ObstacleSpec, StateEncoding};
use crate::eval::{bound_check, covertness, sample_histories, BoundCheck};
use crate::policy::{
    aggregate, committed_optimal_policy, distill, local_train, soft_optimal_policy,
    value_exact, value_triggered,
    DistillTarget, Policy, PolicyError, TrainConfig, ValueEstimate, ACTIONS,
    DEFAULT_TAU_FRACTION,
};
use crate::seed;
use crate::trigger::{
    build_attacker_policy, compose_backdoor, decompose_trigger, make_trigger,
    partition_orthogonal, safe_subspace, sample_occupancy, ActivationRule, DimensionRule,
    SafeSubspace, SubspacePartition, TriggerError, TriggerFunction,
    DEFAULT_GATE_BANDWIDTH_FRACTION, DEFAULT_GATE_FRACTION,
};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    /// Attacker indices, trigger components, and poison regions must line up.
    #[error("attacker/component mismatch: {0}")]
    AttackerComponentMismatch(String),
    #[error("invalid protocol config: {0}")]
    Invalid(String),
}

/// How compromised agents operate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// One attacker injects the whole trigger through its shared policy.
    TriggerSingle,
    /// Several attackers each inject one orthogonal trigger component.
    TriggerCooperative,
    /// Attackers train honestly, but on privately poisoned environments.
    PoisonedEnv,
}

/// Where the attackers' preferred behavior comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BadPolicySpec {
    /// Optimal plan for the environment with all target regions blocked
    /// (deterministic rows): the behavior the trigger should elicit.
    PoisonedOptimal,
    /// Push one fixed action everywhere.
    FixedAction(Action),
}

/// Full description of a coordinated attack.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub mode: AttackMode,
    /// Agent indices under attacker control (distinct, each `< agents`).
    pub attackers: Vec<usize>,
    /// Trigger magnitude as a fraction of the encoding's anchor separation.
    pub magnitude_fraction: f64,
    pub rule: ActivationRule,
    /// Gate threshold as a fraction of each component's own magnitude.
    pub gate_fraction: f64,
    /// Gate bandwidth as a fraction of the full trigger magnitude.
    pub gate_bandwidth_fraction: f64,
    /// Custom complement-partition boundaries (defaults to near-equal blocks).
    pub boundaries: Option<Vec<usize>>,
    pub d_rule: DimensionRule,
    /// Occupancy samples used to estimate the safe subspace.
    pub subspace_samples: usize,
    /// Obstacle regions with proximity radii. Trigger modes block them all at
    /// once to plan the bad policy; `PoisonedEnv` assigns one per attacker.
    pub target_regions: Vec<(BTreeSet<Cell>, usize)>,
    pub bad_policy: BadPolicySpec,
}

impl AttackSpec {
    /// Trigger-mode spec with library defaults; single- or multi-attacker is
    /// inferred from `attackers`.
    pub fn trigger(
        attackers: Vec<usize>,
        rule: ActivationRule,
        target_regions: Vec<(BTreeSet<Cell>, usize)>,
    ) -> Self {
        let mode = if attackers.len() == 1 {
            AttackMode::TriggerSingle
        } else {
            AttackMode::TriggerCooperative
        };
        AttackSpec {
            mode,
            attackers,
            magnitude_fraction: 2.0,
            rule,
            gate_fraction: DEFAULT_GATE_FRACTION,
            gate_bandwidth_fraction: DEFAULT_GATE_BANDWIDTH_FRACTION,
            boundaries: None,
            d_rule: DimensionRule::TraceFraction(0.999),
            subspace_samples: 4000,
            target_regions,
            bad_policy: BadPolicySpec::PoisonedOptimal,
        }
    }

    /// Environment-poisoning spec: one obstacle region per attacker.
    pub fn poisoned_env(
        attackers: Vec<usize>,
        target_regions: Vec<(BTreeSet<Cell>, usize)>,
    ) -> Self {
        AttackSpec {
            mode: AttackMode::PoisonedEnv,
            attackers,
            magnitude_fraction: 0.0,
            rule: ActivationRule::Never,
            gate_fraction: DEFAULT_GATE_FRACTION,
            gate_bandwidth_fraction: DEFAULT_GATE_BANDWIDTH_FRACTION,
            boundaries: None,
            d_rule: DimensionRule::TraceFraction(0.999),
            subspace_samples: 0,
            target_regions,
            bad_policy: BadPolicySpec::PoisonedOptimal,
        }
    }
}

/// Per-agent role for one protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentRole {
    Benign,
    /// Injects trigger component `component` through a gated blend.
    TriggerComponent { component: usize },
    /// Trains honestly on poisoned environment `env` (index into the spec's
    /// target regions).
    PoisonedEnv { env: usize },
}

/// Assign a role to every agent, validating the attack layout: attacker
/// indices must be distinct and in range; `TriggerSingle` takes exactly one
/// attacker; `PoisonedEnv` needs exactly one region per attacker.
pub fn place_attackers(
    agents: usize,
    spec: Option<&AttackSpec>,
) -> Result<Vec<AgentRole>, ProtocolError> {
    let mut roles = vec![AgentRole::Benign; agents];
    let Some(spec) = spec else {
        return Ok(roles);
    };
    let mut seen = BTreeSet::new();
    for &a in &spec.attackers {
        if a >= agents {
            return Err(ProtocolError::AttackerComponentMismatch(format!(
                "attacker index {a} out of range for {agents} agents"
            )));
        }
        if !seen.insert(a) {
            return Err(ProtocolError::AttackerComponentMismatch(format!(
                "attacker index {a} listed twice"
            )));
        }
    }
    match spec.mode {
        AttackMode::TriggerSingle => {
            if spec.attackers.len() != 1 {
                return Err(ProtocolError::AttackerComponentMismatch(format!(
                    "single-attacker mode needs exactly 1 attacker, got {}",
                    spec.attackers.len()
                )));
            }
        }
        AttackMode::TriggerCooperative => {
            if spec.attackers.is_empty() {
                return Err(ProtocolError::AttackerComponentMismatch(
                    "cooperative mode needs at least one attacker".into(),
                ));
            }
        }
        AttackMode::PoisonedEnv => {
            if spec.target_regions.len() != spec.attackers.len() {
                return Err(ProtocolError::AttackerComponentMismatch(format!(
                    "{} attackers but {} poison regions",
                    spec.attackers.len(),
                    spec.target_regions.len()
                )));
            }
        }
    }
    for (k, &a) in spec.attackers.iter().enumerate() {
        roles[a] = match spec.mode {
            AttackMode::PoisonedEnv => AgentRole::PoisonedEnv { env: k },
            _ => AgentRole::TriggerComponent { component: k },
        };
    }
    Ok(roles)
}

/// Knobs for one protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub agents: usize,
    pub rounds: usize,
    /// Per-round local-training budget; the `seed` field is ignored (seeds
    /// are derived per (round, agent) from `master_seed`).
    pub train: TrainConfig,
    pub encoding_dim: usize,
    /// Smoothing temperature as a fraction of the anchor separation.
    pub tau_fraction: f64,
    pub master_seed: u64,
    /// Monte-Carlo episodes for the per-round triggered return (0 skips it).
    pub eval_episodes: usize,
    pub eval_max_steps: usize,
    /// Clean occupancy probes for the attacker-divergence metric (0 skips).
    pub covertness_states: usize,
    /// Clean trajectories for a per-round approximation-bound check (0 skips).
    pub bound_histories: usize,
    /// Train agents on worker threads; results are identical either way.
    pub parallel: bool,
    pub attack: Option<AttackSpec>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            agents: 2,
            rounds: 3,
            train: TrainConfig::default(),
            encoding_dim: 8,
            tau_fraction: DEFAULT_TAU_FRACTION,
            master_seed: 0,
            eval_episodes: 200,
            eval_max_steps: 200,
            covertness_states: 400,
            bound_histories: 0,
            parallel: true,
            attack: None,
        }
    }
}

/// What one round of the protocol produced.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    /// Exact expected return of the post-round consensus on the clean MDP.
    pub clean_return: f64,
    /// Monte-Carlo return of the consensus with the full trigger injected
    /// into its perception (`None` without a trigger or with eval disabled).
    pub triggered_return: Option<ValueEstimate>,
    /// Worst attacker share's mean total-variation distance from the benign
    /// shares' pointwise mean, probed on clean occupancy states.
    pub max_attacker_divergence: f64,
    /// Aggregation-approximation bound check on clean trajectories.
    pub bound: Option<BoundCheck>,
}

/// Trigger machinery prepared once before round 0.
#[derive(Debug, Clone)]
struct AttackKit {
    subspace: SafeSubspace,
    partition: SubspacePartition,
    full: TriggerFunction,
    /// One component per attacker, in `spec.attackers` order.
    components: Vec<TriggerFunction>,
    bad: Policy,
}

/// ε for the canonical planned policy used as the covertness reference and
/// as the trigger-mode attackers' blend base; matches the default training
/// exploration so the reference looks like a typical converged share.
const PLANNED_EPSILON: f64 = 0.1;

/// A running protocol instance; drive it with [`Protocol::run_round`].
#[derive(Debug)]
pub struct Protocol {
    mdp: GridMdp,
    enc: StateEncoding,
    cfg: ProtocolConfig,
    roles: Vec<AgentRole>,
    tau: f64,
    consensus: Policy,
    deployed: Policy,
    shared: Vec<Policy>,
    round: usize,
    kit: Option<AttackKit>,
    poisoned: Vec<GridMdp>,
    /// Canonical ε-soft optimal policy: covertness reference, clean-occupancy
    /// probe distribution, and the trigger-mode attackers' blend base.
    planned: Policy,
}

impl Protocol {
    pub fn new(mdp: GridMdp, cfg: ProtocolConfig) -> Result<Self, ProtocolError> {
        if cfg.agents == 0 {
            return Err(ProtocolError::Invalid("need at least one agent".into()));
        }
        if !(cfg.tau_fraction > 0.0) {
            return Err(ProtocolError::Invalid(format!(
                "tau fraction {} must be positive",
                cfg.tau_fraction
            )));
        }
        let roles = place_attackers(cfg.agents, cfg.attack.as_ref())?;
        let enc = StateEncoding::for_mdp(&mdp, cfg.encoding_dim)?;
        let tau = cfg.tau_fraction * enc.delta_sep();
        let consensus = Policy::uniform_smoothed(enc.anchors(), tau);
        let planned = soft_optimal_policy(&mdp, &enc, PLANNED_EPSILON, tau);

        let mut kit = None;
        let mut poisoned = Vec::new();
        if let Some(spec) = &cfg.attack {
            match spec.mode {
                AttackMode::PoisonedEnv => {
                    for (region, radius) in &spec.target_regions {
                        poisoned.push(poison_env(
                            &mdp,
                            ObstacleSpec::new(region.clone(), *radius),
                        )?);
                    }
                }
                _ => kit = Some(build_attack_kit(&mdp, &enc, tau, &planned, &cfg, spec)?),
            }
        }
        Ok(Protocol {
            mdp,
            enc,
            cfg,
            roles,
            tau,
            deployed: consensus.clone(),
            consensus,
            shared: Vec::new(),
            round: 0,
            kit,
            poisoned,
            planned,
        })
    }

    pub fn encoding(&self) -> &StateEncoding {
        &self.enc
    }

    pub fn consensus(&self) -> &Policy {
        &self.consensus
    }

    /// The exact pointwise average of the latest shares — the function the
    /// collective actually serves, gates and all. The distilled [`consensus`]
    /// matches it on every clean anchor state but, being fitted only there,
    /// does not carry behavior that lives off the clean manifold.
    ///
    /// [`consensus`]: Protocol::consensus
    pub fn deployed(&self) -> &Policy {
        &self.deployed
    }

    /// Policies shared in the most recent round (empty before round 0).
    pub fn shared_policies(&self) -> &[Policy] {
        &self.shared
    }

    pub fn roles(&self) -> &[AgentRole] {
        &self.roles
    }

    pub fn trigger(&self) -> Option<&TriggerFunction> {
        self.kit.as_ref().map(|k| &k.full)
    }

    pub fn components(&self) -> &[TriggerFunction] {
        self.kit.as_ref().map_or(&[], |k| &k.components)
    }

    pub fn subspace(&self) -> Option<&SafeSubspace> {
        self.kit.as_ref().map(|k| &k.subspace)
    }

    pub fn partition(&self) -> Option<&SubspacePartition> {
        self.kit.as_ref().map(|k| &k.partition)
    }

    /// One full round: local phase, pointwise aggregation, distillation,
    /// synchronous adoption, metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics, ProtocolError> {
        let t = self.round;
        let shares = self.local_phase(t)?;
        let agg = aggregate(&shares)?;
        let anchors = self.enc.anchors();
        let distilled = distill(&agg, &anchors, DistillTarget::Smoothed { tau: self.tau })?;

        // The aggregate and its distillation agree on clean anchor states, so
        // the clean return can use either; triggered behavior lives off the
        // clean manifold and must be measured on the aggregate itself.
        let clean_return = value_exact(&self.mdp, &self.enc, &distilled);
        let triggered_return = match (&self.kit, self.cfg.eval_episodes) {
            (Some(kit), e) if e > 0 => {
                let mut composed = compose_backdoor(agg.clone(), kit.full.clone());
                Some(value_triggered(
                    &self.mdp,
                    &self.enc,
                    &mut composed,
                    e,
                    self.cfg.eval_max_steps,
                    seed::derive(self.cfg.master_seed, "eval-triggered", t as u64),
                ))
            }
            _ => None,
        };
        let max_attacker_divergence = self.attacker_divergence(t, &shares);
        let bound = match (&self.kit, self.cfg.bound_histories) {
            (Some(kit), n) if n > 0 => {
                let trajs = sample_histories(
                    &self.mdp,
                    &self.enc,
                    &distilled,
                    n,
                    self.cfg.eval_max_steps,
                    seed::derive(self.cfg.master_seed, "bound-traj", t as u64),
                );
                Some(bound_check(&agg, &kit.full, &kit.components, &trajs)?)
            }
            _ => None,
        };

        self.consensus = distilled;
        self.deployed = agg;
        self.shared = shares;
        self.round += 1;
        Ok(RoundMetrics {
            round: t,
            clean_return,
            triggered_return,
            max_attacker_divergence,
            bound,
        })
    }

    /// Produce every agent's share for round `t`.
    fn local_phase(&self, t: usize) -> Result<Vec<Policy>, ProtocolError> {
        let n = self.cfg.agents;
        // (agent, training environment) pairs that genuinely train this round
        let jobs: Vec<(usize, &GridMdp)> = self
            .roles
            .iter()
            .enumerate()
            .filter_map(|(i, role)| match role {
                AgentRole::Benign => Some((i, &self.mdp)),
                AgentRole::PoisonedEnv { env } => Some((i, &self.poisoned[*env])),
                AgentRole::TriggerComponent { .. } => None,
            })
            .collect();
        let cfg_for = |i: usize| TrainConfig {
            seed: seed::derive(self.cfg.master_seed, "train", (t * n + i) as u64),
            ..self.cfg.train.clone()
        };

        let mut shares: Vec<Option<Policy>> = vec![None; n];
        if self.cfg.parallel && jobs.len() > 1 {
            let consensus = &self.consensus;
            let enc = &self.enc;
            let results: Vec<(usize, Result<Policy, PolicyError>)> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = jobs
                        .iter()
                        .map(|&(i, mdp)| {
                            let cfg = cfg_for(i);
                            scope.spawn(move || (i, local_train(consensus, mdp, enc, &cfg)))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("trainer panicked")).collect()
                });
            for (i, r) in results {
                shares[i] = Some(r?);
            }
        } else {
            for &(i, mdp) in &jobs {
                shares[i] = Some(local_train(&self.consensus, mdp, &self.enc, &cfg_for(i))?);
            }
        }

        if let Some(kit) = &self.kit {
            let spec = self.cfg.attack.as_ref().expect("kit implies attack");
            let sigma = spec.gate_bandwidth_fraction * kit.full.magnitude();
            for (i, role) in self.roles.iter().enumerate() {
                if let AgentRole::TriggerComponent { component } = role {
                    // The blend's clean face is the attacker's privately
                    // planned near-optimal policy: deterministic given the
                    // environment, so the share carries no training noise
                    // that could make it stand out.
                    shares[i] = Some(build_attacker_policy(
                        self.planned.clone(),
                        kit.bad.clone(),
                        &kit.components[*component],
                        spec.gate_fraction,
                        sigma,
                    ));
                }
            }
        }
        Ok(shares
            .into_iter()
            .map(|s| s.expect("every agent produced a share"))
            .collect())
    }

    /// Worst attacker share's visibility: mean total-variation distance from
    /// the canonical near-optimal policy, probed on that policy's own clean
    /// occupancy. The canonical reference keeps the metric free of per-seed
    /// training noise, so attack flavors can be compared across runs.
    fn attacker_divergence(&self, t: usize, shares: &[Policy]) -> f64 {
        if self.cfg.covertness_states == 0 {
            return 0.0;
        }
        let attackers: Vec<&Policy> = self
            .roles
            .iter()
            .zip(shares)
            .filter(|(r, _)| !matches!(r, AgentRole::Benign))
            .map(|(_, s)| s)
            .collect();
        if attackers.is_empty() {
            return 0.0;
        }
        let states = sample_occupancy(
            &self.mdp,
            &self.enc,
            &self.planned,
            self.cfg.covertness_states,
            seed::derive(self.cfg.master_seed, "covert-probe", t as u64),
        );
        attackers
            .iter()
            .map(|a| covertness(&self.planned, a, &states))
            .fold(0.0, f64::max)
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct ProtocolOutcome {
    pub metrics: Vec<RoundMetrics>,
    /// Final distilled consensus (what every agent holds after the last round).
    pub consensus: Policy,
    /// Final exact pointwise average of the shares — the deployed function,
    /// including any trigger gates that distillation cannot see.
    pub deployed: Policy,
    /// Shares from the final round, one per agent.
    pub shared: Vec<Policy>,
    pub encoding: StateEncoding,
    pub roles: Vec<AgentRole>,
    pub trigger: Option<TriggerFunction>,
    pub components: Vec<TriggerFunction>,
    pub subspace: Option<SafeSubspace>,
}

/// Run the whole protocol: `cfg.rounds` rounds from a uniform consensus.
pub fn run_protocol(mdp: &GridMdp, cfg: ProtocolConfig) -> Result<ProtocolOutcome, ProtocolError> {
    let mut p = Protocol::new(mdp.clone(), cfg)?;
    let mut metrics = Vec::with_capacity(p.cfg.rounds);
    for _ in 0..p.cfg.rounds {
        metrics.push(p.run_round()?);
    }
    Ok(ProtocolOutcome {
        metrics,
        consensus: p.consensus,
        deployed: p.deployed,
        shared: p.shared,
        encoding: p.enc,
        roles: p.roles,
        trigger: p.kit.as_ref().map(|k| k.full.clone()),
        components: p.kit.as_ref().map_or(Vec::new(), |k| k.components.clone()),
        subspace: p.kit.map(|k| k.subspace),
    })
}

/// Build the trigger machinery for the trigger-based modes: estimate the
/// safe subspace from clean occupancy samples of a privately planned
/// near-optimal policy, partition the complement, build and decompose the
/// trigger, and plan the behavior the trigger should elicit.
fn build_attack_kit(
    mdp: &GridMdp,
    enc: &StateEncoding,
    tau: f64,
    planned: &Policy,
    cfg: &ProtocolConfig,
    spec: &AttackSpec,
) -> Result<AttackKit, ProtocolError> {
    if !(spec.magnitude_fraction > 0.0) {
        return Err(ProtocolError::Invalid(format!(
            "trigger magnitude fraction {} must be positive",
            spec.magnitude_fraction
        )));
    }
    if spec.subspace_samples == 0 {
        return Err(ProtocolError::Invalid(
            "trigger modes need subspace samples".into(),
        ));
    }
    let samples = sample_occupancy(
        mdp,
        enc,
        planned,
        spec.subspace_samples,
        seed::derive(cfg.master_seed, "subspace", 0),
    );
    let subspace = safe_subspace(&samples, spec.d_rule)?;
    let partition =
        partition_orthogonal(&subspace, spec.attackers.len(), spec.boundaries.as_deref())?;
    let magnitude = spec.magnitude_fraction * enc.delta_sep();
    let full = make_trigger(&subspace, &partition, enc.anchors(), spec.rule.clone(), magnitude)?;
    let components = decompose_trigger(&full, &partition, cfg.agents)?;
    let bad = match &spec.bad_policy {
        BadPolicySpec::PoisonedOptimal => {
            if spec.target_regions.is_empty() {
                return Err(ProtocolError::Invalid(
                    "poisoned-optimal bad policy needs target regions".into(),
                ));
            }
            let mut poisoned = mdp.clone();
            for (region, radius) in &spec.target_regions {
                poisoned = poison_env(&poisoned, ObstacleSpec::new(region.clone(), *radius))?;
            }
            committed_optimal_policy(&poisoned, enc, tau)
        }
        BadPolicySpec::FixedAction(a) => {
            let anchors = enc.anchors();
            let rows = vec![one_hot(a.index()); anchors.len()];
            Policy::smoothed(anchors, rows, tau)
        }
    };
    Ok(AttackKit { subspace, partition, full, components, bad })
}

fn one_hot(index: usize) -> [f64; ACTIONS] {
    let mut row = [0.0; ACTIONS];
    row[index] = 1.0;
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_maze;
    use crate::policy::{lipschitz_analytic, to_text};

    /// Small maze: optimal route runs straight up through the gap; a detour
    /// around the right end of the wall exists for poisoned planners.
    const MAZE: &str = "\
.....G.....
...........
####..####.
...........
.....S.....";

    fn corridor_cells() -> BTreeSet<Cell> {
        // the wall gap at (4,2),(5,2) — y counted from the bottom row
        [Cell::new(4, 2), Cell::new(5, 2)].into_iter().collect()
    }

    fn quick_cfg() -> ProtocolConfig {
        ProtocolConfig {
            agents: 2,
            rounds: 2,
            train: TrainConfig { steps: 6000, ..TrainConfig::default() },
            eval_episodes: 60,
            eval_max_steps: 120,
            covertness_states: 150,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn benign_protocol_converges_toward_optimal() {
        let mdp = make_maze(MAZE).unwrap();
        let cfg = ProtocolConfig { rounds: 3, ..quick_cfg() };
        let out = run_protocol(&mdp, cfg).unwrap();
        let opt = crate::env::value_iteration(&mdp, 1e-10).start_value(&mdp);
        let last = out.metrics.last().unwrap();
        assert!(last.clean_return > opt * 1.4, "got {} vs optimal {opt}", last.clean_return);
        // local training restarts from scratch each round, so rounds hover at
        // the same quality rather than improving monotonically
        assert!(
            last.clean_return > out.metrics[0].clean_return - 0.5,
            "quality should not degrade across rounds: {} then {}",
            out.metrics[0].clean_return,
            last.clean_return
        );
        assert_eq!(last.max_attacker_divergence, 0.0);
        assert!(last.triggered_return.is_none());
        assert!(out.trigger.is_none());
    }

    #[test]
    fn poisoned_env_attackers_drag_consensus_off_the_short_route() {
        let mdp = make_maze(MAZE).unwrap();
        let region = corridor_cells();
        let mut cfg = quick_cfg();
        cfg.agents = 3;
        cfg.rounds = 3;
        cfg.attack = Some(AttackSpec::poisoned_env(
            vec![1, 2],
            vec![(region.clone(), 1), (region, 1)],
        ));
        let out = run_protocol(&mdp, cfg.clone()).unwrap();

        cfg.attack = None;
        let clean = run_protocol(&mdp, cfg).unwrap();
        let poisoned_v = out.metrics.last().unwrap().clean_return;
        let clean_v = clean.metrics.last().unwrap().clean_return;
        assert!(
            poisoned_v < clean_v - 0.5,
            "2/3 poisoned mass should visibly cost return: {poisoned_v} vs {clean_v}"
        );
        // Honest-training attackers are *not* covert: their shares disagree
        // with the canonical near-optimal reference on the approach cells the
        // detour rewrites — orders of magnitude above a gated share's leak.
        assert!(out.metrics.last().unwrap().max_attacker_divergence > 0.1);
    }

    #[test]
    fn trigger_attack_keeps_clean_performance_and_flips_triggered() {
        let mdp = make_maze(MAZE).unwrap();
        let mut cfg = quick_cfg();
        cfg.agents = 2;
        cfg.rounds = 4;
        cfg.train.steps = 8000;
        cfg.bound_histories = 20;
        cfg.attack = Some(AttackSpec::trigger(
            vec![1],
            ActivationRule::Always,
            vec![(corridor_cells(), 1)],
        ));
        let out = run_protocol(&mdp, cfg).unwrap();
        let last = out.metrics.last().unwrap();
        let opt = crate::env::value_iteration(&mdp, 1e-10).start_value(&mdp);
        assert!(
            last.clean_return > opt * 1.6,
            "clean behavior should stay near-optimal: {} vs {opt}",
            last.clean_return
        );
        let trig = last.triggered_return.unwrap();
        assert!(
            trig.mean < last.clean_return - 1.0,
            "triggered return {} should drop below clean {}",
            trig.mean,
            last.clean_return
        );
        // clean-state gate leak is e^{−6.25} ≈ 2e-3 of the bad/base gap
        assert!(
            last.max_attacker_divergence < 0.01,
            "gated share should look benign, divergence {}",
            last.max_attacker_divergence
        );
        let bound = last.bound.unwrap();
        assert!(bound.holds, "lhs {} vs rhs {}", bound.lhs_max, bound.rhs);
        // the consensus is a smoothed-tabular distillation: Lipschitz exists
        assert!(lipschitz_analytic(&out.consensus).is_ok());
    }

    #[test]
    fn runs_are_reproducible_and_thread_invariant() {
        let mdp = make_maze(MAZE).unwrap();
        let mut cfg = quick_cfg();
        cfg.agents = 3;
        cfg.attack = Some(AttackSpec::trigger(
            vec![2],
            ActivationRule::Always,
            vec![(corridor_cells(), 1)],
        ));
        let a = run_protocol(&mdp, cfg.clone()).unwrap();
        let b = run_protocol(&mdp, cfg.clone()).unwrap();
        assert_eq!(to_text(&a.consensus), to_text(&b.consensus));
        assert_eq!(
            a.metrics.last().unwrap().clean_return,
            b.metrics.last().unwrap().clean_return
        );
        cfg.parallel = false;
        let c = run_protocol(&mdp, cfg).unwrap();
        assert_eq!(to_text(&a.consensus), to_text(&c.consensus));
    }

    #[test]
    fn evaluation_settings_do_not_leak_into_training() {
        let mdp = make_maze(MAZE).unwrap();
        let mut cfg = quick_cfg();
        let a = run_protocol(&mdp, cfg.clone()).unwrap();
        cfg.eval_episodes = 17;
        cfg.covertness_states = 31;
        let b = run_protocol(&mdp, cfg).unwrap();
        assert_eq!(to_text(&a.consensus), to_text(&b.consensus));
    }

    #[test]
    fn synchrony_every_agent_adopts_the_same_consensus() {
        let mdp = make_maze(MAZE).unwrap();
        let mut p = Protocol::new(mdp, quick_cfg()).unwrap();
        p.run_round().unwrap();
        // sharing is synchronous by construction: there is a single consensus
        // object; verify it is a proper distribution everywhere
        let consensus = p.consensus().clone();
        for i in 0..consensus.anchors().unwrap().len() {
            let v = consensus.anchors().unwrap().point(i).to_vec();
            let probs = consensus.act(&v);
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_single_agent_single_round_works() {
        let mdp = make_maze(MAZE).unwrap();
        let cfg = ProtocolConfig {
            agents: 1,
            rounds: 1,
            covertness_states: 0,
            eval_episodes: 0,
            ..quick_cfg()
        };
        let out = run_protocol(&mdp, cfg).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.shared.len(), 1);
        assert!(out.metrics[0].clean_return.is_finite());
    }

    #[test]
    fn misaligned_attack_layouts_are_rejected() {
        let spec_dup = AttackSpec::trigger(
            vec![1, 1],
            ActivationRule::Always,
            vec![(corridor_cells(), 1)],
        );
        assert!(matches!(
            place_attackers(3, Some(&spec_dup)).unwrap_err(),
            ProtocolError::AttackerComponentMismatch(_)
        ));
        let spec_oob =
            AttackSpec::trigger(vec![5], ActivationRule::Always, vec![(corridor_cells(), 1)]);
        assert!(matches!(
            place_attackers(3, Some(&spec_oob)).unwrap_err(),
            ProtocolError::AttackerComponentMismatch(_)
        ));
        let spec_regions = AttackSpec::poisoned_env(vec![0, 1], vec![(corridor_cells(), 1)]);
        assert!(matches!(
            place_attackers(3, Some(&spec_regions)).unwrap_err(),
            ProtocolError::AttackerComponentMismatch(_)
        ));
        let mut single = AttackSpec::trigger(
            vec![0, 1],
            ActivationRule::Always,
            vec![(corridor_cells(), 1)],
        );
        single.mode = AttackMode::TriggerSingle;
        assert!(matches!(
            place_attackers(3, Some(&single)).unwrap_err(),
            ProtocolError::AttackerComponentMismatch(_)
        ));
        let roles = place_attackers(3, None).unwrap();
        assert!(roles.iter().all(|r| *r == AgentRole::Benign));
    }
}
