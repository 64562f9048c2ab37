//! Deterministic run artifacts: the metrics CSV, the manifest, serialized
//! policies, and trajectory renderings.
//!
//! Everything written here is a pure function of the resolved configuration
//! (wall-clock timing goes to its own file), so a rerun with the same seed
//! reproduces every artifact byte for byte regardless of parallelism.

use crate::render::render_walk;
use crate::scenario::{BoundRun, EquivRun, ProtocolRun, RunKind, ScenarioOutcome, Walk};
use decrl::env::StateEncoding;
use decrl::eval::BoundCheck;
use decrl::linalg;
use decrl::policy::to_text;
use decrl::trigger::TriggerFunction;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub const MANIFEST_HEADER: &str = "decrl-manifest v1";
pub const ARTIFACT_VERSION: u32 = 1;

/// Column layout of `metrics.csv` (empty fields where a metric does not
/// apply to the scenario or round).
pub const METRICS_HEADER: &str =
    "round,clean_return,triggered_return,max_attacker_divergence,bound_lhs_max,bound_rhs";

/// Column layout of `equivalence.csv`.
pub const EQUIV_HEADER: &str =
    "case,kind,policy_independent,value_of_aggregate,mean_of_values,gap";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// The scenario's CSV: per-round metrics for protocol runs, per-sub-seed
/// bound checks for the bound audit, and the gap table for the
/// equivalence study.
pub fn csv_text(outcome: &ScenarioOutcome) -> String {
    match &outcome.kind {
        RunKind::Protocol(run) => protocol_csv(run),
        RunKind::Bound(run) => bound_csv(run),
        RunKind::Equiv(run) => equivalence_csv(run),
    }
}

/// Name of the scenario's CSV file.
pub fn csv_name(outcome: &ScenarioOutcome) -> &'static str {
    match &outcome.kind {
        RunKind::Equiv(_) => "equivalence.csv",
        _ => "metrics.csv",
    }
}

fn protocol_csv(run: &ProtocolRun) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in &run.outcome.metrics {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.round,
            m.clean_return,
            opt(m.triggered_return.map(|t| t.mean)),
            m.max_attacker_divergence,
            opt(m.bound.as_ref().map(|b| b.lhs_max)),
            opt(m.bound.as_ref().map(|b| b.rhs)),
        )
        .unwrap();
    }
    out
}

fn bound_csv(run: &BoundRun) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (k, check) in run.checks.iter().enumerate() {
        writeln!(
            out,
            "{},{},,,{},{}",
            k, run.clean_value, check.lhs_max, check.rhs
        )
        .unwrap();
    }
    out
}

fn equivalence_csv(run: &EquivRun) -> String {
    let mut out = String::from(EQUIV_HEADER);
    out.push('\n');
    for r in &run.reports {
        let kind = r.label.split('-').next().unwrap_or("case");
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label, kind, r.policy_independent, r.value_of_aggregate, r.mean_of_values, r.gap
        )
        .unwrap();
    }
    out
}

fn walk_text(run: &ProtocolRun, walk: &Walk) -> String {
    let mut out = render_walk(&run.mdp, walk);
    out.push_str("cells:");
    for c in &walk.cells {
        write!(out, " ({},{})", c.x, c.y).unwrap();
    }
    out.push('\n');
    out
}

/// A history that activates the trigger, if any anchor cell does: the probe
/// used to report the decomposition residual.
fn activating_history(enc: &StateEncoding, trigger: &TriggerFunction) -> Option<Vec<Vec<f64>>> {
    let anchors = enc.anchors();
    for i in 0..anchors.len() {
        let h = vec![enc.encode(anchors.cell(i)).to_vec()];
        if trigger.active(&h) {
            return Some(h);
        }
    }
    None
}

fn decomposition_section(
    out: &mut String,
    enc: &StateEncoding,
    trigger: &TriggerFunction,
    components: &[TriggerFunction],
    subspace: Option<&decrl::trigger::SafeSubspace>,
    agents: usize,
) {
    out.push_str("\n[decomposition]\n");
    writeln!(out, "encoding_dim = {}", enc.dim()).unwrap();
    if let Some(sub) = subspace {
        writeln!(out, "safe_dim = {}", sub.safe_dim()).unwrap();
        writeln!(out, "trigger_dim = {}", sub.trigger_dim()).unwrap();
        writeln!(out, "max_clean_norm = {}", sub.max_clean_norm()).unwrap();
    }
    writeln!(out, "agents = {agents}").unwrap();
    writeln!(out, "components = {}", components.len()).unwrap();
    writeln!(out, "full_magnitude = {}", trigger.magnitude()).unwrap();
    writeln!(out, "full_budget = {}", trigger.budget()).unwrap();
    for (i, c) in components.iter().enumerate() {
        writeln!(
            out,
            "component {i}: rank = {}, magnitude = {}, budget = {}",
            c.range().rank(),
            c.magnitude(),
            c.budget()
        )
        .unwrap();
    }
    if let Some(h) = activating_history(enc, trigger) {
        let full = trigger.evaluate(&h);
        let mut mean = vec![0.0; full.len()];
        for c in components {
            for (dst, x) in mean.iter_mut().zip(c.evaluate(&h)) {
                *dst += x / agents as f64;
            }
        }
        let residual = linalg::norm2(&linalg::sub(&full, &mean));
        writeln!(out, "recomposition_residual = {residual}").unwrap();
    }
}

fn bound_line(out: &mut String, label: &str, check: &BoundCheck) {
    writeln!(
        out,
        "{label}: histories = {}, lhs_max = {}, lhs_mean = {}, lipschitz = {}, budget = {}, \
         rhs = {}, holds = {}",
        check.histories, check.lhs_max, check.lhs_mean, check.lipschitz, check.budget, check.rhs,
        check.holds
    )
    .unwrap();
}

/// The reproducible run manifest: header, resolved configuration, file
/// listing, and the decomposition/bound/equivalence reports that apply.
pub fn manifest_text(outcome: &ScenarioOutcome, files: &[String]) -> String {
    let mut out = String::new();
    writeln!(out, "{MANIFEST_HEADER}").unwrap();
    writeln!(out, "scenario = {}", outcome.resolved.scenario.name()).unwrap();
    writeln!(out, "seed = {}", outcome.resolved.settings.seed).unwrap();
    writeln!(out, "artifact_version = {ARTIFACT_VERSION}").unwrap();

    out.push_str("\n[config]\n");
    out.push_str(&outcome.resolved.dump());

    out.push_str("\n[files]\n");
    for f in files {
        out.push_str(f);
        out.push('\n');
    }

    match &outcome.kind {
        RunKind::Protocol(run) => {
            if let Some(trigger) = &run.outcome.trigger {
                decomposition_section(
                    &mut out,
                    &run.outcome.encoding,
                    trigger,
                    &run.outcome.components,
                    run.outcome.subspace.as_ref(),
                    outcome.resolved.settings.agents,
                );
            }
            let bounds: Vec<_> = run
                .outcome
                .metrics
                .iter()
                .filter_map(|m| m.bound.as_ref().map(|b| (m.round, b)))
                .collect();
            if !bounds.is_empty() {
                out.push_str("\n[bound]\n");
                for (round, check) in &bounds {
                    bound_line(&mut out, &format!("round {round}"), check);
                }
                let all = bounds.iter().all(|(_, b)| b.holds);
                writeln!(out, "all_hold = {all}").unwrap();
            }
        }
        RunKind::Bound(run) => {
            let enc = StateEncoding::for_mdp(&crate::scenario::demo_maze(), outcome.resolved.settings.encoding_dim)
                .expect("audited encoding rebuilds");
            decomposition_section(
                &mut out,
                &enc,
                &run.trigger,
                &run.components,
                Some(&run.subspace),
                outcome.resolved.settings.bound_agents,
            );
            out.push_str("\n[bound]\n");
            writeln!(out, "clean_value = {}", run.clean_value).unwrap();
            writeln!(out, "lipschitz_empirical = {}", run.lipschitz_empirical).unwrap();
            for (k, check) in run.checks.iter().enumerate() {
                bound_line(&mut out, &format!("seed {k}"), check);
            }
            writeln!(out, "total_histories = {}", run.total_histories()).unwrap();
            writeln!(out, "all_hold = {}", run.all_hold()).unwrap();
        }
        RunKind::Equiv(run) => {
            out.push_str("\n[equivalence]\n");
            let (pi, general): (Vec<_>, Vec<_>) =
                run.reports.iter().partition(|r| r.policy_independent);
            let max_gap = |rs: &[&decrl::eval::EquivalenceReport]| {
                rs.iter().map(|r| r.gap).fold(0.0f64, f64::max)
            };
            writeln!(out, "policy_independent_cases = {}", pi.len()).unwrap();
            writeln!(out, "policy_independent_max_gap = {}", max_gap(&pi)).unwrap();
            writeln!(out, "general_cases = {}", general.len()).unwrap();
            writeln!(out, "general_max_gap = {}", max_gap(&general)).unwrap();
        }
    }
    out
}

/// Every artifact of a finished run, written to `dir`.
#[derive(Debug)]
pub struct WrittenRun {
    pub dir: PathBuf,
    /// File names, sorted, as listed in the manifest.
    pub files: Vec<String>,
}

/// Write the full artifact set. All files are byte-deterministic for a
/// fixed configuration except `timing.txt`, which holds the measured
/// wall-clock time and nothing else.
pub fn write_run(
    outcome: &ScenarioOutcome,
    dir: &Path,
    wall_seconds: f64,
) -> io::Result<WrittenRun> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String)> = Vec::new();
    files.push((csv_name(outcome).to_string(), csv_text(outcome)));
    if let RunKind::Protocol(run) = &outcome.kind {
        files.push(("policy_consensus.txt".into(), to_text(&run.outcome.consensus)));
        files.push(("policy_deployed.txt".into(), to_text(&run.outcome.deployed)));
        if let Some(walk) = &run.clean_walk {
            files.push(("path_clean.txt".into(), walk_text(run, walk)));
        }
        if let Some(walk) = &run.triggered_walk {
            files.push(("path_triggered.txt".into(), walk_text(run, walk)));
        }
    }
    if let RunKind::Bound(_) = &outcome.kind {
        // the audited policy is reconstructible from the config; omit bulky dumps
    }
    files.push(("timing.txt".into(), format!("wall_clock_seconds = {wall_seconds:.3}\n")));

    let mut names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    names.push("manifest.txt".into());
    names.sort();
    files.push(("manifest.txt".into(), manifest_text(outcome, &names)));

    for (name, content) in &files {
        fs::write(dir.join(name), content)?;
    }
    Ok(WrittenRun { dir: dir.to_path_buf(), files: names })
}

/// One-line human summary for the terminal.
pub fn summary_line(outcome: &ScenarioOutcome) -> String {
    let r = &outcome.resolved;
    match &outcome.kind {
        RunKind::Protocol(run) => {
            let last = run.outcome.metrics.last().expect("at least one round");
            let mut s = format!(
                "{} seed {}: {} rounds, clean return {:.3}",
                r.scenario.name(),
                r.settings.seed,
                run.outcome.metrics.len(),
                last.clean_return
            );
            if let Some(t) = last.triggered_return {
                write!(s, ", triggered return {:.3} (se {:.3})", t.mean, t.std_error).unwrap();
            }
            if let Some(w) = &run.clean_walk {
                write!(s, ", clean path {} moves (optimal {})", w.moves(), run.optimal_moves)
                    .unwrap();
            }
            if let Some(w) = &run.triggered_walk {
                write!(s, ", triggered path {} moves", w.moves()).unwrap();
            }
            s
        }
        RunKind::Bound(run) => {
            let lhs_max = run.checks.iter().map(|c| c.lhs_max).fold(0.0f64, f64::max);
            let rhs = run.checks.first().map(|c| c.rhs).unwrap_or(0.0);
            format!(
                "{} seed {}: {} histories across {} sub-seeds, lhs_max {:.6} vs rhs {:.3}, \
                 all_hold = {}",
                r.scenario.name(),
                r.settings.seed,
                run.total_histories(),
                run.checks.len(),
                lhs_max,
                rhs,
                run.all_hold()
            )
        }
        RunKind::Equiv(run) => {
            let worst_pi = run
                .reports
                .iter()
                .filter(|x| x.policy_independent)
                .map(|x| x.gap)
                .fold(0.0f64, f64::max);
            format!(
                "{} seed {}: {} cases, policy-independent max gap {:.3e}",
                r.scenario.name(),
                r.settings.seed,
                run.reports.len(),
                worst_pi
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Resolved, Scenario};
    use crate::scenario::{default_settings, run_scenario};

    fn quick_equiv_outcome() -> ScenarioOutcome {
        let mut settings = default_settings(Scenario::AggregationEquiv);
        settings.equiv_bandit = 2;
        settings.equiv_drift = 1;
        settings.equiv_general = 1;
        run_scenario(&Resolved { scenario: Scenario::AggregationEquiv, settings }).unwrap()
    }

    #[test]
    fn equivalence_csv_has_the_documented_header_and_one_row_per_case() {
        let outcome = quick_equiv_outcome();
        let csv = csv_text(&outcome);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(EQUIV_HEADER));
        assert_eq!(lines.count(), 4);
        assert_eq!(csv_name(&outcome), "equivalence.csv");
    }

    #[test]
    fn manifest_lists_written_files_and_is_reproducible() {
        let outcome = quick_equiv_outcome();
        let dir = tempfile::tempdir().unwrap();
        let written = write_run(&outcome, dir.path(), 1.25).unwrap();
        for name in &written.files {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.starts_with(MANIFEST_HEADER));
        assert!(manifest.contains("\n[config]\n"));
        for name in &written.files {
            assert!(manifest.contains(name.as_str()), "{name} not listed");
        }
        // a second write with different timing changes nothing but timing.txt
        let manifest_again = manifest_text(&outcome, &written.files);
        assert_eq!(manifest, manifest_again);
        assert!(!manifest.contains("wall_clock"), "timing stays out of the manifest");
    }

    #[test]
    fn csv_floats_render_compactly_without_padding() {
        let outcome = quick_equiv_outcome();
        let csv = csv_text(&outcome);
        assert!(!csv.contains(' '), "CSV uses bare comma separation:\n{csv}");
    }
}
