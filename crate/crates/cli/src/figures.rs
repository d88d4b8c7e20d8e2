//! Plot-ready CSVs, one per figure family, built from saved artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bandres::environment::ScenarioMode;
use bandres::training::{EvalReport, POSITION_BINS};
use serde::Deserialize;

use crate::commands::{read_file, write_file, CURVES, FIGURES, REPORTS};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Deserialize)]
struct CurveRow {
    episode: usize,
    reward: f64,
    cost: f64,
    reward_ma20: f64,
    cost_ma20: f64,
}

fn read_curves(dir: &Path, fallback: &Path) -> Result<Vec<(String, Vec<CurveRow>)>, CliError> {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if paths.is_empty() {
        return Err(CliError::MissingArtifact(fallback.to_path_buf()));
    }
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let raw = read_file(&p)?;
        let mut rows = Vec::new();
        for (i, rec) in csv::Reader::from_reader(raw.as_bytes()).deserialize().enumerate() {
            let row: CurveRow =
                rec.map_err(|e| CliError::Input { path: p.clone(), line: i + 2, message: e.to_string() })?;
            rows.push(row);
        }
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, rows));
    }
    Ok(out)
}

fn read_reports(dir: &Path, preferred: ScenarioMode) -> Result<Vec<EvalReport>, CliError> {
    let mut out = Vec::new();
    for s in ScenarioMode::ALL {
        let p = dir.join(format!("{s}_report.json"));
        if !p.exists() {
            continue;
        }
        let raw = read_file(&p)?;
        let report: EvalReport = serde_json::from_str(&raw)
            .map_err(|e| CliError::Input { path: p.clone(), line: e.line(), message: e.to_string() })?;
        out.push(report);
    }
    if out.is_empty() {
        return Err(CliError::MissingArtifact(dir.join(format!("{preferred}_report.json"))));
    }
    Ok(out)
}

pub fn cmd_figures(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let run = cfg.run_dir();
    let curves = read_curves(&run.join(CURVES), &run.join(CURVES).join(format!("{}.csv", cfg.agent.agent)))?;
    let reports = read_reports(&run.join(REPORTS), cfg.episode.scenario_mode)?;

    let mut fig2 = String::from("agent,episode,reward,cost,reward_ma20,cost_ma20\n");
    for (agent, rows) in &curves {
        for r in rows {
            let _ = writeln!(fig2, "{agent},{},{},{},{},{}", r.episode, r.reward, r.cost, r.reward_ma20, r.cost_ma20);
        }
    }

    let mut fig3 = String::from("scenario,policy,episode,cost,cumulative_cost\n");
    let mut fig4 = String::from("scenario,policy,episodes,mean_cost\n");
    let mut fig5 = String::from("scenario,policy,updates_per_segment,mean_bandwidth,mean_cancellation,mean_cost\n");
    let mut fig7 = String::from("scenario,policy,histogram,bin,lower,upper,count\n");
    for r in &reports {
        let s = r.scenario;
        for p in &r.policies {
            for (i, c) in p.cumulative_costs().iter().enumerate() {
                let _ = writeln!(fig3, "{s},{},{i},{},{c}", p.policy, p.costs[i]);
            }
            let _ = writeln!(fig4, "{s},{},{},{}", p.policy, r.episodes, p.mean_cost());
            let _ = writeln!(
                fig5,
                "{s},{},{},{},{},{}",
                p.policy,
                p.updates_per_segment(),
                p.mean_bandwidth(),
                p.mean_cancellation(),
                p.mean_cost()
            );
            for (b, n) in p.update_position_hist.iter().enumerate() {
                let lo = b as f64 / POSITION_BINS as f64;
                let hi = (b + 1) as f64 / POSITION_BINS as f64;
                let _ = writeln!(fig7, "{s},{},update_position,{b},{lo},{hi},{n}", p.policy);
            }
            for (b, n) in p.update_count_hist.iter().enumerate() {
                let _ = writeln!(fig7, "{s},{},updates_per_segment,{b},{b},{},{n}", p.policy, b + 1);
            }
        }
    }

    // The trace comes from the configured scenario when present.
    let trace_report = reports.iter().find(|r| r.scenario == cfg.episode.scenario_mode).unwrap_or(&reports[0]);
    let m = trace_report.policies.iter().find_map(|p| p.trace.first()).map_or(0, |t| t.available.len());
    let mut fig6 = String::from("timestep,paid_price");
    for j in 0..m {
        let _ = write!(fig6, ",mno_{j}");
    }
    fig6.push_str(",segment,policy,scenario\n");
    for p in &trace_report.policies {
        for t in &p.trace {
            let _ = write!(fig6, "{},{}", t.timestep, t.paid_price);
            for a in &t.available {
                let _ = write!(fig6, ",{a}");
            }
            let _ = writeln!(fig6, ",{},{},{}", t.segment, p.policy, trace_report.scenario);
        }
    }

    let dir = run.join(FIGURES);
    let files = [
        ("fig2_learning_curves.csv", fig2),
        ("fig3_cumulative_costs.csv", fig3),
        ("fig4_average_costs.csv", fig4),
        ("fig5_updates_and_cost_split.csv", fig5),
        ("fig6_price_trace.csv", fig6),
        ("fig7_update_histograms.csv", fig7),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = dir.join(name);
        write_file(&p, &body)?;
        written.push(p);
    }
    Ok(written)
}
