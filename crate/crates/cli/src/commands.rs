use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bandres::agents::AgentKind;
use bandres::environment::ScenarioMode;
use bandres::price_data::{
    build_price_book, filter_by_time, parse_spot_history, synth_price_book, BookConfig, PriceBook,
};
use bandres::qnet::{Checkpoint, QNetwork};
use bandres::scalar::Scalar;
use bandres::training::{
    brute_force_oracle, evaluate, evaluation_seed, reproduce_benchmarks, run_episode, train, BenchmarkBundle,
    EvalReport, Policy,
};
use serde::Serialize;

use crate::config::{parse_stream, parse_time, RunConfig};
use crate::error::CliError;

pub const CHECKPOINTS: &str = "checkpoints";
pub const CURVES: &str = "curves";
pub const REPORTS: &str = "reports";
pub const FIGURES: &str = "figures";
pub const DATA: &str = "data";

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    match std::fs::read_to_string(path) {
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::MissingArtifact(path.to_path_buf())),
        other => other.map_err(|e| CliError::io(path, e)),
    }
}

#[derive(Debug, Serialize)]
pub struct BookStats {
    pub source: String,
    pub records: usize,
    pub mno_count: usize,
    pub streams: Vec<String>,
    pub total_steps: usize,
    pub timestep_seconds: u32,
    pub p_min: f64,
    pub p_max: f64,
}

/// Parse, filter and resample a spot-price history into a book.
pub fn book_from_history(cfg: &RunConfig, path: &Path) -> Result<(PriceBook, usize), CliError> {
    let raw = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let records = parse_spot_history(&raw).map_err(|e| CliError::in_file(path, e))?;
    if records.is_empty() {
        return Err(CliError::Input { path: path.to_path_buf(), line: 1, message: "no records after the header".into() });
    }
    let from = cfg.data.from.as_deref().map(parse_time).transpose()?;
    let to = cfg.data.to.as_deref().map(parse_time).transpose()?;
    let kept = filter_by_time(&records, from, to);
    if kept.is_empty() {
        return Err(CliError::Coverage {
            path: path.to_path_buf(),
            message: format!(
                "no records in [{}, {})",
                cfg.data.from.as_deref().unwrap_or("-inf"),
                cfg.data.to.as_deref().unwrap_or("+inf")
            ),
        });
    }
    let streams = if cfg.data.streams.is_empty() {
        let all: BTreeSet<_> = kept.iter().map(|r| r.stream()).collect();
        if all.len() < cfg.episode.mno_count {
            return Err(CliError::Coverage {
                path: path.to_path_buf(),
                message: format!("{} streams found, {} operators configured", all.len(), cfg.episode.mno_count),
            });
        }
        all.into_iter().take(cfg.episode.mno_count).collect()
    } else {
        cfg.data.streams.iter().map(|s| parse_stream(s)).collect::<Result<Vec<_>, _>>()?
    };
    let book_cfg = BookConfig {
        timestep_seconds: cfg.data.timestep_seconds.unwrap_or(cfg.episode.timestep_seconds),
        streams,
        ..BookConfig::default()
    };
    let book = build_price_book(&kept, &book_cfg).map_err(|e| CliError::in_file(path, e))?;
    Ok((book, kept.len()))
}

/// The book every simulation command runs on.
pub fn load_book(cfg: &RunConfig) -> Result<PriceBook, CliError> {
    if let Some(path) = &cfg.data.price_book {
        let raw = read_file(path)?;
        return serde_json::from_str(&raw).map_err(|e| CliError::Input {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        });
    }
    if let Some(path) = &cfg.data.spot_history {
        return Ok(book_from_history(cfg, path)?.0);
    }
    Ok(synth_price_book(cfg.data.synthetic_seed, &cfg.synthetic)?)
}

fn stats_of(book: &PriceBook, source: String, records: usize) -> BookStats {
    BookStats {
        source,
        records,
        mno_count: book.mno_count(),
        streams: book.streams().to_vec(),
        total_steps: book.total_steps(),
        timestep_seconds: book.timestep_seconds(),
        p_min: book.p_min(),
        p_max: book.p_max(),
    }
}

pub fn cmd_ingest(cfg: &RunConfig, input: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let (book, stats) = match input.or(cfg.data.spot_history.as_deref()) {
        Some(path) => {
            let (book, n) = book_from_history(cfg, path)?;
            let stats = stats_of(&book, path.display().to_string(), n);
            (book, stats)
        }
        None => {
            let book = synth_price_book(cfg.data.synthetic_seed, &cfg.synthetic)?;
            let stats = stats_of(&book, format!("synthetic seed {}", cfg.data.synthetic_seed), 0);
            (book, stats)
        }
    };
    let dir = cfg.run_dir().join(DATA);
    let book_path = dir.join("price_book.json");
    let stats_path = dir.join("price_book.stats.json");
    write_file(&book_path, &(serde_json::to_string(&book).map_err(bandres::error::Error::from)? + "\n"))?;
    write_file(&stats_path, &(serde_json::to_string_pretty(&stats).map_err(bandres::error::Error::from)? + "\n"))?;
    Ok(vec![book_path, stats_path])
}

pub fn cmd_train<S: Scalar>(cfg: &RunConfig, agent: AgentKind) -> Result<Vec<PathBuf>, CliError> {
    if !agent.is_learned() {
        return Err(CliError::Config(format!("`{agent}` is a fixed rule and has nothing to train")));
    }
    let book = load_book(cfg)?;
    let spec = bandres::training::AgentSpec { agent, ..cfg.agent.clone() };
    let out = train::<S>(&cfg.train, &cfg.episode, &book, &spec)?;
    let ckpt = Checkpoint::new(&out.online, Some(&out.target), Some(&out.optimizer));
    let run = cfg.run_dir();
    let ckpt_path = run.join(CHECKPOINTS).join(format!("{agent}.json"));
    let curve_path = run.join(CURVES).join(format!("{agent}.csv"));
    write_file(&ckpt_path, &(ckpt.to_json()? + "\n"))?;
    write_file(&curve_path, &out.curve.to_csv())?;
    Ok(vec![ckpt_path, curve_path])
}

/// Trained networks named by their checkpoint file stem.
pub struct Loaded<S> {
    pub nets: Vec<(String, QNetwork<S>)>,
}

pub fn load_checkpoints<S: Scalar>(cfg: &RunConfig, explicit: &[PathBuf]) -> Result<Loaded<S>, CliError> {
    let paths: Vec<PathBuf> = if explicit.is_empty() {
        let dir = cfg.run_dir().join(CHECKPOINTS);
        let mut found = Vec::new();
        if dir.is_dir() {
            for entry in std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
                let p = entry.map_err(|e| CliError::io(&dir, e))?.path();
                if p.extension().is_some_and(|x| x == "json") {
                    found.push(p);
                }
            }
        }
        // Table order follows the agent list, then file name.
        found.sort_by_key(|p| {
            let stem = stem(p);
            let rank = AgentKind::ALL.iter().position(|a| a.name() == stem).unwrap_or(AgentKind::ALL.len());
            (rank, stem)
        });
        found
    } else {
        explicit.to_vec()
    };
    let mut nets = Vec::with_capacity(paths.len());
    for p in paths {
        let raw = read_file(&p)?;
        let ckpt = Checkpoint::<S>::from_json(&raw).map_err(|e| CliError::in_file(&p, e))?;
        nets.push((stem(&p), ckpt.online()?));
    }
    Ok(Loaded { nets })
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn policies<'a, S: Scalar>(loaded: &'a Loaded<S>) -> Vec<Policy<'a, S>> {
    let mut out = vec![Policy::NoPolicy, Policy::Greedy];
    out.extend(loaded.nets.iter().map(|(name, net)| Policy::Q { name, net }));
    out
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<Vec<PathBuf>, CliError> {
    let s = report.scenario;
    let files = [
        (format!("{s}_summary.csv"), report.summary_csv()),
        (format!("{s}_episodes.csv"), report.episodes_csv()),
        (format!("{s}_histograms.csv"), report.histograms_csv()),
        (format!("{s}_traces.csv"), report.traces_csv()),
        (format!("{s}_report.json"), serde_json::to_string(report).map_err(bandres::error::Error::from)? + "\n"),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        write_file(&p, &body)?;
        written.push(p);
    }
    Ok(written)
}

pub fn cmd_eval<S: Scalar>(
    cfg: &RunConfig,
    scenario: Option<ScenarioMode>,
    checkpoints: &[PathBuf],
) -> Result<Vec<PathBuf>, CliError> {
    let book = load_book(cfg)?;
    let loaded = load_checkpoints::<S>(cfg, checkpoints)?;
    let mut ec = cfg.episode.clone();
    if let Some(s) = scenario {
        ec.scenario_mode = s;
    }
    let report = evaluate(&policies(&loaded), cfg.eval.episodes, &ec, &book, cfg.eval.seed, cfg.threads())?;
    write_report(&cfg.run_dir().join(REPORTS), &report)
}

pub fn cmd_compare<S: Scalar>(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let book = load_book(cfg)?;
    let loaded = load_checkpoints::<S>(cfg, checkpoints)?;
    let bundle = BenchmarkBundle {
        episode: cfg.episode.clone(),
        book: &book,
        eval_episodes: cfg.eval.episodes,
        eval_seed: cfg.eval.seed,
        threads: cfg.threads(),
        networks: loaded.nets.iter().map(|(n, net)| (n.clone(), net)).collect(),
    };
    let (reports, summary) = reproduce_benchmarks(&bundle)?;
    let dir = cfg.run_dir().join(REPORTS);
    let mut written = Vec::new();
    for r in &reports {
        written.extend(write_report(&dir, r)?);
    }
    for (name, body) in [("summary.csv", summary.to_csv()), ("summary.txt", summary.to_text())] {
        let p = dir.join(name);
        write_file(&p, &body)?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct OracleEpisode {
    episode: usize,
    seed: u64,
    optimal: bandres::training::OracleResult,
    /// Cost of each evaluated policy on the same episode.
    policy_costs: Vec<(String, f64)>,
}

pub fn cmd_oracle<S: Scalar>(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let book = load_book(cfg)?;
    let loaded = load_checkpoints::<S>(cfg, checkpoints)?;
    let pols = policies(&loaded);
    let mut rows = Vec::with_capacity(cfg.oracle.episodes);
    for i in 0..cfg.oracle.episodes {
        let seed = evaluation_seed(cfg.eval.seed, i);
        let optimal = brute_force_oracle(&cfg.episode, &book, seed)?;
        let mut policy_costs = Vec::with_capacity(pols.len());
        for p in &pols {
            policy_costs.push((p.name().to_string(), run_episode(p, &cfg.episode, &book, seed, false)?.cost));
        }
        rows.push(OracleEpisode { episode: i, seed, optimal, policy_costs });
    }

    let mut csv = String::from("episode,seed,segments,steps,optimal_cost,states_explored");
    for p in &pols {
        let _ = write!(csv, ",{}_cost", p.name());
    }
    csv.push_str(",schedule\n");
    for r in &rows {
        let _ = write!(
            csv,
            "{},{},{},{},{},{}",
            r.episode,
            r.seed,
            r.optimal.plan.segments.len(),
            r.optimal.plan.total_steps(),
            r.optimal.cost,
            r.optimal.states_explored
        );
        for (_, c) in &r.policy_costs {
            let _ = write!(csv, ",{c}");
        }
        let schedule: Vec<String> = r.optimal.schedule.iter().map(|a| a.index().to_string()).collect();
        let _ = writeln!(csv, ",{}", schedule.join(" "));
    }
    let dir = cfg.run_dir().join(REPORTS);
    let json_path = dir.join("oracle.json");
    let csv_path = dir.join("oracle.csv");
    write_file(&json_path, &(serde_json::to_string_pretty(&rows).map_err(bandres::error::Error::from)? + "\n"))?;
    write_file(&csv_path, &csv)?;
    Ok(vec![json_path, csv_path])
}
