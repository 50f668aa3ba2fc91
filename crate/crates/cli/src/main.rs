//! Command-line driver: simulate sessions, run the engine, inspect graphs and
//! score trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use topomap::ate::{evaluate_ate, AteError};
use topomap::graph::{PoseGraph, Role, VertexId};
use topomap::io::{
    associate_trajectories, config_to_kv, load_graph, metrics_csv, parse_config, parse_trajectory,
    trajectory_text, GraphFile, IoError, Manifest, ScenarioFile, StreamFile,
};
use topomap::pipeline::{Pipeline, PipelineConfig, PipelineError};
use topomap::simulator::{build_scenario, scenario, NoiseModel, SimError, SimMatcher, SCENARIOS};
use topomap::spectral::{self, SpectralReport, Weighting, CONNECTIVITY_EPS};

#[derive(Parser)]
#[command(name = "topomap", version, about = "Multi-session pose-graph localization and mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate session streams for a canned scenario.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the matcher dropout probability.
        #[arg(long)]
        dropout: Option<f64>,
        /// Override the matcher outlier rate.
        #[arg(long)]
        outlier_rate: Option<f64>,
    },
    /// Process session streams against an optional prior map.
    Run {
        /// Prior graph file.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Manifest for the prior; defaults to manifest.json next to it.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectral summary of a graph file.
    Metrics {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "trace")]
        weighting: String,
    },
    /// ATE RMSE between two trajectory files.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Audit connectivity and graph invariants.
    MergeCheck {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Data(m) => ("data", m),
            Failure::Invariant(m) => ("invariant", m),
        };
        write!(f, "error: {kind}: {}", msg.replace('\n', " "))
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Data(e.to_string())
            }
        }
    )*};
}

data_error!(IoError, PipelineError, SimError, AteError, spectral::SpectralError);

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn sibling_manifest(graph: &Path, explicit: Option<&PathBuf>) -> Option<PathBuf> {
    if let Some(m) = explicit {
        return Some(m.clone());
    }
    let candidate = graph.with_file_name("manifest.json");
    candidate.exists().then_some(candidate)
}

fn load(graph: &Path, manifest: Option<&PathBuf>) -> Result<(PoseGraph, Option<Manifest>), Failure> {
    let text = read(graph)?;
    let manifest_text = sibling_manifest(graph, manifest).map(|p| read(&p)).transpose()?;
    let (g, m, skipped) = load_graph(&text, manifest_text.as_deref())?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} unknown records");
    }
    Ok((g, m))
}

fn simulate(name: &str, seed: u64, out: &Path, dropout: Option<f64>, outlier_rate: Option<f64>) -> Result<(), Failure> {
    if !SCENARIOS.contains(&name) {
        return Err(Failure::Usage(format!(
            "unknown scenario {name:?} (expected one of {})",
            SCENARIOS.join(", ")
        )));
    }
    let mut noise = NoiseModel::default();
    if let Some(d) = dropout {
        noise.match_dropout = d;
    }
    if let Some(o) = outlier_rate {
        noise.outlier_rate = o;
    }
    let sc = scenario(name, seed, noise.clone())?;
    create_dir(out)?;
    let mut files = Vec::new();
    for s in &sc.streams {
        let file = format!("session_{:03}.json", s.session);
        write(&out.join(&file), &StreamFile::from_stream(s).to_json())?;
        files.push(file);
    }
    let meta = ScenarioFile {
        scenario: name.to_string(),
        seed,
        noise,
        sessions: files.clone(),
    };
    write(&out.join("scenario.json"), &meta.to_json())?;
    for (s, f) in sc.streams.iter().zip(&files) {
        println!("session {} {} keyframes {} -> {f}", s.session, s.label, s.events.len());
    }
    Ok(())
}

struct SessionRun {
    session: u32,
    label: String,
    keyframes: u32,
    reference_added: usize,
    ate: Option<f64>,
}

fn run(
    prior: Option<&PathBuf>,
    manifest: Option<&PathBuf>,
    sessions: &Path,
    config: Option<&PathBuf>,
    out: &Path,
) -> Result<(), Failure> {
    let config = match config {
        Some(p) => parse_config(&read(p)?)?,
        None => PipelineConfig::default(),
    };
    let (prior_graph, prior_manifest) = match prior {
        Some(p) => {
            let (g, m) = load(p, manifest)?;
            (g, m)
        }
        None => (PoseGraph::new(), None),
    };
    let meta: ScenarioFile = ScenarioFile::from_json(&read(&sessions.join("scenario.json"))?)?;
    let (world, _) = build_scenario(&meta.scenario, meta.seed)?;
    let mut matcher = SimMatcher::new(world, meta.noise.clone());
    for v in prior_graph.vertices() {
        if let Some(t) = v.truth {
            matcher.add_truth(v.id, t);
        }
    }
    let done: BTreeSet<u32> = prior_graph.vertices().map(|v| v.id.session).collect();
    let mut streams = Vec::new();
    for file in &meta.sessions {
        let s = StreamFile::from_json(&read(&sessions.join(file))?)?.to_stream()?;
        if done.contains(&s.session) {
            continue;
        }
        matcher.add_stream(&s);
        streams.push(s);
    }
    let mut labels: BTreeMap<u32, String> = prior_manifest.as_ref().map(Manifest::labels).unwrap_or_default();
    let mut pipeline = Pipeline::new(prior_graph, config.clone(), Arc::new(matcher))?;
    let mut results = Vec::new();
    for s in &streams {
        labels.insert(s.session, s.label.clone());
        let summary = pipeline.run_session(&s.events)?;
        let est: Vec<_> = pipeline.trajectory(s.session).into_iter().map(|(_, p)| p).collect();
        let ate = if est.len() == s.events.len() && s.events.iter().all(|e| e.truth.is_some()) {
            evaluate_ate(&est, &s.truths()).ok()
        } else {
            None
        };
        results.push(SessionRun {
            session: s.session,
            label: s.label.clone(),
            keyframes: summary.keyframes,
            reference_added: summary.reference_added,
            ate,
        });
    }
    pipeline.finish()?;

    create_dir(out)?;
    let timing = !config.determinism;
    write(&out.join("metrics.csv"), &metrics_csv(pipeline.rows(), timing))?;
    for s in &streams {
        let est = pipeline.trajectory(s.session);
        write(&out.join(format!("trajectory_{:03}.txt", s.session)), &trajectory_text(&est))?;
        let truth: Vec<(VertexId, _)> = s
            .events
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.truth.map(|t| (VertexId::new(s.session, i as u32), t)))
            .collect();
        write(&out.join(format!("truth_{:03}.txt", s.session)), &trajectory_text(&truth))?;
    }
    let stats = pipeline.stats().clone();
    let graph = pipeline.into_graph();
    let (file, mut manifest) = GraphFile::from_graph(&graph, &labels);
    manifest.config = config_to_kv(&config);
    manifest.scenario = Some(meta.scenario.clone());
    manifest.seed = Some(meta.seed);
    write(&out.join("graph.g2o"), &file.to_text())?;
    write(&out.join("manifest.json"), &manifest.to_json())?;

    let mut summary = String::new();
    for r in &results {
        let ate = r.ate.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        summary.push_str(&format!(
            "session {} {} keyframes {} reference_added {} ate {ate}\n",
            r.session, r.label, r.keyframes, r.reference_added
        ));
    }
    summary.push_str(&format!(
        "reference_vertices {}\nloop_closures {}\nglobal_optimizations {}\n",
        graph.ids_with_role(Role::Reference).len(),
        stats.lc_accepted,
        stats.global_pgo_runs
    ));
    write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn metrics(graph: &Path, manifest: Option<&PathBuf>, weighting: &str) -> Result<(), Failure> {
    let weighting: Weighting = weighting.parse().map_err(Failure::Usage)?;
    let (g, _) = load(graph, manifest)?;
    let ids: BTreeSet<VertexId> = g.vertex_ids().collect();
    let report = SpectralReport::compute(&g, &ids, weighting)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    println!("vertices {}", report.m);
    println!("weighting {weighting}");
    println!("d_bar {:.6}", report.d_bar);
    println!("lambda2 {:.6}", report.lambda2_bar);
    println!("spanning_tree_log {}", opt(report.spanning_tree_log));
    println!("spanning_tree_measure {}", opt(report.spanning_tree_measure));
    let weakest: Vec<String> = report
        .weakest_edges
        .iter()
        .filter_map(|id| g.edge(*id))
        .map(|e| format!("{}-{}", e.from, e.to))
        .collect();
    println!("weakest_edges {}", if weakest.is_empty() { "none".to_string() } else { weakest.join(" ") });
    for (v, d) in &report.node_degrees {
        println!("degree {v} {d:.6}");
    }
    Ok(())
}

fn eval(est: &Path, truth: &Path) -> Result<(), Failure> {
    let e = parse_trajectory(&read(est)?)?;
    let t = parse_trajectory(&read(truth)?)?;
    let (e, t) = associate_trajectories(&e, &t)?;
    println!("ate_rmse {:.6}", evaluate_ate(&e, &t)?);
    Ok(())
}

fn merge_check(graph: &Path, manifest: Option<&PathBuf>) -> Result<(), Failure> {
    let (g, _) = load(graph, manifest)?;
    let mut violations = Vec::new();
    if !g.adjacency_consistent() {
        violations.push("adjacency index disagrees with the edge list".to_string());
    }
    let reference: BTreeSet<VertexId> = g.ids_with_role(Role::Reference).into_iter().collect();
    let others = g.vertex_count() - reference.len();
    if others > 0 {
        violations.push(format!("{others} vertices are not reference vertices"));
    }
    let components = g.components(&reference, |e| !e.is_unary()).len();
    let lambda2 = if reference.len() >= 2 {
        let l = spectral::build_laplacian(&g, &reference, Weighting::Unit)?;
        spectral::lambda2(&l)?
    } else {
        0.0
    };
    let spectral_connected = reference.len() < 2 || lambda2 > CONNECTIVITY_EPS;
    if components > 1 {
        violations.push(format!("reference graph has {components} components"));
    }
    if spectral_connected != (components <= 1) {
        violations.push("spectral and combinatorial connectivity disagree".to_string());
    }
    println!("vertices {}", g.vertex_count());
    println!("edges {}", g.edge_count());
    println!("reference {}", reference.len());
    println!("components {components}");
    println!("lambda2 {lambda2:.6}");
    if violations.is_empty() {
        println!("status ok");
        Ok(())
    } else {
        println!("status violated");
        Err(Failure::Invariant(violations.join("; ")))
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
            dropout,
            outlier_rate,
        } => simulate(&scenario, seed, &out, dropout, outlier_rate),
        Command::Run {
            prior,
            manifest,
            sessions,
            config,
            out,
        } => run(prior.as_ref(), manifest.as_ref(), &sessions, config.as_ref(), &out),
        Command::Metrics {
            graph,
            manifest,
            weighting,
        } => metrics(&graph, manifest.as_ref(), &weighting),
        Command::Eval { est, truth } => eval(&est, &truth),
        Command::MergeCheck { graph, manifest } => merge_check(&graph, manifest.as_ref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", Failure::Usage(line.to_string()));
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
