//! Runs a canned scenario and prints the metrics trace.
//!
//! cargo run --release -p topomap --example trace -- three_stage 1

use std::sync::Arc;

use topomap::graph::PoseGraph;
use topomap::pipeline::{Pipeline, PipelineConfig};
use topomap::simulator::{scenario, NoiseModel};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("three_stage");
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let sc = scenario(name, seed, NoiseModel::default()).expect("scenario");
    let config = PipelineConfig::default();
    let mut p = Pipeline::new(PoseGraph::new(), config, Arc::new(sc.matcher())).expect("pipeline");
    for stream in &sc.streams {
        for e in &stream.events {
            let r = p.ingest(e).expect("ingest");
            let covered = sc.covered_by(&e.truth.unwrap(), &(0..stream.session).collect::<Vec<_>>());
            let row = p.rows().last().unwrap();
            println!(
                "{} {:>4} {:<12} d={:>10.1} mu={:>10.1} s={:>8.1} l2={:<12} {} inter={} cov={} ref={}",
                row.session,
                row.keyframe,
                row.mode.as_str(),
                row.d_bar,
                row.mu,
                row.sigma,
                row.lambda2.map_or("NA".into(), |v| format!("{v:.3e}")),
                row.event.as_str(),
                r.inter_edges,
                covered as u8,
                p.reference_count()
            );
        }
        let s = p.end_session().expect("end");
        println!("{s:?}");
    }
    println!("{:?}", p.stats());
}
