use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use proptest::prelude::*;

use topomap::ate::evaluate_ate;
use topomap::decision::Mode;
use topomap::geometry::Pose;
use topomap::graph::{PoseGraph, Role, VertexId};
use topomap::pipeline::{Pipeline, PipelineConfig};
use topomap::simulator::{scenario, NoiseModel, SCENARIOS};

fn reference_components(p: &Pipeline) -> usize {
    let refs: BTreeSet<VertexId> = p.graph().ids_with_role(Role::Reference).into_iter().collect();
    p.graph().components(&refs, |e| !e.is_unary()).len()
}

/// Hop distances from `start` through `allowed` vertices.
fn hops_within(p: &Pipeline, start: VertexId, allowed: &BTreeSet<VertexId>) -> Vec<(VertexId, usize)> {
    let mut seen = vec![(start, 0)];
    let mut queue = VecDeque::from([(start, 0)]);
    while let Some((v, d)) = queue.pop_front() {
        for (_, e) in p.graph().edges().filter(|(_, e)| !e.is_unary() && (e.from == v || e.to == v)) {
            let u = e.other(v);
            if allowed.contains(&u) && !seen.iter().any(|(w, _)| *w == u) {
                seen.push((u, d + 1));
                queue.push_back((u, d + 1));
            }
        }
    }
    seen
}

fn check_run(name: &str, seed: u64, dropout: f64, window: usize) -> Result<(), TestCaseError> {
    let noise = NoiseModel {
        match_dropout: dropout,
        ..NoiseModel::default()
    };
    let sc = scenario(name, seed, noise).unwrap();
    let config = PipelineConfig {
        window_size: window,
        ..PipelineConfig::default()
    };
    let mut p = Pipeline::new(PoseGraph::new(), config.clone(), Arc::new(sc.matcher())).unwrap();
    let mut ingested = 0;
    for stream in &sc.streams {
        for e in &stream.events {
            let before_mode = p.mode();
            let before_refs = p.reference_count();
            let r = p.ingest(e).unwrap();
            ingested += 1;

            prop_assert_eq!(p.rows().len(), ingested);
            let row = p.rows().last().unwrap();
            prop_assert_eq!((row.session, row.keyframe), (r.id.session, r.id.index));
            prop_assert!(p.window().len() <= window);
            if before_mode == Mode::Localization && r.mode == Mode::Localization {
                prop_assert_eq!(p.reference_count(), before_refs, "map grew while localizing at {}", r.id);
            }
            prop_assert!(
                reference_components(&p) <= 1 || !p.pending().is_empty(),
                "reference split at {}",
                r.id
            );
            if r.mode == Mode::Localization && !p.retained().is_empty() {
                let newest = *p.window().last().unwrap();
                let local: BTreeSet<VertexId> = p.retained().iter().chain(p.window().iter()).copied().collect();
                let hops = hops_within(&p, newest, &local);
                for v in p.retained() {
                    prop_assert!(newest.index - v.index <= config.retention_age as u32);
                    let d = hops.iter().find(|(w, _)| w == v).map(|(_, d)| *d);
                    prop_assert!(d.is_some_and(|d| d <= config.retention_distance), "{} out of reach", v);
                }
            }
        }
        p.end_session().unwrap();
        prop_assert!(reference_components(&p) == 1);
    }
    for stream in &sc.streams {
        let keyframes: Vec<u32> = p.rows().iter().filter(|r| r.session == stream.session).map(|r| r.keyframe).collect();
        prop_assert!(keyframes.windows(2).all(|w| w[1] == w[0] + 1));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn pipeline_invariants_hold_after_every_keyframe(
        name in prop::sample::select(SCENARIOS.to_vec()),
        seed in 0u64..1000,
        dropout in 0.0..0.5f64,
        window in 3usize..16,
    ) {
        check_run(name, seed, dropout, window)?;
    }
}

#[test]
fn noiseless_runs_recover_the_truth() {
    for name in SCENARIOS {
        let sc = scenario(name, 3, NoiseModel::noiseless()).unwrap();
        let mut p = Pipeline::new(PoseGraph::new(), PipelineConfig::default(), Arc::new(sc.matcher())).unwrap();
        for s in &sc.streams {
            p.run_session(&s.events).unwrap();
        }
        for s in &sc.streams {
            let est: Vec<Pose> = p.trajectory(s.session).into_iter().map(|(_, q)| q).collect();
            let truth = s.truths();
            // sessions start from their true pose, so no alignment is needed
            let worst = est
                .iter()
                .zip(&truth)
                .map(|(e, t)| (e.translation() - t.translation()).norm())
                .fold(0.0, f64::max);
            assert!(worst < 1e-6, "{name} session {}: {worst}", s.session);
            if let Ok(ate) = evaluate_ate(&est, &truth) {
                assert!(ate < 1e-6, "{name} session {}: {ate}", s.session);
            }
        }
    }
}

#[test]
fn threaded_loop_closure_keeps_the_invariants() {
    let sc = scenario("three_stage", 5, NoiseModel::default()).unwrap();
    let config = PipelineConfig {
        determinism: false,
        ..PipelineConfig::default()
    };
    let mut p = Pipeline::new(PoseGraph::new(), config, Arc::new(sc.matcher())).unwrap();
    for s in &sc.streams {
        let summary = p.run_session(&s.events).unwrap();
        assert_eq!(summary.keyframes as usize, s.events.len());
        assert_eq!(reference_components(&p), 1);
    }
    p.finish().unwrap();
    assert!(p.stats().lc_accepted > 0);
    assert!(p.stats().global_pgo_runs > 0);
}

#[test]
fn global_optimization_never_raises_chi2() {
    for name in SCENARIOS {
        let sc = scenario(name, 11, NoiseModel::default()).unwrap();
        let mut p = Pipeline::new(PoseGraph::new(), PipelineConfig::default(), Arc::new(sc.matcher())).unwrap();
        for s in &sc.streams {
            p.run_session(&s.events).unwrap();
        }
        assert!(!p.stats().pgo_chi2.is_empty());
        for (before, after) in &p.stats().pgo_chi2 {
            assert!(*after <= before * (1.0 + 1e-12) + 1e-18, "{name}: {before} -> {after}");
        }
    }
}
