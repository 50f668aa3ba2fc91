use proptest::prelude::*;
use topomap::decision::{DecisionConfig, DecisionEvent, DecisionState, Mode};

#[derive(Clone, Debug)]
struct Sample {
    d_bar: f64,
    lambda2: f64,
}

fn stream() -> impl Strategy<Value = Vec<Sample>> {
    let sample = (prop_oneof![4 => 9.0f64..11.0, 1 => 0.0f64..20.0], prop_oneof![3 => 0.01f64..2.0, 1 => Just(0.0)])
        .prop_map(|(d_bar, lambda2)| Sample { d_bar, lambda2 });
    prop::collection::vec(sample, 0..400)
}

fn small_config() -> impl Strategy<Value = DecisionConfig> {
    (5usize..60, 1usize..8, 1usize..15).prop_map(|(window, m, dwell)| DecisionConfig {
        window,
        recovery_hysteresis: m,
        min_mapping_dwell: dwell,
        ..DecisionConfig::default()
    })
}

fn run(config: &DecisionConfig, samples: &[Sample]) -> Vec<(Mode, DecisionEvent, Option<f64>)> {
    let mut s = DecisionState::new(config.clone()).unwrap();
    samples
        .iter()
        .map(|x| {
            let o = s.step(x.d_bar, || x.lambda2).unwrap();
            (o.mode, o.event, o.lambda2)
        })
        .collect()
}

proptest! {
    #[test]
    fn lambda2_only_requested_outside_band(config in small_config(), samples in stream()) {
        let mut s = DecisionState::new(config.clone()).unwrap();
        for x in &samples {
            let quiet = s.mode() == Mode::Localization
                && (!s.warmed_up()
                    || (x.d_bar - s.mu()).abs() <= config.k2 * config.sigma_eff(s.mu(), s.sigma()));
            let mut calls = 0;
            s.step(x.d_bar, || { calls += 1; x.lambda2 }).unwrap();
            prop_assert!(calls <= 1);
            if quiet {
                prop_assert_eq!(calls, 0);
            }
        }
    }

    #[test]
    fn identical_inputs_identical_traces(config in small_config(), samples in stream()) {
        prop_assert_eq!(run(&config, &samples), run(&config, &samples));
    }

    #[test]
    fn mode_changes_are_spaced(config in small_config(), samples in stream()) {
        let gap = config.min_mapping_dwell.min(config.recovery_hysteresis);
        let trace = run(&config, &samples);
        let changes: Vec<usize> = trace
            .iter()
            .enumerate()
            .filter(|(_, t)| t.1 != DecisionEvent::None)
            .map(|(i, _)| i)
            .collect();
        for w in changes.windows(2) {
            prop_assert!(w[1] - w[0] >= gap, "changes at {:?}", changes);
        }
    }

    #[test]
    fn disconnection_always_maps(config in small_config(), samples in stream()) {
        let mut s = DecisionState::new(config.clone()).unwrap();
        for x in &samples {
            let deviates = s.mode() == Mode::Localization
                && s.warmed_up()
                && (x.d_bar - s.mu()).abs() > config.k2 * config.sigma_eff(s.mu(), s.sigma());
            let out = s.step(x.d_bar, || x.lambda2).unwrap();
            if deviates && x.lambda2 == 0.0 {
                prop_assert_eq!(out.event, DecisionEvent::EnterMappingDisconnect);
            }
        }
    }

    #[test]
    fn frozen_statistics_do_not_move_while_mapping(config in small_config(), samples in stream()) {
        let mut s = DecisionState::new(config).unwrap();
        let mut frozen = None;
        for x in &samples {
            s.step(x.d_bar, || x.lambda2).unwrap();
            if s.mode() == Mode::Mapping {
                match frozen {
                    None => frozen = s.frozen(),
                    Some(f) => prop_assert_eq!(Some(f), s.frozen()),
                }
            } else {
                frozen = None;
            }
        }
    }

    #[test]
    fn constant_stream_stays_localized(config in small_config(), d in 0.0f64..100.0, len in 0usize..300) {
        let mut s = DecisionState::new(config).unwrap();
        for _ in 0..len {
            let out = s.step(d, || 1.0).unwrap();
            prop_assert_eq!(out.mode, Mode::Localization);
        }
    }
}
