//! Two-step consensus between localization and mapping.
//!
//! Step one watches the weighted average node degree against a moving window
//! of its own history. Only when it leaves the `k2`-sigma band is the Fiedler
//! value requested; a zero Fiedler value or a `k4`-sigma drop switches to
//! mapping. Returning to localization requires `M` consecutive in-band,
//! connected keyframes after a minimum dwell.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

/// Fiedler values at or below this are treated as disconnected.
pub const EPS_CONN: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionConfig {
    pub window: usize,
    /// Relative sigma floor, multiplied by `|mu|`.
    pub sigma_floor_rel: f64,
    pub sigma_floor_abs: f64,
    pub k2: f64,
    pub k4: f64,
    pub recovery_hysteresis: usize,
    pub min_mapping_dwell: usize,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            window: 50,
            sigma_floor_rel: 1e-3,
            sigma_floor_abs: 1e-6,
            k2: 2.0,
            k4: 4.0,
            recovery_hysteresis: 5,
            min_mapping_dwell: 10,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<(), DecisionError> {
        let bad = |why: &str| Err(DecisionError::InvalidConfig(why.to_string()));
        if self.window < 5 {
            return bad("window must be at least 5");
        }
        if !(self.k2 > 0.0 && self.k4 > self.k2) {
            return bad("thresholds must satisfy k4 > k2 > 0");
        }
        if self.recovery_hysteresis < 1 {
            return bad("recovery hysteresis must be at least 1");
        }
        if !(self.sigma_floor_rel >= 0.0 && self.sigma_floor_abs > 0.0) {
            return bad("sigma floors must be non-negative with a positive absolute floor");
        }
        Ok(())
    }

    pub fn sigma_eff(&self, mu: f64, sigma: f64) -> f64 {
        sigma.max((self.sigma_floor_rel * mu.abs()).max(self.sigma_floor_abs))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecisionError {
    #[error("non-finite input {0}")]
    NonFiniteInput(f64),
    #[error("negative average degree {0}")]
    NegativeInput(f64),
    #[error("invalid decision config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Localization,
    Mapping,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Localization => "LOCALIZATION",
            Mode::Mapping => "MAPPING",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecisionEvent {
    None,
    EnterMappingDisconnect,
    EnterMappingDegraded,
    ExitMapping,
}

impl DecisionEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionEvent::None => "NONE",
            DecisionEvent::EnterMappingDisconnect => "ENTER_MAPPING_DISCONNECT",
            DecisionEvent::EnterMappingDegraded => "ENTER_MAPPING_DEGRADED",
            DecisionEvent::ExitMapping => "EXIT_MAPPING",
        }
    }

    pub fn is_enter(self) -> bool {
        matches!(
            self,
            DecisionEvent::EnterMappingDisconnect | DecisionEvent::EnterMappingDegraded
        )
    }
}

impl fmt::Display for DecisionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Result of one [`DecisionState::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub mode: Mode,
    pub event: DecisionEvent,
    /// The Fiedler value if it was requested on this step.
    pub lambda2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionState {
    pub config: DecisionConfig,
    mode: Mode,
    window: VecDeque<f64>,
    recent: VecDeque<f64>,
    mu: f64,
    sigma: f64,
    frozen: Option<(f64, f64)>,
    recovery_count: usize,
    dwell_count: usize,
    cooldown: usize,
    last_event: DecisionEvent,
}

impl DecisionState {
    pub fn new(config: DecisionConfig) -> Result<Self, DecisionError> {
        config.validate()?;
        Ok(Self {
            config,
            mode: Mode::Localization,
            window: VecDeque::new(),
            recent: VecDeque::new(),
            mu: 0.0,
            sigma: 0.0,
            frozen: None,
            recovery_count: 0,
            dwell_count: 0,
            cooldown: 0,
            last_event: DecisionEvent::None,
        })
    }

    /// Starts in mapping with no statistics to return to. Used when there is
    /// no prior model; such a state only leaves mapping through
    /// [`DecisionState::reset_localization`].
    pub fn bootstrap_mapping(config: DecisionConfig) -> Result<Self, DecisionError> {
        let mut s = Self::new(config)?;
        s.mode = Mode::Mapping;
        Ok(s)
    }

    /// Back to a fresh localization warm-up, keeping the configuration.
    pub fn reset_localization(&mut self) {
        *self = Self::new(self.config.clone()).expect("config was validated");
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn frozen(&self) -> Option<(f64, f64)> {
        self.frozen
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn recovery_count(&self) -> usize {
        self.recovery_count
    }

    pub fn dwell_count(&self) -> usize {
        self.dwell_count
    }

    pub fn last_event(&self) -> DecisionEvent {
        self.last_event
    }

    pub fn warmed_up(&self) -> bool {
        self.window.len() >= self.config.window && self.cooldown == 0
    }

    /// Advances the state machine by one keyframe. `lambda2` is called at most
    /// once, and only when the rule needs it.
    pub fn step<F>(&mut self, d_bar: f64, mut lambda2: F) -> Result<StepOutcome, DecisionError>
    where
        F: FnMut() -> f64,
    {
        if !d_bar.is_finite() {
            return Err(DecisionError::NonFiniteInput(d_bar));
        }
        if d_bar < 0.0 {
            return Err(DecisionError::NegativeInput(d_bar));
        }
        let mut evaluated = None;
        let event = match self.mode {
            Mode::Localization => self.step_localization(d_bar, &mut lambda2, &mut evaluated)?,
            Mode::Mapping => self.step_mapping(d_bar, &mut lambda2, &mut evaluated)?,
        };
        self.recent.push_back(d_bar);
        while self.recent.len() > self.config.recovery_hysteresis {
            self.recent.pop_front();
        }
        if event == DecisionEvent::ExitMapping {
            self.window = self.recent.clone();
            self.refresh_stats();
        }
        self.last_event = event;
        Ok(StepOutcome {
            mode: self.mode,
            event,
            lambda2: evaluated,
        })
    }

    fn step_localization<F: FnMut() -> f64>(
        &mut self,
        d_bar: f64,
        lambda2: &mut F,
        evaluated: &mut Option<f64>,
    ) -> Result<DecisionEvent, DecisionError> {
        if !self.warmed_up() {
            self.cooldown = self.cooldown.saturating_sub(1);
            self.ingest(d_bar);
            return Ok(DecisionEvent::None);
        }
        let s = self.config.sigma_eff(self.mu, self.sigma);
        if (d_bar - self.mu).abs() <= self.config.k2 * s {
            self.ingest(d_bar);
            return Ok(DecisionEvent::None);
        }
        let l2 = finite(lambda2())?;
        *evaluated = Some(l2);
        let event = if l2 <= EPS_CONN {
            DecisionEvent::EnterMappingDisconnect
        } else if d_bar < self.mu - self.config.k4 * s {
            DecisionEvent::EnterMappingDegraded
        } else {
            self.ingest(d_bar);
            return Ok(DecisionEvent::None);
        };
        self.mode = Mode::Mapping;
        self.frozen = Some((self.mu, self.sigma));
        self.dwell_count = 0;
        self.recovery_count = 0;
        Ok(event)
    }

    fn step_mapping<F: FnMut() -> f64>(
        &mut self,
        d_bar: f64,
        lambda2: &mut F,
        evaluated: &mut Option<f64>,
    ) -> Result<DecisionEvent, DecisionError> {
        self.dwell_count += 1;
        if self.dwell_count < self.config.min_mapping_dwell {
            return Ok(DecisionEvent::None);
        }
        let Some((fmu, fsigma)) = self.frozen else {
            return Ok(DecisionEvent::None);
        };
        let in_band = (d_bar - fmu).abs() <= self.config.k2 * self.config.sigma_eff(fmu, fsigma);
        let connected = in_band && {
            let l2 = finite(lambda2())?;
            *evaluated = Some(l2);
            l2 > EPS_CONN
        };
        if !connected {
            self.recovery_count = 0;
            return Ok(DecisionEvent::None);
        }
        self.recovery_count += 1;
        if self.recovery_count < self.config.recovery_hysteresis {
            return Ok(DecisionEvent::None);
        }
        self.mode = Mode::Localization;
        self.frozen = None;
        self.recovery_count = 0;
        self.dwell_count = 0;
        // the reseeded window counts as warm; hold off re-entry for M steps
        self.cooldown = self.config.recovery_hysteresis;
        Ok(DecisionEvent::ExitMapping)
    }

    fn ingest(&mut self, d_bar: f64) {
        self.window.push_back(d_bar);
        while self.window.len() > self.config.window {
            self.window.pop_front();
        }
        self.refresh_stats();
    }

    fn refresh_stats(&mut self) {
        let n = self.window.len();
        if n == 0 {
            self.mu = 0.0;
            self.sigma = 0.0;
            return;
        }
        let mu = self.window.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            self.window.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        self.mu = mu;
        self.sigma = var.sqrt();
    }

    /// Test hook: replaces the moving window so that `mu` and `sigma` take
    /// chosen values.
    pub fn seed_window(&mut self, values: &[f64]) {
        self.window = values.iter().copied().collect();
        while self.window.len() > self.config.window {
            self.window.pop_front();
        }
        self.cooldown = 0;
        self.refresh_stats();
    }

    /// Test hook: enters mapping with the given frozen statistics.
    pub fn force_mapping(&mut self, mu: f64, sigma: f64) {
        self.mode = Mode::Mapping;
        self.frozen = Some((mu, sigma));
        self.dwell_count = 0;
        self.recovery_count = 0;
    }
}

fn finite(x: f64) -> Result<f64, DecisionError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(DecisionError::NonFiniteInput(x))
    }
}

/// Memoized Fiedler value for one keyframe, with a counter of actual solves.
#[derive(Debug, Default)]
pub struct LazyLambda2 {
    cached: Option<f64>,
    solves: u64,
}

impl LazyLambda2 {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forgets the cached value; call at the start of each keyframe.
    pub fn invalidate(&mut self) {
        self.cached = None;
    }

    pub fn get_or_compute<F: FnOnce() -> f64>(&mut self, compute: F) -> f64 {
        if let Some(v) = self.cached {
            return v;
        }
        self.solves += 1;
        let v = compute();
        self.cached = Some(v);
        v
    }

    pub fn is_cached(&self) -> bool {
        self.cached.is_some()
    }

    pub fn solve_count(&self) -> u64 {
        self.solves
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A 50-sample window with mean `mu` and sample std `sigma`.
    fn window_with(mu: f64, sigma: f64) -> Vec<f64> {
        // +-a alternating over an even count: sample var = a^2 * n / (n - 1)
        let n: f64 = 50.0;
        let a = sigma * ((n - 1.0) / n).sqrt();
        (0..50).map(|i| if i % 2 == 0 { mu + a } else { mu - a }).collect()
    }

    fn seeded(mu: f64, sigma: f64) -> DecisionState {
        let mut s = DecisionState::new(DecisionConfig::default()).unwrap();
        s.seed_window(&window_with(mu, sigma));
        assert!((s.mu() - mu).abs() < 1e-12);
        assert!((s.sigma() - sigma).abs() < 1e-12);
        s
    }

    #[test]
    fn disconnect_enters_mapping() {
        let mut s = seeded(10.0, 0.5);
        let out = s.step(8.5, || 0.0).unwrap();
        assert_eq!(out.mode, Mode::Mapping);
        assert_eq!(out.event, DecisionEvent::EnterMappingDisconnect);
        assert_eq!(s.frozen(), Some((s.mu(), s.sigma())));
    }

    #[test]
    fn moderate_drop_with_connection_stays() {
        let mut s = seeded(10.0, 0.5);
        let out = s.step(8.5, || 0.3).unwrap();
        assert_eq!(out.mode, Mode::Localization);
        assert_eq!(out.event, DecisionEvent::None);
        assert_eq!(out.lambda2, Some(0.3));
    }

    #[test]
    fn large_drop_enters_degraded() {
        let mut s = seeded(10.0, 0.5);
        let out = s.step(7.5, || 0.3).unwrap();
        assert_eq!(out.event, DecisionEvent::EnterMappingDegraded);
        assert_eq!(out.mode, Mode::Mapping);
    }

    #[test]
    fn recovery_after_m_in_band_steps() {
        let mut s = DecisionState::new(DecisionConfig::default()).unwrap();
        s.force_mapping(10.0, 0.5);
        for _ in 0..9 {
            assert_eq!(s.step(9.8, || 0.2).unwrap().event, DecisionEvent::None);
        }
        let mut events = Vec::new();
        for _ in 0..5 {
            events.push(s.step(9.8, || 0.2).unwrap().event);
        }
        assert_eq!(&events[..4], &[DecisionEvent::None; 4]);
        assert_eq!(events[4], DecisionEvent::ExitMapping);
        assert_eq!(s.mode(), Mode::Localization);
        assert_eq!(s.window_len(), 5);
    }

    #[test]
    fn recovery_counter_resets_on_excursion() {
        let mut s = DecisionState::new(DecisionConfig::default()).unwrap();
        s.force_mapping(10.0, 0.5);
        for _ in 0..12 {
            s.step(9.8, || 0.2).unwrap();
        }
        assert!(s.recovery_count() > 0);
        s.step(9.8, || 0.0).unwrap();
        assert_eq!(s.recovery_count(), 0);
        s.step(5.0, || 0.2).unwrap();
        assert_eq!(s.recovery_count(), 0);
    }

    #[test]
    fn in_band_steps_never_ask_for_lambda2() {
        let mut s = seeded(10.0, 0.5);
        let out = s.step(10.9, || panic!("lambda2 requested")).unwrap();
        assert_eq!(out.lambda2, None);
    }

    #[test]
    fn warm_up_never_triggers() {
        let mut s = DecisionState::new(DecisionConfig::default()).unwrap();
        for i in 0..49 {
            let d = if i % 7 == 0 { 0.0 } else { 100.0 };
            let out = s.step(d, || panic!("lambda2 requested")).unwrap();
            assert_eq!(out.mode, Mode::Localization);
        }
    }

    #[test]
    fn sigma_floor_applies() {
        let c = DecisionConfig::default();
        assert_eq!(c.sigma_eff(10.0, 0.0), 1e-2);
        assert_eq!(c.sigma_eff(0.0, 0.0), 1e-6);
        assert_eq!(c.sigma_eff(10.0, 0.5), 0.5);
    }

    #[test]
    fn rejects_bad_input_and_config() {
        let mut s = seeded(10.0, 0.5);
        assert!(matches!(s.step(f64::NAN, || 0.0), Err(DecisionError::NonFiniteInput(_))));
        assert!(matches!(s.step(f64::INFINITY, || 0.0), Err(DecisionError::NonFiniteInput(_))));
        assert!(matches!(s.step(-1.0, || 0.0), Err(DecisionError::NegativeInput(_))));
        let mut c = DecisionConfig::default();
        c.k4 = 1.0;
        assert!(DecisionState::new(c).is_err());
        let c = DecisionConfig { window: 4, ..DecisionConfig::default() };
        assert!(DecisionState::new(c).is_err());
    }

    #[test]
    fn bootstrap_state_stays_mapping() {
        let mut s = DecisionState::bootstrap_mapping(DecisionConfig::default()).unwrap();
        for _ in 0..100 {
            let out = s.step(3.0, || 1.0).unwrap();
            assert_eq!(out.mode, Mode::Mapping);
        }
    }

    #[test]
    fn lazy_lambda2_memoizes() {
        let mut lazy = LazyLambda2::new();
        assert_eq!(lazy.get_or_compute(|| 0.5), 0.5);
        assert_eq!(lazy.get_or_compute(|| panic!("recomputed")), 0.5);
        assert_eq!(lazy.solve_count(), 1);
        lazy.invalidate();
        assert_eq!(lazy.get_or_compute(|| 0.7), 0.7);
        assert_eq!(lazy.solve_count(), 2);
    }
}
