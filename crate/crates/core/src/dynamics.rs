//! Non-ideal channel behaviour layered on top of the ideal capacitance:
//! shielding-dependent noise, relaxation hysteresis, CDC quantization and
//! clamping, and wear-induced gain drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::capmodel::{TaxelModel, FULL_SCALE_FORCE_N};
use crate::error::{in_range, positive, DomainError};
use crate::metrics;

/// Electromagnetic shielding arrangement of the skin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldingMode {
    Unshielded,
    ActiveOnly,
    ActivePassive,
}

impl ShieldingMode {
    pub const ALL: [ShieldingMode; 3] = [
        ShieldingMode::Unshielded,
        ShieldingMode::ActiveOnly,
        ShieldingMode::ActivePassive,
    ];
}

/// Peak-to-peak noise band per shielding mode, as a fraction of the
/// measuring range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevels {
    pub unshielded: f64,
    pub active_only: f64,
    pub active_passive: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            unshielded: 0.142,
            active_only: 0.052,
            active_passive: 0.032,
        }
    }
}

impl NoiseLevels {
    pub fn fraction(&self, mode: ShieldingMode) -> f64 {
        match mode {
            ShieldingMode::Unshielded => self.unshielded,
            ShieldingMode::ActiveOnly => self.active_only,
            ShieldingMode::ActivePassive => self.active_passive,
        }
    }

    pub fn zero() -> Self {
        NoiseLevels {
            unshielded: 0.0,
            active_only: 0.0,
            active_passive: 0.0,
        }
    }
}

/// Static configuration shared by every channel of one controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorChannelConfig {
    pub shielding: ShieldingMode,
    pub noise: NoiseLevels,
    /// Usable capacitance span in pF.
    pub measuring_range: f64,
    /// Converter full scale, readings clamp to `±clamp` pF.
    pub clamp: f64,
    /// Converter resolution in pF.
    pub quantum: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
    pub quantize: bool,
    pub hysteresis: HysteresisConfig,
    pub drift: DriftConfig,
}

impl Default for SensorChannelConfig {
    fn default() -> Self {
        SensorChannelConfig {
            shielding: ShieldingMode::ActivePassive,
            noise: NoiseLevels::default(),
            measuring_range: 5.0,
            clamp: 15.0,
            quantum: 0.0005,
            sample_rate_hz: 100.0,
            seed: 0,
            quantize: true,
            hysteresis: HysteresisConfig::default(),
            drift: DriftConfig::default(),
        }
    }
}

impl SensorChannelConfig {
    /// Every non-ideality switched off; the channel passes capacitance through.
    pub fn ideal() -> Self {
        SensorChannelConfig {
            noise: NoiseLevels::zero(),
            quantize: false,
            hysteresis: HysteresisConfig {
                loop_gap_fraction: 0.0,
                relaxation_rate: None,
            },
            drift: DriftConfig {
                decay_per_1000: 0.0,
                ..DriftConfig::default()
            },
            ..SensorChannelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        for mode in ShieldingMode::ALL {
            in_range("noise fraction", self.noise.fraction(mode), 0.0, 1.0)?;
        }
        positive("measuring range", self.measuring_range)?;
        positive("quantum", self.quantum)?;
        if self.clamp <= self.measuring_range {
            return Err(DomainError::Invalid(format!(
                "clamp {} pF must exceed measuring range {} pF",
                self.clamp, self.measuring_range
            )));
        }
        if !(100.0..=400.0).contains(&self.sample_rate_hz) {
            return Err(DomainError::OutOfRange {
                name: "sample rate",
                value: self.sample_rate_hz,
                min: 100.0,
                max: 400.0,
            });
        }
        self.hysteresis.validate()?;
        self.drift.validate()?;
        Ok(())
    }

    /// Standard deviation of the additive noise, taking the band as ±3σ.
    pub fn noise_sigma(&self) -> f64 {
        self.noise.fraction(self.shielding) * self.measuring_range / 6.0
    }

    pub fn max_counts(&self) -> i64 {
        (self.clamp / self.quantum).round() as i64
    }
}

/// Deterministic noise stream for one channel.
pub fn channel_rng(seed: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel);
    rng
}

/// Adds zero-mean Gaussian noise whose 6σ band matches the configured
/// fraction of the measuring range.
pub fn apply_noise<R: Rng + ?Sized>(c: f64, cfg: &SensorChannelConfig, rng: &mut R) -> f64 {
    let sigma = cfg.noise_sigma();
    if sigma == 0.0 {
        return c;
    }
    let z: f64 = StandardNormal.sample(rng);
    c + sigma * z
}

/// Rounds to the converter grid (ties to even) and clamps, in counts of one quantum.
pub fn quantize_counts(c: f64, cfg: &SensorChannelConfig) -> i64 {
    let max = cfg.max_counts();
    let n = (c / cfg.quantum).round_ties_even();
    if n.is_nan() {
        return 0;
    }
    (n.clamp(-(max as f64), max as f64)) as i64
}

pub fn quantize_clamp(c: f64, cfg: &SensorChannelConfig) -> f64 {
    quantize_counts(c, cfg) as f64 * cfg.quantum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HysteresisConfig {
    /// Loading/unloading gap on the standard cycle, fraction of force range.
    pub loop_gap_fraction: f64,
    /// Explicit relaxation rate in 1/s; tuned from the gap when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaxation_rate: Option<f64>,
}

impl Default for HysteresisConfig {
    fn default() -> Self {
        HysteresisConfig {
            loop_gap_fraction: 0.054,
            relaxation_rate: None,
        }
    }
}

impl HysteresisConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(0.0..=0.2).contains(&self.loop_gap_fraction) {
            return Err(DomainError::Invalid(format!(
                "loop gap fraction {} outside [0, 0.2]",
                self.loop_gap_fraction
            )));
        }
        if let Some(rate) = self.relaxation_rate {
            positive("relaxation rate", rate)?;
        }
        Ok(())
    }

    /// Relaxation rate to use with `model`: explicit, infinite for a zero
    /// gap, or tuned on the standard cycle.
    pub fn resolve_rate(&self, model: &TaxelModel) -> Result<f64, DomainError> {
        if let Some(rate) = self.relaxation_rate {
            return Ok(rate);
        }
        tune_relaxation_rate(model, self.loop_gap_fraction, &PressCycle::standard())
    }
}

/// First-order lag of the channel output behind the ideal capacitance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HysteresisState {
    pub output: f64,
    pub loop_gap_fraction: f64,
    pub relaxation_rate: f64,
}

impl HysteresisState {
    pub fn new(initial: f64, loop_gap_fraction: f64, relaxation_rate: f64) -> Self {
        HysteresisState {
            output: initial,
            loop_gap_fraction,
            relaxation_rate,
        }
    }

    /// Advances the lag by `dt` seconds towards `target` and returns the output.
    pub fn step(&mut self, target: f64, dt: f64) -> Result<f64, DomainError> {
        positive("time step", dt)?;
        let blend = -(-self.relaxation_rate * dt).exp_m1();
        if blend >= 1.0 {
            self.output = target;
        } else {
            self.output += (target - self.output) * blend;
        }
        Ok(self.output)
    }
}

pub fn apply_hysteresis(
    state: HysteresisState,
    target: f64,
    dt: f64,
) -> Result<(HysteresisState, f64), DomainError> {
    let mut next = state;
    let out = next.step(target, dt)?;
    Ok((next, out))
}

/// Triangular press-release force cycle starting and ending at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressCycle {
    pub peak_force: f64,
    pub period: f64,
    pub sample_rate_hz: f64,
}

impl PressCycle {
    /// 0 → 40 N → 0 over 10 s, sampled at 200 Hz.
    pub fn standard() -> Self {
        PressCycle {
            peak_force: 40.0,
            period: 10.0,
            sample_rate_hz: 200.0,
        }
    }

    pub fn samples(&self) -> usize {
        (self.period * self.sample_rate_hz).round() as usize
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    /// Force at sample `i`; samples `0..=samples()` cover one full cycle.
    pub fn force_at(&self, i: usize) -> f64 {
        let n = self.samples();
        let half = n / 2;
        let i = i % (n + 1);
        if i <= half {
            self.peak_force * i as f64 / half as f64
        } else {
            self.peak_force * (n - i) as f64 / (n - half) as f64
        }
    }

    pub fn peak_index(&self) -> usize {
        self.samples() / 2
    }
}

/// Force-equivalent loading/unloading gap produced by a lag of `rate`
/// on one noiseless `cycle`, in N.
pub fn cycle_gap(model: &TaxelModel, rate: f64, cycle: &PressCycle) -> Result<f64, DomainError> {
    let baseline = model.baseline();
    let mut lag = HysteresisState::new(baseline, 0.0, rate);
    let dt = cycle.dt();
    let peak = cycle.peak_index();
    let mut loading = Vec::with_capacity(peak + 1);
    let mut unloading = Vec::with_capacity(cycle.samples() - peak + 1);
    for i in 0..=cycle.samples() {
        let force = cycle.force_at(i);
        let target = model.capacitance(force, &Default::default())?;
        let out = if i == 0 { lag.output } else { lag.step(target, dt)? };
        let estimate = model
            .force_for_delta(out - baseline)
            .ok_or_else(|| DomainError::Invalid("lagged output beyond saturation".into()))?;
        if i <= peak {
            loading.push((force, estimate));
        }
        if i >= peak {
            unloading.push((force, estimate));
        }
    }
    let (gap, _) = metrics::hysteresis_error(&loading, &unloading, FULL_SCALE_FORCE_N)
        .map_err(|e| DomainError::Invalid(e.to_string()))?;
    Ok(gap)
}

/// Bisects (in log space) for the relaxation rate that reproduces
/// `gap_fraction` of the full-scale force range on `cycle`.
pub fn tune_relaxation_rate(
    model: &TaxelModel,
    gap_fraction: f64,
    cycle: &PressCycle,
) -> Result<f64, DomainError> {
    if gap_fraction == 0.0 {
        return Ok(f64::INFINITY);
    }
    let target = gap_fraction * FULL_SCALE_FORCE_N;
    // A very slow lag flattens both branches, so the gap peaks at some
    // intermediate rate. Walk down from the fast end to bracket the
    // decreasing side.
    let mut hi = 1e6_f64.ln();
    let mut lo = hi;
    loop {
        lo -= std::f64::consts::LN_2;
        if cycle_gap(model, lo.exp(), cycle)? > target {
            break;
        }
        if lo < 1e-3_f64.ln() {
            return Err(DomainError::Invalid(format!(
                "gap fraction {gap_fraction} unreachable on this cycle"
            )));
        }
        hi = lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cycle_gap(model, mid.exp(), cycle)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// Gain lost per thousand interactions.
    pub decay_per_1000: f64,
    /// Lowest gain the model will report.
    pub floor: f64,
    /// Force above which a contact counts as an interaction, N.
    pub press_threshold: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            decay_per_1000: 0.00054,
            floor: 0.9,
            press_threshold: 1.0,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        in_range("drift decay", self.decay_per_1000, 0.0, 1.0)?;
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(DomainError::Invalid(format!(
                "drift floor {} outside (0, 1]",
                self.floor
            )));
        }
        in_range("press threshold", self.press_threshold, 0.0, f64::INFINITY)?;
        Ok(())
    }
}

/// Wear state of one taxel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    pub interaction_count: u64,
    pub decay_per_1000: f64,
    pub floor: f64,
    pressed: bool,
}

impl DriftState {
    pub fn new(cfg: &DriftConfig) -> Self {
        DriftState {
            interaction_count: 0,
            decay_per_1000: cfg.decay_per_1000,
            floor: cfg.floor,
            pressed: false,
        }
    }

    pub fn with_count(cfg: &DriftConfig, interaction_count: u64) -> Self {
        DriftState {
            interaction_count,
            ..Self::new(cfg)
        }
    }

    pub fn effective_gain(&self) -> f64 {
        let g = 1.0 - self.decay_per_1000 * (self.interaction_count as f64 / 1000.0);
        g.max(self.floor)
    }

    /// Counts rising edges of the contact state as interactions.
    pub fn observe(&mut self, force: f64, threshold: f64) {
        let pressed = force > threshold;
        if pressed && !self.pressed {
            self.interaction_count += 1;
        }
        self.pressed = pressed;
    }
}

/// Scales a nominal gain by the wear of `state`.
pub fn apply_drift(state: &DriftState, gain: f64) -> f64 {
    gain * state.effective_gain()
}

/// Full dynamic state of one channel, owned by a single scan loop.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub hysteresis: HysteresisState,
    pub drift: DriftState,
    rng: ChaCha8Rng,
}

impl ChannelState {
    pub fn new(cfg: &SensorChannelConfig, channel: u64, baseline: f64, relaxation_rate: f64) -> Self {
        ChannelState {
            hysteresis: HysteresisState::new(
                baseline,
                cfg.hysteresis.loop_gap_fraction,
                relaxation_rate,
            ),
            drift: DriftState::new(&cfg.drift),
            rng: channel_rng(cfg.seed, channel),
        }
    }

    /// Runs one sample through lag, noise, wear and the converter.
    /// `force` drives the interaction counter; returns the reading in pF.
    pub fn process(
        &mut self,
        ideal: f64,
        baseline: f64,
        force: f64,
        dt: f64,
        cfg: &SensorChannelConfig,
    ) -> Result<f64, DomainError> {
        self.drift.observe(force, cfg.drift.press_threshold);
        let lagged = self.hysteresis.step(ideal, dt)?;
        let noisy = apply_noise(lagged, cfg, &mut self.rng);
        let gain = apply_drift(&self.drift, 1.0);
        let drifted = if gain == 1.0 {
            noisy
        } else {
            baseline + gain * (noisy - baseline)
        };
        Ok(if cfg.quantize {
            quantize_clamp(drifted, cfg)
        } else {
            drifted
        })
    }
}
