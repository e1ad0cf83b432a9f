//! Characterization battery run in virtual time: calibration cycles, the
//! quasi-static accuracy sweep, the hysteresis cycle, noise runs for each
//! shielding mode, the durability loop and contact smoothness.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{estimate_force, fit_force_calibration, CalibError, CalibrationCurve,
    CalibrationOptions, CyclePoint};
use crate::capmodel::{DeformationState, TaxelModel, FULL_SCALE_FORCE_N};
use crate::daq::scan::{ScanError, ScanSetup, Simulator};
use crate::dynamics::{ChannelState, NoiseLevels, PressCycle, SensorChannelConfig, ShieldingMode};
use crate::error::DomainError;
use crate::metrics::{self, MetricsError, SmoothnessStats};
use crate::topology::ContactSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scan(#[from] ScanError),
}

/// One taxel wired to one channel, driven by force directly.
#[derive(Debug, Clone)]
pub struct ChannelRig {
    pub model: TaxelModel,
    pub cfg: SensorChannelConfig,
    state: ChannelState,
    baseline: f64,
}

impl ChannelRig {
    pub fn new(model: TaxelModel, cfg: SensorChannelConfig, channel: u64) -> Result<Self, DomainError> {
        cfg.validate()?;
        let rate = cfg.hysteresis.resolve_rate(&model)?;
        let baseline = model.baseline();
        Ok(ChannelRig {
            model,
            cfg,
            state: ChannelState::new(&cfg, channel, baseline, rate),
            baseline,
        })
    }

    /// Reads the capacitance change for one sample at `force`.
    pub fn read(&mut self, force: f64, dt: f64) -> Result<f64, DomainError> {
        let ideal = self.model.capacitance(force, &DeformationState::default())?;
        let out = self.state.process(ideal, self.baseline, force, dt, &self.cfg)?;
        Ok(out - self.baseline)
    }

    pub fn presses(&self) -> u64 {
        self.state.drift.interaction_count
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.cfg.sample_rate_hz
    }
}

/// Parameters of the standard battery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    pub calibration_cycles: usize,
    pub calibration_peak_n: f64,
    pub cycle_period_s: f64,
    pub knots: usize,
    pub sweep_max_n: f64,
    pub sweep_step_n: f64,
    /// Hold time at each sweep level before averaging.
    pub settle_s: f64,
    /// Frames averaged per sweep level.
    pub averaging_window: usize,
    pub noise_samples: usize,
    pub durability_presses: usize,
    pub press_peak_n: f64,
    pub scenario_duration_s: f64,
    pub smoothness_epsilon: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig {
            calibration_cycles: 10,
            calibration_peak_n: FULL_SCALE_FORCE_N,
            cycle_period_s: 10.0,
            knots: 64,
            sweep_max_n: 40.0,
            sweep_step_n: 2.0,
            settle_s: 2.0,
            averaging_window: 10,
            noise_samples: 100_000,
            durability_presses: 1000,
            press_peak_n: 20.0,
            scenario_duration_s: 5.0,
            smoothness_epsilon: metrics::DEFAULT_SMOOTHNESS_EPSILON,
        }
    }
}

impl BatteryConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let positive = [
            ("calibration peak", self.calibration_peak_n),
            ("cycle period", self.cycle_period_s),
            ("sweep max", self.sweep_max_n),
            ("sweep step", self.sweep_step_n),
            ("settle time", self.settle_s),
            ("press peak", self.press_peak_n),
            ("smoothness epsilon", self.smoothness_epsilon),
        ];
        for (name, v) in positive {
            crate::error::positive(name, v)?;
        }
        if self.calibration_cycles == 0 || self.averaging_window == 0 || self.knots < 2 {
            return Err(DomainError::Invalid(
                "calibration cycles, averaging window and knots must be non-zero".into(),
            ));
        }
        if self.noise_samples < metrics::MIN_NOISE_SAMPLES {
            return Err(DomainError::Invalid(format!(
                "noise runs need at least {} samples",
                metrics::MIN_NOISE_SAMPLES
            )));
        }
        Ok(())
    }

    pub fn sweep_levels(&self) -> Vec<f64> {
        let n = (self.sweep_max_n / self.sweep_step_n).round() as usize;
        (0..=n).map(|i| (i as f64 * self.sweep_step_n).min(self.sweep_max_n)).collect()
    }

    fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            knots: self.knots,
            ..CalibrationOptions::default()
        }
    }
}

/// Records `cycles` triangular press-release cycles through the rig.
pub fn record_press_cycles(
    rig: &mut ChannelRig,
    cycles: usize,
    peak: f64,
    period: f64,
) -> Result<Vec<Vec<CyclePoint>>, DomainError> {
    let cycle = PressCycle {
        peak_force: peak,
        period,
        sample_rate_hz: rig.cfg.sample_rate_hz,
    };
    let dt = rig.dt();
    let n = cycle.samples();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        let mut trace = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let f = cycle.force_at(i);
            let c = rig.read(f, dt)?;
            trace.push(CyclePoint { t, c, f });
            t += dt;
        }
        out.push(trace);
    }
    Ok(out)
}

/// Calibrates a fresh channel from press-release cycles.
pub fn calibrate_channel(
    model: &TaxelModel,
    cfg: &SensorChannelConfig,
    battery: &BatteryConfig,
) -> Result<(CalibrationCurve, Vec<Vec<CyclePoint>>), ExperimentError> {
    let mut rig = ChannelRig::new(*model, *cfg, 0)?;
    let cycles = record_press_cycles(
        &mut rig,
        battery.calibration_cycles,
        battery.calibration_peak_n,
        battery.cycle_period_s,
    )?;
    let curve = fit_force_calibration(&cycles, &battery.calibration_options())?;
    Ok((curve, cycles))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub truth: Vec<f64>,
    pub estimates: Vec<f64>,
    /// Mean and max absolute error as fractions of the force range.
    pub relative_error_mean: f64,
    pub relative_error_max: f64,
    /// `1 - Σ|F_est - F_true| / Σ F_true`.
    pub accuracy: f64,
}

/// Quasi-static staircase: hold each level, then average the last
/// `averaging_window` readings and look the mean up on the curve.
pub fn accuracy_sweep(
    rig: &mut ChannelRig,
    curve: &CalibrationCurve,
    battery: &BatteryConfig,
) -> Result<SweepResult, ExperimentError> {
    let dt = rig.dt();
    let hold = ((battery.settle_s / dt).round() as usize).max(1);
    let window = battery.averaging_window;
    let truth = battery.sweep_levels();
    let mut estimates = Vec::with_capacity(truth.len());
    for &level in &truth {
        for _ in 0..hold {
            rig.read(level, dt)?;
        }
        let mut sum = 0.0;
        for _ in 0..window {
            sum += rig.read(level, dt)?;
        }
        estimates.push(estimate_force(curve, sum / window as f64).force);
    }
    let (mean, max) = metrics::relative_error(&estimates, &truth, FULL_SCALE_FORCE_N)?;
    let total: f64 = truth.iter().sum();
    let abs: f64 = estimates.iter().zip(&truth).map(|(e, t)| (e - t).abs()).sum();
    Ok(SweepResult {
        truth,
        estimates,
        relative_error_mean: mean,
        relative_error_max: max,
        accuracy: 1.0 - abs / total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisResult {
    /// Widest branch gap in force-equivalent units, read through the
    /// forward model's inverse.
    pub error_n: f64,
    pub fraction: f64,
    /// The same gap read through the calibration curve.
    pub calibrated_error_n: f64,
    pub calibrated_fraction: f64,
    pub loading: Vec<(f64, f64)>,
    pub unloading: Vec<(f64, f64)>,
}

/// Runs the standard press cycle with noise removed and reports the widest
/// gap between loading and unloading branches.
pub fn hysteresis_run(
    model: &TaxelModel,
    cfg: &SensorChannelConfig,
    curve: &CalibrationCurve,
) -> Result<HysteresisResult, ExperimentError> {
    let quiet = SensorChannelConfig {
        noise: NoiseLevels::zero(),
        ..*cfg
    };
    let mut rig = ChannelRig::new(*model, quiet, 0)?;
    let cycle = PressCycle::standard();
    let dt = cycle.dt();
    let peak = cycle.peak_index();
    let mut branches = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for i in 0..=cycle.samples() {
        let f = cycle.force_at(i);
        let c = rig.read(f, dt)?;
        let equivalent = model
            .force_for_delta(c)
            .ok_or_else(|| DomainError::Invalid(format!("reading {c} pF beyond saturation")))?;
        let calibrated = estimate_force(curve, c).force;
        if i <= peak {
            branches[0].push((f, equivalent));
            branches[2].push((f, calibrated));
        }
        if i >= peak {
            branches[1].push((f, equivalent));
            branches[3].push((f, calibrated));
        }
    }
    let [loading, unloading, cal_loading, cal_unloading] = branches;
    let (error_n, fraction) = metrics::hysteresis_error(&loading, &unloading, FULL_SCALE_FORCE_N)?;
    let (calibrated_error_n, calibrated_fraction) =
        metrics::hysteresis_error(&cal_loading, &cal_unloading, FULL_SCALE_FORCE_N)?;
    Ok(HysteresisResult {
        error_n,
        fraction,
        calibrated_error_n,
        calibrated_fraction,
        loading,
        unloading,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseResult {
    pub shielding: ShieldingMode,
    pub band_pf: f64,
    pub fraction: f64,
}

/// Holds the taxel unloaded and measures the noise band for one mode.
pub fn noise_run(
    model: &TaxelModel,
    cfg: &SensorChannelConfig,
    mode: ShieldingMode,
    samples: usize,
) -> Result<NoiseResult, ExperimentError> {
    let cfg = SensorChannelConfig {
        shielding: mode,
        ..*cfg
    };
    let channel = ShieldingMode::ALL.iter().position(|m| *m == mode).unwrap_or(0) as u64;
    let mut rig = ChannelRig::new(*model, cfg, channel)?;
    let dt = rig.dt();
    let readings = (0..samples)
        .map(|_| rig.read(0.0, dt))
        .collect::<Result<Vec<f64>, _>>()?;
    let (band_pf, fraction) = metrics::noise_band(&readings, cfg.measuring_range)?;
    Ok(NoiseResult {
        shielding: mode,
        band_pf,
        fraction,
    })
}

/// `1 - band(ActivePassive) / band(Unshielded)`.
pub fn noise_reduction(results: &[NoiseResult]) -> Option<f64> {
    let band = |m| results.iter().find(|r| r.shielding == m).map(|r| r.band_pf);
    let (u, ap) = (band(ShieldingMode::Unshielded)?, band(ShieldingMode::ActivePassive)?);
    (u > 0.0).then(|| 1.0 - ap / u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurabilityResult {
    pub presses: u64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Accuracy drop in percentage points.
    pub drop_pp: f64,
    pub final_gain: f64,
}

/// Calibrates, sweeps, presses the taxel `durability_presses` times and
/// sweeps again with the same calibration. Noise is removed so the sweep
/// resolves the drift, which is far below the per-frame noise.
pub fn durability_run(
    model: &TaxelModel,
    cfg: &SensorChannelConfig,
    battery: &BatteryConfig,
) -> Result<DurabilityResult, ExperimentError> {
    let quiet = SensorChannelConfig {
        noise: NoiseLevels::zero(),
        ..*cfg
    };
    let (curve, _) = calibrate_channel(model, &quiet, battery)?;
    let mut rig = ChannelRig::new(*model, quiet, 0)?;
    let before = accuracy_sweep(&mut rig, &curve, battery)?;
    let dt = rig.dt();
    let ramp = 10usize;
    let start = rig.presses();
    while rig.presses() - start < battery.durability_presses as u64 {
        for i in 0..=2 * ramp {
            let f = battery.press_peak_n * (ramp - i.abs_diff(ramp)) as f64 / ramp as f64;
            rig.read(f, dt)?;
        }
        for _ in 0..ramp {
            rig.read(0.0, dt)?;
        }
    }
    for _ in 0..((battery.settle_s / dt).round() as usize) {
        rig.read(0.0, dt)?;
    }
    let after = accuracy_sweep(&mut rig, &curve, battery)?;
    Ok(DurabilityResult {
        presses: rig.presses(),
        accuracy_before: before.accuracy,
        accuracy_after: after.accuracy,
        drop_pp: metrics::durability_report(before.accuracy, after.accuracy)?,
        final_gain: rig.state.drift.effective_gain(),
    })
}

/// Runs the contact scenario on the whole skin and reports per-taxel
/// smoothness of the calibrated force.
pub fn scenario_smoothness(
    setup: &ScanSetup,
    contacts: &[ContactSpec],
    curve: &CalibrationCurve,
    duration_s: f64,
    epsilon: f64,
) -> Result<SmoothnessStats, ExperimentError> {
    let mut sim = Simulator::new(setup.clone(), contacts.to_vec())?;
    let frames = (duration_s * setup.schedule.rate_hz).round() as usize;
    let baseline = setup.model.baseline();
    let order = setup.schedule.order.clone();
    let mut series: BTreeMap<usize, Vec<f64>> = order.iter().map(|&i| (i, Vec::new())).collect();
    for _ in 0..frames {
        sim.step()?;
        for (index, reading) in order.iter().zip(sim.last_readings()) {
            let f = estimate_force(curve, reading - baseline).force;
            series.get_mut(index).expect("taxel in scan order").push(f);
        }
    }
    let dt = setup.schedule.period();
    let maxima = series
        .values()
        .map(|s| metrics::smoothness(s, dt, epsilon).map(|(_, max)| max))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(SmoothnessStats::from_maxima(maxima))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub knots: usize,
    pub residual_rms_n: f64,
    pub residual_max_n: f64,
    pub range_pf: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub seed: u64,
    pub shielding: ShieldingMode,
    pub relative_error_mean: f64,
    pub relative_error_max: f64,
    /// Sweep error with every channel non-ideality switched off.
    pub ideal_relative_error_mean: f64,
    pub hysteresis_error_n: f64,
    pub hysteresis_error_fraction: f64,
    pub hysteresis_calibrated_error_n: f64,
    pub hysteresis_calibrated_fraction: f64,
    pub noise_band_pf: f64,
    pub noise_band_fraction: f64,
    pub noise: Vec<NoiseResult>,
    pub noise_reduction_fraction: f64,
    pub durability: DurabilityResult,
    pub calibration: CalibrationSummary,
    pub smoothness_stats: SmoothnessStats,
    pub battery: BatteryConfig,
    /// Echo of the run configuration.
    pub config: serde_json::Value,
    #[serde(skip)]
    pub series: Vec<SeriesPoint>,
}

/// One row of the long-format plot table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

fn push_series(out: &mut Vec<SeriesPoint>, name: &str, points: impl IntoIterator<Item = (f64, f64)>) {
    out.extend(points.into_iter().map(|(x, y)| SeriesPoint {
        series: name.to_string(),
        x,
        y,
    }));
}

/// Runs the full battery for one taxel model and channel configuration.
pub fn characterize(
    setup: &ScanSetup,
    contacts: &[ContactSpec],
    battery: &BatteryConfig,
    config_echo: serde_json::Value,
) -> Result<CharacterizationReport, ExperimentError> {
    battery.validate()?;
    let model = setup.model;
    let mut cfg = setup.channel;
    // tune once, every rig below reuses the rate; a zero gap needs no lag
    let rate = cfg.hysteresis.resolve_rate(&model)?;
    if rate.is_finite() {
        cfg.hysteresis.relaxation_rate = Some(rate);
    }

    let (curve, _) = calibrate_channel(&model, &cfg, battery)?;
    let mut rig = ChannelRig::new(model, cfg, 0)?;
    let sweep = accuracy_sweep(&mut rig, &curve, battery)?;

    let ideal = SensorChannelConfig {
        sample_rate_hz: cfg.sample_rate_hz,
        seed: cfg.seed,
        ..SensorChannelConfig::ideal()
    };
    let (ideal_curve, _) = calibrate_channel(&model, &ideal, battery)?;
    let ideal_sweep = accuracy_sweep(&mut ChannelRig::new(model, ideal, 0)?, &ideal_curve, battery)?;

    let hysteresis = hysteresis_run(&model, &cfg, &curve)?;
    let noise = ShieldingMode::ALL
        .iter()
        .map(|&m| noise_run(&model, &cfg, m, battery.noise_samples))
        .collect::<Result<Vec<_>, _>>()?;
    let own = noise
        .iter()
        .find(|r| r.shielding == cfg.shielding)
        .cloned()
        .expect("every mode measured");
    let durability = durability_run(&model, &cfg, battery)?;
    let scan_setup = ScanSetup {
        channel: cfg,
        ..setup.clone()
    };
    let smoothness_stats = scenario_smoothness(
        &scan_setup,
        contacts,
        &curve,
        battery.scenario_duration_s,
        battery.smoothness_epsilon,
    )?;

    let mut series = Vec::new();
    push_series(&mut series, "sweep", sweep.truth.iter().copied().zip(sweep.estimates.iter().copied()));
    push_series(&mut series, "hysteresis_loading", hysteresis.loading.iter().copied());
    push_series(&mut series, "hysteresis_unloading", hysteresis.unloading.iter().copied());
    push_series(&mut series, "calibration", curve.knots.iter().map(|k| (k.c, k.f)));

    Ok(CharacterizationReport {
        seed: cfg.seed,
        shielding: cfg.shielding,
        relative_error_mean: sweep.relative_error_mean,
        relative_error_max: sweep.relative_error_max,
        ideal_relative_error_mean: ideal_sweep.relative_error_mean,
        hysteresis_error_n: hysteresis.error_n,
        hysteresis_error_fraction: hysteresis.fraction,
        hysteresis_calibrated_error_n: hysteresis.calibrated_error_n,
        hysteresis_calibrated_fraction: hysteresis.calibrated_fraction,
        noise_band_pf: own.band_pf,
        noise_band_fraction: own.fraction,
        noise_reduction_fraction: noise_reduction(&noise).unwrap_or(0.0),
        noise,
        durability,
        calibration: CalibrationSummary {
            knots: curve.knots.len(),
            residual_rms_n: curve.residual.rms,
            residual_max_n: curve.residual.max,
            range_pf: curve.range,
        },
        smoothness_stats,
        battery: *battery,
        config: config_echo,
        series,
    })
}

impl CharacterizationReport {
    /// Scalar results as `metric,value` rows.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "value"])?;
        let mut rows: Vec<(String, f64)> = vec![
            ("relative_error_mean".into(), self.relative_error_mean),
            ("relative_error_max".into(), self.relative_error_max),
            ("ideal_relative_error_mean".into(), self.ideal_relative_error_mean),
            ("hysteresis_error_n".into(), self.hysteresis_error_n),
            ("hysteresis_error_fraction".into(), self.hysteresis_error_fraction),
            ("hysteresis_calibrated_error_n".into(), self.hysteresis_calibrated_error_n),
            ("hysteresis_calibrated_fraction".into(), self.hysteresis_calibrated_fraction),
            ("noise_band_pf".into(), self.noise_band_pf),
            ("noise_band_fraction".into(), self.noise_band_fraction),
            ("noise_reduction_fraction".into(), self.noise_reduction_fraction),
            ("durability_accuracy_before".into(), self.durability.accuracy_before),
            ("durability_accuracy_after".into(), self.durability.accuracy_after),
            ("durability_drop_pp".into(), self.durability.drop_pp),
            ("calibration_residual_rms_n".into(), self.calibration.residual_rms_n),
            ("calibration_residual_max_n".into(), self.calibration.residual_max_n),
            ("smoothness_mean".into(), self.smoothness_stats.mean),
            ("smoothness_sd".into(), self.smoothness_stats.sd),
        ];
        for n in &self.noise {
            let name = serde_json::to_value(n.shielding)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            rows.push((format!("noise_fraction_{name}"), n.fraction));
        }
        for (k, v) in rows {
            w.write_record([k, v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format `series,x,y` table for plotting.
    pub fn write_series_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.series {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}
