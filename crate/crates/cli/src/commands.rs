use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use taxelsim::calib::{
    fit_force_calibration, read_cycles_csv, write_cycles_csv, CalibrationOptions,
};
use taxelsim::daq::frame::{counts_to_pf, write_prefixed};
use taxelsim::daq::{encode_frame, stream_serve, Simulator, StreamConfig};
use taxelsim::dynamics::SensorChannelConfig;
use taxelsim::experiments::{characterize, record_press_cycles, ChannelRig};
use taxelsim::topology::taxel_address;

use crate::config::{load_with, Loaded};
use crate::error::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(runtime)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn output_dir(loaded: &Loaded, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| loaded.config.output_dir.clone())
}

#[derive(Debug, Serialize)]
struct TaxelSummary {
    index: usize,
    link_id: String,
    min_delta_pf: f64,
    max_delta_pf: f64,
    mean_delta_pf: f64,
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    frames: u64,
    rate_hz: f64,
    duration_s: f64,
    seed: u64,
    baseline_pf: f64,
    frame_log: String,
    taxels: Vec<TaxelSummary>,
}

pub fn simulate(
    config: &Path,
    duration: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let loaded = load_with(config, seed, None)?;
    let duration_s = duration.unwrap_or(loaded.config.simulation.duration_s);
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(CliError::Config(format!("duration {duration_s} must be positive")));
    }
    let dir = output_dir(&loaded, out);
    let setup = loaded.setup.clone();
    let rate = setup.schedule.rate_hz;
    let frames = (duration_s * rate).round() as u64;
    let baseline = setup.model.baseline();
    let located = setup.topology.locate();
    let order = setup.schedule.order.clone();
    let links: Vec<String> = order.iter().map(|i| located[i].0.to_string()).collect();
    let mut sim = Simulator::new(setup, loaded.config.contacts.clone()).map_err(runtime)?;

    let log_path = dir.join("frames.bin");
    let mut log = create(&log_path)?;
    let n = order.len();
    let (mut min, mut max, mut sum) = (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n], vec![0.0; n]);
    for _ in 0..frames {
        let frame = sim.step().map_err(runtime)?;
        write_prefixed(&mut log, &encode_frame(&frame).map_err(runtime)?)?;
        for (slot, &count) in frame.readings.iter().enumerate() {
            let delta = counts_to_pf(count) - baseline;
            min[slot] = min[slot].min(delta);
            max[slot] = max[slot].max(delta);
            sum[slot] += delta;
        }
    }
    log.flush()?;
    let taxels = (0..n)
        .map(|slot| TaxelSummary {
            index: order[slot],
            link_id: links[slot].clone(),
            min_delta_pf: if frames > 0 { min[slot] } else { 0.0 },
            max_delta_pf: if frames > 0 { max[slot] } else { 0.0 },
            mean_delta_pf: if frames > 0 { sum[slot] / frames as f64 } else { 0.0 },
        })
        .collect();
    let summary = SimulationSummary {
        frames,
        rate_hz: rate,
        duration_s,
        seed: loaded.config.channel.seed,
        baseline_pf: baseline,
        frame_log: "frames.bin".into(),
        taxels,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{frames} frames -> {}", log_path.display());
    Ok(())
}

pub fn calibrate(cycles: &Path, out: &Path, knots: Option<usize>) -> Result<(), CliError> {
    let file = File::open(cycles).map_err(|e| CliError::Data(format!("{}: {e}", cycles.display())))?;
    let trace = read_cycles_csv(file).map_err(|e| CliError::Data(format!("{}: {e}", cycles.display())))?;
    let mut opts = CalibrationOptions::default();
    if let Some(k) = knots {
        if k < 2 {
            return Err(CliError::Config(format!("knots {k} must be at least 2")));
        }
        opts.knots = k;
    }
    let curve = fit_force_calibration(&[trace], &opts)
        .map_err(|e| CliError::Data(format!("{}: {e}", cycles.display())))?;
    write_json(out, &curve)?;
    println!(
        "{} knots over {:.4}..{:.4} pF, residual rms {:.4} N, max {:.4} N -> {}",
        curve.knots.len(),
        curve.range.0,
        curve.range.1,
        curve.residual.rms,
        curve.residual.max,
        out.display()
    );
    Ok(())
}

pub fn record_cycles(
    config: &Path,
    out: &Path,
    cycles: usize,
    ideal: bool,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let loaded = load_with(config, seed, None)?;
    let channel = if ideal {
        SensorChannelConfig {
            sample_rate_hz: loaded.config.channel.sample_rate_hz,
            ..SensorChannelConfig::ideal()
        }
    } else {
        loaded.config.channel
    };
    let battery = loaded.config.battery;
    let mut rig = ChannelRig::new(loaded.setup.model, channel, 0).map_err(runtime)?;
    let traces = record_press_cycles(&mut rig, cycles, battery.calibration_peak_n, battery.cycle_period_s)
        .map_err(runtime)?;
    let flat: Vec<_> = traces.into_iter().flatten().collect();
    let w = create(out)?;
    write_cycles_csv(w, &flat).map_err(runtime)?;
    println!("{} samples -> {}", flat.len(), out.display());
    Ok(())
}

pub fn characterize_cmd(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let loaded = load_with(config, seed, None)?;
    let dir = output_dir(&loaded, out);
    let echo = serde_json::to_value(&loaded.config).map_err(runtime)?;
    let report = characterize(&loaded.setup, &loaded.config.contacts, &loaded.config.battery, echo)
        .map_err(runtime)?;
    write_json(&dir.join("report.json"), &report)?;
    report
        .write_summary_csv(create(&dir.join("report.csv"))?)
        .map_err(runtime)?;
    report
        .write_series_csv(create(&dir.join("report_series.csv"))?)
        .map_err(runtime)?;
    println!(
        "relative error {:.3}% (max {:.3}%), hysteresis {:.2}%, noise {:.2}% of range, \
         reduction {:.1}%, durability drop {:.4} pp -> {}",
        100.0 * report.relative_error_mean,
        100.0 * report.relative_error_max,
        100.0 * report.hysteresis_error_fraction,
        100.0 * report.noise_band_fraction,
        100.0 * report.noise_reduction_fraction,
        report.durability.drop_pp,
        dir.display()
    );
    Ok(())
}

pub fn topology(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let loaded = load_with(config, None, None)?;
    let dir = output_dir(&loaded, out);
    let topo = &loaded.setup.topology;
    write_json(&dir.join("topology.json"), topo)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("addresses.csv"))?);
    w.write_record(["index", "link_id", "row", "col", "u_mm", "v_mm", "mux", "cdc", "channel"])
        .map_err(runtime)?;
    let mut rows: Vec<_> = topo
        .sections
        .iter()
        .flat_map(|s| s.taxels.iter().map(move |t| (s, t)))
        .collect();
    rows.sort_by_key(|(_, t)| t.index);
    for (section, t) in &rows {
        let a = taxel_address(t.index).map_err(|e| CliError::Config(e.to_string()))?;
        w.write_record([
            t.index.to_string(),
            section.link_id.clone(),
            t.row.to_string(),
            t.col.to_string(),
            t.center[0].to_string(),
            t.center[1].to_string(),
            a.mux.to_string(),
            a.cdc.to_string(),
            a.channel.to_string(),
        ])
        .map_err(runtime)?;
    }
    w.flush()?;
    println!("{} taxels in {} sections -> {}", rows.len(), topo.sections.len(), dir.display());
    Ok(())
}

pub fn stream(
    config: &Path,
    bind: &str,
    rate: f64,
    seed: Option<u64>,
    duration: Option<f64>,
) -> Result<(), CliError> {
    let loaded = load_with(config, seed, Some(rate))?;
    let sim = Simulator::new(loaded.setup, loaded.config.contacts).map_err(runtime)?;
    let cfg = StreamConfig {
        rate_hz: rate,
        duration: duration.map(Duration::from_secs_f64),
        ..StreamConfig::default()
    };
    let handle = stream_serve(bind, Box::new(sim), cfg)
        .map_err(|e| CliError::Runtime(format!("{bind}: {e}")))?;
    println!("streaming on {} at {rate} Hz", handle.local_addr());
    std::io::stdout().flush()?;
    if let Some(err) = handle.wait() {
        return Err(CliError::Runtime(err));
    }
    Ok(())
}
