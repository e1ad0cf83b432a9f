use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use taxelsim::daq::decode_frame;
use taxelsim::daq::frame::read_prefixed;

fn reference_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

fn taxelsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxelsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_two_seconds_at_100_hz_gives_200_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reference_config();
    ok(taxelsim(&["simulate", "--config", s(&cfg), "--duration", "2", "--out", s(dir.path())]));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["frames"], 200);
    assert_eq!(summary["taxels"].as_array().unwrap().len(), 56);

    let log = fs::read(dir.path().join("frames.bin")).unwrap();
    let mut rest = &log[..];
    let mut frames = 0u32;
    while let Some(payload) = read_prefixed(&mut rest).unwrap() {
        let frame = decode_frame(&payload).unwrap();
        assert_eq!(frame.sequence, frames);
        assert_eq!(frame.readings.len(), 56);
        frames += 1;
    }
    assert_eq!(frames, 200);
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = reference_config();
    for (dir, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(taxelsim(&["simulate", "--config", s(&cfg), "--seed", seed, "--out", s(dir.path())]));
    }
    let log = |d: &tempfile::TempDir| fs::read(d.path().join("frames.bin")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_ne!(log(&a), log(&c));
}

#[test]
fn contact_free_run_stays_in_the_noise_band() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[channel]\nseed = 21\n");
    ok(taxelsim(&["simulate", "--config", s(&cfg), "--duration", "5", "--out", s(dir.path())]));
    let summary = read_json(&dir.path().join("summary.json"));
    // active and passive shielding: 3.2% of the 5 pF range, peak to peak
    let band = 0.032 * 5.0;
    for t in summary["taxels"].as_array().unwrap() {
        let (lo, hi) = (t["min_delta_pf"].as_f64().unwrap(), t["max_delta_pf"].as_f64().unwrap());
        let mean = t["mean_delta_pf"].as_f64().unwrap();
        assert!(lo >= -band && hi <= band, "taxel {}: {lo}..{hi}", t["index"]);
        assert!(mean.abs() < band / 20.0, "taxel {}: mean {mean}", t["index"]);
    }
}

#[test]
fn contact_shows_up_on_its_link_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reference_config();
    ok(taxelsim(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]));
    let summary = read_json(&dir.path().join("summary.json"));
    for t in summary["taxels"].as_array().unwrap() {
        let hi = t["max_delta_pf"].as_f64().unwrap();
        if t["index"] == 25 {
            // 15 N centred on this taxel
            assert!(hi > 1.0, "{hi}");
        } else if t["link_id"] != "forearm" {
            assert!(hi < 0.16, "taxel {}: {hi}", t["index"]);
        }
    }
}

#[test]
fn ideal_cycles_calibrate_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cycles = dir.path().join("cycles.csv");
    let curve = dir.path().join("curve.json");
    let cfg = reference_config();
    ok(taxelsim(&["record-cycles", "--config", s(&cfg), "--out", s(&cycles), "--cycles", "3", "--ideal"]));
    ok(taxelsim(&["calibrate", "--cycles", s(&cycles), "--out", s(&curve)]));
    let json = read_json(&curve);
    let rms = json["residual"]["rms"].as_f64().unwrap();
    assert!(rms < 1e-6, "{rms}");
    let curve: taxelsim::calib::CalibrationCurve = serde_json::from_value(json).unwrap();
    assert!(curve.knots.windows(2).all(|w| w[1].c > w[0].c && w[1].f >= w[0].f));
}

#[test]
fn noisy_cycles_reach_full_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cycles = dir.path().join("cycles.csv");
    let curve = dir.path().join("curve.json");
    let cfg = reference_config();
    ok(taxelsim(&["record-cycles", "--config", s(&cfg), "--out", s(&cycles), "--cycles", "10"]));
    ok(taxelsim(&["calibrate", "--cycles", s(&cycles), "--out", s(&curve)]));
    let curve: taxelsim::calib::CalibrationCurve =
        serde_json::from_str(&fs::read_to_string(&curve).unwrap()).unwrap();
    let zero = curve.estimate(0.0).force;
    let top = curve.estimate(5.0).force;
    assert!(zero.abs() <= 0.02 * 55.0, "{zero}");
    assert!((top - 55.0).abs() <= 0.02 * 55.0, "{top}");
}

#[test]
fn non_numeric_cell_is_a_data_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cycles = dir.path().join("bad.csv");
    fs::write(&cycles, "t,c,f\n0,0,0\n0.01,0.1,1\n0.02,x,2\n").unwrap();
    let out = taxelsim(&["calibrate", "--cycles", s(&cycles), "--out", s(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn non_monotone_cycles_fail_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let cycles = dir.path().join("flat.csv");
    let mut text = String::from("t,c,f\n");
    for i in 0..400 {
        let f = 20.0 * (i as f64 / 40.0).sin().abs();
        text.push_str(&format!("{},{},{}\n", i as f64 * 0.01, (i as f64 * 0.3).sin(), f));
    }
    fs::write(&cycles, text).unwrap();
    let out = taxelsim(&["calibrate", "--cycles", s(&cycles), "--out", s(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn reference_topology_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reference_config();
    ok(taxelsim(&["topology", "--config", s(&cfg), "--out", s(dir.path())]));
    let mut rdr = csv::Reader::from_path(dir.path().join("addresses.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 56);
    let addr = |r: &csv::StringRecord| (r[6].to_string(), r[7].to_string(), r[8].to_string());
    let mut seen: Vec<_> = rows.iter().map(addr).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 56);
    let row30 = rows.iter().find(|r| &r[0] == "30").unwrap();
    assert_eq!(addr(row30), ("1".into(), "0".into(), "2".into()));
    let topo = read_json(&dir.path().join("topology.json"));
    assert_eq!(topo["total_taxel_count"], 56);
}

#[test]
fn colliding_indices_name_the_offenders() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[[topology.sections]]\nlink_id = \"a\"\nrows = 1\ncols = 2\ntaxel_count = 2\nindices = [3, 4]\n\n\
         [[topology.sections]]\nlink_id = \"b\"\nrows = 1\ncols = 2\ntaxel_count = 2\nindices = [4, 5]\n",
    );
    let out = taxelsim(&["topology", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains('4'), "{}", stderr(&out));
}

#[test]
fn characterize_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = reference_config();
    for dir in [&a, &b] {
        ok(taxelsim(&["characterize", "--config", s(&cfg), "--seed", "5", "--out", s(dir.path())]));
    }
    for file in ["report.json", "report.csv", "report_series.csv"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    let report = read_json(&a.path().join("report.json"));
    let reduction = report["noise_reduction_fraction"].as_f64().unwrap();
    assert!((reduction - 0.775).abs() <= 0.01, "{reduction}");
    assert_eq!(report["seed"], 5);
}

#[test]
fn characterize_without_dynamics_is_accurate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[channel]\nquantize = false\n\
         [channel.noise]\nunshielded = 0.0\nactive_only = 0.0\nactive_passive = 0.0\n\
         [channel.hysteresis]\nloop_gap_fraction = 0.0\n\
         [channel.drift]\ndecay_per_1000 = 0.0\n\
         [battery]\nnoise_samples = 1000\n",
    );
    ok(taxelsim(&["characterize", "--config", s(&cfg), "--out", s(dir.path())]));
    let report = read_json(&dir.path().join("report.json"));
    let mean = report["relative_error_mean"].as_f64().unwrap();
    assert!(mean < 0.001, "{mean}");
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[channel]\nseed = 1\nsampling = 200\n");
    let out = taxelsim(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("line 3") && msg.contains("sampling"), "{msg}");

    let cfg = write_config(dir.path(), "[channel]\nsample_rate_hz = 1000\n");
    let out = taxelsim(&["characterize", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sample rate"), "{}", stderr(&out));

    let out = taxelsim(&["simulate", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stream_announces_address_and_stops() {
    let cfg = reference_config();
    let out = ok(taxelsim(&[
        "stream", "--config", s(&cfg), "--bind", "127.0.0.1:0", "--rate", "200", "--duration", "0.3",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("streaming on 127.0.0.1:"), "{stdout}");
}
