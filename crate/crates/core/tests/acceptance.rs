//! Acceptance battery. Runs every criterion in sequence, prints one
//! PASS/FAIL line each and fails if any criterion misses its tolerance or
//! its time budget.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use taxelsim::calib::{fit_inverse_law, fit_poly2, model_filter, SampleSet};
use taxelsim::capmodel::{
    bending_capacitance, bending_capacitance_physical, bending_quadratic_form,
    lateral_capacitance, FittedCoefficients, TaxelGeometry, TaxelModel, FULL_SCALE_FORCE_N,
};
use taxelsim::daq::{decode_frame, encode_frame, Frame};
use taxelsim::dynamics::{
    apply_noise, channel_rng, cycle_gap, PressCycle, SensorChannelConfig, ShieldingMode,
};
use taxelsim::experiments::{
    accuracy_sweep, calibrate_channel, durability_run, hysteresis_run, noise_reduction, noise_run,
    BatteryConfig, ChannelRig,
};
use taxelsim::metrics::hysteresis_error;
use taxelsim::topology::{
    address_index, build_reference_topology, contact_centroid, project_contact, taxel_address,
    ContactSpec, ForceProfile, TopologyError, MAX_TAXELS,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

fn criterion(id: u8, name: &str, budget: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = run();
    let elapsed = start.elapsed();
    let in_time = elapsed < budget;
    let pass = out.pass && in_time;
    println!(
        "{} criterion {id} {name}: {} [{:.3}s, budget {}s{}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" },
    );
    pass
}

fn noisy_samples(
    xs: &[f64],
    f: impl Fn(f64) -> f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let unit = Normal::new(0.0, 1.0).unwrap();
    xs.iter()
        .map(|&x| {
            let c = f(x);
            (x, c + 0.001 * c * unit.sample(rng))
        })
        .collect()
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn fitted_model_fidelity() -> Outcome {
    let coeffs = FittedCoefficients::default();
    let mut notes = Vec::new();
    let mut pass = true;

    let lat0 = lateral_capacitance(&coeffs, 0.0).unwrap();
    let bend0 = bending_capacitance(&coeffs, 0.0).unwrap();
    let constants = lat0 == 5.99 && bend0 == 5.99;
    pass &= constants;
    notes.push(format!("lateral(0)={lat0} bending(0)={bend0}"));

    // Sampling domains: thickness 0.5..3 mm, compression ratio 0..0.9,
    // bend angle 0..π rad.
    let hs = grid(0.5, 3.0, 100);
    let alphas = grid(0.0, 0.9, 100);
    let thetas = grid(0.0, PI, 100);
    let inverse = |h: f64| 5.88 / h + 2.16;
    let lateral = |a: f64| 0.44 * a * a + 0.87 * a + 5.99;
    let bending = |t: f64| 0.024 * t * t + 0.041 * t + 5.99;

    let exact_inv = fit_inverse_law(&SampleSet::new(hs.iter().map(|&h| (h, inverse(h))).collect(), "mm")).unwrap();
    let exact_lat = fit_poly2(&SampleSet::new(alphas.iter().map(|&a| (a, lateral(a))).collect(), "ratio")).unwrap();
    let exact_bend = fit_poly2(&SampleSet::new(thetas.iter().map(|&t| (t, bending(t))).collect(), "rad")).unwrap();
    let noiseless = [
        rel(exact_inv.scale, 5.88),
        rel(exact_inv.offset, 2.16),
        rel(exact_lat.p2, 0.44),
        rel(exact_lat.p1, 0.87),
        rel(exact_lat.p0, 5.99),
        rel(exact_bend.p2, 0.024),
        rel(exact_bend.p1, 0.041),
        rel(exact_bend.p0, 5.99),
    ];
    let worst_exact = noiseless.iter().cloned().fold(0.0, f64::max);
    pass &= worst_exact <= 1e-9;
    notes.push(format!("noiseless worst rel err {worst_exact:.2e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inv = fit_inverse_law(&SampleSet::new(noisy_samples(&hs, inverse, &mut rng), "mm")).unwrap();
    let lat = fit_poly2(&SampleSet::new(noisy_samples(&alphas, lateral, &mut rng), "ratio")).unwrap();
    let bend = fit_poly2(&SampleSet::new(noisy_samples(&thetas, bending, &mut rng), "rad")).unwrap();
    let noisy = [
        ("axial", vec![rel(inv.scale, 5.88), rel(inv.offset, 2.16)]),
        ("lateral", vec![rel(lat.p2, 0.44), rel(lat.p1, 0.87), rel(lat.p0, 5.99)]),
        ("bending", vec![rel(bend.p2, 0.024), rel(bend.p1, 0.041), rel(bend.p0, 5.99)]),
    ];
    for (name, errs) in &noisy {
        let ok = errs.iter().all(|e| *e <= 0.01);
        pass &= ok;
        let shown: Vec<String> = errs.iter().map(|e| format!("{:.3}%", 100.0 * e)).collect();
        notes.push(format!("noisy {name} [{}]{}", shown.join(", "), if ok { "" } else { " > 1%" }));
    }
    outcome(pass, notes.join("; "))
}

fn noise_reduction_reproduction() -> Outcome {
    let model = TaxelModel::default();
    let cfg = SensorChannelConfig::default();
    let runs: Vec<_> = ShieldingMode::ALL
        .iter()
        .map(|&m| noise_run(&model, &cfg, m, 1_000_000).unwrap())
        .collect();
    let targets = [0.142, 0.052, 0.032];
    let mut pass = true;
    let mut notes = Vec::new();
    for (r, want) in runs.iter().zip(targets) {
        let ok = (r.fraction - want).abs() <= 0.01;
        pass &= ok;
        notes.push(format!("{:?} {:.2}%", r.shielding, 100.0 * r.fraction));
    }
    let reduction = noise_reduction(&runs).unwrap();
    pass &= (reduction - 0.775).abs() <= 0.01;
    notes.push(format!("reduction {:.2}%", 100.0 * reduction));
    outcome(pass, notes.join(", "))
}

fn hysteresis_reproduction() -> Outcome {
    let model = TaxelModel::default();
    let cfg = SensorChannelConfig::default();
    let rate = cfg.hysteresis.resolve_rate(&model).unwrap();
    let tuned = cycle_gap(&model, rate, &PressCycle::standard()).unwrap() / FULL_SCALE_FORCE_N;
    let battery = BatteryConfig::default();
    let (curve, _) = calibrate_channel(&model, &cfg, &battery).unwrap();
    let chain = hysteresis_run(&model, &cfg, &curve).unwrap();

    let grid: Vec<f64> = (0..=40).map(f64::from).collect();
    let loading: Vec<(f64, f64)> = grid.iter().map(|&f| (f, f)).collect();
    let unloading: Vec<(f64, f64)> = grid.iter().map(|&f| (f, f + 3.0)).collect();
    let (gap_n, gap_frac) = hysteresis_error(&loading, &unloading, FULL_SCALE_FORCE_N).unwrap();

    let pass = (tuned - 0.054).abs() <= 0.005
        && (chain.fraction - 0.054).abs() <= 0.005
        && gap_n == 3.0
        && (gap_frac - 3.0 / 55.0).abs() < 1e-12;
    outcome(
        pass,
        format!(
            "tuned cycle gap {:.3}%, full chain {:.3}% ({:.3} N), offset branches ({gap_n} N, {:.3}%)",
            100.0 * tuned,
            100.0 * chain.fraction,
            chain.error_n,
            100.0 * gap_frac
        ),
    )
}

fn end_to_end_accuracy() -> Outcome {
    let model = TaxelModel::default();
    let battery = BatteryConfig::default();
    let noisy = SensorChannelConfig::default();
    let (curve, _) = calibrate_channel(&model, &noisy, &battery).unwrap();
    let sweep = accuracy_sweep(&mut ChannelRig::new(model, noisy, 0).unwrap(), &curve, &battery).unwrap();

    let ideal = SensorChannelConfig::ideal();
    let (ideal_curve, _) = calibrate_channel(&model, &ideal, &battery).unwrap();
    let ideal_sweep =
        accuracy_sweep(&mut ChannelRig::new(model, ideal, 0).unwrap(), &ideal_curve, &battery).unwrap();

    // independent recomputation of the mean relative error
    let mean = sweep
        .estimates
        .iter()
        .zip(&sweep.truth)
        .map(|(e, t)| (e - t).abs())
        .sum::<f64>()
        / sweep.truth.len() as f64
        / 55.0;
    let pass = (mean - sweep.relative_error_mean).abs() < 1e-12
        && sweep.truth.first() == Some(&0.0)
        && sweep.truth.last() == Some(&40.0)
        && mean <= 0.01
        && ideal_sweep.relative_error_mean <= 0.001;
    outcome(
        pass,
        format!(
            "active_passive mean {:.3}% (max {:.3}%), dynamics off mean {:.4}%",
            100.0 * mean,
            100.0 * sweep.relative_error_max,
            100.0 * ideal_sweep.relative_error_mean
        ),
    )
}

fn durability() -> Outcome {
    let d = durability_run(
        &TaxelModel::default(),
        &SensorChannelConfig::default(),
        &BatteryConfig::default(),
    )
    .unwrap();
    let pass = (d.drop_pp - 0.054).abs() <= 0.01 && d.presses >= 1000;
    outcome(
        pass,
        format!(
            "{} presses, accuracy {:.4}% -> {:.4}%, drop {:.4} pp",
            d.presses,
            100.0 * d.accuracy_before,
            100.0 * d.accuracy_after,
            d.drop_pp
        ),
    )
}

fn filtering() -> Outcome {
    let model = TaxelModel::default();
    let cfg = SensorChannelConfig::default();
    let mut rng = channel_rng(7, 0);
    let mut force_rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let (mut raw, mut filtered) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let f: f64 = force_rng.random_range(0.0..55.0);
        let analytical = model.capacitance(f, &Default::default()).unwrap();
        let measured = apply_noise(analytical, &cfg, &mut rng);
        raw.push(measured - analytical);
        filtered.push(model_filter(analytical, measured) - analytical);
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let ratio = var(&filtered) / var(&raw);
    outcome((ratio - 0.36).abs() <= 0.02, format!("variance ratio {:.4}", ratio))
}

fn topology_protocol() -> Outcome {
    let mut notes = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut bijection = true;
    for i in 0..MAX_TAXELS {
        let a = taxel_address(i).unwrap();
        bijection &= address_index(a).unwrap() == i && seen.insert((a.mux, a.cdc, a.channel));
    }
    bijection &= seen.len() == MAX_TAXELS && taxel_address(MAX_TAXELS).is_err();
    notes.push(format!("bijection over {MAX_TAXELS}: {bijection}"));

    let topo = build_reference_topology();
    let layout = topo.sections.len() == 4 && topo.total_taxel_count == 56 && topo.taxels().count() == 56;
    notes.push(format!("{} sections / {} taxels", topo.sections.len(), topo.total_taxel_count));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut roundtrip = true;
    let mut sample = None;
    for _ in 0..10_000 {
        let n = rng.random_range(0..=MAX_TAXELS);
        let frame = Frame {
            sequence: rng.random(),
            timestamp_us: rng.random(),
            readings: (0..n).map(|_| rng.random_range(-30_000..=30_000)).collect(),
        };
        let bytes = encode_frame(&frame).unwrap();
        let back = decode_frame(&bytes).unwrap();
        roundtrip &= back == frame && encode_frame(&back).unwrap() == bytes && bytes.len() == 17 + 4 * n + 4;
        if n == 56 && sample.is_none() {
            sample = Some(bytes);
        }
    }
    notes.push(format!("10^4 round trips: {roundtrip}"));

    let mut undetected = 0usize;
    let mut trials = 0usize;
    let frames = [
        sample.expect("a 56-reading frame was drawn"),
        encode_frame(&Frame { sequence: 0, timestamp_us: 0, readings: vec![] }).unwrap(),
        encode_frame(&Frame { sequence: 9, timestamp_us: 1, readings: vec![30_000; 4] }).unwrap(),
    ];
    for bytes in &frames {
        for pos in 0..bytes.len() {
            for mask in 1..=255u8 {
                let mut bad = bytes.clone();
                bad[pos] ^= mask;
                trials += 1;
                if decode_frame(&bad).is_ok() {
                    undetected += 1;
                }
            }
        }
    }
    notes.push(format!("{undetected}/{trials} single-byte corruptions undetected"));
    outcome(bijection && layout && roundtrip && undetected == 0, notes.join(", "))
}

fn contact(link: &str, center: [f64; 2], r: f64, force: f64) -> ContactSpec {
    ContactSpec {
        link_id: link.into(),
        center,
        footprint_radius: r,
        force_profile: ForceProfile::constant(force),
        start: 0.0,
        duration: 1.0,
    }
}

fn contact_localization() -> Outcome {
    let topo = build_reference_topology();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut drawn = 0;
    while drawn < 1000 {
        let section = &topo.sections[rng.random_range(0..topo.sections.len())];
        let p = section.taxel_pitch_mm;
        let (w, h) = (section.grid_cols as f64 * p, section.grid_rows as f64 * p);
        let r = rng.random_range(1.0..60.0);
        let center = [rng.random_range(-r..w + r), rng.random_range(-r..h + r)];
        let force = rng.random_range(0.1..55.0);
        match project_contact(&topo, &contact(&section.link_id, center, r, force), 0.5) {
            Ok(map) => {
                worst = worst.max((map.values().sum::<f64>() - force).abs());
                drawn += 1;
            }
            Err(TopologyError::OffSkin(_)) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    let conservation = worst <= 1e-9;

    // mirror-symmetric loads on the 3x3 wrist center on the middle column
    let wrist = topo.section("wrist").unwrap();
    let mut symmetric = true;
    for _ in 0..200 {
        let mut forces = BTreeMap::new();
        for t in &wrist.taxels {
            if t.col == 0 {
                let f = rng.random_range(0.5..20.0);
                forces.insert(t.index, f);
                let mirror = wrist.taxels.iter().find(|m| m.row == t.row && m.col == 2).unwrap();
                forces.insert(mirror.index, f);
            } else if t.col == 1 {
                forces.insert(t.index, rng.random_range(0.5..20.0));
            }
        }
        let est = contact_centroid(&topo, &forces, 0.0);
        symmetric &= est.len() == 1 && (est[0].centroid[0] - 1.5 * wrist.taxel_pitch_mm).abs() < 1e-9;
    }
    let (a, b) = (&wrist.taxels[0], &wrist.taxels[1]);
    let pair = contact_centroid(&topo, &[(a.index, 4.0), (b.index, 4.0)].into(), 0.0);
    let mid = [(a.center[0] + b.center[0]) / 2.0, (a.center[1] + b.center[1]) / 2.0];
    symmetric &= (pair[0].centroid[0] - mid[0]).abs() < 1e-12 && (pair[0].centroid[1] - mid[1]).abs() < 1e-12;

    let mut scale_invariant = true;
    for _ in 0..200 {
        let forces: BTreeMap<usize, f64> = topo
            .taxels()
            .map(|t| (t.index, rng.random_range(0.0..10.0)))
            .collect();
        let threshold = rng.random_range(0.0..5.0);
        let k = rng.random_range(0.01..100.0);
        let scaled: BTreeMap<usize, f64> = forces.iter().map(|(&i, &f)| (i, k * f)).collect();
        let (e1, e2) = (
            contact_centroid(&topo, &forces, threshold),
            contact_centroid(&topo, &scaled, k * threshold),
        );
        scale_invariant &= e1.len() == e2.len()
            && e1.iter().zip(&e2).all(|(x, y)| {
                x.activated_taxels == y.activated_taxels
                    && (x.centroid[0] - y.centroid[0]).abs() < 1e-9
                    && (x.centroid[1] - y.centroid[1]).abs() < 1e-9
            });
    }

    // one-pitch translation shifts the map by one column on interior taxels
    let forearm = topo.section("forearm").unwrap();
    let p = forearm.taxel_pitch_mm;
    let at = |row: usize, col: usize| forearm.taxels.iter().find(|t| t.row == row && t.col == col).map(|t| t.index);
    let m1 = project_contact(&topo, &contact("forearm", [1.5 * p + 4.0, 1.5 * p + 3.0], 12.0, 10.0), 0.5).unwrap();
    let m2 = project_contact(&topo, &contact("forearm", [2.5 * p + 4.0, 1.5 * p + 3.0], 12.0, 10.0), 0.5).unwrap();
    let mut equivariant = true;
    for row in 1..3 {
        for col in 1..3 {
            if let (Some(i), Some(j)) = (at(row, col), at(row, col + 1)) {
                let (f1, f2) = (m1.get(&i).copied().unwrap_or(0.0), m2.get(&j).copied().unwrap_or(0.0));
                equivariant &= (f1 - f2).abs() < 1e-9;
            }
        }
    }

    outcome(
        conservation && symmetric && scale_invariant && equivariant,
        format!(
            "conservation worst {worst:.1e} N over 1000 footprints, symmetry {symmetric}, \
             scale invariance {scale_invariant}, translation {equivariant}"
        ),
    )
}

fn physical_consistency() -> Outcome {
    let geom = TaxelGeometry::default();
    let (eps, l, h0, ra, m, c0) = (
        geom.permittivity(),
        geom.side_length(),
        geom.dielectric_thickness(),
        geom.bend_inner_radius(),
        geom.bend_slope(),
        geom.base_capacitance(),
    );
    // C0(1 - mθ) + k(θ - mθ²) with k = eps·L / ln(1 + h0/Ra)
    let k = eps * l / (1.0 + h0 / ra).ln();
    let (a, b, c) = (-m * k, k - m * c0, c0);
    let q = bending_quadratic_form(&geom);
    let coefficient_wise = (q.p2 - a).abs() <= 1e-9 * a.abs().max(1.0)
        && (q.p1 - b).abs() <= 1e-9 * b.abs().max(1.0)
        && (q.p0 - c).abs() <= 1e-9 * c.abs().max(1.0);
    let mut numeric = true;
    for i in 0..=50 {
        let theta = 1.5 * i as f64 / 50.0;
        let direct = c0 * (1.0 - m * theta) + k * (theta - m * theta * theta);
        let physical = bending_capacitance_physical(&geom, theta).unwrap();
        numeric &= (physical - direct).abs() <= 1e-9 && (q.eval(theta) - direct).abs() <= 1e-9;
    }
    let at_zero = bending_capacitance_physical(&geom, 0.0).unwrap();
    let pass = coefficient_wise && numeric && at_zero == c0;
    outcome(
        pass,
        format!(
            "quadratic ({:.6}, {:.6}, {:.6}) vs expansion ({a:.6}, {b:.6}, {c:.6}), physical(0) = {at_zero} (C0 = {c0})",
            q.p2, q.p1, q.p0
        ),
    )
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let results = [
        criterion(1, "fitted-model fidelity", s(1), fitted_model_fidelity),
        criterion(2, "noise reduction", s(10), noise_reduction_reproduction),
        criterion(3, "hysteresis", s(5), hysteresis_reproduction),
        criterion(4, "end-to-end force accuracy", s(10), end_to_end_accuracy),
        criterion(5, "durability", s(30), durability),
        criterion(6, "model filtering", s(5), filtering),
        criterion(7, "topology and protocol", s(5), topology_protocol),
        criterion(8, "contact localization", s(5), contact_localization),
        criterion(9, "physical bending model", s(1), physical_consistency),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
