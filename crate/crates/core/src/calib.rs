//! Fitting and estimation: inverse-law and quadratic regressions, the
//! capacitance → force calibration built from press-release cycles, force
//! lookup, model-based filtering and joint-motion offsets.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capmodel::{
    bending_capacitance, lateral_capacitance, FittedCoefficients, InverseLaw, Quadratic,
};
use crate::error::DomainError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("calibration failed: {0}")]
    NonInvertible(String),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    #[default]
    Simulated,
    Csv,
}

/// `(x, C)` pairs for a regression, with provenance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleSet {
    pub points: Vec<(f64, f64)>,
    /// Unit of the independent variable, e.g. `"mm"`, `"ratio"`, `"rad"`.
    pub x_unit: String,
    pub source: SampleSource,
    pub seed: Option<u64>,
}

impl SampleSet {
    pub fn new(points: Vec<(f64, f64)>, x_unit: &str) -> Self {
        SampleSet {
            points,
            x_unit: x_unit.to_string(),
            ..Default::default()
        }
    }

    fn check(&self, need: usize) -> Result<(), CalibError> {
        if self.points.len() < need {
            return Err(CalibError::TooFewSamples {
                need,
                got: self.points.len(),
            });
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|(x, c)| !x.is_finite() || !c.is_finite())
        {
            return Err(CalibError::NonFinite(i));
        }
        Ok(())
    }
}

/// Least squares `min ‖A β - y‖` by Householder QR. `columns` holds the
/// design matrix column by column.
pub fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>, CalibError> {
    let n = y.len();
    let p = columns.len();
    if n < p {
        return Err(CalibError::TooFewSamples { need: p, got: n });
    }
    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut b = y.to_vec();
    let norms: Vec<f64> = a
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for k in 0..p {
        let alpha = {
            let s = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if a[k][k] > 0.0 {
                -s
            } else {
                s
            }
        };
        if alpha.abs() <= 1e-12 * norms[k].max(f64::MIN_POSITIVE) {
            return Err(CalibError::RankDeficient(format!(
                "column {k} is a combination of the previous ones"
            )));
        }
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        let reflect = |col: &mut [f64]| {
            let dot: f64 = v.iter().zip(col.iter()).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in col.iter_mut().zip(&v) {
                *c -= f * vi;
            }
        };
        for col in a.iter_mut().skip(k) {
            reflect(&mut col[k..]);
        }
        reflect(&mut b[k..]);
    }
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = ((i + 1)..p).map(|j| a[j][i] * beta[j]).sum();
        beta[i] = (b[i] - s) / a[i][i];
    }
    Ok(beta)
}

/// OLS fit of `C = a / h + b` on the transformed regressor `1 / h`.
pub fn fit_inverse_law(samples: &SampleSet) -> Result<InverseLaw, CalibError> {
    samples.check(2)?;
    if let Some(i) = samples.points.iter().position(|(h, _)| *h <= 0.0) {
        return Err(DomainError::NonPositive {
            name: "thickness",
            value: samples.points[i].0,
        }
        .into());
    }
    let first = samples.points[0].0;
    if samples.points.iter().all(|(h, _)| *h == first) {
        return Err(CalibError::RankDeficient("all thickness values are equal".into()));
    }
    let inv: Vec<f64> = samples.points.iter().map(|(h, _)| 1.0 / h).collect();
    let ones = vec![1.0; inv.len()];
    let c: Vec<f64> = samples.points.iter().map(|(_, c)| *c).collect();
    let beta = least_squares(&[inv, ones], &c)?;
    Ok(InverseLaw {
        scale: beta[0],
        offset: beta[1],
    })
}

/// Second-order polynomial least squares.
pub fn fit_poly2(samples: &SampleSet) -> Result<Quadratic, CalibError> {
    samples.check(3)?;
    let mut xs: Vec<f64> = samples.points.iter().map(|(x, _)| *x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(CalibError::RankDeficient(format!(
            "{} distinct abscissae, need 3",
            xs.len()
        )));
    }
    let x: Vec<f64> = samples.points.iter().map(|(x, _)| *x).collect();
    let y: Vec<f64> = samples.points.iter().map(|(_, c)| *c).collect();
    let beta = least_squares(
        &[
            x.iter().map(|v| v * v).collect(),
            x.clone(),
            vec![1.0; x.len()],
        ],
        &y,
    )?;
    Ok(Quadratic {
        p2: beta[0],
        p1: beta[1],
        p0: beta[2],
    })
}

/// One `(capacitance change pF, force N)` sample of a press-release trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclePoint {
    pub t: f64,
    pub c: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub c: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualStats {
    pub rms: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub capacitance: String,
    pub force: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            capacitance: "pF".into(),
            force: "N".into(),
        }
    }
}

/// Monotone piecewise-linear map from capacitance change to force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveRepr")]
pub struct CalibrationCurve {
    pub knots: Vec<Knot>,
    /// Branch-centroid residuals in N.
    pub residual: ResidualStats,
    pub range: (f64, f64),
    #[serde(default)]
    pub units: Units,
}

#[derive(Deserialize)]
struct CurveRepr {
    knots: Vec<Knot>,
    residual: ResidualStats,
    #[allow(dead_code)]
    range: Option<(f64, f64)>,
    #[serde(default)]
    units: Units,
}

impl TryFrom<CurveRepr> for CalibrationCurve {
    type Error = CalibError;
    fn try_from(r: CurveRepr) -> Result<Self, Self::Error> {
        CalibrationCurve::new(r.knots, r.residual, r.units)
    }
}

/// Where a lookup fell relative to the calibrated span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeFlag {
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceEstimate {
    pub force: f64,
    pub out_of_range: Option<RangeFlag>,
}

impl CalibrationCurve {
    pub fn new(knots: Vec<Knot>, residual: ResidualStats, units: Units) -> Result<Self, CalibError> {
        if knots.len() < 2 {
            return Err(CalibError::NonInvertible(format!(
                "{} knots, need at least 2",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.c.is_finite() || !k.f.is_finite()) {
            return Err(CalibError::NonInvertible("non-finite knot".into()));
        }
        if let Some(i) = knots.windows(2).position(|w| !(w[1].c > w[0].c && w[1].f > w[0].f)) {
            return Err(CalibError::NonInvertible(format!(
                "knots {i} and {} are not strictly increasing",
                i + 1
            )));
        }
        let range = (knots[0].c, knots[knots.len() - 1].c);
        Ok(CalibrationCurve {
            knots,
            residual,
            range,
            units,
        })
    }

    pub fn estimate(&self, c: f64) -> ForceEstimate {
        estimate_force(self, c)
    }
}

/// Piecewise-linear lookup. Below the calibrated span reads as no force,
/// above it holds the last knot; both are flagged.
pub fn estimate_force(curve: &CalibrationCurve, c: f64) -> ForceEstimate {
    let k = &curve.knots;
    if c < curve.range.0 {
        return ForceEstimate {
            force: 0.0,
            out_of_range: Some(RangeFlag::Below),
        };
    }
    if c > curve.range.1 {
        return ForceEstimate {
            force: k[k.len() - 1].f,
            out_of_range: Some(RangeFlag::Above),
        };
    }
    let i = k.partition_point(|p| p.c < c);
    let force = if k[i].c == c {
        k[i].f
    } else {
        let (a, b) = (k[i - 1], k[i]);
        a.f + (b.f - a.f) * (c - a.c) / (b.c - a.c)
    };
    ForceEstimate {
        force,
        out_of_range: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Number of force bins.
    pub knots: usize,
    /// Minimum reversal, as a fraction of the force span, that splits a
    /// trace into loading and unloading runs.
    pub reversal_fraction: f64,
    /// Largest isotonic correction tolerated, as a fraction of the
    /// capacitance span.
    pub max_isotonic_adjustment: f64,
    /// Largest pooled standard deviation of capacitance inside a bin and
    /// branch, as a fraction of the capacitance span.
    pub max_bin_spread: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            knots: 64,
            reversal_fraction: 0.05,
            max_isotonic_adjustment: 0.05,
            max_bin_spread: 0.1,
        }
    }
}

/// Labels each point of a trace as loading (`true`) or unloading, using
/// zig-zag turning points so small wobbles in force do not flip direction.
/// Also returns the turning points and samples level with them, which
/// belong to both branches.
fn branch_labels(trace: &[CyclePoint], threshold: f64) -> (Vec<bool>, Vec<usize>) {
    let n = trace.len();
    let mut labels = vec![true; n];
    if n == 0 {
        return (labels, Vec::new());
    }
    let mut turns = Vec::new();
    let mut rising = true;
    let mut extreme = 0usize;
    for (i, p) in trace.iter().enumerate() {
        let e = trace[extreme].f;
        if rising {
            if p.f >= e {
                extreme = i;
            } else if e - p.f > threshold {
                turns.push(extreme);
                rising = false;
                extreme = i;
            }
        } else if p.f <= e {
            extreme = i;
        } else if p.f - e > threshold {
            turns.push(extreme);
            rising = true;
            extreme = i;
        }
    }
    // samples level with a turning point belong to both branches
    let mut both = Vec::new();
    for &t in &turns {
        let f = trace[t].f;
        let lo = (0..t).rev().take_while(|&j| trace[j].f == f).last().unwrap_or(t);
        let hi = (t + 1..n).take_while(|&j| trace[j].f == f).last().unwrap_or(t);
        both.extend(lo..=hi);
    }
    both.dedup();
    let mut dir = true;
    let mut next = turns.iter().peekable();
    for (i, label) in labels.iter_mut().enumerate() {
        *label = dir;
        if next.peek() == Some(&&i) {
            next.next();
            dir = !dir;
        }
    }
    (labels, both)
}

#[derive(Debug, Clone, Copy, Default)]
struct BinAccum {
    c: f64,
    f: f64,
    c2: f64,
    n: usize,
}

impl BinAccum {
    fn add(&mut self, p: &CyclePoint) {
        self.c += p.c;
        self.f += p.f;
        self.c2 += p.c * p.c;
        self.n += 1;
    }
    /// Sum of squared capacitance deviations from the bin mean.
    fn spread(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (self.c2 - self.c * self.c / self.n as f64).max(0.0)
    }
    fn mean(&self) -> Option<(f64, f64)> {
        (self.n > 0).then(|| (self.c / self.n as f64, self.f / self.n as f64))
    }
}

/// Pool-adjacent-violators: weighted increasing fit of `y` over sorted `x`.
/// Returns blocks as `(weighted mean x, pooled y, weight)`.
fn isotonic_blocks(points: &[(f64, f64, f64)]) -> Vec<(f64, f64, f64)> {
    let mut blocks: Vec<(f64, f64, f64)> = Vec::with_capacity(points.len());
    for &(x, y, w) in points {
        blocks.push((x * w, y * w, w));
        while blocks.len() > 1 {
            let (x1, y1, w1) = blocks[blocks.len() - 1];
            let (x0, y0, w0) = blocks[blocks.len() - 2];
            if y0 / w0 < y1 / w1 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (x0 + x1, y0 + y1, w0 + w1);
        }
    }
    blocks
        .into_iter()
        .map(|(x, y, w)| (x / w, y / w, w))
        .collect()
}

/// Builds a monotone calibration from press-release traces of
/// `(capacitance change, force)`.
///
/// Samples are split into loading and unloading runs and binned by the
/// reference force, which carries no measurement noise, so capacitance
/// noise averages out instead of biasing the end bins. Each bin's knot
/// averages the two branch centroids, which cancels a symmetric hysteresis
/// loop to first order. An isotonic projection then forces capacitance to
/// rise with force. Residuals compare each
/// branch centroid with the final curve.
pub fn fit_force_calibration(
    cycles: &[Vec<CyclePoint>],
    opts: &CalibrationOptions,
) -> Result<CalibrationCurve, CalibError> {
    let total: usize = cycles.iter().map(Vec::len).sum();
    if total < 2 * opts.knots.max(2) {
        return Err(CalibError::TooFewSamples {
            need: 2 * opts.knots.max(2),
            got: total,
        });
    }
    let all = || cycles.iter().flatten();
    if let Some(i) = all().position(|p| !p.c.is_finite() || !p.f.is_finite() || p.f < 0.0) {
        return Err(CalibError::NonFinite(i));
    }
    let (c_lo, c_hi) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.c), hi.max(p.c))
    });
    let (f_lo, f_hi) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.f), hi.max(p.f))
    });
    let f_span = f_hi - f_lo;
    if !(c_hi > c_lo) || !(f_span > 0.0) {
        return Err(CalibError::NonInvertible(
            "capacitance or force does not vary".into(),
        ));
    }

    let k = opts.knots.max(2);
    let c_span = c_hi - c_lo;
    let width = f_span / k as f64;
    let mut loading = vec![BinAccum::default(); k];
    let mut unloading = vec![BinAccum::default(); k];
    for trace in cycles {
        let (labels, turns) = branch_labels(trace, opts.reversal_fraction * f_span);
        for (i, (p, up)) in trace.iter().zip(labels).enumerate() {
            let bin = (((p.f - f_lo) / width) as usize).min(k - 1);
            if turns.binary_search(&i).is_ok() {
                loading[bin].add(p);
                unloading[bin].add(p);
            } else if up {
                loading[bin].add(p);
            } else {
                unloading[bin].add(p);
            }
        }
    }

    let mut raw: Vec<(f64, f64, f64)> = Vec::with_capacity(k);
    let mut centroids: Vec<(f64, f64)> = Vec::new();
    for (l, u) in loading.iter().zip(&unloading) {
        let (lm, um) = (l.mean(), u.mean());
        centroids.extend(lm.into_iter().chain(um));
        let knot = match (lm, um) {
            (Some(a), Some(b)) => ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => continue,
        };
        raw.push((knot.1, knot.0, (l.n + u.n) as f64));
    }

    let blocks = isotonic_blocks(&raw);
    let mut adjustment = 0.0;
    let mut weight = 0.0;
    {
        let mut bi = 0usize;
        let mut used = 0.0;
        for &(_, c, w) in &raw {
            adjustment += w * (c - blocks[bi].1).abs();
            weight += w;
            used += w;
            if used >= blocks[bi].2 - 1e-9 && bi + 1 < blocks.len() {
                bi += 1;
                used = 0.0;
            }
        }
    }
    let mean_adjustment = adjustment / weight / c_span;
    let within = loading.iter().chain(&unloading).map(BinAccum::spread).sum::<f64>();
    let within_sd = (within / total as f64).sqrt() / c_span;
    if mean_adjustment > opts.max_isotonic_adjustment
        || within_sd > opts.max_bin_spread
        || blocks.len() < 2
    {
        return Err(CalibError::NonInvertible(format!(
            "capacitance is not monotone in force: isotonic projection moved knots by \
             {:.1}% of the capacitance span on average, capacitance within a force bin \
             spreads by {:.1}%, {} distinct levels remain",
            100.0 * mean_adjustment,
            100.0 * within_sd,
            blocks.len()
        )));
    }

    let knots: Vec<Knot> = blocks.iter().map(|&(f, c, _)| Knot { c, f }).collect();
    let mut curve = CalibrationCurve::new(knots, ResidualStats::default(), Units::default())?;
    let residuals: Vec<f64> = centroids
        .iter()
        .map(|&(c, f)| f - estimate_force(&curve, c.clamp(curve.range.0, curve.range.1)).force)
        .collect();
    let n = residuals.len().max(1) as f64;
    curve.residual = ResidualStats {
        rms: (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt(),
        max: residuals.iter().fold(0.0, |m: f64, r| m.max(r.abs())),
    };
    Ok(curve)
}

/// Convex blend of a model prediction and a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFilter {
    pub analytical_weight: f64,
}

impl Default for ModelFilter {
    fn default() -> Self {
        ModelFilter {
            analytical_weight: 0.4,
        }
    }
}

impl ModelFilter {
    pub fn new(analytical_weight: f64) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&analytical_weight) {
            return Err(DomainError::Invalid(format!(
                "analytical weight {analytical_weight} outside [0, 1]"
            )));
        }
        Ok(ModelFilter { analytical_weight })
    }

    pub fn apply(&self, analytical: f64, measured: f64) -> f64 {
        self.analytical_weight * analytical + (1.0 - self.analytical_weight) * measured
    }
}

/// `0.4 · analytical + 0.6 · measured`.
pub fn model_filter(analytical: f64, measured: f64) -> f64 {
    ModelFilter::default().apply(analytical, measured)
}

/// Capacitance added by lateral compression and bending, to be subtracted
/// from taxels riding over a moving joint.
pub fn joint_motion_offset(
    coeffs: &FittedCoefficients,
    lateral_ratio: f64,
    bend_angle: f64,
) -> Result<f64, DomainError> {
    let lateral = lateral_capacitance(coeffs, lateral_ratio)? - coeffs.lateral.p0;
    let bending = bending_capacitance(coeffs, bend_angle)? - coeffs.bending.p0;
    Ok(lateral + bending)
}

fn csv_error(line: u64, message: impl Into<String>) -> CalibError {
    CalibError::Csv {
        line,
        message: message.into(),
    }
}

fn read_csv<R: Read>(reader: R, header: &[&str]) -> Result<Vec<(u64, Vec<f64>)>, CalibError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let found = rdr.headers().map_err(|e| csv_error(1, e.to_string()))?;
    let found: Vec<&str> = found.iter().collect();
    if found != header {
        return Err(csv_error(
            1,
            format!("expected header {:?}, found {:?}", header.join(","), found.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_error(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let values = record
            .iter()
            .zip(header)
            .map(|(cell, name)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_error(line, format!("column {name}: {cell:?} is not a number")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((line, values));
    }
    Ok(rows)
}

/// Reads an `x,c` sample file.
pub fn read_samples_csv<R: Read>(reader: R, x_unit: &str) -> Result<SampleSet, CalibError> {
    let rows = read_csv(reader, &["x", "c"])?;
    Ok(SampleSet {
        points: rows.into_iter().map(|(_, v)| (v[0], v[1])).collect(),
        x_unit: x_unit.to_string(),
        source: SampleSource::Csv,
        seed: None,
    })
}

/// Reads a `t,c,f` trace; `c` is the capacitance change from baseline.
pub fn read_cycles_csv<R: Read>(reader: R) -> Result<Vec<CyclePoint>, CalibError> {
    let rows = read_csv(reader, &["t", "c", "f"])?;
    let mut out = Vec::with_capacity(rows.len());
    let mut last_t = f64::NEG_INFINITY;
    for (line, v) in rows {
        if v[0] < last_t {
            return Err(csv_error(line, format!("time {} goes backwards", v[0])));
        }
        if v[2] < 0.0 {
            return Err(csv_error(line, format!("negative force {}", v[2])));
        }
        last_t = v[0];
        out.push(CyclePoint {
            t: v[0],
            c: v[1],
            f: v[2],
        });
    }
    Ok(out)
}

pub fn write_cycles_csv<W: std::io::Write>(writer: W, trace: &[CyclePoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "c", "f"])?;
    for p in trace {
        w.write_record([p.t.to_string(), p.c.to_string(), p.f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
