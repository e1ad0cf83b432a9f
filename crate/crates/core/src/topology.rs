//! Skin layout: sections of taxels on unwrapped link surfaces, the
//! mux/CDC/channel address space, contact projection and localization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capmodel::TaxelModel;
use crate::dynamics::{ShieldingMode, SensorChannelConfig};

pub const MUX_COUNT: usize = 8;
pub const CDCS_PER_MUX: usize = 7;
pub const CHANNELS_PER_CDC: usize = 4;
pub const MAX_TAXELS: usize = MUX_COUNT * CDCS_PER_MUX * CHANNELS_PER_CDC;
pub const DEFAULT_PITCH_MM: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("taxel index {0} outside address space 0..{MAX_TAXELS}")]
    IndexOutOfRange(usize),
    #[error("address collision on taxel indices {0:?}")]
    AddressCollision(Vec<usize>),
    #[error("{0} taxels exceed the {MAX_TAXELS}-taxel controller limit")]
    TooManyTaxels(usize),
    #[error("unknown link {0:?}")]
    UnknownLink(String),
    #[error("duplicate link {0:?}")]
    DuplicateLink(String),
    #[error("section {link}: {reason}")]
    BadSection { link: String, reason: String },
    #[error("contact: {0}")]
    BadContact(String),
    #[error("contact footprint on {0:?} misses every taxel")]
    OffSkin(String),
}

/// Electrical location of a taxel: multiplexer port, converter, channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaxelAddress {
    pub mux: u8,
    pub cdc: u8,
    pub channel: u8,
}

pub fn taxel_address(index: usize) -> Result<TaxelAddress, TopologyError> {
    if index >= MAX_TAXELS {
        return Err(TopologyError::IndexOutOfRange(index));
    }
    let per_mux = CDCS_PER_MUX * CHANNELS_PER_CDC;
    Ok(TaxelAddress {
        mux: (index / per_mux) as u8,
        cdc: ((index % per_mux) / CHANNELS_PER_CDC) as u8,
        channel: (index % CHANNELS_PER_CDC) as u8,
    })
}

pub fn address_index(addr: TaxelAddress) -> Result<usize, TopologyError> {
    let (m, c, ch) = (addr.mux as usize, addr.cdc as usize, addr.channel as usize);
    if m >= MUX_COUNT || c >= CDCS_PER_MUX || ch >= CHANNELS_PER_CDC {
        return Err(TopologyError::IndexOutOfRange(
            (m * CDCS_PER_MUX + c) * CHANNELS_PER_CDC + ch,
        ));
    }
    Ok((m * CDCS_PER_MUX + c) * CHANNELS_PER_CDC + ch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Taxel {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    /// Center on the unwrapped surface, mm.
    pub center: [f64; 2],
}

/// Layout request for one section; taxels fill the grid row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionSpec {
    pub link_id: String,
    pub rows: usize,
    pub cols: usize,
    pub taxel_count: usize,
    #[serde(default = "default_pitch")]
    pub pitch_mm: f64,
    /// Explicit taxel indices; contiguous after the previous section when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

fn default_pitch() -> f64 {
    DEFAULT_PITCH_MM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinSection {
    pub link_id: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub taxel_pitch_mm: f64,
    pub taxels: Vec<Taxel>,
}

impl SkinSection {
    /// Square footprint `[u0, u1] × [v0, v1]` of a taxel.
    pub fn taxel_bounds(&self, taxel: &Taxel) -> [f64; 4] {
        let p = self.taxel_pitch_mm;
        let (u0, v0) = (taxel.col as f64 * p, taxel.row as f64 * p);
        [u0, u0 + p, v0, v0 + p]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinTopology {
    pub sections: Vec<SkinSection>,
    pub total_taxel_count: usize,
}

/// Section layout of the reference four-link arm.
pub fn reference_sections() -> Vec<SectionSpec> {
    [("upper_arm", 4, 5, 19), ("forearm", 4, 5, 19), ("wrist", 3, 3, 9), ("hand", 3, 3, 9)]
        .into_iter()
        .map(|(link, rows, cols, n)| SectionSpec {
            link_id: link.to_string(),
            rows,
            cols,
            taxel_count: n,
            pitch_mm: DEFAULT_PITCH_MM,
            indices: None,
        })
        .collect()
}

pub fn build_reference_topology() -> SkinTopology {
    SkinTopology::from_specs(&reference_sections()).expect("reference layout is valid")
}

impl SkinTopology {
    pub fn from_specs(specs: &[SectionSpec]) -> Result<Self, TopologyError> {
        let mut next = 0usize;
        let mut sections = Vec::with_capacity(specs.len());
        let mut links = BTreeSet::new();
        for spec in specs {
            let bad = |reason: String| TopologyError::BadSection {
                link: spec.link_id.clone(),
                reason,
            };
            if !links.insert(spec.link_id.clone()) {
                return Err(TopologyError::DuplicateLink(spec.link_id.clone()));
            }
            if spec.taxel_count > spec.rows * spec.cols {
                return Err(bad(format!(
                    "{} taxels do not fit a {}x{} grid",
                    spec.taxel_count, spec.rows, spec.cols
                )));
            }
            if !(spec.pitch_mm > 0.0 && spec.pitch_mm.is_finite()) {
                return Err(bad(format!("pitch {} mm must be positive", spec.pitch_mm)));
            }
            let indices: Vec<usize> = match &spec.indices {
                Some(list) if list.len() != spec.taxel_count => {
                    return Err(bad(format!(
                        "{} explicit indices for {} taxels",
                        list.len(),
                        spec.taxel_count
                    )))
                }
                Some(list) => list.clone(),
                None => (next..next + spec.taxel_count).collect(),
            };
            if let Some(&last) = indices.iter().max() {
                next = next.max(last + 1);
            }
            let p = spec.pitch_mm;
            let taxels = indices
                .into_iter()
                .enumerate()
                .map(|(k, index)| {
                    let (row, col) = (k / spec.cols, k % spec.cols);
                    Taxel {
                        index,
                        row,
                        col,
                        center: [(col as f64 + 0.5) * p, (row as f64 + 0.5) * p],
                    }
                })
                .collect();
            sections.push(SkinSection {
                link_id: spec.link_id.clone(),
                grid_rows: spec.rows,
                grid_cols: spec.cols,
                taxel_pitch_mm: p,
                taxels,
            });
        }
        let topo = SkinTopology {
            total_taxel_count: sections.iter().map(|s| s.taxels.len()).sum(),
            sections,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.total_taxel_count > MAX_TAXELS {
            return Err(TopologyError::TooManyTaxels(self.total_taxel_count));
        }
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for t in self.taxels() {
            taxel_address(t.index)?;
            *seen.entry(t.index).or_default() += 1;
        }
        let mut dup: Vec<usize> = seen.into_iter().filter(|&(_, n)| n > 1).map(|(i, _)| i).collect();
        if !dup.is_empty() {
            dup.sort_unstable();
            return Err(TopologyError::AddressCollision(dup));
        }
        Ok(())
    }

    pub fn taxels(&self) -> impl Iterator<Item = &Taxel> {
        self.sections.iter().flat_map(|s| s.taxels.iter())
    }

    pub fn section(&self, link_id: &str) -> Result<&SkinSection, TopologyError> {
        self.sections
            .iter()
            .find(|s| s.link_id == link_id)
            .ok_or_else(|| TopologyError::UnknownLink(link_id.to_string()))
    }

    /// Taxel indices in address order.
    pub fn scan_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = self.taxels().map(|t| t.index).collect();
        order.sort_unstable();
        order
    }

    /// `(link, taxel)` for every taxel, keyed by index.
    pub fn locate(&self) -> BTreeMap<usize, (&str, &Taxel)> {
        self.sections
            .iter()
            .flat_map(|s| s.taxels.iter().map(move |t| (t.index, (s.link_id.as_str(), t))))
            .collect()
    }
}

/// Piecewise-linear force over time, in N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceProfile {
    pub times: Vec<f64>,
    pub forces: Vec<f64>,
}

impl ForceProfile {
    pub fn constant(force: f64) -> Self {
        ForceProfile {
            times: vec![0.0],
            forces: vec![force],
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&x| x <= t);
        if i == 0 {
            return self.forces[0];
        }
        if i == self.times.len() {
            return self.forces[i - 1];
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let (f0, f1) = (self.forces[i - 1], self.forces[i]);
        f0 + (f1 - f0) * (t - t0) / (t1 - t0)
    }
}

/// A simulated circular contact on one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSpec {
    pub link_id: String,
    /// Footprint center on the unwrapped surface, mm.
    pub center: [f64; 2],
    pub footprint_radius: f64,
    pub force_profile: ForceProfile,
    /// Contact begins at `start` and lasts `duration` seconds.
    #[serde(default)]
    pub start: f64,
    pub duration: f64,
}

impl ContactSpec {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let bad = |m: String| Err(TopologyError::BadContact(m));
        if !(self.footprint_radius > 0.0) {
            return bad(format!("radius {} must be positive", self.footprint_radius));
        }
        let p = &self.force_profile;
        if p.times.is_empty() || p.times.len() != p.forces.len() {
            return bad("force profile needs matching, non-empty times and forces".into());
        }
        if p.times.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("force profile times must increase".into());
        }
        if p.forces.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return bad("forces must be finite and non-negative".into());
        }
        if !(self.duration >= 0.0) || !self.start.is_finite() {
            return bad("duration must be non-negative".into());
        }
        Ok(())
    }

    pub fn active_at(&self, t: f64) -> bool {
        t >= self.start && t <= self.start + self.duration
    }

    /// Total force at absolute time `t`; zero outside the active window.
    pub fn force_at(&self, t: f64) -> f64 {
        if !self.active_at(t) {
            return 0.0;
        }
        self.force_profile.at(t - self.start)
    }
}

/// Antiderivative of `sqrt(r² - u²)`.
fn half_chord_integral(u: f64, r: f64) -> f64 {
    let u = u.clamp(-r, r);
    let s = (r * r - u * u).max(0.0).sqrt();
    0.5 * (u * s + r * r * (u / r).asin())
}

/// Exact area of the intersection between the disc of radius `r` centered
/// at `(cx, cy)` and the rectangle `[x0, x1] × [y0, y1]`.
pub fn disc_rect_overlap(cx: f64, cy: f64, r: f64, rect: [f64; 4]) -> f64 {
    let [x0, x1, y0, y1] = [rect[0] - cx, rect[1] - cx, rect[2] - cy, rect[3] - cy];
    let a = x0.max(-r);
    let b = x1.min(r);
    if a >= b || y0 >= r || y1 <= -r {
        return 0.0;
    }
    // the integrand min(y1, s) - max(y0, -s) changes form where s(u) = |y|
    let mut cuts = vec![a, b];
    for y in [y0, y1] {
        if y.abs() < r {
            let w = (r * r - y * y).sqrt();
            cuts.extend([-w, w].into_iter().filter(|&c| c > a && c < b));
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let chord = |u: f64| (r * r - u * u).max(0.0).sqrt();
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (p, q) = (w[0], w[1]);
        if q <= p {
            continue;
        }
        let s = chord(0.5 * (p + q));
        let top_is_arc = s < y1;
        let bottom_is_arc = -s > y0;
        if (if top_is_arc { s } else { y1 }) <= (if bottom_is_arc { -s } else { y0 }) {
            continue;
        }
        let arc = half_chord_integral(q, r) - half_chord_integral(p, r);
        let width = q - p;
        area += match (top_is_arc, bottom_is_arc) {
            (true, true) => 2.0 * arc,
            (true, false) => arc - y0 * width,
            (false, true) => y1 * width + arc,
            (false, false) => (y1 - y0) * width,
        };
    }
    area.clamp(0.0, PI * r * r)
}

/// Distributes the instantaneous contact force over the section's taxels in
/// proportion to footprint overlap area. Forces sum to the contact total.
pub fn project_contact(
    topo: &SkinTopology,
    spec: &ContactSpec,
    t: f64,
) -> Result<BTreeMap<usize, f64>, TopologyError> {
    spec.validate()?;
    let section = topo.section(&spec.link_id)?;
    let total = spec.force_at(t);
    let overlaps: Vec<(usize, f64)> = section
        .taxels
        .iter()
        .map(|tx| {
            let area = disc_rect_overlap(
                spec.center[0],
                spec.center[1],
                spec.footprint_radius,
                section.taxel_bounds(tx),
            );
            (tx.index, area)
        })
        .filter(|&(_, a)| a > 0.0)
        .collect();
    let covered: f64 = overlaps.iter().map(|&(_, a)| a).sum();
    if covered <= 0.0 {
        return Err(TopologyError::OffSkin(spec.link_id.clone()));
    }
    let mut out = BTreeMap::new();
    if total == 0.0 {
        return Ok(out);
    }
    for (index, area) in overlaps {
        out.insert(index, total * area / covered);
    }
    Ok(out)
}

/// Sums the projections of several contacts at time `t`.
pub fn project_contacts(
    topo: &SkinTopology,
    specs: &[ContactSpec],
    t: f64,
) -> Result<BTreeMap<usize, f64>, TopologyError> {
    let mut out = BTreeMap::new();
    for spec in specs {
        for (i, f) in project_contact(topo, spec, t)? {
            *out.entry(i).or_insert(0.0) += f;
        }
    }
    Ok(out)
}

/// Localized contact on one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEstimate {
    pub link_id: String,
    pub activated_taxels: Vec<usize>,
    pub per_taxel_force: BTreeMap<usize, f64>,
    pub centroid: [f64; 2],
    pub total_force: f64,
}

/// Force-weighted center of the taxels reading above `threshold`, one
/// estimate per link with activity. An empty result means no contact.
pub fn contact_centroid(
    topo: &SkinTopology,
    forces: &BTreeMap<usize, f64>,
    threshold: f64,
) -> Vec<ContactEstimate> {
    let mut out = Vec::new();
    for section in &topo.sections {
        let active: Vec<(&Taxel, f64)> = section
            .taxels
            .iter()
            .filter_map(|t| forces.get(&t.index).map(|&f| (t, f)))
            .filter(|&(_, f)| f > threshold)
            .collect();
        if active.is_empty() {
            continue;
        }
        let total: f64 = active.iter().map(|&(_, f)| f).sum();
        let mut centroid = [0.0; 2];
        for &(t, f) in &active {
            centroid[0] += f * t.center[0];
            centroid[1] += f * t.center[1];
        }
        centroid = [centroid[0] / total, centroid[1] / total];
        out.push(ContactEstimate {
            link_id: section.link_id.clone(),
            activated_taxels: active.iter().map(|(t, _)| t.index).collect(),
            per_taxel_force: active.iter().map(|&(t, f)| (t.index, f)).collect(),
            centroid,
            total_force: total,
        });
    }
    out
}

/// Force equivalent of three noise standard deviations under active and
/// passive shielding.
pub fn default_activation_threshold(model: &TaxelModel, cfg: &SensorChannelConfig) -> f64 {
    let shielded = SensorChannelConfig {
        shielding: ShieldingMode::ActivePassive,
        ..*cfg
    };
    model
        .force_for_delta(3.0 * shielded.noise_sigma())
        .unwrap_or(0.0)
}
