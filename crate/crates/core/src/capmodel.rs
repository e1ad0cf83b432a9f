//! Closed-form capacitance models for a single taxel.
//!
//! A taxel is a parallel-plate capacitor whose dielectric is a compressible
//! fabric spacer. Three deformation modes change its capacitance:
//!
//! * axial compression thins the dielectric (`C ∝ 1/h`),
//! * lateral compression shrinks the plate area while raising permittivity
//!   (quadratic in the compression ratio),
//! * bending around a joint splits the taxel into a flat region and a
//!   cylindrical-shell region (quadratic in the bend angle).
//!
//! Lengths are in mm, angles in radians, ratios are plain fractions and
//! capacitances are in pF.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{in_range, positive, DomainError};

const GEOMETRY_REL_TOL: f64 = 1e-9;

/// `C = eps * area / dist`.
pub fn parallel_plate_capacitance(eps: f64, area: f64, dist: f64) -> Result<f64, DomainError> {
    positive("permittivity", eps)?;
    positive("area", area)?;
    positive("distance", dist)?;
    Ok(eps * area / dist)
}

/// Coaxial capacitor of length `length` between shells of radius `ra < rb`.
pub fn cylindrical_capacitance(
    eps: f64,
    length: f64,
    ra: f64,
    rb: f64,
) -> Result<f64, DomainError> {
    positive("permittivity", eps)?;
    positive("length", length)?;
    positive("inner radius", ra)?;
    if !(rb > ra) {
        return Err(DomainError::Invalid(format!(
            "outer radius {rb} must exceed inner radius {ra}"
        )));
    }
    Ok(2.0 * PI * eps * length / (rb / ra).ln())
}

/// Physical parameters of one taxel.
///
/// `base_capacitance` must agree with `permittivity * side_length² /
/// dielectric_thickness`; the constructor rejects inconsistent sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryParams", into = "GeometryParams")]
pub struct TaxelGeometry {
    side_length: f64,
    dielectric_thickness: f64,
    permittivity: f64,
    base_capacitance: f64,
    bend_inner_radius: f64,
    lateral_slope: f64,
    bend_slope: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryParams {
    side_length_mm: f64,
    dielectric_thickness_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    permittivity: Option<f64>,
    base_capacitance_pf: f64,
    bend_inner_radius_mm: f64,
    lateral_slope: f64,
    bend_slope: f64,
}

impl TryFrom<GeometryParams> for TaxelGeometry {
    type Error = DomainError;

    fn try_from(p: GeometryParams) -> Result<Self, Self::Error> {
        match p.permittivity {
            Some(eps) => TaxelGeometry::new(
                p.side_length_mm,
                p.dielectric_thickness_mm,
                eps,
                p.base_capacitance_pf,
                p.bend_inner_radius_mm,
                p.lateral_slope,
                p.bend_slope,
            ),
            None => TaxelGeometry::from_base_capacitance(
                p.side_length_mm,
                p.dielectric_thickness_mm,
                p.base_capacitance_pf,
                p.bend_inner_radius_mm,
                p.lateral_slope,
                p.bend_slope,
            ),
        }
    }
}

impl From<TaxelGeometry> for GeometryParams {
    fn from(g: TaxelGeometry) -> Self {
        GeometryParams {
            side_length_mm: g.side_length,
            dielectric_thickness_mm: g.dielectric_thickness,
            permittivity: Some(g.permittivity),
            base_capacitance_pf: g.base_capacitance,
            bend_inner_radius_mm: g.bend_inner_radius,
            lateral_slope: g.lateral_slope,
            bend_slope: g.bend_slope,
        }
    }
}

impl TaxelGeometry {
    pub fn new(
        side_length: f64,
        dielectric_thickness: f64,
        permittivity: f64,
        base_capacitance: f64,
        bend_inner_radius: f64,
        lateral_slope: f64,
        bend_slope: f64,
    ) -> Result<Self, DomainError> {
        positive("side length", side_length)?;
        positive("dielectric thickness", dielectric_thickness)?;
        positive("permittivity", permittivity)?;
        positive("base capacitance", base_capacitance)?;
        positive("bend inner radius", bend_inner_radius)?;
        in_range("lateral slope", lateral_slope, 0.0, f64::INFINITY)?;
        in_range("bend slope", bend_slope, 0.0, f64::INFINITY)?;
        let plate = permittivity * side_length * side_length / dielectric_thickness;
        if ((plate - base_capacitance) / base_capacitance).abs() > GEOMETRY_REL_TOL {
            return Err(DomainError::Invalid(format!(
                "base capacitance {base_capacitance} pF disagrees with plate formula {plate} pF"
            )));
        }
        Ok(TaxelGeometry {
            side_length,
            dielectric_thickness,
            permittivity,
            base_capacitance,
            bend_inner_radius,
            lateral_slope,
            bend_slope,
        })
    }

    /// Builds a geometry whose permittivity is inferred from the base capacitance.
    pub fn from_base_capacitance(
        side_length: f64,
        dielectric_thickness: f64,
        base_capacitance: f64,
        bend_inner_radius: f64,
        lateral_slope: f64,
        bend_slope: f64,
    ) -> Result<Self, DomainError> {
        positive("side length", side_length)?;
        positive("dielectric thickness", dielectric_thickness)?;
        positive("base capacitance", base_capacitance)?;
        let permittivity = base_capacitance * dielectric_thickness / (side_length * side_length);
        Self::new(
            side_length,
            dielectric_thickness,
            permittivity,
            base_capacitance,
            bend_inner_radius,
            lateral_slope,
            bend_slope,
        )
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }
    pub fn dielectric_thickness(&self) -> f64 {
        self.dielectric_thickness
    }
    pub fn permittivity(&self) -> f64 {
        self.permittivity
    }
    pub fn base_capacitance(&self) -> f64 {
        self.base_capacitance
    }
    pub fn bend_inner_radius(&self) -> f64 {
        self.bend_inner_radius
    }
    pub fn lateral_slope(&self) -> f64 {
        self.lateral_slope
    }
    pub fn bend_slope(&self) -> f64 {
        self.bend_slope
    }

    /// `eps0 * L / ln(1 + h0/Ra)`: capacitance per radian of the bent shell.
    pub fn bend_shell_factor(&self) -> f64 {
        self.permittivity * self.side_length
            / (1.0 + self.dielectric_thickness / self.bend_inner_radius).ln()
    }
}

impl Default for TaxelGeometry {
    /// 30 mm taxel whose unloaded thickness puts the axial fit at the same
    /// 5.99 pF baseline as the lateral and bending fits. The permittivity
    /// slopes are chosen so the physical lateral and bending models share the
    /// fitted linear terms.
    fn default() -> Self {
        let coeffs = FittedCoefficients::default();
        let base = coeffs.lateral.p0;
        let thickness = coeffs.axial.scale / (base - coeffs.axial.offset);
        let side = 30.0;
        let radius = 10.0;
        let lateral_slope = 1.0 + coeffs.lateral.p1 / base;
        let eps = base * thickness / (side * side);
        let shell = eps * side / (1.0 + thickness / radius).ln();
        let bend_slope = (shell - coeffs.bending.p1) / base;
        TaxelGeometry::from_base_capacitance(side, thickness, base, radius, lateral_slope, bend_slope)
            .expect("default geometry is valid")
    }
}

/// `C = scale / h + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseLaw {
    pub scale: f64,
    pub offset: f64,
}

impl InverseLaw {
    pub fn eval(&self, h: f64) -> f64 {
        self.scale / h + self.offset
    }
}

/// `C = p2 x² + p1 x + p0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quadratic {
    pub p2: f64,
    pub p1: f64,
    pub p0: f64,
}

impl Quadratic {
    pub fn eval(&self, x: f64) -> f64 {
        (self.p2 * x + self.p1) * x + self.p0
    }
}

/// Regression coefficients for the three deformation modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCoefficients", into = "RawCoefficients")]
pub struct FittedCoefficients {
    pub axial: InverseLaw,
    pub lateral: Quadratic,
    pub bending: Quadratic,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    axial: InverseLaw,
    lateral: Quadratic,
    bending: Quadratic,
}

impl TryFrom<RawCoefficients> for FittedCoefficients {
    type Error = DomainError;
    fn try_from(r: RawCoefficients) -> Result<Self, Self::Error> {
        FittedCoefficients::new(r.axial, r.lateral, r.bending)
    }
}

impl From<FittedCoefficients> for RawCoefficients {
    fn from(c: FittedCoefficients) -> Self {
        RawCoefficients {
            axial: c.axial,
            lateral: c.lateral,
            bending: c.bending,
        }
    }
}

impl FittedCoefficients {
    pub fn new(axial: InverseLaw, lateral: Quadratic, bending: Quadratic) -> Result<Self, DomainError> {
        positive("axial scale", axial.scale)?;
        positive("lateral constant term", lateral.p0)?;
        positive("bending constant term", bending.p0)?;
        for v in [axial.offset, lateral.p1, lateral.p2, bending.p1, bending.p2] {
            if !v.is_finite() {
                return Err(DomainError::NotFinite { name: "coefficient" });
            }
        }
        Ok(FittedCoefficients {
            axial,
            lateral,
            bending,
        })
    }
}

impl Default for FittedCoefficients {
    fn default() -> Self {
        FittedCoefficients {
            axial: InverseLaw {
                scale: 5.88,
                offset: 2.16,
            },
            lateral: Quadratic {
                p2: 0.44,
                p1: 0.87,
                p0: 5.99,
            },
            bending: Quadratic {
                p2: 0.024,
                p1: 0.041,
                p0: 5.99,
            },
        }
    }
}

/// Instantaneous deformation of one taxel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationState {
    /// Axial deflection in mm.
    #[serde(default)]
    pub deflection: f64,
    /// Lateral compression ratio in `[0, 1)`.
    #[serde(default)]
    pub lateral_ratio: f64,
    /// Bend angle in radians.
    #[serde(default)]
    pub bend_angle: f64,
    /// Stretch ratio.
    #[serde(default)]
    pub stretch: f64,
}

impl DeformationState {
    pub fn axial(deflection: f64) -> Self {
        DeformationState {
            deflection,
            ..Default::default()
        }
    }

    pub fn validate(&self, geom: &TaxelGeometry) -> Result<(), DomainError> {
        in_range("deflection", self.deflection, 0.0, geom.dielectric_thickness)?;
        in_range("lateral ratio", self.lateral_ratio, 0.0, 1.0)?;
        in_range("bend angle", self.bend_angle, 0.0, f64::INFINITY)?;
        in_range("stretch ratio", self.stretch, 0.0, f64::INFINITY)?;
        Ok(())
    }
}

pub fn axial_capacitance(coeffs: &FittedCoefficients, thickness: f64) -> Result<f64, DomainError> {
    positive("compressed thickness", thickness)?;
    Ok(coeffs.axial.eval(thickness))
}

pub fn lateral_capacitance(coeffs: &FittedCoefficients, ratio: f64) -> Result<f64, DomainError> {
    in_range("lateral ratio", ratio, 0.0, 1.0)?;
    Ok(coeffs.lateral.eval(ratio))
}

pub fn bending_capacitance(coeffs: &FittedCoefficients, angle: f64) -> Result<f64, DomainError> {
    in_range("bend angle", angle, 0.0, f64::INFINITY)?;
    Ok(coeffs.bending.eval(angle))
}

/// Flat region plus cylindrical-shell region of a bent taxel.
///
/// Valid while the bent permittivity `1 - m θ` stays positive.
pub fn bending_capacitance_physical(geom: &TaxelGeometry, angle: f64) -> Result<f64, DomainError> {
    in_range("bend angle", angle, 0.0, f64::INFINITY)?;
    let m = geom.bend_slope;
    if m * angle >= 1.0 {
        return Err(DomainError::Invalid(format!(
            "bend angle {angle} rad drives permittivity non-positive (slope {m})"
        )));
    }
    let linear = geom.base_capacitance * (1.0 - m * angle);
    let shell = geom.bend_shell_factor() * (angle - m * angle * angle);
    Ok(linear + shell)
}

/// Coefficients `(a, b, c)` of the physical bending model written as `aθ² + bθ + c`.
pub fn bending_quadratic_form(geom: &TaxelGeometry) -> Quadratic {
    let k = geom.bend_shell_factor();
    let m = geom.bend_slope;
    Quadratic {
        p2: -m * k,
        p1: k - m * geom.base_capacitance,
        p0: geom.base_capacitance,
    }
}

/// Linear loss of sensitivity with stretch: `g(s) = 1 - k s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StretchResponse(pub f64);

impl Default for StretchResponse {
    fn default() -> Self {
        StretchResponse(0.3)
    }
}

impl StretchResponse {
    pub fn gain(&self, stretch: f64) -> Result<f64, DomainError> {
        let g = 1.0 - self.0 * stretch;
        if g <= 0.0 {
            return Err(DomainError::Invalid(format!(
                "stretch ratio {stretch} removes all sensitivity (k = {})",
                self.0
            )));
        }
        Ok(g)
    }
}

/// Axial reading with lateral and bending offsets added; the change from
/// the unloaded baseline is attenuated by stretch.
pub fn combined_capacitance(
    geom: &TaxelGeometry,
    coeffs: &FittedCoefficients,
    stretch: StretchResponse,
    state: &DeformationState,
) -> Result<f64, DomainError> {
    state.validate(geom)?;
    let h0 = geom.dielectric_thickness;
    let baseline = axial_capacitance(coeffs, h0)?;
    let axial = axial_capacitance(coeffs, h0 - state.deflection)?;
    let lateral = lateral_capacitance(coeffs, state.lateral_ratio)? - coeffs.lateral.p0;
    let bending = bending_capacitance(coeffs, state.bend_angle)? - coeffs.bending.p0;
    let delta = axial - baseline + lateral + bending;
    if delta == 0.0 {
        return Ok(baseline);
    }
    Ok(baseline + stretch.gain(state.stretch)? * delta)
}

/// Saturating force → deflection law `x(F) = h0 · d_max · (1 - exp(-F / F_c))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessProfile {
    /// Fraction of the dielectric thickness reachable under infinite force.
    pub max_compression: f64,
    /// Characteristic force `F_c` in N.
    pub force_scale: f64,
}

impl StiffnessProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        in_range("max compression", self.max_compression, f64::MIN_POSITIVE, 1.0)?;
        positive("force scale", self.force_scale)?;
        Ok(())
    }

    /// Picks `F_c` so that `force` produces a capacitance change of `delta_c`
    /// on an otherwise undeformed taxel.
    pub fn calibrated(
        geom: &TaxelGeometry,
        coeffs: &FittedCoefficients,
        max_compression: f64,
        force: f64,
        delta_c: f64,
    ) -> Result<Self, DomainError> {
        positive("calibration force", force)?;
        positive("calibration capacitance change", delta_c)?;
        let h0 = geom.dielectric_thickness;
        let a = coeffs.axial.scale;
        // invert C(h0 - x) - C(h0) = delta_c for x
        let x = h0 - a / (a / h0 + delta_c);
        let u = x / (h0 * max_compression);
        if !(u > 0.0 && u < 1.0) {
            return Err(DomainError::Invalid(format!(
                "a {delta_c} pF change needs more than {max_compression} of the dielectric thickness"
            )));
        }
        let profile = StiffnessProfile {
            max_compression,
            force_scale: -force / (1.0 - u).ln(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn deflection(&self, thickness: f64, force: f64) -> Result<f64, DomainError> {
        in_range("force", force, 0.0, f64::INFINITY)?;
        Ok(thickness * self.max_compression * -(-force / self.force_scale).exp_m1())
    }

    /// Inverse of [`deflection`](Self::deflection); `None` past saturation.
    pub fn force(&self, thickness: f64, deflection: f64) -> Option<f64> {
        let u = deflection / (thickness * self.max_compression);
        if !(0.0..1.0).contains(&u) {
            return None;
        }
        Some(-self.force_scale * (-u).ln_1p())
    }
}

/// Reference full-scale point: 55 N maps to a 5 pF change.
pub const FULL_SCALE_FORCE_N: f64 = 55.0;
pub const FULL_SCALE_DELTA_PF: f64 = 5.0;

/// Forward model of one taxel: force and deformation in, capacitance out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxelModel {
    pub geometry: TaxelGeometry,
    pub coefficients: FittedCoefficients,
    pub stiffness: StiffnessProfile,
    #[serde(default)]
    pub stretch: StretchResponse,
}

impl Default for TaxelModel {
    fn default() -> Self {
        let geometry = TaxelGeometry::default();
        let coefficients = FittedCoefficients::default();
        Self::calibrated(geometry, coefficients).expect("default model calibrates")
    }
}

impl TaxelModel {
    /// Model with the stiffness tuned to the 55 N / 5 pF full-scale point.
    pub fn calibrated(
        geometry: TaxelGeometry,
        coefficients: FittedCoefficients,
    ) -> Result<Self, DomainError> {
        let stiffness = StiffnessProfile::calibrated(
            &geometry,
            &coefficients,
            0.8,
            FULL_SCALE_FORCE_N,
            FULL_SCALE_DELTA_PF,
        )?;
        Ok(TaxelModel {
            geometry,
            coefficients,
            stiffness,
            stretch: StretchResponse::default(),
        })
    }

    pub fn baseline(&self) -> f64 {
        self.coefficients.axial.eval(self.geometry.dielectric_thickness)
    }

    pub fn force_to_deflection(&self, force: f64) -> Result<f64, DomainError> {
        self.stiffness.deflection(self.geometry.dielectric_thickness, force)
    }

    /// Capacitance under `force` with additional in-plane deformation.
    pub fn capacitance(&self, force: f64, pose: &DeformationState) -> Result<f64, DomainError> {
        let state = DeformationState {
            deflection: self.force_to_deflection(force)?,
            ..*pose
        };
        combined_capacitance(&self.geometry, &self.coefficients, self.stretch, &state)
    }

    /// Capacitance change caused by `force` alone.
    pub fn delta_for_force(&self, force: f64) -> Result<f64, DomainError> {
        Ok(self.capacitance(force, &DeformationState::default())? - self.baseline())
    }

    /// Closed-form inverse of [`delta_for_force`](Self::delta_for_force).
    /// Non-positive changes read as zero force; `None` past saturation.
    pub fn force_for_delta(&self, delta: f64) -> Option<f64> {
        if delta <= 0.0 {
            return Some(0.0);
        }
        let h0 = self.geometry.dielectric_thickness;
        let a = self.coefficients.axial.scale;
        let x = h0 - a / (a / h0 + delta);
        self.stiffness.force(h0, x)
    }
}
