//! Linear-trap stability: Mathieu parameters, Floquet (monodromy)
//! classification, and the lowest-order secular-frequency estimate.
//!
//! The linearized equation of motion in scaled time τ = Ωt/2 reads
//! x″ + (a − 2q cos 2τ)x = 0; one drive period is τ ∈ [0, π]. Stability is
//! decided by the eigenvalues of the monodromy matrix over that period. For
//! |trace| ≤ 2 the characteristic exponent β = arccos(trace/2)/π gives the
//! secular frequency βΩ/2. This module is the crate's linear ground truth:
//! no tabulated stability constants are consulted anywhere.

use std::f64::consts::PI;

use crate::model::{DriveSpec, FieldModel, ParticleSpec};
use crate::{Axis, Error, Result};

/// Dimensionless Mathieu stability parameters of one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MathieuParams {
    /// Static-curvature parameter (signed).
    pub a: f64,
    /// RF parameter. Reported as a magnitude by [`mathieu_params`];
    /// classification is invariant under q → −q.
    pub q: f64,
}

/// Floquet classification of one (a, q) point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityVerdict {
    pub stable: bool,
    /// Largest eigenvalue magnitude of the monodromy matrix.
    pub multiplier_magnitude: f64,
    /// Characteristic exponent in [0, 1]; present when stable.
    pub beta: Option<f64>,
    /// β·Ω/2 in rad/s; present when stable.
    pub secular_frequency: Option<f64>,
    /// Monodromy determinant; 1 for this volume-preserving equation. NaN
    /// when the integration saturated.
    pub determinant: f64,
    /// True when the solution overflowed deep in the unstable region and the
    /// multiplier was clamped.
    pub saturated: bool,
}

/// Steps per drive period for the monodromy integration. The scalar equation
/// is cheap, so this runs well above the trajectory default.
const MONODROMY_STEPS: usize = 512;

/// Growth bound beyond which the unstable solution is declared saturated.
const SATURATION_LIMIT: f64 = 1e100;

/// Clamp value reported for saturated multipliers.
const SATURATED_MULTIPLIER: f64 = 1e100;

/// Mathieu parameters of `model` linearized at the origin, axis-resolved.
///
/// q = 2|q_p|·E′·s/(mΩ²) from the envelope gradient; a = 4·q_p·Φ″/(mΩ²)
/// from the static-potential curvature. 1D models yield a single x-axis
/// entry with a = 0; Separable3D yields x, y, z with the radial static
/// parameter fixed at −a_z/2 by the divergence-free construction.
pub fn mathieu_params(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
) -> Result<Vec<(Axis, MathieuParams)>> {
    model.validate()?;
    drive.validate()?;
    particle.validate()?;
    let m_om2 = particle.mass * drive.omega * drive.omega;
    let grad_eff = model.envelope().gradient().abs() * drive.amplitude_scale;
    let q = 2.0 * particle.charge.abs() * grad_eff / m_om2;
    match model.axial_curvature() {
        None => Ok(vec![(Axis::X, MathieuParams { a: 0.0, q })]),
        Some(kappa) => {
            let a_z = 4.0 * particle.charge * kappa / m_om2;
            let a_r = -0.5 * a_z;
            Ok(vec![
                (Axis::X, MathieuParams { a: a_r, q }),
                (Axis::Y, MathieuParams { a: a_r, q }),
                (Axis::Z, MathieuParams { a: a_z, q: 0.0 }),
            ])
        }
    }
}

/// Classifies one (a, q) point by integrating the Mathieu equation over one
/// period for two independent initial conditions and examining the monodromy
/// matrix. `drive` supplies Ω for the secular-frequency field.
pub fn classify_stability(params: &MathieuParams, drive: &DriveSpec) -> StabilityVerdict {
    let (a, q) = (params.a, params.q);
    let h = PI / MONODROMY_STEPS as f64;
    // k(τ) = a − 2q cos 2τ; classical fixed-step RK4 on (y, y′).
    let k = |tau: f64| a - 2.0 * q * (2.0 * tau).cos();
    let mut cols = [[1.0, 0.0], [0.0, 1.0]];
    for col in &mut cols {
        let [mut y, mut v] = *col;
        for i in 0..MONODROMY_STEPS {
            let t0 = i as f64 * h;
            let k0 = k(t0);
            let k1 = k(t0 + 0.5 * h);
            let k2 = k(t0 + h);

            let ay1 = v;
            let av1 = -k0 * y;
            let ay2 = v + 0.5 * h * av1;
            let av2 = -k1 * (y + 0.5 * h * ay1);
            let ay3 = v + 0.5 * h * av2;
            let av3 = -k1 * (y + 0.5 * h * ay2);
            let ay4 = v + h * av3;
            let av4 = -k2 * (y + h * ay3);

            y += h / 6.0 * (ay1 + 2.0 * ay2 + 2.0 * ay3 + ay4);
            v += h / 6.0 * (av1 + 2.0 * av2 + 2.0 * av3 + av4);
            if !(y.abs() < SATURATION_LIMIT && v.abs() < SATURATION_LIMIT) {
                return StabilityVerdict {
                    stable: false,
                    multiplier_magnitude: SATURATED_MULTIPLIER,
                    beta: None,
                    secular_frequency: None,
                    determinant: f64::NAN,
                    saturated: true,
                };
            }
        }
        *col = [y, v];
    }

    let [[y1, v1], [y2, v2]] = cols;
    let trace = y1 + v2;
    let determinant = y1 * v2 - y2 * v1;
    let disc = 0.25 * trace * trace - determinant;
    let multiplier_magnitude = if disc <= 0.0 {
        // Complex pair: both eigenvalues sit at |λ| = √det.
        determinant.sqrt()
    } else {
        0.5 * trace.abs() + disc.sqrt()
    };
    let stable = multiplier_magnitude <= 1.0 + 1e-9;
    let (beta, secular_frequency) = if stable {
        let b = (0.5 * trace).clamp(-1.0, 1.0).acos() / PI;
        (Some(b), Some(b * drive.omega / 2.0))
    } else {
        (None, None)
    };
    StabilityVerdict {
        stable,
        multiplier_magnitude,
        beta,
        secular_frequency,
        determinant,
        saturated: false,
    }
}

/// Lowest-order pseudopotential estimate ω ≈ (Ω/2)·√(a + q²/2), accurate
/// only for q ≪ 1. Errors when the radicand is negative.
pub fn secular_estimate(params: &MathieuParams, drive: &DriveSpec) -> Result<f64> {
    let radicand = params.a + 0.5 * params.q * params.q;
    if !radicand.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite radicand a + q²/2 = {radicand}"
        )));
    }
    if radicand < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "a + q²/2 = {radicand} is negative: no real secular frequency at this order"
        )));
    }
    Ok(0.5 * drive.omega * radicand.sqrt())
}

/// Classifies an inclusive q grid at fixed `a`; grid points are
/// q_min + i·q_step, robust to accumulated float drift in the endpoint.
pub fn scan_q(
    a: f64,
    q_min: f64,
    q_max: f64,
    q_step: f64,
    drive: &DriveSpec,
) -> Result<Vec<(MathieuParams, StabilityVerdict)>> {
    drive.validate()?;
    if !(a.is_finite() && q_min.is_finite() && q_max.is_finite() && q_step.is_finite()) {
        return Err(Error::InvalidArgument("scan bounds must be finite".into()));
    }
    if q_step <= 0.0 || q_max < q_min {
        return Err(Error::InvalidArgument(format!(
            "need q_step > 0 and q_max ≥ q_min, got step {q_step}, range [{q_min}, {q_max}]"
        )));
    }
    let n = ((q_max - q_min) / q_step).round() as usize;
    let last = q_min + n as f64 * q_step;
    let n = if last > q_max + 0.5 * q_step { n - 1 } else { n };
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let params = MathieuParams {
            a,
            q: q_min + i as f64 * q_step,
        };
        let verdict = classify_stability(&params, drive);
        out.push((params, verdict));
    }
    Ok(out)
}
