//! Detection statistics: the counting chain between "electron left the trap"
//! and "pulse registered", and the estimators that invert it.
//!
//! The pipeline mirrors the measurement loop: a cycle traps some number of
//! electrons, extraction dumps them onto the detector, the chain keeps each
//! with probability [`chain_efficiency`], the TDC timestamps the survivors,
//! and deadtime suppresses pile-up. Electron numbers are then inferred from
//! the per-cycle detection probability via the zero-count Poisson relation
//! λ = −ln(1 − p). Loading and storage curves are fit with a small
//! Levenberg–Marquardt routine with analytic Jacobians.

use crate::rng::derive_seed;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

// Readout pulses are Gaussian with this full width at half maximum.
const PULSE_FWHM_NS: f64 = 2.0;

/// Multiplicative efficiency factors of the detection chain, each the
/// probability that an electron survives one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionChain {
    pub extraction_efficiency: f64,
    pub mesh_open_area: f64,
    pub mcp_open_area: f64,
    pub voltage_factor: f64,
}

impl Default for DetectionChain {
    /// The bundled chain: lossless extraction, mesh 0.5, detector open area
    /// 0.6, and 0.4 from operating the detector below saturation voltage.
    fn default() -> Self {
        Self {
            extraction_efficiency: 1.0,
            mesh_open_area: 0.5,
            mcp_open_area: 0.6,
            voltage_factor: 0.4,
        }
    }
}

impl DetectionChain {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("extraction_efficiency", self.extraction_efficiency),
            ("mesh_open_area", self.mesh_open_area),
            ("mcp_open_area", self.mcp_open_area),
            ("voltage_factor", self.voltage_factor),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a probability in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// End-to-end probability that one extracted electron is detected.
pub fn chain_efficiency(chain: &DetectionChain) -> f64 {
    chain.extraction_efficiency * chain.mesh_open_area * chain.mcp_open_area * chain.voltage_factor
}

/// Result of inverting a detection probability into a mean electron number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonEstimate {
    pub p_detect: f64,
    /// Mean detections per cycle, −ln(1 − p_detect).
    pub lambda: f64,
    /// Mean trapped electrons per cycle, lambda / chain efficiency.
    pub mean_electrons: f64,
}

/// Inverts a per-cycle detection probability into a mean electron number,
/// assuming Poisson-distributed detections. Only the zero-count class is
/// used, so the estimate is insensitive to deadtime.
pub fn estimate_mean_electrons(p_detect: f64, chain: &DetectionChain) -> Result<PoissonEstimate> {
    chain.validate()?;
    if !(0.0..=1.0).contains(&p_detect) || !p_detect.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "p_detect must be a probability in [0, 1], got {p_detect}"
        )));
    }
    if p_detect >= 1.0 {
        return Err(Error::SaturatedDetector);
    }
    let lambda = -(-p_detect).ln_1p();
    let eff = chain_efficiency(chain);
    let mean_electrons = if lambda == 0.0 {
        0.0
    } else {
        if eff == 0.0 {
            return Err(Error::InvalidArgument(
                "chain efficiency is zero but detections were observed".into(),
            ));
        }
        lambda / eff
    };
    Ok(PoissonEstimate {
        p_detect,
        lambda,
        mean_electrons,
    })
}

/// Timestamped detector pulses, one list per cycle, in nanoseconds relative
/// to the cycle start trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub cycles: Vec<Vec<f64>>,
    pub deadtime_ns: f64,
}

impl EventStream {
    pub fn new(cycles: Vec<Vec<f64>>) -> Self {
        Self {
            cycles,
            deadtime_ns: 60.0,
        }
    }

    pub fn total_events(&self) -> usize {
        self.cycles.iter().map(Vec::len).sum()
    }

    fn validate_sorted(&self) -> Result<()> {
        for (i, cycle) in self.cycles.iter().enumerate() {
            if cycle.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::UnsortedEvents { cycle: i });
            }
        }
        Ok(())
    }
}

/// Suppresses pulses arriving within the deadtime of the previously kept
/// pulse, independently per cycle. A pulse at exactly the deadtime boundary
/// is kept: the rule is strict `t' − t < deadtime`.
pub fn apply_deadtime(stream: &EventStream) -> Result<EventStream> {
    if stream.deadtime_ns < 0.0 || !stream.deadtime_ns.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "deadtime_ns must be non-negative, got {}",
            stream.deadtime_ns
        )));
    }
    stream.validate_sorted()?;
    let cycles = stream
        .cycles
        .iter()
        .map(|cycle| {
            let mut kept: Vec<f64> = Vec::with_capacity(cycle.len());
            for &t in cycle {
                match kept.last() {
                    Some(&prev) if t - prev < stream.deadtime_ns => {}
                    _ => kept.push(t),
                }
            }
            kept
        })
        .collect();
    Ok(EventStream {
        cycles,
        deadtime_ns: stream.deadtime_ns,
    })
}

/// Fraction of cycles with at least one pulse.
pub fn detection_probability(stream: &EventStream) -> f64 {
    if stream.cycles.is_empty() {
        return 0.0;
    }
    let hit = stream.cycles.iter().filter(|c| !c.is_empty()).count();
    hit as f64 / stream.cycles.len() as f64
}

/// Per-bin detection probability (events per cycle per bin), bins starting
/// at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width_ns: f64,
    pub probabilities: Vec<f64>,
    pub cycles: u64,
}

impl Histogram {
    pub fn bin_start(&self, i: usize) -> f64 {
        i as f64 * self.bin_width_ns
    }

    pub fn span_ns(&self) -> f64 {
        self.probabilities.len() as f64 * self.bin_width_ns
    }
}

/// Bins an event stream into per-bin detection probabilities. The cycle
/// count is passed explicitly because streams read from disk list only the
/// cycles that produced events.
pub fn build_histogram(stream: &EventStream, bin_width_ns: f64, cycles: u64) -> Result<Histogram> {
    if cycles == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs at least one cycle".into(),
        ));
    }
    if bin_width_ns <= 0.0 || !bin_width_ns.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bin_width_ns must be positive, got {bin_width_ns}"
        )));
    }
    let mut t_max: f64 = 0.0;
    for cycle in &stream.cycles {
        for &t in cycle {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "timestamps must be non-negative and finite, got {t}"
                )));
            }
            t_max = t_max.max(t);
        }
    }
    let n_bins = if stream.total_events() == 0 {
        0
    } else {
        (t_max / bin_width_ns).floor() as usize + 1
    };
    let mut counts = vec![0u64; n_bins];
    for cycle in &stream.cycles {
        for &t in cycle {
            let mut i = (t / bin_width_ns).floor() as usize;
            // t_max itself lands on the last bin edge.
            i = i.min(n_bins - 1);
            counts[i] += 1;
        }
    }
    let probabilities = counts.iter().map(|&c| c as f64 / cycles as f64).collect();
    Ok(Histogram {
        bin_width_ns,
        probabilities,
        cycles,
    })
}

/// Integrates per-bin probabilities over a time window: every bin whose
/// interval intersects [lo, hi) contributes fully.
pub fn window_sum(hist: &Histogram, window: (f64, f64)) -> Result<f64> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi <= lo || hi > hist.span_ns() {
        return Err(Error::InvalidArgument(format!(
            "window [{lo}, {hi}) must lie within the histogram span [0, {})",
            hist.span_ns()
        )));
    }
    let first = (lo / hist.bin_width_ns).floor() as usize;
    let last = ((hi / hist.bin_width_ns).ceil() as usize).min(hist.probabilities.len());
    Ok(hist.probabilities[first..last].iter().sum())
}

/// Which decay law a [`DecayFit`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayModel {
    /// P(t) = amplitude · (1 − exp(−t/τ)), offset fixed at 0.
    Saturating,
    /// P(t) = amplitude · exp(−t/τ) + offset.
    ExponentialPlusConstant,
}

/// A fitted decay curve with one-sigma uncertainties from the quadratic
/// model of the residual surface at the optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    pub model: DecayModel,
    pub amplitude: f64,
    pub amplitude_sigma: f64,
    pub tau: f64,
    pub tau_sigma: f64,
    pub offset: f64,
    pub offset_sigma: f64,
    /// amplitude / (amplitude + offset), with its delta-method sigma;
    /// meaningful for the exponential-plus-constant model only.
    pub decaying_fraction: Option<f64>,
    pub decaying_fraction_sigma: Option<f64>,
    /// Root of the summed squared residuals.
    pub residual_norm: f64,
    pub converged: bool,
    /// False when the data do not constrain the decay, e.g. a constant
    /// series fit by amplitude ≈ 0 with arbitrary τ.
    pub identifiable: bool,
}

// ---------------------------------------------------------------------------
// Levenberg–Marquardt core, sized for the 2- and 3-parameter models here.

struct LmOutcome<const P: usize> {
    params: [f64; P],
    // Covariance of the parameters; INFINITY entries when J^T J was singular.
    cov: [[f64; P]; P],
    ssr: f64,
    converged: bool,
}

/// Solves A x = b for small P by Gaussian elimination with partial pivoting.
fn solve<const P: usize>(a: &[[f64; P]; P], b: &[f64; P]) -> Option<[f64; P]> {
    let mut m = *a;
    let mut rhs = *b;
    for col in 0..P {
        let pivot = (col..P).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..P {
            let f = m[row][col] / m[col][col];
            for k in col..P {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; P];
    for col in (0..P).rev() {
        let mut s = rhs[col];
        for k in col + 1..P {
            s -= m[col][k] * x[k];
        }
        x[col] = s / m[col][col];
    }
    Some(x)
}

fn invert<const P: usize>(a: &[[f64; P]; P]) -> Option<[[f64; P]; P]> {
    let mut inv = [[0.0; P]; P];
    for j in 0..P {
        let mut e = [0.0; P];
        e[j] = 1.0;
        let col = solve(a, &e)?;
        for i in 0..P {
            inv[i][j] = col[i];
        }
    }
    Some(inv)
}

/// Minimizes Σ (y − f(t, params))² over params. `eval` returns the model
/// value and its parameter gradient; `clamp` projects a proposed step back
/// into the valid domain (positivity constraints).
fn lm_fit<const P: usize>(
    points: &[(f64, f64)],
    init: [f64; P],
    eval: impl Fn(f64, &[f64; P]) -> (f64, [f64; P]),
    clamp: impl Fn(&mut [f64; P]),
) -> LmOutcome<P> {
    let ssr_of = |p: &[f64; P]| -> f64 {
        points
            .iter()
            .map(|&(t, y)| {
                let (f, _) = eval(t, p);
                (y - f) * (y - f)
            })
            .sum()
    };

    let mut params = init;
    clamp(&mut params);
    let mut ssr = ssr_of(&params);
    let mut lambda = 1e-3;
    let mut converged = false;

    for _ in 0..200 {
        let mut jtj = [[0.0; P]; P];
        let mut jtr = [0.0; P];
        for &(t, y) in points {
            let (f, grad) = eval(t, &params);
            let r = y - f;
            for i in 0..P {
                jtr[i] += grad[i] * r;
                for j in 0..P {
                    jtj[i][j] += grad[i] * grad[j];
                }
            }
        }

        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = jtj;
            for i in 0..P {
                // Marquardt scaling keeps the step well-posed when the
                // parameters differ by orders of magnitude.
                damped[i][i] += lambda * jtj[i][i].max(1e-300);
            }
            let Some(step) = solve(&damped, &jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = params;
            for i in 0..P {
                trial[i] += step[i];
            }
            clamp(&mut trial);
            let trial_ssr = ssr_of(&trial);
            if trial_ssr <= ssr {
                let rel_step = (0..P)
                    .map(|i| (trial[i] - params[i]).abs() / params[i].abs().max(1e-300))
                    .fold(0.0, f64::max);
                let rel_drop = (ssr - trial_ssr) / ssr.max(1e-300);
                params = trial;
                ssr = trial_ssr;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_step < 1e-10 || rel_drop < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e14 {
                break;
            }
        }
        if converged {
            break;
        }
        if !accepted {
            // No downhill step at any damping: at a (possibly degenerate)
            // minimum already.
            converged = true;
            break;
        }
    }

    let mut jtj = [[0.0; P]; P];
    for &(t, _) in points {
        let (_, grad) = eval(t, &params);
        for i in 0..P {
            for j in 0..P {
                jtj[i][j] += grad[i] * grad[j];
            }
        }
    }
    let dof = points.len().saturating_sub(P).max(1) as f64;
    let cov = match invert(&jtj) {
        Some(inv) => {
            let mut c = inv;
            for row in &mut c {
                for v in row {
                    *v *= ssr / dof;
                }
            }
            c
        }
        None => [[f64::INFINITY; P]; P],
    };
    LmOutcome {
        params,
        cov,
        ssr,
        converged,
    }
}

fn validate_fit_points(points: &[(f64, f64)], min_points: usize) -> Result<()> {
    if points.len() < min_points {
        return Err(Error::InvalidArgument(format!(
            "fit needs at least {min_points} points, got {}",
            points.len()
        )));
    }
    for &(t, y) in points {
        if !t.is_finite() || t < 0.0 || !y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "fit points must have finite t >= 0 and finite value, got ({t}, {y})"
            )));
        }
    }
    Ok(())
}

/// Fits a saturating loading curve P(t) = P_max·(1 − exp(−t/τ)).
///
/// `points` are (time, detection probability) pairs in any consistent time
/// unit; τ is returned in that unit.
pub fn fit_loading(points: &[(f64, f64)]) -> Result<DecayFit> {
    validate_fit_points(points, 4)?;
    let p_max0 = points.iter().map(|&(_, y)| y).fold(0.0, f64::max);
    let t_span = points.iter().map(|&(t, _)| t).fold(0.0, f64::max);
    let tau0 = points
        .iter()
        .find(|&&(_, y)| y >= 0.632 * p_max0 && p_max0 > 0.0)
        .map(|&(t, _)| t)
        .filter(|&t| t > 0.0)
        .unwrap_or(t_span / 3.0)
        .max(t_span * 1e-6);

    let out = lm_fit(
        points,
        [p_max0.max(1e-12), tau0],
        |t, &[p_max, tau]| {
            let u = (-t / tau).exp();
            (p_max * (1.0 - u), [1.0 - u, -p_max * u * t / (tau * tau)])
        },
        |p| {
            p[0] = p[0].max(0.0);
            p[1] = p[1].max(1e-300);
        },
    );

    let [p_max, tau] = out.params;
    let fit = DecayFit {
        model: DecayModel::Saturating,
        amplitude: p_max,
        amplitude_sigma: out.cov[0][0].sqrt(),
        tau,
        tau_sigma: out.cov[1][1].sqrt(),
        offset: 0.0,
        offset_sigma: 0.0,
        decaying_fraction: None,
        decaying_fraction_sigma: None,
        residual_norm: out.ssr.sqrt(),
        converged: out.converged,
        identifiable: p_max > 1e-6 * p_max0.max(1e-12) && out.cov[1][1].is_finite(),
    };
    if !fit.converged || fit.amplitude <= 0.0 || !fit.identifiable {
        return Err(Error::FitFailed {
            message: "loading fit did not identify a saturating rise".into(),
            best: Box::new(fit),
        });
    }
    Ok(fit)
}

/// Fits a storage curve P(t) = A·exp(−t/τ) + C and reports the decaying
/// fraction A/(A + C).
///
/// A constant series converges to A ≈ 0 with an arbitrary τ; that outcome
/// is returned with `identifiable = false` rather than as an error.
pub fn fit_storage(points: &[(f64, f64)]) -> Result<DecayFit> {
    validate_fit_points(points, 5)?;
    let y_max = points.iter().map(|&(_, y)| y).fold(0.0, f64::max);
    let t_span = points.iter().map(|&(t, _)| t).fold(0.0, f64::max);
    // Tail average seeds the floor, the early excess seeds the amplitude.
    let tail = points.len() - points.len().div_ceil(5)..points.len();
    let c0 = points[tail].iter().map(|&(_, y)| y).sum::<f64>() / points.len().div_ceil(5) as f64;
    let a0 = (y_max - c0).max(1e-3 * y_max.max(1e-12));
    let tau0 = points
        .iter()
        .find(|&&(_, y)| y - c0 <= 0.368 * a0)
        .map(|&(t, _)| t)
        .filter(|&t| t > 0.0)
        .unwrap_or(t_span / 3.0)
        .max(t_span * 1e-6);

    let out = lm_fit(
        points,
        [a0, tau0, c0.max(0.0)],
        |t, &[a, tau, c]| {
            let u = (-t / tau).exp();
            (a * u + c, [u, a * u * t / (tau * tau), 1.0])
        },
        |p| {
            p[0] = p[0].max(0.0);
            p[1] = p[1].max(1e-300);
            p[2] = p[2].max(0.0);
        },
    );

    let [a, tau, c] = out.params;
    let identifiable = a > 1e-3 * y_max.max(1e-12)
        && out.cov[1][1].is_finite()
        && out.cov[1][1].sqrt() < 10.0 * tau;
    let (fraction, fraction_sigma) = if a + c > 0.0 {
        let f = a / (a + c);
        // Delta method on g(a, c) = a/(a+c) including the a–c covariance.
        let da = c / ((a + c) * (a + c));
        let dc = -a / ((a + c) * (a + c));
        let var = da * da * out.cov[0][0] + dc * dc * out.cov[2][2] + 2.0 * da * dc * out.cov[0][2];
        (Some(f), Some(var.max(0.0).sqrt()))
    } else {
        (None, None)
    };
    let fit = DecayFit {
        model: DecayModel::ExponentialPlusConstant,
        amplitude: a,
        amplitude_sigma: out.cov[0][0].sqrt(),
        tau,
        tau_sigma: out.cov[1][1].sqrt(),
        offset: c,
        offset_sigma: out.cov[2][2].sqrt(),
        decaying_fraction: fraction,
        decaying_fraction_sigma: fraction_sigma,
        residual_norm: out.ssr.sqrt(),
        converged: out.converged,
        identifiable,
    };
    if !fit.converged {
        return Err(Error::FitFailed {
            message: "storage fit did not converge".into(),
            best: Box::new(fit),
        });
    }
    Ok(fit)
}

/// Timing layout of one measurement cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleProtocol {
    pub t_load: f64,
    pub t_wait: f64,
    /// Start of the readout window after the extraction trigger, ns.
    pub window_offset_ns: f64,
    pub window_width_ns: f64,
    /// Mean background events per cycle, spread uniformly over the span.
    pub background_per_cycle: f64,
}

impl Default for CycleProtocol {
    fn default() -> Self {
        Self {
            t_load: 10e-6,
            t_wait: 1e-3,
            window_offset_ns: 20.0,
            window_width_ns: 50.0,
            background_per_cycle: 1e-4,
        }
    }
}

impl CycleProtocol {
    /// Readout window as (start, end) in ns.
    pub fn window(&self) -> (f64, f64) {
        (
            self.window_offset_ns,
            self.window_offset_ns + self.window_width_ns,
        )
    }

    /// Total recorded span per cycle: the window plus symmetric margins.
    pub fn span_ns(&self) -> f64 {
        2.0 * self.window_offset_ns + self.window_width_ns
    }

    fn validate(&self) -> Result<()> {
        let ok = self.t_load >= 0.0
            && self.t_wait >= 0.0
            && self.window_offset_ns >= 0.0
            && self.window_width_ns > 0.0
            && self.background_per_cycle >= 0.0
            && [
                self.t_load,
                self.t_wait,
                self.window_offset_ns,
                self.window_width_ns,
                self.background_per_cycle,
            ]
            .iter()
            .all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidArgument(
                "cycle protocol durations must be finite and non-negative, window width positive"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Monte Carlo realization of the counting experiment: per cycle, draws a
/// Poisson electron number, thins it by the chain efficiency, timestamps
/// the detections as a Gaussian pulse centered in the readout window, and
/// sprinkles uniform background over the span. Cycle `i` uses the RNG
/// substream (seed, i), so output is independent of evaluation order.
pub fn simulate_cycles(
    protocol: &CycleProtocol,
    true_mean_electrons: f64,
    chain: &DetectionChain,
    cycles: u64,
    seed: u64,
) -> Result<EventStream> {
    protocol.validate()?;
    chain.validate()?;
    if cycles == 0 {
        return Err(Error::InvalidArgument("cycles must be at least 1".into()));
    }
    if !true_mean_electrons.is_finite() || true_mean_electrons < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "true_mean_electrons must be non-negative, got {true_mean_electrons}"
        )));
    }
    let eff = chain_efficiency(chain);
    let span = protocol.span_ns();
    let center = protocol.window_offset_ns + 0.5 * protocol.window_width_ns;
    let sigma_ns = PULSE_FWHM_NS / (8.0 * std::f64::consts::LN_2).sqrt();
    let electrons = (true_mean_electrons > 0.0).then(|| Poisson::new(true_mean_electrons).unwrap());
    let background =
        (protocol.background_per_cycle > 0.0).then(|| Poisson::new(protocol.background_per_cycle).unwrap());

    let mut out = Vec::with_capacity(cycles as usize);
    for i in 0..cycles {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
        let mut events: Vec<f64> = Vec::new();
        if let Some(dist) = &electrons {
            let n = dist.sample(&mut rng) as u64;
            for _ in 0..n {
                if rng.random::<f64>() < eff {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    events.push((center + sigma_ns * z).clamp(0.0, span));
                }
            }
        }
        if let Some(dist) = &background {
            let n = dist.sample(&mut rng) as u64;
            for _ in 0..n {
                events.push(rng.random::<f64>() * span);
            }
        }
        events.sort_by(f64::total_cmp);
        out.push(events);
    }
    Ok(EventStream::new(out))
}

/// Closed-form electron number for an exponential loading curve: with
/// detection probability p(t) = 1 − exp(−t/τ) the Poisson mean detections
/// are exactly t/τ, and the electron number is that over the efficiency.
pub fn loading_mean_electrons(t_load: f64, tau_load: f64, chain: &DetectionChain) -> Result<f64> {
    chain.validate()?;
    if !(t_load >= 0.0 && tau_load > 0.0) || !t_load.is_finite() || !tau_load.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need t_load >= 0 and tau_load > 0, got ({t_load}, {tau_load})"
        )));
    }
    let eff = chain_efficiency(chain);
    if eff == 0.0 {
        return Err(Error::InvalidArgument(
            "chain efficiency is zero; electron number undefined".into(),
        ));
    }
    Ok(t_load / (tau_load * eff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chain_defaults_multiply_to_twelve_percent() {
        let eff = chain_efficiency(&DetectionChain::default());
        assert!((eff - 0.12).abs() < 1e-12);
    }

    #[test]
    fn lossless_chain_has_unit_efficiency() {
        let chain = DetectionChain {
            extraction_efficiency: 1.0,
            mesh_open_area: 1.0,
            mcp_open_area: 1.0,
            voltage_factor: 1.0,
        };
        assert_eq!(chain_efficiency(&chain), 1.0);
    }

    #[test]
    fn saturated_voltage_chain_reaches_thirty_percent() {
        let chain = DetectionChain {
            voltage_factor: 1.0,
            ..DetectionChain::default()
        };
        assert!((chain_efficiency(&chain) - 0.30).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_inverts_to_zero_electrons() {
        let est = estimate_mean_electrons(0.0, &DetectionChain::default()).unwrap();
        assert_eq!(est.lambda, 0.0);
        assert_eq!(est.mean_electrons, 0.0);
    }

    #[test]
    fn unit_lambda_point_inverts_exactly() {
        let p = 1.0 - (-1.0f64).exp();
        let est = estimate_mean_electrons(p, &DetectionChain::default()).unwrap();
        assert!((est.lambda - 1.0).abs() < 1e-12);
        assert!((est.mean_electrons - 1.0 / 0.12).abs() < 1e-9);
    }

    #[test]
    fn ten_microsecond_load_is_about_one_electron() {
        let p = 1.0 - (-10.0f64 / 80.3).exp();
        let est = estimate_mean_electrons(p, &DetectionChain::default()).unwrap();
        assert!((est.mean_electrons - 1.04).abs() < 0.01);
    }

    #[test]
    fn saturated_probability_is_rejected() {
        assert!(matches!(
            estimate_mean_electrons(1.0, &DetectionChain::default()),
            Err(Error::SaturatedDetector)
        ));
    }

    #[test]
    fn deadtime_drops_pulse_inside_window() {
        let mut stream = EventStream::new(vec![vec![0.0, 30.0, 100.0]]);
        stream.deadtime_ns = 60.0;
        let out = apply_deadtime(&stream).unwrap();
        assert_eq!(out.cycles, vec![vec![0.0, 100.0]]);
    }

    #[test]
    fn deadtime_boundary_pulse_is_kept() {
        let mut stream = EventStream::new(vec![vec![0.0, 59.0, 60.0]]);
        stream.deadtime_ns = 60.0;
        let out = apply_deadtime(&stream).unwrap();
        assert_eq!(out.cycles, vec![vec![0.0, 60.0]]);
    }

    #[test]
    fn deadtime_on_empty_stream_is_empty() {
        let out = apply_deadtime(&EventStream::new(vec![vec![]])).unwrap();
        assert_eq!(out.cycles, vec![Vec::<f64>::new()]);
    }

    #[test]
    fn unsorted_cycle_is_reported_with_its_index() {
        let stream = EventStream::new(vec![vec![0.0, 1.0], vec![5.0, 2.0]]);
        assert!(matches!(
            apply_deadtime(&stream),
            Err(Error::UnsortedEvents { cycle: 1 })
        ));
    }

    #[test]
    fn histogram_places_single_event() {
        let stream = EventStream::new(vec![vec![5.5], vec![], vec![], vec![], vec![]]);
        let hist = build_histogram(&stream, 1.0, 10).unwrap();
        assert_eq!(hist.probabilities.len(), 6);
        assert!((hist.probabilities[5] - 0.1).abs() < 1e-12);
        assert_eq!(hist.bin_start(5), 5.0);
    }

    #[test]
    fn histogram_window_covering_all_bins_conserves_events() {
        let stream = EventStream::new(vec![vec![1.5, 3.25, 3.75], vec![8.0]]);
        let hist = build_histogram(&stream, 1.0, 2).unwrap();
        let total = window_sum(&hist, (0.0, hist.span_ns())).unwrap();
        assert_eq!((total * 2.0).round() as usize, 4);
    }

    #[test]
    fn window_outside_span_is_rejected() {
        let stream = EventStream::new(vec![vec![1.0]]);
        let hist = build_histogram(&stream, 1.0, 1).unwrap();
        assert!(window_sum(&hist, (0.0, 100.0)).is_err());
    }

    #[test]
    fn loading_fit_recovers_noiseless_parameters() {
        let tau = 80.3;
        let points: Vec<(f64, f64)> = (0..50)
            .map(|i| {
                let t = i as f64 * 8.0;
                (t, 1.0 - (-t / tau).exp())
            })
            .collect();
        let fit = fit_loading(&points).unwrap();
        assert!((fit.tau - tau).abs() / tau < 1e-3);
        assert!((fit.amplitude - 1.0).abs() < 1e-3);
        assert!(fit.converged && fit.identifiable);
    }

    #[test]
    fn loading_fit_rejects_all_zero_data() {
        let points: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.0)).collect();
        match fit_loading(&points) {
            Err(Error::FitFailed { .. }) => {}
            other => panic!("expected fit failure, got {other:?}"),
        }
    }

    #[test]
    fn storage_fit_recovers_noiseless_parameters() {
        let (a, tau, c) = (0.6, 30.0, 0.2);
        let points: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let t = i as f64 * 5.0;
                (t, a * (-t / tau).exp() + c)
            })
            .collect();
        let fit = fit_storage(&points).unwrap();
        assert!((fit.tau - tau).abs() / tau < 1e-6);
        assert!((fit.decaying_fraction.unwrap() - 0.75).abs() < 1e-6);
        assert!(fit.identifiable);
    }

    #[test]
    fn pure_exponential_storage_has_unit_fraction() {
        let points: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let t = i as f64 * 5.0;
                (t, 0.8 * (-t / 25.0f64).exp())
            })
            .collect();
        let fit = fit_storage(&points).unwrap();
        assert!((fit.decaying_fraction.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_storage_data_is_flagged_unidentifiable() {
        let points: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 0.5)).collect();
        let fit = fit_storage(&points).unwrap();
        assert!(!fit.identifiable);
        assert!(fit.amplitude < 1e-3);
    }

    #[test]
    fn simulated_detection_probability_matches_closed_form() {
        let chain = DetectionChain::default();
        let stream = simulate_cycles(&CycleProtocol::default(), 1.04, &chain, 200_000, 11).unwrap();
        let p = detection_probability(&stream);
        let expect = 1.0 - (-1.04f64 * 0.12).exp();
        let sigma = (expect * (1.0 - expect) / 200_000.0).sqrt();
        assert!(
            (p - expect).abs() < 3.0 * sigma + 1e-4,
            "p = {p}, expected {expect}"
        );
    }

    #[test]
    fn background_only_run_sits_at_background_level() {
        let chain = DetectionChain::default();
        let stream = simulate_cycles(&CycleProtocol::default(), 0.0, &chain, 500_000, 5).unwrap();
        let p = detection_probability(&stream);
        assert!((p - 1e-4).abs() < 6e-5, "p = {p}");
    }

    #[test]
    fn dead_chain_yields_only_background() {
        let chain = DetectionChain {
            voltage_factor: 0.0,
            ..DetectionChain::default()
        };
        let protocol = CycleProtocol {
            background_per_cycle: 0.0,
            ..CycleProtocol::default()
        };
        let stream = simulate_cycles(&protocol, 50.0, &chain, 1000, 3).unwrap();
        assert_eq!(stream.total_events(), 0);
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let chain = DetectionChain::default();
        let a = simulate_cycles(&CycleProtocol::default(), 2.0, &chain, 500, 9).unwrap();
        let b = simulate_cycles(&CycleProtocol::default(), 2.0, &chain, 500, 9).unwrap();
        let c = simulate_cycles(&CycleProtocol::default(), 2.0, &chain, 500, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn simulated_pulse_width_is_two_nanoseconds() {
        let chain = DetectionChain {
            extraction_efficiency: 1.0,
            mesh_open_area: 1.0,
            mcp_open_area: 1.0,
            voltage_factor: 1.0,
        };
        let protocol = CycleProtocol {
            background_per_cycle: 0.0,
            ..CycleProtocol::default()
        };
        let stream = simulate_cycles(&protocol, 5.0, &chain, 20_000, 21).unwrap();
        let hist = build_histogram(&stream, 1.0, 20_000).unwrap();
        let peak = hist
            .probabilities
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        let half = 0.5 * peak;
        let above: Vec<usize> = (0..hist.probabilities.len())
            .filter(|&i| hist.probabilities[i] >= half)
            .collect();
        // Coarse 1-ns binning of a 2-ns FWHM pulse: the half-maximum region
        // spans two or three bins.
        let width = *above.last().unwrap() - above[0] + 1;
        assert!(
            (2..=3).contains(&width),
            "half-maximum region spans {width} bins"
        );
    }

    #[test]
    fn loading_consistency_at_the_reference_timescales() {
        let chain = DetectionChain::default();
        let n10 = loading_mean_electrons(10.0, 80.3, &chain).unwrap();
        let n200 = loading_mean_electrons(200.0, 80.3, &chain).unwrap();
        assert!((n10 - 1.0).abs() / 1.0 < 0.05);
        assert!((n200 - 20.8).abs() / 20.8 < 0.05);
    }

    proptest! {
        #[test]
        fn deadtime_is_idempotent(times in proptest::collection::vec(0.0..500.0f64, 0..20)) {
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            let stream = EventStream::new(vec![sorted]);
            let once = apply_deadtime(&stream).unwrap();
            let twice = apply_deadtime(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn pulses_within_one_deadtime_leave_one_count(times in proptest::collection::vec(0.0..59.9f64, 1..10)) {
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            let stream = EventStream::new(vec![sorted]);
            let out = apply_deadtime(&stream).unwrap();
            prop_assert_eq!(out.cycles[0].len(), 1);
        }

        #[test]
        fn inversion_is_monotone_in_probability(p1 in 0.0..0.99f64, p2 in 0.0..0.99f64) {
            let chain = DetectionChain::default();
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a = estimate_mean_electrons(lo, &chain).unwrap();
            let b = estimate_mean_electrons(hi, &chain).unwrap();
            prop_assert!(a.mean_electrons <= b.mean_electrons);
        }
    }
}
