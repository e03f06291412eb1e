//! Trajectory reduction and the two scan drivers: the ionization
//! (distance × phase) sweep and tickle spectroscopy.
//!
//! Extraction is spectral: the stored position series is Hann-windowed,
//! transformed, and searched below Ω/(3·2π), where the secular line is the
//! only strong component; everything at and above the drive aliases out of
//! that band at the decimation used by [`CaptureSpec::for_spectrum`]. The
//! scans are parallel maps over independent cells with an ordered
//! reduction, so output is identical for any worker count.

use rayon::prelude::*;
use rayon::ThreadPoolBuilder;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dynamics::{
    integrate_many, BatchJob, CaptureSpec, InitialCondition, SimOutcome, TerminationSpec,
    TickleSpec, Trajectory,
};
use crate::model::{DriveSpec, FieldModel, ParticleSpec};
use crate::rng::derive_seed;
use crate::{Error, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Reduced description of one stored trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSummary {
    /// Secular frequency in Hz, always below Ω/(2·2π).
    pub secular_frequency: f64,
    /// Maximum |x| after the transient discard, meters.
    pub amplitude: f64,
    /// Subharmonic order n when the frequency sits on Ω/(2π·n).
    pub lock_order: Option<u32>,
    /// Interpolated spectral peak magnitude, same scale as amplitude.
    pub spectral_peak_height: f64,
}

/// Spectral peak of a pre-windowed sample slice: largest magnitude bin in
/// (0, f_limit], quadratically interpolated. `fs` is the sample rate.
fn spectrum_peak(samples: &[f64], fs: f64, f_limit: f64) -> Result<(f64, f64)> {
    let w = samples.len();
    debug_assert!(w.is_power_of_two());
    let mean = samples.iter().sum::<f64>() / w as f64;
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let hann = 0.5 * (1.0 - (TWO_PI * i as f64 / w as f64).cos());
            Complex::new((x - mean) * hann, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(w).process(&mut buf);

    let k_max = ((f_limit / fs * w as f64).floor() as usize).min(w / 2 - 1);
    if k_max < 16 {
        return Err(Error::TrajectoryTooShort(format!(
            "window of {w} samples resolves only {k_max} bins below the band limit"
        )));
    }
    let mags: Vec<f64> = buf[1..=k_max].iter().map(|c| c.norm()).collect();
    let mut peak_off = 0;
    for (i, m) in mags.iter().enumerate() {
        if *m > mags[peak_off] {
            peak_off = i;
        }
    }
    let peak = mags[peak_off];
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];

    let peak_idx = peak_off + 1;
    // A real secular line towers over the leakage floor and completes at
    // least 16 cycles in the window; anything else is a flat spectrum.
    if peak == 0.0 || peak <= 10.0 * median || peak_idx < 16 {
        return Err(Error::NoSecularMotion);
    }
    let delta = if peak_off > 0 && peak_off + 1 < mags.len() {
        let (ml, m0, mr) = (mags[peak_off - 1], peak, mags[peak_off + 1]);
        let denom = ml - 2.0 * m0 + mr;
        if denom < 0.0 {
            0.5 * (ml - mr) / denom
        } else {
            0.0
        }
    } else {
        0.0
    };
    let freq = (peak_idx as f64 + delta) * fs / w as f64;
    // Hann coherent gain is 1/2; 4/w maps the bin magnitude back to an
    // amplitude-like scale.
    Ok((freq, 4.0 * peak / w as f64))
}

/// Secular frequency (Hz) and spectral peak height of a stored trajectory.
/// Uses the trailing power-of-two window of the x series, restricted to
/// frequencies below Ω/(3·2π).
pub fn extract_secular_frequency(traj: &Trajectory, drive: &DriveSpec) -> Result<(f64, f64)> {
    let n = traj.len();
    if n < 64 {
        return Err(Error::TrajectoryTooShort(format!(
            "need at least 64 stored samples, got {n}"
        )));
    }
    let fs = 1.0 / traj.sample_dt;
    let f_drive = drive.omega / TWO_PI;
    if fs * 3.0 < 4.0 * f_drive * (1.0 - 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "stored rate {fs:.3e} Hz is below 4/3 of the drive frequency"
        )));
    }
    let w = 1usize << (usize::BITS - 1 - n.leading_zeros());
    let xs: Vec<f64> = traj.positions[n - w..].iter().map(|p| p[0]).collect();
    spectrum_peak(&xs, fs, f_drive / 3.0)
}

/// Motion amplitude: max |x| after discarding the first 10% of the series
/// (micromotion ring-in). Zero for an empty trajectory.
pub fn extract_amplitude(traj: &Trajectory) -> f64 {
    let skip = traj.len() / 10;
    traj.positions[skip..]
        .iter()
        .map(|p| p[0].abs())
        .fold(0.0, f64::max)
}

/// Smallest n in [2, n_max] with |freq − (Ω/2π)/n| ≤ tolerance.
pub fn detect_subharmonic_lock(
    freq: f64,
    omega_drive: f64,
    tolerance: f64,
    n_max: u32,
) -> Option<u32> {
    let f_drive = omega_drive / TWO_PI;
    (2..=n_max).find(|n| (freq - f_drive / *n as f64).abs() <= tolerance)
}

/// Full reduction of one trajectory: frequency, amplitude, lock order.
pub fn summarize_motion(
    traj: &Trajectory,
    drive: &DriveSpec,
    lock_tolerance: f64,
    lock_n_max: u32,
) -> Result<MotionSummary> {
    let (freq, height) = extract_secular_frequency(traj, drive)?;
    Ok(MotionSummary {
        secular_frequency: freq,
        amplitude: extract_amplitude(traj),
        lock_order: detect_subharmonic_lock(freq, drive.omega, lock_tolerance, lock_n_max),
        spectral_peak_height: height,
    })
}

// ---------------------------------------------------------------------------
// Ionization sweep.

/// Grid and policy for the (ionization distance × drive phase) sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Distance axis in meters, `distance_count` points from min to max
    /// inclusive.
    pub distance_min: f64,
    pub distance_max: f64,
    pub distance_count: usize,
    /// Phase axis: `phase_count` points evenly over [0, 2π).
    pub phase_count: usize,
    pub term: TerminationSpec,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    /// Frequency tolerance for subharmonic-lock classification, Hz.
    pub lock_tolerance: f64,
    pub lock_n_max: u32,
    /// Cells stored shorter than this carry no MotionSummary, seconds.
    pub capture_min_storage: f64,
}

impl SweepSpec {
    pub fn new(
        distance_min: f64,
        distance_max: f64,
        distance_count: usize,
        phase_count: usize,
    ) -> Self {
        Self {
            distance_min,
            distance_max,
            distance_count,
            phase_count,
            term: TerminationSpec::default(),
            workers: 0,
            lock_tolerance: 0.25e6,
            lock_n_max: 8,
            capture_min_storage: 1e-6,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.distance_count < 2 || self.phase_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "sweep axes need at least 2 points, got {}x{}",
                self.distance_count, self.phase_count
            )));
        }
        if !(self.distance_min.is_finite() && self.distance_max.is_finite())
            || self.distance_min < 0.0
            || self.distance_min >= self.distance_max
        {
            return Err(Error::InvalidArgument(format!(
                "distance axis must be increasing and non-negative, got [{}, {}]",
                self.distance_min, self.distance_max
            )));
        }
        self.term.validate()?;
        if self.distance_max >= self.term.escape_radius[0] {
            return Err(Error::InvalidArgument(format!(
                "distance_max {} m lies outside the escape boundary {} m",
                self.distance_max, self.term.escape_radius[0]
            )));
        }
        if !self.lock_tolerance.is_finite() || self.lock_tolerance <= 0.0 || self.lock_n_max < 2 {
            return Err(Error::InvalidArgument(
                "lock_tolerance must be positive and lock_n_max at least 2".into(),
            ));
        }
        if !self.capture_min_storage.is_finite() || self.capture_min_storage < 0.0 {
            return Err(Error::InvalidArgument(
                "capture_min_storage must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One sweep cell. A diverged integration is flagged here rather than
/// failing the whole sweep; its storage_time is the last valid time.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub x0: f64,
    pub phase: f64,
    pub storage_time: f64,
    pub escaped: bool,
    pub capped: bool,
    pub diverged: bool,
    pub summary: Option<MotionSummary>,
}

/// Complete sweep grid in distance-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepMap {
    pub distances: Vec<f64>,
    pub phases: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub time_cap: f64,
    pub steps_per_period: u32,
    pub capture_decimation: u32,
    pub lock_tolerance: f64,
    pub lock_n_max: u32,
}

impl SweepMap {
    pub fn cell(&self, distance_idx: usize, phase_idx: usize) -> &SweepCell {
        &self.cells[distance_idx * self.phases.len() + phase_idx]
    }
}

/// Amplitude and frequency versus ionization distance at one drive phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePoint {
    pub x0: f64,
    pub storage_time: f64,
    pub escaped: bool,
    pub capped: bool,
    pub amplitude: Option<f64>,
    pub secular_frequency: Option<f64>,
    pub lock_order: Option<u32>,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))
}

/// Runs the sweep in two passes: a fast classification of every cell, then
/// trajectory capture and spectral reduction for the capped cells only.
/// Cell order and content are independent of the worker count.
pub fn run_sweep(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    spec: &SweepSpec,
) -> Result<SweepMap> {
    spec.validate()?;
    // Endpoint-exact linspace: both axis ends land bitwise on min and max.
    let distances: Vec<f64> = (0..spec.distance_count)
        .map(|i| {
            let t = i as f64 / (spec.distance_count - 1) as f64;
            spec.distance_min * (1.0 - t) + spec.distance_max * t
        })
        .collect();
    let phases: Vec<f64> = (0..spec.phase_count)
        .map(|i| TWO_PI * i as f64 / spec.phase_count as f64)
        .collect();

    let row_jobs = |x0: f64| -> Vec<BatchJob> {
        phases
            .iter()
            .map(|&phase| BatchJob {
                init: InitialCondition::at_rest([x0, 0.0, 0.0], phase),
                noise: None,
            })
            .collect()
    };

    let pool = build_pool(spec.workers)?;
    let rows: Vec<Vec<std::result::Result<SimOutcome, Error>>> = pool.install(|| {
        distances
            .par_iter()
            .map(|&x0| integrate_many(model, drive, particle, &row_jobs(x0), &spec.term, None, None))
            .collect()
    });

    let mut cells = Vec::with_capacity(spec.distance_count * spec.phase_count);
    for (di, row) in rows.into_iter().enumerate() {
        for (pi, outcome) in row.into_iter().enumerate() {
            let (x0, phase) = (distances[di], phases[pi]);
            let cell = match outcome {
                Ok(o) => SweepCell {
                    x0,
                    phase,
                    storage_time: o.storage_time,
                    escaped: o.escaped,
                    capped: o.capped,
                    diverged: false,
                    summary: None,
                },
                Err(Error::IntegrationDiverged { last_valid_time }) => SweepCell {
                    x0,
                    phase,
                    storage_time: last_valid_time,
                    escaped: false,
                    capped: false,
                    diverged: true,
                    summary: None,
                },
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }

    // Second pass: capture and summarize the capped cells, eight at a time
    // so at most one batch of trajectories is resident per worker.
    let capture = CaptureSpec::for_spectrum(spec.term.steps_per_period);
    let want: Vec<usize> = (0..cells.len())
        .filter(|&i| cells[i].capped && cells[i].storage_time >= spec.capture_min_storage)
        .collect();
    let summaries: Vec<(usize, Option<MotionSummary>)> = pool.install(|| {
        want.par_chunks(8)
            .map(|chunk| {
                let jobs: Vec<BatchJob> = chunk
                    .iter()
                    .map(|&i| BatchJob {
                        init: InitialCondition::at_rest([cells[i].x0, 0.0, 0.0], cells[i].phase),
                        noise: None,
                    })
                    .collect();
                let outs =
                    integrate_many(model, drive, particle, &jobs, &spec.term, None, Some(&capture));
                chunk
                    .iter()
                    .zip(outs)
                    .map(|(&i, out)| {
                        let summary = out.ok().and_then(|o| o.trajectory).and_then(|t| {
                            summarize_motion(&t, drive, spec.lock_tolerance, spec.lock_n_max).ok()
                        });
                        (i, summary)
                    })
                    .collect::<Vec<_>>()
            })
            .flatten()
            .collect()
    });
    for (i, summary) in summaries {
        cells[i].summary = summary;
    }

    Ok(SweepMap {
        distances,
        phases,
        cells,
        time_cap: spec.term.time_cap,
        steps_per_period: spec.term.steps_per_period,
        capture_decimation: capture.decimation,
        lock_tolerance: spec.lock_tolerance,
        lock_n_max: spec.lock_n_max,
    })
}

/// Extracts the per-distance series at one phase of the grid. The phase
/// must lie on the grid; otherwise the nearest grid phase is reported in
/// the error.
pub fn phase_slice(map: &SweepMap, phase: f64) -> Result<Vec<SlicePoint>> {
    let mut best = 0usize;
    for (i, p) in map.phases.iter().enumerate() {
        if (p - phase).abs() < (map.phases[best] - phase).abs() {
            best = i;
        }
    }
    if (map.phases[best] - phase).abs() > 1e-9 {
        return Err(Error::PhaseOffGrid {
            requested: phase,
            nearest: map.phases[best],
        });
    }
    Ok((0..map.distances.len())
        .map(|di| {
            let c = map.cell(di, best);
            SlicePoint {
                x0: c.x0,
                storage_time: c.storage_time,
                escaped: c.escaped,
                capped: c.capped,
                amplitude: c.summary.map(|s| s.amplitude),
                secular_frequency: c.summary.map(|s| s.secular_frequency),
                lock_order: c.summary.and_then(|s| s.lock_order),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Tickle spectroscopy.

/// Scan policy for tickle spectroscopy.
#[derive(Debug, Clone, PartialEq)]
pub struct TickleScanSpec {
    /// Scan frequencies in Hz: f_min to f_max inclusive in steps of f_step.
    pub f_min: f64,
    pub f_max: f64,
    pub f_step: f64,
    /// Tone amplitude in V/m.
    pub amplitude: f64,
    /// Tone-on wait duration per frequency, seconds.
    pub duration: f64,
    pub direction: [f64; 3],
    pub gradient_scale: Option<f64>,
    pub steps_per_period: u32,
    pub escape_radius: [f64; 3],
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
}

impl TickleScanSpec {
    pub fn new(f_min: f64, f_max: f64, f_step: f64, amplitude: f64, duration: f64) -> Self {
        Self {
            f_min,
            f_max,
            f_step,
            amplitude,
            duration,
            direction: TickleSpec::default_direction(),
            gradient_scale: None,
            steps_per_period: 128,
            escape_radius: [500e-6; 3],
            workers: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.f_min.is_finite() && self.f_max.is_finite() && self.f_step.is_finite())
            || self.f_min <= 0.0
            || self.f_min > self.f_max
            || self.f_step <= 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "tickle scan axis must satisfy 0 < f_min <= f_max with positive step, got \
                 [{}, {}] step {}",
                self.f_min, self.f_max, self.f_step
            )));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::InvalidArgument(
                "tickle amplitude must be non-negative".into(),
            ));
        }
        if !self.duration.is_finite() || self.duration <= 0.0 {
            return Err(Error::InvalidArgument(
                "tickle duration must be positive".into(),
            ));
        }
        Ok(())
    }

    fn frequencies(&self) -> Vec<f64> {
        let n = ((self.f_max - self.f_min) / self.f_step).round() as usize + 1;
        (0..n).map(|i| self.f_min + i as f64 * self.f_step).collect()
    }
}

/// A detected loss resonance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickleDip {
    /// Scan frequency of the survival minimum, Hz.
    pub center: f64,
    /// Baseline minus minimum survival.
    pub depth: f64,
    /// Full width at half depth, Hz.
    pub width: f64,
}

/// Survival versus tickle frequency, with detected dips.
#[derive(Debug, Clone, PartialEq)]
pub struct TickleSpectrum {
    pub frequencies: Vec<f64>,
    pub survival: Vec<f64>,
    pub dips: Vec<TickleDip>,
    /// Median survival over the scan.
    pub baseline: f64,
    /// Dip threshold derived from the baseline spread.
    pub threshold: f64,
}

/// Deterministic low-discrepancy ensemble for tickle scans: positions fill
/// [−extent, extent]³ by a seeded Halton sequence, velocities are zero, and
/// drive phases are stratified over [0, 2π).
pub fn tickle_ensemble(count: usize, extent: f64, seed: u64) -> Vec<InitialCondition> {
    fn halton(mut i: u64, base: u64) -> f64 {
        let mut f = 1.0;
        let mut r = 0.0;
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    }
    let u01 = |k: u64| (derive_seed(seed, k) >> 11) as f64 / (1u64 << 53) as f64;
    let offsets = [u01(0), u01(1), u01(2), u01(3)];
    (0..count)
        .map(|i| {
            let coord = |base: u64, axis: usize| {
                let u = (halton(i as u64 + 1, base) + offsets[axis]).fract();
                extent * (2.0 * u - 1.0)
            };
            let phase = TWO_PI * ((i as f64 + 0.5) / count as f64 + offsets[3]).fract();
            InitialCondition::at_rest([coord(2, 0), coord(3, 1), coord(5, 2)], phase)
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[sorted.len() / 2]
}

/// Dip detection per the scan policy: baseline is the median survival,
/// spread is the scaled median absolute deviation, and a dip is a
/// contiguous run below baseline − max(3σ, 1/(2·members)).
pub(crate) fn detect_dips(
    freqs: &[f64],
    survival: &[f64],
    members: usize,
) -> (f64, f64, Vec<TickleDip>) {
    let baseline = median(survival);
    let deviations: Vec<f64> = survival.iter().map(|s| (s - baseline).abs()).collect();
    let sigma = 1.4826 * median(&deviations);
    let threshold = baseline - (3.0 * sigma).max(0.5 / members as f64);

    let mut dips = Vec::new();
    let mut i = 0;
    while i < survival.len() {
        if survival[i] >= threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < survival.len() && survival[i] < threshold {
            i += 1;
        }
        let run = start..i;
        let mut lo = f64::INFINITY;
        for j in run.clone() {
            lo = lo.min(survival[j]);
        }
        // Saturated dips bottom out over a run of equal minima; the center is
        // the midpoint of that run, not its left edge.
        let m_first = run.clone().find(|&j| survival[j] == lo).unwrap();
        let m_last = run.clone().rev().find(|&j| survival[j] == lo).unwrap();
        let depth = baseline - lo;
        let half = baseline - 0.5 * depth;
        // Half-depth crossings, linearly interpolated; clamped to the scan
        // edges when the dip touches them.
        let mut left = freqs[0];
        for j in (0..m_first).rev() {
            if survival[j] >= half {
                let frac = (survival[j] - half) / (survival[j] - survival[j + 1]);
                left = freqs[j] + frac * (freqs[j + 1] - freqs[j]);
                break;
            }
        }
        let mut right = *freqs.last().unwrap();
        for j in m_last + 1..survival.len() {
            if survival[j] >= half {
                let frac = (survival[j - 1] - half) / (survival[j - 1] - survival[j]);
                right = freqs[j - 1] + frac * (freqs[j] - freqs[j - 1]);
                break;
            }
        }
        dips.push(TickleDip {
            center: 0.5 * (freqs[m_first] + freqs[m_last]),
            depth,
            width: right - left,
        });
    }
    (baseline, threshold, dips)
}

/// Scans the tickle tone over the frequency axis and records the ensemble
/// survival fraction at each point. The ensemble must survive the full
/// duration without the tone; a member lost in that baseline check fails
/// the scan.
pub fn tickle_scan(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    ensemble: &[InitialCondition],
    spec: &TickleScanSpec,
) -> Result<TickleSpectrum> {
    spec.validate()?;
    if model.is_1d() {
        return Err(Error::InvalidArgument(
            "tickle scans need a separable 3D model".into(),
        ));
    }
    if ensemble.is_empty() {
        return Err(Error::InvalidArgument("tickle ensemble is empty".into()));
    }
    let term = TerminationSpec {
        time_cap: spec.duration,
        escape_radius: spec.escape_radius,
        steps_per_period: spec.steps_per_period,
    };
    let jobs: Vec<BatchJob> = ensemble
        .iter()
        .map(|&init| BatchJob { init, noise: None })
        .collect();

    let pool = build_pool(spec.workers)?;

    let baseline_runs = integrate_many(model, drive, particle, &jobs, &term, None, None);
    for (i, out) in baseline_runs.iter().enumerate() {
        let stable = matches!(out, Ok(o) if o.capped);
        if !stable {
            return Err(Error::UnstableEnsemble(format!(
                "ensemble member {i} does not survive {} s without the tickle tone",
                spec.duration
            )));
        }
    }

    let freqs = spec.frequencies();
    let survival: Vec<f64> = pool.install(|| {
        freqs
            .par_iter()
            .map(|&f| {
                let mut tickle = TickleSpec::new(
                    TWO_PI * f,
                    spec.amplitude,
                    spec.direction,
                    (0.0, 2.0 * spec.duration),
                )
                .expect("scan frequencies are validated positive");
                if let Some(scale) = spec.gradient_scale {
                    tickle = tickle
                        .with_gradient(scale)
                        .expect("gradient scale validated");
                }
                let outs = integrate_many(model, drive, particle, &jobs, &term, Some(&tickle), None);
                let kept = outs.iter().filter(|o| matches!(o, Ok(s) if s.capped)).count();
                kept as f64 / ensemble.len() as f64
            })
            .collect()
    });

    let (baseline, threshold, dips) = detect_dips(&freqs, &survival, ensemble.len());
    Ok(TickleSpectrum {
        frequencies: freqs,
        survival,
        dips,
        baseline,
        threshold,
    })
}
