//! Fixed-step integration of m·r̈ = q·E(r, t) for one non-interacting
//! particle, with optional tickle tone and drive-amplitude noise.
//!
//! The integrator is a classical 4th-order one-step method with
//! h = 2π/(Ω·steps_per_period). Drive cosines come from half-step tables
//! combined with the per-trajectory phase, times derive from integer step
//! counts, and the noise multiplier is indexed by integer interval number,
//! so a trajectory is a pure function of its inputs: results are
//! bit-identical across runs, batch sizes, and worker counts. Batched lanes
//! share per-step scalars but keep all per-lane arithmetic identical to a
//! single-lane run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{DriveSpec, Envelope, FieldModel, ParticleSpec};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Starting state of one trajectory. `phase` is the drive phase φ at t = 0
/// (the field goes as cos(Ωt + φ)); constructors normalize it to [0, 2π).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialCondition {
    /// Position in meters.
    pub position: [f64; 3],
    /// Velocity in m/s.
    pub velocity: [f64; 3],
    /// Drive phase at t = 0, radians in [0, 2π).
    pub phase: f64,
}

impl InitialCondition {
    pub fn new(position: [f64; 3], velocity: [f64; 3], phase: f64) -> Self {
        Self {
            position,
            velocity,
            phase: phase.rem_euclid(2.0 * std::f64::consts::PI),
        }
    }

    /// At-rest start on the x axis: the ionization-like initial condition.
    pub fn at_rest_1d(x0: f64, phase: f64) -> Self {
        Self::new([x0, 0.0, 0.0], [0.0; 3], phase)
    }

    /// At-rest start at an arbitrary position.
    pub fn at_rest(position: [f64; 3], phase: f64) -> Self {
        Self::new(position, [0.0; 3], phase)
    }

    fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|c| c.is_finite())
            || !self.velocity.iter().all(|c| c.is_finite())
            || !self.phase.is_finite()
        {
            return Err(Error::InvalidArgument(
                "initial condition must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Stop conditions for one integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminationSpec {
    /// Wall-clock cap on simulated time in seconds.
    pub time_cap: f64,
    /// Escape boundary per axis in meters.
    pub escape_radius: [f64; 3],
    /// Integration steps per drive period.
    pub steps_per_period: u32,
}

impl Default for TerminationSpec {
    fn default() -> Self {
        Self {
            time_cap: 1e-3,
            escape_radius: [500e-6; 3],
            steps_per_period: 128,
        }
    }
}

impl TerminationSpec {
    pub fn with_cap(time_cap: f64) -> Self {
        Self {
            time_cap,
            ..Self::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !self.time_cap.is_finite() || self.time_cap <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "time_cap must be positive and finite, got {}",
                self.time_cap
            )));
        }
        if !self
            .escape_radius
            .iter()
            .all(|r| r.is_finite() && *r > 0.0)
        {
            return Err(Error::InvalidArgument(
                "escape_radius components must be positive and finite".into(),
            ));
        }
        if self.steps_per_period < 32 {
            return Err(Error::InvalidArgument(format!(
                "steps_per_period must be at least 32, got {}",
                self.steps_per_period
            )));
        }
        Ok(())
    }
}

/// Auxiliary excitation tone E_t(r, t) = A·g(r)·cos(ω_tickle·t)·d̂ applied
/// inside the time window.
///
/// With `gradient_scale` L the spatial factor is g(r) = 1 + (r·d̂)/L,
/// mimicking single-electrode excitation whose field strength varies across
/// the trap; without it the tone is spatially uniform (g = 1). A uniform
/// tone cannot parametrically modulate a mode frequency, so harmonic
/// response of the axial mode requires the gradient term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickleSpec {
    /// Tone angular frequency in rad/s.
    pub omega_tickle: f64,
    /// Field amplitude A in V/m.
    pub field_amplitude: f64,
    /// Unit direction of the tone field.
    pub direction: [f64; 3],
    /// Active window (t_on, t_off) in seconds; active for t_on ≤ t < t_off.
    pub window: (f64, f64),
    /// Length scale L of the field gradient along d̂, meters.
    pub gradient_scale: Option<f64>,
}

impl TickleSpec {
    pub fn new(
        omega_tickle: f64,
        field_amplitude: f64,
        direction: [f64; 3],
        window: (f64, f64),
    ) -> Result<Self> {
        let norm = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidArgument(
                "tickle direction must be a nonzero finite vector".into(),
            ));
        }
        let spec = Self {
            omega_tickle,
            field_amplitude,
            direction: [
                direction[0] / norm,
                direction[1] / norm,
                direction[2] / norm,
            ],
            window,
            gradient_scale: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same tone with the 1 + (r·d̂)/L spatial gradient attached.
    pub fn with_gradient(mut self, scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gradient_scale must be finite and nonzero, got {scale}"
            )));
        }
        self.gradient_scale = Some(scale);
        Ok(self)
    }

    /// Diagonal unit vector in the x–z plane: couples one tone to both the
    /// radial and the axial mode family.
    pub fn default_direction() -> [f64; 3] {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        [c, 0.0, c]
    }

    fn validate(&self) -> Result<()> {
        if !self.omega_tickle.is_finite() || self.omega_tickle <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "omega_tickle must be positive and finite, got {}",
                self.omega_tickle
            )));
        }
        if !self.field_amplitude.is_finite() || self.field_amplitude < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tickle field_amplitude must be non-negative, got {}",
                self.field_amplitude
            )));
        }
        let norm2: f64 = self.direction.iter().map(|c| c * c).sum();
        if (norm2 - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "tickle direction must be a unit vector".into(),
            ));
        }
        if !(self.window.0.is_finite() && self.window.1.is_finite())
            || self.window.0 >= self.window.1
        {
            return Err(Error::InvalidArgument(format!(
                "tickle window must satisfy t_on < t_off, got ({}, {})",
                self.window.0, self.window.1
            )));
        }
        if let Some(s) = self.gradient_scale {
            if !s.is_finite() || s == 0.0 {
                return Err(Error::InvalidArgument(
                    "gradient_scale must be finite and nonzero".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Multiplicative drive-amplitude noise: the RF field is scaled by (1 + ε)
/// with ε ~ N(0, relative_sigma²), resampled every `hold_periods` drive
/// periods. The value of interval j is a pure function of (seed, j), so
/// trajectories are reproducible and order-independent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveNoiseSpec {
    pub relative_sigma: f64,
    pub hold_periods: u32,
    pub seed: u64,
}

impl DriveNoiseSpec {
    pub fn new(relative_sigma: f64, hold_periods: u32, seed: u64) -> Self {
        Self {
            relative_sigma,
            hold_periods,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.relative_sigma.is_finite() || self.relative_sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "relative_sigma must be non-negative and finite, got {}",
                self.relative_sigma
            )));
        }
        if self.hold_periods < 1 {
            return Err(Error::InvalidArgument(
                "hold_periods must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Trajectory storage request: keep every `decimation`-th step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureSpec {
    pub decimation: u32,
    pub store_velocity: bool,
}

impl CaptureSpec {
    /// Decimation for spectral work: stored rate S/k ≥ 4/3 samples per drive
    /// period, keeping everything below Ω/(3·2π) alias-free.
    pub fn for_spectrum(steps_per_period: u32) -> Self {
        Self {
            decimation: (3 * steps_per_period / 4).max(1),
            store_velocity: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.decimation < 1 {
            return Err(Error::InvalidArgument(
                "capture decimation must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Decimated position series. Sample i sits at time i·sample_dt.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Seconds between stored samples (h · decimation).
    pub sample_dt: f64,
    /// Step-level decimation factor that produced this series.
    pub decimation: u32,
    pub positions: Vec<[f64; 3]>,
    pub velocities: Option<Vec<[f64; 3]>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time_of(&self, i: usize) -> f64 {
        i as f64 * self.sample_dt
    }
}

/// Result of one integration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    /// Interpolated escape time, or the cap for surviving trajectories.
    pub storage_time: f64,
    pub escaped: bool,
    pub capped: bool,
    pub final_position: [f64; 3],
    pub final_velocity: [f64; 3],
    pub trajectory: Option<Trajectory>,
}

// ---------------------------------------------------------------------------
// Run configuration shared by the lane engines.

#[derive(Clone, Copy)]
struct TickleRt {
    omega: f64,
    amp: f64,
    t_on: f64,
    t_off: f64,
    dir: [f64; 3],
    /// 1/L for the spatial gradient, 0 for a uniform tone.
    inv_scale: f64,
}

impl TickleRt {
    fn from_spec(spec: &TickleSpec) -> Self {
        Self {
            omega: spec.omega_tickle,
            amp: spec.field_amplitude,
            t_on: spec.window.0,
            t_off: spec.window.1,
            dir: spec.direction,
            inv_scale: spec.gradient_scale.map(|s| 1.0 / s).unwrap_or(0.0),
        }
    }

    /// Scalar tone amplitude A·cos(ωt) at time t, zero outside the window.
    #[inline(always)]
    fn amp_at(&self, t: f64) -> f64 {
        if t >= self.t_on && t < self.t_off {
            self.amp * (self.omega * t).cos()
        } else {
            0.0
        }
    }
}

const NO_TICKLE: TickleRt = TickleRt {
    omega: 1.0,
    amp: 0.0,
    t_on: 0.0,
    t_off: -1.0,
    dir: [0.0; 3],
    inv_scale: 0.0,
};

/// Per-lane noise state. The multiplier for interval j is
/// 1 + σ·N(seed, j) and is refreshed on integer step counts only.
#[derive(Clone, Copy)]
struct NoiseLane {
    sigma: f64,
    seed: u64,
    hold_steps: u64,
    next_interval: u64,
    until_refresh: u64,
    multiplier: f64,
}

impl NoiseLane {
    fn inactive() -> Self {
        Self {
            sigma: 0.0,
            seed: 0,
            hold_steps: u64::MAX,
            next_interval: 0,
            until_refresh: u64::MAX,
            multiplier: 1.0,
        }
    }

    fn from_spec(spec: &DriveNoiseSpec, steps_per_period: u32) -> Self {
        Self {
            sigma: spec.relative_sigma,
            seed: spec.seed,
            hold_steps: spec.hold_periods as u64 * steps_per_period as u64,
            next_interval: 0,
            until_refresh: 0,
            multiplier: 1.0,
        }
    }

    #[inline(always)]
    fn step(&mut self) {
        if self.until_refresh == 0 {
            if self.sigma != 0.0 {
                self.multiplier = 1.0 + self.sigma * noise_normal(self.seed, self.next_interval);
            }
            self.next_interval += 1;
            self.until_refresh = self.hold_steps;
        }
        self.until_refresh -= 1;
    }
}

/// Standard-normal draw for noise interval j of a seeded stream.
fn noise_normal(seed: u64, interval: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, interval));
    StandardNormal.sample(&mut rng)
}

/// Half-step drive tables: ct[j] = cos(π·j/S), st[j] = sin(π·j/S) for
/// j ∈ [0, 2S). cos(Ωt + φ) at stage node u is ct[u mod 2S]·cosφ −
/// st[u mod 2S]·sinφ, exact in the node index.
struct DriveTables {
    ct: Vec<f64>,
    st: Vec<f64>,
    s2: usize,
}

impl DriveTables {
    fn new(steps_per_period: u32) -> Self {
        let s2 = 2 * steps_per_period as usize;
        let mut ct = Vec::with_capacity(s2);
        let mut st = Vec::with_capacity(s2);
        for j in 0..s2 {
            let angle = std::f64::consts::PI * j as f64 / steps_per_period as f64;
            ct.push(angle.cos());
            st.push(angle.sin());
        }
        Self { ct, st, s2 }
    }
}

struct RunShared<'a> {
    h: f64,
    n_steps: u64,
    tables: &'a DriveTables,
    /// charge/mass in C/kg.
    qom: f64,
    /// Amplitude-scaled RF envelope.
    env: Envelope,
    /// Static curvature κ for 3D runs.
    kappa: f64,
    escape: [f64; 3],
    cap: f64,
    tickle: TickleRt,
    capture: Option<CaptureSpec>,
}

#[derive(Clone, Copy, PartialEq)]
enum LaneStatus {
    Running,
    Capped,
    Escaped { t: f64 },
    Diverged { t: f64 },
}

struct LaneOut {
    status: LaneStatus,
    position: [f64; 3],
    velocity: [f64; 3],
    positions: Vec<[f64; 3]>,
    velocities: Vec<[f64; 3]>,
}

impl LaneOut {
    fn new(init: &InitialCondition, capture: Option<&CaptureSpec>, n_steps: u64) -> Self {
        let (mut positions, mut velocities) = (Vec::new(), Vec::new());
        if let Some(c) = capture {
            let cap_len = (n_steps / c.decimation as u64 + 2) as usize;
            positions.reserve(cap_len);
            positions.push(init.position);
            if c.store_velocity {
                velocities.reserve(cap_len);
                velocities.push(init.velocity);
            }
        }
        Self {
            status: LaneStatus::Running,
            position: init.position,
            velocity: init.velocity,
            positions,
            velocities,
        }
    }
}

/// First escape crossing within a step, linearly interpolated per axis;
/// prev is inside the box, next outside on at least one axis.
#[inline]
fn escape_time(prev: &[f64], next: &[f64], escape: &[f64], t0: f64, h: f64) -> f64 {
    let mut t = f64::INFINITY;
    for a in 0..prev.len() {
        let p = prev[a].abs();
        let n = next[a].abs();
        if n > escape[a] {
            let frac = ((escape[a] - p) / (n - p)).clamp(0.0, 1.0);
            t = t.min(t0 + frac * h);
        }
    }
    t
}

/// 1D lane engine. Per-lane arithmetic is identical for every L, so batch
/// width never changes results. Lanes starting with `active` false are
/// padding and produce placeholder output.
fn run_1d<const L: usize>(
    shared: &RunShared,
    inits: &[InitialCondition],
    noise: &mut [NoiseLane],
    active: &[bool],
) -> Vec<LaneOut> {
    debug_assert_eq!(inits.len(), L);
    let mut out: Vec<LaneOut> = inits
        .iter()
        .map(|i| LaneOut::new(i, shared.capture.as_ref(), shared.n_steps))
        .collect();
    let mut x = [0.0f64; L];
    let mut v = [0.0f64; L];
    let mut cp = [0.0f64; L];
    let mut sp = [0.0f64; L];
    for l in 0..L {
        x[l] = inits[l].position[0];
        v[l] = inits[l].velocity[0];
        cp[l] = inits[l].phase.cos();
        sp[l] = inits[l].phase.sin();
    }
    let mut alive = [true; L];
    let mut n_alive = 0;
    for l in 0..L {
        alive[l] = active[l];
        n_alive += usize::from(active[l]);
    }

    let h = shared.h;
    let qom = shared.qom;
    let env = shared.env;
    let tk = shared.tickle;
    let t_dx = tk.dir[0];
    let t_gx = t_dx * t_dx * tk.inv_scale;
    let er = shared.escape[0];
    let (ct, st, s2) = (&shared.tables.ct, &shared.tables.st, shared.tables.s2);
    let dec = shared.capture.map(|c| c.decimation as u64).unwrap_or(0);
    let store_v = shared.capture.map(|c| c.store_velocity).unwrap_or(false);

    let mut w0 = 0usize;
    for k in 0..shared.n_steps {
        let wh = if w0 + 1 == s2 { 0 } else { w0 + 1 };
        let w1 = if wh + 1 == s2 { 0 } else { wh + 1 };
        let (ct0, st0) = (ct[w0], st[w0]);
        let (cth, sth) = (ct[wh], st[wh]);
        let (ct1, st1) = (ct[w1], st[w1]);
        let t0 = k as f64 * h;
        let a0 = tk.amp_at(t0);
        let ah = tk.amp_at(t0 + 0.5 * h);
        let a1 = tk.amp_at(t0 + h);

        for l in 0..L {
            if !alive[l] {
                continue;
            }
            noise[l].step();
            let m = noise[l].multiplier;
            let c0 = ct0 * cp[l] - st0 * sp[l];
            let ch = cth * cp[l] - sth * sp[l];
            let c1 = ct1 * cp[l] - st1 * sp[l];

            let acc = |xx: f64, c: f64, a: f64| {
                qom * (env.eval(xx) * c * m + a * (t_dx + xx * t_gx))
            };

            let (x0, v0) = (x[l], v[l]);
            let k1x = v0;
            let k1v = acc(x0, c0, a0);
            let k2x = v0 + 0.5 * h * k1v;
            let k2v = acc(x0 + 0.5 * h * k1x, ch, ah);
            let k3x = v0 + 0.5 * h * k2v;
            let k3v = acc(x0 + 0.5 * h * k2x, ch, ah);
            let k4x = v0 + h * k3v;
            let k4v = acc(x0 + h * k3x, c1, a1);
            let xn = x0 + h / 6.0 * (k1x + 2.0 * (k2x + k3x) + k4x);
            let vn = v0 + h / 6.0 * (k1v + 2.0 * (k2v + k3v) + k4v);

            if !(xn.is_finite() && vn.is_finite()) {
                out[l].status = LaneStatus::Diverged { t: t0 };
                alive[l] = false;
                n_alive -= 1;
                continue;
            }
            x[l] = xn;
            v[l] = vn;
            if xn.abs() > er {
                let t_esc = escape_time(&[x0], &[xn], &[er], t0, h);
                out[l].status = if t_esc > shared.cap {
                    LaneStatus::Capped
                } else {
                    LaneStatus::Escaped { t: t_esc }
                };
                out[l].position = [xn, 0.0, 0.0];
                out[l].velocity = [vn, 0.0, 0.0];
                alive[l] = false;
                n_alive -= 1;
            }
        }

        if dec > 0 && (k + 1) % dec == 0 {
            for l in 0..L {
                if alive[l] {
                    out[l].positions.push([x[l], 0.0, 0.0]);
                    if store_v {
                        out[l].velocities.push([v[l], 0.0, 0.0]);
                    }
                }
            }
        }
        if n_alive == 0 {
            break;
        }
        w0 = if w0 + 2 >= s2 { w0 + 2 - s2 } else { w0 + 2 };
    }

    for l in 0..L {
        if alive[l] {
            out[l].status = LaneStatus::Capped;
            out[l].position = [x[l], 0.0, 0.0];
            out[l].velocity = [v[l], 0.0, 0.0];
        }
    }
    out
}

/// 3D lane engine: quadrupole RF envelope in x/y plus the static field
/// (κx/2, κy/2, −κz).
fn run_3d<const L: usize>(
    shared: &RunShared,
    inits: &[InitialCondition],
    noise: &mut [NoiseLane],
    active: &[bool],
) -> Vec<LaneOut> {
    debug_assert_eq!(inits.len(), L);
    let mut out: Vec<LaneOut> = inits
        .iter()
        .map(|i| LaneOut::new(i, shared.capture.as_ref(), shared.n_steps))
        .collect();
    let mut pos = [[0.0f64; 3]; L];
    let mut vel = [[0.0f64; 3]; L];
    let mut cp = [0.0f64; L];
    let mut sp = [0.0f64; L];
    for l in 0..L {
        pos[l] = inits[l].position;
        vel[l] = inits[l].velocity;
        cp[l] = inits[l].phase.cos();
        sp[l] = inits[l].phase.sin();
    }
    let mut alive = [true; L];
    let mut n_alive = 0;
    for l in 0..L {
        alive[l] = active[l];
        n_alive += usize::from(active[l]);
    }

    let h = shared.h;
    let qom = shared.qom;
    let env = shared.env;
    let kappa = shared.kappa;
    let tk = shared.tickle;
    let er = shared.escape;
    let (ct, st, s2) = (&shared.tables.ct, &shared.tables.st, shared.tables.s2);
    let dec = shared.capture.map(|c| c.decimation as u64).unwrap_or(0);
    let store_v = shared.capture.map(|c| c.store_velocity).unwrap_or(false);

    // Acceleration at position r for drive cosine c, tickle amplitude a,
    // noise multiplier m.
    let acc = |r: &[f64; 3], c: f64, a: f64, m: f64| -> [f64; 3] {
        let rf = c * m;
        let tick = a * (1.0 + (r[0] * tk.dir[0] + r[1] * tk.dir[1] + r[2] * tk.dir[2]) * tk.inv_scale);
        [
            qom * (env.eval(r[0]) * rf + 0.5 * kappa * r[0] + tick * tk.dir[0]),
            qom * (-env.eval(r[1]) * rf + 0.5 * kappa * r[1] + tick * tk.dir[1]),
            qom * (-kappa * r[2] + tick * tk.dir[2]),
        ]
    };

    let mut w0 = 0usize;
    for k in 0..shared.n_steps {
        let wh = if w0 + 1 == s2 { 0 } else { w0 + 1 };
        let w1 = if wh + 1 == s2 { 0 } else { wh + 1 };
        let (ct0, st0) = (ct[w0], st[w0]);
        let (cth, sth) = (ct[wh], st[wh]);
        let (ct1, st1) = (ct[w1], st[w1]);
        let t0 = k as f64 * h;
        let a0 = tk.amp_at(t0);
        let ah = tk.amp_at(t0 + 0.5 * h);
        let a1 = tk.amp_at(t0 + h);

        for l in 0..L {
            if !alive[l] {
                continue;
            }
            noise[l].step();
            let m = noise[l].multiplier;
            let c0 = ct0 * cp[l] - st0 * sp[l];
            let ch = cth * cp[l] - sth * sp[l];
            let c1 = ct1 * cp[l] - st1 * sp[l];

            let r0 = pos[l];
            let u0 = vel[l];
            let k1v = acc(&r0, c0, a0, m);
            let mut r = [0.0; 3];
            for i in 0..3 {
                r[i] = r0[i] + 0.5 * h * u0[i];
            }
            let mut u = [0.0; 3];
            for i in 0..3 {
                u[i] = u0[i] + 0.5 * h * k1v[i];
            }
            let k2v = acc(&r, ch, ah, m);
            let k2x = u;
            for i in 0..3 {
                r[i] = r0[i] + 0.5 * h * k2x[i];
            }
            for i in 0..3 {
                u[i] = u0[i] + 0.5 * h * k2v[i];
            }
            let k3v = acc(&r, ch, ah, m);
            let k3x = u;
            for i in 0..3 {
                r[i] = r0[i] + h * k3x[i];
            }
            for i in 0..3 {
                u[i] = u0[i] + h * k3v[i];
            }
            let k4v = acc(&r, c1, a1, m);
            let k4x = u;

            let mut rn = [0.0; 3];
            let mut un = [0.0; 3];
            let mut finite = true;
            for i in 0..3 {
                rn[i] = r0[i] + h / 6.0 * (u0[i] + 2.0 * (k2x[i] + k3x[i]) + k4x[i]);
                un[i] = u0[i] + h / 6.0 * (k1v[i] + 2.0 * (k2v[i] + k3v[i]) + k4v[i]);
                finite &= rn[i].is_finite() && un[i].is_finite();
            }

            if !finite {
                out[l].status = LaneStatus::Diverged { t: t0 };
                alive[l] = false;
                n_alive -= 1;
                continue;
            }
            pos[l] = rn;
            vel[l] = un;
            if rn[0].abs() > er[0] || rn[1].abs() > er[1] || rn[2].abs() > er[2] {
                let t_esc = escape_time(&r0, &rn, &er, t0, h);
                out[l].status = if t_esc > shared.cap {
                    LaneStatus::Capped
                } else {
                    LaneStatus::Escaped { t: t_esc }
                };
                out[l].position = rn;
                out[l].velocity = un;
                alive[l] = false;
                n_alive -= 1;
            }
        }

        if dec > 0 && (k + 1) % dec == 0 {
            for l in 0..L {
                if alive[l] {
                    out[l].positions.push(pos[l]);
                    if store_v {
                        out[l].velocities.push(vel[l]);
                    }
                }
            }
        }
        if n_alive == 0 {
            break;
        }
        w0 = if w0 + 2 >= s2 { w0 + 2 - s2 } else { w0 + 2 };
    }

    for l in 0..L {
        if alive[l] {
            out[l].status = LaneStatus::Capped;
            out[l].position = pos[l];
            out[l].velocity = vel[l];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Public entry points.

fn validate_inputs(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    init: &InitialCondition,
    term: &TerminationSpec,
    tickle: Option<&TickleSpec>,
    noise: Option<&DriveNoiseSpec>,
    capture: Option<&CaptureSpec>,
) -> Result<()> {
    model.validate()?;
    drive.validate()?;
    particle.validate()?;
    init.validate()?;
    term.validate()?;
    if let Some(t) = tickle {
        t.validate()?;
    }
    if let Some(n) = noise {
        n.validate()?;
    }
    if let Some(c) = capture {
        c.validate()?;
    }
    let axes: &[usize] = if model.is_1d() { &[0] } else { &[0, 1, 2] };
    for &a in axes {
        if init.position[a].abs() >= term.escape_radius[a] {
            return Err(Error::InvalidArgument(format!(
                "initial position {} m on axis {a} is outside the escape boundary {} m",
                init.position[a], term.escape_radius[a]
            )));
        }
    }
    if model.is_1d() {
        if init.position[1] != 0.0
            || init.position[2] != 0.0
            || init.velocity[1] != 0.0
            || init.velocity[2] != 0.0
        {
            return Err(Error::InvalidArgument(
                "1D models require zero y/z initial position and velocity".into(),
            ));
        }
        if let Some(t) = tickle {
            if t.direction[1] != 0.0 || t.direction[2] != 0.0 {
                return Err(Error::InvalidArgument(
                    "1D models require the tickle direction along x".into(),
                ));
            }
        }
    }
    Ok(())
}

fn make_shared<'a>(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    term: &TerminationSpec,
    tickle: Option<&TickleSpec>,
    capture: Option<&CaptureSpec>,
    tables: &'a DriveTables,
) -> RunShared<'a> {
    let h = drive.period() / term.steps_per_period as f64;
    let n_steps = (term.time_cap / h).ceil() as u64;
    RunShared {
        h,
        n_steps,
        tables,
        qom: particle.charge / particle.mass,
        env: model.envelope().scaled(drive.amplitude_scale),
        kappa: model.axial_curvature().unwrap_or(0.0),
        escape: term.escape_radius,
        cap: term.time_cap,
        tickle: tickle.map(TickleRt::from_spec).unwrap_or(NO_TICKLE),
        capture: capture.copied(),
    }
}

fn lane_to_outcome(lane: LaneOut, shared: &RunShared) -> Result<SimOutcome> {
    let trajectory = shared.capture.map(|c| Trajectory {
        sample_dt: shared.h * c.decimation as f64,
        decimation: c.decimation,
        positions: lane.positions,
        velocities: c.store_velocity.then_some(lane.velocities),
    });
    match lane.status {
        LaneStatus::Diverged { t } => Err(Error::IntegrationDiverged { last_valid_time: t }),
        LaneStatus::Escaped { t } => Ok(SimOutcome {
            storage_time: t,
            escaped: true,
            capped: false,
            final_position: lane.position,
            final_velocity: lane.velocity,
            trajectory,
        }),
        LaneStatus::Capped | LaneStatus::Running => Ok(SimOutcome {
            storage_time: shared.cap,
            escaped: false,
            capped: true,
            final_position: lane.position,
            final_velocity: lane.velocity,
            trajectory,
        }),
    }
}

/// Integrates one trajectory. Escape is declared at the first step where any
/// |coordinate| exceeds its escape radius, with the crossing time linearly
/// interpolated inside the step; otherwise the run is capped at `time_cap`.
/// A trajectory is attached when `capture` is given.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    init: &InitialCondition,
    term: &TerminationSpec,
    tickle: Option<&TickleSpec>,
    noise: Option<&DriveNoiseSpec>,
    capture: Option<&CaptureSpec>,
) -> Result<SimOutcome> {
    validate_inputs(model, drive, particle, init, term, tickle, noise, capture)?;
    let tables = DriveTables::new(term.steps_per_period);
    let shared = make_shared(model, drive, particle, term, tickle, capture, &tables);
    let mut noise_lane = [noise
        .map(|n| NoiseLane::from_spec(n, term.steps_per_period))
        .unwrap_or_else(NoiseLane::inactive)];
    let inits = [*init];
    let lane = if model.is_1d() {
        run_1d::<1>(&shared, &inits, &mut noise_lane, &[true])
    } else {
        run_3d::<1>(&shared, &inits, &mut noise_lane, &[true])
    }
    .remove(0);
    lane_to_outcome(lane, &shared)
}

/// One cell of a batched run.
#[derive(Debug, Clone)]
pub(crate) struct BatchJob {
    pub init: InitialCondition,
    pub noise: Option<DriveNoiseSpec>,
}

/// Batch width of the lane engines.
pub(crate) const BATCH_LANES: usize = 8;

/// Integrates a slice of jobs in lane batches of [`BATCH_LANES`]. Results
/// are bit-identical to per-job [`integrate`] calls in any grouping.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate_many(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    jobs: &[BatchJob],
    term: &TerminationSpec,
    tickle: Option<&TickleSpec>,
    capture: Option<&CaptureSpec>,
) -> Vec<Result<SimOutcome>> {
    let mut results = Vec::with_capacity(jobs.len());
    if jobs.is_empty() {
        return results;
    }
    for job in jobs {
        if let Err(e) = validate_inputs(
            model,
            drive,
            particle,
            &job.init,
            term,
            tickle,
            job.noise.as_ref(),
            capture,
        ) {
            results.push(Err(e));
        } else {
            results.push(Ok(SimOutcome {
                storage_time: 0.0,
                escaped: false,
                capped: false,
                final_position: [0.0; 3],
                final_velocity: [0.0; 3],
                trajectory: None,
            }));
        }
    }

    let tables = DriveTables::new(term.steps_per_period);
    let shared = make_shared(model, drive, particle, term, tickle, capture, &tables);
    let valid_idx: Vec<usize> = (0..jobs.len()).filter(|i| results[*i].is_ok()).collect();
    for chunk in valid_idx.chunks(BATCH_LANES) {
        let mut inits = [InitialCondition::new([0.0; 3], [0.0; 3], 0.0); BATCH_LANES];
        let mut noise = [NoiseLane::inactive(); BATCH_LANES];
        // Lanes beyond the chunk are dead padding and never integrate.
        let mut active = [false; BATCH_LANES];
        for (l, &i) in chunk.iter().enumerate() {
            inits[l] = jobs[i].init;
            noise[l] = jobs[i]
                .noise
                .as_ref()
                .map(|n| NoiseLane::from_spec(n, term.steps_per_period))
                .unwrap_or_else(NoiseLane::inactive);
            active[l] = true;
        }
        let lanes = if model.is_1d() {
            run_1d::<BATCH_LANES>(&shared, &inits, &mut noise, &active)
        } else {
            run_3d::<BATCH_LANES>(&shared, &inits, &mut noise, &active)
        };
        for (l, lane) in lanes.into_iter().enumerate().take(chunk.len()) {
            results[chunk[l]] = lane_to_outcome(lane, &shared);
        }
    }
    results
}

/// Force q·[E_rf·(1 + ε) + E_static + E_tickle] at one evaluation point.
/// This is the reference the integrator's internal fast path is tested
/// against. The noise multiplier of a time is looked up by interval index
/// floor(t/(hold·T)); exact interval boundaries belong to the later interval
/// in the integrator's integer indexing, while this float path may round
/// either way on them.
#[allow(clippy::too_many_arguments)]
pub fn total_force(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    position: [f64; 3],
    time: f64,
    phase: f64,
    tickle: Option<&TickleSpec>,
    noise: Option<&DriveNoiseSpec>,
) -> Result<[f64; 3]> {
    model.validate()?;
    drive.validate()?;
    particle.validate()?;
    if !position.iter().all(|c| c.is_finite()) || !time.is_finite() || !phase.is_finite() {
        return Err(Error::InvalidArgument(
            "position, time and phase must be finite".into(),
        ));
    }
    if let Some(t) = tickle {
        t.validate()?;
    }
    let multiplier = match noise {
        None => 1.0,
        Some(n) => {
            n.validate()?;
            if n.relative_sigma == 0.0 {
                1.0
            } else {
                let interval = (time / (n.hold_periods as f64 * drive.period())).floor();
                if interval < 0.0 {
                    1.0
                } else {
                    1.0 + n.relative_sigma * noise_normal(n.seed, interval as u64)
                }
            }
        }
    };

    let env = model.envelope().scaled(drive.amplitude_scale);
    let c = (drive.omega * time + phase).cos() * multiplier;
    let mut field = match model.axial_curvature() {
        None => [env.eval(position[0]) * c, 0.0, 0.0],
        Some(kappa) => [
            env.eval(position[0]) * c + 0.5 * kappa * position[0],
            -env.eval(position[1]) * c + 0.5 * kappa * position[1],
            -kappa * position[2],
        ],
    };
    if let Some(t) = tickle {
        let rt = TickleRt::from_spec(t);
        let a = rt.amp_at(time);
        let g = 1.0
            + (position[0] * rt.dir[0] + position[1] * rt.dir[1] + position[2] * rt.dir[2])
                * rt.inv_scale;
        for i in 0..3 {
            field[i] += a * g * rt.dir[i];
        }
    }
    Ok([
        particle.charge * field[0],
        particle.charge * field[1],
        particle.charge * field[2],
    ])
}

/// Runs `integrate` at the configured resolution and at double resolution,
/// returning both outcomes for step-size validation.
pub fn convergence_probe(
    model: &FieldModel,
    drive: &DriveSpec,
    particle: &ParticleSpec,
    init: &InitialCondition,
    term: &TerminationSpec,
) -> Result<(SimOutcome, SimOutcome)> {
    let coarse = integrate(model, drive, particle, init, term, None, None, None)?;
    let fine_term = TerminationSpec {
        steps_per_period: term.steps_per_period * 2,
        ..*term
    };
    let fine = integrate(model, drive, particle, init, &fine_term, None, None, None)?;
    Ok((coarse, fine))
}
