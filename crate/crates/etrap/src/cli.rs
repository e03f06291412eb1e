//! Command-line front end: TOML run configuration, subcommand dispatch, and
//! deterministic text output.
//!
//! A run is described by an optional `--config FILE` (trap, particle, drive,
//! integration, and detection parameters) plus per-subcommand flags. Every
//! output starts with a `#`-prefixed header that echoes the fully resolved
//! configuration as valid TOML, so a result file is self-describing and can
//! be replayed: stripping the leading `# ` from the configuration block
//! yields a file that parses back to the exact same run.
//!
//! Output is written as a single in-memory buffer and flushed once, with
//! shortest-round-trip float formatting throughout; two runs with the same
//! configuration and seed produce byte-identical files regardless of worker
//! count.
//!
//! Exit codes: 0 success, 1 domain error (fit failure, instability,
//! saturated inversion), 2 configuration error (bad TOML, unknown or
//! out-of-range key, malformed flag).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{self, SweepSpec, TickleScanSpec};
use crate::constants::{ELECTRON_MASS, ELEMENTARY_CHARGE, EV};
use crate::dynamics::{integrate, CaptureSpec, InitialCondition, TerminationSpec};
use crate::mathieu;
use crate::model::{
    calibrate_anharmonic, CalibrationTargets, DeviationTarget, DriveSpec, FieldModel,
    ParticleSpec,
};
use crate::stats::{self, CycleProtocol, DecayModel, DetectionChain};
use crate::{Error, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

// ---------------------------------------------------------------------------
// Run configuration

/// Field-model selector for the `[model]` section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Ideal linear RF field, unbounded depth.
    Harmonic,
    /// Linear core with algebraic rolloff, 1D.
    Anharmonic,
    /// Anharmonic radial plane plus a static axial mode.
    Separable,
}

impl ModelVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::Harmonic => "harmonic",
            ModelVariant::Anharmonic => "anharmonic",
            ModelVariant::Separable => "separable",
        }
    }

    fn parse(s: &str, path: &str) -> Result<Self> {
        match s {
            "harmonic" => Ok(ModelVariant::Harmonic),
            "anharmonic" => Ok(ModelVariant::Anharmonic),
            "separable" => Ok(ModelVariant::Separable),
            other => Err(Error::Config(format!(
                "{path}: expected \"harmonic\", \"anharmonic\", or \"separable\", got {other:?}"
            ))),
        }
    }
}

/// Fully resolved run configuration. Values are stored in the file's display
/// units (GHz, MHz, micrometers, nanoseconds) so that emitting and re-parsing
/// the echo is lossless; conversion to SI happens in the builder methods.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for sweeps and scans; 0 uses all cores.
    pub workers: usize,
    pub drive_frequency_ghz: f64,
    pub drive_amplitude_scale: f64,
    pub particle_charge_c: f64,
    pub particle_mass_kg: f64,
    pub model_variant: ModelVariant,
    pub gradient_v_per_m2: f64,
    pub rolloff_scale_um: f64,
    pub rolloff_order: f64,
    pub knee_order: u32,
    pub axial_freq_mhz: f64,
    pub steps_per_period: u32,
    pub escape_radius_um: f64,
    pub extraction_efficiency: f64,
    pub mesh_open_area: f64,
    pub mcp_open_area: f64,
    pub voltage_factor: f64,
    pub t_load_us: f64,
    pub t_wait_ms: f64,
    pub deadtime_ns: f64,
    pub window_offset_ns: f64,
    pub window_width_ns: f64,
    pub background_per_cycle: f64,
}

impl Default for RunConfig {
    /// The bundled trap and detection chain: electron in the 1.6 GHz drive,
    /// field calibrated to a 300 MHz radial secular frequency and 1.3 eV
    /// depth, mesh/MCP detection with a 60 ns deadtime.
    fn default() -> Self {
        let (gradient, rolloff_scale, rolloff_order, knee_order) =
            match FieldModel::calibrated_reference() {
                FieldModel::Anharmonic1D {
                    gradient,
                    rolloff_scale,
                    rolloff_order,
                    knee_order,
                } => (gradient, rolloff_scale, rolloff_order, knee_order),
                _ => unreachable!("the calibrated reference model is anharmonic"),
            };
        let chain = DetectionChain::default();
        let protocol = CycleProtocol::default();
        Self {
            seed: 0,
            workers: 0,
            drive_frequency_ghz: 1.6,
            drive_amplitude_scale: 1.0,
            particle_charge_c: -ELEMENTARY_CHARGE,
            particle_mass_kg: ELECTRON_MASS,
            model_variant: ModelVariant::Anharmonic,
            gradient_v_per_m2: gradient,
            rolloff_scale_um: rolloff_scale * 1e6,
            rolloff_order,
            knee_order,
            axial_freq_mhz: 40.0,
            steps_per_period: 128,
            escape_radius_um: 500.0,
            extraction_efficiency: chain.extraction_efficiency,
            mesh_open_area: chain.mesh_open_area,
            mcp_open_area: chain.mcp_open_area,
            voltage_factor: chain.voltage_factor,
            t_load_us: protocol.t_load * 1e6,
            t_wait_ms: protocol.t_wait * 1e3,
            deadtime_ns: 60.0,
            window_offset_ns: protocol.window_offset_ns,
            window_width_ns: protocol.window_width_ns,
            background_per_cycle: protocol.background_per_cycle,
        }
    }
}

impl RunConfig {
    pub fn drive(&self) -> DriveSpec {
        DriveSpec {
            omega: TWO_PI * self.drive_frequency_ghz * 1e9,
            amplitude_scale: self.drive_amplitude_scale,
        }
    }

    pub fn particle(&self) -> ParticleSpec {
        ParticleSpec {
            charge: self.particle_charge_c,
            mass: self.particle_mass_kg,
        }
    }

    fn radial_model(&self) -> Result<FieldModel> {
        match self.model_variant {
            ModelVariant::Harmonic => FieldModel::harmonic_rf_1d(self.gradient_v_per_m2),
            _ => FieldModel::anharmonic_1d(
                self.gradient_v_per_m2,
                self.rolloff_scale_um * 1e-6,
                self.rolloff_order,
                self.knee_order,
            ),
        }
    }

    /// The configured field model.
    pub fn field_model(&self) -> Result<FieldModel> {
        let radial = self.radial_model()?;
        match self.model_variant {
            ModelVariant::Separable => FieldModel::separable_from_axial_frequency(
                radial,
                TWO_PI * self.axial_freq_mhz * 1e6,
                &self.particle(),
            ),
            _ => Ok(radial),
        }
    }

    /// The configured model promoted to 3D when necessary: tickle scans are
    /// only defined on a separable model, so a 1D variant is wrapped with
    /// the configured axial mode.
    pub fn field_model_3d(&self) -> Result<FieldModel> {
        let model = self.field_model()?;
        if model.is_1d() {
            FieldModel::separable_from_axial_frequency(
                model,
                TWO_PI * self.axial_freq_mhz * 1e6,
                &self.particle(),
            )
        } else {
            Ok(model)
        }
    }

    pub fn termination(&self, time_cap: f64) -> TerminationSpec {
        TerminationSpec {
            time_cap,
            escape_radius: [self.escape_radius_um * 1e-6; 3],
            steps_per_period: self.steps_per_period,
        }
    }

    pub fn detection_chain(&self) -> DetectionChain {
        DetectionChain {
            extraction_efficiency: self.extraction_efficiency,
            mesh_open_area: self.mesh_open_area,
            mcp_open_area: self.mcp_open_area,
            voltage_factor: self.voltage_factor,
        }
    }

    pub fn cycle_protocol(&self) -> CycleProtocol {
        CycleProtocol {
            t_load: self.t_load_us * 1e-6,
            t_wait: self.t_wait_ms * 1e-3,
            window_offset_ns: self.window_offset_ns,
            window_width_ns: self.window_width_ns,
            background_per_cycle: self.background_per_cycle,
        }
    }

    /// Serializes the configuration as TOML, annotating defaults that encode
    /// the bundled trap profile. `parse_config` inverts this losslessly.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "workers = {}  # 0 uses all cores", self.workers);
        let _ = writeln!(w);
        let _ = writeln!(w, "[drive]");
        let _ = writeln!(
            w,
            "frequency_GHz = {}  # microwave quadrupole drive",
            toml_num(self.drive_frequency_ghz)
        );
        let _ = writeln!(
            w,
            "amplitude_scale = {}",
            toml_num(self.drive_amplitude_scale)
        );
        let _ = writeln!(w);
        let _ = writeln!(w, "[particle]");
        let _ = writeln!(
            w,
            "charge_C = {}  # electron",
            toml_num(self.particle_charge_c)
        );
        let _ = writeln!(w, "mass_kg = {}  # electron", toml_num(self.particle_mass_kg));
        let _ = writeln!(w);
        let _ = writeln!(w, "[model]");
        let _ = writeln!(
            w,
            "variant = \"{}\"  # harmonic | anharmonic | separable",
            self.model_variant.as_str()
        );
        let _ = writeln!(
            w,
            "gradient_V_per_m2 = {}  # calibrated: 300 MHz radial secular frequency",
            toml_num(self.gradient_v_per_m2)
        );
        let _ = writeln!(
            w,
            "rolloff_scale_um = {}  # calibrated: 1.3 eV depth, harmonic to 2% within 200 um",
            toml_num(self.rolloff_scale_um)
        );
        let _ = writeln!(w, "rolloff_order = {}", toml_num(self.rolloff_order));
        let _ = writeln!(w, "knee_order = {}", self.knee_order);
        let _ = writeln!(
            w,
            "axial_freq_MHz = {}  # static axial mode of the separable variant",
            toml_num(self.axial_freq_mhz)
        );
        let _ = writeln!(w);
        let _ = writeln!(w, "[integrate]");
        let _ = writeln!(w, "steps_per_period = {}", self.steps_per_period);
        let _ = writeln!(
            w,
            "escape_radius_um = {}  # per-axis loss boundary",
            toml_num(self.escape_radius_um)
        );
        let _ = writeln!(w);
        let _ = writeln!(w, "[chain]");
        let _ = writeln!(
            w,
            "extraction_efficiency = {}  # pulsed extraction into the detection path",
            toml_num(self.extraction_efficiency)
        );
        let _ = writeln!(
            w,
            "mesh_open_area = {}  # grounded-mesh transmission",
            toml_num(self.mesh_open_area)
        );
        let _ = writeln!(
            w,
            "mcp_open_area = {}  # detector open-area fraction",
            toml_num(self.mcp_open_area)
        );
        let _ = writeln!(
            w,
            "voltage_factor = {}  # detection efficiency at reduced front voltage",
            toml_num(self.voltage_factor)
        );
        let _ = writeln!(w);
        let _ = writeln!(w, "[protocol]");
        let _ = writeln!(w, "t_load_us = {}", toml_num(self.t_load_us));
        let _ = writeln!(w, "t_wait_ms = {}", toml_num(self.t_wait_ms));
        let _ = writeln!(
            w,
            "deadtime_ns = {}  # detector deadtime",
            toml_num(self.deadtime_ns)
        );
        let _ = writeln!(w, "window_offset_ns = {}", toml_num(self.window_offset_ns));
        let _ = writeln!(w, "window_width_ns = {}", toml_num(self.window_width_ns));
        let _ = writeln!(
            w,
            "background_per_cycle = {}  # stray counts per cycle inside the window",
            toml_num(self.background_per_cycle)
        );
        s
    }
}

/// TOML float literal with shortest round-trip digits. Plain notation near
/// unity, exponent notation far from it; integers keep a trailing `.0` so
/// the literal stays a float.
fn toml_num(x: f64) -> String {
    if x == 0.0 {
        return "0.0".into();
    }
    let a = x.abs();
    if (1e-3..1e7).contains(&a) {
        let s = format!("{x}");
        if s.contains('.') {
            s
        } else {
            format!("{s}.0")
        }
    } else {
        format!("{x:e}")
    }
}

// ---------------------------------------------------------------------------
// Config parsing

/// All legal configuration paths, as `section.key` or bare root keys.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "workers",
    "drive.frequency_GHz",
    "drive.amplitude_scale",
    "particle.charge_C",
    "particle.mass_kg",
    "model.variant",
    "model.gradient_V_per_m2",
    "model.rolloff_scale_um",
    "model.rolloff_order",
    "model.knee_order",
    "model.axial_freq_MHz",
    "integrate.steps_per_period",
    "integrate.escape_radius_um",
    "chain.extraction_efficiency",
    "chain.mesh_open_area",
    "chain.mcp_open_area",
    "chain.voltage_factor",
    "protocol.t_load_us",
    "protocol.t_wait_ms",
    "protocol.deadtime_ns",
    "protocol.window_offset_ns",
    "protocol.window_width_ns",
    "protocol.background_per_cycle",
];

fn path_of(section: Option<&str>, key: &str) -> String {
    match section {
        Some(s) => format!("[{s}] {key}"),
        None => key.to_string(),
    }
}

fn as_f64(v: &toml::Value, path: &str) -> Result<f64> {
    match v {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(i) => Ok(*i as f64),
        other => Err(Error::Config(format!(
            "{path}: expected a number, got {other}"
        ))),
    }
}

fn as_u64(v: &toml::Value, path: &str) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        toml::Value::Integer(i) => Err(Error::Config(format!(
            "{path}: must be non-negative, got {i}"
        ))),
        other => Err(Error::Config(format!(
            "{path}: expected an integer, got {other}"
        ))),
    }
}

fn as_str<'v>(v: &'v toml::Value, path: &str) -> Result<&'v str> {
    match v {
        toml::Value::String(s) => Ok(s),
        other => Err(Error::Config(format!(
            "{path}: expected a string, got {other}"
        ))),
    }
}

fn req_positive(x: f64, path: &str) -> Result<f64> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(Error::Config(format!(
            "{path}: must be positive and finite, got {x}"
        )))
    }
}

fn req_nonneg(x: f64, path: &str) -> Result<f64> {
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(Error::Config(format!(
            "{path}: must be non-negative and finite, got {x}"
        )))
    }
}

fn req_nonzero(x: f64, path: &str) -> Result<f64> {
    if x.is_finite() && x != 0.0 {
        Ok(x)
    } else {
        Err(Error::Config(format!(
            "{path}: must be nonzero and finite, got {x}"
        )))
    }
}

fn req_fraction(x: f64, path: &str) -> Result<f64> {
    if x.is_finite() && (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(Error::Config(format!(
            "{path}: must lie in [0, 1], got {x}"
        )))
    }
}

fn req_range_u64(x: u64, lo: u64, hi: u64, path: &str) -> Result<u64> {
    if (lo..=hi).contains(&x) {
        Ok(x)
    } else {
        Err(Error::Config(format!(
            "{path}: must lie in [{lo}, {hi}], got {x}"
        )))
    }
}

/// Parses a TOML run configuration. Unknown keys are rejected (a typo that
/// silently falls back to a default is worse than an error), every value is
/// range-checked, and `[drive] frequency_GHz` is mandatory: a configuration
/// that does not say what drive it runs under is ambiguous.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;

    for (k, v) in &table {
        let is_section = KNOWN_KEYS.iter().any(|p| {
            p.split_once('.')
                .is_some_and(|(sec, _)| sec == k.as_str())
        });
        match v {
            toml::Value::Table(inner) => {
                if !is_section {
                    return Err(Error::Config(format!(
                        "unknown configuration section [{k}]"
                    )));
                }
                for ik in inner.keys() {
                    let path = format!("{k}.{ik}");
                    if !KNOWN_KEYS.contains(&path.as_str()) {
                        return Err(Error::Config(format!(
                            "unknown configuration key [{k}] {ik}"
                        )));
                    }
                }
            }
            _ if is_section => {
                return Err(Error::Config(format!("expected a table for [{k}]")));
            }
            _ => {
                if !KNOWN_KEYS.contains(&k.as_str()) {
                    return Err(Error::Config(format!("unknown configuration key {k}")));
                }
            }
        }
    }

    let get = |section: Option<&str>, key: &str| -> Option<&toml::Value> {
        match section {
            Some(s) => table.get(s)?.as_table()?.get(key),
            None => table.get(key),
        }
    };
    // Fetch + path in one place so diagnostics always name the full key.
    macro_rules! key {
        ($sec:expr, $key:expr) => {
            (get($sec, $key), path_of($sec, $key))
        };
    }

    let mut cfg = RunConfig::default();

    let (freq, p) = key!(Some("drive"), "frequency_GHz");
    let freq = freq.ok_or_else(|| Error::Config(format!("{p}: missing required key")))?;
    cfg.drive_frequency_ghz = req_positive(as_f64(freq, &p)?, &p)?;

    if let (Some(v), p) = key!(None, "seed") {
        cfg.seed = as_u64(v, &p)?;
    }
    if let (Some(v), p) = key!(None, "workers") {
        cfg.workers = req_range_u64(as_u64(v, &p)?, 0, 4096, &p)? as usize;
    }
    if let (Some(v), p) = key!(Some("drive"), "amplitude_scale") {
        cfg.drive_amplitude_scale = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("particle"), "charge_C") {
        cfg.particle_charge_c = req_nonzero(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("particle"), "mass_kg") {
        cfg.particle_mass_kg = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("model"), "variant") {
        cfg.model_variant = ModelVariant::parse(as_str(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("model"), "gradient_V_per_m2") {
        cfg.gradient_v_per_m2 = req_nonzero(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("model"), "rolloff_scale_um") {
        cfg.rolloff_scale_um = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("model"), "rolloff_order") {
        cfg.rolloff_order = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("model"), "knee_order") {
        cfg.knee_order = req_range_u64(as_u64(v, &p)?, 1, 12, &p)? as u32;
    }
    if let (Some(v), p) = key!(Some("model"), "axial_freq_MHz") {
        cfg.axial_freq_mhz = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("integrate"), "steps_per_period") {
        cfg.steps_per_period = req_range_u64(as_u64(v, &p)?, 32, 1_000_000, &p)? as u32;
    }
    if let (Some(v), p) = key!(Some("integrate"), "escape_radius_um") {
        cfg.escape_radius_um = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("chain"), "extraction_efficiency") {
        cfg.extraction_efficiency = req_fraction(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("chain"), "mesh_open_area") {
        cfg.mesh_open_area = req_fraction(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("chain"), "mcp_open_area") {
        cfg.mcp_open_area = req_fraction(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("chain"), "voltage_factor") {
        cfg.voltage_factor = req_fraction(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("protocol"), "t_load_us") {
        cfg.t_load_us = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("protocol"), "t_wait_ms") {
        cfg.t_wait_ms = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("protocol"), "deadtime_ns") {
        cfg.deadtime_ns = req_nonneg(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("protocol"), "window_offset_ns") {
        cfg.window_offset_ns = req_nonneg(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("protocol"), "window_width_ns") {
        cfg.window_width_ns = req_positive(as_f64(v, &p)?, &p)?;
    }
    if let (Some(v), p) = key!(Some("protocol"), "background_per_cycle") {
        cfg.background_per_cycle = req_nonneg(as_f64(v, &p)?, &p)?;
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Argument surface

#[derive(Parser)]
#[command(
    name = "etrap",
    version,
    about = "Single-electron microwave-trap simulator and detection statistics"
)]
struct Cli {
    /// TOML run configuration (trap, particle, drive, detection chain).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
    /// RNG seed; overrides the config value.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory from an at-rest start on the x axis.
    Trajectory {
        /// Start distance from the trap center, micrometers.
        #[arg(long, value_name = "UM", allow_negative_numbers = true)]
        x0_um: f64,
        /// Drive phase at release, radians.
        #[arg(long, value_name = "RAD", default_value_t = 0.0, allow_negative_numbers = true)]
        phase_rad: f64,
        /// Simulated-time cap, milliseconds.
        #[arg(long, value_name = "MS", default_value_t = 1.0)]
        cap_ms: f64,
    },
    /// Storage-time map over release distance and drive phase.
    Sweep {
        /// Grid as DISTANCESxPHASES, e.g. 100x50.
        #[arg(long, value_name = "NxM", default_value = "100x50")]
        grid: String,
        /// Per-cell simulated-time cap, milliseconds.
        #[arg(long, value_name = "MS", default_value_t = 1.0)]
        cap_ms: f64,
        /// Worker threads; defaults to the config value, 0 uses all cores.
        #[arg(long, value_name = "N")]
        workers: Option<usize>,
        /// Distance-axis minimum, micrometers.
        #[arg(long, value_name = "UM", default_value_t = 5.0)]
        x0_min_um: f64,
        /// Distance-axis maximum, micrometers.
        #[arg(long, value_name = "UM", default_value_t = 450.0)]
        x0_max_um: f64,
    },
    /// Survival spectroscopy: scan an excitation tone, record ensemble loss.
    Tickle {
        #[arg(long, value_name = "MHZ", default_value_t = 20.0)]
        fmin_mhz: f64,
        #[arg(long, value_name = "MHZ", default_value_t = 350.0)]
        fmax_mhz: f64,
        #[arg(long, value_name = "MHZ", default_value_t = 1.0)]
        step_mhz: f64,
        /// Tone amplitude, V/m.
        #[arg(long, value_name = "V_PER_M")]
        amp: f64,
        /// Tone duration per scan point, microseconds.
        #[arg(long, value_name = "US", default_value_t = 20.0)]
        duration_us: f64,
        /// Ensemble size.
        #[arg(long, value_name = "N", default_value_t = 8)]
        members: usize,
        /// Ensemble initial-position extent, micrometers.
        #[arg(long, value_name = "UM", default_value_t = 50.0)]
        extent_um: f64,
        /// Worker threads; defaults to the config value, 0 uses all cores.
        #[arg(long, value_name = "N")]
        workers: Option<usize>,
    },
    /// Floquet stability scan over the Mathieu q axis.
    StabilityDiagram {
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, default_value_t = 0.0)]
        qmin: f64,
        #[arg(long, default_value_t = 1.0)]
        qmax: f64,
        #[arg(long, default_value_t = 1e-3)]
        qstep: f64,
    },
    /// Fit field-model parameters to frequency, depth, and harmonicity targets.
    Calibrate {
        /// Target radial secular frequency, MHz.
        #[arg(long, value_name = "MHZ", default_value_t = 300.0)]
        freq_mhz: f64,
        /// Target trap depth, eV.
        #[arg(long, value_name = "EV")]
        depth_ev: Option<f64>,
        /// Harmonic-deviation bound, percent.
        #[arg(long, value_name = "PCT")]
        dev_pct: Option<f64>,
        /// Extent over which the deviation bound applies, micrometers.
        #[arg(long, value_name = "UM", default_value_t = 200.0)]
        extent_um: f64,
    },
    /// Fit the saturating loading model to (time, probability) points.
    FitLoading {
        /// Two-column text file: time and detection probability per line.
        file: PathBuf,
    },
    /// Fit the exponential-plus-background storage model to (time, probability) points.
    FitStorage {
        /// Two-column text file: time and detection probability per line.
        file: PathBuf,
    },
    /// Invert a detection probability into a mean electron number.
    EstimateN {
        /// Fraction of cycles with at least one detected event.
        #[arg(long, value_name = "P")]
        p: f64,
    },
    /// Monte Carlo detection cycles with pulsed arrival and background.
    SimulateCycles {
        /// True mean electron number per cycle.
        #[arg(long, value_name = "N")]
        n_mean: f64,
        #[arg(long, value_name = "N", default_value_t = 100_000)]
        cycles: u64,
    },
}

// ---------------------------------------------------------------------------
// Dispatch

/// Parses `args` and runs the selected subcommand. Returns the process exit
/// code; diagnostics go to stderr, results to `--out` or stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_cli(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let text = execute(cli.command, &cfg)?;
    match &cli.out {
        Some(path) => fs::write(path, text.as_bytes())?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn execute(command: Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Trajectory {
            x0_um,
            phase_rad,
            cap_ms,
        } => cmd_trajectory(cfg, x0_um, phase_rad, cap_ms),
        Command::Sweep {
            grid,
            cap_ms,
            workers,
            x0_min_um,
            x0_max_um,
        } => cmd_sweep(cfg, &grid, cap_ms, workers, x0_min_um, x0_max_um),
        Command::Tickle {
            fmin_mhz,
            fmax_mhz,
            step_mhz,
            amp,
            duration_us,
            members,
            extent_um,
            workers,
        } => cmd_tickle(
            cfg, fmin_mhz, fmax_mhz, step_mhz, amp, duration_us, members, extent_um, workers,
        ),
        Command::StabilityDiagram { a, qmin, qmax, qstep } => {
            cmd_stability(cfg, a, qmin, qmax, qstep)
        }
        Command::Calibrate {
            freq_mhz,
            depth_ev,
            dev_pct,
            extent_um,
        } => cmd_calibrate(cfg, freq_mhz, depth_ev, dev_pct, extent_um),
        Command::FitLoading { file } => cmd_fit(cfg, &file, DecayModel::Saturating),
        Command::FitStorage { file } => cmd_fit(cfg, &file, DecayModel::ExponentialPlusConstant),
        Command::EstimateN { p } => cmd_estimate_n(cfg, p),
        Command::SimulateCycles { n_mean, cycles } => cmd_simulate_cycles(cfg, n_mean, cycles),
    }
}

// ---------------------------------------------------------------------------
// Output helpers

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn opt_bit(b: Option<bool>) -> String {
    b.map(|v| bit(v).to_string()).unwrap_or_default()
}

/// Common output preamble: subcommand name, its parameters, and the resolved
/// configuration echoed as commented TOML.
fn push_header(out: &mut String, cfg: &RunConfig, command: &str, params: &[(&str, String)]) {
    let _ = writeln!(out, "# etrap {command}");
    for (k, v) in params {
        let _ = writeln!(out, "# {k} = {v}");
    }
    let _ = writeln!(out, "# --- configuration ---");
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            let _ = writeln!(out, "# {line}");
        }
    }
    let _ = writeln!(out, "# --- data ---");
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_trajectory(cfg: &RunConfig, x0_um: f64, phase_rad: f64, cap_ms: f64) -> Result<String> {
    let model = cfg.field_model()?;
    let drive = cfg.drive();
    let particle = cfg.particle();
    let term = cfg.termination(cap_ms * 1e-3);
    let init = InitialCondition::at_rest_1d(x0_um * 1e-6, phase_rad);
    let capture = CaptureSpec::for_spectrum(term.steps_per_period);
    let sim = integrate(
        &model,
        &drive,
        &particle,
        &init,
        &term,
        None,
        None,
        Some(&capture),
    )?;
    let traj = sim.trajectory.as_ref().expect("capture was requested");

    let mut out = String::new();
    push_header(
        &mut out,
        cfg,
        "trajectory",
        &[
            ("x0_um", num(x0_um)),
            ("phase_rad", num(phase_rad)),
            ("cap_ms", num(cap_ms)),
            ("storage_time_s", num(sim.storage_time)),
            ("escaped", bit(sim.escaped).into()),
            ("capped", bit(sim.capped).into()),
            ("sample_dt_s", num(traj.sample_dt)),
            ("samples", traj.len().to_string()),
        ],
    );
    let _ = writeln!(out, "# columns: time_s,x_m,y_m,z_m");
    for (i, p) in traj.positions.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            num(traj.time_of(i)),
            num(p[0]),
            num(p[1]),
            num(p[2])
        );
    }
    Ok(out)
}

fn cmd_sweep(
    cfg: &RunConfig,
    grid: &str,
    cap_ms: f64,
    workers: Option<usize>,
    x0_min_um: f64,
    x0_max_um: f64,
) -> Result<String> {
    let (nd, np) = parse_grid(grid)?;
    let mut spec = SweepSpec::new(x0_min_um * 1e-6, x0_max_um * 1e-6, nd, np);
    spec.term = cfg.termination(cap_ms * 1e-3);
    spec.workers = workers.unwrap_or(cfg.workers);
    let map = analysis::run_sweep(&cfg.field_model()?, &cfg.drive(), &cfg.particle(), &spec)?;

    let mut out = String::new();
    push_header(
        &mut out,
        cfg,
        "sweep",
        &[
            ("grid", format!("{nd}x{np}")),
            ("cap_ms", num(cap_ms)),
            ("x0_min_um", num(x0_min_um)),
            ("x0_max_um", num(x0_max_um)),
            ("lock_tolerance_MHz", num(map.lock_tolerance / 1e6)),
            ("lock_n_max", map.lock_n_max.to_string()),
        ],
    );
    // A row with escaped = 0 and capped = 0 marks a diverged integration.
    let _ = writeln!(
        out,
        "# columns: x0_um,phase_rad,storage_time_s,escaped,capped,secular_MHz,amplitude_um,lock_order"
    );
    for cell in &map.cells {
        let (freq, amp, lock) = match &cell.summary {
            Some(s) => (
                Some(s.secular_frequency / 1e6),
                Some(s.amplitude * 1e6),
                s.lock_order,
            ),
            None => (None, None, None),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            num(cell.x0 * 1e6),
            num(cell.phase),
            num(cell.storage_time),
            bit(cell.escaped),
            bit(cell.capped),
            opt_num(freq),
            opt_num(amp),
            lock.map(|n| n.to_string()).unwrap_or_default()
        );
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_tickle(
    cfg: &RunConfig,
    fmin_mhz: f64,
    fmax_mhz: f64,
    step_mhz: f64,
    amp: f64,
    duration_us: f64,
    members: usize,
    extent_um: f64,
    workers: Option<usize>,
) -> Result<String> {
    let model = cfg.field_model_3d()?;
    let ensemble = analysis::tickle_ensemble(members, extent_um * 1e-6, cfg.seed);
    let mut spec = TickleScanSpec::new(
        fmin_mhz * 1e6,
        fmax_mhz * 1e6,
        step_mhz * 1e6,
        amp,
        duration_us * 1e-6,
    );
    spec.steps_per_period = cfg.steps_per_period;
    spec.escape_radius = [cfg.escape_radius_um * 1e-6; 3];
    spec.workers = workers.unwrap_or(cfg.workers);
    let spectrum = analysis::tickle_scan(&model, &cfg.drive(), &cfg.particle(), &ensemble, &spec)?;

    let mut params = vec![
        ("fmin_MHz", num(fmin_mhz)),
        ("fmax_MHz", num(fmax_mhz)),
        ("step_MHz", num(step_mhz)),
        ("amp_V_per_m", num(amp)),
        ("duration_us", num(duration_us)),
        ("members", members.to_string()),
        ("extent_um", num(extent_um)),
        ("baseline", num(spectrum.baseline)),
        ("threshold", num(spectrum.threshold)),
    ];
    let dips: Vec<String> = spectrum
        .dips
        .iter()
        .map(|d| {
            format!(
                "center_MHz {} depth {} width_MHz {}",
                num(d.center / 1e6),
                num(d.depth),
                num(d.width / 1e6)
            )
        })
        .collect();
    for d in &dips {
        params.push(("dip", d.clone()));
    }

    let mut out = String::new();
    push_header(&mut out, cfg, "tickle", &params);
    let _ = writeln!(out, "# columns: freq_MHz,survival,is_dip");
    for (f, s) in spectrum.frequencies.iter().zip(&spectrum.survival) {
        let in_dip = spectrum
            .dips
            .iter()
            .any(|d| (f - d.center).abs() <= 0.5 * d.width);
        let _ = writeln!(out, "{},{},{}", num(f / 1e6), num(*s), bit(in_dip));
    }
    Ok(out)
}

fn cmd_stability(cfg: &RunConfig, a: f64, qmin: f64, qmax: f64, qstep: f64) -> Result<String> {
    let drive = cfg.drive();
    let rows = mathieu::scan_q(a, qmin, qmax, qstep, &drive)?;

    let mut out = String::new();
    push_header(
        &mut out,
        cfg,
        "stability-diagram",
        &[
            ("a", num(a)),
            ("qmin", num(qmin)),
            ("qmax", num(qmax)),
            ("qstep", num(qstep)),
        ],
    );
    let _ = writeln!(out, "# columns: a,q,stable,beta");
    for (params, verdict) in &rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            num(params.a),
            num(params.q),
            bit(verdict.stable),
            opt_num(verdict.beta)
        );
    }
    Ok(out)
}

fn cmd_calibrate(
    cfg: &RunConfig,
    freq_mhz: f64,
    depth_ev: Option<f64>,
    dev_pct: Option<f64>,
    extent_um: f64,
) -> Result<String> {
    let drive = cfg.drive();
    let particle = cfg.particle();
    let mut targets = CalibrationTargets::new(TWO_PI * freq_mhz * 1e6, drive, particle);
    if let Some(ev) = depth_ev {
        targets.depth = Some(ev * EV);
    }
    if let Some(pct) = dev_pct {
        targets.deviation = Some(DeviationTarget {
            bound: pct / 100.0,
            extent: extent_um * 1e-6,
        });
    }
    let (model, report) = calibrate_anharmonic(&targets)?;
    let achieved_mhz = model.radial_secular_frequency(&drive, &particle) / (TWO_PI * 1e6);
    let (depth_j, x_star) = model.trap_depth(&drive, &particle, 8.0 * report.rolloff_scale)?;

    let mut out = String::new();
    push_header(
        &mut out,
        cfg,
        "calibrate",
        &[
            ("freq_MHz", num(freq_mhz)),
            ("depth_eV", opt_num(depth_ev)),
            ("dev_pct", opt_num(dev_pct)),
            ("extent_um", num(extent_um)),
        ],
    );
    let _ = writeln!(out, "# columns: parameter,value");
    let rows: &[(&str, String)] = &[
        ("gradient_V_per_m2", num(report.gradient)),
        ("rolloff_scale_um", num(report.rolloff_scale * 1e6)),
        ("rolloff_order", num(report.rolloff_order)),
        ("knee_order", report.knee_order.to_string()),
        ("radial_freq_MHz", num(achieved_mhz)),
        ("trap_depth_eV", num(depth_j / EV)),
        ("barrier_um", num(x_star * 1e6)),
        ("frequency_residual", num(report.frequency_residual)),
        ("depth_residual", opt_num(report.depth_residual)),
        ("max_deviation", opt_num(report.max_deviation)),
        ("frequency_met", bit(report.frequency_met).into()),
        ("depth_met", opt_bit(report.depth_met)),
        ("deviation_met", opt_bit(report.deviation_met)),
        ("targets_met", bit(report.targets_met).into()),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    Ok(out)
}

fn cmd_fit(cfg: &RunConfig, file: &Path, model: DecayModel) -> Result<String> {
    let points = read_points(file)?;
    let (name, fit) = match model {
        DecayModel::Saturating => ("fit-loading", stats::fit_loading(&points)?),
        DecayModel::ExponentialPlusConstant => ("fit-storage", stats::fit_storage(&points)?),
    };

    let mut out = String::new();
    push_header(
        &mut out,
        cfg,
        name,
        &[
            ("file", file.display().to_string()),
            ("points", points.len().to_string()),
        ],
    );
    let _ = writeln!(out, "# columns: parameter,value,sigma");
    let model_name = match fit.model {
        DecayModel::Saturating => "saturating",
        DecayModel::ExponentialPlusConstant => "exponential_plus_constant",
    };
    let _ = writeln!(out, "model,{model_name},");
    let _ = writeln!(out, "amplitude,{},{}", num(fit.amplitude), num(fit.amplitude_sigma));
    let _ = writeln!(out, "tau,{},{}", num(fit.tau), num(fit.tau_sigma));
    let _ = writeln!(out, "offset,{},{}", num(fit.offset), num(fit.offset_sigma));
    if let (Some(f), Some(s)) = (fit.decaying_fraction, fit.decaying_fraction_sigma) {
        let _ = writeln!(out, "decaying_fraction,{},{}", num(f), num(s));
    }
    let _ = writeln!(out, "residual_norm,{},", num(fit.residual_norm));
    let _ = writeln!(out, "converged,{},", bit(fit.converged));
    let _ = writeln!(out, "identifiable,{},", bit(fit.identifiable));
    Ok(out)
}

fn cmd_estimate_n(cfg: &RunConfig, p: f64) -> Result<String> {
    let chain = cfg.detection_chain();
    let est = stats::estimate_mean_electrons(p, &chain)?;

    let mut out = String::new();
    push_header(&mut out, cfg, "estimate-n", &[("p", num(p))]);
    let _ = writeln!(out, "# columns: parameter,value");
    let _ = writeln!(out, "chain_efficiency,{}", num(stats::chain_efficiency(&chain)));
    let _ = writeln!(out, "p_detect,{}", num(est.p_detect));
    let _ = writeln!(out, "lambda,{}", num(est.lambda));
    let _ = writeln!(out, "mean_electrons,{}", num(est.mean_electrons));
    Ok(out)
}

fn cmd_simulate_cycles(cfg: &RunConfig, n_mean: f64, cycles: u64) -> Result<String> {
    let chain = cfg.detection_chain();
    let protocol = cfg.cycle_protocol();
    let mut stream = stats::simulate_cycles(&protocol, n_mean, &chain, cycles, cfg.seed)?;
    stream.deadtime_ns = cfg.deadtime_ns;
    let recorded = stats::apply_deadtime(&stream)?;
    let p = stats::detection_probability(&recorded);
    let estimated = stats::estimate_mean_electrons(p, &chain)
        .ok()
        .map(|e| e.mean_electrons);

    let mut out = String::new();
    push_header(
        &mut out,
        cfg,
        "simulate-cycles",
        &[
            ("n_mean", num(n_mean)),
            ("cycles", cycles.to_string()),
            ("seed", cfg.seed.to_string()),
            ("chain_efficiency", num(stats::chain_efficiency(&chain))),
            ("detection_probability", num(p)),
            ("estimated_mean", opt_num(estimated)),
            ("total_events", recorded.total_events().to_string()),
        ],
    );
    let _ = writeln!(out, "# columns: cycle_index,timestamp_ns");
    for (i, cycle) in recorded.cycles.iter().enumerate() {
        for t in cycle {
            let _ = writeln!(out, "{i},{}", num(*t));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Input helpers

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let err = || Error::Config(format!("--grid expects DISTANCESxPHASES like 100x50, got {s:?}"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(err)?;
    let nd: usize = a.trim().parse().map_err(|_| err())?;
    let np: usize = b.trim().parse().map_err(|_| err())?;
    Ok((nd, np))
}

/// Reads a two-column (time, probability) text file. Blank lines and lines
/// starting with `#` are skipped; columns split on commas or whitespace.
fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed = match fields.as_slice() {
            [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => points.push(p),
            None => {
                return Err(Error::Config(format!(
                    "{}:{}: expected two numbers, got {raw:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(points)
}
