//! Physical constants, SI units.

/// Elementary charge (C). Exact by SI definition.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Electron mass (kg), CODATA 2018.
pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;

/// One electron-volt (J).
pub const EV: f64 = ELEMENTARY_CHARGE;
