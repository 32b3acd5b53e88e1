//! Time-discrete solver and verification tools for a phase-field model of
//! grain boundary motion coupled to temperature: an order parameter `w`, an
//! orientation-order `eta`, and a crystalline orientation angle `theta`
//! driven by a weighted total-variation energy.

// Negated float comparisons are deliberate: they treat NaN as failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod energy;
pub mod grid;
pub mod io;
mod linsolve;
pub mod model;
pub mod regnorm;
pub mod stepper;

pub use diagnostics::{AuditReport, OmegaReport};
pub use energy::{free_energy, EnergyBreakdown};
pub use grid::{FaceField, Field, FieldPair, Grid};
pub use linsolve::SolveError;
pub use model::{InitialData, InitialPreset, ModelSpec};
pub use regnorm::{Family, Norm, RegularizedNorm};
pub use stepper::{run, StepRecord, Stepper, Tolerances, Trajectory};
