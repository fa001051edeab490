//! Fixtures shared by the criterion benches.

use ncs_core::model::{self, Mode};
use ncs_core::riccati::{self, Coupling};
use ncs_core::{synthesis, GainSchedule, StackedModel, ValidatedModel};

/// The reference instance truncated to `horizon`, with its optimal gains.
pub fn reference(horizon: usize) -> (ValidatedModel, StackedModel, GainSchedule) {
    let m = model::reference_instance()
        .expect("bundled instance parses")
        .with_horizon(horizon);
    let v = model::validate(m, Mode::Indefinite).expect("bundled instance validates");
    let s = model::stack(&v);
    let sol =
        riccati::solve_cre(&v, &s, Coupling::Consistent).expect("reference instance is solvable");
    let g = synthesis::gains(&sol).expect("gains exist");
    (v, s, g)
}
