//! Shared setup for the criterion benches.

use qsdlab_core::model::{builtin_competition_model, Model};

pub fn competition() -> Model {
    builtin_competition_model(2.0, 1.0, 1.0, 2).expect("valid parameters")
}
