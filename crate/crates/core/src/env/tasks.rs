use std::fmt;

use thiserror::Error;

use super::{dist, Observation};

/// Radius around a placement zone that counts as placed.
pub const PLACE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task '{0}'")]
    Unknown(String),
}

/// Success predicates for the evaluation tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskPredicate {
    OpenDrawer,
    CloseDrawer,
    SliderLeft,
    SliderRight,
    LightOn,
    LightOff,
    LiftBlock,
    PlaceBlock { zone: (f64, f64) },
}

impl TaskPredicate {
    pub const SIMPLE: [TaskPredicate; 7] = [
        TaskPredicate::OpenDrawer,
        TaskPredicate::CloseDrawer,
        TaskPredicate::SliderLeft,
        TaskPredicate::SliderRight,
        TaskPredicate::LightOn,
        TaskPredicate::LightOff,
        TaskPredicate::LiftBlock,
    ];

    pub fn name(&self) -> String {
        match self {
            TaskPredicate::OpenDrawer => "open-drawer".into(),
            TaskPredicate::CloseDrawer => "close-drawer".into(),
            TaskPredicate::SliderLeft => "slider-left".into(),
            TaskPredicate::SliderRight => "slider-right".into(),
            TaskPredicate::LightOn => "light-on".into(),
            TaskPredicate::LightOff => "light-off".into(),
            TaskPredicate::LiftBlock => "lift-block".into(),
            TaskPredicate::PlaceBlock { zone } => format!("place-block@{:.3},{:.3}", zone.0, zone.1),
        }
    }

    /// Parse a task name; placement takes its zone as `place-block@x,y`.
    pub fn from_name(name: &str) -> Result<Self, TaskError> {
        let unknown = || TaskError::Unknown(name.to_string());
        Ok(match name {
            "open-drawer" => TaskPredicate::OpenDrawer,
            "close-drawer" => TaskPredicate::CloseDrawer,
            "slider-left" => TaskPredicate::SliderLeft,
            "slider-right" => TaskPredicate::SliderRight,
            "light-on" => TaskPredicate::LightOn,
            "light-off" => TaskPredicate::LightOff,
            "lift-block" => TaskPredicate::LiftBlock,
            other => {
                let zone = other.strip_prefix("place-block@").ok_or_else(unknown)?;
                let (x, y) = zone.split_once(',').ok_or_else(unknown)?;
                let x: f64 = x.trim().parse().map_err(|_| unknown())?;
                let y: f64 = y.trim().parse().map_err(|_| unknown())?;
                TaskPredicate::PlaceBlock { zone: (x, y) }
            }
        })
    }

    /// All predicates depend on the current observation only; `init` is kept
    /// in the signature for relative tasks.
    pub fn evaluate(&self, _init: &Observation, cur: &Observation) -> bool {
        match self {
            TaskPredicate::OpenDrawer => cur.drawer() > 0.8,
            TaskPredicate::CloseDrawer => cur.drawer() < 0.2,
            TaskPredicate::SliderLeft => cur.slider() < 0.2,
            TaskPredicate::SliderRight => cur.slider() > 0.8,
            TaskPredicate::LightOn => cur.light(),
            TaskPredicate::LightOff => !cur.light(),
            TaskPredicate::LiftBlock => cur.held(),
            TaskPredicate::PlaceBlock { zone } => !cur.held() && dist(cur.block(), *zone) < PLACE_TOLERANCE,
        }
    }
}

impl fmt::Display for TaskPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}
