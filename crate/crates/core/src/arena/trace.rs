use std::io::Write;

use serde::Serialize;

use super::env::{Side, StepOutcome, Unit};
use crate::error::Result;

/// Line-delimited JSON replay: one object for the reset, then one per step.
pub struct TraceWriter {
    out: Box<dyn Write + Send>,
}

#[derive(Serialize)]
struct UnitLine {
    side: &'static str,
    x: i32,
    y: i32,
    health: f64,
    shield: f64,
    alive: bool,
}

#[derive(Serialize)]
struct Line<'a> {
    step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    actions: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reward: Option<f64>,
    terminated: bool,
    won: bool,
    units: Vec<UnitLine>,
}

fn unit_lines(units: &[Unit]) -> Vec<UnitLine> {
    units
        .iter()
        .map(|u| UnitLine {
            side: match u.side {
                Side::Ally => "ally",
                Side::Enemy => "enemy",
            },
            x: u.x,
            y: u.y,
            health: u.health,
            shield: u.shield,
            alive: u.alive,
        })
        .collect()
}

impl TraceWriter {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        TraceWriter { out }
    }

    fn emit(&mut self, line: &Line) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub(crate) fn write_reset(&mut self, seed: u64, units: &[Unit]) -> Result<()> {
        self.emit(&Line {
            step: 0,
            seed: Some(seed),
            actions: None,
            reward: None,
            terminated: false,
            won: false,
            units: unit_lines(units),
        })
    }

    pub(crate) fn write_step(
        &mut self,
        step: usize,
        actions: &[usize],
        outcome: &StepOutcome,
        units: &[Unit],
    ) -> Result<()> {
        self.emit(&Line {
            step,
            seed: None,
            actions: Some(actions),
            reward: Some(outcome.reward),
            terminated: outcome.terminated,
            won: outcome.won,
            units: unit_lines(units),
        })?;
        if outcome.terminated {
            self.out.flush()?;
        }
        Ok(())
    }
}
