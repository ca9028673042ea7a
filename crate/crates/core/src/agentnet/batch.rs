use std::sync::Arc;

use super::BatchVars;
use crate::arena::{ObservationTriple, INV_DIM, OWN_DIM, VAR_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Segment, Tensor};

/// A stack of observations flattened for batched evaluation. Entity rows of
/// all observations are stored back to back; each observation owns one
/// [`Segment`] of them.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    own: Tensor,
    variant: Tensor,
    invariant: Tensor,
    segments: Arc<[Segment]>,
    slots: Arc<[Option<usize>]>,
    n_slots: usize,
}

impl ObsBatch {
    /// Every observation must expose exactly `n_slots` target slots.
    pub fn new(obs: &[&ObservationTriple], n_slots: usize) -> Result<Self> {
        let rows = obs.len();
        let total: usize = obs.iter().map(|o| o.variant.len()).sum();
        let mut own = Vec::with_capacity(rows * OWN_DIM);
        let mut variant = Vec::with_capacity(total * VAR_DIM);
        let mut invariant = Vec::with_capacity(rows * INV_DIM);
        let mut segments = Vec::with_capacity(rows);
        let mut slots = Vec::with_capacity(rows * n_slots);
        for o in obs {
            if o.target_slots.len() != n_slots {
                return Err(Error::dim("agent_q", &[o.target_slots.len()], &[n_slots]));
            }
            let start = variant.len() / VAR_DIM;
            own.extend_from_slice(&o.own);
            invariant.extend_from_slice(&o.invariant);
            for row in &o.variant {
                variant.extend_from_slice(row);
            }
            segments.push(Segment {
                start,
                len: o.variant.len(),
            });
            for s in &o.target_slots {
                if let Some(r) = s {
                    if *r >= o.variant.len() {
                        return Err(Error::Contract(format!(
                            "target slot refers to entity row {r} of {}",
                            o.variant.len()
                        )));
                    }
                }
                slots.push(s.map(|r| start + r));
            }
        }
        Ok(ObsBatch {
            own: Tensor::matrix(rows, OWN_DIM, own)?,
            variant: Tensor::matrix(total, VAR_DIM, variant)?,
            invariant: Tensor::matrix(rows, INV_DIM, invariant)?,
            segments: segments.into(),
            slots: slots.into(),
            n_slots,
        })
    }

    pub fn rows(&self) -> usize {
        self.own.rows()
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn n_actions(&self) -> usize {
        crate::arena::N_BASIC_ACTIONS + self.n_slots
    }

    pub fn segments(&self) -> Arc<[Segment]> {
        self.segments.clone()
    }

    pub fn slots(&self) -> Arc<[Option<usize>]> {
        self.slots.clone()
    }

    pub fn invariant(&self) -> &Tensor {
        &self.invariant
    }

    /// Records the batch inputs as constants on `g`.
    pub fn record(&self, g: &mut Graph) -> BatchVars {
        BatchVars {
            own: g.constant(self.own.clone()),
            variant: g.constant(self.variant.clone()),
            invariant: g.constant(self.invariant.clone()),
        }
    }
}
