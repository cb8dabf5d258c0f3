//! Prompt modulation: correlation-based reweighting of generated prompts.
//!
//! `F′ = F·W_F`, `P′ = P·W_P`, `S = F′·P′ᵀ` gives one correlation per prompt
//! row. Min-max scaling maps `S` onto `[0, 1]` and a sigmoid squashes that
//! into `[0.5, σ(1)]`, so no prompt is scaled below one half. When all
//! correlations tie (range below [`TIE_EPS`]) every weight is exactly 0.5
//! and no gradient flows through the scaling branch.

use pcl_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::init::{self, Rng64};

pub const TIE_EPS: f64 = 1e-12;
/// σ(1), the largest attainable modulation weight.
pub const MAX_WEIGHT: f64 = 0.731_058_578_630_004_9;

/// The pair of projections shared by every prompted block.
#[derive(Debug, Clone)]
pub struct PmmParams {
    pub w_query: ParamId,
    pub w_prompt: ParamId,
}

impl PmmParams {
    pub fn init(store: &mut ParamStore, length: usize, rng: &mut Rng64) -> Self {
        Self {
            w_query: store.add("pmm.w_query", init::linear(rng, length, length), true),
            w_prompt: store.add("pmm.w_prompt", init::linear(rng, length, length), true),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_query, self.w_prompt]
    }

    /// Raw correlations `S` (`1×2n`).
    pub fn correlations<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        prompts: Var<'t>,
    ) -> Result<Var<'t>> {
        if query.shape().1 != prompts.shape().1 || query.shape().0 != 1 {
            return Err(Error::Dimension(format!(
                "encoding {:?} vs prompts {:?}",
                query.shape(),
                prompts.shape()
            )));
        }
        let fq = query.matmul(tape.param(store, self.w_query))?;
        let pp = prompts.matmul(tape.param(store, self.w_prompt))?;
        Ok(fq.matmul(pp.t()?)?)
    }

    /// Modulation weights `Ŝ` (`1×2n`).
    pub fn weights<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        prompts: Var<'t>,
    ) -> Result<Var<'t>> {
        quantize(tape, self.correlations(tape, store, query, prompts)?)
    }
}

/// `σ((S − min S)/(max S − min S))`, with the tie rule.
pub fn quantize<'t>(tape: &'t Tape, s: Var<'t>) -> Result<Var<'t>> {
    let (rows, cols) = s.shape();
    let lo = s.min()?;
    let hi = s.max()?;
    let range = hi.sub(lo)?;
    if range.item() < TIE_EPS {
        return Ok(tape.constant(Tensor::full(rows, cols, 0.5)));
    }
    let shifted = s.sub(lo.expand(rows, cols)?)?;
    Ok(shifted.div(range.expand(rows, cols)?)?.sigmoid()?)
}

/// Row `i` of the output is `weights[i] × prompts[i]`.
pub fn modulate<'t>(weights: Var<'t>, prompts: Var<'t>) -> Result<Var<'t>> {
    let (wr, wc) = weights.shape();
    let (pr, _) = prompts.shape();
    if wr != 1 || wc != pr {
        return Err(Error::Dimension(format!(
            "weights {:?} vs prompts {:?}",
            weights.shape(),
            prompts.shape()
        )));
    }
    Ok(prompts.mul_col(weights.t()?)?)
}
