//! Finite-difference checks of the full training objective with respect to
//! model parameters.

use pcl_tensor::gradcheck::PRIMITIVE_TOLERANCE;
use pcl_tensor::{backward, primitive_battery, CheckReport, ParamId, Tape, Var};

use crate::backbone::{Mode, ModelConfig, ToyModel};
use crate::datagen::Sample;
use crate::error::Result;
use crate::init;
use crate::trainer::{total_loss, Encoded, TrainConfig};

pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

/// Max relative error between the tape gradient of `loss` and central
/// differences with step `h`, over every entry of the parameters `ids`.
pub fn param_grad_check<F>(model: &ToyModel, ids: &[ParamId], loss: F, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ToyModel) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let grads = backward(loss(&tape, model)?)?;
    let eval = |m: &ToyModel| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss(&tape, m)?.item())
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let len = model.store.value(id).len();
        let analytic = grads.param(id).cloned();
        for i in 0..len {
            let mut plus = model.clone();
            plus.store.get_mut(id).value_mut().data_mut()[i] += h;
            let mut minus = model.clone();
            minus.store.get_mut(id).value_mut().data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Two-block model (`L = 8`, `n = 2`, `N = 6`) used by the composite check.
pub fn tiny_model(seed: u64) -> Result<ToyModel> {
    let cfg = ModelConfig {
        patches: 3,
        patch_dim: 4,
        embed: 8,
        blocks: 2,
        heads: 2,
        mlp_hidden: 8,
        classes: 4,
        g_len: 2,
        agnostic_blocks: 1,
        prompt_pairs: 2,
        codes: 6,
        pgm_depth: 2,
        backbone_seed: seed,
        seed,
        ..ModelConfig::default()
    };
    let mut model = ToyModel::with_backbone(cfg, &[])?;
    // Move the codes away from the ensemble so the regularizer is active.
    let mut rng = init::rng(seed ^ 0x5eed);
    let noise = init::normal(&mut rng, 6, 8, 0.1);
    let id = model.codebook.id();
    let moved = model.store.value(id).add(&noise)?;
    model.store.get_mut(id).set_value(moved);
    Ok(model)
}

/// Checks the gradient of the full objective (cross-entropy plus both
/// codebook penalties, batch of 2) for `mode` on [`tiny_model`] with
/// respect to every parameter the mode trains.
pub fn composite_check(mode: Mode, seed: u64) -> Result<CheckReport> {
    let mut model = tiny_model(seed)?;
    model.set_mode(mode);
    let mut rng = init::rng(seed.wrapping_add(17));
    let samples: Vec<Sample> = (0..2)
        .map(|i| Sample {
            x: init::normal(&mut rng, 3, 4, 1.0),
            y: i * 3,
        })
        .collect();
    let queries = samples
        .iter()
        .map(|s| model.encode_query(&s.x))
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        mode,
        ..TrainConfig::default()
    };
    // The weighting network reads generated prompts detached, so for that
    // arm the objective is only differentiated exactly in the network and
    // the head.
    let ids = if mode == Mode::PgmSpw {
        let mut ids = model.plusw.ids();
        ids.extend([model.head_w, model.head_b]);
        ids
    } else {
        model.trainable_ids()
    };
    let err = param_grad_check(
        &model,
        &ids,
        |tape, m| {
            let batch: Vec<Encoded> = samples
                .iter()
                .zip(&queries)
                .map(|(s, q)| Encoded {
                    sample: s,
                    query: q.clone(),
                })
                .collect();
            Ok(total_loss(tape, m, &batch, &cfg, 0..4)?.0)
        },
        1e-5,
    )?;
    Ok(CheckReport {
        name: format!("total_loss[{mode}]"),
        max_rel_error: err,
        tolerance: COMPOSITE_TOLERANCE,
    })
}

/// Every primitive check followed by the composite objective checks.
pub fn full_battery(seed: u64) -> Vec<CheckReport> {
    let mut reports = primitive_battery(seed);
    debug_assert!(reports.iter().all(|r| r.tolerance == PRIMITIVE_TOLERANCE));
    for mode in [Mode::Pc, Mode::PgmOnly, Mode::HardSelect] {
        reports.push(composite_check(mode, seed).unwrap_or_else(|e| CheckReport {
            name: format!("total_loss[{mode}] ({e})"),
            max_rel_error: f64::INFINITY,
            tolerance: COMPOSITE_TOLERANCE,
        }));
    }
    reports
}
