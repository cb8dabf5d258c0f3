//! Shared learnable codebook, its momentum ensemble and the two codebook
//! penalties.
//!
//! The codebook `M` (N codes of length L) is a trainable parameter in the
//! model's [`ParamStore`]. The ensemble copy lives outside any tape: it is
//! refreshed once per finished task as `ema ← α·ema + (1−α)·M` and anchors
//! the regularizer `(1/N)·‖ema − M‖²_F` while the next task trains.

use std::path::Path;

use pcl_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::init;
use crate::io;

/// Codebook size the prompt pool is tuned for at full scale.
pub const FULL_CODES: usize = 256;
/// Ensemble smoothing coefficient.
pub const DEFAULT_ALPHA: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct Codebook {
    id: ParamId,
    ema: Tensor,
    alpha: f64,
    ema_updates: usize,
}

impl Codebook {
    /// Adds a fresh `codes×length` codebook to `store`. Entries are i.i.d.
    /// uniform in `[-1/√L, 1/√L]`; the ensemble starts equal to `M`.
    pub fn init(store: &mut ParamStore, codes: usize, length: usize, alpha: f64, seed: u64) -> Result<Self> {
        if codes == 0 || length == 0 {
            return Err(Error::Config(format!(
                "codebook needs positive sizes, got {codes}x{length}"
            )));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1)")));
        }
        let mut rng = init::rng(seed);
        let m = init::uniform(&mut rng, codes, length, 1.0 / (length as f64).sqrt());
        let ema = m.clone();
        let id = store.add("codebook", m, true);
        Ok(Self {
            id,
            ema,
            alpha,
            ema_updates: 0,
        })
    }

    pub fn from_parts(id: ParamId, ema: Tensor, alpha: f64, ema_updates: usize) -> Self {
        Self {
            id,
            ema,
            alpha,
            ema_updates,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn codes<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.value(self.id)
    }

    pub fn ema(&self) -> &Tensor {
        &self.ema
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn ema_updates(&self) -> usize {
        self.ema_updates
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ema.shape()
    }

    /// Folds the current codes into the ensemble. Call once per finished task.
    pub fn ema_update(&mut self, store: &ParamStore) {
        let m = store.value(self.id);
        let a = self.alpha;
        for (e, v) in self.ema.data_mut().iter_mut().zip(m.data()) {
            *e = a * *e + (1.0 - a) * v;
        }
        self.ema_updates += 1;
    }

    /// `(1/N)·‖ema − M‖²_F`; gradient reaches `M` only.
    pub fn reg_loss<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        let m = tape.param(store, self.id);
        reg_loss(tape, m, &self.ema)
    }

    /// `‖M Mᵀ − I‖_F`.
    pub fn orth_loss<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        orth_loss(tape, tape.param(store, self.id))
    }

    /// Writes the codes and ensemble as raw little-endian `f64` plus a JSON
    /// sidecar. Round-trips bit-exactly.
    pub fn save(&self, store: &ParamStore, dir: &Path, task_index: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (codes, length) = self.shape();
        io::write_tensors(
            &dir.join("codebook.bin"),
            &[("codes", store.value(self.id)), ("ema", &self.ema)],
        )?;
        let meta = CodebookMeta {
            n: codes,
            l: length,
            alpha: self.alpha,
            task_index,
            ema_updates: self.ema_updates,
        };
        io::write_json(&dir.join("codebook.json"), &meta)
    }

    /// Restores a saved codebook into `store`, replacing the codes of `self`.
    pub fn load_into(&mut self, store: &mut ParamStore, dir: &Path) -> Result<CodebookMeta> {
        let meta: CodebookMeta = io::read_json(&dir.join("codebook.json"))?;
        let tensors = io::read_tensors(&dir.join("codebook.bin"))?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Data(format!("codebook file lacks {name}")))
        };
        let codes = find("codes")?;
        let ema = find("ema")?;
        if codes.shape() != (meta.n, meta.l) || ema.shape() != codes.shape() {
            return Err(Error::Dimension(format!(
                "codebook sidecar says {}x{}, data is {:?}",
                meta.n,
                meta.l,
                codes.shape()
            )));
        }
        store.get_mut(self.id).set_value(codes);
        self.ema = ema;
        self.alpha = meta.alpha;
        self.ema_updates = meta.ema_updates;
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub alpha: f64,
    pub task_index: usize,
    pub ema_updates: usize,
}

/// `(1/N)·‖target − m‖²_F` with `target` held constant.
pub fn reg_loss<'t>(tape: &'t Tape, m: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let (rows, _) = m.shape();
    if m.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "ensemble {:?} vs codes {:?}",
            target.shape(),
            m.shape()
        )));
    }
    let target = tape.constant(target.clone());
    Ok(target.sub(m)?.frob_sq()?.scale(1.0 / rows as f64)?)
}

/// Frobenius norm of `m mᵀ − I`.
///
/// At an exactly orthonormal `m` the norm has no derivative; the square root
/// is taken of `max(‖·‖², 1e-300)` so the value stays finite there.
pub fn orth_loss<'t>(tape: &'t Tape, m: Var<'t>) -> Result<Var<'t>> {
    let (rows, _) = m.shape();
    let gram = m.matmul(m.t()?)?;
    let eye = tape.constant(Tensor::eye(rows));
    let sq = gram.sub(eye)?.frob_sq()?;
    if sq.item() <= 1e-300 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    Ok(sq.sqrt()?)
}
