//! Prompt generation: attention between an instance encoding and the
//! codebook predicts a coefficient matrix, and prompts are the matching
//! linear combinations of codes.
//!
//! The token sequence `[F; M]` (1 + N rows) passes through `depth`
//! single-head pre-norm self-attention layers with residuals. The output row
//! at the encoding slot feeds one FC layer producing `2n·N` values, which
//! are reshaped to `2n×N` and normalized with a row softmax. Each prompt row
//! is therefore a convex combination of codes: the first `n` rows become key
//! prefixes and the last `n` value prefixes.

use pcl_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::init::{self, Rng64};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// Trainable weights of one generation module (one per prompted block).
#[derive(Debug, Clone)]
pub struct PgmParams {
    pub layers: Vec<AttentionLayer>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    prompt_rows: usize,
    codes: usize,
    length: usize,
}

impl PgmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        length: usize,
        codes: usize,
        prompt_pairs: usize,
        depth: usize,
        rng: &mut Rng64,
    ) -> Self {
        let layers = (0..depth)
            .map(|d| {
                let mut w = |name: &str| {
                    store.add(
                        format!("{prefix}.attn{d}.{name}"),
                        init::linear(rng, length, length),
                        true,
                    )
                };
                AttentionLayer {
                    wq: w("wq"),
                    wk: w("wk"),
                    wv: w("wv"),
                    wo: w("wo"),
                }
            })
            .collect();
        let prompt_rows = 2 * prompt_pairs;
        let out = prompt_rows * codes;
        let head_w = store.add(format!("{prefix}.head.w"), init::normal(rng, length, out, 0.02), true);
        let head_b = store.add(format!("{prefix}.head.b"), Tensor::zeros(1, out), true);
        Self {
            layers,
            head_w,
            head_b,
            prompt_rows,
            codes,
            length,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .layers
            .iter()
            .flat_map(|l| [l.wq, l.wk, l.wv, l.wo])
            .collect();
        ids.extend([self.head_w, self.head_b]);
        ids
    }

    /// `2n`, the number of generated prompt rows.
    pub fn prompt_rows(&self) -> usize {
        self.prompt_rows
    }

    /// Coefficient matrix `A` (`2n×N`) for one instance encoding.
    pub fn coefficients<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        codes: Var<'t>,
    ) -> Result<Var<'t>> {
        let (qr, ql) = query.shape();
        let (n_codes, cl) = codes.shape();
        if qr != 1 || ql != cl || cl != self.length {
            return Err(Error::Dimension(format!(
                "encoding {:?} vs codebook {:?} (expected length {})",
                (qr, ql),
                (n_codes, cl),
                self.length
            )));
        }
        if n_codes != self.codes {
            return Err(Error::Dimension(format!(
                "module built for {} codes, codebook has {n_codes}",
                self.codes
            )));
        }
        let mut x = tape.concat_rows(&[query, codes])?;
        for layer in &self.layers {
            x = attention_layer(tape, store, x, layer)?;
        }
        let readout = x.slice_rows(0, 1)?;
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let logits = readout.matmul(w)?.add_row(b)?;
        Ok(logits.reshape(self.prompt_rows, self.codes)?.softmax_rows()?)
    }
}

/// Pre-norm single-head self-attention with a residual connection.
pub fn attention_layer<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: Var<'t>,
    layer: &AttentionLayer,
) -> Result<Var<'t>> {
    let (_, width) = x.shape();
    let h = x.layer_norm_rows(LN_EPS)?;
    let q = h.matmul(tape.param(store, layer.wq))?;
    let k = h.matmul(tape.param(store, layer.wk))?;
    let v = h.matmul(tape.param(store, layer.wv))?;
    let scores = q.matmul(k.t()?)?.scale(1.0 / (width as f64).sqrt())?;
    let mixed = scores.softmax_rows()?.matmul(v)?;
    Ok(x.add(mixed.matmul(tape.param(store, layer.wo))?)?)
}

/// `P = A × M`.
pub fn generate_prompts<'t>(coefficients: Var<'t>, codes: Var<'t>) -> Result<Var<'t>> {
    let (_, a_cols) = coefficients.shape();
    let (m_rows, _) = codes.shape();
    if a_cols != m_rows {
        return Err(Error::Dimension(format!(
            "coefficients {:?} vs codebook {:?}",
            coefficients.shape(),
            codes.shape()
        )));
    }
    Ok(coefficients.matmul(codes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;

    struct Fixture {
        store: ParamStore,
        cb: Codebook,
        pgm: PgmParams,
    }

    fn fixture(length: usize, codes: usize, pairs: usize, seed: u64) -> Fixture {
        let mut store = ParamStore::new();
        let cb = Codebook::init(&mut store, codes, length, 0.99, seed).unwrap();
        let mut rng = init::rng(seed + 1);
        let pgm = PgmParams::init(&mut store, "pgm", length, codes, pairs, 2, &mut rng);
        Fixture { store, cb, pgm }
    }

    fn coefficients(fx: &Fixture, query: &Tensor) -> Tensor {
        let tape = Tape::new();
        let q = tape.constant(query.clone());
        let m = tape.param(&fx.store, fx.cb.id());
        (*fx.pgm.coefficients(&tape, &fx.store, q, m).unwrap().value()).clone()
    }

    #[test]
    fn zero_head_gives_uniform_coefficients() {
        let mut fx = fixture(8, 6, 2, 1);
        fx.store.get_mut(fx.pgm.head_w).value_mut().data_mut().fill(0.0);
        let a = coefficients(&fx, &Tensor::row_vector(vec![0.3; 8]));
        assert_eq!(a.shape(), (4, 6));
        assert!(a.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn rows_sum_to_one_and_are_deterministic() {
        let fx = fixture(8, 6, 3, 2);
        let mut rng = init::rng(5);
        let q = init::normal(&mut rng, 1, 8, 1.0);
        let a = coefficients(&fx, &q);
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(a.row(r).iter().all(|&v| v >= 0.0));
        }
        let again = coefficients(&fixture(8, 6, 3, 2), &q);
        assert_eq!(a.to_le_bytes(), again.to_le_bytes());
    }

    #[test]
    fn different_inputs_give_different_coefficients() {
        let fx = fixture(8, 6, 2, 3);
        let mut rng = init::rng(6);
        for _ in 0..20 {
            let a = coefficients(&fx, &init::normal(&mut rng, 1, 8, 1.0));
            let b = coefficients(&fx, &init::normal(&mut rng, 1, 8, 1.0));
            assert!(a.max_abs_diff(&b) > 0.0);
        }
    }

    #[test]
    fn length_mismatch_is_reported() {
        let fx = fixture(8, 6, 2, 4);
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(1, 7));
        let m = tape.param(&fx.store, fx.cb.id());
        assert!(matches!(
            fx.pgm.coefficients(&tape, &fx.store, q, m),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn one_hot_rows_select_codes() {
        let fx = fixture(5, 4, 1, 7);
        let tape = Tape::new();
        let m = tape.param(&fx.store, fx.cb.id());
        let a = tape.constant(Tensor::from_rows(&[&[0.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0]]));
        let p = generate_prompts(a, m).unwrap().value();
        let codes = fx.cb.codes(&fx.store);
        assert_eq!(p.row(0), codes.row(2));
        assert_eq!(p.row(1), codes.row(0));
    }

    #[test]
    fn uniform_rows_average_codes() {
        let fx = fixture(5, 4, 1, 8);
        let tape = Tape::new();
        let m = tape.param(&fx.store, fx.cb.id());
        let a = tape.constant(Tensor::full(1, 4, 0.25));
        let p = generate_prompts(a, m).unwrap().value();
        let mean = fx.cb.codes(&fx.store).sum_cols().scale(0.25);
        assert!(p.max_abs_diff(&mean) < 1e-15);
    }

    #[test]
    fn hand_matmul_oracle() {
        let a = Tensor::from_rows(&[&[0.2, 0.3, 0.5], &[0.6, 0.4, 0.0]]);
        let m = Tensor::from_fn(3, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let tape = Tape::new();
        let p = generate_prompts(tape.constant(a.clone()), tape.constant(m.clone()))
            .unwrap()
            .value();
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a.get(i, k) * m.get(k, j)).sum();
                assert!((p.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn prompt_entries_stay_inside_code_columns() {
        let fx = fixture(6, 5, 2, 9);
        let mut rng = init::rng(10);
        let a = coefficients(&fx, &init::normal(&mut rng, 1, 6, 1.0));
        let tape = Tape::new();
        let p = generate_prompts(tape.constant(a), tape.param(&fx.store, fx.cb.id()))
            .unwrap()
            .value();
        let codes = fx.cb.codes(&fx.store);
        for c in 0..6 {
            let col: Vec<f64> = (0..5).map(|r| codes.get(r, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..p.rows() {
                assert!(p.get(r, c) >= lo - 1e-12 && p.get(r, c) <= hi + 1e-12);
            }
        }
    }
}
