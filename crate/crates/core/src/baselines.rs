//! Comparison arms: hard top-K code selection and the simple prompt
//! weighting network ("Plus_W").

use pcl_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::init::{self, Rng64};

/// Weight of the query-key matching term in the hard-selection objective.
pub const MATCH_WEIGHT: f64 = 0.5;
const RANGE_EPS: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of `query` (`1×L`) with every row of `codes`.
/// Zero-norm vectors have similarity 0.
pub fn cosine_scores(query: &Tensor, codes: &Tensor) -> Result<Vec<f64>> {
    if query.rows() != 1 || query.cols() != codes.cols() {
        return Err(Error::Dimension(format!(
            "query {:?} vs codes {:?}",
            query.shape(),
            codes.shape()
        )));
    }
    let q = query.row(0);
    let qn = norm(q);
    Ok((0..codes.rows())
        .map(|r| {
            let c = codes.row(r);
            let denom = qn * norm(c);
            if denom == 0.0 {
                0.0
            } else {
                q.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / denom
            }
        })
        .collect())
}

/// Indices of the `k` largest scores, best first. Ties keep the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Picks the `k` codes most cosine-similar to `query`. Returns the indices
/// (most similar first), `2k×L` prompts holding the selected codes as key
/// halves and again as value halves, and the matching loss.
pub fn hard_select<'t>(
    tape: &'t Tape,
    query: &Tensor,
    codes: Var<'t>,
    k: usize,
) -> Result<(Vec<usize>, Var<'t>, Var<'t>)> {
    let (n, _) = codes.shape();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot select {k} of {n} codes")));
    }
    let scores = cosine_scores(query, &codes.value())?;
    let indices = top_k(&scores, k);
    let doubled: Vec<usize> = indices.iter().chain(&indices).copied().collect();
    let prompts = codes.gather_rows(&doubled)?;
    let matching = matching_loss(tape, query, codes.gather_rows(&indices)?)?;
    Ok((indices, prompts, matching))
}

/// `mean_i(1 − cos(query, selected_i))`, differentiable in `selected`.
pub fn matching_loss<'t>(tape: &'t Tape, query: &Tensor, selected: Var<'t>) -> Result<Var<'t>> {
    let qn = norm(query.data());
    if qn == 0.0 {
        return Ok(tape.constant(Tensor::scalar(1.0)));
    }
    let q = tape.constant(query.transpose());
    let dots = selected.matmul(q)?;
    let norms = selected.mul(selected)?.sum_rows()?.sqrt()?.scale(qn)?;
    let cos = dots.div(norms)?;
    Ok(cos.mean()?.scale(-1.0)?.offset(1.0)?)
}

/// Weighting network: L2-normalized query and key are concatenated, passed
/// through a width-3 same-padded 1-D convolution and a linear readout.
#[derive(Debug, Clone)]
pub struct PlusWParams {
    pub kernel: ParamId,
    pub conv_bias: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    length: usize,
}

impl PlusWParams {
    pub fn init(store: &mut ParamStore, length: usize, rng: &mut Rng64) -> Self {
        Self {
            kernel: store.add("plusw.kernel", init::linear(rng, 1, 3), true),
            conv_bias: store.add("plusw.conv_bias", Tensor::zeros(1, 1), true),
            fc_w: store.add("plusw.fc_w", init::linear(rng, 2 * length, 1), true),
            fc_b: store.add("plusw.fc_b", Tensor::zeros(1, 1), true),
            length,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.kernel, self.conv_bias, self.fc_w, self.fc_b]
    }

    /// Raw weight per key (`1×K`). Query and keys enter as constants, so
    /// only the network's own parameters see gradient.
    pub fn raw_weights<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: &Tensor,
        keys: &Tensor,
    ) -> Result<Var<'t>> {
        let l = self.length;
        if query.shape() != (1, l) || keys.cols() != l {
            return Err(Error::Dimension(format!(
                "query {:?}, keys {:?}, expected length {l}",
                query.shape(),
                keys.shape()
            )));
        }
        let unit = |v: &[f64]| -> Vec<f64> {
            let n = norm(v);
            if n == 0.0 {
                v.to_vec()
            } else {
                v.iter().map(|x| x / n).collect()
            }
        };
        let q = unit(query.row(0));
        let rows = keys.rows();
        let mut feats = Vec::with_capacity(rows * 2 * l);
        for r in 0..rows {
            feats.extend_from_slice(&q);
            feats.extend(unit(keys.row(r)));
        }
        let x = tape.constant(Tensor::new(rows, 2 * l, feats)?);
        let conv = self.conv_matrix(tape, store)?;
        let bias = tape.param(store, self.conv_bias).expand(1, 2 * l)?;
        let h = x.matmul(conv)?.add_row(bias)?;
        let fc_b = tape.param(store, self.fc_b).expand(rows, 1)?;
        let w = h.matmul(tape.param(store, self.fc_w))?.add(fc_b)?;
        Ok(w.t()?)
    }

    /// Banded `2L×2L` matrix `C` with `x·C` equal to the same-padded
    /// convolution of each row of `x` with the kernel.
    fn conv_matrix<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        let w = 2 * self.length;
        let kernel = tape.param(store, self.kernel);
        let mut total: Option<Var<'t>> = None;
        for tap in 0..3 {
            // Output j reads input j + tap − 1.
            let band = Tensor::from_fn(w, w, |i, j| {
                if i as isize == j as isize + tap as isize - 1 {
                    1.0
                } else {
                    0.0
                }
            });
            let term = kernel
                .slice_cols(tap, tap + 1)?
                .expand(w, w)?
                .mul(tape.constant(band))?;
            total = Some(match total {
                None => term,
                Some(t) => t.add(term)?,
            });
        }
        Ok(total.expect("three taps"))
    }
}

/// Min-max normalization over a `1×K` weight row. All-equal weights map to
/// ones with no gradient.
pub fn minmax<'t>(tape: &'t Tape, w: Var<'t>) -> Result<Var<'t>> {
    let (rows, cols) = w.shape();
    let lo = w.min()?;
    let range = w.max()?.sub(lo)?;
    if range.item() < RANGE_EPS {
        return Ok(tape.constant(Tensor::ones(rows, cols)));
    }
    Ok(w.sub(lo.expand(rows, cols)?)?.div(range.expand(rows, cols)?)?)
}

#[derive(Debug, Clone)]
pub struct Weighted<'t> {
    pub indices: Vec<usize>,
    /// Normalized weights of every key (`1×K_total`).
    pub weights: Var<'t>,
    /// Selected prompt rows, each scaled by its weight.
    pub prompts: Var<'t>,
}

/// Scores every key against `query`, normalizes the scores over keys and
/// returns the `k` highest-weighted prompts scaled by their weights.
pub fn plusw_weight<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &PlusWParams,
    query: &Tensor,
    keys: &Tensor,
    prompts: Var<'t>,
    k: usize,
) -> Result<Weighted<'t>> {
    if keys.rows() != prompts.shape().0 {
        return Err(Error::Dimension(format!(
            "{} keys vs {} prompts",
            keys.rows(),
            prompts.shape().0
        )));
    }
    if k == 0 || k > keys.rows() {
        return Err(Error::Config(format!("cannot select {k} of {} prompts", keys.rows())));
    }
    let raw = params.raw_weights(tape, store, query, keys)?;
    let weights = minmax(tape, raw)?;
    let indices = top_k(weights.value().data(), k);
    let picked_w = weights.t()?.gather_rows(&indices)?;
    let picked = prompts.gather_rows(&indices)?.mul_col(picked_w)?;
    Ok(Weighted {
        indices,
        weights,
        prompts: picked,
    })
}

/// Plus_W weighting of generated prompts in place of modulation: every row
/// is kept and scaled by its normalized weight. The weight network sees the
/// prompts detached.
pub fn spw_modulate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &PlusWParams,
    query: &Tensor,
    prompts: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let keys = prompts.value();
    let raw = params.raw_weights(tape, store, query, &keys)?;
    let weights = minmax(tape, raw)?;
    let out = prompts.mul_col(weights.t()?)?;
    Ok((weights, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcl_tensor::{backward, grad_check};

    #[test]
    fn exact_match_is_selected() {
        let codes = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let q = Tensor::row_vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(top_k(&cosine_scores(&q, &codes).unwrap(), 1), vec![1]);
    }

    #[test]
    fn random_selection_matches_brute_force() {
        let mut rng = init::rng(11);
        let codes = init::normal(&mut rng, 8, 16, 1.0);
        let q = init::normal(&mut rng, 1, 16, 1.0);
        let tape = Tape::new();
        let (idx, _, _) = hard_select(&tape, &q, tape.constant(codes.clone()), 3).unwrap();
        let mut brute: Vec<(f64, usize)> = (0..8)
            .map(|r| {
                let c = codes.row(r);
                let dot: f64 = c.iter().zip(q.data()).map(|(a, b)| a * b).sum();
                (dot / (norm(c) * norm(q.data())), r)
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(idx, brute.iter().take(3).map(|p| p.1).collect::<Vec<_>>());
        let scaled = q.scale(2.0);
        let (idx2, _, _) = hard_select(&tape, &scaled, tape.constant(codes), 3).unwrap();
        assert_eq!(idx, idx2);
    }

    #[test]
    fn too_many_selected_is_error() {
        let tape = Tape::new();
        let codes = tape.constant(Tensor::ones(2, 3));
        assert!(hard_select(&tape, &Tensor::ones(1, 3), codes, 3).is_err());
    }

    #[test]
    fn selection_equals_one_hot_generation() {
        let mut rng = init::rng(12);
        let codes = init::normal(&mut rng, 6, 5, 1.0);
        let q = init::normal(&mut rng, 1, 5, 1.0);
        let tape = Tape::new();
        let m = tape.constant(codes.clone());
        let (idx, prompts, _) = hard_select(&tape, &q, m, 2).unwrap();
        let mut a = Tensor::zeros(4, 6);
        for (r, &i) in idx.iter().chain(&idx).enumerate() {
            a.set(r, i, 1.0);
        }
        let via_a = crate::pgm::generate_prompts(tape.constant(a), m).unwrap();
        assert!(prompts.value().max_abs_diff(&via_a.value()) <= 1e-12);
    }

    #[test]
    fn matching_loss_value_and_gradient() {
        let tape = Tape::new();
        let q = Tensor::row_vector(vec![1.0, 0.0]);
        let sel = tape.constant(Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]));
        let loss = matching_loss(&tape, &q, sel).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-15);
        let mut rng = init::rng(13);
        let q = init::normal(&mut rng, 1, 4, 1.0);
        let x = init::normal(&mut rng, 3, 4, 1.0);
        let err = grad_check(|t, v| matching_loss(t, &q, v), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rank_oracle() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::row_vector(vec![0.2, 0.9, 0.5]));
        let idx = top_k(w.value().data(), 2);
        assert_eq!(idx, vec![1, 2]);
        let prompts = tape.constant(Tensor::ones(3, 2));
        let picked = prompts.gather_rows(&idx).unwrap().mul_col(w.t().unwrap().gather_rows(&idx).unwrap()).unwrap();
        assert_eq!(picked.value().data(), &[0.9, 0.9, 0.5, 0.5]);
    }

    #[test]
    fn ties_keep_first_indices() {
        assert_eq!(top_k(&[0.3, 0.3, 0.3, 0.3], 2), vec![0, 1]);
        let tape = Tape::new();
        let w = minmax(&tape, tape.constant(Tensor::full(1, 4, 0.3))).unwrap();
        assert_eq!(w.value().data(), &[1.0; 4]);
    }

    #[test]
    fn top_k_is_invariant_under_monotone_maps() {
        let mut rng = init::rng(14);
        let raw = init::normal(&mut rng, 1, 9, 1.0);
        let base = top_k(raw.data(), 4);
        let mapped: Vec<f64> = raw.data().iter().map(|x| (3.0 * x).exp() + 1.0).collect();
        assert_eq!(base, top_k(&mapped, 4));
    }

    fn plusw_fixture() -> (ParamStore, PlusWParams, Tensor, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = init::rng(15);
        let p = PlusWParams::init(&mut store, 4, &mut rng);
        let q = init::normal(&mut rng, 1, 4, 1.0);
        let keys = init::normal(&mut rng, 5, 4, 1.0);
        (store, p, q, keys)
    }

    #[test]
    fn conv_matrix_matches_direct_convolution() {
        let (store, p, _, _) = plusw_fixture();
        let tape = Tape::new();
        let c = p.conv_matrix(&tape, &store).unwrap().value();
        let k = store.value(p.kernel).data().to_vec();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = Tensor::row_vector(x.clone()).matmul(&c).unwrap();
        for j in 0..8 {
            let at = |i: isize| if (0..8).contains(&i) { x[i as usize] } else { 0.0 };
            let want = k[0] * at(j as isize - 1) + k[1] * at(j as isize) + k[2] * at(j as isize + 1);
            assert!((y.get(0, j) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_net_gradient_skips_prompts() {
        let (store, p, q, keys) = plusw_fixture();
        let tape = Tape::new();
        let prompts = tape.variable(keys.clone());
        let (weights, out) = spw_modulate(&tape, &store, &p, &q, prompts).unwrap();
        assert_eq!(weights.shape(), (1, 5));
        let grads = backward(out.sum().unwrap()).unwrap();
        let g = grads.wrt(&prompts).unwrap();
        // d(sum)/d(prompt row i) is exactly weight i: no path through the net.
        for r in 0..5 {
            for c in 0..4 {
                assert_eq!(g.get(r, c), weights.value().get(0, r));
            }
        }
        assert!(grads.param(p.fc_w).is_some());
    }

    #[test]
    fn uniform_raw_weights_keep_prompts() {
        let (mut store, p, q, keys) = plusw_fixture();
        store.get_mut(p.fc_w).value_mut().data_mut().fill(0.0);
        let tape = Tape::new();
        let (_, out) = spw_modulate(&tape, &store, &p, &q, tape.constant(keys.clone())).unwrap();
        assert_eq!(out.value().data(), keys.data());
    }

    #[test]
    fn plusw_topk_shapes() {
        let (store, p, q, keys) = plusw_fixture();
        let tape = Tape::new();
        let prompts = tape.constant(keys.scale(2.0));
        let w = plusw_weight(&tape, &store, &p, &q, &keys, prompts, 2).unwrap();
        assert_eq!(w.prompts.shape(), (2, 4));
        let wv = w.weights.value();
        assert!(wv.get(0, w.indices[0]) >= wv.get(0, w.indices[1]));
        assert_eq!(wv.get(0, w.indices[0]), 1.0);
        assert!(plusw_weight(&tape, &store, &p, &q, &keys, prompts, 6).is_err());
    }

    #[test]
    fn plusw_parameter_gradients() {
        let (store, p, q, keys) = plusw_fixture();
        let err = grad_check(
            |t, v| {
                // The net rebuilt with `v` standing in for the readout weight.
                let raw = {
                    let x = t.constant(
                        Tensor::new(
                            5,
                            8,
                            (0..5)
                                .flat_map(|r| {
                                    let qn = norm(q.data());
                                    let kn = norm(keys.row(r));
                                    q.data()
                                        .iter()
                                        .map(move |a| a / qn)
                                        .chain(keys.row(r).iter().map(move |b| b / kn))
                                        .collect::<Vec<_>>()
                                })
                                .collect(),
                        )
                        .unwrap(),
                    );
                    let conv = p.conv_matrix(t, &store)?;
                    let bias = t.param(&store, p.conv_bias).expand(1, 8)?;
                    x.matmul(conv)?.add_row(bias)?.matmul(v)?.t()?
                };
                let w = minmax(t, raw)?;
                let target = t.constant(Tensor::row_vector(vec![0.3, -1.0, 0.8, 0.1, 2.0]));
                Ok::<_, Error>(w.mul(target)?.sum()?)
            },
            store.value(p.fc_w),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
