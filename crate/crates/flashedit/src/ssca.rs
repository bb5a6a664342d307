//! Sparsified spatial cross-attention: select the top-k text tokens by
//! aggregate similarity with the masked queries, compute attention for
//! foreground queries over the pruned set only, and scatter the result into a
//! full matrix with exact zeros on background rows.

use crate::bg_shield::{shielded_cross_attention_rows, AlphaMask, TokenMask};
use crate::error::{Error, Result};
use crate::tensor::{attention, Scalar, Tensor};

/// Outcome of top-k text-token selection.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSelection {
    pub k: usize,
    /// Selected text-token positions, strictly increasing.
    pub indices: Vec<usize>,
    /// Aggregate similarity per text-token position.
    pub scores: Vec<f64>,
}

/// score_j = sum over foreground queries of (q_i . k_j) / sqrt(d); the top-k
/// positions by score win, ties broken toward the lower index.
pub fn select_topk_tokens<E: Scalar>(
    q_fg: &Tensor<E>,
    k_text: &Tensor<E>,
    k: usize,
) -> Result<TokenSelection> {
    if q_fg.rows() == 0 {
        return Err(Error::Contract(
            "top-k selection needs at least one foreground query; skip pruning on empty masks"
                .into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("top-k selection needs k >= 1".into()));
    }
    let d = q_fg.cols();
    if k_text.cols() != d {
        return Err(Error::InvalidShape("query/key dims disagree".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let l = k_text.rows();
    let mut scores = vec![0.0f64; l];
    for i in 0..q_fg.rows() {
        let q = q_fg.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = k_text.row(j);
            let dot: f64 = q.iter().zip(kj).map(|(&a, &b)| (a * b).f64()).sum();
            *s += dot * scale;
        }
    }
    let take = k.min(l);
    let mut order: Vec<usize> = (0..l).collect();
    // Stable descending sort on score keeps the lower index on ties.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut indices: Vec<usize> = order[..take].to_vec();
    indices.sort_unstable();
    Ok(TokenSelection { k: take, indices, scores })
}

/// Attention for foreground queries over the selected keys/values only; each
/// row is normalized over the k selected tokens.
pub fn sparse_cross_attention<E: Scalar>(
    q_fg: &Tensor<E>,
    k_sel: &Tensor<E>,
    v_sel: &Tensor<E>,
) -> Result<Tensor<E>> {
    if k_sel.rows() == 0 {
        return Err(Error::InvalidArgument("sparse attention over zero tokens".into()));
    }
    if q_fg.cols() != k_sel.cols() || k_sel.rows() != v_sel.rows() {
        return Err(Error::InvalidShape("sparse attention shape mismatch".into()));
    }
    Ok(attention(q_fg, k_sel, v_sel))
}

/// Scatter foreground attention rows into a full S x d matrix; rows outside
/// the foreground are exactly zero.
pub fn scatter_full<E: Scalar>(
    a_sparse: &Tensor<E>,
    mask: &TokenMask,
    s: usize,
) -> Result<Tensor<E>> {
    if s != mask.len() {
        return Err(Error::InvalidShape("scatter length must match mask".into()));
    }
    let fg = mask.foreground();
    if a_sparse.rows() != fg.len() {
        return Err(Error::InvalidShape(format!(
            "sparse rows {} vs foreground size {}",
            a_sparse.rows(),
            fg.len()
        )));
    }
    let d = a_sparse.cols();
    let mut out = Tensor::zeros(vec![s, d]);
    for (rank, &i) in fg.iter().enumerate() {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(a_sparse.row(rank));
    }
    Ok(out)
}

/// The composed layer: select tokens, attend sparsely with foreground
/// queries, scatter with exact zeros on background rows, then blend the
/// background rows back from the source-pass cache.
///
/// `extra_kv` carries adapter keys/values appended to the selected text set
/// without being subject to pruning. With an empty foreground the source-pass
/// rows pass through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn ssca_layer<E: Scalar>(
    q: &Tensor<E>,
    k_text: &Tensor<E>,
    v_text: &Tensor<E>,
    mask: &TokenMask,
    k: usize,
    x_src: &Tensor<E>,
    alpha: &AlphaMask<E>,
    extra_kv: Option<(&Tensor<E>, &Tensor<E>)>,
) -> Result<Tensor<E>> {
    if q.rows() != mask.len() {
        return Err(Error::InvalidShape("query rows must match mask length".into()));
    }
    let fg = mask.foreground();
    if fg.is_empty() {
        return Ok(x_src.clone());
    }
    let q_fg = q.gather_rows(&fg);
    let sel = select_topk_tokens(&q_fg, k_text, k)?;
    let mut k_sel = k_text.gather_rows(&sel.indices);
    let mut v_sel = v_text.gather_rows(&sel.indices);
    if let Some((ke, ve)) = extra_kv {
        k_sel = k_sel.concat_rows(ke);
        v_sel = v_sel.concat_rows(ve);
    }
    let a_sparse = sparse_cross_attention(&q_fg, &k_sel, &v_sel)?;
    let a_full = scatter_full(&a_sparse, mask, mask.len())?;
    shielded_cross_attention_rows(&a_full, x_src, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bg_shield::feather_mask;
    use crate::rng::Rng;

    fn random_mask(rng: &mut Rng, n: usize) -> TokenMask {
        TokenMask::new((0..n).map(|_| rng.below(2) == 1).collect(), (1, n)).unwrap()
    }

    #[test]
    fn k_at_least_vocab_selects_everything() {
        let mut rng = Rng::new(1);
        let q = rng.normal_tensor::<f64>(vec![3, 4]);
        let kt = rng.normal_tensor::<f64>(vec![6, 4]);
        let sel = select_topk_tokens(&q, &kt, 10).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn aligned_key_wins_argmax() {
        let q = Tensor::new(vec![1, 3], vec![0.0f64, 2.0, 0.0]);
        let kt = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let sel = select_topk_tokens(&q, &kt, 1).unwrap();
        assert_eq!(sel.indices, vec![1]);
    }

    #[test]
    fn selection_matches_full_sort_oracle() {
        let mut rng = Rng::new(2);
        for trial in 0..1000 {
            let nf = 1 + rng.below(5);
            let q = rng.normal_tensor::<f64>(vec![nf, 4]);
            let kt = rng.normal_tensor::<f64>(vec![6, 4]);
            let k = 1 + rng.below(6);
            let sel = select_topk_tokens(&q, &kt, k).unwrap();

            // Oracle: compute scores naively, full sort with index tie-break.
            let mut scores = vec![0.0f64; 6];
            for i in 0..nf {
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..4 {
                        dot += q.row(i)[c] * kt.row(j)[c];
                    }
                    *s += dot / 2.0; // sqrt(4)
                }
            }
            let mut order: Vec<usize> = (0..6).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            let mut expect = order[..k.min(6)].to_vec();
            expect.sort_unstable();
            assert_eq!(sel.indices, expect, "trial {trial}");
            // Every selected score >= every unselected score.
            let worst_in = sel.indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for j in 0..6 {
                if !sel.indices.contains(&j) {
                    assert!(scores[j] <= worst_in);
                }
            }
        }
    }

    #[test]
    fn empty_foreground_is_a_contract_violation() {
        let q = Tensor::<f64>::zeros(vec![0, 4]);
        let kt = Tensor::<f64>::zeros(vec![6, 4]);
        assert!(select_topk_tokens(&q, &kt, 2).is_err());
    }

    #[test]
    fn k_one_returns_the_single_value_row() {
        let mut rng = Rng::new(3);
        let q = rng.normal_tensor::<f64>(vec![4, 5]);
        let k = rng.normal_tensor::<f64>(vec![1, 5]);
        let v = rng.normal_tensor::<f64>(vec![1, 5]);
        let out = sparse_cross_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), v.row(0), "softmax over one logit is 1");
        }
    }

    #[test]
    fn no_pruning_equals_dense_attention() {
        let mut rng = Rng::new(4);
        let q = rng.normal_tensor::<f64>(vec![8, 4]);
        let kt = rng.normal_tensor::<f64>(vec![6, 4]);
        let vt = rng.normal_tensor::<f64>(vec![6, 4]);
        let sel = select_topk_tokens(&q, &kt, 6).unwrap();
        let out = sparse_cross_attention(
            &q,
            &kt.gather_rows(&sel.indices),
            &vt.gather_rows(&sel.indices),
        )
        .unwrap();
        assert_eq!(out, attention(&q, &kt, &vt), "k=L is bit-exact dense attention");
    }

    #[test]
    fn sparse_attention_matches_dense_restricted_oracle() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let q = rng.normal_tensor::<f64>(vec![3, 4]);
            let kt = rng.normal_tensor::<f64>(vec![6, 4]);
            let vt = rng.normal_tensor::<f64>(vec![6, 4]);
            let k = 1 + rng.below(6);
            let sel = select_topk_tokens(&q, &kt, k).unwrap();
            let ks = kt.gather_rows(&sel.indices);
            let vs = vt.gather_rows(&sel.indices);
            let out = sparse_cross_attention(&q, &ks, &vs).unwrap();

            // Naive oracle: per-row softmax over selected columns only.
            for i in 0..3 {
                let logits: Vec<f64> = sel
                    .indices
                    .iter()
                    .map(|&j| {
                        (0..4).map(|c| q.row(i)[c] * kt.row(j)[c]).sum::<f64>() / 2.0
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..4 {
                    let expect: f64 = sel
                        .indices
                        .iter()
                        .enumerate()
                        .map(|(r, &j)| exps[r] / z * vt.row(j)[c])
                        .sum();
                    assert!((out.row(i)[c] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scatter_zeroes_background_bitwise() {
        let mut rng = Rng::new(6);
        for _ in 0..200 {
            let mask = random_mask(&mut rng, 12);
            let nf = mask.foreground().len();
            let a = rng.normal_tensor::<f64>(vec![nf, 3]);
            let full = scatter_full(&a, &mask, 12).unwrap();
            // Brute-force scatter-loop oracle.
            let mut rank = 0;
            for i in 0..12 {
                if mask.is_foreground(i) {
                    assert_eq!(full.row(i), a.row(rank));
                    rank += 1;
                } else {
                    assert!(full.row(i).iter().all(|&x| x == 0.0 && x.is_sign_positive()));
                }
            }
        }
    }

    #[test]
    fn scatter_all_foreground_is_identity() {
        let mut rng = Rng::new(7);
        let mask = TokenMask::new(vec![true; 5], (1, 5)).unwrap();
        let a = rng.normal_tensor::<f64>(vec![5, 3]);
        assert_eq!(scatter_full(&a, &mask, 5).unwrap(), a);
        assert!(scatter_full(&a, &mask, 6).is_err());
    }

    #[test]
    fn full_degeneracy_equals_dense_cross_attention() {
        let mut rng = Rng::new(8);
        let q = rng.normal_tensor::<f64>(vec![8, 4]);
        let kt = rng.normal_tensor::<f64>(vec![6, 4]);
        let vt = rng.normal_tensor::<f64>(vec![6, 4]);
        let x_src = rng.normal_tensor::<f64>(vec![8, 4]);
        let mask = TokenMask::new(vec![true; 8], (2, 4)).unwrap();
        let alpha = feather_mask::<f64>(&mask, 0.0).unwrap();
        let out = ssca_layer(&q, &kt, &vt, &mask, 6, &x_src, &alpha, None).unwrap();
        assert_eq!(out, attention(&q, &kt, &vt));
    }

    #[test]
    fn binary_alpha_keeps_background_rows_from_source() {
        let mut rng = Rng::new(9);
        let mask = random_mask(&mut rng, 8);
        let q = rng.normal_tensor::<f64>(vec![8, 4]);
        let kt = rng.normal_tensor::<f64>(vec![6, 4]);
        let vt = rng.normal_tensor::<f64>(vec![6, 4]);
        let x_src = rng.normal_tensor::<f64>(vec![8, 4]);
        let alpha = feather_mask::<f64>(&mask, 0.0).unwrap();
        for k in 1..=6 {
            let out = ssca_layer(&q, &kt, &vt, &mask, k, &x_src, &alpha, None).unwrap();
            for i in 0..8 {
                if !mask.is_foreground(i) {
                    assert_eq!(out.row(i), x_src.row(i));
                }
            }
        }
    }

    #[test]
    fn empty_foreground_passes_source_rows_through() {
        let mut rng = Rng::new(10);
        let mask = TokenMask::new(vec![false; 8], (2, 4)).unwrap();
        let q = rng.normal_tensor::<f64>(vec![8, 4]);
        let kt = rng.normal_tensor::<f64>(vec![6, 4]);
        let vt = rng.normal_tensor::<f64>(vec![6, 4]);
        let x_src = rng.normal_tensor::<f64>(vec![8, 4]);
        let alpha = feather_mask::<f64>(&mask, 0.0).unwrap();
        let out = ssca_layer(&q, &kt, &vt, &mask, 4, &x_src, &alpha, None).unwrap();
        assert_eq!(out, x_src);
    }

    #[test]
    fn pruned_token_independence() {
        let mut rng = Rng::new(11);
        let mask = TokenMask::new(vec![true, true, false, false], (1, 4)).unwrap();
        let q = rng.normal_tensor::<f64>(vec![4, 4]);
        let kt = rng.normal_tensor::<f64>(vec![6, 4]);
        let vt = rng.normal_tensor::<f64>(vec![6, 4]);
        let x_src = rng.normal_tensor::<f64>(vec![4, 4]);
        let alpha = feather_mask::<f64>(&mask, 0.0).unwrap();
        let k = 3;
        let fg = mask.foreground();
        let sel = select_topk_tokens(&q.gather_rows(&fg), &kt, k).unwrap();
        let out = ssca_layer(&q, &kt, &vt, &mask, k, &x_src, &alpha, None).unwrap();
        // Perturb the value vector of an unselected token: output unchanged.
        let dropped = (0..6).find(|j| !sel.indices.contains(j)).unwrap();
        let mut vt2 = vt.clone();
        for c in 0..4 {
            vt2.data_mut()[dropped * 4 + c] += 100.0;
        }
        let out2 = ssca_layer(&q, &kt, &vt2, &mask, k, &x_src, &alpha, None).unwrap();
        assert_eq!(out, out2, "pruned tokens have zero influence");
    }
}
