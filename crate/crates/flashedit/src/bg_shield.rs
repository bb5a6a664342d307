//! Background shield: cache source-pass keys, values, and outputs for
//! background token positions, recompose a spatially aware key-value set on
//! the edit pass, feather the mask, and blend attention outputs so background
//! tokens are recalled rather than recomputed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{attention, gaussian_blur_grid, Scalar, Tensor};

/// Binary token mask over the S-token grid with derived foreground /
/// background index sets in order-preserving enumeration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    m: Vec<bool>,
    grid: (usize, usize),
}

impl TokenMask {
    pub fn new(m: Vec<bool>, grid: (usize, usize)) -> Result<Self> {
        if m.len() != grid.0 * grid.1 {
            return Err(Error::InvalidShape(format!(
                "mask of length {} does not cover a {}x{} grid",
                m.len(),
                grid.0,
                grid.1
            )));
        }
        Ok(TokenMask { m, grid })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.m
    }

    pub fn is_foreground(&self, j: usize) -> bool {
        self.m[j]
    }

    /// Foreground indices in increasing order.
    pub fn foreground(&self) -> Vec<usize> {
        (0..self.m.len()).filter(|&j| self.m[j]).collect()
    }

    /// Background indices in increasing order.
    pub fn background(&self) -> Vec<usize> {
        (0..self.m.len()).filter(|&j| !self.m[j]).collect()
    }

    /// Order-preserving local rank of a background index.
    pub fn rank_background(&self, j: usize) -> usize {
        debug_assert!(!self.m[j]);
        (0..j).filter(|&i| !self.m[i]).count()
    }

    /// Order-preserving local rank of a foreground index.
    pub fn rank_foreground(&self, j: usize) -> usize {
        debug_assert!(self.m[j]);
        (0..j).filter(|&i| self.m[i]).count()
    }

    /// Grow the foreground by one grid cell (4-neighborhood).
    pub fn dilate(&self) -> TokenMask {
        let (h, w) = self.grid;
        let mut out = self.m.clone();
        for y in 0..h {
            for x in 0..w {
                if self.m[y * w + x] {
                    continue;
                }
                let neighbor_fg = (y > 0 && self.m[(y - 1) * w + x])
                    || (y + 1 < h && self.m[(y + 1) * w + x])
                    || (x > 0 && self.m[y * w + x - 1])
                    || (x + 1 < w && self.m[y * w + x + 1]);
                if neighbor_fg {
                    out[y * w + x] = true;
                }
            }
        }
        TokenMask { m: out, grid: self.grid }
    }
}

/// Soft [0,1] mask over tokens, produced by feathering a [`TokenMask`].
#[derive(Clone, Debug)]
pub struct AlphaMask<E: Scalar> {
    a: Vec<E>,
    pub sigma: f64,
}

impl<E: Scalar> AlphaMask<E> {
    pub fn values(&self) -> &[E] {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Per-layer background memory from a source pass: background rows of the
/// source keys/values plus the full source attention outputs.
#[derive(Clone, Debug)]
pub struct LayerCache<E: Scalar> {
    pub k_bg: Tensor<E>,
    pub v_bg: Tensor<E>,
    pub h_src: Tensor<E>,
    mask_len: usize,
    bg_count: usize,
}

/// Whole-pass background memory: self-attention caches plus source-pass
/// cross-attention outputs, bound to the mask they were built with.
#[derive(Clone, Debug)]
pub struct BackgroundCache<E: Scalar> {
    pub self_layers: Vec<LayerCache<E>>,
    pub cross_src: Vec<Tensor<E>>,
    pub mask: TokenMask,
}

/// Extract and cache background rows of the source keys/values for one layer,
/// in order-preserving background rank order; the source attention output is
/// stored whole.
pub fn cache_source_pass<E: Scalar>(
    k_src: &Tensor<E>,
    v_src: &Tensor<E>,
    h_src: &Tensor<E>,
    mask: &TokenMask,
) -> Result<LayerCache<E>> {
    if k_src.rows() != mask.len() || v_src.rows() != mask.len() || h_src.rows() != mask.len() {
        return Err(Error::InvalidShape(format!(
            "cache rows {} vs mask length {}",
            k_src.rows(),
            mask.len()
        )));
    }
    let bg = mask.background();
    Ok(LayerCache {
        k_bg: k_src.gather_rows(&bg),
        v_bg: v_src.gather_rows(&bg),
        h_src: h_src.clone(),
        mask_len: mask.len(),
        bg_count: bg.len(),
    })
}

/// Recomposed key-value set: background rows recalled from the cache at their
/// background rank, foreground rows taken from the edit pass.
pub fn recompose_kv<E: Scalar>(
    k_tgt: &Tensor<E>,
    v_tgt: &Tensor<E>,
    cache: &LayerCache<E>,
    mask: &TokenMask,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if cache.mask_len != mask.len() || cache.bg_count != mask.background().len() {
        return Err(Error::Contract(
            "background cache used with a mask it was not built with".into(),
        ));
    }
    if k_tgt.rows() != mask.len() || v_tgt.rows() != mask.len() {
        return Err(Error::InvalidShape("target K/V rows must match mask length".into()));
    }
    let d = k_tgt.cols();
    let s = mask.len();
    let mut k_full = Tensor::zeros(vec![s, d]);
    let mut v_full = Tensor::zeros(vec![s, d]);
    for j in 0..s {
        let (k_row, v_row) = if mask.is_foreground(j) {
            (k_tgt.row(j), v_tgt.row(j))
        } else {
            let r = mask.rank_background(j);
            (cache.k_bg.row(r), cache.v_bg.row(r))
        };
        k_full.data_mut()[j * d..(j + 1) * d].copy_from_slice(k_row);
        v_full.data_mut()[j * d..(j + 1) * d].copy_from_slice(v_row);
    }
    Ok((k_full, v_full))
}

/// Gaussian-feathered alpha mask over the token grid.
pub fn feather_mask<E: Scalar>(mask: &TokenMask, sigma: f64) -> Result<AlphaMask<E>> {
    let (h, w) = mask.grid();
    let grid = Tensor::from_fn(vec![h, w], |i| if mask.bits()[i] { E::one() } else { E::zero() });
    let blurred = gaussian_blur_grid(&grid, sigma)?;
    Ok(AlphaMask { a: blurred.into_data(), sigma })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShieldMode {
    /// A (x) H_edit exactly as written: background features are zeroed.
    Literal,
    /// A (x) H_edit + (1-A) (x) H_src: background features recalled from the
    /// source pass (default).
    Blended,
}

/// Per-token blend of two S x d matrices: a[j]*edit[j] + (1-a[j])*src[j].
fn blend_rows<E: Scalar>(alpha: &AlphaMask<E>, edit: &Tensor<E>, src: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(edit.shape(), src.shape());
    debug_assert_eq!(alpha.len(), edit.rows());
    let d = edit.cols();
    Tensor::from_fn(edit.shape().to_vec(), |i| {
        let a = alpha.values()[i / d];
        a * edit.data()[i] + (E::one() - a) * src.data()[i]
    })
}

/// Shielded self-attention: all target queries attend to the recomposed
/// key-value set, then the output is alpha-blended (or alpha-masked in
/// literal mode) against the cached source output.
pub fn shielded_self_attention<E: Scalar>(
    q_tgt: &Tensor<E>,
    k_tgt: &Tensor<E>,
    v_tgt: &Tensor<E>,
    cache: &LayerCache<E>,
    mask: &TokenMask,
    alpha: &AlphaMask<E>,
    mode: ShieldMode,
) -> Result<Tensor<E>> {
    if alpha.len() != mask.len() {
        return Err(Error::InvalidShape("alpha mask length must match token mask".into()));
    }
    let (k_full, v_full) = recompose_kv(k_tgt, v_tgt, cache, mask)?;
    let h_edit = attention(q_tgt, &k_full, &v_full);
    Ok(match mode {
        ShieldMode::Literal => {
            let d = h_edit.cols();
            Tensor::from_fn(h_edit.shape().to_vec(), |i| {
                alpha.values()[i / d] * h_edit.data()[i]
            })
        }
        ShieldMode::Blended => blend_rows(alpha, &h_edit, &cache.h_src),
    })
}

/// Alpha-blend edit-pass cross-attention rows against the cached source rows,
/// so background token trajectories stay on their source-pass values.
pub fn shielded_cross_attention_rows<E: Scalar>(
    x_edit: &Tensor<E>,
    x_src: &Tensor<E>,
    alpha: &AlphaMask<E>,
) -> Result<Tensor<E>> {
    if x_edit.shape() != x_src.shape() || x_edit.rows() != alpha.len() {
        return Err(Error::InvalidShape(format!(
            "cross blend shapes: edit {:?}, src {:?}, alpha {}",
            x_edit.shape(),
            x_src.shape(),
            alpha.len()
        )));
    }
    Ok(blend_rows(alpha, x_edit, x_src))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_mask(rng: &mut Rng, h: usize, w: usize) -> TokenMask {
        TokenMask::new((0..h * w).map(|_| rng.below(2) == 1).collect(), (h, w)).unwrap()
    }

    fn binary_alpha<E: Scalar>(mask: &TokenMask) -> AlphaMask<E> {
        feather_mask(mask, 0.0).unwrap()
    }

    #[test]
    fn cache_all_background_keeps_everything() {
        let mut rng = Rng::new(1);
        let k = rng.normal_tensor::<f64>(vec![16, 4]);
        let v = rng.normal_tensor::<f64>(vec![16, 4]);
        let h = rng.normal_tensor::<f64>(vec![16, 4]);
        let mask = TokenMask::new(vec![false; 16], (4, 4)).unwrap();
        let cache = cache_source_pass(&k, &v, &h, &mask).unwrap();
        assert_eq!(cache.k_bg, k);
        assert_eq!(cache.v_bg, v);

        let all_fg = TokenMask::new(vec![true; 16], (4, 4)).unwrap();
        let cache = cache_source_pass(&k, &v, &h, &all_fg).unwrap();
        assert_eq!(cache.k_bg.rows(), 0);
    }

    #[test]
    fn cache_gather_matches_row_pick_oracle() {
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let mask = random_mask(&mut rng, 3, 4);
            let k = rng.normal_tensor::<f64>(vec![12, 5]);
            let v = rng.normal_tensor::<f64>(vec![12, 5]);
            let h = rng.normal_tensor::<f64>(vec![12, 5]);
            let cache = cache_source_pass(&k, &v, &h, &mask).unwrap();
            // Brute-force row-pick oracle.
            let mut r = 0;
            for j in 0..12 {
                if !mask.is_foreground(j) {
                    assert_eq!(cache.k_bg.row(r), k.row(j));
                    assert_eq!(cache.v_bg.row(r), v.row(j));
                    r += 1;
                }
            }
            assert_eq!(r, cache.k_bg.rows());
        }
    }

    #[test]
    fn recompose_degenerate_masks() {
        let mut rng = Rng::new(3);
        let k_src = rng.normal_tensor::<f64>(vec![8, 3]);
        let v_src = rng.normal_tensor::<f64>(vec![8, 3]);
        let h_src = rng.normal_tensor::<f64>(vec![8, 3]);
        let k_tgt = rng.normal_tensor::<f64>(vec![8, 3]);
        let v_tgt = rng.normal_tensor::<f64>(vec![8, 3]);

        let all_fg = TokenMask::new(vec![true; 8], (2, 4)).unwrap();
        let cache = cache_source_pass(&k_src, &v_src, &h_src, &all_fg).unwrap();
        let (kf, vf) = recompose_kv(&k_tgt, &v_tgt, &cache, &all_fg).unwrap();
        assert_eq!(kf, k_tgt);
        assert_eq!(vf, v_tgt);

        let all_bg = TokenMask::new(vec![false; 8], (2, 4)).unwrap();
        let cache = cache_source_pass(&k_src, &v_src, &h_src, &all_bg).unwrap();
        let (kf, vf) = recompose_kv(&k_tgt, &v_tgt, &cache, &all_bg).unwrap();
        assert_eq!(kf, k_src);
        assert_eq!(vf, v_src);
    }

    #[test]
    fn recompose_matches_row_assembly_oracle() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let mask = random_mask(&mut rng, 4, 4);
            let k_src = rng.normal_tensor::<f64>(vec![16, 4]);
            let v_src = rng.normal_tensor::<f64>(vec![16, 4]);
            let h_src = rng.normal_tensor::<f64>(vec![16, 4]);
            let k_tgt = rng.normal_tensor::<f64>(vec![16, 4]);
            let v_tgt = rng.normal_tensor::<f64>(vec![16, 4]);
            let cache = cache_source_pass(&k_src, &v_src, &h_src, &mask).unwrap();
            let (kf, vf) = recompose_kv(&k_tgt, &v_tgt, &cache, &mask).unwrap();
            for j in 0..16 {
                if mask.is_foreground(j) {
                    assert_eq!(kf.row(j), k_tgt.row(j));
                    assert_eq!(vf.row(j), v_tgt.row(j));
                } else {
                    assert_eq!(kf.row(j), k_src.row(j));
                    assert_eq!(vf.row(j), v_src.row(j));
                }
            }
        }
    }

    #[test]
    fn recompose_rejects_mismatched_cache() {
        let mut rng = Rng::new(5);
        let k = rng.normal_tensor::<f64>(vec![8, 3]);
        let v = rng.normal_tensor::<f64>(vec![8, 3]);
        let h = rng.normal_tensor::<f64>(vec![8, 3]);
        let mask_a = TokenMask::new(vec![true, false, true, false, true, false, true, false], (2, 4))
            .unwrap();
        let mask_b =
            TokenMask::new(vec![true, true, true, false, true, false, true, false], (2, 4)).unwrap();
        let cache = cache_source_pass(&k, &v, &h, &mask_a).unwrap();
        assert!(recompose_kv(&k, &v, &cache, &mask_b).is_err());
    }

    #[test]
    fn feather_sigma_zero_equals_mask() {
        let mut rng = Rng::new(6);
        let mask = random_mask(&mut rng, 8, 8);
        let alpha = feather_mask::<f64>(&mask, 0.0).unwrap();
        for (j, &bit) in mask.bits().iter().enumerate() {
            assert_eq!(alpha.values()[j], if bit { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn feather_creates_transition_zone_with_finite_support() {
        // Single interior foreground token on an 8x8 grid.
        let mut bits = vec![false; 64];
        bits[3 * 8 + 3] = true;
        let mask = TokenMask::new(bits, (8, 8)).unwrap();
        let sigma = 1.0;
        let alpha = feather_mask::<f64>(&mask, sigma).unwrap();
        // Boundary-adjacent background tokens sit strictly inside (0, 1).
        let a = alpha.values()[3 * 8 + 4];
        assert!(a > 0.0 && a < 1.0, "transition zone value {a}");
        // Tokens at Chebyshev distance > ceil(2*sigma) are exactly zero.
        let reach = (2.0 * sigma).ceil() as i64;
        for y in 0..8i64 {
            for x in 0..8i64 {
                if (y - 3).abs().max((x - 3).abs()) > reach {
                    assert_eq!(alpha.values()[(y * 8 + x) as usize], 0.0);
                }
            }
        }
    }

    #[test]
    fn shield_no_op_when_alpha_is_one() {
        let mut rng = Rng::new(7);
        let q = rng.normal_tensor::<f64>(vec![8, 3]);
        let k = rng.normal_tensor::<f64>(vec![8, 3]);
        let v = rng.normal_tensor::<f64>(vec![8, 3]);
        let h_src = rng.normal_tensor::<f64>(vec![8, 3]);
        let all_fg = TokenMask::new(vec![true; 8], (2, 4)).unwrap();
        let cache = cache_source_pass(&k, &v, &h_src, &all_fg).unwrap();
        let alpha = binary_alpha::<f64>(&all_fg);
        let plain = attention(&q, &k, &v);
        for mode in [ShieldMode::Literal, ShieldMode::Blended] {
            let h = shielded_self_attention(&q, &k, &v, &cache, &all_fg, &alpha, mode).unwrap();
            assert_eq!(h, plain);
        }
    }

    #[test]
    fn blended_binary_alpha_recalls_background_rows_exactly() {
        let mut rng = Rng::new(8);
        let mask = random_mask(&mut rng, 2, 4);
        let q = rng.normal_tensor::<f64>(vec![8, 3]);
        let k_src = rng.normal_tensor::<f64>(vec![8, 3]);
        let v_src = rng.normal_tensor::<f64>(vec![8, 3]);
        let h_src = rng.normal_tensor::<f64>(vec![8, 3]);
        let k_tgt = rng.normal_tensor::<f64>(vec![8, 3]);
        let v_tgt = rng.normal_tensor::<f64>(vec![8, 3]);
        let cache = cache_source_pass(&k_src, &v_src, &h_src, &mask).unwrap();
        let alpha = binary_alpha::<f64>(&mask);

        let blended =
            shielded_self_attention(&q, &k_tgt, &v_tgt, &cache, &mask, &alpha, ShieldMode::Blended)
                .unwrap();
        let literal =
            shielded_self_attention(&q, &k_tgt, &v_tgt, &cache, &mask, &alpha, ShieldMode::Literal)
                .unwrap();
        for j in 0..8 {
            if !mask.is_foreground(j) {
                assert_eq!(blended.row(j), h_src.row(j), "background row recalled bit-exactly");
                assert!(literal.row(j).iter().all(|&x| x == 0.0), "literal zeroes background");
            } else {
                assert_eq!(blended.row(j), literal.row(j), "foreground rows agree");
            }
        }
    }

    #[test]
    fn cross_blend_matches_elementwise_oracle() {
        let mut rng = Rng::new(9);
        let mask = random_mask(&mut rng, 2, 4);
        let x_edit = rng.normal_tensor::<f64>(vec![8, 5]);
        let x_src = rng.normal_tensor::<f64>(vec![8, 5]);

        let ones = AlphaMask { a: vec![1.0; 8], sigma: 0.0 };
        assert_eq!(shielded_cross_attention_rows(&x_edit, &x_src, &ones).unwrap(), x_edit);
        let zeros = AlphaMask { a: vec![0.0; 8], sigma: 0.0 };
        assert_eq!(shielded_cross_attention_rows(&x_edit, &x_src, &zeros).unwrap(), x_src);

        let a: Vec<f64> = (0..8).map(|_| rng.uniform_f64()).collect();
        let alpha = AlphaMask { a: a.clone(), sigma: 1.0 };
        let _ = mask;
        let out = shielded_cross_attention_rows(&x_edit, &x_src, &alpha).unwrap();
        for i in 0..8 {
            for j in 0..5 {
                let expect = a[i] * x_edit.row(i)[j] + (1.0 - a[i]) * x_src.row(i)[j];
                assert_eq!(out.row(i)[j], expect);
            }
        }
    }
}
