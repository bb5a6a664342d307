//! Intercept points inside the backbone's attention layers.
//!
//! Every self- and cross-attention layer calls into the hook (when one is
//! installed) with the layer's queries, keys, values, and the default output.
//! Returning `Some` replaces the layer's pre-projection attention output.
//! Hooks run only on inference passes.

use crate::tensor::{Scalar, Tensor};

pub struct SelfAttnCtx<'a, E: Scalar> {
    pub layer: usize,
    pub q: &'a Tensor<E>,
    pub k: &'a Tensor<E>,
    pub v: &'a Tensor<E>,
    /// softmax(q k^T / sqrt(d)) v, already computed by the layer.
    pub h_default: &'a Tensor<E>,
}

pub struct CrossAttnCtx<'a, E: Scalar> {
    pub layer: usize,
    pub q: &'a Tensor<E>,
    /// Keys/values for the text tokens only.
    pub k_text: &'a Tensor<E>,
    pub v_text: &'a Tensor<E>,
    /// Keys/values for adapter tokens appended after the text, if present.
    pub k_extra: Option<&'a Tensor<E>>,
    pub v_extra: Option<&'a Tensor<E>>,
    /// Dense attention output over [text; extra], already computed.
    pub x_default: &'a Tensor<E>,
}

pub trait AttentionHooks<E: Scalar> {
    fn on_self_attention(&mut self, _ctx: &SelfAttnCtx<'_, E>) -> Option<Tensor<E>> {
        None
    }
    fn on_cross_attention(&mut self, _ctx: &CrossAttnCtx<'_, E>) -> Option<Tensor<E>> {
        None
    }
}

/// Pass-through hook that records per-layer source-pass state: self-attention
/// keys, values and outputs, and cross-attention outputs.
#[derive(Default)]
pub struct RecordingHooks<E: Scalar> {
    pub self_kvh: Vec<(Tensor<E>, Tensor<E>, Tensor<E>)>,
    pub cross_out: Vec<Tensor<E>>,
}

impl<E: Scalar> RecordingHooks<E> {
    pub fn new() -> Self {
        RecordingHooks { self_kvh: Vec::new(), cross_out: Vec::new() }
    }
}

impl<E: Scalar> AttentionHooks<E> for RecordingHooks<E> {
    fn on_self_attention(&mut self, ctx: &SelfAttnCtx<'_, E>) -> Option<Tensor<E>> {
        assert_eq!(self.self_kvh.len(), ctx.layer, "layers must arrive in order");
        self.self_kvh
            .push((ctx.k.clone(), ctx.v.clone(), ctx.h_default.clone()));
        None
    }

    fn on_cross_attention(&mut self, ctx: &CrossAttnCtx<'_, E>) -> Option<Tensor<E>> {
        assert_eq!(self.cross_out.len(), ctx.layer, "layers must arrive in order");
        self.cross_out.push(ctx.x_default.clone());
        None
    }
}

/// Records, per layer, the cross-attention probability mass each image token
/// assigns to a chosen set of text-token positions. Used for self-guided mask
/// derivation.
pub struct CrossProbeHooks<E: Scalar> {
    pub text_positions: Vec<usize>,
    /// One S-vector per cross-attention layer.
    pub mass: Vec<Vec<E>>,
}

impl<E: Scalar> CrossProbeHooks<E> {
    pub fn new(text_positions: Vec<usize>) -> Self {
        CrossProbeHooks { text_positions, mass: Vec::new() }
    }
}

impl<E: Scalar> AttentionHooks<E> for CrossProbeHooks<E> {
    fn on_cross_attention(&mut self, ctx: &CrossAttnCtx<'_, E>) -> Option<Tensor<E>> {
        let k_full = match ctx.k_extra {
            Some(ke) => ctx.k_text.concat_rows(ke),
            None => ctx.k_text.clone(),
        };
        let d = ctx.q.cols();
        let scale = E::one() / E::of(d as f64).sqrt();
        let logits = ctx.q.matmul(&k_full.transpose()).scale(scale);
        let probs = crate::tensor::softmax_rows(&logits).expect("non-empty logits");
        let s = ctx.q.rows();
        let mut mass = vec![E::zero(); s];
        for i in 0..s {
            for &j in &self.text_positions {
                mass[i] = mass[i] + probs.row(i)[j];
            }
        }
        self.mass.push(mass);
        None
    }
}
