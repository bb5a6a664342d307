//! End-to-end editing: invert the source image once, run a source pass that
//! records every attention layer, then a single shielded edit pass. Also
//! hosts self-guided mask derivation from differential cross-attention.

use crate::bg_shield::{
    cache_source_pass, feather_mask, shielded_self_attention, AlphaMask, BackgroundCache,
    ShieldMode, TokenMask,
};
use crate::error::{Error, Result};
use crate::hooks::{AttentionHooks, CrossAttnCtx, CrossProbeHooks, RecordingHooks, SelfAttnCtx};
use crate::model::{adapter_encode, generate, invert, ArchConfig, Model, NetKind};
use crate::prompt::PromptTokens;
use crate::ssca::ssca_layer;
use crate::tensor::{Scalar, Tensor};
use std::time::{Duration, Instant};

/// Threshold on normalized differential cross-attention mass.
pub const MASK_TAU: f64 = 0.5;
/// Default feather width (token cells) and sparse token count.
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_K: usize = 4;

/// The trained networks an edit needs (the teacher participates only in
/// training and baselines).
pub struct EditStack<E: Scalar> {
    pub arch: ArchConfig,
    pub gen: Model<E>,
    pub inv: Model<E>,
    pub ada: Model<E>,
}

impl<E: Scalar> EditStack<E> {
    pub fn new(gen: Model<E>, inv: Model<E>, ada: Model<E>) -> Result<Self> {
        if gen.kind != NetKind::Generator || inv.kind != NetKind::Inverter || ada.kind != NetKind::Adapter
        {
            return Err(Error::InvalidArgument("stack wants generator, inverter, adapter".into()));
        }
        if gen.cfg != inv.cfg || gen.cfg != ada.cfg {
            return Err(Error::InvalidArgument("stack networks disagree on architecture".into()));
        }
        let arch = gen.cfg.clone();
        Ok(EditStack { arch, gen, inv, ada })
    }

    pub fn backbone_evals(&self) -> u64 {
        self.gen.eval_count() + self.inv.eval_count()
    }

    pub fn adapter_evals(&self) -> u64 {
        self.ada.eval_count()
    }

    pub fn reset_eval_counts(&self) {
        self.gen.reset_eval_count();
        self.inv.reset_eval_count();
        self.ada.reset_eval_count();
    }
}

#[derive(Clone, Debug)]
pub struct EditRequest<E: Scalar> {
    pub image: Tensor<E>,
    pub src_prompt: PromptTokens,
    pub tgt_prompt: PromptTokens,
    /// Binary pixel mask, row-major H*W; derived from cross-attention when
    /// absent.
    pub pixel_mask: Option<Vec<bool>>,
    pub sigma_feather: f64,
    pub k_ssca: usize,
    pub mode: ShieldMode,
}

impl<E: Scalar> EditRequest<E> {
    pub fn new(image: Tensor<E>, src_prompt: PromptTokens, tgt_prompt: PromptTokens) -> Self {
        EditRequest {
            image,
            src_prompt,
            tgt_prompt,
            pixel_mask: None,
            sigma_feather: DEFAULT_SIGMA,
            k_ssca: DEFAULT_K,
            mode: ShieldMode::Blended,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PhaseTimings {
    pub invert: Duration,
    pub adapter: Duration,
    pub mask: Duration,
    pub source_pass: Duration,
    pub edit_pass: Duration,
    /// Backbone evaluations consumed by this edit (3 with a provided mask,
    /// 4 when the mask is derived) and adapter encodes (always 1).
    pub backbone_evals: u64,
    pub adapter_evals: u64,
}

#[derive(Clone, Debug)]
pub struct EditResult<E: Scalar> {
    pub edited: Tensor<E>,
    pub reconstruction: Tensor<E>,
    pub eps_inv: Tensor<E>,
    pub token_mask: TokenMask,
    pub alpha: AlphaMask<E>,
    pub mask_derived: bool,
    /// The derived mask had no foreground; the edit degraded to a
    /// reconstruction.
    pub empty_mask_noop: bool,
    /// Source and target prompts were identical.
    pub identity_noop: bool,
    pub timings: PhaseTimings,
}

/// Token foreground iff any pixel of its patch cell is set. Values must be
/// exactly 0 or 1.
pub fn pixel_mask_to_token_mask<E: Scalar>(
    mask: &Tensor<E>,
    arch: &ArchConfig,
) -> Result<TokenMask> {
    let hw = arch.image_size;
    if mask.shape() != [hw, hw] {
        return Err(Error::InvalidShape(format!(
            "pixel mask must be [{hw}, {hw}], got {:?}",
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&v| v != E::zero() && v != E::one()) {
        return Err(Error::InvalidArgument("pixel mask must be binary (0/1)".into()));
    }
    let bits: Vec<bool> = mask.data().iter().map(|&v| v == E::one()).collect();
    token_mask_from_pixels(&bits, arch)
}

/// Same rule for an already-binary pixel mask.
pub fn token_mask_from_pixels(pixels: &[bool], arch: &ArchConfig) -> Result<TokenMask> {
    let hw = arch.image_size;
    if pixels.len() != hw * hw {
        return Err(Error::InvalidShape("pixel mask length must be H*W".into()));
    }
    let tps = arch.tokens_per_side();
    let p = arch.patch;
    let mut bits = vec![false; tps * tps];
    for (i, bit) in bits.iter_mut().enumerate() {
        let (ty, tx) = (i / tps, i % tps);
        *bit = (0..p).any(|dy| (0..p).any(|dx| pixels[(ty * p + dy) * hw + tx * p + dx]));
    }
    TokenMask::new(bits, (tps, tps))
}

/// Invert and regenerate with source-image adapter tokens; no hooks.
pub fn reconstruct<E: Scalar>(
    stack: &EditStack<E>,
    image: &Tensor<E>,
    src_prompt: &PromptTokens,
) -> Tensor<E> {
    let eps_inv = invert(&stack.inv, image, src_prompt);
    let c_i = adapter_encode(&stack.ada, image);
    generate(&stack.gen, &eps_inv, src_prompt, Some(&c_i), None)
}

/// Threshold a normalized per-token mass vector and dilate one cell.
pub fn mask_from_mass<E: Scalar>(mass: &[E], tau: f64, grid: (usize, usize)) -> Result<TokenMask> {
    let max = mass.iter().cloned().fold(E::zero(), |a, b| if b > a { b } else { a });
    let bits = if max == E::zero() {
        vec![false; mass.len()]
    } else {
        mass.iter().map(|&m| (m / max).f64() >= tau).collect()
    };
    Ok(TokenMask::new(bits, grid)?.dilate())
}

fn probe_mask<E: Scalar>(
    stack: &EditStack<E>,
    eps_inv: &Tensor<E>,
    c_i: &Tensor<E>,
    src_prompt: &PromptTokens,
    tgt_prompt: &PromptTokens,
) -> Result<TokenMask> {
    let differing = src_prompt.differing_positions(tgt_prompt);
    if differing.is_empty() {
        return Err(Error::InvalidArgument(
            "identical prompts localize nothing; provide a mask or change the target".into(),
        ));
    }
    let mut probe = CrossProbeHooks::<E>::new(differing);
    let _ = generate(&stack.gen, eps_inv, tgt_prompt, Some(c_i), Some(&mut probe));
    let s = stack.arch.seq_len();
    let mut mean = vec![E::zero(); s];
    for layer in &probe.mass {
        for (m, &v) in mean.iter_mut().zip(layer) {
            *m = *m + v;
        }
    }
    let inv_layers = E::of(1.0 / probe.mass.len() as f64);
    for m in &mut mean {
        *m = *m * inv_layers;
    }
    let tps = stack.arch.tokens_per_side();
    mask_from_mass(&mean, MASK_TAU, (tps, tps))
}

/// Self-guided token mask from an unshielded edit pass: average the
/// cross-attention mass on the differing prompt tokens over all layers,
/// normalize, threshold at tau = 0.5, dilate one cell.
pub fn derive_mask<E: Scalar>(
    stack: &EditStack<E>,
    image: &Tensor<E>,
    src_prompt: &PromptTokens,
    tgt_prompt: &PromptTokens,
) -> Result<TokenMask> {
    let eps_inv = invert(&stack.inv, image, src_prompt);
    let c_i = adapter_encode(&stack.ada, image);
    probe_mask(stack, &eps_inv, &c_i, src_prompt, tgt_prompt)
}

/// Edit-pass hooks: background-shielded self-attention at every layer and,
/// when enabled, sparsified cross-attention with source-row recall.
pub struct ShieldHooks<'a, E: Scalar> {
    pub cache: &'a BackgroundCache<E>,
    pub alpha: &'a AlphaMask<E>,
    pub mode: ShieldMode,
    pub k_ssca: usize,
    /// Replace cross-attention too; off reproduces the shield-only ablation.
    pub cross_enabled: bool,
}

impl<E: Scalar> AttentionHooks<E> for ShieldHooks<'_, E> {
    fn on_self_attention(&mut self, ctx: &SelfAttnCtx<'_, E>) -> Option<Tensor<E>> {
        let layer = &self.cache.self_layers[ctx.layer];
        Some(
            shielded_self_attention(ctx.q, ctx.k, ctx.v, layer, &self.cache.mask, self.alpha, self.mode)
                .expect("cache and mask were built together"),
        )
    }

    fn on_cross_attention(&mut self, ctx: &CrossAttnCtx<'_, E>) -> Option<Tensor<E>> {
        if !self.cross_enabled {
            return None;
        }
        let extra = match (ctx.k_extra, ctx.v_extra) {
            (Some(k), Some(v)) => Some((k, v)),
            _ => None,
        };
        Some(
            ssca_layer(
                ctx.q,
                ctx.k_text,
                ctx.v_text,
                &self.cache.mask,
                self.k_ssca,
                &self.cache.cross_src[ctx.layer],
                self.alpha,
                extra,
            )
            .expect("cache and mask were built together"),
        )
    }
}

/// Assemble the per-layer background memory from a recorded source pass.
pub fn build_cache<E: Scalar>(
    rec: RecordingHooks<E>,
    mask: TokenMask,
) -> Result<BackgroundCache<E>> {
    let self_layers = rec
        .self_kvh
        .iter()
        .map(|(k, v, h)| cache_source_pass(k, v, h, &mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(BackgroundCache { self_layers, cross_src: rec.cross_out, mask })
}

/// Which editing components run during the edit pass; the lesser variants
/// exist for the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditVariant {
    /// One-step inversion and regeneration with the target prompt; no shields.
    OsieOnly,
    /// Background-shielded self-attention only.
    WithShield,
    /// Shielded self-attention plus sparsified cross-attention.
    Full,
}

/// Full edit: invert, source pass (which doubles as the reconstruction),
/// shielded edit pass. With a provided mask this costs exactly 3 backbone
/// evaluations plus 1 adapter encode; a derived mask costs one more backbone
/// evaluation for the probe pass.
pub fn edit<E: Scalar>(stack: &EditStack<E>, req: &EditRequest<E>) -> Result<EditResult<E>> {
    edit_with_variant(stack, req, EditVariant::Full)
}

pub fn edit_with_variant<E: Scalar>(
    stack: &EditStack<E>,
    req: &EditRequest<E>,
    variant: EditVariant,
) -> Result<EditResult<E>> {
    if req.image.shape() != stack.arch.image_shape().as_slice() {
        return Err(Error::InvalidShape("edit image does not match the architecture".into()));
    }
    if req.sigma_feather < 0.0 || req.k_ssca == 0 {
        return Err(Error::InvalidArgument("sigma must be >= 0 and k >= 1".into()));
    }
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    let eps_inv = invert(&stack.inv, &req.image, &req.src_prompt);
    timings.invert = t.elapsed();
    let t = Instant::now();
    let c_i = adapter_encode(&stack.ada, &req.image);
    timings.adapter = t.elapsed();

    let t = Instant::now();
    let mut rec = RecordingHooks::new();
    let reconstruction =
        generate(&stack.gen, &eps_inv, &req.src_prompt, Some(&c_i), Some(&mut rec));
    timings.source_pass = t.elapsed();

    let tps = stack.arch.tokens_per_side();
    let identity = req.src_prompt == req.tgt_prompt;
    let mask_derived = req.pixel_mask.is_none() && !identity;
    let t = Instant::now();
    let token_mask = match (&req.pixel_mask, identity) {
        (Some(pixels), _) => token_mask_from_pixels(pixels, &stack.arch)?,
        (None, true) => TokenMask::new(vec![false; tps * tps], (tps, tps))?,
        (None, false) => probe_mask(stack, &eps_inv, &c_i, &req.src_prompt, &req.tgt_prompt)?,
    };
    timings.mask = t.elapsed();
    let alpha = feather_mask::<E>(&token_mask, req.sigma_feather)?;

    // Identity edits and empty derived masks degrade to the reconstruction:
    // there is nothing to re-render, and the reconstruction is exactly the
    // shield's "everything is background" answer.
    let empty_mask_noop = !identity && mask_derived && token_mask.foreground().is_empty();
    if identity || empty_mask_noop {
        timings.backbone_evals = if mask_derived { 3 } else { 2 };
        timings.adapter_evals = 1;
        return Ok(EditResult {
            edited: reconstruction.clone(),
            reconstruction,
            eps_inv,
            token_mask,
            alpha,
            mask_derived,
            empty_mask_noop,
            identity_noop: identity,
            timings,
        });
    }

    let cache = build_cache(rec, token_mask.clone())?;
    let t = Instant::now();
    let mut hooks = ShieldHooks {
        cache: &cache,
        alpha: &alpha,
        mode: req.mode,
        k_ssca: req.k_ssca,
        cross_enabled: variant == EditVariant::Full,
    };
    let hook_ref: Option<&mut dyn AttentionHooks<E>> = match variant {
        EditVariant::OsieOnly => None,
        _ => Some(&mut hooks),
    };
    let edited = generate(&stack.gen, &eps_inv, &req.tgt_prompt, Some(&c_i), hook_ref);
    timings.edit_pass = t.elapsed();
    timings.backbone_evals = if mask_derived { 4 } else { 3 };
    timings.adapter_evals = 1;

    Ok(EditResult {
        edited,
        reconstruction,
        eps_inv,
        token_mask,
        alpha,
        mask_derived,
        empty_mask_noop: false,
        identity_noop: false,
        timings,
    })
}
