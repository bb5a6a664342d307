//! The four networks: multi-step teacher, one-step generator, inversion
//! network, and visual adapter, built from shared transformer blocks whose
//! attention layers expose hook points.
//!
//! Layout conventions: images are `[C, H, W]` tensors in [-1, 1], noise
//! latents share that shape, token sequences are `[S, d_model]` with
//! S = (H/patch)^2, adapter tokens are `[(H/8)^2, d_model]`.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, PAD};
use crate::error::{Error, Result};
use crate::hooks::{AttentionHooks, CrossAttnCtx, SelfAttnCtx};
use crate::prompt::{PromptTokens, PROMPT_LEN, VOCAB_SIZE};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Teacher,
    Generator,
    Inverter,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub t_max: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            d_model: 64,
            n_blocks: 3,
            mlp_hidden: 256,
            vocab_size: VOCAB_SIZE,
            prompt_len: PROMPT_LEN,
            t_max: 1000,
        }
    }
}

impl ArchConfig {
    /// Small configuration for gradient-check and unit tests.
    pub fn micro() -> Self {
        ArchConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            d_model: 8,
            n_blocks: 1,
            mlp_hidden: 16,
            vocab_size: VOCAB_SIZE,
            prompt_len: PROMPT_LEN,
            t_max: 100,
        }
    }

    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn seq_len(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Number of adapter tokens: one per 8x8 pixel cell.
    pub fn adapter_tokens(&self) -> usize {
        let side = self.image_size / 8;
        side * side
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_size, self.image_size]
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::cosine(self.t_max)
    }
}

/// Adapter conv widths; the last stage projects to d_model.
const ADAPTER_CH: [usize; 2] = [16, 32];

/// Ordered (name, shape) listing of every parameter tensor of a network.
pub fn param_census(cfg: &ArchConfig, kind: NetKind) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut p = |n: &str, s: Vec<usize>| out.push((n.to_string(), s));
    match kind {
        NetKind::Adapter => {
            let chans = [cfg.channels, ADAPTER_CH[0], ADAPTER_CH[1], d];
            for i in 0..3 {
                p(&format!("conv{}.w", i + 1), vec![chans[i] * 9, chans[i + 1]]);
                p(&format!("conv{}.b", i + 1), vec![chans[i + 1]]);
            }
            p("proj.w", vec![d, d]);
            p("proj.b", vec![d]);
        }
        _ => {
            p("patch_embed.w", vec![cfg.patch_dim(), d]);
            p("patch_embed.b", vec![d]);
            p("pos_embed", vec![cfg.seq_len(), d]);
            p("token_embed", vec![cfg.vocab_size, d]);
            if kind == NetKind::Teacher {
                p("time_embed.w", vec![d, d]);
                p("time_embed.b", vec![d]);
            }
            for b in 0..cfg.n_blocks {
                for (ln, attn) in [("ln1", "self"), ("ln2", "cross")] {
                    p(&format!("blocks.{b}.{ln}.g"), vec![d]);
                    p(&format!("blocks.{b}.{ln}.b"), vec![d]);
                    for w in ["wq", "wk", "wv", "wo"] {
                        p(&format!("blocks.{b}.{attn}.{w}"), vec![d, d]);
                        p(&format!("blocks.{b}.{attn}.{}", w.replace('w', "b")), vec![d]);
                    }
                }
                p(&format!("blocks.{b}.ln3.g"), vec![d]);
                p(&format!("blocks.{b}.ln3.b"), vec![d]);
                p(&format!("blocks.{b}.mlp.w1"), vec![d, cfg.mlp_hidden]);
                p(&format!("blocks.{b}.mlp.b1"), vec![cfg.mlp_hidden]);
                p(&format!("blocks.{b}.mlp.w2"), vec![cfg.mlp_hidden, d]);
                p(&format!("blocks.{b}.mlp.b2"), vec![d]);
            }
            p("ln_f.g", vec![d]);
            p("ln_f.b", vec![d]);
            p("unpatch.w", vec![d, cfg.patch_dim()]);
            p("unpatch.b", vec![cfg.patch_dim()]);
        }
    }
    out
}

/// Named parameter tensors in census order.
#[derive(Clone, Debug)]
pub struct ModelParams<E: Scalar> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> ModelParams<E> {
    pub fn init(cfg: &ArchConfig, kind: NetKind, rng: &mut Rng) -> Self {
        let entries = param_census(cfg, kind)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, rng);
                (name, t)
            })
            .collect();
        ModelParams { entries }
    }

    pub fn from_entries(entries: Vec<(String, Tensor<E>)>) -> Self {
        ModelParams { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<E>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<E>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn matches_census(&self, census: &[(String, Vec<usize>)]) -> bool {
        self.entries.len() == census.len()
            && self
                .entries
                .iter()
                .zip(census)
                .all(|((n, t), (cn, cs))| n == cn && t.shape() == &cs[..])
    }

    pub fn to_precision<F: Scalar>(&self) -> ModelParams<F> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.to_precision::<F>()))
                .collect(),
        }
    }
}

fn init_tensor<E: Scalar>(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor<E> {
    if name.ends_with(".g") {
        return Tensor::full(shape.to_vec(), E::one());
    }
    if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".bq")
        || name.ends_with(".bk") || name.ends_with(".bv") || name.ends_with(".bo")
    {
        return Tensor::zeros(shape.to_vec());
    }
    if name == "token_embed" {
        return rng.normal_tensor_scaled(shape.to_vec(), 0.3);
    }
    if name == "pos_embed" {
        return rng.normal_tensor_scaled(shape.to_vec(), 0.1);
    }
    let fan_in = shape[0] as f64;
    // Output-side projections start small to keep residual streams tame.
    let gain = if name.ends_with(".wo") || name.ends_with(".w2") || name.starts_with("unpatch") {
        0.2
    } else {
        1.0
    };
    rng.normal_tensor_scaled(shape.to_vec(), gain / fan_in.sqrt())
}

/// Parameter tensors loaded onto a graph as inputs.
pub struct ParamVars {
    map: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn load<E: Scalar>(g: &Graph<E>, params: &ModelParams<E>) -> Self {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in params.entries() {
            let v = g.input(t.clone());
            map.insert(name.clone(), v);
            order.push((name.clone(), v));
        }
        ParamVars { map, order }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn ordered(&self) -> &[(String, Var)] {
        &self.order
    }

    /// Swap one named parameter for a different graph variable, e.g. to
    /// differentiate a forward pass with respect to a single tensor.
    pub fn replace(&mut self, name: &str, v: Var) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        *slot = v;
        for (n, ov) in self.order.iter_mut() {
            if n == name {
                *ov = v;
            }
        }
    }
}

// ---- index maps ----

/// Flat map turning a [C,H,W] image into [S, patch_dim] patch rows.
pub fn patchify_map(cfg: &ArchConfig) -> Rc<Vec<usize>> {
    let (c, h, w, p) = (cfg.channels, cfg.image_size, cfg.image_size, cfg.patch);
    let tps = cfg.tokens_per_side();
    let mut map = Vec::with_capacity(cfg.seq_len() * cfg.patch_dim());
    for py in 0..tps {
        for px in 0..tps {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        map.push(ch * h * w + (py * p + dy) * w + (px * p + dx));
                    }
                }
            }
        }
    }
    Rc::new(map)
}

/// Inverse of [`patchify_map`]: [S, patch_dim] rows back to a [C,H,W] image.
pub fn unpatchify_map(cfg: &ArchConfig) -> Rc<Vec<usize>> {
    let fwd = patchify_map(cfg);
    let n = fwd.len();
    let mut inv = vec![0usize; n];
    for (patch_idx, &img_idx) in fwd.iter().enumerate() {
        inv[img_idx] = patch_idx;
    }
    Rc::new(inv)
}

/// im2col map for a 3x3 stride-2 pad-1 convolution on [in_ch, hw, hw];
/// output rows are (oy, ox) positions, columns are (ch, ky, kx).
pub(crate) fn im2col_map(in_ch: usize, hw: usize) -> (Rc<Vec<usize>>, usize) {
    let out_hw = hw / 2;
    let mut map = Vec::with_capacity(out_hw * out_hw * in_ch * 9);
    for oy in 0..out_hw {
        for ox in 0..out_hw {
            for ch in 0..in_ch {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = (2 * oy + ky) as i64 - 1;
                        let ix = (2 * ox + kx) as i64 - 1;
                        if iy < 0 || ix < 0 || iy >= hw as i64 || ix >= hw as i64 {
                            map.push(PAD);
                        } else {
                            map.push(ch * hw * hw + iy as usize * hw + ix as usize);
                        }
                    }
                }
            }
        }
    }
    (Rc::new(map), out_hw)
}

// ---- forward passes ----

/// Sinusoidal timestep features.
fn timestep_features<E: Scalar>(t: usize, d: usize) -> Tensor<E> {
    let mut v = vec![E::zero(); d];
    for i in 0..d / 2 {
        let freq = (10_000.0f64).powf(-2.0 * i as f64 / d as f64);
        let x = t as f64 * freq;
        v[2 * i] = E::of(x.sin());
        v[2 * i + 1] = E::of(x.cos());
    }
    Tensor::new(vec![d], v)
}

/// One backbone evaluation: patchify, three pre-norm blocks of
/// [self-attention, cross-attention, MLP], final norm, unpatchify.
///
/// `hooks` may only be installed on a non-recording graph.
#[allow(clippy::too_many_arguments)]
pub fn backbone_forward<E: Scalar>(
    g: &Graph<E>,
    cfg: &ArchConfig,
    kind: NetKind,
    pv: &ParamVars,
    input: Var,
    prompt: &PromptTokens,
    extra_cond: Option<Var>,
    t: Option<usize>,
    mut hooks: Option<&mut dyn AttentionHooks<E>>,
) -> Var {
    assert!(
        hooks.is_none() || !g.is_recording(),
        "attention hooks are an inference-only surface"
    );
    let d = cfg.d_model;
    let s_len = cfg.seq_len();

    let patches = g.gather_elems(input, patchify_map(cfg), vec![s_len, cfg.patch_dim()]);
    let mut x = g.linear(patches, pv.get("patch_embed.w"), pv.get("patch_embed.b"));
    x = g.add(x, pv.get("pos_embed"));

    if kind == NetKind::Teacher {
        let t = t.expect("teacher forward needs a timestep");
        let feats = g.constant(timestep_features::<E>(t, d).reshape(vec![1, d]));
        let emb = g.linear(feats, pv.get("time_embed.w"), pv.get("time_embed.b"));
        let emb = g.reshape(emb, vec![d]);
        x = g.add_row(x, emb);
    } else {
        assert!(t.is_none(), "only the teacher takes a timestep");
    }

    let ids = Rc::new(prompt.ids().to_vec());
    let text = g.gather_rows(pv.get("token_embed"), ids);
    let cond = match extra_cond {
        Some(e) => g.concat_rows(text, e),
        None => text,
    };
    let text_len = cfg.prompt_len;

    for b in 0..cfg.n_blocks {
        let n = |s: &str| format!("blocks.{b}.{s}");

        // Self-attention.
        let h = g.layer_norm(x, pv.get(&n("ln1.g")), pv.get(&n("ln1.b")), 1e-5);
        let q = g.linear(h, pv.get(&n("self.wq")), pv.get(&n("self.bq")));
        let k = g.linear(h, pv.get(&n("self.wk")), pv.get(&n("self.bk")));
        let v = g.linear(h, pv.get(&n("self.wv")), pv.get(&n("self.bv")));
        let mut attn = g.attention(q, k, v);
        if let Some(hk) = hooks.as_deref_mut() {
            let (qt, kt, vt, ht) = (g.tensor(q), g.tensor(k), g.tensor(v), g.tensor(attn));
            let ctx = SelfAttnCtx { layer: b, q: &qt, k: &kt, v: &vt, h_default: &ht };
            if let Some(replacement) = hk.on_self_attention(&ctx) {
                attn = g.constant(replacement);
            }
        }
        let o = g.linear(attn, pv.get(&n("self.wo")), pv.get(&n("self.bo")));
        x = g.add(x, o);

        // Cross-attention over [text; adapter] tokens.
        let h = g.layer_norm(x, pv.get(&n("ln2.g")), pv.get(&n("ln2.b")), 1e-5);
        let q = g.linear(h, pv.get(&n("cross.wq")), pv.get(&n("cross.bq")));
        let k = g.linear(cond, pv.get(&n("cross.wk")), pv.get(&n("cross.bk")));
        let v = g.linear(cond, pv.get(&n("cross.wv")), pv.get(&n("cross.bv")));
        let mut attn = g.attention(q, k, v);
        if let Some(hk) = hooks.as_deref_mut() {
            let (qt, kt, vt, xt) = (g.tensor(q), g.tensor(k), g.tensor(v), g.tensor(attn));
            let has_extra = kt.rows() > text_len;
            let k_text = Tensor::new(
                vec![text_len, d],
                kt.data()[..text_len * d].to_vec(),
            );
            let v_text = Tensor::new(
                vec![text_len, d],
                vt.data()[..text_len * d].to_vec(),
            );
            let (k_extra, v_extra) = if has_extra {
                let rows = kt.rows() - text_len;
                (
                    Some(Tensor::new(vec![rows, d], kt.data()[text_len * d..].to_vec())),
                    Some(Tensor::new(vec![rows, d], vt.data()[text_len * d..].to_vec())),
                )
            } else {
                (None, None)
            };
            let ctx = CrossAttnCtx {
                layer: b,
                q: &qt,
                k_text: &k_text,
                v_text: &v_text,
                k_extra: k_extra.as_ref(),
                v_extra: v_extra.as_ref(),
                x_default: &xt,
            };
            if let Some(replacement) = hk.on_cross_attention(&ctx) {
                attn = g.constant(replacement);
            }
        }
        let o = g.linear(attn, pv.get(&n("cross.wo")), pv.get(&n("cross.bo")));
        x = g.add(x, o);

        // MLP.
        let h = g.layer_norm(x, pv.get(&n("ln3.g")), pv.get(&n("ln3.b")), 1e-5);
        let h = g.linear(h, pv.get(&n("mlp.w1")), pv.get(&n("mlp.b1")));
        let h = g.silu(h);
        let o = g.linear(h, pv.get(&n("mlp.w2")), pv.get(&n("mlp.b2")));
        x = g.add(x, o);
    }

    let x = g.layer_norm(x, pv.get("ln_f.g"), pv.get("ln_f.b"), 1e-5);
    let rows = g.linear(x, pv.get("unpatch.w"), pv.get("unpatch.b"));
    let out = g.gather_elems(rows, unpatchify_map(cfg), cfg.image_shape());

    if kind == NetKind::Teacher {
        // Precondition the noise prediction: eps_hat = k1*z_t - k2*F(z_t).
        // k1/k2 make the optimal linear denoiser the zero-network solution
        // and keep the network's effective loss weight bounded across t, so
        // the shared-weight model is not forced to relearn the passthrough
        // behavior at high noise. The training objective is unchanged.
        let t = t.expect("teacher forward needs a timestep");
        let (a, s, _) = cfg.schedule().at(t).expect("timestep in range");
        let denom = a * a * SIGMA_DATA2 + s * s;
        let k1 = s / denom;
        let k2 = a * SIGMA_DATA2.sqrt() / denom.sqrt();
        return g.sub(g.scale(input, k1), g.scale(out, k2));
    }
    out
}

/// Per-pixel second moment of the scene world, used by the teacher's output
/// preconditioner.
const SIGMA_DATA2: f64 = 0.5;

/// Adapter evaluation: three 3x3 stride-2 convolutions then a linear
/// projection, producing one token per 8x8 image cell.
pub fn adapter_forward<E: Scalar>(g: &Graph<E>, cfg: &ArchConfig, pv: &ParamVars, image: Var) -> Var {
    let chans = [cfg.channels, ADAPTER_CH[0], ADAPTER_CH[1], cfg.d_model];
    let mut hw = cfg.image_size;
    let mut x = image;
    for i in 0..3 {
        let (map, out_hw) = im2col_map(chans[i], hw);
        let cols = g.gather_elems(x, map, vec![out_hw * out_hw, chans[i] * 9]);
        let y = g.linear(cols, pv.get(&format!("conv{}.w", i + 1)), pv.get(&format!("conv{}.b", i + 1)));
        if i < 2 {
            let y = g.silu(y);
            // Back to channel-major [out_ch, oh, ow] for the next im2col.
            let yt = g.transpose(y);
            x = g.reshape(yt, vec![chans[i + 1], out_hw, out_hw]);
        } else {
            x = y; // [L_img, d]
        }
        hw = out_hw;
    }
    g.linear(x, pv.get("proj.w"), pv.get("proj.b"))
}

// ---- inference wrappers ----

/// A network plus its evaluation counter.
#[derive(Debug)]
pub struct Model<E: Scalar> {
    pub kind: NetKind,
    pub cfg: ArchConfig,
    pub params: ModelParams<E>,
    evals: AtomicU64,
}

impl<E: Scalar> Model<E> {
    pub fn init(cfg: ArchConfig, kind: NetKind, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let params = ModelParams::init(&cfg, kind, &mut rng);
        Model { kind, cfg, params, evals: AtomicU64::new(0) }
    }

    pub fn from_params(cfg: ArchConfig, kind: NetKind, params: ModelParams<E>) -> Self {
        Model { kind, cfg, params, evals: AtomicU64::new(0) }
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    fn bump(&self) {
        self.evals.fetch_add(1, Ordering::Relaxed);
    }
}

pub fn clamp_image<E: Scalar>(t: &Tensor<E>) -> Tensor<E> {
    t.map(|v| v.max(E::of(-1.0)).min(E::one()))
}

/// One-step generation: a single network evaluation mapping a noise latent to
/// an image, optionally conditioned on adapter tokens, with attention hooks.
pub fn generate<E: Scalar>(
    gen: &Model<E>,
    eps: &Tensor<E>,
    prompt: &PromptTokens,
    c_i: Option<&Tensor<E>>,
    hooks: Option<&mut dyn AttentionHooks<E>>,
) -> Tensor<E> {
    assert_eq!(gen.kind, NetKind::Generator);
    gen.bump();
    let g = Graph::no_grad();
    let pv = ParamVars::load(&g, &gen.params);
    let input = g.input(eps.clone());
    let extra = c_i.map(|t| g.input(t.clone()));
    let out = backbone_forward(&g, &gen.cfg, gen.kind, &pv, input, prompt, extra, None, hooks);
    clamp_image(&g.tensor(out))
}

/// Single forward pass producing the inverted noise latent.
pub fn invert<E: Scalar>(inv: &Model<E>, image: &Tensor<E>, prompt: &PromptTokens) -> Tensor<E> {
    assert_eq!(inv.kind, NetKind::Inverter);
    inv.bump();
    let g = Graph::no_grad();
    let pv = ParamVars::load(&g, &inv.params);
    let input = g.input(image.clone());
    let out = backbone_forward(&g, &inv.cfg, inv.kind, &pv, input, prompt, None, None, None);
    g.tensor(out)
}

/// Teacher noise prediction at timestep t.
pub fn teacher_predict<E: Scalar>(
    phi: &Model<E>,
    z_t: &Tensor<E>,
    t: usize,
    prompt: &PromptTokens,
    hooks: Option<&mut dyn AttentionHooks<E>>,
) -> Result<Tensor<E>> {
    assert_eq!(phi.kind, NetKind::Teacher);
    if t > phi.cfg.t_max {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} out of range 0..={}",
            phi.cfg.t_max
        )));
    }
    phi.bump();
    let g = Graph::no_grad();
    let pv = ParamVars::load(&g, &phi.params);
    let input = g.input(z_t.clone());
    let out = backbone_forward(&g, &phi.cfg, phi.kind, &pv, input, prompt, None, Some(t), hooks);
    Ok(g.tensor(out))
}

/// Descending timestep grid for the deterministic sampler. Skips t = T itself
/// so the x0 estimate (z - sigma*eps)/alpha stays well conditioned.
pub fn sampler_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|i| t_max * i / (steps + 1)).collect()
}

/// Deterministic multi-step probability-flow sampler; `steps` network
/// evaluations.
pub fn teacher_sample<E: Scalar>(
    phi: &Model<E>,
    eps: &Tensor<E>,
    prompt: &PromptTokens,
    steps: usize,
) -> Tensor<E> {
    assert!(steps >= 1);
    let sched = phi.cfg.schedule();
    let ts = sampler_timesteps(phi.cfg.t_max, steps);
    let mut z = eps.clone();
    for (j, &t) in ts.iter().enumerate() {
        let (a, s, _) = sched.at(t).expect("grid stays in range");
        let eps_hat = teacher_predict(phi, &z, t, prompt, None).expect("grid stays in range");
        // Clamping the denoised estimate bounds the 1/alpha error
        // amplification at high-noise steps; without it early-step prediction
        // error dominates the whole trajectory.
        let x0 = clamp_image(&z.sub(&eps_hat.scale(E::of(s))).scale(E::of(1.0 / a)));
        let (a2, s2) = if j + 1 < ts.len() {
            let (a2, s2, _) = sched.at(ts[j + 1]).unwrap();
            (a2, s2)
        } else {
            (1.0, 0.0)
        };
        z = x0.scale(E::of(a2)).add(&eps_hat.scale(E::of(s2)));
    }
    clamp_image(&z)
}

/// Adapter tokens for a source image; deterministic given parameters.
pub fn adapter_encode<E: Scalar>(adapter: &Model<E>, image: &Tensor<E>) -> Tensor<E> {
    assert_eq!(adapter.kind, NetKind::Adapter);
    adapter.bump();
    let g = Graph::no_grad();
    let pv = ParamVars::load(&g, &adapter.params);
    let input = g.input(image.clone());
    let out = adapter_forward(&g, &adapter.cfg, &pv, input);
    g.tensor(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_standard_normal;

    fn prompt() -> PromptTokens {
        PromptTokens::parse("red circle large plain").unwrap()
    }

    #[test]
    fn generate_is_deterministic_and_counts_one_eval() {
        let cfg = ArchConfig::micro();
        let gen = Model::<f32>::init(cfg.clone(), NetKind::Generator, 1);
        let eps = sample_standard_normal::<f32>(&mut Rng::new(2), cfg.image_shape());
        let a = generate(&gen, &eps, &prompt(), None, None);
        let b = generate(&gen, &eps, &prompt(), None, None);
        assert_eq!(a, b);
        assert_eq!(gen.eval_count(), 2);
        assert!(a.is_finite());
    }

    #[test]
    fn adapter_path_changes_output() {
        let cfg = ArchConfig::micro();
        let gen = Model::<f32>::init(cfg.clone(), NetKind::Generator, 1);
        let adapter = Model::<f32>::init(cfg.clone(), NetKind::Adapter, 3);
        let eps = sample_standard_normal::<f32>(&mut Rng::new(2), cfg.image_shape());
        let img = sample_standard_normal::<f32>(&mut Rng::new(4), cfg.image_shape());
        let tokens = adapter_encode(&adapter, &clamp_image(&img));
        assert_eq!(tokens.shape(), &[cfg.adapter_tokens(), cfg.d_model]);
        let with = generate(&gen, &eps, &prompt(), Some(&tokens), None);
        let without = generate(&gen, &eps, &prompt(), None, None);
        assert_ne!(with, without);
    }

    #[test]
    fn adapter_on_zero_image_is_bias_only_and_input_sensitive() {
        let cfg = ArchConfig::micro();
        let adapter = Model::<f32>::init(cfg.clone(), NetKind::Adapter, 3);
        let zero = Tensor::<f32>::zeros(cfg.image_shape());
        let a = adapter_encode(&adapter, &zero);
        let b = adapter_encode(&adapter, &zero);
        assert_eq!(a, b);
        let mut one_pixel = zero.clone();
        one_pixel.data_mut()[5] = 0.5;
        let c = adapter_encode(&adapter, &one_pixel);
        assert_ne!(a, c, "perturbing a pixel must change some token");
    }

    #[test]
    fn inverter_deterministic() {
        let cfg = ArchConfig::micro();
        let inv = Model::<f32>::init(cfg.clone(), NetKind::Inverter, 5);
        let img = clamp_image(&sample_standard_normal::<f32>(&mut Rng::new(6), cfg.image_shape()));
        assert_eq!(invert(&inv, &img, &prompt()), invert(&inv, &img, &prompt()));
    }

    #[test]
    fn teacher_rejects_out_of_range_t() {
        let cfg = ArchConfig::micro();
        let phi = Model::<f32>::init(cfg.clone(), NetKind::Teacher, 7);
        let z = Tensor::<f32>::zeros(cfg.image_shape());
        assert!(teacher_predict(&phi, &z, cfg.t_max + 1, &prompt(), None).is_err());
        assert!(teacher_predict(&phi, &z, cfg.t_max, &prompt(), None).is_ok());
    }

    #[test]
    fn sampler_counts_evaluations_and_stays_finite() {
        let cfg = ArchConfig::micro();
        let phi = Model::<f32>::init(cfg.clone(), NetKind::Teacher, 7);
        let eps = sample_standard_normal::<f32>(&mut Rng::new(8), cfg.image_shape());
        let one = teacher_sample(&phi, &eps, &prompt(), 1);
        assert!(one.is_finite());
        assert_eq!(phi.eval_count(), 1);
        phi.reset_eval_count();
        let many = teacher_sample(&phi, &eps, &prompt(), 10);
        assert!(many.is_finite());
        assert_eq!(phi.eval_count(), 10);
    }

    #[test]
    fn patchify_roundtrip() {
        let cfg = ArchConfig::default();
        let fwd = patchify_map(&cfg);
        let inv = unpatchify_map(&cfg);
        for (patch_idx, &img_idx) in fwd.iter().enumerate() {
            assert_eq!(inv[img_idx], patch_idx);
        }
    }
}
