//! Evaluation: per-case edit metrics with exact ground truth, the component
//! ablation, and the speedup benchmark against a multi-step teacher baseline.

use crate::bg_shield::{feather_mask, ShieldMode, TokenMask};
use crate::error::{Error, Result};
use crate::hooks::RecordingHooks;
use crate::metrics::{attribute_alignment, compute_metrics};
use crate::model::{sampler_timesteps, teacher_predict, Model, NetKind};
use crate::pipeline::{
    build_cache, edit_with_variant, token_mask_from_pixels, EditRequest, EditStack, EditVariant,
    ShieldHooks, DEFAULT_K, DEFAULT_SIGMA,
};
use crate::prompt::PromptTokens;
use crate::scene::{EditCase, SIDE};
use crate::tensor::{Scalar, Tensor};
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Evaluation knobs: mask source and shield configuration.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub use_gt_mask: bool,
    pub sigma_feather: f64,
    pub k_ssca: usize,
    pub mode: ShieldMode,
    pub variant: EditVariant,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            use_gt_mask: true,
            sigma_feather: DEFAULT_SIGMA,
            k_ssca: DEFAULT_K,
            mode: ShieldMode::Blended,
            variant: EditVariant::Full,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseMetrics {
    pub case: usize,
    pub kind: String,
    /// Background-region metrics of the edit against the source image.
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Fraction of target attributes the edited image decodes to.
    pub alignment: f64,
    /// IoU of the token mask used against the ground-truth token mask.
    pub mask_iou: f64,
    /// Full-image reconstruction PSNR against the source.
    pub recon_psnr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub label: String,
    pub config_digest: String,
    pub cases: Vec<CaseMetrics>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_alignment: f64,
    pub mean_mask_iou: f64,
    pub mean_recon_psnr: f64,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    fn aggregate(label: &str, digest: String, cases: Vec<CaseMetrics>, secs: f64) -> Self {
        let n = cases.len().max(1) as f64;
        let mean = |f: fn(&CaseMetrics) -> f64| cases.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            label: label.to_string(),
            config_digest: digest,
            mean_mse: mean(|c| c.mse),
            mean_psnr: mean(|c| c.psnr),
            mean_ssim: mean(|c| c.ssim),
            mean_alignment: mean(|c| c.alignment),
            mean_mask_iou: mean(|c| c.mask_iou),
            mean_recon_psnr: mean(|c| c.recon_psnr),
            wall_clock_s: secs,
            cases,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "case,kind,mse,psnr,ssim,alignment,mask_iou,recon_psnr")?;
        for c in &self.cases {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                c.case, c.kind, c.mse, c.psnr, c.ssim, c.alignment, c.mask_iou, c.recon_psnr
            )?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-case image artifacts for report dumps.
pub struct CaseArtifacts<E: Scalar> {
    pub edited: Tensor<E>,
    pub reconstruction: Tensor<E>,
    pub token_mask: TokenMask,
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn case_request<E: Scalar>(case: &EditCase, opts: &EvalOptions) -> EditRequest<E> {
    let mut req = EditRequest::new(
        case.source_image.to_precision::<E>(),
        case.src_prompt.clone(),
        case.tgt_prompt.clone(),
    );
    if opts.use_gt_mask {
        req.pixel_mask = Some(case.gt_mask.clone());
    }
    req.sigma_feather = opts.sigma_feather;
    req.k_ssca = opts.k_ssca;
    req.mode = opts.mode;
    req
}

/// Edit every case and score it with exact ground truth.
pub fn run_eval<E: Scalar>(
    stack: &EditStack<E>,
    cases: &[EditCase],
    opts: &EvalOptions,
    label: &str,
) -> Result<(MetricsReport, Vec<CaseArtifacts<E>>)> {
    if stack.arch.image_size != SIDE {
        return Err(Error::InvalidArgument("evaluation runs at the scene scale".into()));
    }
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cases.len());
    let mut artifacts = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let req = case_request::<E>(case, opts);
        let res = edit_with_variant(stack, &req, opts.variant)?;
        let source = case.source_image.to_precision::<E>();
        let bg = case.background();
        let m = compute_metrics(&res.edited, &source, &bg)?;
        let recon = compute_metrics(&res.reconstruction, &source, &vec![true; SIDE * SIDE])?;
        let gt_tokens = token_mask_from_pixels(&case.gt_mask, &stack.arch)?;
        rows.push(CaseMetrics {
            case: i,
            kind: format!("{:?}", case.kind),
            mse: m.mse,
            psnr: m.psnr,
            ssim: m.ssim,
            alignment: attribute_alignment(&res.edited, &case.target),
            mask_iou: iou(res.token_mask.bits(), gt_tokens.bits()),
            recon_psnr: recon.psnr,
        });
        artifacts.push(CaseArtifacts {
            edited: res.edited,
            reconstruction: res.reconstruction,
            token_mask: res.token_mask,
        });
    }
    let report =
        MetricsReport::aggregate(label, stack.arch.digest(), rows, start.elapsed().as_secs_f64());
    Ok((report, artifacts))
}

/// The three-row component ablation: inversion only, plus the background
/// shield, plus sparsified cross-attention.
pub fn run_ablation<E: Scalar>(
    stack: &EditStack<E>,
    cases: &[EditCase],
    opts: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    let rows = [
        (EditVariant::OsieOnly, "osie"),
        (EditVariant::WithShield, "osie+bgshield"),
        (EditVariant::Full, "osie+bgshield+ssca"),
    ];
    rows.iter()
        .map(|&(variant, label)| {
            let opts = EvalOptions { variant, ..*opts };
            Ok(run_eval(stack, cases, &opts, label)?.0)
        })
        .collect()
}

/// Multi-step baseline: DDIM inversion through the teacher (S evaluations),
/// then S-step shielded sampling where every step runs a recorded source pass
/// and a shielded edit pass (2S evaluations).
pub fn baseline_edit<E: Scalar>(
    phi: &Model<E>,
    image: &Tensor<E>,
    src_prompt: &PromptTokens,
    tgt_prompt: &PromptTokens,
    pixel_mask: &[bool],
    steps: usize,
    sigma: f64,
    k_ssca: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    assert_eq!(phi.kind, NetKind::Teacher);
    let sched = phi.cfg.schedule();
    let grid = sampler_timesteps(phi.cfg.t_max, steps);
    let mask = token_mask_from_pixels(pixel_mask, &phi.cfg)?;
    let alpha = feather_mask::<E>(&mask, sigma)?;

    // DDIM inversion: walk the sampler grid upward from the clean image.
    let mut z = image.clone();
    let mut t_cur = 0usize;
    for &t_next in grid.iter().rev() {
        let (a, s, _) = sched.at(t_cur)?;
        let eps_hat = teacher_predict(phi, &z, t_cur, src_prompt, None)?;
        let x0 = z.sub(&eps_hat.scale(E::of(s))).scale(E::of(1.0 / a));
        let (a2, s2, _) = sched.at(t_next)?;
        z = x0.scale(E::of(a2)).add(&eps_hat.scale(E::of(s2)));
        t_cur = t_next;
    }

    // Paired shielded sampling back down the grid.
    let mut z_src = z.clone();
    let mut z_edit = z;
    for (j, &t) in grid.iter().enumerate() {
        let (a, s, _) = sched.at(t)?;
        let (a2, s2) = if j + 1 < grid.len() {
            let (a2, s2, _) = sched.at(grid[j + 1])?;
            (a2, s2)
        } else {
            (1.0, 0.0)
        };
        let mut rec = RecordingHooks::new();
        let eps_src = teacher_predict(phi, &z_src, t, src_prompt, Some(&mut rec))?;
        let cache = build_cache(rec, mask.clone())?;
        let mut hooks = ShieldHooks {
            cache: &cache,
            alpha: &alpha,
            mode: ShieldMode::Blended,
            k_ssca,
            cross_enabled: true,
        };
        let eps_edit = teacher_predict(phi, &z_edit, t, tgt_prompt, Some(&mut hooks))?;
        let step = |zc: &Tensor<E>, eps: &Tensor<E>| {
            let x0 = zc.sub(&eps.scale(E::of(s))).scale(E::of(1.0 / a));
            x0.scale(E::of(a2)).add(&eps.scale(E::of(s2)))
        };
        z_src = step(&z_src, &eps_src);
        z_edit = step(&z_edit, &eps_edit);
    }
    Ok((
        crate::model::clamp_image(&z_edit),
        crate::model::clamp_image(&z_src),
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub runs: usize,
    pub baseline_steps: usize,
    pub flash_median_s: f64,
    pub baseline_median_s: f64,
    pub wall_clock_speedup: f64,
    pub flash_evals: u64,
    pub baseline_evals: u64,
    pub eval_ratio: f64,
}

impl BenchReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Wall-clock and evaluation-count comparison of the one-step edit against
/// the multi-step teacher baseline. Medians over `runs` timed repetitions
/// after 3 discarded warmups; everything runs on a single thread.
pub fn run_benchmark<E: Scalar>(
    stack: &EditStack<E>,
    phi: &Model<E>,
    cases: &[EditCase],
    steps: usize,
    runs: usize,
) -> Result<BenchReport> {
    if cases.is_empty() || runs == 0 {
        return Err(Error::InvalidArgument("benchmark needs cases and runs".into()));
    }
    let opts = EvalOptions::default();
    let warmups = 3;
    let mut flash_times = Vec::with_capacity(runs);
    let mut base_times = Vec::with_capacity(runs);

    stack.reset_eval_counts();
    let case = &cases[0];
    let req = case_request::<E>(case, &opts);
    edit_with_variant(stack, &req, EditVariant::Full)?;
    let flash_evals = stack.backbone_evals() + stack.adapter_evals();

    for i in 0..warmups + runs {
        let case = &cases[i % cases.len()];
        let req = case_request::<E>(case, &opts);
        let t = Instant::now();
        edit_with_variant(stack, &req, EditVariant::Full)?;
        if i >= warmups {
            flash_times.push(t.elapsed().as_secs_f64());
        }
    }

    phi.reset_eval_count();
    let case = &cases[0];
    let src = case.source_image.to_precision::<E>();
    baseline_edit(
        phi,
        &src,
        &case.src_prompt,
        &case.tgt_prompt,
        &case.gt_mask,
        steps,
        opts.sigma_feather,
        opts.k_ssca,
    )?;
    let baseline_evals = phi.eval_count();

    for i in 0..warmups + runs {
        let case = &cases[i % cases.len()];
        let src = case.source_image.to_precision::<E>();
        let t = Instant::now();
        baseline_edit(
            phi,
            &src,
            &case.src_prompt,
            &case.tgt_prompt,
            &case.gt_mask,
            steps,
            opts.sigma_feather,
            opts.k_ssca,
        )?;
        if i >= warmups {
            base_times.push(t.elapsed().as_secs_f64());
        }
    }

    let flash_median_s = median(flash_times);
    let baseline_median_s = median(base_times);
    Ok(BenchReport {
        runs,
        baseline_steps: steps,
        flash_median_s,
        baseline_median_s,
        wall_clock_speedup: baseline_median_s / flash_median_s,
        flash_evals,
        baseline_evals,
        eval_ratio: baseline_evals as f64 / flash_evals as f64,
    })
}
