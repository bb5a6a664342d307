//! Command-line front end: dataset generation, the four training stages,
//! single edits, and the evaluation/ablation/benchmark runners.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use flashedit::bg_shield::ShieldMode;
use flashedit::checkpoint;
use flashedit::error::{Error, Result};
use flashedit::eval::{run_ablation, run_benchmark, run_eval, EvalOptions};
use flashedit::model::{ArchConfig, Model, NetKind};
use flashedit::pipeline::{edit, EditRequest, EditStack, DEFAULT_K, DEFAULT_SIGMA};
use flashedit::ppm::{read_mask, read_ppm, write_mask, write_ppm};
use flashedit::prompt::PromptTokens;
use flashedit::scene::{generate_dataset, SIDE};
use flashedit::train::{
    distill_generator, train_stage1, train_stage2, train_teacher, TrainConfig,
};

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
struct AppConfig {
    arch: ArchConfig,
    teacher: TrainConfig,
    distill: TrainConfig,
    stage1: TrainConfig,
    stage2: TrainConfig,
    dataset_seed: u64,
    train_images: usize,
    eval_cases: usize,
    sigma_feather: f64,
    k_ssca: usize,
    mode: ShieldMode,
    bench_steps: usize,
    bench_runs: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            arch: ArchConfig::default(),
            teacher: TrainConfig::teacher_default(),
            distill: TrainConfig::distill_default(),
            stage1: TrainConfig::stage1_default(),
            stage2: TrainConfig::stage2_default(),
            dataset_seed: 7,
            train_images: 128,
            eval_cases: 100,
            sigma_feather: DEFAULT_SIGMA,
            k_ssca: DEFAULT_K,
            mode: ShieldMode::Blended,
            bench_steps: 50,
            bench_runs: 20,
        }
    }
}

#[derive(Parser)]
#[command(name = "flashedit", about = "one-step text-guided image editing on a synthetic scene world")]
struct Cli {
    /// JSON configuration file; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset: training pairs and edit cases.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain the multi-step teacher.
    TrainTeacher {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Distill the one-step generator from the teacher.
    DistillGen {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Stage 1: anchor the inversion network and adapter on generator tuples.
    TrainStage1 {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out_inverter: PathBuf,
        #[arg(long)]
        out_adapter: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Stage 2: refine on fresh scene images with the full objective.
    TrainStage2 {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        inverter: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out_inverter: PathBuf,
        #[arg(long)]
        out_adapter: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// One edit: source image plus prompts in, edited image plus JSON sidecar out.
    Edit {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        inverter: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        src_image: PathBuf,
        #[arg(long)]
        src_prompt: String,
        #[arg(long)]
        tgt_prompt: String,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// blended | literal
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the trained stack over the edit-case suite.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        inverter: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Derive masks from cross-attention instead of using ground truth.
        #[arg(long)]
        derived_masks: bool,
    },
    /// The three-row component ablation.
    Ablate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        inverter: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Wall-clock and evaluation-count comparison against the teacher baseline.
    Bench {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        inverter: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg: AppConfig = match &cli.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset_seed = seed;
        cfg.teacher.seed = seed;
        cfg.distill.seed = seed + 1;
        cfg.stage1.seed = seed + 2;
        cfg.stage2.seed = seed + 3;
    }
    Ok(cfg)
}

fn load_model(path: &Path, want: NetKind) -> Result<Model<f32>> {
    let (model, meta) = checkpoint::load(path)?;
    if model.kind != want {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} (stage {}), expected {want:?}",
            path.display(),
            model.kind,
            meta.stage
        )));
    }
    Ok(model)
}

fn load_stack(gen: &Path, inverter: &Path, adapter: &Path) -> Result<EditStack<f32>> {
    EditStack::new(
        load_model(gen, NetKind::Generator)?,
        load_model(inverter, NetKind::Inverter)?,
        load_model(adapter, NetKind::Adapter)?,
    )
}

fn write_trace(trace: &flashedit::train::LossTrace, path: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        trace.write_csv(p)?;
        println!("loss trace -> {}", p.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::GenData { out, n } => {
            let n = n.unwrap_or(cfg.eval_cases);
            let (pairs, cases) = generate_dataset(cfg.dataset_seed, n);
            std::fs::create_dir_all(out.join("images"))?;
            std::fs::create_dir_all(out.join("cases"))?;
            let mut prompts = String::from("index,prompt\n");
            for (i, (img, prompt)) in pairs.iter().enumerate() {
                write_ppm(&out.join(format!("images/{i:04}.ppm")), img)?;
                prompts.push_str(&format!("{i},{}\n", prompt.words()));
            }
            std::fs::write(out.join("prompts.csv"), prompts)?;
            let mut index = String::from("index,kind,src_prompt,tgt_prompt\n");
            for (i, case) in cases.iter().enumerate() {
                write_ppm(&out.join(format!("cases/{i:04}_src.ppm")), &case.source_image)?;
                write_ppm(&out.join(format!("cases/{i:04}_gt.ppm")), &case.edited_gt)?;
                write_mask(&out.join(format!("cases/{i:04}_mask.ppm")), &case.gt_mask, SIDE, SIDE)?;
                index.push_str(&format!(
                    "{i},{:?},{},{}\n",
                    case.kind,
                    case.src_prompt.words(),
                    case.tgt_prompt.words()
                ));
            }
            std::fs::write(out.join("cases.csv"), index)?;
            println!("dataset ({n} pairs, {n} cases) -> {}", out.display());
        }
        Cmd::TrainTeacher { out, trace } => {
            let (pairs, _) = generate_dataset(cfg.dataset_seed, cfg.train_images);
            let (params, tr) = train_teacher(&pairs, &cfg.arch, &cfg.teacher)?;
            let model = Model::from_params(cfg.arch.clone(), NetKind::Teacher, params);
            checkpoint::save(&out, &model, "teacher")?;
            write_trace(&tr, &trace)?;
            println!("teacher -> {} (final loss {:.4})", out.display(), tr.smoothed_last("total", 20));
        }
        Cmd::DistillGen { teacher, out, trace } => {
            let phi = load_model(&teacher, NetKind::Teacher)?;
            let (params, tr) = distill_generator(&phi, &cfg.arch, &cfg.distill)?;
            let model = Model::from_params(cfg.arch.clone(), NetKind::Generator, params);
            checkpoint::save(&out, &model, "distilled")?;
            write_trace(&tr, &trace)?;
            println!("generator -> {} (final loss {:.4})", out.display(), tr.smoothed_last("total", 20));
        }
        Cmd::TrainStage1 { gen, out_inverter, out_adapter, trace } => {
            let gen = load_model(&gen, NetKind::Generator)?;
            let (inv, ada, tr) = train_stage1(&gen, &cfg.arch, &cfg.stage1)?;
            checkpoint::save(
                &out_inverter,
                &Model::from_params(cfg.arch.clone(), NetKind::Inverter, inv),
                "stage1",
            )?;
            checkpoint::save(
                &out_adapter,
                &Model::from_params(cfg.arch.clone(), NetKind::Adapter, ada),
                "stage1",
            )?;
            write_trace(&tr, &trace)?;
            println!(
                "stage 1 -> {} / {} (final loss {:.4})",
                out_inverter.display(),
                out_adapter.display(),
                tr.smoothed_last("total", 20)
            );
        }
        Cmd::TrainStage2 {
            gen,
            teacher,
            inverter,
            adapter,
            out_inverter,
            out_adapter,
            trace,
        } => {
            let gen = load_model(&gen, NetKind::Generator)?;
            let phi = load_model(&teacher, NetKind::Teacher)?;
            let inv0 = load_model(&inverter, NetKind::Inverter)?;
            let ada0 = load_model(&adapter, NetKind::Adapter)?;
            let (pairs, _) = generate_dataset(cfg.dataset_seed + 1, cfg.train_images);
            let (inv, ada, tr) =
                train_stage2(inv0.params, ada0.params, &gen, &phi, &pairs, &cfg.arch, &cfg.stage2)?;
            checkpoint::save(
                &out_inverter,
                &Model::from_params(cfg.arch.clone(), NetKind::Inverter, inv),
                "stage2",
            )?;
            checkpoint::save(
                &out_adapter,
                &Model::from_params(cfg.arch.clone(), NetKind::Adapter, ada),
                "stage2",
            )?;
            write_trace(&tr, &trace)?;
            println!(
                "stage 2 -> {} / {} (final loss {:.4})",
                out_inverter.display(),
                out_adapter.display(),
                tr.smoothed_last("total", 20)
            );
        }
        Cmd::Edit {
            gen,
            inverter,
            adapter,
            src_image,
            src_prompt,
            tgt_prompt,
            mask,
            sigma,
            k,
            mode,
            out,
        } => {
            let stack = load_stack(&gen, &inverter, &adapter)?;
            let image = read_ppm::<f32>(&src_image)?;
            let mut req = EditRequest::new(
                image,
                PromptTokens::parse(&src_prompt)?,
                PromptTokens::parse(&tgt_prompt)?,
            );
            if let Some(mask_path) = mask {
                let (bits, h, w) = read_mask(&mask_path)?;
                if (h, w) != (SIDE, SIDE) {
                    return Err(Error::InvalidShape(format!("mask must be {SIDE}x{SIDE}")));
                }
                req.pixel_mask = Some(bits);
            }
            req.sigma_feather = sigma.unwrap_or(cfg.sigma_feather);
            req.k_ssca = k.unwrap_or(cfg.k_ssca);
            req.mode = match mode.as_deref() {
                None => cfg.mode,
                Some("blended") => ShieldMode::Blended,
                Some("literal") => ShieldMode::Literal,
                Some(other) => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown mode {other}; use blended or literal"
                    )))
                }
            };
            let res = edit(&stack, &req)?;
            write_ppm(&out, &res.edited)?;
            let sidecar = out.with_extension("json");
            let t = &res.timings;
            std::fs::write(
                &sidecar,
                serde_json::to_string_pretty(&serde_json::json!({
                    "backbone_evals": t.backbone_evals,
                    "adapter_evals": t.adapter_evals,
                    "invert_ms": t.invert.as_secs_f64() * 1e3,
                    "adapter_ms": t.adapter.as_secs_f64() * 1e3,
                    "mask_ms": t.mask.as_secs_f64() * 1e3,
                    "source_pass_ms": t.source_pass.as_secs_f64() * 1e3,
                    "edit_pass_ms": t.edit_pass.as_secs_f64() * 1e3,
                    "mask_derived": res.mask_derived,
                    "identity_noop": res.identity_noop,
                    "empty_mask_noop": res.empty_mask_noop,
                }))?,
            )?;
            println!("edited image -> {} (details in {})", out.display(), sidecar.display());
        }
        Cmd::Eval { gen, inverter, adapter, out_dir, n, derived_masks } => {
            let stack = load_stack(&gen, &inverter, &adapter)?;
            let (_, cases) = generate_dataset(cfg.dataset_seed + 2, n.unwrap_or(cfg.eval_cases));
            let opts = EvalOptions {
                use_gt_mask: !derived_masks,
                sigma_feather: cfg.sigma_feather,
                k_ssca: cfg.k_ssca,
                mode: cfg.mode,
                ..EvalOptions::default()
            };
            let (report, artifacts) = run_eval(&stack, &cases, &opts, "eval")?;
            std::fs::create_dir_all(out_dir.join("cases"))?;
            report.write_csv(&out_dir.join("cases.csv"))?;
            report.write_json(&out_dir.join("summary.json"))?;
            for (i, art) in artifacts.iter().enumerate() {
                write_ppm(&out_dir.join(format!("cases/{i:04}_edited.ppm")), &art.edited)?;
                write_ppm(&out_dir.join(format!("cases/{i:04}_recon.ppm")), &art.reconstruction)?;
            }
            println!(
                "eval over {} cases -> {} (bg PSNR {:.2} dB, alignment {:.3})",
                report.cases.len(),
                out_dir.display(),
                report.mean_psnr,
                report.mean_alignment
            );
        }
        Cmd::Ablate { gen, inverter, adapter, out_dir, n } => {
            let stack = load_stack(&gen, &inverter, &adapter)?;
            let (_, cases) = generate_dataset(cfg.dataset_seed + 2, n.unwrap_or(cfg.eval_cases));
            let opts = EvalOptions {
                sigma_feather: cfg.sigma_feather,
                k_ssca: cfg.k_ssca,
                mode: cfg.mode,
                ..EvalOptions::default()
            };
            let rows = run_ablation(&stack, &cases, &opts)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut summary = String::from("row,mean_psnr,mean_ssim,mean_mse,mean_alignment\n");
            for row in &rows {
                row.write_csv(&out_dir.join(format!("{}.csv", row.label)))?;
                row.write_json(&out_dir.join(format!("{}.json", row.label)))?;
                summary.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.label, row.mean_psnr, row.mean_ssim, row.mean_mse, row.mean_alignment
                ));
                println!(
                    "{:<20} bg PSNR {:.2} dB, alignment {:.3}",
                    row.label, row.mean_psnr, row.mean_alignment
                );
            }
            std::fs::write(out_dir.join("ablation.csv"), summary)?;
        }
        Cmd::Bench { gen, inverter, adapter, teacher, out, steps, runs } => {
            let stack = load_stack(&gen, &inverter, &adapter)?;
            let phi = load_model(&teacher, NetKind::Teacher)?;
            let (_, cases) = generate_dataset(cfg.dataset_seed + 3, 8);
            let report = run_benchmark(
                &stack,
                &phi,
                &cases,
                steps.unwrap_or(cfg.bench_steps),
                runs.unwrap_or(cfg.bench_runs),
            )?;
            report.write_json(&out)?;
            println!(
                "speedup {:.1}x wall-clock, {:.1}x evaluations ({} vs {}) -> {}",
                report.wall_clock_speedup,
                report.eval_ratio,
                report.baseline_evals,
                report.flash_evals,
                out.display()
            );
        }
    }
    Ok(())
}
