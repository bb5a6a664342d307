//! The four training stages: teacher pretraining on a denoising objective,
//! one-step generator distillation against multi-step teacher samples,
//! Stage-1 anchoring of the inversion network and adapter on synthetic
//! (noise, image) tuples, and Stage-2 refinement on fresh scene images with
//! teacher, cycle, perceptual, and reconstruction terms.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{loss_cycle, loss_perceptual, loss_refine, loss_stage1, PerceptualNet};
use crate::model::{
    adapter_forward, backbone_forward, generate, teacher_sample, ArchConfig, Model, ModelParams,
    NetKind, ParamVars,
};
use crate::prompt::PromptTokens;
use crate::rng::{sample_standard_normal, Rng};
use crate::scene::random_prompt;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_refine: f64,
    pub lambda_cycle: f64,
    pub lambda_perc: f64,
    pub seed: u64,
    /// Size of the fixed sample pool the stage draws batches from
    /// (teacher-sample targets for distillation, tuples for Stage 1).
    pub pool: usize,
    /// Teacher sampler steps used to build distillation targets.
    pub sample_steps: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.steps == 0 || self.pool == 0 || self.sample_steps == 0 {
            return Err(Error::InvalidArgument("budgets must be at least 1".into()));
        }
        if self.lambda_refine < 0.0 || self.lambda_cycle < 0.0 || self.lambda_perc < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn teacher_default() -> Self {
        TrainConfig {
            lr: 2e-3,
            batch_size: 4,
            steps: 400,
            lambda_refine: 1.0,
            lambda_cycle: 0.5,
            lambda_perc: 0.1,
            seed: 0,
            pool: 256,
            sample_steps: 50,
        }
    }

    pub fn distill_default() -> Self {
        TrainConfig { steps: 300, pool: 48, ..Self::teacher_default() }
    }

    pub fn stage1_default() -> Self {
        TrainConfig { steps: 300, batch_size: 2, pool: 96, ..Self::teacher_default() }
    }

    pub fn stage2_default() -> Self {
        TrainConfig { lr: 5e-4, steps: 150, batch_size: 2, pool: 96, ..Self::teacher_default() }
    }
}

/// Per-step loss values, one named column per term.
#[derive(Clone, Debug)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossTrace {
    pub fn new(columns: &[&str]) -> Self {
        LossTrace { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len());
        self.rows.push(values);
    }

    fn window_mean(&self, col: usize, rows: &[Vec<f64>]) -> f64 {
        rows.iter().map(|r| r[col]).sum::<f64>() / rows.len() as f64
    }

    /// Mean of the first `w` entries of a column (the initial smoothed loss).
    pub fn smoothed_first(&self, column: &str, w: usize) -> f64 {
        let col = self.col(column);
        self.window_mean(col, &self.rows[..w.min(self.rows.len())])
    }

    /// Mean of the last `w` entries of a column (the final smoothed loss).
    pub fn smoothed_last(&self, column: &str, w: usize) -> f64 {
        let col = self.col(column);
        let n = self.rows.len();
        self.window_mean(col, &self.rows[n - w.min(n)..])
    }

    fn col(&self, name: &str) -> usize {
        self.columns
            .iter()
            .position(|c| c == name)
            .unwrap_or_else(|| panic!("no loss column named {name}"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,{}", self.columns.join(","))?;
        for (i, row) in self.rows.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{i},{}", vals.join(","))?;
        }
        Ok(())
    }
}

fn check_finite(step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { step, detail: format!("loss became {loss}") })
    }
}

fn param_refs<'a, E: Scalar>(params: &'a mut [ModelParams<E>]) -> Vec<&'a mut Tensor<E>> {
    params
        .iter_mut()
        .flat_map(|p| p.entries_mut().iter_mut().map(|(_, t)| t))
        .collect()
}

fn wrt_vars(pvs: &[&ParamVars]) -> Vec<Var> {
    pvs.iter().flat_map(|pv| pv.ordered().iter().map(|(_, v)| *v)).collect()
}

/// Denoising pretraining: predict the injected noise at a random timestep.
pub fn train_teacher<E: Scalar>(
    data: &[(Tensor<E>, PromptTokens)],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<E>, LossTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("teacher training needs data".into()));
    }
    let mut init_rng = Rng::new(cfg.seed).fork(1);
    let mut params = [ModelParams::<E>::init(arch, NetKind::Teacher, &mut init_rng)];
    let mut rng = Rng::new(cfg.seed).fork(2);
    let sched = arch.schedule();
    let mut adam = crate::optim::Adam::new(cfg.lr);
    let mut trace = LossTrace::new(&["total"]);

    for step in 0..cfg.steps {
        let g = Graph::<E>::recording();
        let pv = ParamVars::load(&g, &params[0]);
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let (img, prompt) = &data[rng.below(data.len())];
            let t = 1 + rng.below(arch.t_max);
            let (a, s, _) = sched.at(t)?;
            let eps = sample_standard_normal::<E>(&mut rng, arch.image_shape());
            let z_t = img.scale(E::of(a)).add(&eps.scale(E::of(s)));
            let input = g.input(z_t);
            let pred =
                backbone_forward(&g, arch, NetKind::Teacher, &pv, input, prompt, None, Some(t), None);
            let l = g.mse(pred, g.constant(eps));
            total = Some(match total {
                Some(acc) => g.add(acc, l),
                None => l,
            });
        }
        let loss = g.scale(total.expect("batch is non-empty"), 1.0 / cfg.batch_size as f64);
        let val = check_finite(step, g.scalar_value(loss).f64())?;
        let grads = g.backward(loss, &wrt_vars(&[&pv]))?;
        adam.step(&mut param_refs(&mut params), &grads)?;
        trace.push(vec![val]);
    }
    let [params] = params;
    Ok((params, trace))
}

/// Regress the one-step generator onto multi-step teacher samples over a
/// fixed pool of (noise, prompt, target) triples.
pub fn distill_generator<E: Scalar>(
    phi: &Model<E>,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<E>, LossTrace)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(3);
    let pool: Vec<(Tensor<E>, PromptTokens, Tensor<E>)> = (0..cfg.pool)
        .map(|_| {
            let prompt = random_prompt(&mut rng);
            let eps = sample_standard_normal::<E>(&mut rng, arch.image_shape());
            let target = teacher_sample(phi, &eps, &prompt, cfg.sample_steps);
            (eps, prompt, target)
        })
        .collect();

    let mut init_rng = Rng::new(cfg.seed).fork(4);
    let mut params = [ModelParams::<E>::init(arch, NetKind::Generator, &mut init_rng)];
    let mut adam = crate::optim::Adam::new(cfg.lr);
    let mut trace = LossTrace::new(&["total"]);
    for step in 0..cfg.steps {
        let g = Graph::<E>::recording();
        let pv = ParamVars::load(&g, &params[0]);
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let (eps, prompt, target) = &pool[rng.below(pool.len())];
            let input = g.input(eps.clone());
            let out =
                backbone_forward(&g, arch, NetKind::Generator, &pv, input, prompt, None, None, None);
            let l = g.mse(out, g.constant(target.clone()));
            total = Some(match total {
                Some(acc) => g.add(acc, l),
                None => l,
            });
        }
        let loss = g.scale(total.expect("batch is non-empty"), 1.0 / cfg.batch_size as f64);
        let val = check_finite(step, g.scalar_value(loss).f64())?;
        let grads = g.backward(loss, &wrt_vars(&[&pv]))?;
        adam.step(&mut param_refs(&mut params), &grads)?;
        trace.push(vec![val]);
    }
    let [params] = params;
    Ok((params, trace))
}

/// Supervised anchoring data: z0 is the generator's own output for eps_gt,
/// captured bit-exactly at tuple creation.
#[derive(Clone, Debug)]
pub struct Stage1Tuple<E: Scalar> {
    pub eps_gt: Tensor<E>,
    pub z0: Tensor<E>,
    pub prompt: PromptTokens,
}

pub fn make_stage1_tuples<E: Scalar>(
    gen: &Model<E>,
    n: usize,
    rng: &mut Rng,
) -> Vec<Stage1Tuple<E>> {
    (0..n)
        .map(|_| {
            let prompt = random_prompt(rng);
            let eps_gt = sample_standard_normal::<E>(rng, gen.cfg.image_shape());
            let z0 = generate(gen, &eps_gt, &prompt, None, None);
            Stage1Tuple { eps_gt, z0, prompt }
        })
        .collect()
}

/// On-graph reconstruction through the frozen generator: invert, encode
/// adapter tokens, regenerate. Returns (eps_inv, z0_hat).
fn reconstruct_on_graph<E: Scalar>(
    g: &Graph<E>,
    arch: &ArchConfig,
    pv_inv: &ParamVars,
    pv_ada: &ParamVars,
    pv_gen: &ParamVars,
    z0: Var,
    prompt: &PromptTokens,
) -> (Var, Var) {
    let eps_inv = backbone_forward(g, arch, NetKind::Inverter, pv_inv, z0, prompt, None, None, None);
    let c_i = adapter_forward(g, arch, pv_ada, z0);
    let z0_hat = backbone_forward(
        g,
        arch,
        NetKind::Generator,
        pv_gen,
        eps_inv,
        prompt,
        Some(c_i),
        None,
        None,
    );
    (eps_inv, z0_hat)
}

/// Stage 1: train the inversion network and the adapter on generator tuples.
pub fn train_stage1<E: Scalar>(
    gen: &Model<E>,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<E>, ModelParams<E>, LossTrace)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(5);
    let tuples = make_stage1_tuples(gen, cfg.pool, &mut rng);

    let mut init_rng = Rng::new(cfg.seed).fork(6);
    let mut params = [
        ModelParams::<E>::init(arch, NetKind::Inverter, &mut init_rng),
        ModelParams::<E>::init(arch, NetKind::Adapter, &mut init_rng),
    ];
    let mut adam = crate::optim::Adam::new(cfg.lr);
    let mut trace = LossTrace::new(&["total", "recon", "noise"]);
    for step in 0..cfg.steps {
        let g = Graph::<E>::recording();
        let pv_inv = ParamVars::load(&g, &params[0]);
        let pv_ada = ParamVars::load(&g, &params[1]);
        let pv_gen = ParamVars::load(&g, &gen.params);
        let mut acc: Option<(Var, Var, Var)> = None;
        for _ in 0..cfg.batch_size {
            let tup = &tuples[rng.below(tuples.len())];
            let z0 = g.input(tup.z0.clone());
            let eps_gt = g.constant(tup.eps_gt.clone());
            let (eps_inv, z0_hat) =
                reconstruct_on_graph(&g, arch, &pv_inv, &pv_ada, &pv_gen, z0, &tup.prompt);
            let recon = g.mse(z0_hat, z0);
            let noise = g.mse(eps_inv, eps_gt);
            let l = loss_stage1(&g, z0, z0_hat, eps_gt, eps_inv)?;
            acc = Some(match acc {
                Some((a, b, c)) => (g.add(a, l), g.add(b, recon), g.add(c, noise)),
                None => (l, recon, noise),
            });
        }
        let (l, r, n) = acc.expect("batch is non-empty");
        let inv_b = 1.0 / cfg.batch_size as f64;
        let loss = g.scale(l, inv_b);
        let val = check_finite(step, g.scalar_value(loss).f64())?;
        let grads = g.backward(loss, &wrt_vars(&[&pv_inv, &pv_ada]))?;
        adam.step(&mut param_refs(&mut params), &grads)?;
        trace.push(vec![
            val,
            g.scalar_value(r).f64() * inv_b,
            g.scalar_value(n).f64() * inv_b,
        ]);
    }
    let [inv, ada] = params;
    Ok((inv, ada, trace))
}

/// Stage 2: refine the inversion network and adapter on fresh scene images
/// with teacher-target, cycle, perceptual, and reconstruction terms.
pub fn train_stage2<E: Scalar>(
    inv0: ModelParams<E>,
    ada0: ModelParams<E>,
    gen: &Model<E>,
    phi: &Model<E>,
    data: &[(Tensor<E>, PromptTokens)],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<E>, ModelParams<E>, LossTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("stage 2 needs real images".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork(7);
    let perc = PerceptualNet::<E>::frozen(arch);
    let mut params = [inv0, ada0];
    let mut adam = crate::optim::Adam::new(cfg.lr);
    let mut trace = LossTrace::new(&["total", "refine", "cycle", "perc", "recon"]);
    for step in 0..cfg.steps {
        let g = Graph::<E>::recording();
        let pv_inv = ParamVars::load(&g, &params[0]);
        let pv_ada = ParamVars::load(&g, &params[1]);
        let pv_gen = ParamVars::load(&g, &gen.params);
        let mut acc: Option<[Var; 4]> = None;
        for _ in 0..cfg.batch_size {
            let (img, prompt) = &data[rng.below(data.len())];
            let z0 = g.input(img.clone());
            let (eps_inv, z0_hat) =
                reconstruct_on_graph(&g, arch, &pv_inv, &pv_ada, &pv_gen, z0, prompt);
            let t = 1 + rng.below(arch.t_max);
            let l_refine = loss_refine(&g, eps_inv, img, t, prompt, phi)?;
            let eps_cycle = backbone_forward(
                &g,
                arch,
                NetKind::Inverter,
                &pv_inv,
                z0_hat,
                prompt,
                None,
                None,
                None,
            );
            let l_cycle = loss_cycle(&g, eps_inv, eps_cycle)?;
            let l_perc = loss_perceptual(&g, &perc, z0, z0_hat)?;
            let l_recon = g.mse(z0_hat, z0);
            acc = Some(match acc {
                Some([a, b, c, d]) => [
                    g.add(a, l_refine),
                    g.add(b, l_cycle),
                    g.add(c, l_perc),
                    g.add(d, l_recon),
                ],
                None => [l_refine, l_cycle, l_perc, l_recon],
            });
        }
        let [lr_, lc, lp, lm] = acc.expect("batch is non-empty");
        let inv_b = 1.0 / cfg.batch_size as f64;
        let weighted = g.add(
            g.add(g.scale(lr_, cfg.lambda_refine), g.scale(lc, cfg.lambda_cycle)),
            g.add(g.scale(lp, cfg.lambda_perc), lm),
        );
        let loss = g.scale(weighted, inv_b);
        let val = check_finite(step, g.scalar_value(loss).f64())?;
        let grads = g.backward(loss, &wrt_vars(&[&pv_inv, &pv_ada]))?;
        adam.step(&mut param_refs(&mut params), &grads)?;
        trace.push(vec![
            val,
            g.scalar_value(lr_).f64() * inv_b,
            g.scalar_value(lc).f64() * inv_b,
            g.scalar_value(lp).f64() * inv_b,
            g.scalar_value(lm).f64() * inv_b,
        ]);
    }
    let [inv, ada] = params;
    Ok((inv, ada, trace))
}
