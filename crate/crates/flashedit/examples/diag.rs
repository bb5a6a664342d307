//! Scratch diagnostics for calibration: how strongly the generator responds
//! to the prompt versus the adapter conditioning.

use flashedit::checkpoint;
use flashedit::model::{adapter_encode, generate, invert};
use flashedit::prompt::PromptTokens;
use flashedit::rng::Rng;
use flashedit::scene::generate_dataset;

fn main() {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).expect("dir"));
    let arg = |i: usize, d: &str| std::env::args().nth(i).unwrap_or_else(|| d.to_string());
    let (gen, _) = checkpoint::load(&dir.join(arg(3, "gen6.ck"))).unwrap();
    let (inv, _) = checkpoint::load(&dir.join(arg(4, "inv6b.ck"))).unwrap();
    let (ada, _) = checkpoint::load(&dir.join(arg(5, "ada6b.ck"))).unwrap();
    let mut rng = Rng::new(123);
    let (_, cases) = generate_dataset(99, 16);

    // 1. prompt sensitivity of G without adapter: swap one word, measure mean abs diff
    let mut d_prompt = 0.0;
    let mut d_prompt_ada = 0.0;
    for case in &cases {
        let eps = rng.normal_tensor::<f32>(vec![3, 32, 32]);
        let a = generate(&gen, &eps, &case.src_prompt, None, None);
        let b = generate(&gen, &eps, &case.tgt_prompt, None, None);
        d_prompt += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.data().len() as f64;
        let c = adapter_encode(&ada, &case.source_image);
        let a2 = generate(&gen, &eps, &case.src_prompt, Some(&c), None);
        let b2 = generate(&gen, &eps, &case.tgt_prompt, Some(&c), None);
        d_prompt_ada += a2
            .data()
            .iter()
            .zip(b2.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a2.data().len() as f64;
    }
    println!("G prompt sensitivity (no adapter):   {:.4}", d_prompt / cases.len() as f64);
    println!("G prompt sensitivity (with adapter): {:.4}", d_prompt_ada / cases.len() as f64);

    // 2. recon PSNR with and without adapter, plus eps stats
    let mut p_with = 0.0;
    let mut p_without = 0.0;
    let mut var = 0.0;
    for case in &cases {
        let x = &case.source_image;
        let e = invert(&inv, x, &case.src_prompt);
        let m: f64 = e.data().iter().map(|v| *v as f64).sum::<f64>() / e.data().len() as f64;
        var += e.data().iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>()
            / e.data().len() as f64;
        let c = adapter_encode(&ada, x);
        let r1 = generate(&gen, &e, &case.src_prompt, Some(&c), None);
        let r0 = generate(&gen, &e, &case.src_prompt, None, None);
        let psnr = |r: &flashedit::tensor::Tensor<f32>| {
            let mse: f64 = r
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / r.data().len() as f64;
            10.0 * (4.0 / mse).log10()
        };
        p_with += psnr(&r1);
        p_without += psnr(&r0);
    }
    let n = cases.len() as f64;
    println!("recon PSNR with adapter:    {:.2}", p_with / n);
    println!("recon PSNR without adapter: {:.2}", p_without / n);
    println!("eps_inv variance:           {:.3}", var / n);

    // 3. dump teacher and generator samples for inspection
    let teacher_file =
        std::env::args().nth(2).unwrap_or_else(|| "teacher6.ck".to_string());
    let (phi, _) = checkpoint::load(&dir.join(teacher_file)).unwrap();
    let eps = rng.normal_tensor::<f32>(vec![3, 32, 32]);
    for (i, words) in [
        "circle red large plain",
        "square blue large plain",
        "triangle yellow large plain",
        "circle white small dots",
    ]
    .iter()
    .enumerate()
    {
        let p = PromptTokens::parse(words).unwrap();
        let t = flashedit::model::teacher_sample(&phi, &eps, &p, 50);
        let g = generate(&gen, &eps, &p, None, None);
        flashedit::ppm::write_ppm(&dir.join(format!("diag_t{i}.ppm")), &t).unwrap();
        flashedit::ppm::write_ppm(&dir.join(format!("diag_g{i}.ppm")), &g).unwrap();
    }
    println!("sample dumps written");

    // 4. does the teacher's noise prediction depend on the prompt at all?
    let z = rng.normal_tensor::<f32>(vec![3, 32, 32]);
    let pa = PromptTokens::parse("circle red large plain").unwrap();
    let pb = PromptTokens::parse("square blue small dots").unwrap();
    for t in [100, 500, 900] {
        let ea = flashedit::model::teacher_predict(&phi, &z, t, &pa, None).unwrap();
        let eb = flashedit::model::teacher_predict(&phi, &z, t, &pb, None).unwrap();
        let d: f64 = ea
            .data()
            .iter()
            .zip(eb.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / ea.data().len() as f64;
        println!("teacher prompt sensitivity at t={t}: {d:.4}");
    }
}
