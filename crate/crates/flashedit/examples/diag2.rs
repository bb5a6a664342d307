//! Scratch diagnostics: denoised-estimate quality of the teacher across
//! timesteps and sampling-trajectory prompt sensitivity.

use flashedit::checkpoint;
use flashedit::model::{teacher_predict, teacher_sample};
use flashedit::prompt::PromptTokens;
use flashedit::rng::Rng;
use flashedit::scene::generate_dataset;

fn main() {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).expect("dir"));
    let file = std::env::args().nth(2).expect("teacher file");
    let (phi, _) = checkpoint::load(&dir.join(file)).unwrap();
    let mut rng = Rng::new(321);
    let (pairs, _) = generate_dataset(55, 8);
    let sched = phi.cfg.schedule();

    for t in [200, 400, 600, 800, 900, 950, 980] {
        let (a, s, _) = sched.at(t).unwrap();
        let mut p = 0.0;
        for (x, prompt) in &pairs {
            let eps = rng.normal_tensor::<f32>(vec![3, 32, 32]);
            let z = x.scale(a as f32).add(&eps.scale(s as f32));
            let eh = teacher_predict(&phi, &z, t, prompt, None).unwrap();
            let x0 = z.sub(&eh.scale(s as f32)).scale(1.0 / a as f32);
            let mse: f64 = x0
                .data()
                .iter()
                .zip(x.data())
                .map(|(u, v)| ((u - v) as f64).powi(2))
                .sum::<f64>()
                / x0.data().len() as f64;
            p += 10.0 * (4.0 / mse).log10();
        }
        println!("t={t:4}  x0 PSNR {:.2}", p / pairs.len() as f64);
    }

    // prompt sensitivity of full 50-step samples
    let pa = PromptTokens::parse("circle red large plain").unwrap();
    let pb = PromptTokens::parse("square blue small dots").unwrap();
    let mut d = 0.0;
    for _ in 0..4 {
        let eps = rng.normal_tensor::<f32>(vec![3, 32, 32]);
        let sa = teacher_sample(&phi, &eps, &pa, 50);
        let sb = teacher_sample(&phi, &eps, &pb, 50);
        d += sa
            .data()
            .iter()
            .zip(sb.data())
            .map(|(u, v)| (u - v).abs() as f64)
            .sum::<f64>()
            / sa.data().len() as f64;
    }
    println!("50-step sample prompt sensitivity: {:.4}", d / 4.0);
}
