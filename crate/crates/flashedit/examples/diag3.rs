//! Scratch: per-timestep noise-prediction error of a trained teacher vs the
//! best scalar-linear baseline eps_hat = c * z_t.

use flashedit::checkpoint;
use flashedit::model::teacher_predict;
use flashedit::rng::Rng;
use flashedit::scene::generate_dataset;

fn main() {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).expect("dir"));
    let file = std::env::args().nth(2).expect("teacher file");
    let (phi, _) = checkpoint::load(&dir.join(file)).unwrap();
    let mut rng = Rng::new(4242);
    let (pairs, _) = generate_dataset(66, 16);
    let sched = phi.cfg.schedule();

    println!("   t    model    linear");
    for t in [50, 100, 200, 300, 400, 500, 600, 700, 800, 900, 950, 990] {
        let (a, s, _) = sched.at(t).unwrap();
        let mut model_mse = 0.0;
        let mut lin_mse = 0.0;
        for (x, prompt) in &pairs {
            let eps = rng.normal_tensor::<f32>(vec![3, 32, 32]);
            let z = x.scale(a as f32).add(&eps.scale(s as f32));
            let eh = teacher_predict(&phi, &z, t, prompt, None).unwrap();
            model_mse += eh
                .data()
                .iter()
                .zip(eps.data())
                .map(|(u, v)| ((u - v) as f64).powi(2))
                .sum::<f64>()
                / eh.data().len() as f64;
            // optimal scalar c for eps_hat = c z: c = s / (a^2 m2 + s^2), m2 = E x^2
            let m2: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
                / x.data().len() as f64;
            let c = s / (a * a * m2 + s * s);
            lin_mse += z
                .data()
                .iter()
                .zip(eps.data())
                .map(|(u, v)| (c * *u as f64 - *v as f64).powi(2))
                .sum::<f64>()
                / z.data().len() as f64;
        }
        let n = pairs.len() as f64;
        println!("{t:5}  {:.4}  {:.4}", model_mse / n, lin_mse / n);
    }
}
