//! Scratch: dump teacher samples for visual inspection.

use flashedit::checkpoint;
use flashedit::model::teacher_sample;
use flashedit::prompt::PromptTokens;
use flashedit::rng::Rng;

fn main() {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).expect("dir"));
    let file = std::env::args().nth(2).expect("teacher file");
    let (phi, _) = checkpoint::load(&dir.join(&file)).unwrap();
    let mut rng = Rng::new(777);
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
        let s = teacher_sample(&phi, &eps, &p, 50);
        flashedit::ppm::write_ppm(&dir.join(format!("ts{i}.ppm")), &s).unwrap();
    }
    println!("done");
}
