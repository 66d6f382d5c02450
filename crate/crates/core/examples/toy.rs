//! Trains the toy configuration on synthetic data and prints retrieval
//! metrics. Usage: `cargo run --release --example toy -- [steps] [seed] [arch]`.

use fusionreid::config::{EvalPolicy, RunConfig};
use fusionreid::data::Split;
use fusionreid::evaluator::{evaluate, extract_features};
use fusionreid::model::{Architecture, FusionReid};
use fusionreid::trainer::Trainer;

fn main() -> fusionreid::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let arch = match args.get(3).map(String::as_str) {
        Some("cnn") => Architecture::CnnOnly,
        Some("vit") => Architecture::VitOnly,
        _ => Architecture::Fused,
    };
    let mut cfg = RunConfig::toy();
    cfg.seed = seed;
    cfg.model.architecture = arch;
    cfg.train.max_steps = Some(steps);
    let dataset = cfg.dataset()?;
    let mut trainer = Trainer::new(FusionReid::new(cfg.model.clone())?, cfg.optim.clone(), cfg.train.clone(), dataset, seed)?;
    let total = trainer.total_steps();
    let start = std::time::Instant::now();
    for _ in 0..total {
        let m = trainer.step()?;
        if m.step % 20 == 0 || m.step + 1 == total {
            println!("step {:4} lr {:.5} loss {:.4} (ce {:.4}, tri {:.4})", m.step, m.lr, m.total, m.ce_sum, m.tri_sum);
        }
    }
    println!("trained {total} steps in {:.1} s", start.elapsed().as_secs_f64());
    for policy in [EvalPolicy::TrainVsHeldOut, EvalPolicy::QueryGallery] {
        let (qs, gs) = policy.splits();
        let data = &trainer.data.dataset;
        let pick = |splits: &[Split]| data.samples.iter().filter(|s| splits.contains(&s.split)).collect::<Vec<_>>();
        let (q, g) = (pick(qs), pick(gs));
        let stats = trainer.data.stats;
        let qf = extract_features(&trainer.model, &mut trainer.store, &stats, &q)?;
        let gf = extract_features(&trainer.model, &mut trainer.store, &stats, &g)?;
        println!("{policy:?}: {}", evaluate(&qf, &gf)?.summary());
    }
    Ok(())
}
