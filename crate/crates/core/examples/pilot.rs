//! Calibration run for the task budgets used by the acceptance target.
//!
//! `cargo run --release --example pilot -- <complete|classify> <epochs> <lr> <side> <preset>...`
//!
//! Trains on 400 samples, selects on 100 validation samples and reports the
//! held-out 100, printing the validation curve and, for classification, the
//! confusion matrix.

use std::time::Instant;

use triplane::config::{ModelConfig, Task};
use triplane::tasks::metrics::argmax;
use triplane::tasks::{evaluate, train, Dataset, DatasetSpec, TrainConfig};

const DATA_SEED: u64 = 2024;

fn main() -> triplane::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 5 {
        eprintln!("usage: pilot <complete|classify> <epochs> <lr> <side> <preset>...");
        std::process::exit(1);
    }
    let task = if args[0] == "complete" { Task::Complete } else { Task::Classify };
    let num = |i: usize| args[i].parse::<f64>().unwrap_or_else(|_| panic!("argument {i} is not a number: {}", args[i]));
    let (epochs, lr, d) = (num(1) as usize, num(2), num(3) as usize);

    let all = Dataset::generate(&DatasetSpec::new(DATA_SEED, 600, [d; 3], task))?;
    let (tr, rest) = all.split(400);
    let (val, test) = rest.split(100);
    let tc = TrainConfig {
        lr,
        epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    for name in &args[4..] {
        let t = Instant::now();
        let cfg = ModelConfig::preset(name, [d; 3])?.with_task(task);
        let out = train(cfg, &tr, Some(&val), &tc)?;
        let curve: Vec<String> = out
            .log
            .iter()
            .filter(|r| r.split == "val" && (r.metric == "iou" || r.metric == "accuracy"))
            .map(|r| format!("{:.2}", r.value))
            .collect();
        println!("{name} validation: {}", curve.join(" "));
        if task == Task::Classify {
            let mut confusion = [[0usize; 4]; 4];
            for s in &test.samples {
                confusion[s.label][argmax(out.model.predict(&s.input)?.data())] += 1;
            }
            println!("{name} confusion (row = truth): {confusion:?}");
        }
        let m = evaluate(&out.model, &test)?;
        let scores: Vec<String> = m.entries().iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!("{name} test: {} (best epoch {}, {:.0}s)", scores.join(", "), out.best_epoch, t.elapsed().as_secs_f64());
    }
    Ok(())
}
