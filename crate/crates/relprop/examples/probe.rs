// Scratch convergence probe; not part of the deliverable test suite.
use std::time::Instant;

use relprop::data::{generate_corpus, make_eval_set, GenConfig, Task};
use relprop::model::ModelConfig;
use relprop::train::{teacher_forced_accuracy, TrainConfig, Trainer};

fn main() {
    let vocab = 32usize;
    let corpus = generate_corpus(&GenConfig::new(Task::Copy, 4000, (4, 12), vocab, 7)).unwrap();
    let eval_corpus =
        generate_corpus(&GenConfig::new(Task::Copy, 1000, (4, 12), vocab, 1007)).unwrap();
    let eval = make_eval_set(&eval_corpus, 9, 9, 50).unwrap();

    let model_cfg = ModelConfig::desk(vocab);
    let cfg = TrainConfig {
        tokens_per_batch: 1024,
        total_steps: 5000,
        checkpoint_every: 100,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, &model_cfg, 1).unwrap();
    let start = Instant::now();
    loop {
        let log = trainer.run(&corpus, 50).unwrap();
        let acc = teacher_forced_accuracy(&trainer.params, &eval.pairs).unwrap();
        let last = log.last().unwrap();
        println!(
            "step {:5}  loss {:.4}  lr {:.5}  acc {:.4}  elapsed {:.1}s",
            last.step,
            last.loss,
            last.lr,
            acc,
            start.elapsed().as_secs_f64()
        );
        if acc >= 0.99 || trainer.step() >= 5000 {
            break;
        }
    }
    println!("total: {:.1}s", start.elapsed().as_secs_f64());
}
