//! Trains one default configuration and prints the metrics table.
//!
//! `cargo run --example desk_run -p tkc -- [h] [seed]`

use std::time::Instant;

use tkc::config::TrainConfig;
use tkc::trainer::{load_dataset, Trainer};

fn main() {
    let mut args = std::env::args().skip(1);
    let h = args.next().map_or(2, |s| s.parse().expect("h"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let cfg = TrainConfig {
        h,
        seed,
        ..TrainConfig::default()
    };
    let data = load_dataset(&cfg.data).expect("dataset");
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, data).expect("config");
    while !trainer.is_finished() {
        let r = trainer.run_epoch().expect("training").record;
        println!(
            "epoch {:>2}  loss {:.4}  knn {:.4}  stability {}  lr {:.5}  {:.1}s",
            r.epoch,
            r.loss.total,
            r.knn_top1,
            r.mean_stability.map_or("-".into(), |s| format!("{s:.5}")),
            r.lr,
            start.elapsed().as_secs_f64()
        );
    }
}
