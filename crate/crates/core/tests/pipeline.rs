use tempfile::TempDir;
use tkc::checkpoint::Checkpoint;
use tkc::config::{DataSource, LossVariant, TrainConfig};
use tkc::data::{make_gaussian_mixture, MixtureSpec};
use tkc::trainer::{load_dataset, Trainer};

fn small(text: &str) -> TrainConfig {
    let base = "data.classes = 3\ndata.per_class = 20\ndata.dim = 6\nbatch_size = 10\nnegatives = 16\n\
                epochs = 4\nwarmup_epochs = 1\nembed_dim = 8\nencoder_hidden = 16\nkt_hidden = 8\n";
    TrainConfig::from_text(&format!("{base}{text}"), &[]).unwrap()
}

#[test]
fn trains_from_a_tkds_file() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.tkds");
    let spec = MixtureSpec {
        classes: 3,
        per_class: 20,
        dim: 6,
        spread: 4.0,
        seed: 9,
    };
    make_gaussian_mixture(&spec).unwrap().save(&path).unwrap();
    let cfg = small(&format!("data.path = {}\nh = 2\n", path.display()));
    assert_eq!(cfg.data, DataSource::File(path.clone()));

    let data = load_dataset(&cfg.data).unwrap();
    let mut t = Trainer::new(cfg.clone(), data).unwrap();
    t.run().unwrap();
    let csv = t.metrics_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("epoch,loss_total,loss_current,loss_temporal_0,loss_temporal_1,"));
    // temporal terms appear once two epochs of history exist
    assert!(lines[2].contains(",,"));
    assert!(!lines[3].split(',').any(str::is_empty));
}

#[test]
fn l2_run_resumes_through_a_checkpoint_file() {
    let cfg = small("h = 1\nloss = l2\n");
    assert_eq!(cfg.loss, LossVariant::L2);
    let data = load_dataset(&cfg.data).unwrap();

    let mut full = Trainer::new(cfg.clone(), data.clone()).unwrap();
    full.run().unwrap();

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.tkck");
    let mut part = Trainer::new(cfg, data.clone()).unwrap();
    part.run_until(2).unwrap();
    part.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap(), data).unwrap();
    assert_eq!(resumed.epoch(), 2);
    resumed.run().unwrap();

    assert_eq!(resumed.metrics_csv(), full.metrics_csv());
    assert_eq!(resumed.student(), full.student());
}

#[test]
fn sweep_over_h_shares_the_warm_up() {
    // every h starts from the same student and sees the same batches, so the
    // first epoch is identical until temporal terms switch on
    let data = load_dataset(&small("").data).unwrap();
    let first: Vec<f64> = (0..3)
        .map(|h| {
            let mut t = Trainer::new(small(&format!("h = {h}\n")), data.clone()).unwrap();
            t.run_epoch().unwrap().record.loss.total
        })
        .collect();
    assert_eq!(first[0].to_bits(), first[1].to_bits());
    assert_eq!(first[0].to_bits(), first[2].to_bits());
}
