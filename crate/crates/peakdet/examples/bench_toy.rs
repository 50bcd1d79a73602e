use peakdet::data_io::{build_gt_database, synth_scene};
use peakdet::pipeline::{train, TrainConfig};

fn main() {
    let mut config = TrainConfig::toy();
    config.epochs = 2; // 50 frames / batch 2 = 25 steps/epoch -> 50 steps
    let grid = config.grid().unwrap();
    let frames: Vec<_> = (0..50).map(|s| synth_scene(s, 4, &grid)).collect();
    let db = build_gt_database(&frames);
    let t0 = std::time::Instant::now();
    let out = train(&config, &frames, &db).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let steps = out.metrics_csv.lines().count() - 1;
    println!("{} steps in {:.2}s -> {:.3}s/step; final loss {}", steps, dt, dt / steps as f64, out.final_loss);
}
