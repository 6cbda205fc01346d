// Desk-scale convergence probe: 4 synthetic 64x64 pairs, 200 steps.
use std::time::Instant;
use xfuse_core::config::{FuseConfig, TrainConfig};
use xfuse_core::tensor::Tensor;
use xfuse_core::trainer::{train_stage1, Corpus, TrainLog};

fn blob(cx: f64, cy: f64, r: f64, size: usize) -> Tensor {
    Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
        (0.15 + 0.8 * (-d2 / (2.0 * r * r)).exp()).min(1.0)
    })
}

fn ramp_texture(size: usize, fx: f64, fy: f64) -> Tensor {
    Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        0.5 + 0.25 * ((x * fx).sin() * (y * fy).cos()) + 0.2 * (x / size as f64 - 0.5)
    })
}

fn main() {
    let size = 64;
    let names = vec!["a".into(), "b".into(), "c".into(), "d".into()];
    let pairs = vec![
        (blob(20.0, 20.0, 8.0, size), ramp_texture(size, 0.35, 0.2)),
        (blob(44.0, 30.0, 12.0, size), ramp_texture(size, 0.2, 0.5)),
        (blob(32.0, 48.0, 6.0, size), ramp_texture(size, 0.6, 0.15)),
        (blob(12.0, 50.0, 10.0, size), ramp_texture(size, 0.1, 0.4)),
    ];
    let corpus = Corpus::from_pairs(names, pairs).unwrap();
    let fuse_cfg = FuseConfig { image_size: size, ..FuseConfig::default() };
    let cfg = TrainConfig { steps: Some(200), image_size: size, seed: 11, ..TrainConfig::stage1() };
    let t0 = Instant::now();
    let dir = std::env::temp_dir();
    let logp = dir.join("probe_stage1.log");
    let _ = std::fs::remove_file(&logp);
    let mut log_ir = TrainLog::append_to(&logp).unwrap();
    let mut log_vi = TrainLog::disabled();
    let out = train_stage1(&corpus, &fuse_cfg, &cfg, &mut log_ir, &mut log_vi).unwrap();
    println!("elapsed {:?}", t0.elapsed());
    println!("ir  first {:10.2} last {:10.2} ratio {:.4}", out.ir_losses.0, out.ir_losses.1, out.ir_losses.1 / out.ir_losses.0);
    println!("vi  first {:10.2} last {:10.2} ratio {:.4}", out.vi_losses.0, out.vi_losses.1, out.vi_losses.1 / out.vi_losses.0);
    let log = std::fs::read_to_string(&logp).unwrap();
    for (i, line) in log.lines().enumerate() {
        if i % 20 == 0 || i == 199 { println!("{line}"); }
    }
}
