use hermes_core::config::TrainConfig;
use hermes_core::data::{synth_generate, Dataset};
use hermes_core::engine::TrainState;

fn main() {
    for (size, w, c) in [(32usize, 8usize, 8usize), (32, 16, 16), (64, 8, 8), (64, 16, 16)] {
        let mut cfg = TrainConfig::default();
        cfg.image_size = size;
        cfg.seg_base_width = w;
        cfg.cls_base_width = c;
        cfg.pixel_embed_dim = 32;
        cfg.image_embed_dim = 16;
        cfg.anchors_per_batch = 64;
        cfg.batch_size = 8;
        cfg.total_iters = 100;
        cfg.seed = 3;
        let samples = synth_generate(24, size, 3);
        let mut ds = Dataset::from_samples(samples).unwrap();
        ds.split_labeled(8, 0.25, 3).unwrap();
        let labeled: Vec<_> = ds.index.labeled.iter().take(4).map(|id| ds.load(id).unwrap()).collect();
        let unlabeled: Vec<_> = ds.index.unlabeled.iter().take(4).map(|id| ds.load(id).unwrap()).collect();
        let mut state = TrainState::new(cfg).unwrap();
        // warmup
        state.train_step(&labeled, &unlabeled).unwrap();
        let t0 = std::time::Instant::now();
        let n = 5;
        for _ in 0..n {
            state.train_step(&labeled, &unlabeled).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("size {size} w{w} c{c}: {:.3} s/step -> 600 steps = {:.1} s", dt, dt * 600.0);
    }
}
