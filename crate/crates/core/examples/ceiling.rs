// Dev probe: supervised learnability of the synthetic classification task.
use hermes_core::data::synth_generate;
use hermes_core::losses;
use hermes_core::model::layers::{ConvBlock, Linear};
use hermes_core::model::{OptimGroup, ParamStore};
use hermes_core::tensor::{Graph, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let trivial: bool = args.get(5).map(|s| s == "trivial").unwrap_or(false);

    let mut samples = synth_generate(n, size, 5);
    if trivial {
        // Overwrite with a trivially separable cue: brightness by class.
        for s in samples.iter_mut() {
            let c = s.class_label.unwrap() as f64;
            s.image.mapv_inplace(|v| (v * 0.5 + c * 0.4).clamp(0.0, 1.0));
        }
    }
    let n_train = n * 3 / 4;
    let (train, test) = samples.split_at(n_train);

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g0 = OptimGroup::ClsSgd;
    let b1 = ConvBlock::new(&mut store, "b1", g0, 3, 12, 3, 2, &mut rng);
    let b2 = ConvBlock::new(&mut store, "b2", g0, 12, 24, 3, 2, &mut rng);
    let b3 = ConvBlock::new(&mut store, "b3", g0, 24, 48, 3, 2, &mut rng);
    let fc = Linear::new(&mut store, "fc", g0, 48, 2, &mut rng);
    let forward = |g: &mut Graph, store: &ParamStore, images: &Tensor, track: bool| {
        let p = store.bind_all(g, track);
        let img = g.constant(images.clone());
        let y = b1.forward(g, &p, img);
        let y = b2.forward(g, &p, y);
        let y = b3.forward(g, &p, y);
        let pooled = g.global_avg_pool(y);
        (fc.forward(g, &p, pooled), p)
    };

    let mut m: Vec<Option<Tensor>> = vec![None; store.len()];
    let mut v: Vec<Option<Tensor>> = vec![None; store.len()];
    let mut t = 0u64;
    let batch = 32usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(9);
    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let mut imgs = ArrayD::<f64>::zeros(IxDyn(&[chunk.len(), 3, size, size]));
            let mut labels = Vec::new();
            for (i, &idx) in chunk.iter().enumerate() {
                for c in 0..3 { for y in 0..size { for x in 0..size {
                    imgs[[i, c, y, x]] = train[idx].image[(c, y, x)];
                }}}
                labels.push(train[idx].class_label.unwrap() as u32);
            }
            let mut g = Graph::new();
            let (logits, p) = forward(&mut g, &store, &imgs, true);
            let loss = losses::supervised_cls_loss(&mut g, logits, &labels).unwrap();
            total_loss += g.scalar_value(loss);
            steps += 1;
            g.backward(loss).unwrap();
            t += 1;
            let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            let (bc1, bc2) = (1.0 - beta1.powi(t as i32), 1.0 - beta2.powi(t as i32));
            for id in store.ids() {
                if let Some(grad) = g.grad(p.node(id)) {
                    let idx = format!("{:?}", id); let _ = idx;
                    let i = store.ids().position(|x| x == id).unwrap();
                    let mi = m[i].get_or_insert_with(|| Tensor::zeros(grad.raw_dim()));
                    let vi = v[i].get_or_insert_with(|| Tensor::zeros(grad.raw_dim()));
                    ndarray::Zip::from(&mut *mi).and(grad).for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    ndarray::Zip::from(&mut *vi).and(grad).for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    let w = store.value_mut(id);
                    ndarray::Zip::from(w).and(&*mi).and(&*vi).for_each(|w, &m, &v| {
                        *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    });
                }
            }
        }
        // test accuracy
        let mut correct = 0;
        for chunk in test.chunks(64) {
            let mut imgs = ArrayD::<f64>::zeros(IxDyn(&[chunk.len(), 3, size, size]));
            for (i, s) in chunk.iter().enumerate() {
                for c in 0..3 { for y in 0..size { for x in 0..size {
                    imgs[[i, c, y, x]] = s.image[(c, y, x)];
                }}}
            }
            let mut g = Graph::new();
            let (logits, _) = forward(&mut g, &store, &imgs, false);
            let l = g.value(logits).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
            for (i, s) in chunk.iter().enumerate() {
                let pred = u32::from(l[(i, 1)] > l[(i, 0)]);
                if pred == s.class_label.unwrap() as u32 { correct += 1; }
            }
        }
        println!("epoch {epoch}: train loss {:.4} test acc {:.4}", total_loss / steps as f64, correct as f64 / test.len() as f64);
    }
}
