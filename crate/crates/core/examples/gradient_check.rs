//! Compare tape gradients with central differences on a small perturbed model.
//!
//! The finite differences here reuse the library's own forward pass, so this
//! checks the backward rules only. The integration tests go further and
//! difference an independent reference implementation.
//!
//! cargo run --release --example gradient_check -- [seed] [coords_per_tensor]

use adavae::params::Session;
use adavae::{AdaVae, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn loss(m: &AdaVae, batch: &[Vec<usize>], noise: (u64, u64)) -> f64 {
    let mut s = Session::new(&m.store, None);
    let l = m.batch_loss(&mut s, batch, 0.8, 0.0, Some(noise)).unwrap();
    s.value(l.total).item()
}

fn main() -> adavae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(0, |s| s.parse().unwrap());
    let coords: usize = args.get(1).map_or(3, |s| s.parse().unwrap());

    let mut m = AdaVae::new(ModelConfig::tiny(12), seed)?;
    // Fresh adapters have zero up-projections; move off that point so every
    // tensor receives a nontrivial gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for v in m.store.get_mut(id).data_mut() {
            *v += 0.15 * (rng.gen::<f64>() * 2.0 - 1.0);
        }
    }
    let batch = vec![vec![1, 4, 7, 5, 2], vec![1, 9, 6, 8, 10, 2], vec![1, 11, 2]];
    let noise = (seed, 17);

    let flags = vec![true; m.store.len()];
    let grads = {
        let mut s = Session::new(&m.store, Some(&flags));
        let l = m.batch_loss(&mut s, &batch, 0.8, 0.0, Some(noise))?;
        s.backward(l.total)?
    };

    let mut worst = 0.0f64;
    let entries: Vec<_> = m
        .store
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value().len()))
        .collect();
    for (id, name, len) in entries {
        let g = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        let mut tensor_worst = 0.0f64;
        for _ in 0..coords.min(len) {
            let k = rng.gen_range(0..len);
            let x0 = m.store.get(id).data()[k];
            m.store.get_mut(id).data_mut()[k] = x0 + H;
            let up = loss(&m, &batch, noise);
            m.store.get_mut(id).data_mut()[k] = x0 - H;
            let down = loss(&m, &batch, noise);
            m.store.get_mut(id).data_mut()[k] = x0;
            let num = (up - down) / (2.0 * H);
            let rel = (g[k] - num).abs() / g[k].abs().max(num.abs()).max(1e-5);
            tensor_worst = tensor_worst.max(rel);
        }
        println!("{name:<32} {tensor_worst:.2e}");
        worst = worst.max(tensor_worst);
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
