use iqt::nn::{backward, forward, initialize_params, mse_loss, Mode, Tensor5};
use iqt::unet::{build_network, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    // raw saxpy peak measurement
    let n = 8192;
    let src = vec![1.0f64; n];
    let mut dst = vec![0.0f64; n];
    let t0 = Instant::now();
    let iters = 200_000;
    for i in 0..iters {
        let w = 1.0 + (i as f64) * 1e-9;
        for (d, s) in dst.iter_mut().zip(&src) { *d += w * s; }
    }
    let gflops = (2.0 * n as f64 * iters as f64) / t0.elapsed().as_secs_f64() / 1e9;
    println!("saxpy peak: {gflops:.2} GFLOP/s (dst[0]={})", dst[0]);

    // dot-product peak (serial accumulator)
    let a = vec![1.0f64; n];
    let b = vec![2.0f64; n];
    let t0 = Instant::now();
    let mut acc = 0.0f64;
    for _ in 0..iters {
        let mut s = 0.0;
        for (x, y) in a.iter().zip(&b) { s += x * y; }
        acc += s;
    }
    let gflops = (2.0 * n as f64 * iters as f64) / t0.elapsed().as_secs_f64() / 1e9;
    println!("dot naive: {gflops:.2} GFLOP/s (acc={acc:.1})");

    let spec = NetworkSpec { base_filters: 8, ..NetworkSpec::default() };
    let mut net = build_network(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = initialize_params(&mut net, 1, &mut rng).unwrap();
    let batch = 8;
    let input = Tensor5::from_vec([batch,1,32,32,8], (0..batch*32*32*8).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let target = Tensor5::from_vec([batch,1,32,32,32], (0..batch*32*32*32).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let _ = forward(&net, &mut store, &input, Mode::Infer).unwrap();
    let t0 = Instant::now();
    let pass = forward(&net, &mut store, &input, Mode::Train{update_running:true}).unwrap();
    println!("forward: {:.3}s", t0.elapsed().as_secs_f64());
    let (_, grad) = mse_loss(pass.output(&net), &target).unwrap();
    let t0 = Instant::now();
    let _grads = backward(&net, &store, &pass, grad).unwrap();
    println!("backward: {:.3}s", t0.elapsed().as_secs_f64());
}
