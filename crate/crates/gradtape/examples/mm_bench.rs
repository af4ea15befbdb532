use gradtape::{Graph, Tensor};
use std::time::Instant;

fn main() {
    // product-path sized matrices: [8192,64]x[64,128] and [8192,128]x[128,128]
    let m = 8192;
    for &(k, n) in &[(3usize, 64usize), (64, 128), (128, 128)] {
        let a: Vec<f64> = (0..m * k).map(|i| (i % 97) as f64 * 0.01).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 89) as f64 * 0.01).collect();
        let ta = Tensor::constant(&[m, k], a).unwrap();
        let tb = Tensor::constant(&[k, n], b).unwrap();
        let t0 = Instant::now();
        let iters = 20;
        let mut sink = 0.0;
        for _ in 0..iters {
            let c = ta.matmul(&tb).unwrap();
            sink += c.data()[0];
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let macs = (m * k * n) as f64;
        println!("[{m}x{k}]x[{k}x{n}]  {:.3} ms  {:.2} GMAC/s (sink {sink:.1})", dt * 1e3, macs / dt / 1e9);
    }
    // full fwd+bwd through a 3-layer MLP akin to the training step
    let g = Graph::new();
    let w1 = g.param(&[3, 64], vec![0.01; 3 * 64]).unwrap();
    let w2 = g.param(&[64, 128], vec![0.01; 64 * 128]).unwrap();
    let w3 = g.param(&[128, 128], vec![0.01; 128 * 128]).unwrap();
    let x = Tensor::constant(&[8192, 3], vec![0.5; 8192 * 3]).unwrap();
    let t0 = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let h = x
            .matmul(&w1).unwrap().leaky_relu(0.01).unwrap()
            .matmul(&w2).unwrap().leaky_relu(0.01).unwrap()
            .matmul(&w3).unwrap().leaky_relu(0.01).unwrap();
        let loss = h.reshape(&[8192 * 128]).unwrap().sum_axis(0).unwrap();
        loss.backward().unwrap();
    }
    println!("mlp fwd+bwd step: {:.1} ms", t0.elapsed().as_secs_f64() / iters as f64 * 1e3);

    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let h = x
            .matmul(&w1).unwrap().leaky_relu(0.01).unwrap()
            .matmul(&w2).unwrap().leaky_relu(0.01).unwrap()
            .matmul(&w3).unwrap().leaky_relu(0.01).unwrap();
        let loss = h.reshape(&[8192 * 128]).unwrap().sum_axis(0).unwrap();
        sink += loss.item();
    }
    println!("mlp fwd only: {:.1} ms (sink {sink:.0})", t0.elapsed().as_secs_f64() / iters as f64 * 1e3);
}
// appended: forward-only timing
