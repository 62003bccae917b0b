use echograph::nn::conv3d;
use echograph::tensor::{Param, Tensor, Var};
use std::time::Instant;

fn t(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (((i as u64).wrapping_mul(seed + 7) % 1000) as f64 / 500.0) - 1.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn main() {
    let x = Param::new("x", t(&[8, 8, 32, 32, 32], 3), true);
    let w = Param::new("w", t(&[16, 8, 3, 3, 3], 5), true);
    let b = Param::new("b", t(&[16], 7), true);
    let flops_fwd = 2.0 * (8 * 16 * 32 * 16 * 16) as f64 * (8 * 27) as f64;
    let t0 = Instant::now();
    let y = conv3d(&Var::param(&x), &Var::param(&w), &Var::param(&b), (1, 2, 2), (1, 1, 1)).unwrap();
    let fwd = t0.elapsed().as_secs_f64();
    let loss = y.sum_all().unwrap();
    let t1 = Instant::now();
    loss.backward().unwrap();
    let bwd = t1.elapsed().as_secs_f64();
    println!("block2 fwd {fwd:.3}s ({:.2} Gflop/s)  bwd {bwd:.3}s", flops_fwd / fwd / 1e9);
}
