//! conv_unit forward/backward timing at block shapes.
use std::time::Instant;
use effnet_mini::tensor::ops::Activation;
use effnet_mini::{CounterRng, Tensor};

fn rand_t(rng: &mut CounterRng, shape: &[usize], grad: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_uniform(-0.5, 0.5)).collect();
    Tensor::from_vec(shape, data, grad).unwrap()
}

fn bench(name: &str, rng: &mut CounterRng, in_shape: &[usize], k: &[usize], s: usize, p: usize, g: usize, act: Option<Activation>, input_grad: bool) {
    let x = rand_t(rng, in_shape, input_grad);
    let kt = rand_t(rng, k, true);
    let gamma = rand_t(rng, &[k[0]], true);
    let beta = rand_t(rng, &[k[0]], true);
    let iters = 5;
    let t0 = Instant::now();
    for _ in 0..iters {
        let y = x.conv_unit(&kt, &gamma, &beta, s, p, g, act).unwrap();
        let _ = y.data()[0];
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    let t0 = Instant::now();
    for _ in 0..iters {
        let y = x.conv_unit(&kt, &gamma, &beta, s, p, g, act).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        kt.take_grad(); gamma.take_grad(); beta.take_grad();
        if input_grad { x.take_grad(); }
    }
    let fb = t0.elapsed().as_secs_f64() / iters as f64;
    println!("{name:28} fwd {:7.2}ms  f+b {:7.2}ms", fwd*1e3, fb*1e3);
}

fn main() {
    // emulate the library's allocator tuning by touching a training entry
    effnet_mini::tensor::gradcheck::check_op("add", 1, 0).unwrap();
    let mut rng = CounterRng::new(7);
    // optionally hold a graph-retention-sized live heap while benching
    let ballast: Vec<Vec<f64>> = if std::env::var_os("BALLAST").is_some() {
        (0..120)
            .map(|i| vec![1.0f64; 8 * 1024 * (8 + (i * 37) % 230)])
            .collect()
    } else {
        Vec::new()
    };
    if !ballast.is_empty() {
        let total: usize = ballast.iter().map(|v| v.len() * 8).sum();
        println!("ballast: {} MB in {} chunks", total >> 20, ballast.len());
    }
    let b = 8;
    bench("stem 3>16 k3s1 @96", &mut rng, &[b,3,96,96], &[16,3,3,3], 1,1,1, Some(Activation::Silu), false);
    bench("b1 dw16 k3s2 @96", &mut rng, &[b,16,96,96], &[16,1,3,3], 2,1,16, Some(Activation::Silu), true);
    bench("b1 proj 16>16 @48", &mut rng, &[b,16,48,48], &[16,16,1,1], 1,0,1, None, true);
    bench("b2 expand 16>96 @48", &mut rng, &[b,16,48,48], &[96,16,1,1], 1,0,1, Some(Activation::Silu), true);
    bench("b2 dw96 k3s2 @48", &mut rng, &[b,96,48,48], &[96,1,3,3], 2,1,96, Some(Activation::Silu), true);
    bench("b2 proj 96>24 @24", &mut rng, &[b,96,24,24], &[24,96,1,1], 1,0,1, None, true);
    bench("b3 expand 24>144 @24", &mut rng, &[b,24,24,24], &[144,24,1,1], 1,0,1, Some(Activation::Silu), true);
    bench("b3 dw144 k3s1 @24", &mut rng, &[b,144,24,24], &[144,1,3,3], 1,1,144, Some(Activation::Silu), true);
    bench("b3 proj 144>24 @24", &mut rng, &[b,144,24,24], &[24,144,1,1], 1,0,1, None, true);
    bench("b4 dw144 k5s2 @24", &mut rng, &[b,144,24,24], &[144,1,5,5], 2,2,144, Some(Activation::Silu), true);
    bench("b5 expand 40>240 @12", &mut rng, &[b,40,12,12], &[240,40,1,1], 1,0,1, Some(Activation::Silu), true);
    bench("b5 dw240 k5s1 @12", &mut rng, &[b,240,12,12], &[240,1,5,5], 1,2,240, Some(Activation::Silu), true);
    bench("b7 expand 80>480 @6", &mut rng, &[b,80,6,6], &[480,80,1,1], 1,0,1, Some(Activation::Silu), true);
    bench("b7 dw480 k3s1 @6", &mut rng, &[b,480,6,6], &[480,1,3,3], 1,1,480, Some(Activation::Silu), true);
    bench("b7 proj 480>80 @6", &mut rng, &[b,480,6,6], &[80,480,1,1], 1,0,1, None, true);
}
