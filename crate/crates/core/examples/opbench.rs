//! Per-op timing at training shapes.

use std::time::Instant;

use effnet_mini::tensor::ops::bce_with_logits;
use effnet_mini::{CounterRng, Tensor};

fn rand_t(rng: &mut CounterRng, shape: &[usize], grad: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_uniform(-0.5, 0.5)).collect();
    Tensor::from_vec(shape, data, grad).unwrap()
}

fn time_conv(
    name: &str,
    rng: &mut CounterRng,
    in_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    pad: usize,
    groups: usize,
    iters: usize,
) {
    let x = rand_t(rng, in_shape, false);
    let k = rand_t(rng, k_shape, true);

    // forward only
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = x.conv2d(&k, stride, pad, groups).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;

    // forward + backward (weight grad only, like a stem/data layer)
    let t0 = Instant::now();
    for _ in 0..iters {
        let y = x.conv2d(&k, stride, pad, groups).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        k.take_grad();
    }
    let fb_w = t0.elapsed().as_secs_f64() / iters as f64;

    // forward + backward with input grad too
    let xg = rand_t(rng, in_shape, true);
    let t0 = Instant::now();
    for _ in 0..iters {
        let y = xg.conv2d(&k, stride, pad, groups).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        k.take_grad();
        xg.take_grad();
    }
    let fb_xw = t0.elapsed().as_secs_f64() / iters as f64;

    let (n, _cin, _h, _w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (cout, cg, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    let oh = (in_shape[2] + 2 * pad - kh) / stride + 1;
    let ow = (in_shape[3] + 2 * pad - kw) / stride + 1;
    let macs = n * cout * oh * ow * cg * kh * kw;
    println!(
        "{name:24} fwd {:7.2}ms ({:5.2} GF/s)  f+bw(w) {:7.2}ms  f+bw(xw) {:7.2}ms",
        fwd * 1e3,
        2.0 * macs as f64 / fwd / 1e9,
        fb_w * 1e3,
        fb_xw * 1e3,
    );
}

fn main() {
    let mut rng = CounterRng::new(7);
    let b = 8;
    // rds-on geometry (all-flags config)
    time_conv("stem 3>16 k3s1 @96", &mut rng, &[b, 3, 96, 96], &[16, 3, 3, 3], 1, 1, 1, 3);
    time_conv("b1 dw16 k3s2 @96", &mut rng, &[b, 16, 96, 96], &[16, 1, 3, 3], 2, 1, 16, 3);
    time_conv("b1 proj 16>16 @48", &mut rng, &[b, 16, 48, 48], &[16, 16, 1, 1], 1, 0, 1, 3);
    time_conv("b2 expand 16>96 @48", &mut rng, &[b, 16, 48, 48], &[96, 16, 1, 1], 1, 0, 1, 3);
    time_conv("b2 dw96 k3s2 @48", &mut rng, &[b, 96, 48, 48], &[96, 1, 3, 3], 2, 1, 96, 3);
    time_conv("b2 proj 96>24 @24", &mut rng, &[b, 96, 24, 24], &[24, 96, 1, 1], 1, 0, 1, 3);
    time_conv("b3 expand 24>144 @24", &mut rng, &[b, 24, 24, 24], &[144, 24, 1, 1], 1, 0, 1, 3);
    time_conv("b3 dw144 k3s1 @24", &mut rng, &[b, 144, 24, 24], &[144, 1, 3, 3], 1, 1, 144, 3);
    time_conv("b4 dw144 k5s2 @24", &mut rng, &[b, 144, 24, 24], &[144, 1, 5, 5], 2, 2, 144, 3);
    time_conv("b5 expand 40>240 @12", &mut rng, &[b, 40, 12, 12], &[240, 40, 1, 1], 1, 0, 1, 5);
    time_conv("b7 expand 80>480 @6", &mut rng, &[b, 80, 6, 6], &[480, 80, 1, 1], 1, 0, 1, 5);

    // elementwise at the big shapes
    let x = rand_t(&mut rng, &[b, 96, 48, 48], true);
    let t0 = Instant::now();
    for _ in 0..5 {
        let y = x.silu().unwrap();
        y.sum_all().unwrap().backward().unwrap();
        x.take_grad();
    }
    println!("silu 8x96x48x48 f+b: {:.2}ms", t0.elapsed().as_secs_f64() / 5.0 * 1e3);

    let gamma = rand_t(&mut rng, &[96], true);
    let beta = rand_t(&mut rng, &[96], true);
    let t0 = Instant::now();
    for _ in 0..5 {
        let y = x.channel_affine(&gamma, &beta).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        x.take_grad();
        gamma.take_grad();
        beta.take_grad();
    }
    println!("affine 8x96x48x48 f+b: {:.2}ms", t0.elapsed().as_secs_f64() / 5.0 * 1e3);

    let z = rand_t(&mut rng, &[1600], true);
    let targets: Vec<f64> = (0..1600).map(|i| (i % 2) as f64).collect();
    let t0 = Instant::now();
    for _ in 0..50 {
        let l = bce_with_logits(&z, &targets).unwrap();
        let _ = l.item().unwrap();
        z.take_grad();
    }
    println!("bce 1600: {:.3}ms", t0.elapsed().as_secs_f64() / 50.0 * 1e3);
}
