//! Repeated forward/backward on one micro-batch to isolate backward cost.
use std::time::Instant;
use effnet_mini::data::{generate_synthetic, SynthSpec};
use effnet_mini::augment::{channel_stats, normalize};
use effnet_mini::model::{build_model, ModelConfig};
use effnet_mini::tensor::ops::bce_with_logits;
use effnet_mini::Tensor;

fn main() {
    let layers: usize = std::env::var("LAYERS").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let ds = generate_synthetic(&SynthSpec { n: 16, ..SynthSpec::default() }).unwrap();
    let (mean, std) = channel_stats(&ds.images).unwrap();
    let mut cfg = ModelConfig { seed: 1, ..ModelConfig::with_flags(true, true, true, true) };
    // truncate stages to `layers` blocks
    let mut kept = Vec::new();
    let mut count = 0;
    for st in cfg.stages.iter() {
        if count >= layers { break; }
        let take = (layers - count).min(st.blocks);
        let mut s = *st;
        s.blocks = take;
        kept.push(s);
        count += take;
    }
    cfg.stages = kept;
    // fix stride product: validation requires 32; disable by padding strides — instead keep all stages but that changes... simplest: skip validation by using full model when layers >= 7
    if layers < 7 {
        // make remaining strides multiply to 32/stem: stack extra stride in last stage
        let have: usize = cfg.stages.iter().map(|s| s.stride).product();
        if have * 2 != 32 {
            let mult = 16 / have;
            if mult > 1 { cfg.stages.last_mut().unwrap().stride *= mult; }
        }
    }
    cfg.tap_indices = if std::env::var_os("FULLTAPS").is_some() {
        vec![0, 2, 4]
    } else {
        vec![0]
    };
    let model = build_model(&cfg).unwrap();

    let mut data = Vec::new();
    let mut targets = Vec::new();
    for img in &ds.images[..8] {
        data.extend_from_slice(normalize(img, &mean, &std).unwrap().data());
        targets.push(img.label as f64);
    }
    let input = Tensor::from_vec(&[8, 3, 96, 96], data.clone(), false).unwrap();
    let fresh: bool = std::env::var_os("FRESH").is_some();

    let iters: usize = std::env::var("ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(6);
    for iter in 0..iters {
        let input = if fresh {
            Tensor::from_vec(&[8, 3, 96, 96], data.clone(), false).unwrap()
        } else {
            input.clone()
        };
        let t0 = Instant::now();
        let logits = model.forward(&input).unwrap();
        let fwd = t0.elapsed().as_secs_f64();
        let flat = logits.reshape(&[8]).unwrap();
        let loss = bce_with_logits(&flat, &targets).unwrap();
        let t0 = Instant::now();
        loss.backward().unwrap();
        let bwd = t0.elapsed().as_secs_f64();
        for (_, p) in model.params() { p.take_grad(); }
        println!("iter {iter}: fwd {:.1}ms bwd {:.1}ms", fwd*1e3, bwd*1e3);
    }
}
