//! Development harness: timing and learnability probes on the synthetic
//! task. Run with `cargo run --release -p effnet-mini --example explore -- <mode>`.

use std::time::Instant;

use effnet_mini::data::{generate_synthetic, split_dataset, SynthSpec};
use effnet_mini::model::ModelConfig;
use effnet_mini::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("speed");
    match mode {
        "speed" => speed_probe(),
        "learn" => learn_probe(
            args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12),
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1),
            args.get(3).and_then(|s| s.parse().ok()),
        ),
        "ablation" => ablation_probe(args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3)),
        "variance" => variance_probe(),
        "phases" => phases(),
        other => eprintln!("unknown mode {other}"),
    }
}

fn flags_all() -> ModelConfig {
    ModelConfig::with_flags(true, true, true, true)
}

fn speed_probe() {
    // One epoch, criterion-5 geometry, to report seconds/epoch.
    let ds = generate_synthetic(&SynthSpec { n: 2000, ..SynthSpec::default() }).unwrap();
    let (tr, va) = split_dataset(&ds, 0.8, 1).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig { seed: 1, ..flags_all() },
        epochs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&cfg, &tr, &va, None).unwrap();
    println!(
        "epoch wall: {:.1}s (train {} val {}), first val auc {:?}",
        t0.elapsed().as_secs_f64(),
        tr.len(),
        va.len(),
        out.record.epochs[0].val_auc
    );
}

fn learn_probe(epochs: usize, seed: u64, signal: Option<f64>) {
    let mut spec = SynthSpec { n: 2000, texture_seed: seed, ..SynthSpec::default() };
    if let Some(s) = signal {
        spec.signal_strength = s;
    }
    let ds = generate_synthetic(&spec).unwrap();
    let (tr, va) = split_dataset(&ds, 0.8, seed).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig { seed, ..flags_all() },
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&cfg, &tr, &va, None).unwrap();
    for e in &out.record.epochs {
        println!(
            "epoch {:2}  lr {:.5}  loss {:.4}  train_auc {}  val_auc {}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_auc.map(|v| format!("{v:.4}")).unwrap_or_default(),
            e.val_auc.map(|v| format!("{v:.4}")).unwrap_or_default(),
        );
    }
    println!("wall: {:.1}s  signal {}", t0.elapsed().as_secs_f64(), spec.signal_strength);
}

fn ablation_probe(seeds: u64) {
    // criterion-6 style: baseline vs rcc-only vs all-flags on the 2000-image task
    let mut sums = [0.0f64; 3];
    for seed in 1..=seeds {
        let ds = generate_synthetic(&SynthSpec {
            n: 2000,
            texture_seed: seed,
            ..SynthSpec::default()
        })
        .unwrap();
        let (tr, va) = split_dataset(&ds, 0.8, seed).unwrap();
        for (i, flags) in [
            ModelConfig::with_flags(false, false, false, false),
            ModelConfig::with_flags(true, false, false, false),
            ModelConfig::with_flags(true, true, true, true),
        ]
        .into_iter()
        .enumerate()
        {
            let cfg = TrainConfig {
                model: ModelConfig { seed, ..flags },
                epochs: 12,
                seed,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let out = train(&cfg, &tr, &va, None).unwrap();
            let auc = out.record.final_val.auc.unwrap_or(f64::NAN);
            sums[i] += auc;
            println!(
                "seed {seed} cfg {i} val_auc {auc:.4} acc {:.4} ({:.0}s)",
                out.record.final_val.acc.unwrap_or(f64::NAN),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    println!(
        "means over {seeds} seeds: baseline {:.4}  rcc {:.4}  all {:.4}",
        sums[0] / seeds as f64,
        sums[1] / seeds as f64,
        sums[2] / seeds as f64
    );
}

fn variance_probe() {
    // forward-scale sanity: logit spread at init across flags
    use effnet_mini::augment::normalize;
    use effnet_mini::model::build_model;
    use effnet_mini::Tensor;
    let ds = generate_synthetic(&SynthSpec { n: 64, ..SynthSpec::default() }).unwrap();
    let (mean, std) = effnet_mini::augment::channel_stats(&ds.images).unwrap();
    let mut data = Vec::new();
    for img in &ds.images[..16] {
        data.extend_from_slice(normalize(img, &mean, &std).unwrap().data());
    }
    let batch = Tensor::from_vec(&[16, 3, 96, 96], data, false).unwrap();
    for (name, cfg) in [
        ("baseline", ModelConfig::with_flags(false, false, false, false)),
        ("all", ModelConfig::with_flags(true, true, true, true)),
    ] {
        let model = build_model(&ModelConfig { seed: 3, ..cfg }).unwrap();
        let logits = model.forward(&batch).unwrap();
        let v: Vec<f64> = logits.data().to_vec();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
        println!("{name}: logit mean {m:.4} sd {sd:.4}");
    }
}

#[repr(C)]
struct libc_rusage {
    ru_utime: [i64; 2],
    ru_stime: [i64; 2],
    ru_maxrss: i64,
    ru_ixrss: i64,
    ru_idrss: i64,
    ru_isrss: i64,
    ru_minflt: i64,
    ru_majflt: i64,
    rest: [i64; 8],
}
extern "C" {
    fn getrusage(who: i32, usage: *mut u8) -> i32;
}

// appended: phase timing probe
pub fn phases() {
    use effnet_mini::augment::{channel_stats, normalize};
    use effnet_mini::model::build_model;
    use effnet_mini::tensor::ops::bce_with_logits;
    use effnet_mini::train::augment_for_training;
    use effnet_mini::Tensor;

    let ds = generate_synthetic(&SynthSpec { n: 256, ..SynthSpec::default() }).unwrap();
    let (mean, std) = channel_stats(&ds.images).unwrap();
    let cfg = ModelConfig { seed: 1, ..flags_all() };
    let mut model = build_model(&cfg).unwrap();
    let aug = effnet_mini::augment::AugmentConfig::default();

    let (mut t_aug, mut t_fwd, mut t_bwd, mut t_drain) = (0.0, 0.0, 0.0, 0.0);
    let t_all = Instant::now();
    let micro: usize = std::env::var("MICRO").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    for (step, chunk) in (0..256usize).collect::<Vec<_>>().chunks(micro).enumerate() {
        let t0 = Instant::now();
        let mut data = Vec::new();
        let mut targets = Vec::new();
        for &i in chunk {
            let img = augment_for_training(&ds.images[i], &aug, true, 0, i).unwrap();
            data.extend_from_slice(normalize(&img, &mean, &std).unwrap().data());
            targets.push(ds.images[i].label as f64);
        }
        let input = Tensor::from_vec(&[chunk.len(), 3, 96, 96], data, false).unwrap();
        t_aug += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let logits = model.forward(&input).unwrap();
        let flat = logits.reshape(&[chunk.len()]).unwrap();
        let loss = bce_with_logits(&flat, &targets).unwrap();
        t_fwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        loss.backward().unwrap();
        t_bwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let mut acc = 0.0;
        for (_, p) in model.params() {
            if let Some(g) = p.take_grad() {
                acc += g[0];
            }
        }
        t_drain += t0.elapsed().as_secs_f64();
        if step == 0 {
            println!("warm step done (acc {acc})");
        }
    }
    println!(
        "256 imgs: aug {t_aug:.2}s fwd {t_fwd:.2}s bwd {t_bwd:.2}s drain {t_drain:.2}s total {:.2}s",
        t_all.elapsed().as_secs_f64()
    );
    unsafe {
        let mut ru: libc_rusage = std::mem::zeroed();
        getrusage(0, &mut ru as *mut _ as *mut u8);
        println!("minflt {} majflt {}", ru.ru_minflt, ru.ru_majflt);
    }
    effnet_mini::tensor::profile_dump();
}
