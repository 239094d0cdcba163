//! Deterministic training: Adam with a milestone learning-rate schedule,
//! per-epoch augmented passes, evaluation, and the ablation grid runner.
//!
//! Determinism contract: (config, seed, dataset digest) fully determines
//! every logged number. Shuffles, augmentation draws and weight init all
//! derive from counter-based substreams, and each optimizer step processes
//! gradient contributions in a fixed order.

pub mod adam;
pub mod checkpoint;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{
    channel_stats, normalize, random_center_crop, random_flip, AugmentConfig, ImagePatch,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{auc, confusion, report, MetricReport};
use crate::model::{build_model, EffNetMini, ModelConfig};
use crate::report::{
    eval_csv_row, format_percent, render_table, write_csv, EVAL_CSV_HEADER,
};
use crate::rng::CounterRng;
use crate::tensor::ops::{bce_with_logits, stable_sigmoid};
use crate::tensor::Tensor;
use adam::Adam;

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const AUG_STREAM: u64 = 0x6175_676d;

/// Images per autodiff graph. Batches are processed in fixed-order micro
/// chunks whose gradients accumulate before each optimizer step, bounding
/// peak graph memory without changing the batch semantics.
const MICRO_BATCH: usize = 8;

/// Training hyperparameters. Milestones are exact fractions of the total
/// epoch count, so the schedule shape carries over to any epoch budget
/// (e.g. the 30-epoch milestones 15/30 and 23/30 map onto a 12-epoch run
/// as epochs 6 and 9).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// (numerator, denominator) fractions of total epochs, strictly
    /// increasing inside (0, 1).
    pub milestone_fractions: Vec<(u32, u32)>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 12,
            batch_size: 32,
            base_lr: 0.003,
            lr_decay_factor: 10.0,
            milestone_fractions: vec![(15, 30), (23, 30)],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            augment: AugmentConfig::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!(
                "epochs ({}) and batch_size ({}) must be >= 1",
                self.epochs, self.batch_size
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::config(format!(
                "lr_decay_factor {} must be positive",
                self.lr_decay_factor
            )));
        }
        for &(n, d) in &self.milestone_fractions {
            if d == 0 || n == 0 || n >= d {
                return Err(Error::config(format!(
                    "milestone fraction {n}/{d} must lie strictly inside (0,1)"
                )));
            }
        }
        for w in self.milestone_fractions.windows(2) {
            let ((n1, d1), (n2, d2)) = (w[0], w[1]);
            if (n1 as u64) * (d2 as u64) >= (n2 as u64) * (d1 as u64) {
                return Err(Error::config(format!(
                    "milestone fractions must be strictly increasing: {n1}/{d1} !< {n2}/{d2}"
                )));
            }
        }
        if !self.threshold.is_finite() {
            return Err(Error::config("threshold must be finite".to_string()));
        }
        self.model.validate()?;
        self.augment.validate()
    }

    /// Milestone epochs: floor(fraction * epochs), in exact integer
    /// arithmetic.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.milestone_fractions
            .iter()
            .map(|&(n, d)| (n as usize * self.epochs) / d as usize)
            .collect()
    }
}

/// Learning rate for an epoch: base divided by decay once per milestone
/// already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::usage(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    let passed = cfg
        .milestone_epochs()
        .into_iter()
        .filter(|&m| epoch >= m)
        .count();
    Ok(cfg.base_lr / cfg.lr_decay_factor.powi(passed as i32))
}

/// Substream feeding augmentation draws for one (epoch, image index) pair,
/// independent of data-loader ordering.
pub fn training_aug_stream(aug_seed: u64, epoch: usize, index: usize) -> CounterRng {
    CounterRng::substream(
        aug_seed,
        CounterRng::stream_id(&[AUG_STREAM, epoch as u64, index as u64]),
    )
}

/// Training-time augmentation: random center crop when `rcc` is enabled
/// (evaluation never crops), then the always-on flips.
pub fn augment_for_training(
    img: &ImagePatch,
    aug: &AugmentConfig,
    rcc: bool,
    epoch: usize,
    index: usize,
) -> Result<ImagePatch> {
    let mut rng = training_aug_stream(aug.seed, epoch, index);
    let cropped = if rcc {
        random_center_crop(img, aug, &mut rng)?
    } else {
        img.clone()
    };
    random_flip(&cropped, aug.h_flip_prob, aug.v_flip_prob, &mut rng)
}

/// Per-epoch numbers logged by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub train_auc: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Config echo with the computed normalization stats filled in.
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub wall_seconds: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub final_val: MetricReport,
    pub train_digest: String,
    pub val_digest: String,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub model: EffNetMini,
}

/// Scores (sigmoid probabilities) for a dataset under a trained model,
/// without augmentation.
pub fn predict_scores(
    model: &EffNetMini,
    ds: &Dataset,
    mean: &[f64; 3],
    std: &[f64; 3],
) -> Result<Vec<f64>> {
    crate::perf::tune_allocator();
    let mut scores = Vec::with_capacity(ds.len());
    let mut chunk_start = 0usize;
    while chunk_start < ds.len() {
        let chunk_end = (chunk_start + MICRO_BATCH).min(ds.len());
        let imgs = &ds.images[chunk_start..chunk_end];
        let side = imgs[0].height;
        let mut data = Vec::with_capacity(imgs.len() * 3 * side * side);
        for img in imgs {
            let t = normalize(img, mean, std)?;
            data.extend_from_slice(t.data());
        }
        let input = Tensor::from_vec(&[imgs.len(), 3, side, side], data, false)?;
        let logits = model.forward(&input)?;
        scores.extend(logits.data().iter().map(|&z| stable_sigmoid(z)));
        chunk_start = chunk_end;
    }
    Ok(scores)
}

/// Evaluation bundle: the metric report plus the raw (score, label) pairs
/// it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Forward a dataset through a model and derive the metric report.
pub fn evaluate_model(
    model: &EffNetMini,
    ds: &Dataset,
    mean: &[f64; 3],
    std: &[f64; 3],
    threshold: f64,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::usage("evaluate: empty dataset".to_string()));
    }
    let scores = predict_scores(model, ds, mean, std)?;
    let labels = ds.labels();
    let counts = confusion(&scores, &labels, threshold)?;
    let auc_value = match auc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::Data(_)) => None,
        Err(other) => return Err(other),
    };
    Ok(Evaluation {
        report: report(counts, auc_value, threshold),
        scores,
        labels,
    })
}

/// Load a checkpoint against its config and evaluate a dataset. Refuses
/// to run when the checkpoint digest does not match the config.
pub fn evaluate_checkpoint(
    ckpt_path: &Path,
    cfg: &ModelConfig,
    ds: &Dataset,
    threshold: f64,
) -> Result<Evaluation> {
    let ckpt = checkpoint::load_checkpoint(ckpt_path)?;
    let (model, mean, std) = checkpoint::restore_model(cfg, &ckpt)?;
    evaluate_model(&model, ds, &mean, &std, threshold)
}

/// Train a model. Writes `checkpoint.efnm`, `config.json`, `run.csv` and
/// the final validation report into `out_dir` when given.
pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    crate::perf::tune_allocator();
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::usage("train: datasets must be nonempty".to_string()));
    }
    let started = Instant::now();
    let (mean, std) = channel_stats(&train_ds.images)?;
    let mut effective = cfg.clone();
    effective.augment.channel_mean = mean;
    effective.augment.channel_std = std;
    let aug = effective.augment.clone();

    let mut model = build_model(&cfg.model)?;
    let mut optimizer = Adam::new(cfg.beta1, cfg.beta2, cfg.epsilon);
    let param_count = model.params().len();

    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut last_val: Option<Evaluation> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        CounterRng::substream(
            cfg.seed,
            CounterRng::stream_id(&[SHUFFLE_STREAM, epoch as u64]),
        )
        .shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut epoch_scores = Vec::with_capacity(train_ds.len());
        let mut epoch_labels = Vec::with_capacity(train_ds.len());
        for (step, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "training diverged at epoch {epoch}, batch {step}: {m}"
                )),
                other => other,
            };
            let mut grad_acc: Vec<Vec<f64>> = vec![Vec::new(); param_count];
            let mut batch_loss = 0.0f64;
            for micro_ids in batch_ids.chunks(MICRO_BATCH) {
                let mut data = Vec::new();
                let mut targets = Vec::with_capacity(micro_ids.len());
                let mut side = 0usize;
                for &i in micro_ids {
                    let img = &train_ds.images[i];
                    let augmented =
                        augment_for_training(img, &aug, cfg.model.rcc, epoch, i)?;
                    side = augmented.height;
                    let t = normalize(&augmented, &aug.channel_mean, &aug.channel_std)?;
                    data.extend_from_slice(t.data());
                    targets.push(img.label as f64);
                }
                let input =
                    Tensor::from_vec(&[micro_ids.len(), 3, side, side], data, false)?;
                let logits = model.forward(&input).map_err(diverged)?;
                let flat = logits.reshape(&[micro_ids.len()])?;
                let loss = bce_with_logits(&flat, &targets)
                    .map_err(diverged)?
                    .scale(micro_ids.len() as f64 / batch_ids.len() as f64)?;
                batch_loss += loss.item()?;
                loss.backward().map_err(diverged)?;
                for (k, (_, p)) in model.params().iter().enumerate() {
                    if let Some(g) = p.take_grad() {
                        if grad_acc[k].is_empty() {
                            grad_acc[k] = g;
                        } else {
                            for (a, v) in grad_acc[k].iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                    }
                }
                for (j, &i) in micro_ids.iter().enumerate() {
                    epoch_scores.push(stable_sigmoid(flat.data()[j]));
                    epoch_labels.push(train_ds.images[i].label);
                }
            }
            for g in &mut grad_acc {
                if g.is_empty() {
                    return Err(Error::usage(
                        "internal: a parameter received no gradient".to_string(),
                    ));
                }
            }
            let mut params = model.params_mut();
            optimizer.step(&mut params, &grad_acc, lr)?;
            loss_sum += batch_loss * batch_ids.len() as f64;
        }

        let train_counts = confusion(&epoch_scores, &epoch_labels, cfg.threshold)?;
        let train_auc = auc(&epoch_scores, &epoch_labels).ok();
        let train_rep = report(train_counts, train_auc, cfg.threshold);

        let val = evaluate_model(&model, val_ds, &mean, &std, cfg.threshold)?;
        stats.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / train_ds.len() as f64,
            train_acc: train_rep.acc,
            train_auc: train_rep.auc,
            val_acc: val.report.acc,
            val_auc: val.report.auc,
        });
        last_val = Some(val);
    }

    let final_val = last_val.expect("at least one epoch");
    let mut record = RunRecord {
        config: effective,
        seed: cfg.seed,
        epochs: stats,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint_path: None,
        final_val: final_val.report.clone(),
        train_digest: train_ds.digest.clone(),
        val_digest: val_ds.digest.clone(),
        channel_mean: mean,
        channel_std: std,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}: {e}", dir.display())))?;
        let ckpt_path = dir.join("checkpoint.efnm");
        checkpoint::save_checkpoint(&ckpt_path, &model, mean, std, Some(&optimizer))?;
        let config_json = serde_json::to_string_pretty(&record.config)
            .map_err(|e| Error::io(format!("serializing config: {e}")))?;
        std::fs::write(dir.join("config.json"), config_json)
            .map_err(|e| Error::io(format!("writing config.json: {e}")))?;
        write_run_csv(&dir.join("run.csv"), &record)?;
        let flags = flag_array(&cfg.model);
        write_csv(
            &dir.join("val_metrics.csv"),
            &EVAL_CSV_HEADER,
            &[eval_csv_row("val", flags, &final_val.report, val_ds.len())],
        )?;
        record.checkpoint_path = Some(ckpt_path);
    }
    Ok(TrainOutput { record, model })
}

fn flag_array(m: &ModelConfig) -> [bool; 4] {
    [m.rcc, m.rds, m.ff, m.attention]
}

/// Per-epoch CSV: epoch, lr, train loss, train/val ACC and AUC.
pub fn write_run_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let header = [
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "train_auc",
        "val_acc",
        "val_auc",
    ];
    let rows: Vec<Vec<String>> = record
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format!("{}", e.lr),
                format!("{}", e.train_loss),
                crate::report::format_csv_value(e.train_acc),
                crate::report::format_csv_value(e.train_auc),
                crate::report::format_csv_value(e.val_acc),
                crate::report::format_csv_value(e.val_auc),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Write an evaluation as CSV plus aligned text, including the dumped
/// (score, label) pairs for cross-checking.
pub fn write_evaluation(
    dir: &Path,
    split: &str,
    model_cfg: &ModelConfig,
    eval: &Evaluation,
) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}: {e}", dir.display())))?;
    let flags = flag_array(model_cfg);
    write_csv(
        &dir.join(format!("{split}_metrics.csv")),
        &EVAL_CSV_HEADER,
        &[eval_csv_row(split, flags, &eval.report, eval.labels.len())],
    )?;
    let score_rows: Vec<Vec<String>> = eval
        .scores
        .iter()
        .zip(&eval.labels)
        .map(|(s, l)| vec![format!("{s}"), l.to_string()])
        .collect();
    write_csv(
        &dir.join(format!("{split}_scores.csv")),
        &["score", "label"],
        &score_rows,
    )?;
    let r = &eval.report;
    let table = render_table(
        &["split", "ACC", "AUC", "SEN", "SPE", "F"],
        &[vec![
            split.to_string(),
            format_percent(r.acc),
            format_percent(r.auc),
            format_percent(r.sen),
            format_percent(r.spe),
            format_percent(r.f),
        ]],
    );
    std::fs::write(dir.join(format!("{split}_metrics.txt")), table)
        .map_err(|e| Error::io(format!("writing metrics table: {e}")))
}

/// One ablation grid entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagTuple {
    pub rcc: bool,
    pub rds: bool,
    pub ff: bool,
    pub attention: bool,
}

impl FlagTuple {
    pub fn validate(&self) -> Result<()> {
        if self.attention && !self.ff {
            return Err(Error::config(
                "ablation tuple has attention without feature fusion; enable ff".to_string(),
            ));
        }
        Ok(())
    }
}

/// The ten-row ablation grid in report order: baseline, each mechanism
/// alone (attention only with ff), then the studied combinations.
pub fn table2_grid() -> Vec<FlagTuple> {
    let t = |rcc, rds, ff, attention| FlagTuple { rcc, rds, ff, attention };
    vec![
        t(false, false, false, false),
        t(true, false, false, false),
        t(false, true, false, false),
        t(false, false, true, false),
        t(false, false, true, true),
        t(true, true, false, false),
        t(true, true, true, false),
        t(true, true, true, true),
        t(true, false, true, false),
        t(true, false, true, true),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub flags: FlagTuple,
    pub report: MetricReport,
    pub n_val: usize,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Ablation-table text: one row per tuple with check-marked flags.
    pub fn to_text(&self) -> String {
        let headers = ["RCC", "RDS", "FF", "Attention", "ACC (%)", "AUC (%)"];
        let mark = |b: bool| if b { "\u{221a}".to_string() } else { String::new() };
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    mark(r.flags.rcc),
                    mark(r.flags.rds),
                    mark(r.flags.ff),
                    mark(r.flags.attention),
                    format_percent(r.report.acc),
                    format_percent(r.report.auc),
                ]
            })
            .collect();
        render_table(&headers, &rows)
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let flag = |b: bool| if b { "1" } else { "0" }.to_string();
                vec![
                    flag(r.flags.rcc),
                    flag(r.flags.rds),
                    flag(r.flags.ff),
                    flag(r.flags.attention),
                    crate::report::format_csv_value(r.report.acc),
                    crate::report::format_csv_value(r.report.auc),
                    r.n_val.to_string(),
                ]
            })
            .collect()
    }
}

pub const ABLATION_CSV_HEADER: [&str; 7] =
    ["rcc", "rds", "ff", "attention", "acc", "auc", "n"];

/// Train one model per flag tuple from the same seed and split, and emit
/// the ablation report. Every tuple is validated before any training
/// starts. `jobs` > 1 runs rows on worker threads; each row owns its model
/// and RNG streams and results merge by row index, so the outcome is
/// independent of scheduling.
pub fn ablate(
    base: &TrainConfig,
    grid: &[FlagTuple],
    train_ds: &Dataset,
    val_ds: &Dataset,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::usage("ablate: empty grid".to_string()));
    }
    for t in grid {
        t.validate()?;
    }
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|t| {
            let mut cfg = base.clone();
            cfg.model.rcc = t.rcc;
            cfg.model.rds = t.rds;
            cfg.model.ff = t.ff;
            cfg.model.attention = t.attention;
            cfg
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }

    let run_row = |idx: usize| -> Result<AblationRow> {
        let out = train(&configs[idx], train_ds, val_ds, None)?;
        Ok(AblationRow {
            flags: grid[idx],
            report: out.record.final_val,
            n_val: val_ds.len(),
        })
    };

    let rows: Vec<AblationRow> = if jobs <= 1 {
        let mut rows = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            rows.push(run_row(i)?);
        }
        rows
    } else {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<AblationRow>>>> =
            Mutex::new((0..grid.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(grid.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= grid.len() {
                        break;
                    }
                    let row = run_row(i);
                    results.lock().expect("results lock")[i] = Some(row);
                });
            }
        });
        let collected = results.into_inner().expect("results lock");
        let mut rows = Vec::with_capacity(grid.len());
        for slot in collected {
            rows.push(slot.expect("worker covered every row")?);
        }
        rows
    };

    let report = AblationReport { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}: {e}", dir.display())))?;
        write_csv(&dir.join("ablation.csv"), &ABLATION_CSV_HEADER, &report.csv_rows())?;
        std::fs::write(dir.join("ablation.txt"), report.to_text())
            .map_err(|e| Error::io(format!("writing ablation.txt: {e}")))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_dataset, SynthSpec};

    fn quick_model() -> ModelConfig {
        ModelConfig {
            stem_channels: 8,
            stages: vec![
                crate::model::StageSpec { blocks: 1, channels: 8, stride: 2, expansion: 1, kernel: 3 },
                crate::model::StageSpec { blocks: 1, channels: 12, stride: 2, expansion: 4, kernel: 3 },
                crate::model::StageSpec { blocks: 1, channels: 16, stride: 2, expansion: 4, kernel: 3 },
                crate::model::StageSpec { blocks: 1, channels: 24, stride: 2, expansion: 4, kernel: 3 },
            ],
            tap_indices: vec![0, 2],
            ..ModelConfig::default()
        }
    }

    fn quick_config(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig { seed, ..quick_model() },
            epochs,
            batch_size: 16,
            seed,
            milestone_fractions: vec![],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn paper_schedule_is_exact() {
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.milestone_epochs(), vec![15, 23]);
        let lrs: Vec<f64> = (0..30).map(|e| lr_at(e, &cfg).unwrap()).collect();
        let mut expect = vec![0.003; 15];
        expect.extend(vec![0.0003; 8]);
        expect.extend(vec![0.00003; 7]);
        for (a, b) in lrs.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-18, "{a} vs {b}");
        }
    }

    #[test]
    fn desk_schedule_hits_epochs_6_and_9() {
        let cfg = TrainConfig {
            epochs: 12,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.milestone_epochs(), vec![6, 9]);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.003);
        assert!((lr_at(6, &cfg).unwrap() - 0.0003).abs() < 1e-18);
        assert!((lr_at(9, &cfg).unwrap() - 0.00003).abs() < 1e-18);
    }

    #[test]
    fn lr_is_non_increasing_with_expected_level_count() {
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..30).map(|e| lr_at(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let mut levels: Vec<f64> = lrs.clone();
        levels.dedup();
        assert_eq!(levels.len(), cfg.milestone_fractions.len() + 1);
    }

    #[test]
    fn lr_out_of_range_is_usage_error() {
        let cfg = TrainConfig::default();
        assert!(matches!(lr_at(12, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_milestones_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.milestone_fractions = vec![(23, 30), (15, 30)];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.milestone_fractions = vec![(30, 30)];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rcc_training_augmentation_keeps_center_block() {
        // Replicate the augmentation stream to know the drawn offsets and
        // flip decisions, then verify the center block survives intact at
        // the predicted position.
        let ds = generate_synthetic(&SynthSpec {
            n: 10,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let aug = AugmentConfig::default();
        for (idx, img) in ds.images.iter().enumerate() {
            if img.label != 1 {
                continue;
            }
            for epoch in 0..4 {
                let mut probe = training_aug_stream(aug.seed, epoch, idx);
                let dr = probe.gen_range(17) as usize;
                let dc = probe.gen_range(17) as usize;
                let do_h = probe.gen_bool(aug.h_flip_prob);
                let do_v = probe.gen_bool(aug.v_flip_prob);

                let out = augment_for_training(img, &aug, true, epoch, idx).unwrap();
                let (r0, c0) = (40 - dr, 40 - dc);
                for u in 0..32 {
                    for v in 0..32 {
                        let rr = if do_v { 95 - (r0 + u) } else { r0 + u };
                        let cc = if do_h { 95 - (c0 + v) } else { c0 + v };
                        for ch in 0..3 {
                            assert_eq!(
                                out.get(rr, cc, ch),
                                img.get(32 + u, 32 + v, ch),
                                "center pixel lost at epoch {epoch} idx {idx}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn smoke_training_reduces_loss_over_three_seeds() {
        for seed in [1u64, 2, 3] {
            let ds = generate_synthetic(&SynthSpec {
                n: 64,
                pos_fraction: 0.5,
                texture_seed: seed,
                ..SynthSpec::default()
            })
            .unwrap();
            let (train_ds, val_ds) = split_dataset(&ds, 0.8, seed).unwrap();
            let cfg = quick_config(seed, 3);
            let out = train(&cfg, &train_ds, &val_ds, None).unwrap();
            let first = out.record.epochs.first().unwrap().train_loss;
            let last = out.record.epochs.last().unwrap().train_loss;
            assert!(
                last < first,
                "seed {seed}: loss went {first} -> {last}"
            );
        }
    }

    #[test]
    fn identical_runs_produce_bitwise_identical_outputs() {
        let ds = generate_synthetic(&SynthSpec {
            n: 24,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let (train_ds, val_ds) = split_dataset(&ds, 0.75, 3).unwrap();
        let cfg = quick_config(9, 2);
        let dir_a = std::env::temp_dir().join(format!("effnet-train-a-{}", std::process::id()));
        let dir_b = std::env::temp_dir().join(format!("effnet-train-b-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir_a);
        let _ = std::fs::remove_dir_all(&dir_b);
        train(&cfg, &train_ds, &val_ds, Some(&dir_a)).unwrap();
        train(&cfg, &train_ds, &val_ds, Some(&dir_b)).unwrap();
        let ckpt_a = std::fs::read(dir_a.join("checkpoint.efnm")).unwrap();
        let ckpt_b = std::fs::read(dir_b.join("checkpoint.efnm")).unwrap();
        assert_eq!(ckpt_a, ckpt_b, "checkpoints differ across identical runs");
        let run_a = std::fs::read_to_string(dir_a.join("run.csv")).unwrap();
        let run_b = std::fs::read_to_string(dir_b.join("run.csv")).unwrap();
        assert_eq!(run_a, run_b);
        let _ = std::fs::remove_dir_all(&dir_a);
        let _ = std::fs::remove_dir_all(&dir_b);
    }

    #[test]
    fn evaluation_never_mutates_weights() {
        let ds = generate_synthetic(&SynthSpec {
            n: 16,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let model = build_model(&quick_model()).unwrap();
        let before: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let _ = evaluate_model(&model, &ds, &[120.0; 3], &[40.0; 3], 0.5).unwrap();
        let after: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_weight_model_scores_half_everywhere() {
        let ds = generate_synthetic(&SynthSpec {
            n: 20,
            pos_fraction: 0.405,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut model = build_model(&quick_model()).unwrap();
        for (_, p) in model.params_mut() {
            *p = Tensor::zeros(p.shape(), true);
        }
        let eval = evaluate_model(&model, &ds, &[120.0; 3], &[40.0; 3], 0.5).unwrap();
        assert!(eval.scores.iter().all(|&s| s == 0.5));
        // all-ties AUC is exactly one half
        assert_eq!(eval.report.auc, Some(0.5));
        // score >= threshold predicts positive, so ACC equals the positive
        // fraction under the boundary convention
        let (_, pos) = ds.class_counts();
        let expect = pos as f64 / ds.len() as f64;
        assert!((eval.report.acc.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn report_fields_match_metrics_recomputed_from_dumped_scores() {
        let ds = generate_synthetic(&SynthSpec {
            n: 30,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let model = build_model(&quick_model()).unwrap();
        let eval = evaluate_model(&model, &ds, &[120.0; 3], &[40.0; 3], 0.5).unwrap();
        let counts = confusion(&eval.scores, &eval.labels, 0.5).unwrap();
        let rep = report(counts, auc(&eval.scores, &eval.labels).ok(), 0.5);
        assert_eq!(rep, eval.report);
    }

    #[test]
    fn table2_grid_has_ten_valid_rows_in_order() {
        let grid = table2_grid();
        assert_eq!(grid.len(), 10);
        for t in &grid {
            t.validate().unwrap();
        }
        assert_eq!(grid[0], FlagTuple { rcc: false, rds: false, ff: false, attention: false });
        assert_eq!(grid[7], FlagTuple { rcc: true, rds: true, ff: true, attention: true });
        // attention rows always carry ff
        assert!(grid.iter().filter(|t| t.attention).all(|t| t.ff));
    }

    #[test]
    fn invalid_tuple_is_rejected_before_training() {
        let bad = FlagTuple { rcc: false, rds: false, ff: false, attention: true };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let ds = generate_synthetic(&SynthSpec {
            n: 8,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let (t, v) = split_dataset(&ds, 0.5, 1).unwrap();
        let err = ablate(&quick_config(1, 1), &[bad], &t, &v, 1, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ablation_rows_are_independent_of_worker_count() {
        let ds = generate_synthetic(&SynthSpec {
            n: 24,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let (t, v) = split_dataset(&ds, 0.75, 2).unwrap();
        let cfg = quick_config(4, 1);
        let grid = [
            FlagTuple { rcc: false, rds: false, ff: false, attention: false },
            FlagTuple { rcc: true, rds: false, ff: true, attention: true },
            FlagTuple { rcc: false, rds: true, ff: true, attention: false },
        ];
        let serial = ablate(&cfg, &grid, &t, &v, 1, None).unwrap();
        let parallel = ablate(&cfg, &grid, &t, &v, 2, None).unwrap();
        assert_eq!(serial.csv_rows(), parallel.csv_rows());
    }
}
