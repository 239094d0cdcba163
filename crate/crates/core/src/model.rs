//! EffNet-mini: a miniature EfficientNet-style binary classifier.
//!
//! Stem convolution (stride 2, or 1 when `rds` halves the downsampling),
//! four MBConv stages, optional feature-fusion head over tapped block
//! outputs, and a single-logit dense classifier. The four flags
//! rcc/rds/ff/attention are the ablation switchboard; `rcc` is consumed by
//! the data pipeline and recorded here for provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{fuse_features, ConvUnit, FusionHead, MbConvBlock, MbConvConfig};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::conv::conv_output_size;
use crate::tensor::ops::Activation;
use crate::tensor::Tensor;

/// One MBConv stage: `blocks` blocks ending in `channels`, with `stride`
/// applied by the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
    pub expansion: usize,
    pub kernel: usize,
}

/// Ablation flags plus miniature-architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rcc: bool,
    pub rds: bool,
    pub ff: bool,
    pub attention: bool,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// 0-based indices of blocks whose outputs feed the fusion head.
    pub tap_indices: Vec<usize>,
    pub se_reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rcc: false,
            rds: false,
            ff: false,
            attention: false,
            stem_channels: 16,
            stages: vec![
                StageSpec { blocks: 1, channels: 16, stride: 2, expansion: 1, kernel: 3 },
                StageSpec { blocks: 2, channels: 24, stride: 2, expansion: 6, kernel: 3 },
                StageSpec { blocks: 2, channels: 40, stride: 2, expansion: 6, kernel: 5 },
                StageSpec { blocks: 2, channels: 80, stride: 2, expansion: 6, kernel: 3 },
            ],
            tap_indices: vec![0, 2, 4],
            se_reduction: 4,
            seed: 0,
        }
    }
}

/// Total spatial reduction the stage spec must provide together with a
/// stride-2 stem (the paper's full-downsampling state).
const FULL_DOWNSAMPLING: usize = 32;

impl ModelConfig {
    pub fn with_flags(rcc: bool, rds: bool, ff: bool, attention: bool) -> ModelConfig {
        ModelConfig {
            rcc,
            rds,
            ff,
            attention,
            ..ModelConfig::default()
        }
    }

    /// Stem stride under the rds flag.
    pub fn stem_stride(&self) -> usize {
        if self.rds {
            1
        } else {
            2
        }
    }

    /// Product of all strides (stem included) under the current flags.
    pub fn downsampling_factor(&self) -> usize {
        self.stem_stride() * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention && !self.ff {
            return Err(Error::config(
                "attention requires feature fusion: enable ff or disable attention".to_string(),
            ));
        }
        if self.stages.is_empty() || self.stem_channels == 0 {
            return Err(Error::config("model needs a stem and at least one stage".to_string()));
        }
        let pre_rds = 2 * self.stages.iter().map(|s| s.stride).product::<usize>();
        if pre_rds != FULL_DOWNSAMPLING {
            return Err(Error::config(format!(
                "stage strides multiply with the stride-2 stem to {pre_rds}, expected {FULL_DOWNSAMPLING}"
            )));
        }
        let blocks = self.num_blocks();
        if self.ff {
            if self.tap_indices.is_empty() {
                return Err(Error::config(
                    "feature fusion needs at least one tap index".to_string(),
                ));
            }
            if !self.tap_indices.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::config(format!(
                    "tap indices {:?} must be strictly increasing",
                    self.tap_indices
                )));
            }
            if let Some(&bad) = self.tap_indices.iter().find(|&&i| i >= blocks) {
                return Err(Error::config(format!(
                    "tap index {bad} out of range for {blocks} blocks"
                )));
            }
        }
        if self.se_reduction == 0 {
            return Err(Error::config("se_reduction must be positive".to_string()));
        }
        Ok(())
    }

    /// Per-block configs in execution order.
    fn block_configs(&self) -> Vec<MbConvConfig> {
        let mut out = Vec::with_capacity(self.num_blocks());
        let mut cin = self.stem_channels;
        for stage in &self.stages {
            for b in 0..stage.blocks {
                out.push(MbConvConfig {
                    in_channels: cin,
                    out_channels: stage.channels,
                    expansion: stage.expansion,
                    kernel: stage.kernel,
                    stride: if b == 0 { stage.stride } else { 1 },
                    se_reduction: Some(self.se_reduction),
                });
                cin = stage.channels;
            }
        }
        out
    }

    /// Channel width entering the classifier.
    pub fn classifier_width(&self) -> usize {
        let blocks = self.block_configs();
        let final_c = blocks.last().map(|b| b.out_channels).unwrap_or(0);
        if self.ff {
            let taps: usize = self
                .tap_indices
                .iter()
                .map(|&i| blocks[i].out_channels)
                .sum();
            taps + final_c
        } else {
            final_c
        }
    }
}

/// SHA-256 hex digest of the canonical (JSON) config encoding; stored in
/// checkpoints to prevent loading weights against the wrong architecture.
pub fn config_digest(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// The assembled network.
#[derive(Debug)]
pub struct EffNetMini {
    pub config: ModelConfig,
    stem: ConvUnit,
    blocks: Vec<MbConvBlock>,
    fusion: Option<FusionHead>,
    classifier_w: Tensor,
    classifier_b: Tensor,
}

/// Build the network with deterministic fan-in-scaled uniform init from
/// `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<EffNetMini> {
    cfg.validate()?;
    let mut rng = CounterRng::substream(cfg.seed, CounterRng::stream_id(&[0x696e_6974])); // "init"
    let stem = ConvUnit::new(
        3,
        cfg.stem_channels,
        3,
        cfg.stem_stride(),
        1,
        Some(Activation::Silu),
        &mut rng,
    );
    let blocks: Vec<MbConvBlock> = cfg
        .block_configs()
        .into_iter()
        .map(|bc| MbConvBlock::new(bc, &mut rng))
        .collect::<Result<_>>()?;
    let fusion = if cfg.ff {
        let tap_channels: Vec<usize> = cfg
            .tap_indices
            .iter()
            .map(|&i| blocks[i].cfg.out_channels)
            .collect();
        Some(FusionHead::new(
            tap_channels,
            cfg.attention,
            cfg.se_reduction,
            &mut rng,
        )?)
    } else {
        None
    };
    let width = cfg.classifier_width();
    let bound = (1.0 / width as f64).sqrt();
    let wdata: Vec<f64> = (0..width).map(|_| rng.gen_uniform(-bound, bound)).collect();
    let classifier_w = Tensor::from_vec(&[1, width], wdata, true)?;
    let classifier_b = Tensor::zeros(&[1], true);
    Ok(EffNetMini {
        config: cfg.clone(),
        stem,
        blocks,
        fusion,
        classifier_w,
        classifier_b,
    })
}

impl EffNetMini {
    /// One logit per image; probability = sigmoid(logit).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        match batch.shape() {
            [_, 3, _, _] => {}
            other => {
                return Err(Error::shape(format!(
                    "forward: expected [N,3,H,W] input, got {other:?}"
                )))
            }
        }
        let mut h = self.stem.forward(batch)?;
        let mut taps: Vec<Tensor> = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            if self.fusion.is_some() && self.config.tap_indices.contains(&i) {
                taps.push(h.clone());
            }
        }
        let features = match &self.fusion {
            Some(head) => fuse_features(&taps, &h, head, self.config.attention)?,
            None => h.global_avg_pool()?,
        };
        features.dense(&self.classifier_w, Some(&self.classifier_b))
    }

    /// Spatial side of the final feature map for a square input, computed
    /// structurally from the strides.
    pub fn final_spatial(&self, input_side: usize) -> usize {
        let mut side = conv_output_size(input_side, 3, self.stem.stride, 1).unwrap_or(0);
        for b in &self.blocks {
            let k = b.cfg.kernel;
            side = conv_output_size(side, k, b.cfg.stride, k / 2).unwrap_or(0);
        }
        side
    }

    /// Exact count of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Named parameters in deterministic order (checkpoint order).
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.stem.params("stem");
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.params(&format!("block{i}")));
        }
        if let Some(f) = &self.fusion {
            out.extend(f.params("fusion"));
        }
        out.push(("classifier.weight".to_string(), self.classifier_w.clone()));
        out.push(("classifier.bias".to_string(), self.classifier_b.clone()));
        out
    }

    /// Mutable named parameters, same order as [`EffNetMini::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.stem.params_mut("stem");
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.params_mut(&format!("block{i}")));
        }
        if let Some(f) = &mut self.fusion {
            out.extend(f.params_mut("fusion"));
        }
        out.push(("classifier.weight".to_string(), &mut self.classifier_w));
        out.push(("classifier.bias".to_string(), &mut self.classifier_b));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::bce_with_logits;

    fn random_batch(rng: &mut CounterRng, n: usize, side: usize) -> Tensor {
        let len = n * 3 * side * side;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_uniform(-1.0, 1.0)).collect();
        Tensor::from_vec(&[n, 3, side, side], data, false).unwrap()
    }

    #[test]
    fn default_config_passes_validation() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().num_blocks(), 7);
    }

    #[test]
    fn attention_without_ff_is_rejected() {
        let cfg = ModelConfig::with_flags(false, false, false, true);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn bad_stride_product_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.stages[0].stride = 1; // 2*1*2*2*2 = 16 != 32
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn downsampling_factor_follows_rds() {
        let off = ModelConfig::with_flags(false, false, false, false);
        assert_eq!(off.downsampling_factor(), 32);
        let on = ModelConfig::with_flags(false, true, false, false);
        assert_eq!(on.downsampling_factor(), 16);
    }

    #[test]
    fn final_feature_map_is_3x3_without_rds_and_6x6_with() {
        let m_off = build_model(&ModelConfig::with_flags(false, false, false, false)).unwrap();
        assert_eq!(m_off.final_spatial(96), 3);
        let m_on = build_model(&ModelConfig::with_flags(false, true, false, false)).unwrap();
        assert_eq!(m_on.final_spatial(96), 6);

        // shape probe agrees with the structural computation
        let mut rng = CounterRng::new(1);
        let batch = random_batch(&mut rng, 1, 96);
        // probe through the stem+blocks by checking the pooled width stays
        // consistent and forward succeeds at both scales
        assert_eq!(m_off.forward(&batch).unwrap().shape(), &[1, 1]);
        assert_eq!(m_on.forward(&batch).unwrap().shape(), &[1, 1]);
    }

    #[test]
    fn zero_weight_model_outputs_zero_logits() {
        let mut m = build_model(&ModelConfig::default()).unwrap();
        for (_, p) in m.params_mut() {
            *p = Tensor::zeros(p.shape(), true);
        }
        let mut rng = CounterRng::new(2);
        let batch = random_batch(&mut rng, 3, 96);
        let logits = m.forward(&batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let probs = logits.sigmoid().unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_of_four_yields_four_logits() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let mut rng = CounterRng::new(3);
        let batch = random_batch(&mut rng, 4, 96);
        assert_eq!(m.forward(&batch).unwrap().shape(), &[4, 1]);
    }

    #[test]
    fn same_seed_same_batch_is_bitwise_identical() {
        let cfg = ModelConfig {
            seed: 11,
            ..ModelConfig::with_flags(false, false, true, true)
        };
        let m1 = build_model(&cfg).unwrap();
        let m2 = build_model(&cfg).unwrap();
        let mut rng = CounterRng::new(4);
        let batch = random_batch(&mut rng, 2, 96);
        let l1 = m1.forward(&batch).unwrap();
        let l2 = m2.forward(&batch).unwrap();
        assert_eq!(l1.data(), l2.data());
        let l3 = m1.forward(&batch).unwrap();
        assert_eq!(l1.data(), l3.data());
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let bad = Tensor::zeros(&[1, 4, 96, 96], false);
        assert!(matches!(m.forward(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn single_dense_parameter_count() {
        // 4 weights + 1 bias = 5 for a 4 -> 1 dense layer with bias.
        let w = Tensor::zeros(&[1, 4], true);
        let b = Tensor::zeros(&[1], true);
        assert_eq!(w.numel() + b.numel(), 5);
    }

    #[test]
    fn rds_flip_never_changes_parameter_count_or_width() {
        let off = build_model(&ModelConfig::with_flags(false, false, true, true)).unwrap();
        let on = build_model(&ModelConfig::with_flags(false, true, true, true)).unwrap();
        assert_eq!(off.count_parameters(), on.count_parameters());
        assert_eq!(off.config.classifier_width(), on.config.classifier_width());
    }

    #[test]
    fn ff_parameter_delta_matches_head_formula() {
        let base = build_model(&ModelConfig::with_flags(false, false, false, false)).unwrap();
        let ff = build_model(&ModelConfig::with_flags(false, false, true, false)).unwrap();
        let att = build_model(&ModelConfig::with_flags(false, false, true, true)).unwrap();

        // Without attention the head is parameterless; only the classifier
        // widens by the summed tap channels (16 + 24 + 40).
        let tap_sum = 16 + 24 + 40;
        assert_eq!(
            ff.count_parameters() - base.count_parameters(),
            tap_sum * 1
        );
        // Attention adds two dense layers (C * C/4 each) per tap.
        let se_params: usize = [16usize, 24, 40].iter().map(|c| 2 * c * (c / 4)).sum();
        assert_eq!(att.count_parameters() - ff.count_parameters(), se_params);
    }

    #[test]
    fn classifier_width_consistent_with_flags() {
        assert_eq!(ModelConfig::with_flags(false, false, false, false).classifier_width(), 80);
        assert_eq!(
            ModelConfig::with_flags(false, false, true, false).classifier_width(),
            16 + 24 + 40 + 80
        );
    }

    #[test]
    fn loss_gradient_reaches_every_parameter() {
        // The excitation bottleneck can in principle die (all-negative relu
        // inputs across the batch), so this is a probabilistic property;
        // the default widths and a batch of 4 make it hold across seeds.
        for seed in 0..5 {
            let cfg = ModelConfig {
                seed,
                ..ModelConfig::with_flags(false, false, true, true)
            };
            let mut m = build_model(&cfg).unwrap();
            let mut rng = CounterRng::new(1000 + seed);
            let batch = random_batch(&mut rng, 4, 96);
            let logits = m.forward(&batch).unwrap().reshape(&[4]).unwrap();
            let loss = bce_with_logits(&logits, &[1.0, 0.0, 1.0, 0.0]).unwrap();
            loss.backward().unwrap();
            for (name, p) in m.params_mut() {
                let g = p.take_grad().unwrap_or_default();
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "seed {seed}: parameter {name} has all-zero gradient"
                );
            }
        }
    }

    #[test]
    fn positive_scaling_preserves_threshold_zero_classification() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let mut rng = CounterRng::new(5);
        let batch = random_batch(&mut rng, 4, 96);
        let logits = m.forward(&batch).unwrap();
        let scaled = logits.scale(7.3).unwrap();
        for (a, b) in logits.data().iter().zip(scaled.data()) {
            assert_eq!(*a >= 0.0, *b >= 0.0);
        }
    }

    #[test]
    fn config_digest_distinguishes_configs() {
        let a = config_digest(&ModelConfig::default());
        let b = config_digest(&ModelConfig::with_flags(true, false, false, false));
        assert_ne!(a, b);
        assert_eq!(a, config_digest(&ModelConfig::default()));
        assert_eq!(a.len(), 64);
    }
}
