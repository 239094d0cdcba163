//! Network building blocks: squeeze-and-excitation, MBConv, and the
//! attention-weighted feature-fusion head.
//!
//! Convolutions carry no bias; each one is followed by a learnable
//! per-channel scale and shift (the norm-free stabilizer) whose scale is
//! initialized above 1 to counteract the variance shrink of fan-in-scaled
//! weight init, keeping activations in a trainable range without batch
//! statistics. Excitation dense layers carry no bias either (the gating is
//! sigma(W2 relu(W1 z))).

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::ops::Activation;
use crate::tensor::Tensor;

/// Initial value of the stabilizer scale, calibrated so a forward pass at
/// init keeps activation variance roughly level per block and lands the
/// classifier logits at order 0.1-1. Fan-in-scaled uniform weight init
/// shrinks activation std per convolution and the silu / SE gates shrink
/// it further; values much above 3 compound into saturated logits across
/// the seven blocks, values below ~2.8 decay them toward zero.
pub(crate) const STABILIZER_INIT_GAIN: f64 = 3.0;

/// Uniform init in +-sqrt(1/fan_in).
fn fan_in_uniform(rng: &mut CounterRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_uniform(-bound, bound)).collect();
    Tensor::from_vec(shape, data, true).expect("consistent shape")
}

/// Global average pooling per channel: [N,C,H,W] -> [N,C].
pub fn squeeze(u: &Tensor) -> Result<Tensor> {
    u.global_avg_pool()
}

/// Per-channel rescale of a feature map by per-sample channel weights.
pub fn se_scale(u: &Tensor, s: &Tensor) -> Result<Tensor> {
    u.scale_channels(s)
}

/// Squeeze-and-excitation weights for `channels` channels with bottleneck
/// `channels / reduction`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    /// [C/r, C]
    pub w1: Tensor,
    /// [C, C/r]
    pub w2: Tensor,
}

impl SeBlock {
    pub fn new(channels: usize, reduction: usize, rng: &mut CounterRng) -> Result<SeBlock> {
        if reduction == 0 || channels == 0 {
            return Err(Error::config(
                "se block: channels and reduction must be positive".to_string(),
            ));
        }
        if channels % reduction != 0 {
            return Err(Error::config(format!(
                "se block: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            channels,
            reduction,
            w1: fan_in_uniform(rng, &[hidden, channels], channels),
            w2: fan_in_uniform(rng, &[channels, hidden], hidden),
        })
    }

    /// Wrap existing weights (used by tests and the checkpoint loader).
    pub fn from_weights(w1: Tensor, w2: Tensor) -> Result<SeBlock> {
        let (hidden, channels) = match w1.shape() {
            [h, c] => (*h, *c),
            other => {
                return Err(Error::shape(format!(
                    "se block: w1 must be rank-2, got {other:?}"
                )))
            }
        };
        if w2.shape() != [channels, hidden] {
            return Err(Error::shape(format!(
                "se block: w2 shape {:?} does not transpose w1 {:?}",
                w2.shape(),
                w1.shape()
            )));
        }
        if hidden == 0 || channels % hidden != 0 {
            return Err(Error::config(format!(
                "se block: bottleneck {hidden} must evenly divide channels {channels}"
            )));
        }
        Ok(SeBlock {
            channels,
            reduction: channels / hidden,
            w1,
            w2,
        })
    }

    /// Excitation: S = sigmoid(W2 relu(W1 Z)), componentwise in (0,1).
    pub fn excite(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.shape()[1] != self.channels {
            return Err(Error::shape(format!(
                "excite: input {:?} does not match {} channels",
                z.shape(),
                self.channels
            )));
        }
        z.dense(&self.w1, None)?
            .relu()?
            .dense(&self.w2, None)?
            .sigmoid()
    }

    /// Full attention pass: squeeze -> excite -> rescale.
    pub fn apply(&self, u: &Tensor) -> Result<Tensor> {
        let z = squeeze(u)?;
        let s = self.excite(&z)?;
        se_scale(u, &s)
    }

    pub(crate) fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
        ]
    }

    pub(crate) fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.w2"), &mut self.w2),
        ]
    }
}

/// Convolution + per-channel stabilizer (+ optional activation), the
/// repeated unit inside the stem and MBConv.
#[derive(Debug, Clone)]
pub(crate) struct ConvUnit {
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub act: Option<Activation>,
}

impl ConvUnit {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: Option<Activation>,
        rng: &mut CounterRng,
    ) -> ConvUnit {
        let fan_in = (cin / groups) * k * k;
        let kernel = fan_in_uniform(rng, &[cout, cin / groups, k, k], fan_in);
        let gamma =
            Tensor::from_vec(&[cout], vec![STABILIZER_INIT_GAIN; cout], true).expect("shape");
        let beta = Tensor::zeros(&[cout], true);
        ConvUnit {
            kernel,
            gamma,
            beta,
            stride,
            padding: k / 2,
            groups,
            act,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv_unit(
            &self.kernel,
            &self.gamma,
            &self.beta,
            self.stride,
            self.padding,
            self.groups,
            self.act,
        )
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.kernel"), self.kernel.clone()),
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.kernel"), &mut self.kernel),
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
        ]
    }
}

/// MBConv hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MbConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    /// SE bottleneck divisor on the expanded channels; None disables the
    /// internal attention.
    pub se_reduction: Option<usize>,
}

/// Mobile inverted-bottleneck block: 1x1 expand, depthwise kxk, internal
/// SE, 1x1 project, skip when stride is 1 and channel counts match.
#[derive(Debug, Clone)]
pub struct MbConvBlock {
    pub cfg: MbConvConfig,
    expand: Option<ConvUnit>,
    depthwise: ConvUnit,
    se: Option<SeBlock>,
    project: ConvUnit,
}

impl MbConvBlock {
    pub fn new(cfg: MbConvConfig, rng: &mut CounterRng) -> Result<MbConvBlock> {
        if cfg.expansion == 0 || cfg.stride == 0 || cfg.kernel == 0 {
            return Err(Error::config(format!(
                "mbconv: expansion/stride/kernel must be positive, got {cfg:?}"
            )));
        }
        let expanded = cfg.in_channels * cfg.expansion;
        let expand = (cfg.expansion > 1).then(|| {
            ConvUnit::new(
                cfg.in_channels,
                expanded,
                1,
                1,
                1,
                Some(Activation::Silu),
                rng,
            )
        });
        let depthwise = ConvUnit::new(
            expanded,
            expanded,
            cfg.kernel,
            cfg.stride,
            expanded,
            Some(Activation::Silu),
            rng,
        );
        let se = match cfg.se_reduction {
            Some(r) => Some(SeBlock::new(expanded, r, rng)?),
            None => None,
        };
        let project = ConvUnit::new(expanded, cfg.out_channels, 1, 1, 1, None, rng);
        Ok(MbConvBlock {
            cfg,
            expand,
            depthwise,
            se,
            project,
        })
    }

    /// Skip connection is active iff stride == 1 and channel counts match.
    pub fn skip_active(&self) -> bool {
        self.cfg.stride == 1 && self.cfg.in_channels == self.cfg.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match x.shape() {
            [_, c, _, _] if *c == self.cfg.in_channels => {}
            other => {
                return Err(Error::shape(format!(
                    "mbconv: input {:?} does not match {} input channels",
                    other, self.cfg.in_channels
                )))
            }
        }
        let mut h = match &self.expand {
            Some(e) => e.forward(x)?,
            None => x.clone(),
        };
        h = self.depthwise.forward(&h)?;
        if let Some(se) = &self.se {
            h = se.apply(&h)?;
        }
        h = self.project.forward(&h)?;
        if self.skip_active() {
            h = h.add(x)?;
        }
        Ok(h)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(e) = &self.expand {
            out.extend(e.params(&format!("{prefix}.expand")));
        }
        out.extend(self.depthwise.params(&format!("{prefix}.depthwise")));
        if let Some(se) = &self.se {
            out.extend(se.params(&format!("{prefix}.se")));
        }
        out.extend(self.project.params(&format!("{prefix}.project")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.expand {
            out.extend(e.params_mut(&format!("{prefix}.expand")));
        }
        out.extend(self.depthwise.params_mut(&format!("{prefix}.depthwise")));
        if let Some(se) = &mut self.se {
            out.extend(se.params_mut(&format!("{prefix}.se")));
        }
        out.extend(self.project.params_mut(&format!("{prefix}.project")));
        out
    }
}

/// Fusion head: taps (saved intermediate feature maps) are optionally
/// SE-weighted, then every tap and the final map are globally pooled and
/// concatenated (taps in order, final last).
#[derive(Debug, Clone)]
pub struct FusionHead {
    /// Channel count of each tapped feature map, in tap order.
    pub tap_channels: Vec<usize>,
    /// One SE block per tap when attention is enabled, empty otherwise.
    pub se_blocks: Vec<SeBlock>,
}

impl FusionHead {
    pub fn new(
        tap_channels: Vec<usize>,
        attention: bool,
        se_reduction: usize,
        rng: &mut CounterRng,
    ) -> Result<FusionHead> {
        let se_blocks = if attention {
            tap_channels
                .iter()
                .map(|&c| SeBlock::new(c, se_reduction, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(FusionHead {
            tap_channels,
            se_blocks,
        })
    }

    pub fn attention(&self) -> bool {
        !self.se_blocks.is_empty()
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.se_blocks
            .iter()
            .enumerate()
            .flat_map(|(i, se)| se.params(&format!("{prefix}.tap{i}")))
            .collect()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.se_blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, se)| se.params_mut(&format!("{prefix}.tap{i}")))
            .collect()
    }
}

/// Combine tapped and final feature maps into one feature vector of width
/// sum(tap channels) + final channels, independent of spatial sizes.
pub fn fuse_features(
    taps: &[Tensor],
    final_map: &Tensor,
    head: &FusionHead,
    attention: bool,
) -> Result<Tensor> {
    if taps.len() != head.tap_channels.len() {
        return Err(Error::config(format!(
            "fuse_features: {} taps but head expects {}",
            taps.len(),
            head.tap_channels.len()
        )));
    }
    if attention != head.attention() {
        return Err(Error::config(format!(
            "fuse_features: attention={attention} but head has {} se blocks",
            head.se_blocks.len()
        )));
    }
    let mut pooled = Vec::with_capacity(taps.len() + 1);
    for (i, tap) in taps.iter().enumerate() {
        match tap.shape() {
            [_, c, _, _] if *c == head.tap_channels[i] => {}
            other => {
                return Err(Error::config(format!(
                    "fuse_features: tap {i} has shape {other:?}, expected {} channels",
                    head.tap_channels[i]
                )))
            }
        }
        let weighted = if attention {
            head.se_blocks[i].apply(tap)?
        } else {
            tap.clone()
        };
        pooled.push(weighted.global_avg_pool()?);
    }
    pooled.push(final_map.global_avg_pool()?);
    Tensor::concat_cols(&pooled)
}
