//! Differentiable tensor operations.
//!
//! Summation order is fixed everywhere (documented per op), so repeated
//! runs on identical inputs produce bitwise identical results.

use super::{GradCtx, Tensor};
use crate::error::{Error, Result};

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Silu,
}

/// Numerically stable logistic function, clamped to the open interval
/// (0, 1): at saturation the exp rounds to exactly 0/1, which would violate
/// the excitation range contract. Built on the branch-light exp so
/// activation loops vectorize.
#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    let e = super::fastexp::exp_approx(-x.abs());
    let num = if x >= 0.0 { 1.0 } else { e };
    let s = num / (1.0 + e);
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Expect a rank-4 [N,C,H,W] tensor and return its extents.
fn dims4(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::shape(format!(
            "{op}: expected rank-4 N,C,H,W tensor, got shape {other:?}"
        ))),
    }
}

fn dims2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        other => Err(Error::shape(format!(
            "{op}: expected rank-2 tensor, got shape {other:?}"
        ))),
    }
}

impl Tensor {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &GradCtx<'_>| {
                let g = || ctx.upstream.to_vec();
                Ok(vec![
                    ctx.needs(0).then(g),
                    ctx.needs(1).then(g),
                ])
            }),
        )
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &GradCtx<'_>| {
                Ok(vec![
                    ctx.needs(0).then(|| ctx.upstream.to_vec()),
                    ctx.needs(1)
                        .then(|| ctx.upstream.iter().map(|g| -g).collect()),
                ])
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &GradCtx<'_>| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                Ok(vec![
                    ctx.needs(0)
                        .then(|| ctx.upstream.iter().zip(b).map(|(g, b)| g * b).collect()),
                    ctx.needs(1)
                        .then(|| ctx.upstream.iter().zip(a).map(|(g, a)| g * a).collect()),
                ])
            }),
        )
    }

    /// Multiply by a scalar constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                Ok(vec![ctx
                    .needs(0)
                    .then(|| ctx.upstream.iter().map(|g| g * c).collect())])
            }),
        )
    }

    /// Elementwise activation.
    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Silu => self.silu(),
        }
    }

    /// max(x, 0).
    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &GradCtx<'_>| {
                Ok(vec![ctx.needs(0).then(|| {
                    ctx.upstream
                        .iter()
                        .zip(ctx.parents[0].data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect()
                })])
            }),
        )
    }

    /// Logistic sigmoid; output strictly inside (0, 1).
    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| stable_sigmoid(v)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &GradCtx<'_>| {
                Ok(vec![ctx.needs(0).then(|| {
                    ctx.upstream
                        .iter()
                        .zip(ctx.out)
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect()
                })])
            }),
        )
    }

    /// x * sigmoid(x). The forward sigmoid values are captured for the
    /// backward pass so the exp is not recomputed.
    pub fn silu(&self) -> Result<Tensor> {
        let sig: Vec<f64> = self.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let data = self.data().iter().zip(&sig).map(|(x, s)| x * s).collect();
        Tensor::from_op(
            "silu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                Ok(vec![ctx.needs(0).then(|| {
                    ctx.upstream
                        .iter()
                        .zip(ctx.parents[0].data())
                        .zip(&sig)
                        .map(|((g, &x), &s)| g * s * (1.0 + x * (1.0 - s)))
                        .collect()
                })])
            }),
        )
    }

    /// Mean over the spatial plane of each channel: [N,C,H,W] -> [N,C,1,1].
    pub fn reduce_mean_spatial(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4("reduce_mean_spatial", self)?;
        if h == 0 || w == 0 {
            return Err(Error::shape(
                "reduce_mean_spatial: H and W must be >= 1".to_string(),
            ));
        }
        let (data, grad_fn) = spatial_mean_parts(self, n, c, h, w);
        Tensor::from_op(
            "reduce_mean_spatial",
            vec![n, c, 1, 1],
            data,
            vec![self.clone()],
            grad_fn,
        )
    }

    /// Mean over the spatial plane, dropping the spatial axes:
    /// [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4("global_avg_pool", self)?;
        if h == 0 || w == 0 {
            return Err(Error::shape(
                "global_avg_pool: H and W must be >= 1".to_string(),
            ));
        }
        let (data, grad_fn) = spatial_mean_parts(self, n, c, h, w);
        Tensor::from_op("global_avg_pool", vec![n, c], data, vec![self.clone()], grad_fn)
    }

    /// Affine map out = x . w^T + b with x:[N,Din], w:[Dout,Din], b:[Dout].
    /// The reduction runs over input features in ascending order.
    pub fn dense(&self, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (n, din) = dims2("dense", self)?;
        let (dout, win) = dims2("dense", weights)?;
        if din != win {
            return Err(Error::shape(format!(
                "dense: input feature dim {din} does not match weight inner dim {win}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::shape(format!(
                    "dense: bias shape {:?} does not match output dim {dout}",
                    b.shape()
                )));
            }
        }
        let x = self.data();
        let w = weights.data();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xi = &x[i * din..(i + 1) * din];
            let oi = &mut out[i * dout..(i + 1) * dout];
            for (d, o) in oi.iter_mut().enumerate() {
                let wd = &w[d * din..(d + 1) * din];
                let mut acc = 0.0;
                for (xv, wv) in xi.iter().zip(wd) {
                    acc += xv * wv;
                }
                *o = acc;
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for row in out.chunks_exact_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut parents = vec![self.clone(), weights.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            "dense",
            vec![n, dout],
            out,
            parents,
            Box::new(move |ctx: &GradCtx<'_>| {
                let x = ctx.parents[0].data();
                let w = ctx.parents[1].data();
                let g = ctx.upstream;
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![0.0; n * din];
                    for i in 0..n {
                        let gi = &g[i * dout..(i + 1) * dout];
                        let dxi = &mut dx[i * din..(i + 1) * din];
                        for (d, &gv) in gi.iter().enumerate() {
                            let wd = &w[d * din..(d + 1) * din];
                            for (dv, wv) in dxi.iter_mut().zip(wd) {
                                *dv += gv * wv;
                            }
                        }
                    }
                    dx
                });
                let dw = ctx.needs(1).then(|| {
                    let mut dw = vec![0.0; dout * din];
                    for i in 0..n {
                        let gi = &g[i * dout..(i + 1) * dout];
                        let xi = &x[i * din..(i + 1) * din];
                        for (d, &gv) in gi.iter().enumerate() {
                            let dwd = &mut dw[d * din..(d + 1) * din];
                            for (dv, xv) in dwd.iter_mut().zip(xi) {
                                *dv += gv * xv;
                            }
                        }
                    }
                    dw
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(ctx.needs(2).then(|| {
                        let mut db = vec![0.0; dout];
                        for gi in g.chunks_exact(dout) {
                            for (dv, gv) in db.iter_mut().zip(gi) {
                                *dv += gv;
                            }
                        }
                        db
                    }));
                }
                Ok(grads)
            }),
        )
    }

    /// Concatenate rank-2 tensors along the feature axis:
    /// [N,C1], [N,C2], ... -> [N, C1+C2+...].
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols: no inputs".to_string()));
        }
        let (n, _) = dims2("concat_cols", &parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc) = dims2("concat_cols", p)?;
            if pn != n {
                return Err(Error::shape(format!(
                    "concat_cols: row count {pn} does not match {n}"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (p, &wd) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + wd]
                    .copy_from_slice(&src[i * wd..(i + 1) * wd]);
            }
            offset += wd;
        }
        let widths_bw = widths.clone();
        Tensor::from_op(
            "concat_cols",
            vec![n, total],
            out,
            parts.to_vec(),
            Box::new(move |ctx: &GradCtx<'_>| {
                let mut grads = Vec::with_capacity(widths_bw.len());
                let mut offset = 0;
                for (idx, &wd) in widths_bw.iter().enumerate() {
                    grads.push(ctx.needs(idx).then(|| {
                        let mut dg = vec![0.0; n * wd];
                        for i in 0..n {
                            dg[i * wd..(i + 1) * wd].copy_from_slice(
                                &ctx.upstream[i * total + offset..i * total + offset + wd],
                            );
                        }
                        dg
                    }));
                    offset += wd;
                }
                Ok(grads)
            }),
        )
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &GradCtx<'_>| {
                Ok(vec![ctx.needs(0).then(|| ctx.upstream.to_vec())])
            }),
        )
    }

    /// Per-channel rescale: out[n,c,i,j] = u[n,c,i,j] * s[n,c].
    pub fn scale_channels(&self, scales: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4("scale_channels", self)?;
        let (sn, sc) = dims2("scale_channels", scales)?;
        if sn != n || sc != c {
            return Err(Error::shape(format!(
                "scale_channels: scale shape {:?} does not match feature map channels {n}x{c}",
                scales.shape()
            )));
        }
        let plane = h * w;
        let u = self.data();
        let s = scales.data();
        let mut out = vec![0.0; u.len()];
        for nc in 0..n * c {
            let sv = s[nc];
            let up = &u[nc * plane..(nc + 1) * plane];
            let op = &mut out[nc * plane..(nc + 1) * plane];
            for (o, uv) in op.iter_mut().zip(up) {
                *o = uv * sv;
            }
        }
        Tensor::from_op(
            "scale_channels",
            self.shape().to_vec(),
            out,
            vec![self.clone(), scales.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let u = ctx.parents[0].data();
                let s = ctx.parents[1].data();
                let g = ctx.upstream;
                let du = ctx.needs(0).then(|| {
                    let mut du = vec![0.0; u.len()];
                    for nc in 0..n * c {
                        let sv = s[nc];
                        let gp = &g[nc * plane..(nc + 1) * plane];
                        let dp = &mut du[nc * plane..(nc + 1) * plane];
                        for (d, gv) in dp.iter_mut().zip(gp) {
                            *d = gv * sv;
                        }
                    }
                    du
                });
                let ds = ctx.needs(1).then(|| {
                    let mut ds = vec![0.0; n * c];
                    for nc in 0..n * c {
                        let gp = &g[nc * plane..(nc + 1) * plane];
                        let up = &u[nc * plane..(nc + 1) * plane];
                        let mut acc = 0.0;
                        for (gv, uv) in gp.iter().zip(up) {
                            acc += gv * uv;
                        }
                        ds[nc] = acc;
                    }
                    ds
                });
                Ok(vec![du, ds])
            }),
        )
    }

    /// Learnable per-channel scale and shift:
    /// out[n,c,i,j] = x[n,c,i,j] * gamma[c] + beta[c].
    pub fn channel_affine(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4("channel_affine", self)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "channel_affine: gamma {:?} / beta {:?} must both have shape [{c}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let plane = h * w;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (gv, bv) = (gm[ci], bt[ci]);
                for (o, xv) in out[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                    *o = xv * gv + bv;
                }
            }
        }
        Tensor::from_op(
            "channel_affine",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let x = ctx.parents[0].data();
                let gm = ctx.parents[1].data();
                let g = ctx.upstream;
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![0.0; x.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let gv = gm[ci];
                            for (d, up) in
                                dx[base..base + plane].iter_mut().zip(&g[base..base + plane])
                            {
                                *d = up * gv;
                            }
                        }
                    }
                    dx
                });
                let dgamma = ctx.needs(1).then(|| {
                    let mut dg = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mut acc = 0.0;
                            for (up, xv) in g[base..base + plane].iter().zip(&x[base..base + plane])
                            {
                                acc += up * xv;
                            }
                            dg[ci] += acc;
                        }
                    }
                    dg
                });
                let dbeta = ctx.needs(2).then(|| {
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mut acc = 0.0;
                            for up in &g[base..base + plane] {
                                acc += up;
                            }
                            db[ci] += acc;
                        }
                    }
                    db
                });
                Ok(vec![dx, dgamma, dbeta])
            }),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let mut acc = 0.0;
        for v in self.data() {
            acc += v;
        }
        let n = self.numel();
        let _ = n;
        Tensor::from_op(
            "sum_all",
            vec![],
            vec![acc],
            vec![self.clone()],
            Box::new(|ctx: &GradCtx<'_>| {
                let g = ctx.upstream[0];
                Ok(vec![ctx
                    .needs(0)
                    .then(|| vec![g; ctx.parents[0].numel()])])
            }),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::usage("mean_all: empty tensor".to_string()));
        }
        let inv = 1.0 / self.numel() as f64;
        let mut acc = 0.0;
        for v in self.data() {
            acc += v;
        }
        Tensor::from_op(
            "mean_all",
            vec![],
            vec![acc * inv],
            vec![self.clone()],
            Box::new(move |ctx: &GradCtx<'_>| {
                let g = ctx.upstream[0] * inv;
                Ok(vec![ctx
                    .needs(0)
                    .then(|| vec![g; ctx.parents[0].numel()])])
            }),
        )
    }
}

fn spatial_mean_parts(
    x: &Tensor,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, super::GradFn) {
    let plane = h * w;
    let inv = 1.0 / plane as f64;
    let src = x.data();
    let mut out = vec![0.0; n * c];
    for (nc, o) in out.iter_mut().enumerate() {
        let p = &src[nc * plane..(nc + 1) * plane];
        let mut acc = 0.0;
        for v in p {
            acc += v;
        }
        *o = acc * inv;
    }
    let grad_fn: super::GradFn = Box::new(move |ctx: &GradCtx<'_>| {
        Ok(vec![ctx.needs(0).then(|| {
            let mut dx = vec![0.0; n * c * plane];
            for nc in 0..n * c {
                let gv = ctx.upstream[nc] * inv;
                for d in &mut dx[nc * plane..(nc + 1) * plane] {
                    *d = gv;
                }
            }
            dx
        })])
    });
    (out, grad_fn)
}

/// Mean binary cross-entropy over sigmoid logits, in the stabilized
/// log-sum-exp form: max(z,0) - z*y + ln(1 + exp(-|z|)).
///
/// `targets` are constants in {0,1}; the gradient w.r.t. each logit is
/// (sigmoid(z) - y) / N.
pub fn bce_with_logits(logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let n = logits.numel();
    if n == 0 {
        return Err(Error::usage("bce_with_logits: empty logits".to_string()));
    }
    if n != targets.len() {
        return Err(Error::shape(format!(
            "bce_with_logits: {n} logits vs {} targets",
            targets.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|t| **t != 0.0 && **t != 1.0) {
        return Err(Error::data(format!(
            "bce_with_logits: target {bad} outside {{0,1}}"
        )));
    }
    let z = logits.data();
    let mut acc = 0.0;
    let mut sig = Vec::with_capacity(n);
    for (zi, yi) in z.iter().zip(targets) {
        acc += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        sig.push(stable_sigmoid(*zi));
    }
    let inv = 1.0 / n as f64;
    let targets = targets.to_vec();
    Tensor::from_op(
        "bce_with_logits",
        vec![],
        vec![acc * inv],
        vec![logits.clone()],
        Box::new(move |ctx: &GradCtx<'_>| {
            let g = ctx.upstream[0] * inv;
            Ok(vec![ctx.needs(0).then(|| {
                sig.iter()
                    .zip(&targets)
                    .map(|(s, y)| g * (s - y))
                    .collect()
            })])
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::tests::random_tensor;

    #[test]
    fn sigmoid_symmetry_point() {
        let x = Tensor::from_vec(&[1], vec![0.0], false).unwrap();
        assert_eq!(x.sigmoid().unwrap().data()[0], 0.5);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(&[2], vec![-3.2, 3.2], false).unwrap();
        assert_eq!(x.relu().unwrap().data(), &[0.0, 3.2]);
    }

    #[test]
    fn silu_matches_scalar_composition_oracle() {
        let mut rng = CounterRng::new(11);
        let x = random_tensor(&mut rng, &[64], false);
        let got = x.silu().unwrap();
        for (&xv, &yv) in x.data().iter().zip(got.data()) {
            let expect = xv * stable_sigmoid(xv);
            assert!((yv - expect).abs() < 1e-15);
        }
        let zero = Tensor::from_vec(&[1], vec![0.0], false).unwrap();
        assert_eq!(zero.silu().unwrap().data()[0], 0.0);
    }

    #[test]
    fn sigmoid_saturation_stays_in_open_interval() {
        let x = Tensor::from_vec(&[2], vec![1000.0, -1000.0], false).unwrap();
        let y = x.sigmoid().unwrap();
        assert!(y.data()[0] < 1.0 && y.data()[0] > 0.99);
        assert!(y.data()[1] > 0.0 && y.data()[1] < 0.01);
    }

    #[test]
    fn reduce_mean_spatial_constant_plane() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![4.25; 9], false).unwrap();
        let y = x.reduce_mean_spatial().unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 4.25);
    }

    #[test]
    fn reduce_mean_spatial_small_plane_value() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        assert_eq!(x.reduce_mean_spatial().unwrap().data()[0], 2.5);
    }

    #[test]
    fn reduce_mean_spatial_matches_summation_oracle() {
        let mut rng = CounterRng::new(21);
        let x = random_tensor(&mut rng, &[3, 5, 7, 7], false);
        let y = x.reduce_mean_spatial().unwrap();
        for n in 0..3 {
            for c in 0..5 {
                let mut acc = 0.0;
                for i in 0..7 {
                    for j in 0..7 {
                        acc += x.data()[((n * 5 + c) * 7 + i) * 7 + j];
                    }
                }
                let expect = acc / 49.0;
                let got = y.data()[n * 5 + c];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_identity_and_constant_maps() {
        // weights = identity, bias = 0 -> output equals input
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::from_vec(&[3, 3], eye, false).unwrap();
        let b = Tensor::zeros(&[3], false);
        let y = x.dense(&w, Some(&b)).unwrap();
        assert_eq!(y.data(), x.data());

        // weights = 0, bias = b -> every row equals b
        let w0 = Tensor::zeros(&[3, 3], false);
        let b = Tensor::from_vec(&[3], vec![7.0, -1.0, 0.5], false).unwrap();
        let y = x.dense(&w0, Some(&b)).unwrap();
        assert_eq!(&y.data()[0..3], b.data());
        assert_eq!(&y.data()[3..6], b.data());
    }

    #[test]
    fn dense_matches_triple_loop_oracle() {
        let mut rng = CounterRng::new(31);
        let x = random_tensor(&mut rng, &[4, 6], false);
        let w = random_tensor(&mut rng, &[3, 6], false);
        let b = random_tensor(&mut rng, &[3], false);
        let y = x.dense(&w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[4, 3]);
        for i in 0..4 {
            for d in 0..3 {
                let mut acc = b.data()[d];
                for k in 0..6 {
                    acc += x.data()[i * 6 + k] * w.data()[d * 6 + k];
                }
                assert!((y.data()[i * 3 + d] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_dimension_mismatch_is_shape_error() {
        let x = Tensor::zeros(&[2, 3], false);
        let w = Tensor::zeros(&[4, 5], false);
        assert!(matches!(
            x.dense(&w, None),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn scale_channels_identity_zero_and_oracle() {
        let mut rng = CounterRng::new(41);
        let u = random_tensor(&mut rng, &[2, 3, 4, 4], false);

        let ones = Tensor::from_vec(&[2, 3], vec![1.0; 6], false).unwrap();
        assert_eq!(u.scale_channels(&ones).unwrap().data(), u.data());

        let zeros = Tensor::zeros(&[2, 3], false);
        assert!(u
            .scale_channels(&zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let s = random_tensor(&mut rng, &[2, 3], false);
        let y = u.scale_channels(&s).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..16 {
                    let idx = (n * 3 + c) * 16 + p;
                    let expect = u.data()[idx] * s.data()[n * 3 + c];
                    assert!((y.data()[idx] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn concat_cols_layout_and_backward_split() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![9.0, 8.0], true).unwrap();
        let y = Tensor::concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        // loss = sum(y * w) splits upstream back per part
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
        y.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn bce_with_logits_matches_direct_formula() {
        let z = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0], false).unwrap();
        let y = [1.0, 0.0, 1.0];
        let loss = bce_with_logits(&z, &y).unwrap().item().unwrap();
        let direct: f64 = z
            .data()
            .iter()
            .zip(&y)
            .map(|(&zi, &yi)| {
                let p = stable_sigmoid(zi);
                -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let z = Tensor::zeros(&[2], false);
        assert!(matches!(
            bce_with_logits(&z, &[0.0, 0.5]),
            Err(crate::error::Error::Data(_))
        ));
    }

    #[test]
    fn mean_preservation_through_broadcast() {
        // reduce_mean_spatial then broadcast-multiply of ones reproduces a
        // tensor whose spatial mean equals the original mean.
        let mut rng = CounterRng::new(51);
        let x = random_tensor(&mut rng, &[2, 4, 5, 5], false);
        let m = x.global_avg_pool().unwrap();
        let ones = Tensor::from_vec(&[2, 4, 5, 5], vec![1.0; 2 * 4 * 25], false).unwrap();
        let back = ones.scale_channels(&m).unwrap();
        let m2 = back.global_avg_pool().unwrap();
        for (a, b) in m.data().iter().zip(m2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
