//! Finite-difference verification of the backward pass.
//!
//! [`grad_check`] compares the analytic gradients of a scalar-valued
//! subgraph against central differences (f(x+e) - f(x-e)) / 2e and reports
//! the worst elementwise error: relative where the analytic value is
//! meaningful, absolute below 1e-8. [`check_all`] sweeps every
//! differentiable op plus the composed squeeze/excite/rescale block over
//! randomized instances; the CLI `gradcheck` subcommand is a thin wrapper
//! around it.

use super::ops::bce_with_logits;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Analytic gradient magnitudes below this use absolute instead of
/// relative error.
const ABS_ERROR_FLOOR: f64 = 1e-8;

/// Default central-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Worst-case gradient error of `builder` at `inputs`.
pub fn grad_check<F>(builder: &F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let analytic = analytic_gradients(builder, inputs)?;
    let numeric = numeric_gradients(builder, inputs, epsilon)?;
    Ok(max_gradient_error(&analytic, &numeric))
}

/// Gradients of the scalar subgraph w.r.t. every input, via backward.
pub fn analytic_gradients<F>(builder: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::from_vec(t.shape(), t.data().to_vec(), true))
        .collect::<Result<_>>()?;
    let out = builder(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::usage(format!(
            "grad_check requires a scalar subgraph output, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    Ok(leaves
        .iter()
        .map(|l| l.take_grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect())
}

/// Central-difference gradients of the scalar subgraph w.r.t. every input.
pub fn numeric_gradients<F>(builder: &F, inputs: &[Tensor], epsilon: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if epsilon <= 0.0 {
        return Err(Error::config("grad_check: epsilon must be positive".to_string()));
    }
    let eval = |probe: usize, data: Vec<f64>| -> Result<f64> {
        let rebuilt: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let d = if i == probe { data.clone() } else { t.data().to_vec() };
                Tensor::from_vec(t.shape(), d, false)
            })
            .collect::<Result<_>>()?;
        let out = builder(&rebuilt)?;
        if out.numel() != 1 {
            return Err(Error::usage(
                "grad_check requires a scalar subgraph output".to_string(),
            ));
        }
        out.item()
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let base = t.data();
        let mut g = vec![0.0; base.len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut plus = base.to_vec();
            plus[j] += epsilon;
            let mut minus = base.to_vec();
            minus[j] -= epsilon;
            *gj = (eval(i, plus)? - eval(i, minus)?) / (2.0 * epsilon);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst elementwise disagreement between two gradient sets.
pub fn max_gradient_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.iter().zip(n) {
            let err = if av.abs() < ABS_ERROR_FLOOR {
                (av - nv).abs()
            } else {
                (av - nv).abs() / av.abs().max(nv.abs())
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// Result of sweeping one op.
#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl OpGradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

/// Ops covered by [`check_all`].
pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

type InstanceFn = fn(&mut CounterRng) -> Result<f64>;

/// Uniform values in [lo, hi] with random sign, keeping ReLU-style kinks
/// away from the probe region.
fn signed_uniform(rng: &mut CounterRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_uniform(lo, hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data, false).expect("consistent shape")
}

fn rand_tensor(rng: &mut CounterRng, shape: &[usize]) -> Tensor {
    signed_uniform(rng, shape, 0.0, 1.0)
}

/// Weighted scalar readout so each output element receives a distinct
/// upstream gradient.
fn readout(t: &Tensor, w: &Tensor) -> Result<Tensor> {
    t.mul(w)?.sum_all()
}

const OPS: &[(&str, InstanceFn)] = &[
    ("add", |rng| {
        let x = rand_tensor(rng, &[2, 3]);
        let y = rand_tensor(rng, &[2, 3]);
        let w = rand_tensor(rng, &[2, 3]);
        grad_check(&|i: &[Tensor]| readout(&i[0].add(&i[1])?, &w), &[x, y], DEFAULT_EPSILON)
    }),
    ("sub", |rng| {
        let x = rand_tensor(rng, &[2, 3]);
        let y = rand_tensor(rng, &[2, 3]);
        let w = rand_tensor(rng, &[2, 3]);
        grad_check(&|i: &[Tensor]| readout(&i[0].sub(&i[1])?, &w), &[x, y], DEFAULT_EPSILON)
    }),
    ("mul", |rng| {
        let x = rand_tensor(rng, &[2, 3]);
        let y = rand_tensor(rng, &[2, 3]);
        let w = rand_tensor(rng, &[2, 3]);
        grad_check(&|i: &[Tensor]| readout(&i[0].mul(&i[1])?, &w), &[x, y], DEFAULT_EPSILON)
    }),
    ("scale", |rng| {
        let x = rand_tensor(rng, &[7]);
        let c = rng.gen_uniform(-2.0, 2.0);
        let w = rand_tensor(rng, &[7]);
        grad_check(&|i: &[Tensor]| readout(&i[0].scale(c)?, &w), &[x], DEFAULT_EPSILON)
    }),
    ("relu", |rng| {
        // keep probes away from the kink at 0
        let x = signed_uniform(rng, &[3, 5], 0.1, 1.0);
        let w = rand_tensor(rng, &[3, 5]);
        grad_check(&|i: &[Tensor]| readout(&i[0].relu()?, &w), &[x], DEFAULT_EPSILON)
    }),
    ("sigmoid", |rng| {
        let x = signed_uniform(rng, &[3, 5], 0.0, 3.0);
        let w = rand_tensor(rng, &[3, 5]);
        grad_check(&|i: &[Tensor]| readout(&i[0].sigmoid()?, &w), &[x], DEFAULT_EPSILON)
    }),
    ("silu", |rng| {
        let x = signed_uniform(rng, &[3, 5], 0.0, 3.0);
        let w = rand_tensor(rng, &[3, 5]);
        grad_check(&|i: &[Tensor]| readout(&i[0].silu()?, &w), &[x], DEFAULT_EPSILON)
    }),
    ("reduce_mean_spatial", |rng| {
        let x = rand_tensor(rng, &[2, 3, 4, 5]);
        let w = rand_tensor(rng, &[2, 3, 1, 1]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].reduce_mean_spatial()?, &w),
            &[x],
            DEFAULT_EPSILON,
        )
    }),
    ("global_avg_pool", |rng| {
        let x = rand_tensor(rng, &[2, 3, 4, 5]);
        let w = rand_tensor(rng, &[2, 3]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].global_avg_pool()?, &w),
            &[x],
            DEFAULT_EPSILON,
        )
    }),
    ("dense", |rng| {
        let x = rand_tensor(rng, &[3, 4]);
        let wt = rand_tensor(rng, &[2, 4]);
        let w = rand_tensor(rng, &[3, 2]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].dense(&i[1], None)?, &w),
            &[x, wt],
            DEFAULT_EPSILON,
        )
    }),
    ("dense_bias", |rng| {
        let x = rand_tensor(rng, &[3, 4]);
        let wt = rand_tensor(rng, &[2, 4]);
        let b = rand_tensor(rng, &[2]);
        let w = rand_tensor(rng, &[3, 2]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].dense(&i[1], Some(&i[2]))?, &w),
            &[x, wt, b],
            DEFAULT_EPSILON,
        )
    }),
    ("conv2d", |rng| {
        let x = rand_tensor(rng, &[1, 2, 5, 5]);
        let k = rand_tensor(rng, &[3, 2, 3, 3]);
        let w = rand_tensor(rng, &[1, 3, 5, 5]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].conv2d(&i[1], 1, 1, 1)?, &w),
            &[x, k],
            DEFAULT_EPSILON,
        )
    }),
    ("conv2d_strided", |rng| {
        let x = rand_tensor(rng, &[2, 2, 6, 6]);
        let k = rand_tensor(rng, &[3, 2, 3, 3]);
        let w = rand_tensor(rng, &[2, 3, 3, 3]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].conv2d(&i[1], 2, 1, 1)?, &w),
            &[x, k],
            DEFAULT_EPSILON,
        )
    }),
    ("conv2d_grouped", |rng| {
        let x = rand_tensor(rng, &[1, 4, 5, 5]);
        let k = rand_tensor(rng, &[4, 2, 3, 3]);
        let w = rand_tensor(rng, &[1, 4, 5, 5]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].conv2d(&i[1], 1, 1, 2)?, &w),
            &[x, k],
            DEFAULT_EPSILON,
        )
    }),
    ("conv2d_depthwise", |rng| {
        let x = rand_tensor(rng, &[1, 3, 6, 6]);
        let k = rand_tensor(rng, &[3, 1, 3, 3]);
        let w = rand_tensor(rng, &[1, 3, 3, 3]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].conv2d(&i[1], 2, 1, 3)?, &w),
            &[x, k],
            DEFAULT_EPSILON,
        )
    }),
    ("conv_unit", |rng| {
        // fused conv + channel affine + silu
        let x = rand_tensor(rng, &[1, 2, 5, 5]);
        let k = rand_tensor(rng, &[3, 2, 3, 3]);
        let gamma = signed_uniform(rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(rng, &[3]);
        let w = rand_tensor(rng, &[1, 3, 5, 5]);
        grad_check(
            &|i: &[Tensor]| {
                readout(
                    &i[0].conv_unit(
                        &i[1],
                        &i[2],
                        &i[3],
                        1,
                        1,
                        1,
                        Some(super::ops::Activation::Silu),
                    )?,
                    &w,
                )
            },
            &[x, k, gamma, beta],
            DEFAULT_EPSILON,
        )
    }),
    ("conv_unit_linear", |rng| {
        // fused conv + channel affine without activation (projection form)
        let x = rand_tensor(rng, &[1, 4, 6, 6]);
        let k = rand_tensor(rng, &[2, 4, 1, 1]);
        let gamma = signed_uniform(rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(rng, &[2]);
        let w = rand_tensor(rng, &[1, 2, 6, 6]);
        grad_check(
            &|i: &[Tensor]| {
                readout(&i[0].conv_unit(&i[1], &i[2], &i[3], 1, 0, 1, None)?, &w)
            },
            &[x, k, gamma, beta],
            DEFAULT_EPSILON,
        )
    }),
    ("scale_channels", |rng| {
        let u = rand_tensor(rng, &[2, 3, 4, 4]);
        let s = rand_tensor(rng, &[2, 3]);
        let w = rand_tensor(rng, &[2, 3, 4, 4]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].scale_channels(&i[1])?, &w),
            &[u, s],
            DEFAULT_EPSILON,
        )
    }),
    ("channel_affine", |rng| {
        let x = rand_tensor(rng, &[2, 3, 4, 4]);
        let gamma = rand_tensor(rng, &[3]);
        let beta = rand_tensor(rng, &[3]);
        let w = rand_tensor(rng, &[2, 3, 4, 4]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].channel_affine(&i[1], &i[2])?, &w),
            &[x, gamma, beta],
            DEFAULT_EPSILON,
        )
    }),
    ("concat_cols", |rng| {
        let a = rand_tensor(rng, &[2, 2]);
        let b = rand_tensor(rng, &[2, 3]);
        let c = rand_tensor(rng, &[2, 1]);
        let w = rand_tensor(rng, &[2, 6]);
        grad_check(
            &|i: &[Tensor]| readout(&Tensor::concat_cols(i)?, &w),
            &[a, b, c],
            DEFAULT_EPSILON,
        )
    }),
    ("reshape", |rng| {
        let x = rand_tensor(rng, &[2, 6]);
        let w = rand_tensor(rng, &[3, 4]);
        grad_check(
            &|i: &[Tensor]| readout(&i[0].reshape(&[3, 4])?, &w),
            &[x],
            DEFAULT_EPSILON,
        )
    }),
    ("sum_all", |rng| {
        let x = rand_tensor(rng, &[4, 3]);
        grad_check(&|i: &[Tensor]| i[0].sum_all(), &[x], DEFAULT_EPSILON)
    }),
    ("mean_all", |rng| {
        let x = rand_tensor(rng, &[4, 3]);
        grad_check(&|i: &[Tensor]| i[0].mean_all(), &[x], DEFAULT_EPSILON)
    }),
    ("bce_with_logits", |rng| {
        let z = signed_uniform(rng, &[6], 0.0, 2.0);
        let targets: Vec<f64> = (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        grad_check(
            &move |i: &[Tensor]| bce_with_logits(&i[0], &targets),
            &[z],
            DEFAULT_EPSILON,
        )
    }),
    ("se_block", |rng| {
        // squeeze -> excite -> rescale, the composed attention block
        let u = rand_tensor(rng, &[1, 4, 6, 6]);
        let w1 = rand_tensor(rng, &[1, 4]);
        let w2 = rand_tensor(rng, &[4, 1]);
        let w = rand_tensor(rng, &[1, 4, 6, 6]);
        grad_check(
            &|i: &[Tensor]| {
                let z = i[0].global_avg_pool()?;
                let s = z.dense(&i[1], None)?.relu()?.dense(&i[2], None)?.sigmoid()?;
                readout(&i[0].scale_channels(&s)?, &w)
            },
            &[u, w1, w2],
            DEFAULT_EPSILON,
        )
    }),
];

/// Run `instances` randomized gradient checks for the named op.
pub fn check_op(name: &str, instances: usize, seed: u64) -> Result<OpGradReport> {
    crate::perf::tune_allocator();
    let (op_name, f) = OPS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::usage(format!("unknown gradcheck op `{name}`")))?;
    let mut max_error = 0.0f64;
    for inst in 0..instances {
        let mut rng = CounterRng::substream(seed, CounterRng::stream_id(&[hash_name(name), inst as u64]));
        max_error = max_error.max(f(&mut rng)?);
    }
    Ok(OpGradReport {
        name: op_name,
        instances,
        max_error,
    })
}

/// Sweep all ops. Used by the `gradcheck --all` subcommand.
pub fn check_all(instances: usize, seed: u64) -> Result<Vec<OpGradReport>> {
    OPS.iter()
        .map(|(name, _)| check_op(name, instances, seed))
        .collect()
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, stable across platforms
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_case_is_essentially_exact() {
        let x = Tensor::from_vec(&[10], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect(), false)
            .unwrap();
        let err = grad_check(&|i: &[Tensor]| i[0].sum_all(), &[x], 1e-5).unwrap();
        assert!(err < 1e-8, "linear gradcheck error {err}");
    }

    #[test]
    fn se_block_composition_passes() {
        let rep = check_op("se_block", 5, 99).unwrap();
        assert!(rep.passed(1e-4), "se_block max error {}", rep.max_error);
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut rng = CounterRng::new(7);
        let x = super::rand_tensor(&mut rng, &[5]);
        let builder = |i: &[Tensor]| i[0].mul(&i[0])?.sum_all();
        let mut analytic = analytic_gradients(&builder, &[x.clone()]).unwrap();
        let numeric = numeric_gradients(&builder, &[x], 1e-5).unwrap();
        assert!(max_gradient_error(&analytic, &numeric) < 1e-8);
        // Perturb the analytic gradient; the harness must notice.
        for v in &mut analytic[0] {
            *v += 0.1;
        }
        assert!(max_gradient_error(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn backward_through_conv_sigmoid_matches_test_side_differences() {
        // Independent of the library harness: the finite differences here
        // are computed by this test.
        let mut rng = CounterRng::new(5);
        let x = super::rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let k = super::rand_tensor(&mut rng, &[2, 2, 3, 3]);

        let forward = |xd: &[f64], kd: &[f64]| -> f64 {
            let xt = Tensor::from_vec(&[1, 2, 5, 5], xd.to_vec(), false).unwrap();
            let kt = Tensor::from_vec(&[2, 2, 3, 3], kd.to_vec(), false).unwrap();
            xt.conv2d(&kt, 1, 0, 1)
                .unwrap()
                .sigmoid()
                .unwrap()
                .sum_all()
                .unwrap()
                .item()
                .unwrap()
        };

        let xt = Tensor::from_vec(&[1, 2, 5, 5], x.data().to_vec(), true).unwrap();
        let kt = Tensor::from_vec(&[2, 2, 3, 3], k.data().to_vec(), true).unwrap();
        xt.conv2d(&kt, 1, 0, 1)
            .unwrap()
            .sigmoid()
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gx = xt.grad().unwrap();
        let gk = kt.grad().unwrap();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for j in 0..x.numel() {
            let mut plus = x.data().to_vec();
            plus[j] += eps;
            let mut minus = x.data().to_vec();
            minus[j] -= eps;
            let fd = (forward(&plus, k.data()) - forward(&minus, k.data())) / (2.0 * eps);
            let rel = (gx[j] - fd).abs() / gx[j].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        for j in 0..k.numel() {
            let mut plus = k.data().to_vec();
            plus[j] += eps;
            let mut minus = k.data().to_vec();
            minus[j] -= eps;
            let fd = (forward(x.data(), &plus) - forward(x.data(), &minus)) / (2.0 * eps);
            let rel = (gk[j] - fd).abs() / gk[j].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn non_scalar_subgraph_is_rejected() {
        let x = Tensor::zeros(&[3], false);
        let err = grad_check(&|i: &[Tensor]| i[0].relu(), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, crate::error::Error::Usage(_)));
    }

    #[test]
    fn quick_sweep_over_all_ops() {
        for rep in check_all(3, 12345).unwrap() {
            assert!(
                rep.passed(1e-4),
                "op {} failed with max error {}",
                rep.name,
                rep.max_error
            );
        }
    }
}
