//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::network::{
    convlstm_step, residual_block, BoundWeights, LstmVars, Mode, ModelWeights, NetworkConfig,
    ResidualVars, SkipMode, StepContext,
};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckOp {
    Conv2d,
    Conv2dStrided,
    ConvLstm,
    BatchNorm,
    Upsample,
    Residual,
    Warp,
    Network,
}

impl GradCheckOp {
    pub const ALL: [GradCheckOp; 8] = [
        GradCheckOp::Conv2d,
        GradCheckOp::Conv2dStrided,
        GradCheckOp::ConvLstm,
        GradCheckOp::BatchNorm,
        GradCheckOp::Upsample,
        GradCheckOp::Residual,
        GradCheckOp::Warp,
        GradCheckOp::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCheckOp::Conv2d => "conv2d",
            GradCheckOp::Conv2dStrided => "conv2d-strided",
            GradCheckOp::ConvLstm => "convlstm",
            GradCheckOp::BatchNorm => "batchnorm",
            GradCheckOp::Upsample => "upsample",
            GradCheckOp::Residual => "residual",
            GradCheckOp::Warp => "warp",
            GradCheckOp::Network => "network",
        }
    }

    /// Input shape used when none is given.
    pub fn default_shape(self) -> [usize; 4] {
        match self {
            GradCheckOp::Network => [1, 5, 16, 16],
            GradCheckOp::ConvLstm => [1, 3, 6, 6],
            _ => [1, 3, 8, 8],
        }
    }
}

impl std::str::FromStr for GradCheckOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradCheckOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown gradient-check operation `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor4 {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// Compares the gradient of `sum(build(leaves) ⊙ R)` for a fixed random `R`
/// with central differences. At most `per_tensor` entries of each leaf are
/// probed.
pub fn check_function<F>(
    leaves: &[(String, Tensor4)],
    build: F,
    seed: u64,
    per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval = |values: &[Tensor4], proj: Option<&Tensor4>| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = match proj {
            Some(r) => {
                let r = g.input(r.clone());
                let p = g.mul(out, r)?;
                g.sum(p)
            }
            None => out,
        };
        Ok((g, vars, loss))
    };
    let values: Vec<Tensor4> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let out_shape = {
        let (g, _, out) = eval(&values, None)?;
        g.shape(out)
    };
    let proj = random_tensor(&mut rng, out_shape, 1.0);
    let (g, vars, loss) = eval(&values, Some(&proj))?;
    let grads = g.backward(loss)?;
    let loss_at = |values: &[Tensor4]| -> Result<f64> {
        let (g, _, loss) = eval(values, Some(&proj))?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = values.clone();
    for (li, (name, t)) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[li], t.shape());
        let picks: Vec<usize> = if t.len() <= per_tensor {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), per_tensor).into_vec()
        };
        for idx in picks {
            let orig = t.data()[idx];
            probe[li].data_mut()[idx] = orig + STEP;
            let up = loss_at(&probe)?;
            probe[li].data_mut()[idx] = orig - STEP;
            let down = loss_at(&probe)?;
            probe[li].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{name}[{idx}]");
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn leaf(name: &str, t: Tensor4) -> (String, Tensor4) {
    (name.to_string(), t)
}

/// Runs the gradient check for one operation. `shape` is the input shape;
/// auxiliary tensors are derived from it.
pub fn gradient_check(op: GradCheckOp, shape: [usize; 4], seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, h, w] = shape;
    if shape.contains(&0) {
        return Err(Error::invalid(format!("empty gradient-check shape {shape:?}")));
    }
    match op {
        GradCheckOp::Conv2d | GradCheckOp::Conv2dStrided => {
            let (k, stride, co) = if op == GradCheckOp::Conv2d { (3, 1, 4) } else { (5, 2, 3) };
            let leaves = vec![
                leaf("input", random_tensor(&mut rng, shape, 1.0)),
                leaf("weight", random_tensor(&mut rng, [co, c, k, k], 0.3)),
                leaf("bias", random_tensor(&mut rng, [1, co, 1, 1], 0.3)),
            ];
            check_function(&leaves, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2), seed, 64)
        }
        GradCheckOp::ConvLstm => {
            let steps = 3;
            let mut leaves = vec![
                leaf("weight", random_tensor(&mut rng, [4 * c, 2 * c, 3, 3], 0.3)),
                leaf("bias", random_tensor(&mut rng, [1, 4 * c, 1, 1], 0.3)),
                leaf("h0", random_tensor(&mut rng, shape, 0.5)),
                leaf("c0", random_tensor(&mut rng, shape, 0.5)),
            ];
            for s in 0..steps {
                leaves.push(leaf(&format!("x{s}"), random_tensor(&mut rng, shape, 1.0)));
            }
            check_function(
                &leaves,
                |g, v| {
                    let mut st = LstmVars { h: v[2], c: v[3] };
                    for s in 0..steps {
                        st = convlstm_step(g, v[4 + s], st, v[0], v[1])?;
                    }
                    // expose both outputs of the last step
                    let ch = g.concat(st.h, st.c)?;
                    Ok(ch)
                },
                seed,
                48,
            )
        }
        GradCheckOp::BatchNorm => {
            let leaves = vec![
                leaf("input", random_tensor(&mut rng, shape, 2.0)),
                leaf("weight", random_tensor(&mut rng, [1, c, 1, 1], 1.0)),
                leaf("bias", random_tensor(&mut rng, [1, c, 1, 1], 1.0)),
            ];
            check_function(&leaves, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], None)?.0), seed, 64)
        }
        GradCheckOp::Upsample => {
            let leaves = vec![leaf("input", random_tensor(&mut rng, shape, 1.0))];
            check_function(&leaves, |g, v| Ok(g.upsample2x(v[0])), seed, 256)
        }
        GradCheckOp::Residual => {
            let leaves = vec![
                leaf("input", random_tensor(&mut rng, shape, 1.0)),
                leaf("conv1", random_tensor(&mut rng, [c, c, 3, 3], 0.3)),
                leaf("bn1.weight", random_tensor(&mut rng, [1, c, 1, 1], 1.0)),
                leaf("bn1.bias", random_tensor(&mut rng, [1, c, 1, 1], 1.0)),
                leaf("conv2", random_tensor(&mut rng, [c, c, 3, 3], 0.3)),
                leaf("bn2.weight", random_tensor(&mut rng, [1, c, 1, 1], 1.0)),
                leaf("bn2.bias", random_tensor(&mut rng, [1, c, 1, 1], 1.0)),
            ];
            check_function(
                &leaves,
                |g, v| {
                    let p = ResidualVars {
                        conv1: v[1],
                        bn1: (v[2], v[3]),
                        conv2: v[4],
                        bn2: (v[5], v[6]),
                    };
                    residual_block(g, v[0], &p)
                },
                seed,
                48,
            )
        }
        GradCheckOp::Warp => {
            let flow = random_tensor(&mut rng, [n, 2, h, w], 1.5);
            let leaves = vec![leaf("input", random_tensor(&mut rng, shape, 1.0))];
            check_function(&leaves, move |g, v| g.warp(v[0], flow.clone()), seed, 256)
        }
        GradCheckOp::Network => {
            let config = NetworkConfig {
                num_encoders: 2,
                num_residual: 1,
                base_channels: 4,
                skip: SkipMode::Sum,
                input_bins: c,
                unroll: 2,
            };
            network_check(&config, shape, seed, 24)
        }
    }
}

/// Full recurrent network unrolled over `config.unroll` steps with
/// training-mode batch norm; every parameter and each input tensor is probed.
pub fn network_check(
    config: &NetworkConfig,
    shape: [usize; 4],
    seed: u64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::init(config, seed)?;
    // move batch-norm affine parameters off their trivial init
    for (k, t) in weights.params.iter_mut() {
        if k.contains("bn") {
            let jitter = random_tensor(&mut rng, t.shape(), 0.2);
            t.add_assign(&jitter);
        }
    }
    let keys: Vec<String> = weights.params.keys().cloned().collect();
    let mut leaves: Vec<(String, Tensor4)> = weights
        .params
        .iter()
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    for s in 0..config.unroll {
        leaves.push(leaf(&format!("input.{s}"), random_tensor(&mut rng, shape, 1.0)));
    }
    let np = keys.len();
    let buffers = weights.buffers.clone();
    check_function(
        &leaves,
        |g, v| {
            let mut params = std::collections::BTreeMap::new();
            for (k, var) in keys.iter().zip(v) {
                params.insert(k.clone(), g.value(*var).clone());
            }
            let shadow = ModelWeights {
                params,
                buffers: buffers.clone(),
            };
            let bound = BoundWeights::from_vars(&shadow, keys.iter().cloned().zip(v.iter().copied()));
            let mut records = Vec::new();
            let mut ctx = StepContext {
                config,
                weights: &bound,
                mode: Mode::Train,
                bn_records: &mut records,
            };
            let mut state: Option<Vec<LstmVars>> = None;
            let mut outs = Vec::new();
            for s in 0..config.unroll {
                let (img, next) = ctx.forward(g, v[np + s], state.as_deref())?;
                outs.push(img);
                state = Some(next);
            }
            let mut acc = outs[0];
            for o in &outs[1..] {
                acc = g.concat(acc, *o)?;
            }
            Ok(acc)
        },
        seed,
        per_tensor,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementary_ops_match_differences() {
        for op in GradCheckOp::ALL {
            if op == GradCheckOp::Network {
                continue;
            }
            let r = gradient_check(op, op.default_shape(), 3).unwrap();
            assert!(r.max_rel_err < 1e-4, "{op:?}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let leaves = vec![leaf("x", Tensor4::filled([1, 1, 1, 2], 0.5))];
        let r = check_function(
            &leaves,
            |g, v| {
                let sq = g.square(v[0]);
                // x * stop_grad(x^2): analytic 0.25, numeric 0.75
                let val = g.value(sq).clone();
                let c = g.input(val);
                g.mul(v[0], c)
            },
            0,
            8,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.1, "{r:?}");
    }
}
