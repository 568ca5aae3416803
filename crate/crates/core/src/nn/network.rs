//! Recurrent UNet: head conv, `N_E` strided-conv + ConvLSTM encoders, `N_R`
//! residual blocks, `N_E` upsample + conv decoders with skip connections, and a
//! sigmoid prediction layer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::kernels::{BnSaved, BN_MOMENTUM};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

const HEAD_KERNEL: usize = 5;
const DOWN_KERNEL: usize = 5;
const LSTM_KERNEL: usize = 3;
const RES_KERNEL: usize = 3;
const DEC_KERNEL: usize = 5;
const PRED_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    Sum,
    Concat,
}

impl SkipMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipMode::Sum => "sum",
            SkipMode::Concat => "concat",
        }
    }
}

impl std::str::FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(SkipMode::Sum),
            "concat" => Ok(SkipMode::Concat),
            _ => Err(Error::invalid(format!("skip mode must be sum|concat, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub num_encoders: usize,
    pub num_residual: usize,
    pub base_channels: usize,
    pub skip: SkipMode,
    pub input_bins: usize,
    /// Training unroll length.
    pub unroll: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_encoders: 3,
            num_residual: 2,
            base_channels: 32,
            skip: SkipMode::Sum,
            input_bins: 5,
            unroll: 40,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_encoders == 0 || self.base_channels == 0 || self.input_bins == 0 {
            return Err(Error::invalid(format!(
                "network needs N_E, N_b, B >= 1 (got {self:?})"
            )));
        }
        if self.unroll == 0 {
            return Err(Error::invalid("unroll length must be >= 1"));
        }
        Ok(())
    }

    /// Output channels of encoder `i` (1-based); `i = 0` is the head.
    pub fn encoder_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    fn join_channels(&self, c: usize) -> usize {
        match self.skip {
            SkipMode::Sum => c,
            SkipMode::Concat => 2 * c,
        }
    }

    /// Trainable parameters and running-statistics buffers with their shapes.
    /// Trainable scalar count without allocating weights.
    pub fn param_count(&self) -> usize {
        self.parameter_shapes().0.values().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn parameter_shapes(&self) -> (BTreeMap<String, [usize; 4]>, BTreeMap<String, [usize; 4]>) {
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut bn = |prefix: &str, c: usize, params: &mut BTreeMap<String, [usize; 4]>| {
            params.insert(format!("{prefix}.weight"), [1, c, 1, 1]);
            params.insert(format!("{prefix}.bias"), [1, c, 1, 1]);
            buffers.insert(format!("{prefix}.running_mean"), [1, c, 1, 1]);
            buffers.insert(format!("{prefix}.running_var"), [1, c, 1, 1]);
        };
        let nb = self.base_channels;
        params.insert(
            "head.conv.weight".into(),
            [nb, self.input_bins, HEAD_KERNEL, HEAD_KERNEL],
        );
        bn("head.bn", nb, &mut params);
        for i in 0..self.num_encoders {
            let (cin, cout) = (self.encoder_channels(i), self.encoder_channels(i + 1));
            params.insert(
                format!("encoders.{i}.down.weight"),
                [cout, cin, DOWN_KERNEL, DOWN_KERNEL],
            );
            bn(&format!("encoders.{i}.bn"), cout, &mut params);
            params.insert(
                format!("encoders.{i}.lstm.weight"),
                [4 * cout, 2 * cout, LSTM_KERNEL, LSTM_KERNEL],
            );
            params.insert(format!("encoders.{i}.lstm.bias"), [1, 4 * cout, 1, 1]);
        }
        let deep = self.encoder_channels(self.num_encoders);
        for j in 0..self.num_residual {
            params.insert(format!("resblocks.{j}.conv1.weight"), [deep, deep, RES_KERNEL, RES_KERNEL]);
            bn(&format!("resblocks.{j}.bn1"), deep, &mut params);
            params.insert(format!("resblocks.{j}.conv2.weight"), [deep, deep, RES_KERNEL, RES_KERNEL]);
            bn(&format!("resblocks.{j}.bn2"), deep, &mut params);
        }
        for l in 0..self.num_encoders {
            let cin = self.join_channels(self.encoder_channels(self.num_encoders - l));
            let cout = self.encoder_channels(self.num_encoders - l - 1);
            params.insert(format!("decoders.{l}.conv.weight"), [cout, cin, DEC_KERNEL, DEC_KERNEL]);
            bn(&format!("decoders.{l}.bn"), cout, &mut params);
        }
        params.insert(
            "pred.weight".into(),
            [1, self.join_channels(nb), PRED_KERNEL, PRED_KERNEL],
        );
        params.insert("pred.bias".into(), [1, 1, 1, 1]);
        (params, buffers)
    }
}

/// Learned parameters plus batch-norm running statistics, keyed by stable
/// dotted names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub params: BTreeMap<String, Tensor4>,
    pub buffers: BTreeMap<String, Tensor4>,
}

fn uniform_f32(rng: &mut ChaCha8Rng, shape: [usize; 4], bound: f64) -> Tensor4 {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.random_range(-bound..bound) as f32) as f64)
        .collect();
    Tensor4::from_vec(shape, data).unwrap()
}

impl ModelWeights {
    /// Kaiming-uniform convolutions, Xavier-uniform ConvLSTM gates, unit
    /// batch-norm scale, forget-gate bias 1. Values are rounded to `f32` so a
    /// fresh model survives a checkpoint round trip unchanged.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (shapes, buffer_shapes) = config.parameter_shapes();
        let mut params = BTreeMap::new();
        for (key, shape) in shapes {
            let [co, ci, kh, kw] = shape;
            let t = if key.ends_with("lstm.weight") {
                let bound = (6.0 / ((ci + co) * kh * kw) as f64).sqrt();
                uniform_f32(&mut rng, shape, bound)
            } else if key.ends_with("lstm.bias") {
                let hidden = ci / 4;
                let mut b = Tensor4::zeros(shape);
                // gate order i, f, o, g
                b.data_mut()[hidden..2 * hidden].fill(1.0);
                b
            } else if key.ends_with("bn.weight") || key.contains(".bn1.weight") || key.contains(".bn2.weight") {
                Tensor4::filled(shape, 1.0)
            } else if key.ends_with(".bias") {
                Tensor4::zeros(shape)
            } else {
                let bound = (6.0 / (ci * kh * kw) as f64).sqrt();
                uniform_f32(&mut rng, shape, bound)
            };
            params.insert(key, t);
        }
        let buffers = buffer_shapes
            .into_iter()
            .map(|(key, shape)| {
                let v = if key.ends_with("running_var") { 1.0 } else { 0.0 };
                (key, Tensor4::filled(shape, v))
            })
            .collect();
        Ok(Self { params, buffers })
    }

    /// Checks that keys and shapes agree with `config`.
    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        let (params, buffers) = config.parameter_shapes();
        for (want, have, kind) in [(&params, &self.params, "parameter"), (&buffers, &self.buffers, "buffer")] {
            for (key, shape) in want {
                match have.get(key) {
                    None => {
                        return Err(Error::ConfigMismatch {
                            key: key.clone(),
                            expected: format!("{shape:?}"),
                            found: format!("missing {kind}"),
                        })
                    }
                    Some(t) if t.shape() != *shape => {
                        return Err(Error::ConfigMismatch {
                            key: key.clone(),
                            expected: format!("{shape:?}"),
                            found: format!("{:?}", t.shape()),
                        })
                    }
                    _ => {}
                }
            }
            if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::ConfigMismatch {
                    key: extra.clone(),
                    expected: "absent".into(),
                    found: format!("unexpected {kind}"),
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn param(&self, key: &str) -> Result<&Tensor4> {
        self.params
            .get(key)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{key}`")))
    }

    fn buffer(&self, key: &str) -> Result<&Tensor4> {
        self.buffers
            .get(key)
            .ok_or_else(|| Error::invalid(format!("missing buffer `{key}`")))
    }

    /// Exponential running-average update from training-mode batch statistics.
    pub fn apply_bn_updates(&mut self, records: &[BnRecord]) -> Result<()> {
        for rec in records {
            for (suffix, values) in [("running_mean", &rec.saved.mean), ("running_var", &rec.saved.var_unbiased)] {
                let key = format!("{}.{suffix}", rec.prefix);
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::invalid(format!("missing buffer `{key}`")))?;
                for (r, v) in buf.data_mut().iter_mut().zip(values) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by one training-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnRecord {
    pub prefix: String,
    pub saved: BnSaved,
}

/// Hidden and cell state of one ConvLSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor4,
    pub c: Tensor4,
}

/// Per-encoder memory carried between windows.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<LstmState>,
}

/// Graph-side handles for recurrent state.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

/// Parameter handles bound into a graph.
pub struct BoundWeights<'w> {
    weights: &'w ModelWeights,
    vars: BTreeMap<String, Var>,
}

impl<'w> BoundWeights<'w> {
    /// Binds every parameter as a differentiable leaf (`trainable`) or as a
    /// constant.
    pub fn bind(g: &mut Graph, weights: &'w ModelWeights, trainable: bool) -> Self {
        let vars = weights
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self { weights, vars }
    }

    /// Uses existing graph nodes for the parameters; `weights` supplies the
    /// batch-norm running statistics.
    pub fn from_vars(weights: &'w ModelWeights, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            weights,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, key: &str) -> Result<Var> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{key}`")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

/// One forward step of the network on a graph.
pub struct StepContext<'a, 'w> {
    pub config: &'a NetworkConfig,
    pub weights: &'a BoundWeights<'w>,
    pub mode: Mode,
    pub bn_records: &'a mut Vec<BnRecord>,
}

impl StepContext<'_, '_> {
    fn bn(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.weights.var(&format!("{prefix}.weight"))?;
        let beta = self.weights.var(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, saved) = g.batch_norm(x, gamma, beta, None)?;
                self.bn_records.push(BnRecord {
                    prefix: prefix.to_string(),
                    saved,
                });
                Ok(y)
            }
            Mode::Eval => {
                let w = self.weights.weights;
                let rm = w.buffer(&format!("{prefix}.running_mean"))?;
                let rv = w.buffer(&format!("{prefix}.running_var"))?;
                Ok(g.batch_norm(x, gamma, beta, Some((rm, rv)))?.0)
            }
        }
    }

    fn conv_bn_relu(&mut self, g: &mut Graph, x: Var, conv: &str, bn: &str, stride: usize) -> Result<Var> {
        let w = self.weights.var(conv)?;
        let pad = g.shape(w)[2] / 2;
        let y = g.conv2d(x, w, None, stride, pad)?;
        let y = self.bn(g, y, bn)?;
        Ok(g.relu(y))
    }

    fn join(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        match self.config.skip {
            SkipMode::Sum => g.add(a, b),
            SkipMode::Concat => g.concat(a, b),
        }
    }

    /// `state = None` starts every encoder from zero memory. Returns the
    /// image prediction `[N, 1, H, W]` and the updated state.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        input: Var,
        state: Option<&[LstmVars]>,
    ) -> Result<(Var, Vec<LstmVars>)> {
        let cfg = *self.config;
        let [_, bins, _, _] = g.shape(input);
        if bins != cfg.input_bins {
            return Err(Error::shape(format!(
                "input has {bins} bins, network expects {}",
                cfg.input_bins
            )));
        }
        if let Some(s) = state {
            if s.len() != cfg.num_encoders {
                return Err(Error::shape(format!(
                    "state has {} layers, network has {} encoders",
                    s.len(),
                    cfg.num_encoders
                )));
            }
        }
        let head = self.conv_bn_relu(g, input, "head.conv.weight", "head.bn", 1)?;
        let mut skips = vec![head];
        let mut new_state = Vec::with_capacity(cfg.num_encoders);
        let mut level = head;
        for i in 0..cfg.num_encoders {
            let down = self.conv_bn_relu(
                g,
                level,
                &format!("encoders.{i}.down.weight"),
                &format!("encoders.{i}.bn"),
                2,
            )?;
            let prev = match state {
                Some(s) => s[i],
                None => {
                    let zeros = Tensor4::zeros(g.shape(down));
                    LstmVars {
                        h: g.input(zeros.clone()),
                        c: g.input(zeros),
                    }
                }
            };
            let w = self.weights.var(&format!("encoders.{i}.lstm.weight"))?;
            let b = self.weights.var(&format!("encoders.{i}.lstm.bias"))?;
            let next = convlstm_step(g, down, prev, w, b)?;
            new_state.push(next);
            skips.push(next.h);
            level = next.h;
        }
        let mut r = level;
        for j in 0..cfg.num_residual {
            r = self.residual(g, r, j)?;
        }
        let mut d = r;
        for l in 0..cfg.num_encoders {
            let joined = self.join(g, d, skips[cfg.num_encoders - l])?;
            let up = g.upsample2x(joined);
            let [_, _, th, tw] = g.shape(skips[cfg.num_encoders - l - 1]);
            let up = g.crop(up, th, tw)?;
            d = self.conv_bn_relu(
                g,
                up,
                &format!("decoders.{l}.conv.weight"),
                &format!("decoders.{l}.bn"),
                1,
            )?;
        }
        let joined = self.join(g, d, head)?;
        let pw = self.weights.var("pred.weight")?;
        let pb = self.weights.var("pred.bias")?;
        let logits = g.conv2d(joined, pw, Some(pb), 1, PRED_KERNEL / 2)?;
        Ok((g.sigmoid(logits), new_state))
    }

    fn residual(&mut self, g: &mut Graph, x: Var, j: usize) -> Result<Var> {
        let y = self.conv_bn_relu(
            g,
            x,
            &format!("resblocks.{j}.conv1.weight"),
            &format!("resblocks.{j}.bn1"),
            1,
        )?;
        let w2 = self.weights.var(&format!("resblocks.{j}.conv2.weight"))?;
        let y = g.conv2d(y, w2, None, 1, RES_KERNEL / 2)?;
        let y = self.bn(g, y, &format!("resblocks.{j}.bn2"))?;
        let y = g.add(y, x)?;
        Ok(g.relu(y))
    }
}

/// ConvLSTM cell without peepholes. Gates `i, f, o, g` come from one
/// convolution over `[x; h_prev]`.
pub fn convlstm_step(g: &mut Graph, x: Var, prev: LstmVars, w: Var, b: Var) -> Result<LstmVars> {
    let hidden = g.shape(x)[1];
    if g.shape(prev.h) != g.shape(x) || g.shape(prev.c) != g.shape(x) {
        return Err(Error::shape(format!(
            "ConvLSTM state {:?}/{:?} for input {:?}",
            g.shape(prev.h),
            g.shape(prev.c),
            g.shape(x)
        )));
    }
    let xh = g.concat(x, prev.h)?;
    let pad = g.shape(w)[2] / 2;
    let gates = g.conv2d(xh, w, Some(b), 1, pad)?;
    if g.shape(gates)[1] != 4 * hidden {
        return Err(Error::shape("ConvLSTM gate conv must output 4x hidden channels"));
    }
    let i = g.narrow(gates, 0, hidden)?;
    let i = g.sigmoid(i);
    let f = g.narrow(gates, hidden, hidden)?;
    let f = g.sigmoid(f);
    let o = g.narrow(gates, 2 * hidden, hidden)?;
    let o = g.sigmoid(o);
    let cand = g.narrow(gates, 3 * hidden, hidden)?;
    let cand = g.tanh(cand);
    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmVars { h, c })
}

/// Residual block `relu(bn2(conv2(relu(bn1(conv1(x))))) + x)` with
/// training-mode batch norm.
pub fn residual_block(g: &mut Graph, x: Var, p: &ResidualVars) -> Result<Var> {
    let pad = g.shape(p.conv1)[2] / 2;
    let y = g.conv2d(x, p.conv1, None, 1, pad)?;
    let (y, _) = g.batch_norm(y, p.bn1.0, p.bn1.1, None)?;
    let y = g.relu(y);
    let y = g.conv2d(y, p.conv2, None, 1, pad)?;
    let (y, _) = g.batch_norm(y, p.bn2.0, p.bn2.1, None)?;
    let y = g.add(y, x)?;
    Ok(g.relu(y))
}

pub struct ResidualVars {
    pub conv1: Var,
    pub bn1: (Var, Var),
    pub conv2: Var,
    pub bn2: (Var, Var),
}

fn state_vars(g: &mut Graph, state: &RecurrentState) -> Vec<LstmVars> {
    state
        .layers
        .iter()
        .map(|l| LstmVars {
            h: g.input(l.h.clone()),
            c: g.input(l.c.clone()),
        })
        .collect()
}

/// Runs one reconstruction step outside of training. `state = None` is the
/// zero state. The result is fully determined by the arguments.
pub fn e2vid_forward(
    tensor: &Tensor4,
    state: Option<&RecurrentState>,
    weights: &ModelWeights,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<(Tensor4, RecurrentState)> {
    let mut g = Graph::new();
    let bound = BoundWeights::bind(&mut g, weights, false);
    let input = g.input(tensor.clone());
    let svars = state.map(|s| state_vars(&mut g, s));
    let mut records = Vec::new();
    let mut ctx = StepContext {
        config,
        weights: &bound,
        mode,
        bn_records: &mut records,
    };
    let (img, next) = ctx.forward(&mut g, input, svars.as_deref())?;
    let layers = next
        .iter()
        .map(|s| LstmState {
            h: g.value(s.h).clone(),
            c: g.value(s.c).clone(),
        })
        .collect();
    Ok((g.value(img).clone(), RecurrentState { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            num_encoders: 2,
            num_residual: 1,
            base_channels: 4,
            skip: SkipMode::Sum,
            input_bins: 5,
            unroll: 2,
        }
    }

    #[test]
    fn channel_ledger() {
        for skip in [SkipMode::Sum, SkipMode::Concat] {
            let cfg = NetworkConfig { skip, ..NetworkConfig::default() };
            let (p, _) = cfg.parameter_shapes();
            for i in 0..3 {
                assert_eq!(p[&format!("encoders.{i}.down.weight")][0], 32 << (i + 1));
            }
            let factor = if skip == SkipMode::Sum { 1 } else { 2 };
            assert_eq!(p["decoders.0.conv.weight"][1], 256 * factor);
            assert_eq!(p["pred.weight"][1], 32 * factor);
        }
    }

    #[test]
    fn output_range_and_purity() {
        let cfg = tiny();
        let w = ModelWeights::init(&cfg, 1).unwrap();
        let x = Tensor4::from_vec([1, 5, 17, 15], (0..5 * 17 * 15).map(|i| ((i * 7) % 11) as f64 - 5.0).collect()).unwrap();
        let (a, sa) = e2vid_forward(&x, None, &w, &cfg, Mode::Eval).unwrap();
        let (b, sb) = e2vid_forward(&x, None, &w, &cfg, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.shape(), [1, 1, 17, 15]);
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(sa.layers[0].h.shape(), [1, 8, 9, 8]);
        assert_eq!(sa.layers[1].h.shape(), [1, 16, 5, 4]);
        let (c, _) = e2vid_forward(&x, Some(&sa), &w, &cfg, Mode::Eval).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn concat_network_runs() {
        let cfg = NetworkConfig { skip: SkipMode::Concat, num_residual: 0, ..tiny() };
        let w = ModelWeights::init(&cfg, 2).unwrap();
        let (img, _) = e2vid_forward(&Tensor4::zeros([1, 5, 16, 16]), None, &w, &cfg, Mode::Eval).unwrap();
        assert_eq!(img.shape(), [1, 1, 16, 16]);
    }

    #[test]
    fn validate_names_the_bad_key() {
        let w = ModelWeights::init(&tiny(), 0).unwrap();
        let other = NetworkConfig { num_encoders: 3, ..tiny() };
        let err = w.validate(&other).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");
        w.validate(&tiny()).unwrap();
    }

    #[test]
    fn zero_gate_weights_keep_half_the_cell() {
        let mut g = Graph::new();
        let x = g.input(Tensor4::filled([1, 2, 3, 3], 0.7));
        let h = g.input(Tensor4::filled([1, 2, 3, 3], -0.3));
        let c = g.input(Tensor4::filled([1, 2, 3, 3], 0.8));
        let w = g.param(Tensor4::zeros([8, 4, 3, 3]));
        let b = g.param(Tensor4::zeros([1, 8, 1, 1]));
        let next = convlstm_step(&mut g, x, LstmVars { h, c }, w, b).unwrap();
        // i = f = o = 0.5, g = 0: c = 0.5 c_prev, h = 0.5 tanh(c)
        assert!(g.value(next.c).data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        let want = 0.5 * 0.4f64.tanh();
        assert!(g.value(next.h).data().iter().all(|v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn zero_state_zero_input_stays_zero() {
        let mut g = Graph::new();
        let z = Tensor4::zeros([1, 2, 4, 4]);
        let x = g.input(z.clone());
        let h = g.input(z.clone());
        let c = g.input(z);
        let w = g.param(Tensor4::filled([8, 4, 3, 3], 0.3));
        let b = g.param(Tensor4::zeros([1, 8, 1, 1]));
        let next = convlstm_step(&mut g, x, LstmVars { h, c }, w, b).unwrap();
        assert!(g.value(next.h).data().iter().all(|v| *v == 0.0));
        assert!(g.value(next.c).data().iter().all(|v| *v == 0.0));
    }
}
