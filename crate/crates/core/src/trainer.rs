//! Dataset preparation, joint augmentation, unrolled training and validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{encode_events, normalize_tensor, Event, EventTensor};
use crate::image::{FlowField, Image};
use crate::losses::{
    flow_tensor, graph_reconstruction_loss, graph_temporal_loss, mask_tensor, LossConfig, ReconKind,
};
use crate::metrics::{ssim, temporal_error, SSIM_WINDOW};
use crate::nn::{
    adam_step, e2vid_forward, AdamConfig, AdamState, BnRecord, BoundWeights, Graph, LstmVars, Mode,
    ModelWeights, NetworkConfig, RecurrentState, SkipMode, StepContext, Tensor4,
};
use crate::simulator::{parse_key_values, SimSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Square crop side; `0` keeps the full sensor.
    pub crop: usize,
    pub rotation_deg: f64,
    pub flip_prob: f64,
    pub augment: bool,
    pub loss: LossConfig,
    pub seed: u64,
    /// When false the ConvLSTM state is reset to zero before every window.
    pub recurrent: bool,
    /// Stop after this many optimizer steps; `0` means no limit.
    pub max_steps: usize,
    /// Epoch number of the first epoch run (for resumed training).
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 160,
            batch_size: 2,
            lr: 1e-4,
            crop: 128,
            rotation_deg: 20.0,
            flip_prob: 0.5,
            augment: true,
            loss: LossConfig::default(),
            seed: 0,
            recurrent: true,
            max_steps: 0,
            start_epoch: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean `{v}` for `{key}`"))),
    }
}

/// Keys accepted by [`apply_setting`].
pub const SETTING_KEYS: [&str; 21] = [
    "num_encoders",
    "num_residual",
    "base_channels",
    "skip",
    "input_bins",
    "unroll",
    "epochs",
    "batch_size",
    "lr",
    "crop",
    "rotation_deg",
    "flip_prob",
    "augment",
    "lambda_tc",
    "alpha",
    "l0",
    "recon",
    "seed",
    "recurrent",
    "max_steps",
    "start_epoch",
];

/// Sets one network or training key. Unknown keys are an error.
pub fn apply_setting(net: &mut NetworkConfig, tc: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "num_encoders" => net.num_encoders = parse(key, v)?,
        "num_residual" => net.num_residual = parse(key, v)?,
        "base_channels" => net.base_channels = parse(key, v)?,
        "skip" => net.skip = v.parse()?,
        "input_bins" => net.input_bins = parse(key, v)?,
        "unroll" => net.unroll = parse(key, v)?,
        "epochs" => tc.epochs = parse(key, v)?,
        "batch_size" => tc.batch_size = parse(key, v)?,
        "lr" => tc.lr = parse(key, v)?,
        "crop" => tc.crop = parse(key, v)?,
        "rotation_deg" => tc.rotation_deg = parse(key, v)?,
        "flip_prob" => tc.flip_prob = parse(key, v)?,
        "augment" => tc.augment = parse_bool(key, v)?,
        "lambda_tc" => tc.loss.lambda_tc = parse(key, v)?,
        "alpha" => tc.loss.alpha = parse(key, v)?,
        "l0" => tc.loss.l0 = parse(key, v)?,
        "recon" => tc.loss.recon = v.parse()?,
        "seed" => tc.seed = parse(key, v)?,
        "recurrent" => tc.recurrent = parse_bool(key, v)?,
        "max_steps" => tc.max_steps = parse(key, v)?,
        "start_epoch" => tc.start_epoch = parse(key, v)?,
        _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Applies a flat `key=value` config file.
pub fn apply_config_text(net: &mut NetworkConfig, tc: &mut TrainConfig, text: &str) -> Result<()> {
    for (k, v) in parse_key_values(text)? {
        apply_setting(net, tc, &k, &v)?;
    }
    Ok(())
}

/// Every key with its resolved value, one `key=value` per line.
pub fn config_manifest(net: &NetworkConfig, tc: &TrainConfig) -> String {
    let recon = match tc.loss.recon {
        ReconKind::L1 => "l1",
        ReconKind::Mse => "mse",
    };
    let mut s = String::new();
    let _ = write!(
        s,
        "num_encoders={}\nnum_residual={}\nbase_channels={}\nskip={}\ninput_bins={}\nunroll={}\n\
         epochs={}\nbatch_size={}\nlr={}\ncrop={}\nrotation_deg={}\nflip_prob={}\naugment={}\n\
         lambda_tc={}\nalpha={}\nl0={}\nrecon={}\nseed={}\nrecurrent={}\nmax_steps={}\nstart_epoch={}\n",
        net.num_encoders,
        net.num_residual,
        net.base_channels,
        net.skip.as_str(),
        net.input_bins,
        net.unroll,
        tc.epochs,
        tc.batch_size,
        tc.lr,
        tc.crop,
        tc.rotation_deg,
        tc.flip_prob,
        tc.augment,
        tc.loss.lambda_tc,
        tc.loss.alpha,
        tc.loss.l0,
        recon,
        tc.seed,
        tc.recurrent,
        tc.max_steps,
        tc.start_epoch,
    );
    s
}

impl TrainConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        net.validate()?;
        self.loss.validate(net.unroll)?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip probability must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Deterministic sequence-level split: `round(ratio * n)` sequences go to
/// training, at least one to each side.
pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 sequences to split, got {}",
            items.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n_train = ((items.len() as f64 * ratio).round() as usize).clamp(1, items.len() - 1);
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n_train);
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((
        a.iter().map(|&i| items[i].clone()).collect(),
        b.iter().map(|&i| items[i].clone()).collect(),
    ))
}

/// A simulated sequence cut into windows aligned with its ground-truth frames:
/// window `k` holds the events between frames `k` and `k+1` and is supervised
/// by frame `k+1`.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub name: String,
    /// Raw (unnormalized) voxel grids.
    pub windows: Vec<EventTensor>,
    pub frames: Vec<Image>,
    /// `flows[k]` maps pixels of `frames[k+1]` into `frames[k]`.
    pub flows: Vec<FlowField>,
    /// Window end times.
    pub times: Vec<f64>,
}

impl PreparedSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }
}

/// Voxel grid of a possibly empty window.
pub fn encode_or_zeros(events: &[Event], bins: usize, height: usize, width: usize) -> Result<EventTensor> {
    if events.is_empty() {
        Ok(EventTensor::zeros(bins, height, width))
    } else {
        encode_events(events, bins, height, width)
    }
}

pub fn prepare_sequence(seq: &SimSequence, bins: usize, name: &str) -> Result<PreparedSequence> {
    let n = seq.gt_frames.len();
    if n < 2 || seq.gt_times.len() != n || seq.gt_flows.len() + 1 != n {
        return Err(Error::format(format!(
            "{name}: {} frames, {} timestamps, {} flows",
            n,
            seq.gt_times.len(),
            seq.gt_flows.len()
        )));
    }
    let (w, h) = (seq.width(), seq.height());
    let ev = seq.events.events();
    let mut windows = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let lo = ev.partition_point(|e| e.t < seq.gt_times[k]);
        let hi = if k + 2 == n {
            ev.partition_point(|e| e.t <= seq.gt_times[k + 1])
        } else {
            ev.partition_point(|e| e.t < seq.gt_times[k + 1])
        };
        windows.push(encode_or_zeros(&ev[lo..hi], bins, h, w)?);
    }
    Ok(PreparedSequence {
        name: name.to_string(),
        windows,
        frames: seq.gt_frames[1..].to_vec(),
        flows: seq.gt_flows[1..].to_vec(),
        times: seq.gt_times[1..].to_vec(),
    })
}

pub fn prepare_dataset(seqs: &[SimSequence], bins: usize) -> Result<Vec<PreparedSequence>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| prepare_sequence(s, bins, &format!("seq_{i:04}")))
        .collect()
}

/// `L` consecutive windows with their targets and the `L-1` flows between
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub tensors: Vec<EventTensor>,
    pub frames: Vec<Image>,
    pub flows: Vec<FlowField>,
}

impl TrainSample {
    pub fn from_sequence(seq: &PreparedSequence, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > seq.len() {
            return Err(Error::invalid(format!(
                "{}: windows {start}..{} of {}",
                seq.name,
                start + len,
                seq.len()
            )));
        }
        Ok(Self {
            tensors: seq.windows[start..start + len].to_vec(),
            frames: seq.frames[start..start + len].to_vec(),
            flows: seq.flows[start..start + len - 1].to_vec(),
        })
    }
}

/// Non-overlapping `(sequence, start)` chunks of length `len`.
pub fn sample_index(seqs: &[PreparedSequence], len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let mut start = 0;
        while start + len <= s.len() {
            out.push((i, start));
            start += len;
        }
    }
    out
}

/// One draw of the geometric augmentation: rotation about the image centre,
/// optional flips, then a crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub angle: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub out_width: usize,
    pub out_height: usize,
    pub src_width: usize,
    pub src_height: usize,
}

impl Augmentation {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            angle: 0.0,
            flip_h: false,
            flip_v: false,
            crop_x: 0,
            crop_y: 0,
            out_width: width,
            out_height: height,
            src_width: width,
            src_height: height,
        }
    }

    pub fn draw(rng: &mut ChaCha8Rng, width: usize, height: usize, cfg: &TrainConfig) -> Result<Self> {
        let crop = if cfg.crop == 0 { width.min(height) } else { cfg.crop };
        if crop > width || crop > height {
            return Err(Error::invalid(format!(
                "crop {crop} exceeds the {width}x{height} sensor"
            )));
        }
        let max_angle = cfg.rotation_deg.to_radians();
        Ok(Self {
            angle: if max_angle > 0.0 { rng.random_range(-max_angle..=max_angle) } else { 0.0 },
            flip_h: rng.random_bool(cfg.flip_prob),
            flip_v: rng.random_bool(cfg.flip_prob),
            crop_x: rng.random_range(0..=width - crop),
            crop_y: rng.random_range(0..=height - crop),
            out_width: crop,
            out_height: crop,
            src_width: width,
            src_height: height,
        })
    }

    /// Linear part `A` of the forward map.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        [[fx * c, -fx * s], [fy * s, fy * c]]
    }

    /// Source position of output pixel `(x, y)`.
    pub fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = (self.src_width as f64 - 1.0, self.src_height as f64 - 1.0);
        let mut u = x + self.crop_x as f64;
        let mut v = y + self.crop_y as f64;
        if self.flip_h {
            u = w - u;
        }
        if self.flip_v {
            v = h - v;
        }
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - cx, v - cy);
        (c * du + s * dv + cx, -s * du + c * dv + cy)
    }

    fn sources(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.out_width * self.out_height);
        for y in 0..self.out_height {
            for x in 0..self.out_width {
                out.push(self.source_of(x as f64, y as f64));
            }
        }
        out
    }

    fn resample(&self, img: &Image, src: &[(f64, f64)]) -> Image {
        let data = src.iter().map(|&(x, y)| img.sample_or(x, y, 0.0)).collect();
        Image::from_vec(self.out_width, self.out_height, data).unwrap()
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        self.resample(img, &self.sources())
    }

    /// Resamples each bin independently.
    pub fn apply_tensor(&self, t: &EventTensor) -> EventTensor {
        let src = self.sources();
        let plane = t.height * t.width;
        let mut out = EventTensor::zeros(t.bins, self.out_height, self.out_width);
        let n = self.out_width * self.out_height;
        for b in 0..t.bins {
            let img = Image {
                width: t.width,
                height: t.height,
                data: t.values[b * plane..(b + 1) * plane].to_vec(),
            };
            let r = self.resample(&img, &src);
            out.values[b * n..(b + 1) * n].copy_from_slice(&r.data);
        }
        out
    }

    /// Resamples the field and maps each vector through the linear part.
    pub fn apply_flow(&self, f: &FlowField) -> FlowField {
        let src = self.sources();
        let dx = Image { width: f.width, height: f.height, data: f.dx.clone() };
        let dy = Image { width: f.width, height: f.height, data: f.dy.clone() };
        let (rx, ry) = (self.resample(&dx, &src), self.resample(&dy, &src));
        let a = self.linear();
        let mut out = FlowField::zeros(self.out_width, self.out_height);
        for i in 0..rx.data.len() {
            let (u, v) = (rx.data[i], ry.data[i]);
            out.dx[i] = a[0][0] * u + a[0][1] * v;
            out.dy[i] = a[1][0] * u + a[1][1] * v;
        }
        out
    }

    pub fn apply(&self, s: &TrainSample) -> TrainSample {
        TrainSample {
            tensors: s.tensors.iter().map(|t| self.apply_tensor(t)).collect(),
            frames: s.frames.iter().map(|f| self.apply_image(f)).collect(),
            flows: s.flows.iter().map(|f| self.apply_flow(f)).collect(),
        }
    }
}

/// Draws one transform and applies it to every tensor, frame and flow.
pub fn augment(sample: &TrainSample, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<TrainSample> {
    let f = sample
        .frames
        .first()
        .ok_or_else(|| Error::invalid("empty training sample"))?;
    Ok(Augmentation::draw(rng, f.width, f.height, cfg)?.apply(sample))
}

/// Loss values and parameter gradients of one unrolled batch.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    /// Mean reconstruction term per unrolled step.
    pub recon: f64,
    /// Mean temporal term over the steps where it is counted.
    pub temporal: f64,
    pub grads: BTreeMap<String, Tensor4>,
    pub bn_records: Vec<BnRecord>,
}

fn stacked<T>(batch: &[TrainSample], j: usize, f: impl Fn(&TrainSample, usize) -> T, g: impl Fn(&[T]) -> Result<Tensor4>) -> Result<Tensor4> {
    let items: Vec<T> = batch.iter().map(|s| f(s, j)).collect();
    g(&items)
}

/// Runs `L` steps from zero state with training-mode batch norm, accumulates
/// the reconstruction and temporal terms, and backpropagates once through the
/// whole unroll.
pub fn compute_gradients(
    weights: &ModelWeights,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    recurrent: bool,
    batch: &[TrainSample],
) -> Result<StepOutcome> {
    let len = batch
        .first()
        .map(|s| s.tensors.len())
        .ok_or_else(|| Error::invalid("empty batch"))?;
    if batch.iter().any(|s| s.tensors.len() != len || s.frames.len() != len || s.flows.len() + 1 != len) {
        return Err(Error::shape("batch samples disagree in length"));
    }
    let mut g = Graph::new();
    let bound = BoundWeights::bind(&mut g, weights, true);
    let mut records = Vec::new();
    let mut ctx = StepContext {
        config: net,
        weights: &bound,
        mode: Mode::Train,
        bn_records: &mut records,
    };
    let mut state: Option<Vec<LstmVars>> = None;
    let mut prev: Option<(crate::nn::Var, Tensor4)> = None;
    let mut recon_terms = Vec::new();
    let mut temporal_terms = Vec::new();
    let first_tc = loss_cfg.l0.max(1);
    for j in 0..len {
        let x = stacked(
            batch,
            j,
            |s, j| Tensor4::from_event_tensor(&normalize_tensor(s.tensors[j].clone())),
            Tensor4::stack,
        )?;
        let target = stacked(batch, j, |s, j| Tensor4::from_image(&s.frames[j]), Tensor4::stack)?;
        let xv = g.input(x);
        let st = if recurrent { state.as_deref() } else { None };
        let (pred, next) = ctx.forward(&mut g, xv, st)?;
        state = Some(next);
        let tv = g.input(target.clone());
        recon_terms.push(graph_reconstruction_loss(&mut g, pred, tv, loss_cfg.recon)?);
        if let Some((prev_pred, prev_target)) = &prev {
            if j >= first_tc && loss_cfg.lambda_tc != 0.0 {
                let flows: Vec<&FlowField> = batch.iter().map(|s| &s.flows[j - 1]).collect();
                let ft = flow_tensor(&flows)?;
                let mask = mask_tensor(&target, prev_target, &ft, loss_cfg.alpha)?;
                let mv = g.input(mask);
                temporal_terms.push(graph_temporal_loss(&mut g, pred, *prev_pred, &ft, mv)?);
            }
        }
        prev = Some((pred, target));
    }
    let mut recon_sum = recon_terms[0];
    for t in &recon_terms[1..] {
        recon_sum = g.add(recon_sum, *t)?;
    }
    let mut total = recon_sum;
    let mut tc_value = 0.0;
    if !temporal_terms.is_empty() {
        let mut tc = temporal_terms[0];
        for t in &temporal_terms[1..] {
            tc = g.add(tc, *t)?;
        }
        tc_value = g.value(tc).item() / temporal_terms.len() as f64;
        let scaled = g.scale(tc, loss_cfg.lambda_tc);
        total = g.add(total, scaled)?;
    }
    let loss = g.value(total).item();
    let recon = g.value(recon_sum).item() / len as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let grads = g.backward(total)?;
    let grads = bound
        .vars()
        .iter()
        .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v, weights.params[k].shape())))
        .collect();
    Ok(StepOutcome {
        loss,
        recon,
        temporal: tc_value,
        grads,
        bn_records: records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSnapshot {
    /// Mean per-frame reconstruction loss (the configured kind).
    pub recon_loss: f64,
    pub l1: f64,
    pub temporal_error: f64,
    pub ssim: f64,
    pub frames: usize,
}

/// Eval-mode reconstructions of every window of `seq`, threading state
/// unless `recurrent` is false.
pub fn predict_sequence(
    weights: &ModelWeights,
    net: &NetworkConfig,
    seq: &PreparedSequence,
    recurrent: bool,
) -> Result<Vec<Image>> {
    let mut state: Option<RecurrentState> = None;
    let mut out = Vec::with_capacity(seq.len());
    for t in &seq.windows {
        let x = Tensor4::from_event_tensor(&normalize_tensor(t.clone()));
        let carry = if recurrent { state.as_ref() } else { None };
        let (img, next) = e2vid_forward(&x, carry, weights, net, Mode::Eval)?;
        state = Some(next);
        out.push(img.image(0, 0));
    }
    Ok(out)
}

pub fn validate(
    weights: &ModelWeights,
    net: &NetworkConfig,
    seqs: &[PreparedSequence],
    loss_cfg: &LossConfig,
    recurrent: bool,
) -> Result<ValidationSnapshot> {
    let (mut recon, mut l1, mut ssim_sum, mut frames) = (0.0, 0.0, 0.0, 0usize);
    let mut tc = 0.0;
    let mut ssim_frames = 0usize;
    for seq in seqs {
        let preds = predict_sequence(weights, net, seq, recurrent)?;
        for (p, gt) in preds.iter().zip(&seq.frames) {
            recon += crate::losses::reconstruction_loss(p, gt, loss_cfg.recon)?;
            l1 += crate::losses::reconstruction_loss(p, gt, ReconKind::L1)?;
            if p.width >= SSIM_WINDOW && p.height >= SSIM_WINDOW {
                ssim_sum += ssim(p, gt)?;
                ssim_frames += 1;
            }
            frames += 1;
        }
        tc += temporal_error(&preds, &seq.flows, &seq.frames, loss_cfg.alpha)?;
    }
    let n = frames.max(1) as f64;
    Ok(ValidationSnapshot {
        recon_loss: recon / n,
        l1: l1 / n,
        temporal_error: tc / seqs.len().max(1) as f64,
        ssim: if ssim_frames > 0 { ssim_sum / ssim_frames as f64 } else { f64::NAN },
        frames,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_recon: f64,
    pub train_temporal: f64,
    pub optimizer_steps: usize,
    pub val: Option<ValidationSnapshot>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Weights hold the last finite state.
    Diverged { epoch: usize, step: usize, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub optimizer_steps: usize,
    pub status: TrainStatus,
}

impl TrainReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_recon,train_temporal,steps,val_recon,val_l1,val_temporal_error,val_ssim\n");
        for e in &self.epochs {
            let (a, b, c, d) = e
                .val
                .as_ref()
                .map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |v| (v.recon_loss, v.l1, v.temporal_error, v.ssim));
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.train_loss, e.train_recon, e.train_temporal, e.optimizer_steps, a, b, c, d
            );
        }
        s
    }
}

/// Trains in place over epochs `start_epoch..epochs`. Each epoch shuffles the
/// non-overlapping `L`-window chunks of all training sequences, augments each chunk, and takes one Adam step per
/// batch. A non-finite loss or gradient stops training with the weights from
/// before the failing step.
pub fn train(
    weights: &mut ModelWeights,
    adam: &mut AdamState,
    net: &NetworkConfig,
    train_set: &[PreparedSequence],
    val_set: &[PreparedSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate(net)?;
    weights.validate(net)?;
    let index = sample_index(train_set, net.unroll);
    if index.is_empty() {
        return Err(Error::invalid(format!(
            "no training sample of {} windows fits the dataset",
            net.unroll
        )));
    }
    let adam_cfg = AdamConfig::default();
    let mut report = TrainReport {
        epochs: Vec::new(),
        optimizer_steps: 0,
        status: TrainStatus::Completed,
    };
    'epochs: for epoch in cfg.start_epoch..cfg.epochs {
        // one stream per epoch so a resumed run draws what an uninterrupted one would
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order = index.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut recon_sum, mut tc_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && report.optimizer_steps >= cfg.max_steps {
                break;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &(si, start) in chunk {
                let s = TrainSample::from_sequence(&train_set[si], start, net.unroll)?;
                batch.push(if cfg.augment { augment(&s, &mut rng, cfg)? } else { s });
            }
            let step = compute_gradients(weights, net, &cfg.loss, cfg.recurrent, &batch)
                .and_then(|out| {
                    adam_step(&mut weights.params, &out.grads, adam, cfg.lr, &adam_cfg)?;
                    Ok(out)
                });
            let out = match step {
                Ok(out) => out,
                Err(Error::Numeric(message)) => {
                    report.status = TrainStatus::Diverged {
                        epoch,
                        step: report.optimizer_steps,
                        message,
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            weights.apply_bn_updates(&out.bn_records)?;
            report.optimizer_steps += 1;
            loss_sum += out.loss;
            recon_sum += out.recon;
            tc_sum += out.temporal;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(validate(weights, net, val_set, &cfg.loss, cfg.recurrent)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_recon: recon_sum / batches as f64,
            train_temporal: tc_sum / batches as f64,
            optimizer_steps: report.optimizer_steps,
            val,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// The architecture grid: `N_E × N_R × skip × N_b`.
pub fn sweep_grid(base: &NetworkConfig) -> Vec<NetworkConfig> {
    let mut out = Vec::new();
    for ne in [2, 3, 4] {
        for nr in [0, 1, 2] {
            for skip in [SkipMode::Sum, SkipMode::Concat] {
                for nb in [8, 16, 32, 64] {
                    out.push(NetworkConfig {
                        num_encoders: ne,
                        num_residual: nr,
                        skip,
                        base_channels: nb,
                        ..*base
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub config: NetworkConfig,
    pub params: usize,
    pub val_loss: f64,
    /// Mean eval-mode forward time per window.
    pub ms_per_window: f64,
}

/// Trains every configuration for the budget in `cfg` and measures
/// validation loss and inference time. Rows are sorted by validation loss.
pub fn sweep(
    grid: &[NetworkConfig],
    train_set: &[PreparedSequence],
    val_set: &[PreparedSequence],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if val_set.is_empty() {
        return Err(Error::invalid("sweep needs a validation set"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for net in grid {
        let mut w = ModelWeights::init(net, cfg.seed)?;
        let mut adam = AdamState::default();
        train(&mut w, &mut adam, net, train_set, val_set, cfg, |_| {})?;
        let snap = validate(&w, net, val_set, &cfg.loss, cfg.recurrent)?;
        let started = Instant::now();
        let mut windows = 0;
        for seq in val_set {
            windows += predict_sequence(&w, net, seq, cfg.recurrent)?.len();
        }
        let ms = started.elapsed().as_secs_f64() * 1e3 / windows.max(1) as f64;
        let row = SweepRow {
            config: *net,
            params: w.param_count(),
            val_loss: snap.recon_loss,
            ms_per_window: ms.max(f64::MIN_POSITIVE),
        };
        on_row(&row);
        rows.push(row);
    }
    rows.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("num_encoders,num_residual,skip,base_channels,params,val_loss,ms_per_window\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.4}",
            r.config.num_encoders,
            r.config.num_residual,
            r.config.skip.as_str(),
            r.config.base_channels,
            r.params,
            r.val_loss,
            r.ms_per_window
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::backward_warp;
    use crate::simulator::{simulate_sequence, SimConfig};

    fn desk_net() -> NetworkConfig {
        NetworkConfig {
            num_encoders: 2,
            num_residual: 1,
            base_channels: 4,
            skip: SkipMode::Sum,
            input_bins: 5,
            unroll: 3,
        }
    }

    fn prepared(seed: u64, size: usize) -> PreparedSequence {
        let cfg = SimConfig { width: size, height: size, duration: 0.2, seed, ..SimConfig::default() };
        prepare_sequence(&simulate_sequence(&cfg).unwrap(), 5, "s").unwrap()
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let items: Vec<usize> = (0..20).collect();
        let (a, b) = split_dataset(&items, 0.95, 7).unwrap();
        assert_eq!((a.len(), b.len()), (19, 1));
        assert_eq!(split_dataset(&items, 0.95, 7).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert!(split_dataset(&items[..1], 0.5, 0).is_err());
    }

    #[test]
    fn settings_round_trip_through_manifest() {
        let (mut net, mut tc) = (NetworkConfig::default(), TrainConfig::default());
        apply_config_text(&mut net, &mut tc, "# desk\nnum_encoders=2\nskip=concat\nlambda_tc=0\nrecon=mse\naugment=false\n").unwrap();
        assert_eq!(net.num_encoders, 2);
        assert_eq!(net.skip, SkipMode::Concat);
        assert_eq!(tc.loss.lambda_tc, 0.0);
        let (mut net2, mut tc2) = (NetworkConfig::default(), TrainConfig::default());
        apply_config_text(&mut net2, &mut tc2, &config_manifest(&net, &tc)).unwrap();
        assert_eq!((net2, tc2), (net, tc));
        assert!(apply_setting(&mut net, &mut TrainConfig::default(), "bogus", "1").is_err());
        assert_eq!(config_manifest(&net, &TrainConfig::default()).lines().count(), SETTING_KEYS.len());
    }

    #[test]
    fn windows_align_with_frames() {
        let cfg = SimConfig { width: 16, height: 16, duration: 0.2, seed: 1, ..SimConfig::default() };
        let seq = simulate_sequence(&cfg).unwrap();
        let p = prepare_sequence(&seq, 5, "s").unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p.flows.len(), 8);
        let total: f64 = p.windows.iter().map(|w| w.sum()).sum();
        assert!((total - seq.events.polarity_sum() as f64).abs() < 1e-9);
    }

    #[test]
    fn identity_augmentation_and_flips() {
        let p = prepared(2, 24);
        let s = TrainSample::from_sequence(&p, 0, 3).unwrap();
        assert_eq!(Augmentation::identity(24, 24).apply(&s), s);
        let flip = Augmentation { flip_h: true, ..Augmentation::identity(24, 24) };
        let f = flip.apply(&s);
        for y in 0..24 {
            for x in 0..24 {
                assert_eq!(f.flows[0].dx[y * 24 + x], -s.flows[0].dx[y * 24 + 23 - x]);
                assert_eq!(f.flows[0].dy[y * 24 + x], s.flows[0].dy[y * 24 + 23 - x]);
            }
        }
        for (a, b) in f.tensors.iter().zip(&s.tensors) {
            assert_eq!(a.sum(), b.sum());
        }
    }

    #[test]
    fn augmented_flow_still_warps() {
        let p = prepared(3, 48);
        let s = TrainSample::from_sequence(&p, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TrainConfig { crop: 32, ..TrainConfig::default() };
        for _ in 0..5 {
            let a = augment(&s, &mut rng, &cfg).unwrap();
            let warped = backward_warp(&a.frames[0], &a.flows[0]).unwrap();
            let mut worst: f64 = 0.0;
            for y in 4..28 {
                for x in 4..28 {
                    let (src_x, src_y) = (x as f64, y as f64);
                    let mv = a.flows[0].dx[y * 32 + x].abs().max(a.flows[0].dy[y * 32 + x].abs());
                    let _ = (src_x, src_y, mv);
                    worst = worst.max((warped.get(x, y) - a.frames[1].get(x, y)).abs());
                }
            }
            assert!(worst < 0.15, "{worst}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let p = prepared(4, 32);
        let net = desk_net();
        let w = ModelWeights::init(&net, 0).unwrap();
        let batch = vec![TrainSample::from_sequence(&p, 0, 3).unwrap()];
        let out = compute_gradients(&w, &net, &LossConfig::default(), true, &batch).unwrap();
        for (k, g) in &out.grads {
            assert!(g.max_abs() > 0.0, "no gradient reaches `{k}`");
        }
        assert!(out.loss > 0.0 && out.temporal > 0.0);
    }

    #[test]
    fn epoch_bookkeeping_and_determinism() {
        let p = prepared(5, 24);
        let net = NetworkConfig { unroll: 4, ..desk_net() };
        // 9 windows -> 2 samples of 4
        assert_eq!(sample_index(std::slice::from_ref(&p), 4).len(), 2);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, crop: 16, lr: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut w = ModelWeights::init(&net, 1).unwrap();
            let mut adam = AdamState::default();
            let r = train(&mut w, &mut adam, &net, std::slice::from_ref(&p), std::slice::from_ref(&p), &cfg, |_| {}).unwrap();
            (w, r)
        };
        let (w1, r1) = run();
        let (w2, r2) = run();
        assert_eq!(r1.optimizer_steps, 2);
        assert_eq!(r1.epochs[0].optimizer_steps, 1);
        assert_eq!(r1, r2);
        assert_eq!(w1, w2);
        let v1 = validate(&w1, &net, std::slice::from_ref(&p), &cfg.loss, true).unwrap();
        assert_eq!(v1, validate(&w1, &net, std::slice::from_ref(&p), &cfg.loss, true).unwrap());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let p = prepared(5, 24);
        let net = NetworkConfig { unroll: 4, ..desk_net() };
        let cfg = TrainConfig { epochs: 3, batch_size: 1, crop: 16, lr: 1e-3, ..TrainConfig::default() };
        let data = std::slice::from_ref(&p);
        let mut w = ModelWeights::init(&net, 2).unwrap();
        let mut adam = AdamState::default();
        let full = train(&mut w, &mut adam, &net, data, &[], &cfg, |_| {}).unwrap();

        let mut w2 = ModelWeights::init(&net, 2).unwrap();
        let mut adam2 = AdamState::default();
        train(&mut w2, &mut adam2, &net, data, &[], &TrainConfig { epochs: 1, ..cfg.clone() }, |_| {}).unwrap();
        let rest = train(&mut w2, &mut adam2, &net, data, &[], &TrainConfig { start_epoch: 1, ..cfg.clone() }, |_| {}).unwrap();
        assert_eq!(rest.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(rest.epochs.last().unwrap().train_loss, full.epochs.last().unwrap().train_loss);
        assert_eq!(w2, w);
        assert_eq!(adam2, adam);
    }

    #[test]
    fn grid_has_72_configs_and_channels_grow_params() {
        let grid = sweep_grid(&NetworkConfig::default());
        assert_eq!(grid.len(), 72);
        for c in &grid {
            let bigger = NetworkConfig { base_channels: c.base_channels * 2, ..*c };
            assert!(bigger.param_count() > c.param_count());
        }
        for c in grid.iter().filter(|c| c.base_channels <= 16 && c.num_encoders <= 3) {
            assert_eq!(ModelWeights::init(c, 0).unwrap().param_count(), c.param_count());
        }
    }
}
