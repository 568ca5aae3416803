//! Inference-time orchestration: streaming reconstruction, post-processing,
//! high-framerate and color synthesis, and the decay diagnostic.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::{
    normalize_tensor, split_cfa, window_by_count, window_by_duration, window_by_duration_from, CfaChannel, CfaPattern,
    EventStream, EventTensor, EventWindow,
};
use crate::image::{Image, RgbImage};
use crate::nn::{e2vid_forward, Mode, ModelWeights, NetworkConfig, RecurrentState, Tensor4};
use crate::trainer::encode_or_zeros;

/// A reconstructed grayscale frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorFrame {
    pub timestamp: f64,
    pub image: RgbImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowPolicy {
    /// Fixed number of events; the frame is stamped with the last event time.
    Count(usize),
    /// Fixed duration in seconds; the frame is stamped with the window end.
    Duration(f64),
}

impl WindowPolicy {
    pub fn windows<'a>(&self, stream: &'a EventStream) -> Result<Vec<EventWindow<'a>>> {
        match *self {
            WindowPolicy::Count(n) => window_by_count(stream, n),
            WindowPolicy::Duration(tau) => window_by_duration(stream, tau),
        }
    }

    fn timestamp(&self, w: &EventWindow) -> f64 {
        match self {
            WindowPolicy::Count(_) => w.last_time(),
            WindowPolicy::Duration(_) => w.t_end,
        }
    }
}

/// Stateful reconstruction of one event stream. Weights are borrowed so
/// several reconstructors can share them.
#[derive(Clone, Debug)]
pub struct Reconstructor<'a> {
    pub weights: &'a ModelWeights,
    pub config: &'a NetworkConfig,
    pub policy: WindowPolicy,
    /// Apply robust min/max normalization to every output frame.
    pub postprocess: bool,
    /// Start of the first duration window; the first event time when `None`.
    pub origin: Option<f64>,
    state: Option<RecurrentState>,
}

impl<'a> Reconstructor<'a> {
    pub fn new(weights: &'a ModelWeights, config: &'a NetworkConfig, policy: WindowPolicy) -> Result<Self> {
        weights.validate(config)?;
        match policy {
            WindowPolicy::Count(0) => return Err(Error::invalid("window size must be at least 1 event")),
            WindowPolicy::Duration(t) if !(t > 0.0 && t.is_finite()) => {
                return Err(Error::invalid(format!("window duration must be > 0, got {t}")))
            }
            _ => {}
        }
        Ok(Self {
            weights,
            config,
            policy,
            postprocess: true,
            origin: None,
            state: None,
        })
    }

    pub fn with_postprocess(mut self, on: bool) -> Self {
        self.postprocess = on;
        self
    }

    pub fn with_origin(mut self, origin: f64) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    pub fn state(&self) -> Option<&RecurrentState> {
        self.state.as_ref()
    }

    /// Runs one voxel grid through the network and advances the state.
    /// Returns the raw sigmoid output.
    pub fn step_tensor(&mut self, tensor: &EventTensor) -> Result<Image> {
        let x = Tensor4::from_event_tensor(&normalize_tensor(tensor.clone()));
        let (out, next) = e2vid_forward(&x, self.state.as_ref(), self.weights, self.config, Mode::Eval)?;
        self.state = Some(next);
        Ok(out.image(0, 0))
    }

    pub fn step_window(&mut self, window: &EventWindow, width: usize, height: usize) -> Result<Frame> {
        let t = encode_or_zeros(window.events, self.config.input_bins, height, width)?;
        let raw = self.step_tensor(&t)?;
        Ok(Frame {
            timestamp: self.policy.timestamp(window),
            image: if self.postprocess { postprocess(&raw) } else { raw },
        })
    }

    pub fn run(&mut self, stream: &EventStream) -> Result<Vec<Frame>> {
        let (w, h) = (stream.width(), stream.height());
        let windows = match (self.policy, self.origin) {
            (WindowPolicy::Duration(tau), Some(origin)) => window_by_duration_from(stream, tau, origin)?,
            (p, _) => p.windows(stream)?,
        };
        windows
            .iter()
            .map(|win| self.step_window(win, w, h))
            .collect()
    }
}

/// One frame per window, threading the recurrent state across windows.
pub fn reconstruct_stream(stream: &EventStream, reconstructor: &mut Reconstructor) -> Result<Vec<Frame>> {
    reconstructor.run(stream)
}

/// Nearest-rank percentile of a sorted slice, `q` in `[0, 1]`: the order
/// statistic at `round(q·(n−1))`. Picking an actual sample keeps
/// [`postprocess`] exactly idempotent, since the chosen samples map to 0 and 1.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos]
}

/// Robust min/max normalization between the 1st and 99th percentiles. A
/// near-constant image maps to 0.5 everywhere.
pub fn postprocess(img: &Image) -> Image {
    let mut sorted = img.data.clone();
    sorted.sort_by(f64::total_cmp);
    let (m, big_m) = (percentile(&sorted, 0.01), percentile(&sorted, 0.99));
    if !(big_m - m >= 1e-3) {
        return Image::filled(img.width, img.height, 0.5);
    }
    let data = img
        .data
        .iter()
        .map(|v| ((v - m) / (big_m - m)).clamp(0.0, 1.0))
        .collect();
    Image { width: img.width, height: img.height, data }
}

/// Runs `N / D` reconstructors, the `j`-th skipping the first `j·D` events,
/// and interleaves their frames by timestamp (ties keep offset order).
pub fn hfr_synthesize(
    stream: &EventStream,
    weights: &ModelWeights,
    config: &NetworkConfig,
    n: usize,
    d: usize,
    postprocess: bool,
) -> Result<Vec<Frame>> {
    if d == 0 || n == 0 {
        return Err(Error::invalid("HFR needs N >= 1 and D >= 1"));
    }
    if d > n {
        return Err(Error::invalid(format!("shift D={d} exceeds window N={n}")));
    }
    if n % d != 0 {
        return Err(Error::invalid(format!("shift D={d} does not divide window N={n}")));
    }
    weights.validate(config)?;
    let per_offset: Vec<Vec<Frame>> = (0..n / d)
        .into_par_iter()
        .map(|j| {
            let mut r = Reconstructor::new(weights, config, WindowPolicy::Count(n))?.with_postprocess(postprocess);
            if j == 0 {
                r.run(stream)
            } else {
                r.run(&stream.skip(j * d))
            }
        })
        .collect::<Result<_>>()?;
    let mut merged: Vec<(usize, Frame)> = per_offset
        .into_iter()
        .enumerate()
        .flat_map(|(j, frames)| frames.into_iter().map(move |f| (j, f)))
        .collect();
    merged.sort_by(|a, b| a.1.timestamp.total_cmp(&b.1.timestamp).then(a.0.cmp(&b.0)));
    Ok(merged.into_iter().map(|(_, f)| f).collect())
}

/// Per-pixel exponential moving average.
pub fn deflicker(frames: &[Frame], strength: f64) -> Result<Vec<Frame>> {
    if !(0.0..1.0).contains(&strength) {
        return Err(Error::invalid(format!("deflicker strength must be in [0, 1), got {strength}")));
    }
    let mut out: Vec<Frame> = Vec::with_capacity(frames.len());
    for f in frames {
        let next = match out.last() {
            None => f.clone(),
            Some(prev) => {
                if !prev.image.same_size(&f.image) {
                    return Err(Error::shape("deflicker frames differ in size"));
                }
                let data = f
                    .image
                    .data
                    .iter()
                    .zip(&prev.image.data)
                    .map(|(a, b)| (1.0 - strength) * a + strength * b)
                    .collect();
                Frame {
                    timestamp: f.timestamp,
                    image: Image { width: f.image.width, height: f.image.height, data },
                }
            }
        };
        out.push(next);
    }
    Ok(out)
}

const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];
const LAB_EPS: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn mat3_inverse(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn mat3_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// sRGB in `[0, 1]` to CIE L*a*b* under D65.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let xyz = mat3_mul(&RGB_TO_XYZ, rgb.map(srgb_to_linear));
    let f = |t: f64| {
        if t > LAB_EPS {
            t.cbrt()
        } else {
            (LAB_KAPPA * t + 16.0) / 116.0
        }
    };
    let [fx, fy, fz] = [0, 1, 2].map(|i| f(xyz[i] / WHITE_D65[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab`]; the result is not clipped.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let finv = |f: f64| {
        let t = f * f * f;
        if t > LAB_EPS {
            t
        } else {
            (116.0 * f - 16.0) / LAB_KAPPA
        }
    };
    let xyz = [finv(fx) * WHITE_D65[0], finv(fy) * WHITE_D65[1], finv(fz) * WHITE_D65[2]];
    mat3_mul(&mat3_inverse(&RGB_TO_XYZ), xyz).map(linear_to_srgb)
}

/// Replaces the L*a*b* lightness of `color` with `100·gray` and converts back
/// to clipped sRGB.
pub fn fuse_luminance(color: &RgbImage, gray: &Image) -> Result<RgbImage> {
    if color.width != gray.width || color.height != gray.height {
        return Err(Error::shape(format!(
            "color {}x{} vs gray {}x{}",
            color.width, color.height, gray.width, gray.height
        )));
    }
    let data = color
        .data
        .iter()
        .zip(&gray.data)
        .map(|(&rgb, &l)| {
            let [_, a, b] = rgb_to_lab(rgb);
            lab_to_rgb([100.0 * l.clamp(0.0, 1.0), a, b]).map(|v| v.clamp(0.0, 1.0))
        })
        .collect();
    Ok(RgbImage { width: color.width, height: color.height, data })
}

fn nearest_frame(frames: &[Frame], t: f64) -> Option<&Frame> {
    frames
        .iter()
        .min_by(|a, b| (a.timestamp - t).abs().total_cmp(&(b.timestamp - t).abs()))
}

/// Color reconstruction from a CFA sensor. Each filter position is
/// reconstructed at quarter resolution with `channel_policy`, upsampled ×2
/// bicubically, and fused with the full-resolution grayscale reconstruction
/// (all events, `gray_policy`) through L*a*b* lightness replacement. Output
/// frames follow the grayscale timestamps; channel frames are paired by
/// nearest timestamp.
pub fn color_reconstruct(
    stream: &EventStream,
    pattern: CfaPattern,
    weights: &ModelWeights,
    config: &NetworkConfig,
    gray_policy: WindowPolicy,
    channel_policy: WindowPolicy,
) -> Result<Vec<ColorFrame>> {
    let split = split_cfa(stream, pattern)?;
    let order = [CfaChannel::Red, CfaChannel::Green1, CfaChannel::Green2, CfaChannel::Blue];
    let mut runs: Vec<Vec<Frame>> = (0..5)
        .into_par_iter()
        .map(|i| {
            let (s, policy) = if i < 4 {
                (split.channel(order[i]), channel_policy)
            } else {
                (stream, gray_policy)
            };
            Reconstructor::new(weights, config, policy)?.run(s)
        })
        .collect::<Result<_>>()?;
    let gray = runs.pop().unwrap_or_default();
    if runs.iter().any(|r| r.is_empty()) && !gray.is_empty() {
        return Err(Error::invalid("a CFA channel produced no frames"));
    }
    let mut out = Vec::with_capacity(gray.len());
    for g in &gray {
        let planes: Vec<Image> = runs
            .iter()
            .map(|r| nearest_frame(r, g.timestamp).unwrap().image.upsample2x_bicubic().clipped())
            .collect();
        let green = Image {
            width: planes[1].width,
            height: planes[1].height,
            data: planes[1].data.iter().zip(&planes[2].data).map(|(a, b)| 0.5 * (a + b)).collect(),
        };
        let rgb = RgbImage::from_planes(&planes[0], &green, &planes[3])?;
        out.push(ColorFrame {
            timestamp: g.timestamp,
            image: fuse_luminance(&rgb, &g.image)?,
        });
    }
    Ok(out)
}

/// Feeds `k` all-zero tensors after a warm-up stream and reports the mean
/// absolute change of the raw output at each step.
pub fn decay_diagnostic(
    weights: &ModelWeights,
    config: &NetworkConfig,
    warmup: &EventStream,
    policy: WindowPolicy,
    k: usize,
) -> Result<Vec<f64>> {
    let mut r = Reconstructor::new(weights, config, policy)?.with_postprocess(false);
    let frames = r.run(warmup)?;
    let (w, h) = (warmup.width(), warmup.height());
    let zero = EventTensor::zeros(config.input_bins, h, w);
    let mut prev = match frames.last() {
        Some(f) => f.image.clone(),
        None => r.step_tensor(&zero)?,
    };
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let next = r.step_tensor(&zero)?;
        let diff = next.data.iter().zip(&prev.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / next.len() as f64;
        out.push(diff);
        prev = next;
    }
    Ok(out)
}

fn write_timestamps(dir: &Path, times: impl Iterator<Item = f64>) -> Result<()> {
    let mut ts = BufWriter::new(fs::File::create(dir.join("timestamps.txt"))?);
    for (k, t) in times.enumerate() {
        writeln!(ts, "{k} {t:.9}")?;
    }
    ts.flush()?;
    Ok(())
}

/// Writes `NNNNNN.pgm` per frame plus `timestamps.txt`.
pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, f) in frames.iter().enumerate() {
        let mut out = BufWriter::new(fs::File::create(dir.join(format!("{k:06}.pgm")))?);
        f.image.write_pgm(&mut out)?;
        out.flush()?;
    }
    write_timestamps(dir, frames.iter().map(|f| f.timestamp))
}

/// Writes `NNNNNN.ppm` per frame plus `timestamps.txt`.
pub fn write_color_frames(dir: &Path, frames: &[ColorFrame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, f) in frames.iter().enumerate() {
        let mut out = BufWriter::new(fs::File::create(dir.join(format!("{k:06}.ppm")))?);
        f.image.write_ppm(&mut out)?;
        out.flush()?;
    }
    write_timestamps(dir, frames.iter().map(|f| f.timestamp))
}

/// Reads a directory written by [`write_frames`].
pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let text = fs::read_to_string(dir.join("timestamps.txt"))?;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(k), Some(t), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse { line: i + 1, message: format!("expected `index seconds`, got `{line}`") });
        };
        let k: usize = k.parse().map_err(|_| Error::Parse { line: i + 1, message: format!("bad frame index `{k}`") })?;
        let timestamp: f64 = t.parse().map_err(|_| Error::Parse { line: i + 1, message: format!("bad timestamp `{t}`") })?;
        let file = fs::File::open(dir.join(format!("{k:06}.pgm")))?;
        frames.push(Frame { timestamp, image: Image::read_pgm(std::io::BufReader::new(file))? });
    }
    Ok(frames)
}

/// Mean per-window stage times in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub windows: usize,
    pub events_per_window: usize,
    /// Decoding the window from its `EVB1` bytes.
    pub parse_ms: f64,
    pub voxelize_ms: f64,
    pub forward_ms: f64,
    pub postprocess_ms: f64,
}

impl BenchReport {
    pub fn total_ms(&self) -> f64 {
        self.parse_ms + self.voxelize_ms + self.forward_ms + self.postprocess_ms
    }

    /// Events per second through decoding and voxelization alone.
    pub fn ingest_rate(&self) -> f64 {
        self.events_per_window as f64 / ((self.parse_ms + self.voxelize_ms) * 1e-3)
    }

    pub fn to_text(&self) -> String {
        format!(
            "windows={} events_per_window={}\nparse_ms={:.4}\nvoxelize_ms={:.4}\nforward_ms={:.4}\npostprocess_ms={:.4}\ntotal_ms={:.4}\ningest_events_per_s={:.0}\n",
            self.windows,
            self.events_per_window,
            self.parse_ms,
            self.voxelize_ms,
            self.forward_ms,
            self.postprocess_ms,
            self.total_ms(),
            self.ingest_rate()
        )
    }
}

/// Times each stage of reconstruction on consecutive `n`-event windows of
/// `stream`, state threaded as in streaming use.
pub fn benchmark(
    stream: &EventStream,
    weights: &ModelWeights,
    config: &NetworkConfig,
    n: usize,
    max_windows: usize,
) -> Result<BenchReport> {
    use crate::events::{encode_events, read_event_binary, write_event_binary};
    use std::time::Instant;
    let windows = window_by_count(stream, n)?;
    let windows = &windows[..windows.len().min(max_windows)];
    if windows.is_empty() {
        return Err(Error::invalid(format!("stream holds fewer than {n} events")));
    }
    let (w, h) = (stream.width(), stream.height());
    let blobs: Vec<Vec<u8>> = windows
        .iter()
        .map(|win| write_event_binary(&EventStream::new(w, h, win.events.to_vec())?))
        .collect::<Result<_>>()?;
    let mut r = Reconstructor::new(weights, config, WindowPolicy::Count(n))?.with_postprocess(false);
    let (mut parse, mut vox, mut fwd, mut post) = (0.0, 0.0, 0.0, 0.0);
    for blob in &blobs {
        let t0 = Instant::now();
        let s = read_event_binary(blob)?;
        let t1 = Instant::now();
        let tensor = encode_events(s.events(), config.input_bins, h, w)?;
        let t2 = Instant::now();
        let raw = r.step_tensor(&tensor)?;
        let t3 = Instant::now();
        std::hint::black_box(postprocess(&raw));
        let t4 = Instant::now();
        parse += (t1 - t0).as_secs_f64();
        vox += (t2 - t1).as_secs_f64();
        fwd += (t3 - t2).as_secs_f64();
        post += (t4 - t3).as_secs_f64();
    }
    let k = 1e3 / blobs.len() as f64;
    Ok(BenchReport {
        windows: blobs.len(),
        events_per_window: n,
        parse_ms: parse * k,
        voxelize_ms: vox * k,
        forward_ms: fwd * k,
        postprocess_ms: post * k,
    })
}
