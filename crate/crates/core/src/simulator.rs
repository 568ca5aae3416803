//! Event-camera simulator: a textured plane seen under planar camera motion,
//! rendered at a high rate, with events from per-pixel log-intensity threshold
//! crossings.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::events::{read_event_binary, write_event_binary, Event, EventStream};
use crate::image::{bilinear_clamped, FlowField, Image};

/// Offset inside the logarithm: `L = ln(I + LOG_EPS)`.
pub const LOG_EPS: f64 = 0.001;

pub fn log_intensity(v: f64) -> f64 {
    (v + LOG_EPS).ln()
}

/// Planar projective transform acting on pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        let (a, b) = (&self.0, &other.0);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Homography(m)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Numeric(format!("singular homography (det {det:e})")));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let inv = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Ok(Homography(inv.map(|r| r.map(|v| v / det))))
    }

    /// The 2x2 linear part of an affine homography.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        [[self.0[0][0], self.0[0][1]], [self.0[1][0], self.0[1][1]]]
    }
}

/// Intensity texture mapped onto the scene plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTexture {
    pub image: Image,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(w: usize, h: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let gy = y as f64 / cell;
        let (iy, fy) = (gy.floor() as usize, smoothstep(gy.fract()));
        for x in 0..w {
            let gx = x as f64 / cell;
            let (ix, fx) = (gx.floor() as usize, smoothstep(gx.fract()));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
            let bot = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn stretch(data: &mut [f64], lo: f64, hi: f64) {
    let (mn, mx) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (mx - mn).max(1e-9);
    for v in data {
        *v = lo + (hi - lo) * (*v - mn) / span;
    }
}

impl SceneTexture {
    pub fn from_image(image: Image) -> Self {
        Self {
            image: image.clipped(),
        }
    }

    /// Multi-octave value noise with soft-edged discs and rectangles.
    pub fn procedural(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = width.min(height) as f64;
        let mut data = vec![0.0; width * height];
        let mut amp = 1.0;
        let mut cell = (scale / 4.0).max(4.0);
        while cell >= 2.0 {
            for (d, n) in data.iter_mut().zip(value_noise(width, height, cell, rng)) {
                *d += amp * n;
            }
            amp *= 0.5;
            cell /= 2.0;
        }
        stretch(&mut data, 0.0, 1.0);
        let shapes = rng.random_range(6..14);
        for _ in 0..shapes {
            let value: f64 = rng.random();
            let cx = rng.random_range(0.0..width as f64);
            let cy = rng.random_range(0.0..height as f64);
            let r = rng.random_range(0.03..0.15) * scale;
            let disc = rng.random_bool(0.5);
            let (hw, hh) = (r, r * rng.random_range(0.4..1.6));
            for y in 0..height {
                for x in 0..width {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    // signed distance to the boundary, negative inside
                    let sd = if disc {
                        (dx * dx + dy * dy).sqrt() - r
                    } else {
                        (dx.abs() - hw).max(dy.abs() - hh)
                    };
                    let alpha = 1.0 - smoothstep(((sd + 0.75) / 1.5).clamp(0.0, 1.0));
                    let d = &mut data[y * width + x];
                    *d = *d * (1.0 - alpha) + value * alpha;
                }
            }
        }
        stretch(&mut data, 0.02, 0.98);
        Self {
            image: Image::from_vec(width, height, data).unwrap(),
        }
    }

    /// Low-frequency noise only; used where bilinear resampling must be
    /// nearly exact.
    pub fn smooth(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Self {
        let cell = (width.min(height) as f64 / 4.0).max(8.0);
        let mut data = value_noise(width, height, cell, rng);
        for (d, n) in data.iter_mut().zip(value_noise(width, height, cell / 2.0, rng)) {
            *d += 0.5 * n;
        }
        stretch(&mut data, 0.1, 0.9);
        Self {
            image: Image::from_vec(width, height, data).unwrap(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastThresholds {
    pub c_pos: f64,
    pub c_neg: f64,
}

pub const THRESHOLD_MEAN: f64 = 0.18;
pub const THRESHOLD_STD: f64 = 0.03;
pub const THRESHOLD_MIN: f64 = 0.01;

pub fn clamp_threshold(c: f64) -> f64 {
    c.max(THRESHOLD_MIN)
}

/// Independent draws of `c_pos` and `c_neg` from `N(0.18, 0.03²)`.
pub fn sample_thresholds(rng: &mut ChaCha8Rng) -> ContrastThresholds {
    let n = Normal::new(THRESHOLD_MEAN, THRESHOLD_STD).unwrap();
    ContrastThresholds {
        c_pos: clamp_threshold(n.sample(rng)),
        c_neg: clamp_threshold(n.sample(rng)),
    }
}

/// Smooth camera motion about the sensor centre. Each of translation,
/// rotation, log-zoom and shear is a cubic in normalized time with no
/// constant term, so `h(0)` is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub duration: f64,
    pub center: (f64, f64),
    /// Rows: tx, ty (pixels), rotation (rad), log-zoom, shear; columns: τ, τ², τ³.
    pub coeffs: [[f64; 3]; 5],
}

impl Trajectory {
    pub fn stationary(duration: f64, width: usize, height: usize) -> Self {
        Self {
            duration,
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            coeffs: [[0.0; 3]; 5],
        }
    }

    /// `motion_scale = 1` allows up to about a quarter of the sensor of
    /// translation, 0.3 rad, ±20% zoom and 0.1 shear over the sequence.
    pub fn random(duration: f64, width: usize, height: usize, motion_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::stationary(duration, width, height);
        let size = width.min(height) as f64;
        let amps = [0.25 * size, 0.25 * size, 0.3, 0.2, 0.1];
        for (row, amp) in t.coeffs.iter_mut().zip(amps) {
            for c in row.iter_mut() {
                *c = motion_scale * amp * rng.random_range(-1.0..1.0) / 3.0;
            }
        }
        t
    }

    pub fn at(&self, t: f64) -> Homography {
        let tau = if self.duration > 0.0 { t / self.duration } else { 0.0 };
        let p = |r: usize| {
            let c = &self.coeffs[r];
            tau * (c[0] + tau * (c[1] + tau * c[2]))
        };
        let (tx, ty, th, lz, sh) = (p(0), p(1), p(2), p(3), p(4));
        let s = lz.exp();
        let (sin, cos) = th.sin_cos();
        // R(θ)·s·[[1, sh], [0, 1]]
        let a = [[s * cos, s * (cos * sh - sin)], [s * sin, s * (sin * sh + cos)]];
        let (cx, cy) = self.center;
        Homography([
            [a[0][0], a[0][1], cx + tx - a[0][0] * cx - a[0][1] * cy],
            [a[1][0], a[1][1], cy + ty - a[1][0] * cx - a[1][1] * cy],
            [0.0, 0.0, 1.0],
        ])
    }
}

/// Samples the texture at `h⁻¹(u)` for every sensor pixel `u`; the identity
/// shows the centred `width x height` crop.
pub fn render_frame(texture: &SceneTexture, h: &Homography, width: usize, height: usize) -> Result<Image> {
    let inv = h.inverse()?;
    let tex = &texture.image;
    let ox = ((tex.width as f64 - width as f64) / 2.0).floor();
    let oy = ((tex.height as f64 - height as f64) / 2.0).floor();
    let mut out = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            out.data[y * width + x] =
                bilinear_clamped(&tex.data, tex.width, tex.height, sx + ox, sy + oy).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Backward flow `h_prev(h_next⁻¹(u)) - u`: where pixel `u` of the newer frame
/// was in the older one.
pub fn gt_flow(h_prev: &Homography, h_next: &Homography, width: usize, height: usize) -> Result<FlowField> {
    h_prev.inverse()?;
    let m = h_prev.compose(&h_next.inverse()?);
    let mut f = FlowField::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = m.apply(x as f64, y as f64);
            f.dx[y * width + x] = px - x as f64;
            f.dy[y * width + x] = py - y as f64;
        }
    }
    Ok(f)
}

/// Streaming per-pixel threshold-crossing event generator.
pub struct EventGenerator {
    width: usize,
    height: usize,
    thresholds: ContrastThresholds,
    reference: Vec<f64>,
    last_log: Vec<f64>,
    last_t: f64,
    started: bool,
    events: Vec<Event>,
    pending: Vec<(f64, usize, i8)>,
}

impl EventGenerator {
    pub fn new(width: usize, height: usize, thresholds: ContrastThresholds) -> Result<Self> {
        if width > u16::MAX as usize + 1 || height > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!("sensor {width}x{height} exceeds u16 coordinates")));
        }
        if !(thresholds.c_pos > 0.0 && thresholds.c_neg > 0.0) {
            return Err(Error::invalid(format!("thresholds must be positive: {thresholds:?}")));
        }
        Ok(Self {
            width,
            height,
            thresholds,
            reference: Vec::new(),
            last_log: Vec::new(),
            last_t: 0.0,
            started: false,
            events: Vec::new(),
            pending: Vec::new(),
        })
    }

    pub fn push_frame(&mut self, frame: &Image, t: f64) -> Result<()> {
        if frame.width != self.width || frame.height != self.height {
            return Err(Error::shape(format!(
                "frame {}x{} for a {}x{} sensor",
                frame.width, frame.height, self.width, self.height
            )));
        }
        let logs: Vec<f64> = frame.data.iter().map(|v| log_intensity(*v)).collect();
        self.push_log(&logs, t)
    }

    /// Feeds log intensities sampled at time `t`. The first call sets the
    /// per-pixel reference levels.
    pub fn push_log(&mut self, logs: &[f64], t: f64) -> Result<()> {
        if logs.len() != self.width * self.height {
            return Err(Error::shape(format!(
                "{} log values for a {}x{} sensor",
                logs.len(),
                self.width,
                self.height
            )));
        }
        if !t.is_finite() {
            return Err(Error::invalid("non-finite sample time"));
        }
        if !self.started {
            self.reference = logs.to_vec();
            self.last_log = logs.to_vec();
            self.last_t = t;
            self.started = true;
            return Ok(());
        }
        if t <= self.last_t {
            return Err(Error::NonMonotonic {
                index: self.events.len(),
                previous: self.last_t,
                current: t,
            });
        }
        let (t0, dt) = (self.last_t, t - self.last_t);
        let ContrastThresholds { c_pos, c_neg } = self.thresholds;
        for (i, &l1) in logs.iter().enumerate() {
            let l0 = self.last_log[i];
            let slope = l1 - l0;
            let r = &mut self.reference[i];
            while l1 - *r >= c_pos {
                *r += c_pos;
                self.pending.push((t0 + dt * (*r - l0) / slope, i, 1));
            }
            while *r - l1 >= c_neg {
                *r -= c_neg;
                self.pending.push((t0 + dt * (*r - l0) / slope, i, -1));
            }
        }
        self.pending
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let w = self.width;
        self.events.extend(self.pending.drain(..).map(|(te, i, p)| Event {
            t: te.clamp(t0, t),
            x: (i % w) as u16,
            y: (i / w) as u16,
            polarity: p,
        }));
        self.last_log.copy_from_slice(logs);
        self.last_t = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn finish(self) -> Result<EventStream> {
        EventStream::new(self.width, self.height, self.events)
    }
}

/// Events from a rendered frame sequence with strictly increasing timestamps.
pub fn generate_events(frames: &[Image], times: &[f64], thresholds: ContrastThresholds) -> Result<EventStream> {
    if frames.len() < 2 || frames.len() != times.len() {
        return Err(Error::invalid(format!(
            "need >= 2 frames with one timestamp each (got {} frames, {} times)",
            frames.len(),
            times.len()
        )));
    }
    let mut gen = EventGenerator::new(frames[0].width, frames[0].height, thresholds)?;
    for (f, t) in frames.iter().zip(times) {
        gen.push_frame(f, *t)?;
    }
    gen.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    pub duration: f64,
    pub f_gt: f64,
    pub f_sim: f64,
    pub seed: u64,
    pub motion_scale: f64,
    /// Procedural texture when `None`.
    pub texture: Option<Image>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            duration: 0.5,
            f_gt: 50.0,
            f_sim: 1000.0,
            seed: 0,
            motion_scale: 1.0,
            texture: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("sensor size must be positive"));
        }
        if !(self.duration > 0.0 && self.f_gt > 0.0) {
            return Err(Error::invalid("duration and f_gt must be positive"));
        }
        if !(self.f_sim >= 10.0 * self.f_gt) {
            return Err(Error::invalid(format!(
                "f_sim ({}) must be at least 10 f_gt ({})",
                self.f_sim, self.f_gt
            )));
        }
        if self.gt_count() < 2 {
            return Err(Error::invalid("sequence must span at least two ground-truth frames"));
        }
        if !(self.motion_scale >= 0.0) {
            return Err(Error::invalid("motion scale must be non-negative"));
        }
        Ok(())
    }

    pub fn gt_count(&self) -> usize {
        (self.duration * self.f_gt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSequence {
    pub events: EventStream,
    pub gt_times: Vec<f64>,
    pub gt_frames: Vec<Image>,
    /// `gt_flows[k]` maps pixels of frame `k+1` into frame `k`.
    pub gt_flows: Vec<FlowField>,
    pub thresholds: ContrastThresholds,
    pub seed: u64,
    pub config: SimConfig,
}

impl SimSequence {
    pub fn width(&self) -> usize {
        self.events.width()
    }

    pub fn height(&self) -> usize {
        self.events.height()
    }
}

fn quantize8(img: Image) -> Image {
    let data = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
    Image::from_vec(img.width, img.height, data).unwrap()
}

fn quantize_flow(mut f: FlowField) -> FlowField {
    for v in f.dx.iter_mut().chain(f.dy.iter_mut()) {
        *v = *v as f32 as f64;
    }
    f
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Deterministic in `config`. Ground-truth frames are stored at 8-bit
/// precision, flows at `f32`, and thresholds at six decimals, so the dataset
/// files reproduce the sequence exactly.
pub fn simulate_sequence(config: &SimConfig) -> Result<SimSequence> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let th = sample_thresholds(&mut rng);
    let thresholds = ContrastThresholds {
        c_pos: clamp_threshold(round6(th.c_pos)),
        c_neg: clamp_threshold(round6(th.c_neg)),
    };
    let texture = match &config.texture {
        Some(img) => SceneTexture::from_image(img.clone()),
        None => SceneTexture::procedural(2 * w, 2 * h, &mut rng),
    };
    let traj = Trajectory::random(config.duration, w, h, config.motion_scale, &mut rng);

    let n_gt = config.gt_count();
    let gt_times: Vec<f64> = (0..n_gt).map(|k| k as f64 / config.f_gt).collect();
    let t_end = gt_times[n_gt - 1];
    let homs: Vec<Homography> = gt_times.iter().map(|t| traj.at(*t)).collect();
    let gt_frames = homs
        .iter()
        .map(|hm| render_frame(&texture, hm, w, h).map(quantize8))
        .collect::<Result<Vec<_>>>()?;
    let gt_flows = homs
        .windows(2)
        .map(|p| gt_flow(&p[0], &p[1], w, h).map(quantize_flow))
        .collect::<Result<Vec<_>>>()?;

    let steps = (t_end * config.f_sim).ceil().max(1.0) as usize;
    let mut gen = EventGenerator::new(w, h, thresholds)?;
    for j in 0..=steps {
        let t = if j == steps { t_end } else { j as f64 / config.f_sim };
        if j > 0 && j < steps && t >= t_end {
            continue;
        }
        gen.push_frame(&render_frame(&texture, &traj.at(t), w, h)?, t)?;
    }
    Ok(SimSequence {
        events: gen.finish()?,
        gt_times,
        gt_frames,
        gt_flows,
        thresholds,
        seed: config.seed,
        config: config.clone(),
    })
}

/// Sequence directories are `seq_NNNN` under `dir`.
pub fn write_dataset(sequences: &[SimSequence], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let root = dir.join(format!("seq_{i:04}"));
        write_sequence(seq, &root)?;
        out.push(root);
    }
    Ok(out)
}

pub fn write_sequence(seq: &SimSequence, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("frames"))?;
    fs::create_dir_all(root.join("flows"))?;
    fs::write(root.join("events.evb"), write_event_binary(&seq.events)?)?;
    for (k, f) in seq.gt_frames.iter().enumerate() {
        f.write_pgm(BufWriter::new(fs::File::create(root.join(format!("frames/{k:04}.pgm")))?))?;
    }
    for (k, f) in seq.gt_flows.iter().enumerate() {
        f.write_flw(BufWriter::new(fs::File::create(root.join(format!("flows/{k:04}.flo")))?))?;
    }
    let mut ts = String::new();
    for (k, t) in seq.gt_times.iter().enumerate() {
        ts.push_str(&format!("{k} {t:.9}\n"));
    }
    fs::write(root.join("timestamps.txt"), ts)?;
    let c = &seq.config;
    let meta = format!(
        "width={}\nheight={}\nduration={}\nf_gt={}\nf_sim={}\nseed={}\nmotion_scale={}\ntexture={}\nc_pos={:.6}\nc_neg={:.6}\n",
        c.width,
        c.height,
        c.duration,
        c.f_gt,
        c.f_sim,
        seq.seed,
        c.motion_scale,
        if c.texture.is_some() { "user" } else { "procedural" },
        seq.thresholds.c_pos,
        seq.thresholds.c_neg,
    );
    fs::write(root.join("meta.txt"), meta)?;
    Ok(())
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format(format!("bad value `{v}` for `{key}`")))
}

pub fn read_sequence(root: &Path) -> Result<SimSequence> {
    let meta = parse_key_values(&fs::read_to_string(root.join("meta.txt"))?)?;
    let get = |k: &str| {
        meta.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(format!("{}: meta.txt lacks `{k}`", root.display())))
    };
    let config = SimConfig {
        width: parse_num("width", get("width")?)?,
        height: parse_num("height", get("height")?)?,
        duration: parse_num("duration", get("duration")?)?,
        f_gt: parse_num("f_gt", get("f_gt")?)?,
        f_sim: parse_num("f_sim", get("f_sim")?)?,
        seed: parse_num("seed", get("seed")?)?,
        motion_scale: parse_num("motion_scale", get("motion_scale")?)?,
        texture: None,
    };
    let thresholds = ContrastThresholds {
        c_pos: parse_num("c_pos", get("c_pos")?)?,
        c_neg: parse_num("c_neg", get("c_neg")?)?,
    };
    let events = read_event_binary(&fs::read(root.join("events.evb"))?)?;
    let mut gt_times = Vec::new();
    for (i, line) in fs::read_to_string(root.join("timestamps.txt"))?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let t = line
            .split_whitespace()
            .nth(1)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `index seconds`, got `{line}`"),
            })?;
        gt_times.push(t);
    }
    let gt_frames = (0..gt_times.len())
        .map(|k| Image::read_pgm(BufReader::new(fs::File::open(root.join(format!("frames/{k:04}.pgm")))?)))
        .collect::<Result<Vec<_>>>()?;
    let gt_flows = (0..gt_times.len().saturating_sub(1))
        .map(|k| FlowField::read_flw(BufReader::new(fs::File::open(root.join(format!("flows/{k:04}.flo")))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimSequence {
        events,
        gt_times,
        gt_frames,
        gt_flows,
        thresholds,
        seed: config.seed,
        config,
    })
}

/// Reads every `seq_*` directory under `dir` in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SimSequence>> {
    let mut roots: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seq_"))
        })
        .collect();
    roots.sort();
    if roots.is_empty() {
        return Err(Error::format(format!("no seq_* directories in {}", dir.display())));
    }
    roots.iter().map(|r| read_sequence(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_are_seeded_and_distributed() {
        let a = sample_thresholds(&mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_thresholds(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..5000)
            .flat_map(|_| {
                let t = sample_thresholds(&mut rng);
                [t.c_pos, t.c_neg]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((mean - 0.18).abs() < 0.01, "{mean}");
        assert!((std - 0.03).abs() < 0.01, "{std}");
        assert_eq!(clamp_threshold(-0.02), 0.01);
    }

    #[test]
    fn homography_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = Trajectory::random(1.0, 32, 32, 1.0, &mut rng);
        let h = traj.at(0.7);
        let inv = h.inverse().unwrap();
        let (x, y) = inv.apply(h.apply(3.0, 17.5).0, h.apply(3.0, 17.5).1);
        assert!((x - 3.0).abs() < 1e-12 && (y - 17.5).abs() < 1e-12);
        assert_eq!(traj.at(0.0), Homography::identity());
        let singular = Homography([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(singular.inverse().is_err());
    }

    fn ramp_texture() -> SceneTexture {
        SceneTexture::from_image(Image::from_fn(16, 16, |x, y| (x as f64 + 2.0 * y as f64) / 64.0))
    }

    #[test]
    fn render_crops_and_shifts() {
        let tex = ramp_texture();
        let id = render_frame(&tex, &Homography::identity(), 8, 8).unwrap();
        assert_eq!(id, tex.image.crop(4, 4, 8, 8).unwrap());
        let sh = render_frame(&tex, &Homography::translation(2.0, 1.0), 8, 8).unwrap();
        for y in 1..8 {
            for x in 2..8 {
                assert_eq!(sh.get(x, y), id.get(x - 2, y - 1));
            }
        }
        let half = render_frame(&tex, &Homography::translation(0.5, 0.0), 8, 8).unwrap();
        for y in 0..8 {
            for x in 1..8 {
                let want = 0.5 * (id.get(x - 1, y) + id.get(x, y));
                assert!((half.get(x, y) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_and_a_half_thresholds_give_three_events() {
        let th = ContrastThresholds { c_pos: 0.2, c_neg: 0.25 };
        let mut g = EventGenerator::new(1, 1, th).unwrap();
        g.push_log(&[0.0], 0.0).unwrap();
        g.push_log(&[0.7], 1.0).unwrap();
        let s = g.finish().unwrap();
        assert_eq!(s.len(), 3);
        for (k, e) in s.events().iter().enumerate() {
            assert_eq!(e.polarity, 1);
            assert!((e.t - (k + 1) as f64 * 0.2 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_ramp_flips_polarity() {
        let th = ContrastThresholds { c_pos: 0.15, c_neg: 0.15 };
        let up: Vec<Image> = (0..5).map(|k| Image::filled(2, 1, 0.1 + 0.2 * k as f64)).collect();
        let down: Vec<Image> = up.iter().map(|f| Image::filled(2, 1, 1.0 - f.data[0])).collect();
        let times: Vec<f64> = (0..5).map(|k| k as f64 * 0.01).collect();
        let a = generate_events(&up, &times, th).unwrap();
        let b = generate_events(&down, &times, th).unwrap();
        assert!(a.events().iter().all(|e| e.polarity == 1));
        assert!(b.events().iter().all(|e| e.polarity == -1));
        assert!(!a.is_empty() && !b.is_empty());
    }

    #[test]
    fn rejects_non_monotonic_times() {
        let f = vec![Image::new(2, 2); 3];
        let th = ContrastThresholds { c_pos: 0.2, c_neg: 0.2 };
        assert!(generate_events(&f, &[0.0, 0.1, 0.1], th).is_err());
        assert!(generate_events(&f[..1], &[0.0], th).is_err());
    }

    #[test]
    fn flow_conventions() {
        let h = Homography::translation(3.0, -1.0);
        let z = gt_flow(&h, &h, 5, 4).unwrap();
        assert!(z.dx.iter().chain(&z.dy).all(|v| v.abs() < 1e-12));
        let f = gt_flow(&Homography::identity(), &Homography::translation(2.0, 0.0), 5, 4).unwrap();
        assert!(f.dx.iter().all(|v| (*v + 2.0).abs() < 1e-12));
        assert!(f.dy.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn desk_counts_and_determinism() {
        let cfg = SimConfig { width: 32, height: 32, ..SimConfig::default() };
        let a = simulate_sequence(&cfg).unwrap();
        assert_eq!(a.gt_frames.len(), 25);
        assert_eq!(a.gt_flows.len(), 24);
        assert!(!a.events.is_empty());
        let last = *a.gt_times.last().unwrap();
        assert!(a.events.events().iter().all(|e| e.t >= 0.0 && e.t <= last));
        assert_eq!(simulate_sequence(&cfg).unwrap(), a);
        let still = simulate_sequence(&SimConfig { motion_scale: 0.0, ..cfg }).unwrap();
        assert!(still.events.is_empty());
        assert!(still.gt_frames.iter().all(|f| *f == still.gt_frames[0]));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimConfig { width: 24, height: 16, seed: 3, ..SimConfig::default() };
        let seq = simulate_sequence(&cfg).unwrap();
        let roots = write_dataset(std::slice::from_ref(&seq), dir.path()).unwrap();
        assert_eq!(fs::read_dir(roots[0].join("frames")).unwrap().count(), 25);
        assert_eq!(fs::read_dir(roots[0].join("flows")).unwrap().count(), 24);
        let meta = fs::read_to_string(roots[0].join("meta.txt")).unwrap();
        assert!(meta.contains(&format!("c_pos={:.6}\n", seq.thresholds.c_pos)));
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, vec![seq]);
    }
}
