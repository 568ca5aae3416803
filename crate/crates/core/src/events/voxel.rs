use super::{Event, EventWindow};
use crate::error::{Error, Result};

/// `bins × height × width` voxel grid, bin-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EventTensor {
    /// All-zero tensor; the only way to obtain a tensor for an empty window.
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        Self {
            bins,
            height,
            width,
            values: vec![0.0; bins * height * width],
        }
    }

    #[inline]
    pub fn get(&self, bin: usize, x: usize, y: usize) -> f64 {
        self.values[(bin * self.height + y) * self.width + x]
    }

    pub fn bin(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[b * n..(b + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Bilinear temporal binning: every event splits its polarity between the two
/// bins nearest to its normalized timestamp `t* = (B-1)(t - t0)/ΔT`.
pub fn encode_voxel_grid(
    window: &EventWindow<'_>,
    bins: usize,
    height: usize,
    width: usize,
) -> Result<EventTensor> {
    encode_events(window.events, bins, height, width)
}

pub fn encode_events(
    events: &[Event],
    bins: usize,
    height: usize,
    width: usize,
) -> Result<EventTensor> {
    if bins == 0 {
        return Err(Error::invalid("voxel grid needs at least one bin"));
    }
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Err(Error::invalid("cannot encode an empty event window"));
    };
    let mut tensor = EventTensor::zeros(bins, height, width);
    let t0 = first.t;
    let span = last.t - t0;
    // all-simultaneous windows collapse onto bin 0
    let scale = if span > 0.0 {
        (bins - 1) as f64 / span
    } else {
        0.0
    };
    let plane = height * width;
    let last_bin = (bins - 1) as f64;
    for e in events {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= width || y >= height {
            return Err(Error::OutOfBounds {
                index: 0,
                x: x as i64,
                y: y as i64,
                width,
                height,
            });
        }
        let ts = ((e.t - t0) * scale).clamp(0.0, last_bin);
        let lower = ts.floor();
        let frac = ts - lower;
        let b = lower as usize;
        let p = e.polarity as f64;
        let pix = y * width + x;
        tensor.values[b * plane + pix] += p * (1.0 - frac);
        if frac > 0.0 {
            tensor.values[(b + 1) * plane + pix] += p * frac;
        }
    }
    Ok(tensor)
}

/// Standardizes the nonzero entries to zero mean and unit (population)
/// standard deviation. Zero entries stay zero; when the nonzero entries have
/// std below `1e-8` they are all set to zero.
pub fn normalize_tensor(mut tensor: EventTensor) -> EventTensor {
    let (mut n, mut sum) = (0usize, 0.0);
    for &v in &tensor.values {
        if v != 0.0 {
            n += 1;
            sum += v;
        }
    }
    if n == 0 {
        return tensor;
    }
    let mean = sum / n as f64;
    let var = tensor
        .values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    for v in &mut tensor.values {
        if *v != 0.0 {
            *v = if std < 1e-8 { 0.0 } else { (*v - mean) / std };
        }
    }
    tensor
}
