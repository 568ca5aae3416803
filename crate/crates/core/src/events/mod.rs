//! Event-stream data model, file formats, windowing and tensor encoding.

mod cfa;
mod io;
mod voxel;
mod window;

pub use cfa::{split_cfa, CfaChannel, CfaPattern, CfaSplit};
pub use io::{
    parse_event_text, read_event_binary, read_event_file, write_event_binary, write_event_file,
    write_event_text,
};
pub use voxel::{encode_events, encode_voxel_grid, normalize_tensor, EventTensor};
pub use window::{window_by_count, window_by_duration, window_by_duration_from, EventWindow};

use crate::error::{Error, Result};

/// A single brightness-change spike.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    pub x: u16,
    pub y: u16,
    /// `-1` or `+1`.
    pub polarity: i8,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, polarity: i8) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Time-ordered events from a sensor of known size.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    width: usize,
    height: usize,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds, polarity and time ordering.
    pub fn new(width: usize, height: usize, events: Vec<Event>) -> Result<Self> {
        validate(width, height, &events)?;
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.polarity as i64).sum()
    }

    /// The same sensor with the first `n` events removed.
    pub fn skip(&self, n: usize) -> EventStream {
        EventStream {
            width: self.width,
            height: self.height,
            events: self.events[n.min(self.events.len())..].to_vec(),
        }
    }
}

fn validate(width: usize, height: usize, events: &[Event]) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (index, e) in events.iter().enumerate() {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::OutOfBounds {
                index,
                x: e.x as i64,
                y: e.y as i64,
                width,
                height,
            });
        }
        if e.polarity != 1 && e.polarity != -1 {
            return Err(Error::invalid(format!(
                "event {index} has polarity {}",
                e.polarity
            )));
        }
        if !e.t.is_finite() {
            return Err(Error::invalid(format!("event {index} has non-finite time")));
        }
        if e.t < prev {
            return Err(Error::NonMonotonic {
                index,
                previous: prev,
                current: e.t,
            });
        }
        prev = e.t;
    }
    Ok(())
}
