use super::{Event, EventStream};
use crate::error::{Error, Result};

/// A contiguous, non-overlapping batch of events borrowed from a stream.
#[derive(Clone, Copy, Debug)]
pub struct EventWindow<'a> {
    pub events: &'a [Event],
    pub t_start: f64,
    pub t_end: f64,
}

impl<'a> EventWindow<'a> {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time of the last event, or the window end when it holds none.
    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(self.t_end, |e| e.t)
    }
}

/// Splits a stream into windows of exactly `n` events. The trailing
/// `len % n` events are dropped.
pub fn window_by_count(stream: &EventStream, n: usize) -> Result<Vec<EventWindow<'_>>> {
    if n == 0 {
        return Err(Error::invalid("window size must be at least 1 event"));
    }
    Ok(stream
        .events()
        .chunks_exact(n)
        .map(|chunk| EventWindow {
            events: chunk,
            t_start: chunk[0].t,
            t_end: chunk[n - 1].t,
        })
        .collect())
}

/// Half-open windows `[t0 + k·τ, t0 + (k+1)·τ)` starting at the first event.
pub fn window_by_duration(stream: &EventStream, tau: f64) -> Result<Vec<EventWindow<'_>>> {
    let origin = stream.events().first().map_or(0.0, |e| e.t);
    window_by_duration_from(stream, tau, origin)
}

/// Like [`window_by_duration`] with an explicit origin. Events before the
/// origin are ignored. Empty intervals yield empty windows; the last window is
/// the one containing the final event.
pub fn window_by_duration_from(
    stream: &EventStream,
    tau: f64,
    origin: f64,
) -> Result<Vec<EventWindow<'_>>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("window duration must be > 0, got {tau}")));
    }
    let events = stream.events();
    let first = events.partition_point(|e| e.t < origin);
    let events = &events[first..];
    let Some(last) = events.last() else {
        return Ok(Vec::new());
    };
    let index_of = |t: f64| ((t - origin) / tau).floor() as usize;
    let count = index_of(last.t) + 1;
    let mut windows = Vec::with_capacity(count);
    let mut start = 0;
    for k in 0..count {
        let mut end = start;
        while end < events.len() && index_of(events[end].t) <= k {
            end += 1;
        }
        windows.push(EventWindow {
            events: &events[start..end],
            t_start: origin + k as f64 * tau,
            t_end: origin + (k + 1) as f64 * tau,
        });
        start = end;
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(times: &[f64]) -> EventStream {
        let events = times.iter().map(|&t| Event::new(t, 0, 0, 1)).collect();
        EventStream::new(1, 1, events).unwrap()
    }

    #[test]
    fn count_windows() {
        let s = stream(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(window_by_count(&s, 7).unwrap().len(), 1);
        let s = stream(&(0..10).map(|i| i as f64).collect::<Vec<_>>());
        let w = window_by_count(&s, 4).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].events[0].t, 4.0);
        assert_eq!(window_by_count(&stream(&[0.0, 1.0, 2.0]), 5).unwrap().len(), 0);
        assert!(window_by_count(&s, 0).is_err());
    }

    #[test]
    fn duration_windows() {
        let s = stream(&[0.0, 0.04, 0.06]);
        let w = window_by_duration(&s, 0.05).unwrap();
        assert_eq!(w.iter().map(|w| w.len()).collect::<Vec<_>>(), vec![2, 1]);
        assert!(window_by_duration(&s, 0.0).is_err());
        assert!(window_by_duration(&s, -1.0).is_err());
    }

    #[test]
    fn duration_windows_with_trailing_empties() {
        let s = stream(&[0.0, 0.001, 0.002, 0.2]);
        let w = window_by_duration(&s, 0.05).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[0].len(), 3);
        assert!(w[1..4].iter().all(|w| w.is_empty()));
        assert_eq!(w[4].len(), 1);
    }

    #[test]
    fn short_windows_on_a_50ms_stream() {
        let times: Vec<f64> = (0..500).map(|i| i as f64 * 1e-4).collect();
        let s = stream(&times);
        let w = window_by_duration(&s, 0.005).unwrap();
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|w| w.len() == 50));
    }

    proptest! {
        #[test]
        fn count_windows_partition_a_prefix(len in 0usize..200, n in 1usize..20) {
            let times: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let s = stream(&times);
            let w = window_by_count(&s, n).unwrap();
            prop_assert_eq!(w.len(), len / n);
            let joined: Vec<f64> = w.iter().flat_map(|w| w.events.iter().map(|e| e.t)).collect();
            prop_assert_eq!(&joined[..], &times[..joined.len()]);
        }

        #[test]
        fn duration_windows_cover_every_event(
            mut times in proptest::collection::vec(0.0f64..1.0, 1..100),
            tau in 0.01f64..0.5,
        ) {
            times.sort_by(f64::total_cmp);
            let s = stream(&times);
            let w = window_by_duration(&s, tau).unwrap();
            let total: usize = w.iter().map(|w| w.len()).sum();
            prop_assert_eq!(total, times.len());
            for win in &w {
                for e in win.events {
                    prop_assert!(e.t >= win.t_start - 1e-12 && e.t < win.t_end + 1e-12);
                }
            }
        }
    }
}
