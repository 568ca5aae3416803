use super::{Event, EventStream};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CfaChannel {
    Red,
    Green1,
    Green2,
    Blue,
}

/// 2×2 color-filter layout, indexed by phase `(x % 2, y % 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CfaPattern {
    layout: [[CfaChannel; 2]; 2],
}

impl CfaPattern {
    /// `layout[py][px]` is the filter at phase `(px, py)`. Must contain each
    /// of R, G1, G2, B exactly once.
    pub fn new(layout: [[CfaChannel; 2]; 2]) -> Result<Self> {
        let flat = [layout[0][0], layout[0][1], layout[1][0], layout[1][1]];
        for c in [
            CfaChannel::Red,
            CfaChannel::Green1,
            CfaChannel::Green2,
            CfaChannel::Blue,
        ] {
            if flat.iter().filter(|&&f| f == c).count() != 1 {
                return Err(Error::invalid(format!("CFA layout must contain {c:?} once")));
            }
        }
        Ok(Self { layout })
    }

    /// Red at (0,0), greens at (1,0) and (0,1), blue at (1,1).
    pub fn rggb() -> Self {
        use CfaChannel::*;
        Self {
            layout: [[Red, Green1], [Green2, Blue]],
        }
    }

    pub fn channel_at(&self, x: usize, y: usize) -> CfaChannel {
        self.layout[y % 2][x % 2]
    }

    pub fn phase_of(&self, channel: CfaChannel) -> (usize, usize) {
        for py in 0..2 {
            for px in 0..2 {
                if self.layout[py][px] == channel {
                    return (px, py);
                }
            }
        }
        unreachable!("validated layout contains every channel")
    }
}

impl std::str::FromStr for CfaPattern {
    type Err = Error;

    /// Four letters in phase order (0,0) (1,0) (0,1) (1,1), e.g. `RGGB`.
    fn from_str(s: &str) -> Result<Self> {
        use CfaChannel::*;
        let mut greens = 0;
        let mut chans = Vec::new();
        for ch in s.chars() {
            chans.push(match ch.to_ascii_uppercase() {
                'R' => Red,
                'B' => Blue,
                'G' => {
                    greens += 1;
                    if greens == 1 {
                        Green1
                    } else {
                        Green2
                    }
                }
                _ => return Err(Error::invalid(format!("bad CFA pattern `{s}`"))),
            });
        }
        if chans.len() != 4 {
            return Err(Error::invalid(format!("bad CFA pattern `{s}`")));
        }
        CfaPattern::new([[chans[0], chans[1]], [chans[2], chans[3]]])
    }
}

/// Four quarter-resolution streams, one per filter position.
#[derive(Clone, Debug)]
pub struct CfaSplit {
    pub pattern: CfaPattern,
    /// Indexed by phase `py * 2 + px`.
    pub streams: [EventStream; 4],
}

impl CfaSplit {
    pub fn channel(&self, c: CfaChannel) -> &EventStream {
        let (px, py) = self.pattern.phase_of(c);
        &self.streams[py * 2 + px]
    }
}

/// Routes every event to the stream of its filter color with halved
/// coordinates.
pub fn split_cfa(stream: &EventStream, pattern: CfaPattern) -> Result<CfaSplit> {
    let (w, h) = (stream.width(), stream.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::invalid(format!(
            "CFA split needs even sensor dimensions, got {w}x{h}"
        )));
    }
    let mut parts: [Vec<Event>; 4] = Default::default();
    for e in stream.events() {
        let phase = (e.y as usize % 2) * 2 + e.x as usize % 2;
        parts[phase].push(Event::new(e.t, e.x / 2, e.y / 2, e.polarity));
    }
    let streams = parts.map(|events| EventStream::new(w / 2, h / 2, events));
    let [a, b, c, d] = streams;
    Ok(CfaSplit {
        pattern,
        streams: [a?, b?, c?, d?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn routing_by_phase() {
        let events = vec![Event::new(0.0, 0, 0, 1), Event::new(0.1, 3, 2, -1)];
        let s = EventStream::new(4, 4, events).unwrap();
        let split = split_cfa(&s, CfaPattern::rggb()).unwrap();
        let red = split.channel(CfaChannel::Red);
        assert_eq!(red.events(), &[Event::new(0.0, 0, 0, 1)]);
        // (3,2) has phase (1,0)
        assert_eq!(split.streams[1].events(), &[Event::new(0.1, 1, 1, -1)]);
        assert_eq!(split.pattern.channel_at(3, 2), CfaChannel::Green1);
    }

    #[test]
    fn odd_dimensions_rejected() {
        assert!(split_cfa(&EventStream::empty(5, 4), CfaPattern::rggb()).is_err());
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!("RGGB".parse::<CfaPattern>().unwrap(), CfaPattern::rggb());
        let bggr: CfaPattern = "BGGR".parse().unwrap();
        assert_eq!(bggr.phase_of(CfaChannel::Red), (1, 1));
        assert!("RRGB".parse::<CfaPattern>().is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(raw in proptest::collection::vec((0u16..8, 0u16..6, any::<bool>()), 0..200)) {
            let events: Vec<Event> = raw
                .iter()
                .enumerate()
                .map(|(i, &(x, y, p))| Event::new(i as f64, x, y, if p { 1 } else { -1 }))
                .collect();
            let s = EventStream::new(8, 6, events.clone()).unwrap();
            let split = split_cfa(&s, CfaPattern::rggb()).unwrap();
            let mut restored: Vec<Event> = Vec::new();
            for (phase, part) in split.streams.iter().enumerate() {
                let (px, py) = ((phase % 2) as u16, (phase / 2) as u16);
                restored.extend(part.events().iter().map(|e| Event::new(e.t, e.x * 2 + px, e.y * 2 + py, e.polarity)));
            }
            restored.sort_by(|a, b| a.t.total_cmp(&b.t));
            prop_assert_eq!(restored, events);
        }
    }
}
