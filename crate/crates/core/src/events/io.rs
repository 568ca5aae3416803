use std::io::{BufRead, Write};

use super::{Event, EventStream};
use crate::error::{Error, Result};
use crate::image::dim_u16;

const MAGIC: &[u8; 4] = b"EVB1";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 13;

/// Parses the text format: a `W H` header line followed by `t x y p` lines.
///
/// Blank lines and `#` comments are skipped. Polarity may be `0/1` or
/// `-1/1`; `0` maps to `-1`.
pub fn parse_event_text<R: BufRead>(input: R) -> Result<EventStream> {
    let mut lines = input.lines().enumerate();
    let (width, height) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::Parse {
                line: 1,
                message: "missing `W H` header".into(),
            });
        };
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let mut parts = body.split_ascii_whitespace();
        let dims = (
            parts.next().and_then(|s| s.parse::<usize>().ok()),
            parts.next().and_then(|s| s.parse::<usize>().ok()),
        );
        match (dims, parts.next()) {
            ((Some(w), Some(h)), None) if w > 0 && h > 0 => break (w, h),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `W H` header, found `{body}`"),
                })
            }
        }
    };

    let mut events = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let e = parse_record(body).map_err(|message| Error::Parse {
            line: lineno,
            message,
        })?;
        if e.0 < prev {
            return Err(Error::Parse {
                line: lineno,
                message: format!("timestamp decreases ({} after {prev})", e.0),
            });
        }
        if e.1 < 0 || e.2 < 0 || e.1 as usize >= width || e.2 as usize >= height {
            return Err(Error::OutOfBounds {
                index: events.len(),
                x: e.1,
                y: e.2,
                width,
                height,
            });
        }
        prev = e.0;
        events.push(Event::new(e.0, e.1 as u16, e.2 as u16, e.3));
    }
    EventStream::new(width, height, events)
}

fn parse_record(body: &str) -> std::result::Result<(f64, i64, i64, i8), String> {
    let mut parts = body.split_ascii_whitespace();
    let mut field = |name: &str| {
        parts
            .next()
            .ok_or_else(|| format!("missing field `{name}`"))
    };
    let t: f64 = field("t")?
        .parse()
        .map_err(|_| "bad timestamp".to_string())?;
    if !t.is_finite() {
        return Err("non-finite timestamp".into());
    }
    let x: i64 = field("x")?.parse().map_err(|_| "bad x".to_string())?;
    let y: i64 = field("y")?.parse().map_err(|_| "bad y".to_string())?;
    let p = match field("p")? {
        "1" | "+1" => 1,
        "0" | "-1" => -1,
        other => return Err(format!("bad polarity `{other}`")),
    };
    if let Some(extra) = parts.next() {
        return Err(format!("unexpected trailing field `{extra}`"));
    }
    Ok((t, x, y, p))
}

/// Writes the text format with 9-decimal timestamps and `0/1` polarity.
pub fn write_event_text<W: Write>(stream: &EventStream, mut out: W) -> Result<()> {
    writeln!(out, "{} {}", stream.width(), stream.height())?;
    for e in stream.events() {
        writeln!(
            out,
            "{:.9} {} {} {}",
            e.t,
            e.x,
            e.y,
            if e.polarity > 0 { 1 } else { 0 }
        )?;
    }
    Ok(())
}

/// `EVB1` container: magic, u16 W, u16 H, u64 count, then 13-byte records
/// (f64 t, u16 x, u16 y, i8 p), all little-endian.
pub fn write_event_binary(stream: &EventStream) -> Result<Vec<u8>> {
    let (w, h) = (dim_u16(stream.width())?, dim_u16(stream.height())?);
    let mut buf = Vec::with_capacity(HEADER_LEN + stream.len() * RECORD_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&w.to_le_bytes());
    buf.extend_from_slice(&h.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.polarity as u8);
    }
    Ok(buf)
}

pub fn read_event_binary(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("truncated EVB1 header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("bad EVB1 magic"));
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let expected = (count as usize)
        .checked_mul(RECORD_LEN)
        .ok_or_else(|| Error::format("EVB1 count overflows"))?;
    if body.len() < expected {
        return Err(Error::format(format!(
            "truncated EVB1 payload: header declares {count} events, found {} bytes of {expected}",
            body.len()
        )));
    }
    if body.len() > expected {
        return Err(Error::format("trailing bytes after EVB1 records"));
    }
    let events = body
        .chunks_exact(RECORD_LEN)
        .map(|r| Event {
            t: f64::from_le_bytes(r[..8].try_into().unwrap()),
            x: u16::from_le_bytes([r[8], r[9]]),
            y: u16::from_le_bytes([r[10], r[11]]),
            polarity: r[12] as i8,
        })
        .collect();
    EventStream::new(w, h, events)
}

/// Reads an event file, detecting `EVB1` by its magic and falling back to
/// the text format.
pub fn read_event_file(path: &std::path::Path) -> Result<EventStream> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        read_event_binary(&bytes)
    } else {
        parse_event_text(std::io::Cursor::new(bytes))
    }
}

/// Writes `EVB1` when the extension is `evb`, text otherwise.
pub fn write_event_file(path: &std::path::Path, stream: &EventStream) -> Result<()> {
    if path.extension().is_some_and(|e| e == "evb") {
        std::fs::write(path, write_event_binary(stream)?)?;
    } else {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_event_text(stream, &mut out)?;
        out.flush()?;
    }
    Ok(())
}
