//! Framing for the classifier-serving protocol.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! request:  "DBQ1" | u8 1   | u32 N | u32 C | u32 H | u32 W | N*C*H*W f32
//! response: "DBQ1" | u8 2   | u32 N | u32 K | N*K f32
//! error:    "DBQ1" | u8 255 | u32 len | len bytes of UTF-8
//! ```

use std::io::Read;

use super::ProbabilityVector;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

pub const MAGIC: &[u8; 4] = b"DBQ1";
pub const MSG_REQUEST: u8 = 1;
pub const MSG_RESPONSE: u8 = 2;
pub const MSG_ERROR: u8 = 255;

/// Upper bound on a single frame body, to refuse absurd headers.
const MAX_BODY: u64 = 1 << 31;

fn protocol<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Protocol(msg.into()))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Protocol(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_predict_request(images: &[ImageTensor]) -> Result<Vec<u8>> {
    let Some(first) = images.first() else {
        return protocol("cannot encode an empty batch");
    };
    let shape = first.shape();
    if images.iter().any(|img| img.shape() != shape) {
        return protocol("images in one request must share a shape");
    }
    let mut buf = Vec::with_capacity(21 + 4 * images.len() * shape.len());
    buf.extend_from_slice(MAGIC);
    buf.push(MSG_REQUEST);
    put_u32(&mut buf, images.len())?;
    put_u32(&mut buf, shape.channels)?;
    put_u32(&mut buf, shape.height)?;
    put_u32(&mut buf, shape.width)?;
    for img in images {
        for v in img.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn check_header(bytes: &[u8], msg_type: u8) -> Result<()> {
    if bytes.len() < 5 {
        return protocol("frame shorter than its header");
    }
    if &bytes[..4] != MAGIC {
        return protocol("bad magic");
    }
    if bytes[4] == MSG_ERROR && msg_type != MSG_ERROR {
        let msg = decode_error(bytes).unwrap_or_else(|e| e.to_string());
        return protocol(format!("peer reported: {msg}"));
    }
    if bytes[4] != msg_type {
        return protocol(format!("expected message type {msg_type}, got {}", bytes[4]));
    }
    Ok(())
}

pub fn decode_predict_request(bytes: &[u8]) -> Result<Vec<ImageTensor>> {
    check_header(bytes, MSG_REQUEST)?;
    if bytes.len() < 21 {
        return protocol("truncated request header");
    }
    let n = u32_at(bytes, 5) as usize;
    let shape = Shape::new(u32_at(bytes, 9) as usize, u32_at(bytes, 13) as usize, u32_at(bytes, 17) as usize);
    if n == 0 || shape.is_empty() {
        return protocol("request declares an empty batch or image");
    }
    let body = &bytes[21..];
    if body.len() as u64 != 4 * n as u64 * shape.len() as u64 {
        return protocol(format!("request declares {n} images of {shape} but carries {} payload bytes", body.len()));
    }
    let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    values
        .chunks_exact(shape.len())
        .map(|chunk| ImageTensor::from_f32(shape, chunk).map_err(|e| Error::Protocol(e.to_string())))
        .collect()
}

pub fn encode_predict_response(rows: &[ProbabilityVector]) -> Result<Vec<u8>> {
    let Some(first) = rows.first() else {
        return protocol("cannot encode an empty response");
    };
    let k = first.len();
    if rows.iter().any(|r| r.len() != k) {
        return protocol("response rows differ in length");
    }
    let mut buf = Vec::with_capacity(13 + 4 * rows.len() * k);
    buf.extend_from_slice(MAGIC);
    buf.push(MSG_RESPONSE);
    put_u32(&mut buf, rows.len())?;
    put_u32(&mut buf, k)?;
    for row in rows {
        for p in row.as_slice() {
            buf.extend_from_slice(&(*p as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Decodes a response; every row must pass the normalization policy of
/// [`ProbabilityVector::from_untrusted`].
pub fn decode_predict_response(bytes: &[u8]) -> Result<Vec<ProbabilityVector>> {
    check_header(bytes, MSG_RESPONSE)?;
    if bytes.len() < 13 {
        return protocol("truncated response header");
    }
    let n = u32_at(bytes, 5) as usize;
    let k = u32_at(bytes, 9) as usize;
    if n == 0 || k == 0 {
        return protocol("response declares no rows or no classes");
    }
    let body = &bytes[13..];
    if body.len() as u64 != 4 * n as u64 * k as u64 {
        return protocol(format!("response declares {n} rows of {k} classes but carries {} payload bytes", body.len()));
    }
    body.chunks_exact(4 * k)
        .map(|row| {
            ProbabilityVector::from_untrusted(
                row.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
            )
        })
        .collect()
}

pub fn encode_error(message: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(9 + message.len());
    buf.extend_from_slice(MAGIC);
    buf.push(MSG_ERROR);
    buf.extend_from_slice(&(message.len() as u32).to_le_bytes());
    buf.extend_from_slice(message.as_bytes());
    buf
}

pub fn decode_error(bytes: &[u8]) -> Result<String> {
    check_header(bytes, MSG_ERROR)?;
    if bytes.len() < 9 {
        return protocol("truncated error header");
    }
    let len = u32_at(bytes, 5) as usize;
    if bytes.len() != 9 + len {
        return protocol("error frame length mismatch");
    }
    String::from_utf8(bytes[9..].to_vec()).map_err(|_| Error::Protocol("error message is not UTF-8".into()))
}

/// Reads exactly one frame from a stream, returning its full bytes.
///
/// Returns `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut head = [0u8; 5];
    match reader.read(&mut head[..1]) {
        Ok(0) => return Ok(None),
        Ok(_) => {}
        Err(e) => return Err(Error::Transport(e.to_string())),
    }
    read_exact(reader, &mut head[1..])?;
    if &head[..4] != MAGIC {
        return protocol("bad magic");
    }
    let (fixed, per_unit): (usize, fn(&[u8]) -> u64) = match head[4] {
        MSG_REQUEST => (16, |h| {
            let n = u32_at(h, 0) as u64;
            n * u32_at(h, 4) as u64 * u32_at(h, 8) as u64 * u32_at(h, 12) as u64 * 4
        }),
        MSG_RESPONSE => (8, |h| u32_at(h, 0) as u64 * u32_at(h, 4) as u64 * 4),
        MSG_ERROR => (4, |h| u32_at(h, 0) as u64),
        other => return protocol(format!("unknown message type {other}")),
    };
    let mut header = vec![0u8; fixed];
    read_exact(reader, &mut header)?;
    let body_len = per_unit(&header);
    if body_len > MAX_BODY {
        return protocol(format!("frame body of {body_len} bytes exceeds limit"));
    }
    let mut frame = Vec::with_capacity(5 + fixed + body_len as usize);
    frame.extend_from_slice(&head);
    frame.extend_from_slice(&header);
    let start = frame.len();
    frame.resize(start + body_len as usize, 0);
    read_exact(reader, &mut frame[start..])?;
    Ok(Some(frame))
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Protocol("truncated frame".into()),
        _ => Error::Transport(e.to_string()),
    })
}
