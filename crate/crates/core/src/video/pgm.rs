//! Binary PGM (P5) frame dumps.

use super::{Frame, VideoError};

pub fn write_pgm(f: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", f.width, f.height).into_bytes();
    out.extend_from_slice(&f.pixels);
    out
}

pub fn read_pgm(bytes: &[u8]) -> Result<Frame, VideoError> {
    let err = |m: &str| VideoError::Pgm(m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(err("not a P5 file"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(err("only 8-bit PGM is supported"));
    }
    pos += 1;
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| err("truncated raster"))?;
    Ok(Frame {
        frame_id: 0,
        width: w,
        height: h,
        pixels: data.to_vec(),
        capture_ts: Default::default(),
    })
}
