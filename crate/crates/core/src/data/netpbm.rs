//! Binary PPM (P6) and PGM (P5) reading and writing, maxval 255. Writes are
//! atomic (temp file + rename).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ByteImage {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<ByteImage> {
        if data.len() != h * w * 3 {
            return Err(Error::invalid(
                "image",
                format!("payload {} does not match {h}x{w} RGB", data.len()),
            ));
        }
        Ok(ByteImage { h, w, data })
    }
}

struct HeaderParser<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_string(), offset: self.pos, msg: msg.into() }
    }

    /// Skip whitespace and `#` comment lines between header tokens.
    fn skip_separators(&mut self) -> Result<()> {
        loop {
            match self.buf.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.buf.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(self.err("unexpected end of header")),
            }
        }
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_separators()?;
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an integer"));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.err("integer out of range"))
    }
}

fn parse_netpbm<'a>(buf: &'a [u8], path: &str, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut p = HeaderParser { buf, pos: 0, path };
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(p.err(format!(
            "expected magic {}{}",
            magic[0] as char, magic[1] as char
        )));
    }
    p.pos = 2;
    let w = p.integer()?;
    let h = p.integer()?;
    let maxval = p.integer()?;
    if maxval != 255 {
        return Err(p.err(format!("maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    match buf.get(p.pos) {
        Some(b) if b.is_ascii_whitespace() => p.pos += 1,
        _ => return Err(p.err("expected single whitespace after maxval")),
    }
    if w == 0 || h == 0 {
        return Err(p.err("zero image dimension"));
    }
    let need = w * h * channels;
    let have = buf.len() - p.pos;
    if have < need {
        return Err(Error::Parse {
            path: path.to_string(),
            offset: buf.len(),
            msg: format!("truncated payload: need {need} bytes, have {have}"),
        });
    }
    if have > need {
        return Err(Error::Parse {
            path: path.to_string(),
            offset: p.pos + need,
            msg: format!("{} trailing bytes after payload", have - need),
        });
    }
    Ok((h, w, &buf[p.pos..]))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ByteImage> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| Error::io(&*path_str, e))?;
    let (h, w, payload) = parse_netpbm(&buf, &path_str, b"P6", 3)?;
    ByteImage::new(h, w, payload.to_vec())
}

/// Grayscale PGM; for label maps the pixel bytes are raw class ids.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| Error::io(&*path_str, e))?;
    let (h, w, payload) = parse_netpbm(&buf, &path_str, b"P5", 1)?;
    Ok((h, w, payload.to_vec()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn save_ppm(path: impl AsRef<Path>, img: &ByteImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    bytes.extend_from_slice(&img.data);
    write_atomic(path.as_ref(), &bytes)
}

pub fn save_pgm(path: impl AsRef<Path>, h: usize, w: usize, data: &[u8]) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::invalid(
            "save_pgm",
            format!("payload {} does not match {h}x{w}", data.len()),
        ));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    write_atomic(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let data: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ByteImage::new(4, 5, data).unwrap();
        save_ppm(&path, &img).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.pgm");
        let data: Vec<u8> = (0..12).map(|i| i as u8).collect();
        save_pgm(&path, 3, 4, &data).unwrap();
        let (h, w, back) = load_pgm(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn header_comments_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        std::fs::write(&path, &bytes).unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!((img.h, img.w), (1, 2));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn truncated_payload_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 5]); // needs 12
        std::fs::write(&path, &bytes).unwrap();
        match load_ppm(&path) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert!(msg.contains("truncated"), "{msg}");
                assert_eq!(offset, bytes.len());
            }
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_maxval_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &bytes).unwrap();
        match load_pgm(&path) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("maxval"), "{msg}"),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n...").unwrap();
        assert!(load_ppm(&path).is_err());
    }
}
