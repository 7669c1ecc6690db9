//! Netpbm grayscale and colour images: P2, P3 (ASCII) and P5, P6 (binary).

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmFormat {
    P2,
    P3,
    P5,
    P6,
}

impl PnmFormat {
    pub fn channels(self) -> usize {
        match self {
            PnmFormat::P2 | PnmFormat::P5 => 1,
            PnmFormat::P3 | PnmFormat::P6 => 3,
        }
    }

    fn binary(self) -> bool {
        matches!(self, PnmFormat::P5 | PnmFormat::P6)
    }

    fn magic(self) -> &'static str {
        match self {
            PnmFormat::P2 => "P2",
            PnmFormat::P3 => "P3",
            PnmFormat::P5 => "P5",
            PnmFormat::P6 => "P6",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub format: PnmFormat,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved samples, `channels` per pixel.
    pub samples: Vec<u16>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Image {
        path: Default::default(),
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad("unexpected end of header or data"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| bad("non-ASCII token"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| bad(format!("bad {what}: {t:?}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    let mut c = Cursor { bytes, pos: 0 };
    let format = match c.token()? {
        "P2" => PnmFormat::P2,
        "P3" => PnmFormat::P3,
        "P5" => PnmFormat::P5,
        "P6" => PnmFormat::P6,
        m => return Err(bad(format!("unsupported magic {m:?}"))),
    };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    let n = width * height * format.channels();
    let mut samples = Vec::with_capacity(n);
    if format.binary() {
        // exactly one whitespace byte separates the header from the raster
        c.pos += 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes.get(c.pos..c.pos + need).ok_or_else(|| bad("truncated raster"))?;
        if wide {
            samples.extend(raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])));
        } else {
            samples.extend(raster.iter().map(|&b| b as u16));
        }
    } else {
        for _ in 0..n {
            samples.push(c.number("sample")? as u16);
        }
    }
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Ok(PnmImage {
        format,
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode(img: &PnmImage) -> Vec<u8> {
    let mut out = format!("{}\n{} {}\n{}\n", img.format.magic(), img.width, img.height, img.maxval).into_bytes();
    if img.format.binary() {
        if img.maxval > 255 {
            img.samples.iter().for_each(|s| out.extend_from_slice(&s.to_be_bytes()));
        } else {
            out.extend(img.samples.iter().map(|&s| s as u8));
        }
    } else {
        let per_line = img.width * img.format.channels();
        for row in img.samples.chunks(per_line) {
            let line: Vec<String> = row.iter().map(|s| s.to_string()).collect();
            out.extend_from_slice(line.join(" ").as_bytes());
            out.push(b'\n');
        }
    }
    out
}

impl PnmImage {
    /// Grayscale in `[0, 1]`; colour images use Rec. 601 luma weights.
    pub fn to_plane(&self) -> Plane {
        let m = self.maxval as f64;
        let ch = self.format.channels();
        Plane::from_fn(self.height, self.width, |y, x| {
            let i = (y * self.width + x) * ch;
            if ch == 1 {
                self.samples[i] as f64 / m
            } else {
                let s = &self.samples[i..i + 3];
                (0.299 * s[0] as f64 + 0.587 * s[1] as f64 + 0.114 * s[2] as f64) / m
            }
        })
    }

    /// 8-bit grayscale image of a `[0, 1]` plane, rounded to nearest.
    pub fn from_plane(p: &Plane, format: PnmFormat) -> PnmImage {
        let gray: Vec<u16> = p.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
        let samples = if format.channels() == 1 {
            gray
        } else {
            gray.iter().flat_map(|&g| [g, g, g]).collect()
        };
        PnmImage {
            format,
            width: p.w,
            height: p.h,
            maxval: 255,
            samples,
        }
    }
}

/// Rounds a plane to the values an 8-bit image can hold.
pub fn quantize_8bit(p: &Plane) -> Plane {
    PnmImage::from_plane(p, PnmFormat::P5).to_plane()
}

pub fn read_gray(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map(|img| img.to_plane()).map_err(|e| match e {
        Error::Image { detail, .. } => Error::Image {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}

pub fn write(path: &Path, img: &PnmImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}
