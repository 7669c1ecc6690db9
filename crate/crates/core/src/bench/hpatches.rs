//! HPatches directory layout: one folder per sequence (`i_*` illumination,
//! `v_*` viewpoint) holding images `1..6` as `.ppm`/`.pgm` and homography
//! files `H_1_2` .. `H_1_6` with nine whitespace-separated reals each.
//!
//! Problems are handled per pair where possible: a bad `H_1_k` or image
//! `k` drops pair `(1, k)`, an unreadable image 1 drops the sequence. Every
//! dropped item is logged as a warning starting with `skipping` and is
//! listed in [`Loaded::skipped`]. Loading fails only when no pair survives.

use std::path::{Path, PathBuf};

use crate::bench::pnm::{self, PnmFormat, PnmImage};
use crate::bench::synth::{Sequence, SEQUENCE_LEN};
use crate::bench::{PairKind, SequencePair};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::image::Plane;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    /// `seq` or `seq/H_1_k`.
    pub item: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub pairs: Vec<SequencePair>,
    pub sequences: usize,
    pub skipped: Vec<Skipped>,
}

pub fn parse_homography(text: &str) -> Result<Homography> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::invalid("homography", format!("not a number: {t:?}"))))
        .collect::<Result<_>>()?;
    if vals.len() != 9 {
        return Err(Error::invalid("homography", format!("expected 9 numbers, found {}", vals.len())));
    }
    Homography::from_rows([[vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], [vals[6], vals[7], vals[8]]])
}

pub fn format_homography(h: &Homography) -> String {
    h.rows()
        .iter()
        .map(|r| format!("{} {} {}\n", r[0], r[1], r[2]))
        .collect()
}

fn find_image(dir: &Path, k: usize) -> Result<PathBuf> {
    for ext in ["ppm", "pgm"] {
        let p = dir.join(format!("{k}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Image {
        path: dir.join(format!("{k}.ppm")),
        detail: "no .ppm or .pgm image".into(),
    })
}

/// Crops bottom/right so both sides are multiples of 8; the top-left
/// origin, and with it every homography, is unchanged.
fn crop8(p: Plane) -> Result<Plane> {
    let (h, w) = (p.h / 8 * 8, p.w / 8 * 8);
    if h == 0 || w == 0 {
        return Err(Error::invalid("hpatches", format!("image {}x{} smaller than 8x8", p.h, p.w)));
    }
    if (h, w) == (p.h, p.w) {
        return Ok(p);
    }
    Ok(Plane::from_fn(h, w, |y, x| p.get(y, x)))
}

fn load_image(dir: &Path, k: usize) -> Result<Plane> {
    crop8(pnm::read_gray(&find_image(dir, k)?)?)
}

fn skip(skipped: &mut Vec<Skipped>, item: String, err: &Error) {
    log::warn!("skipping {item}: {err}");
    skipped.push(Skipped {
        item,
        reason: err.to_string(),
    });
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut seqs: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok().map(|n| (n, e.path())))
        .collect();
    seqs.sort();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut sequences = 0;
    for (name, path) in seqs {
        let kind = if name.starts_with("i_") {
            PairKind::Illumination
        } else if name.starts_with("v_") {
            PairKind::Viewpoint
        } else {
            continue;
        };
        let reference = match load_image(&path, 1) {
            Ok(p) => p.to_tensor(),
            Err(e) => {
                skip(&mut skipped, name.clone(), &e);
                continue;
            }
        };
        let before = pairs.len();
        for k in 2..=SEQUENCE_LEN {
            let hpath = path.join(format!("H_1_{k}"));
            let pair = std::fs::read_to_string(&hpath)
                .map_err(|e| Error::io(&hpath, e))
                .and_then(|t| parse_homography(&t))
                .and_then(|h| Ok((h, load_image(&path, k)?)));
            match pair {
                Ok((h_ab, img)) => pairs.push(SequencePair {
                    name: format!("{name}/1-{k}"),
                    kind,
                    image_a: reference.clone(),
                    image_b: img.to_tensor(),
                    h_ab,
                    corners_a: Vec::new(),
                    corners_b: Vec::new(),
                }),
                Err(e) => skip(&mut skipped, format!("{name}/H_1_{k}"), &e),
            }
        }
        if pairs.len() > before {
            sequences += 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoSequences(dir.to_path_buf()));
    }
    Ok(Loaded {
        pairs,
        sequences,
        skipped,
    })
}

/// Writes each sequence as `<dir>/<name>/{1..6}.pgm` plus `H_1_k` files.
pub fn export(dir: &Path, sequences: &[Sequence]) -> Result<()> {
    for s in sequences {
        let sd = dir.join(&s.name);
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (k, img) in s.images.iter().enumerate() {
            pnm::write(&sd.join(format!("{}.pgm", k + 1)), &PnmImage::from_plane(img, PnmFormat::P5))?;
        }
        for (k, h) in s.homographies.iter().enumerate() {
            let p = sd.join(format!("H_1_{}", k + 2));
            std::fs::write(&p, format_homography(h)).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_text_round_trip() {
        let h = Homography::from_rows([[1.01, 0.02, -3.5], [0.001, 0.99, 7.25], [1e-5, -2e-5, 1.0]]).unwrap();
        assert_eq!(parse_homography(&format_homography(&h)).unwrap(), h);
        assert!(parse_homography("1 0 0 0 1 0 0 0").is_err());
        assert!(parse_homography("1 0 0 0 1 0 0 0 x").is_err());
    }
}
