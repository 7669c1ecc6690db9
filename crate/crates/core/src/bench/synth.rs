//! Procedural corner-rich scenes and image pairs with known geometry.
//!
//! Scenes are stacks of axis-aligned rectangles and checkerboard patches on
//! a shaded background. Corner positions are read back from the clean
//! rendering at pixel-boundary lattice points `(x - 0.5, y - 0.5)`, so the
//! generator carries its own ground truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bench::{PairKind, SequencePair};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::image::Plane;
use crate::rng;

/// Minimum step between neighbouring regions for a lattice point to count
/// as a corner.
pub const CONTRAST_MIN: f64 = 0.15;
pub const NOISE_STD: f64 = 0.02;
/// Bound on how far a viewpoint warp moves an image corner, as a fraction
/// of the shorter side.
pub const MAX_CORNER_SHIFT: f64 = 0.2;
pub const BENCH_HEIGHT: usize = 192;
pub const BENCH_WIDTH: usize = 256;

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Plane,
    /// `(x, y)` in pixel-centre coordinates.
    pub corners: Vec<(f64, f64)>,
}

fn paint_rect(img: &mut Plane, y0: usize, x0: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) {
    for y in y0..(y0 + h).min(img.h) {
        for x in x0..(x0 + w).min(img.w) {
            img.set(y, x, f(y - y0, x - x0));
        }
    }
}

/// Noise-free scene.
pub fn clean_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    let base = rng.random_range(0.3..0.7);
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut img = Plane::from_fn(h, w, |y, x| base + gy * y as f64 / h as f64 + gx * x as f64 / w as f64);
    let count = (h * w / 800).clamp(4, 60);
    for _ in 0..count {
        let rh = rng.random_range(6..=(h / 4).max(8));
        let rw = rng.random_range(6..=(w / 4).max(8));
        let y0 = rng.random_range(0..h.saturating_sub(4).max(1));
        let x0 = rng.random_range(0..w.saturating_sub(4).max(1));
        let a: f64 = rng.random();
        if rng.random_bool(0.25) {
            let cell = rng.random_range(4..=8);
            let b = if a > 0.5 { a - rng.random_range(0.3..0.5) } else { a + rng.random_range(0.3..0.5) };
            paint_rect(&mut img, y0, x0, rh, rw, |y, x| if (y / cell + x / cell) % 2 == 0 { a } else { b });
        } else {
            paint_rect(&mut img, y0, x0, rh, rw, |_, _| a);
        }
    }
    img.clamp01();
    img
}

/// Lattice points where the four surrounding pixels form an L-corner or an
/// X-junction.
pub fn lattice_corners(img: &Plane) -> Vec<(f64, f64)> {
    let same = |a: f64, b: f64| (a - b).abs() < CONTRAST_MIN / 3.0;
    let differ = |a: f64, b: f64| (a - b).abs() >= CONTRAST_MIN;
    let mut out = Vec::new();
    for y in 1..img.h {
        for x in 1..img.w {
            let q = [img.get(y - 1, x - 1), img.get(y - 1, x), img.get(y, x - 1), img.get(y, x)];
            let l_corner = (0..4).any(|odd| {
                let rest: Vec<f64> = (0..4).filter(|&i| i != odd).map(|i| q[i]).collect();
                same(rest[0], rest[1]) && same(rest[1], rest[2]) && same(rest[0], rest[2]) && rest.iter().all(|&r| differ(r, q[odd]))
            });
            let x_junction = same(q[0], q[3]) && same(q[1], q[2]) && differ(q[0], q[1]);
            if l_corner || x_junction {
                out.push((x as f64 - 0.5, y as f64 - 0.5));
            }
        }
    }
    out
}

pub fn add_noise(img: &mut Plane, rng: &mut ChaCha8Rng, std: f64) {
    let n = Normal::new(0.0, std).expect("finite std");
    img.data.iter_mut().for_each(|v| *v += n.sample(rng));
    img.clamp01();
}

/// Scene with sensor noise, and the corners of its clean rendering.
pub fn render_scene(seed: u64, h: usize, w: usize) -> Scene {
    let clean = clean_scene(&mut rng::stream(seed, "synth.scene"), h, w);
    let corners = lattice_corners(&clean);
    let mut image = clean;
    add_noise(&mut image, &mut rng::stream(seed, "synth.noise.a"), NOISE_STD);
    Scene { image, corners }
}

/// Checkerboard of `cell`-pixel squares alternating 0.2 / 0.8.
pub fn checkerboard(h: usize, w: usize, cell: usize) -> Scene {
    let image = Plane::from_fn(h, w, |y, x| if (y / cell + x / cell) % 2 == 0 { 0.2 } else { 0.8 });
    let corners = lattice_corners(&image);
    Scene { image, corners }
}

/// `out(p) = src(H^-1 p)`, bilinear with reflection padding.
pub fn warp_image(src: &Plane, h_ab: &Homography) -> Result<Plane> {
    let inv = h_ab.inverse()?;
    Ok(Plane::from_fn(src.h, src.w, |y, x| match inv.warp_point(x as f64, y as f64) {
        Ok((sx, sy)) if sx.is_finite() && sy.is_finite() && sx.abs() < 1e6 && sy.abs() < 1e6 => src.bilinear(sy, sx),
        _ => 0.0,
    }))
}

/// Random perspective warp moving each image corner by at most
/// `MAX_CORNER_SHIFT` of the shorter side.
pub fn random_homography(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Homography> {
    let (fw, fh) = ((w - 1) as f64, (h - 1) as f64);
    let src = [(0.0, 0.0), (fw, 0.0), (fw, fh), (0.0, fh)];
    let reach = MAX_CORNER_SHIFT * h.min(w) as f64;
    let dst = src.map(|(x, y)| {
        let r = reach * rng.random::<f64>();
        let t = std::f64::consts::TAU * rng.random::<f64>();
        (x + r * t.cos(), y + r * t.sin())
    });
    Homography::from_correspondences(&src, &dst)
}

fn photometric(img: &Plane, rng: &mut ChaCha8Rng) -> Plane {
    let gamma = rng.random_range(0.6..1.6);
    let gain = rng.random_range(0.7..1.3);
    let bias = rng.random_range(-0.1..0.1);
    let mut out = Plane {
        data: img.data.iter().map(|v| gain * v.powf(gamma) + bias).collect(),
        ..*img
    };
    out.clamp01();
    out
}

pub fn generate_pair(seed: u64, kind: PairKind, h: usize, w: usize) -> Result<SequencePair> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid("generate_pair", format!("size {h}x{w} must be a nonzero multiple of 8")));
    }
    let clean = clean_scene(&mut rng::stream(seed, "synth.scene"), h, w);
    let corners_a = lattice_corners(&clean);
    let mut geo = rng::stream(seed, "synth.geometry");
    let (h_ab, mut b) = match kind {
        PairKind::Viewpoint => {
            let hm = random_homography(&mut geo, h, w)?;
            let b = warp_image(&clean, &hm)?;
            (hm, b)
        }
        PairKind::Illumination => (Homography::identity(), photometric(&clean, &mut geo)),
    };
    let mut a = clean;
    add_noise(&mut a, &mut rng::stream(seed, "synth.noise.a"), NOISE_STD);
    add_noise(&mut b, &mut rng::stream(seed, "synth.noise.b"), NOISE_STD);
    let corners_b = corners_a
        .iter()
        .map(|&(x, y)| {
            h_ab.warp_point(x, y)
                .ok()
                .filter(|&(u, v)| u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64)
        })
        .collect();
    Ok(SequencePair {
        name: format!("{}_{seed}", kind.prefix()),
        kind,
        image_a: a.to_tensor(),
        image_b: b.to_tensor(),
        h_ab,
        corners_a,
        corners_b,
    })
}

pub const SEQUENCE_LEN: usize = 6;

/// Reference image plus `SEQUENCE_LEN - 1` views, HPatches style.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub kind: PairKind,
    pub images: Vec<Plane>,
    /// `homographies[k]` maps image 1 to image `k + 2`.
    pub homographies: Vec<Homography>,
}

impl Sequence {
    /// Pairs `(1, k)` for `k = 2..=n`.
    pub fn pairs(&self) -> Vec<SequencePair> {
        self.homographies
            .iter()
            .enumerate()
            .map(|(k, h)| SequencePair {
                name: format!("{}/1-{}", self.name, k + 2),
                kind: self.kind,
                image_a: self.images[0].to_tensor(),
                image_b: self.images[k + 1].to_tensor(),
                h_ab: *h,
                corners_a: Vec::new(),
                corners_b: Vec::new(),
            })
            .collect()
    }
}

pub fn generate_sequence(seed: u64, kind: PairKind, h: usize, w: usize) -> Result<Sequence> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid("generate_sequence", format!("size {h}x{w} must be a nonzero multiple of 8")));
    }
    let clean = clean_scene(&mut rng::stream(seed, "synth.scene"), h, w);
    let mut images = Vec::with_capacity(SEQUENCE_LEN);
    let mut homographies = Vec::with_capacity(SEQUENCE_LEN - 1);
    for k in 1..=SEQUENCE_LEN {
        let mut geo = rng::stream(seed, &format!("synth.geometry.{k}"));
        let mut img = if k == 1 {
            clean.clone()
        } else {
            match kind {
                PairKind::Viewpoint => {
                    let hm = random_homography(&mut geo, h, w)?;
                    homographies.push(hm);
                    warp_image(&clean, &hm)?
                }
                PairKind::Illumination => {
                    homographies.push(Homography::identity());
                    photometric(&clean, &mut geo)
                }
            }
        };
        add_noise(&mut img, &mut rng::stream(seed, &format!("synth.noise.{k}")), NOISE_STD);
        images.push(img);
    }
    Ok(Sequence {
        name: format!("{}_synth{seed}", kind.prefix()),
        kind,
        images,
        homographies,
    })
}

/// Alternating illumination / viewpoint pairs with seeds derived from `seed`.
pub fn benchmark_pairs(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<SequencePair>> {
    (0..count)
        .map(|i| {
            let kind = if i % 2 == 0 { PairKind::Illumination } else { PairKind::Viewpoint };
            generate_pair(rng::sub_seed(seed, &format!("pair.{i}")), kind, h, w)
        })
        .collect()
}
