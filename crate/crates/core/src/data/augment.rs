//! Training-time augmentation: flips, rotation, zoom, symmetric perspective
//! warp, lighting and contrast.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::sample_bilinear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities and magnitudes for each transform. Geometric and
/// photometric magnitudes are maxima; actual values are drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub flip_horizontal_p: f64,
    pub flip_vertical_p: f64,
    pub rotate_p: f64,
    /// Degrees; angles are drawn from `[-max, max]`.
    pub max_rotation: f64,
    pub zoom_p: f64,
    /// Zoom factors are drawn from `[1, max]`.
    pub max_zoom: f64,
    pub lighting_p: f64,
    /// Additive brightness shift drawn from `[-max, max]` (pixel range is [0,1]).
    pub max_lighting: f64,
    pub contrast_p: f64,
    /// Contrast factor drawn from `[1-max, 1+max]`, applied about 0.5.
    pub max_contrast: f64,
    pub warp_p: f64,
    /// Corner displacement in normalized coordinates, drawn from `[-max, max]`.
    pub max_warp: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            flip_horizontal_p: 0.5,
            flip_vertical_p: 0.5,
            rotate_p: 0.75,
            max_rotation: 10.0,
            zoom_p: 0.75,
            max_zoom: 1.1,
            lighting_p: 0.75,
            max_lighting: 0.2,
            contrast_p: 0.75,
            max_contrast: 0.2,
            warp_p: 0.75,
            max_warp: 0.2,
        }
    }
}

/// Concrete draw from a policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotation_degrees: f64,
    pub zoom: f64,
    /// Horizontal and vertical keystone magnitudes.
    pub warp: (f64, f64),
    pub lighting: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            zoom: 1.0,
            contrast: 1.0,
            ..Default::default()
        }
    }

    fn geometric(&self) -> bool {
        self.rotation_degrees != 0.0 || self.zoom != 1.0 || self.warp != (0.0, 0.0)
    }
}

impl AugmentationPolicy {
    /// No transform ever fires.
    pub fn disabled() -> Self {
        AugmentationPolicy {
            flip_horizontal_p: 0.0,
            flip_vertical_p: 0.0,
            rotate_p: 0.0,
            zoom_p: 0.0,
            lighting_p: 0.0,
            contrast_p: 0.0,
            warp_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_horizontal_p", self.flip_horizontal_p),
            ("flip_vertical_p", self.flip_vertical_p),
            ("rotate_p", self.rotate_p),
            ("zoom_p", self.zoom_p),
            ("lighting_p", self.lighting_p),
            ("contrast_p", self.contrast_p),
            ("warp_p", self.warp_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        let checks = [
            ("max_rotation", self.max_rotation >= 0.0 && self.max_rotation <= 180.0),
            ("max_zoom", self.max_zoom >= 1.0 && self.max_zoom.is_finite()),
            ("max_lighting", (0.0..=1.0).contains(&self.max_lighting)),
            ("max_contrast", (0.0..1.0).contains(&self.max_contrast)),
            ("max_warp", (0.0..1.0).contains(&self.max_warp)),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("{name} out of range")));
            }
        }
        Ok(())
    }

    /// Draws one set of parameters. Every decision consumes the same number
    /// of random values regardless of outcome, so the stream stays aligned.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let coin = |p: f64, rng: &mut R| rng.random::<f64>() < p;
        let sym = |m: f64, rng: &mut R| (rng.random::<f64>() * 2.0 - 1.0) * m;
        let flip_horizontal = coin(self.flip_horizontal_p, rng);
        let flip_vertical = coin(self.flip_vertical_p, rng);
        let rotate = coin(self.rotate_p, rng);
        let rotation_degrees = sym(self.max_rotation, rng);
        let zoom_on = coin(self.zoom_p, rng);
        let zoom = 1.0 + rng.random::<f64>() * (self.max_zoom - 1.0);
        let warp_on = coin(self.warp_p, rng);
        let warp = (sym(self.max_warp, rng), sym(self.max_warp, rng));
        let light_on = coin(self.lighting_p, rng);
        let lighting = sym(self.max_lighting, rng);
        let contrast_on = coin(self.contrast_p, rng);
        let contrast = 1.0 + sym(self.max_contrast, rng);
        AugmentParams {
            flip_horizontal,
            flip_vertical,
            rotation_degrees: if rotate { rotation_degrees } else { 0.0 },
            zoom: if zoom_on { zoom } else { 1.0 },
            warp: if warp_on { warp } else { (0.0, 0.0) },
            lighting: if light_on { lighting } else { 0.0 },
            contrast: if contrast_on { contrast } else { 1.0 },
        }
    }
}

/// Samples parameters from `policy` and applies them.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, policy: &AugmentationPolicy, rng: &mut R) -> Result<Tensor> {
    apply(img, &policy.sample(rng))
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for row in 0..c * h {
        out.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(&[c, h, w], out)
}

pub fn flip_vertical(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for i in (0..h).rev() {
            let start = (ch * h + i) * w;
            out.extend_from_slice(&src[start..start + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn chw(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(Error::Dataset(format!("expected non-empty [C,H,W], got {s:?}"))),
    }
}

/// Perspective map taking the unit square corners `(±1,±1)` to
/// `(x(1 + a·y), y(1 + b·x))`.
fn symmetric_warp(a: f64, b: f64) -> Result<Matrix3<f64>> {
    let mut m = SMatrix::<f64, 8, 8>::zeros();
    let mut rhs = SVector::<f64, 8>::zeros();
    for (i, (x, y)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].into_iter().enumerate() {
        let (u, v) = (x * (1.0 + a * y), y * (1.0 + b * x));
        let r = 2 * i;
        m.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        m.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        rhs[r] = u;
        rhs[r + 1] = v;
    }
    let h = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Dataset(format!("degenerate warp ({a}, {b})")))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Output-to-source map in normalized coordinates.
fn geometric_map(p: &AugmentParams) -> Result<Matrix3<f64>> {
    let t = p.rotation_degrees.to_radians();
    let (s, c) = t.sin_cos();
    let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let z = 1.0 / p.zoom;
    let zoom = Matrix3::new(z, 0.0, 0.0, 0.0, z, 0.0, 0.0, 0.0, 1.0);
    Ok(symmetric_warp(p.warp.0, p.warp.1)? * rot * zoom)
}

/// Applies concrete parameters. Output shape equals input shape and values
/// are clamped to `[0,1]`.
pub fn apply(img: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    let mut x = img.clone();
    if p.flip_horizontal {
        x = flip_horizontal(&x)?;
    }
    if p.flip_vertical {
        x = flip_vertical(&x)?;
    }
    if p.geometric() {
        if !(p.zoom >= 1.0) {
            return Err(Error::Dataset(format!("zoom must be >= 1, got {}", p.zoom)));
        }
        let m = geometric_map(p)?;
        let mut out = Vec::with_capacity(c * h * w);
        let mut coords = Vec::with_capacity(h * w);
        for i in 0..h {
            let v = (i as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            for j in 0..w {
                let u = (j as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let q = m * Vector3::new(u, v, 1.0);
                let (su, sv) = (q.x / q.z, q.y / q.z);
                coords.push(((sv + 1.0) / 2.0 * h as f64 - 0.5, (su + 1.0) / 2.0 * w as f64 - 0.5));
            }
        }
        for plane in x.data().chunks(h * w) {
            out.extend(coords.iter().map(|&(y, xx)| sample_bilinear(plane, h, w, y, xx)));
        }
        x = Tensor::new(&[c, h, w], out)?;
    }
    if p.lighting != 0.0 || p.contrast != 1.0 {
        for v in x.data_mut() {
            *v = (*v - 0.5) * p.contrast + 0.5 + p.lighting;
        }
    }
    for v in x.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(x)
}
