//! Linear degradations `D` with exact right inverses.
//!
//! Images are stored row-major with interleaved channels (`[y][x][c]`).
//! Conditions always live in the operator's output space; lifting back to
//! sample space only happens in [`LinearDegradation::right_inverse`] and
//! [`LinearDegradation::projector`].

use rand::Rng;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn square(side: usize, channels: usize) -> Self {
        Self::new(side, side, channels)
    }

    /// A flat vector viewed as a single row of one-channel pixels.
    pub fn vector(len: usize) -> Self {
        Self::new(1, len, 1)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearDegradation {
    /// Keeps the channels of observed pixels, in pixel order.
    Mask {
        shape: ImageShape,
        observed: Vec<bool>,
    },
    /// Non-overlapping `factor x factor` block means, per channel.
    Downscale { shape: ImageShape, factor: usize },
    /// Per-pixel mean over channels.
    Grayscale { shape: ImageShape },
    /// Picks the listed coordinates of a flat vector.
    CoordinateSelect { dim: usize, indices: Vec<usize> },
    /// Applied left to right.
    Composition(Vec<LinearDegradation>),
}

impl LinearDegradation {
    pub fn mask(shape: ImageShape, observed: Vec<bool>) -> Result<Self> {
        check_dim(shape.pixels(), observed.len())?;
        Ok(Self::Mask { shape, observed })
    }

    pub fn downscale(shape: ImageShape, factor: usize) -> Result<Self> {
        if factor == 0 || !shape.height.is_multiple_of(factor) || !shape.width.is_multiple_of(factor) {
            return Err(Error::InvalidParameter(format!(
                "scale factor {factor} does not divide a {}x{} image",
                shape.height, shape.width
            )));
        }
        Ok(Self::Downscale { shape, factor })
    }

    pub fn grayscale(shape: ImageShape) -> Result<Self> {
        if shape.channels == 0 {
            return Err(Error::InvalidParameter("grayscale needs at least one channel".into()));
        }
        Ok(Self::Grayscale { shape })
    }

    pub fn coordinate_select(dim: usize, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::InvalidParameter(format!("coordinate {bad} out of range for dimension {dim}")));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::InvalidParameter("coordinate indices must be distinct".into()));
        }
        Ok(Self::CoordinateSelect { dim, indices })
    }

    pub fn compose(parts: Vec<LinearDegradation>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("empty composition".into()));
        }
        for pair in parts.windows(2) {
            check_dim(pair[0].output_len(), pair[1].input_len())?;
        }
        Ok(Self::Composition(parts))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Mask { .. } => "mask",
            Self::Downscale { .. } => "downscale",
            Self::Grayscale { .. } => "grayscale",
            Self::CoordinateSelect { .. } => "coordinate-select",
            Self::Composition(_) => "composition",
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Self::Mask { shape, .. } | Self::Downscale { shape, .. } | Self::Grayscale { shape } => shape.len(),
            Self::CoordinateSelect { dim, .. } => *dim,
            Self::Composition(parts) => parts[0].input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Self::Mask { shape, observed } => observed.iter().filter(|o| **o).count() * shape.channels,
            Self::Downscale { shape, factor } => shape.len() / (factor * factor),
            Self::Grayscale { shape } => shape.pixels(),
            Self::CoordinateSelect { indices, .. } => indices.len(),
            Self::Composition(parts) => parts[parts.len() - 1].output_len(),
        }
    }

    /// Shape of the output when it is itself an image.
    pub fn output_shape(&self) -> Option<ImageShape> {
        match self {
            Self::Downscale { shape, factor } => Some(ImageShape::new(
                shape.height / factor,
                shape.width / factor,
                shape.channels,
            )),
            Self::Grayscale { shape } => Some(ImageShape::new(shape.height, shape.width, 1)),
            Self::Composition(parts) => parts[parts.len() - 1].output_shape(),
            _ => None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_len(), x.len())?;
        Ok(match self {
            Self::Mask { shape, observed } => {
                let ch = shape.channels;
                observed
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| **o)
                    .flat_map(|(p, _)| x[p * ch..(p + 1) * ch].iter().copied())
                    .collect()
            }
            Self::Downscale { shape, factor } => {
                let f = *factor;
                let out_shape = ImageShape::new(shape.height / f, shape.width / f, shape.channels);
                let norm = (f * f) as f64;
                let mut out = vec![0.0; out_shape.len()];
                for by in 0..out_shape.height {
                    for bx in 0..out_shape.width {
                        for c in 0..shape.channels {
                            let mut acc = 0.0;
                            for dy in 0..f {
                                for dx in 0..f {
                                    acc += x[shape.index(by * f + dy, bx * f + dx, c)];
                                }
                            }
                            out[out_shape.index(by, bx, c)] = acc / norm;
                        }
                    }
                }
                out
            }
            Self::Grayscale { shape } => {
                let ch = shape.channels;
                x.chunks(ch).map(|px| px.iter().sum::<f64>() / ch as f64).collect()
            }
            Self::CoordinateSelect { indices, .. } => indices.iter().map(|&i| x[i]).collect(),
            Self::Composition(parts) => {
                let mut v = x.to_vec();
                for p in parts {
                    v = p.apply(&v)?;
                }
                v
            }
        })
    }

    /// Lift of a condition into sample space with `apply(right_inverse(c)) == c`:
    /// scatter-with-zeros for masks and selections, block replication for
    /// downscaling, channel replication for grayscale.
    pub fn right_inverse(&self, c: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_len(), c.len())?;
        Ok(match self {
            Self::Mask { shape, observed } => {
                let ch = shape.channels;
                let mut out = vec![0.0; shape.len()];
                let mut src = c.chunks(ch);
                for (p, _) in observed.iter().enumerate().filter(|(_, o)| **o) {
                    out[p * ch..(p + 1) * ch].copy_from_slice(src.next().expect("sized by output_len"));
                }
                out
            }
            Self::Downscale { shape, factor } => {
                let f = *factor;
                let out_shape = ImageShape::new(shape.height / f, shape.width / f, shape.channels);
                let mut out = vec![0.0; shape.len()];
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        for ch in 0..shape.channels {
                            out[shape.index(y, x, ch)] = c[out_shape.index(y / f, x / f, ch)];
                        }
                    }
                }
                out
            }
            Self::Grayscale { shape } => c
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g, shape.channels))
                .collect(),
            Self::CoordinateSelect { dim, indices } => {
                let mut out = vec![0.0; *dim];
                for (&i, &v) in indices.iter().zip(c) {
                    out[i] = v;
                }
                out
            }
            Self::Composition(parts) => {
                let mut v = c.to_vec();
                for p in parts.iter().rev() {
                    v = p.right_inverse(&v)?;
                }
                v
            }
        })
    }

    /// `D^T c`. For these operators the adjoint is the right inverse scaled
    /// by `1 / (D D^T)`'s constant diagonal.
    pub fn adjoint(&self, c: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Composition(parts) => {
                check_dim(self.output_len(), c.len())?;
                let mut v = c.to_vec();
                for p in parts.iter().rev() {
                    v = p.adjoint(&v)?;
                }
                Ok(v)
            }
            _ => {
                let scale = match self {
                    Self::Downscale { factor, .. } => 1.0 / (factor * factor) as f64,
                    Self::Grayscale { shape } => 1.0 / shape.channels as f64,
                    _ => 1.0,
                };
                let mut v = self.right_inverse(c)?;
                if scale != 1.0 {
                    v.iter_mut().for_each(|x| *x *= scale);
                }
                Ok(v)
            }
        }
    }

    /// `right_inverse(apply(x))`: the component of `x` along the degradation.
    pub fn projector(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.right_inverse(&self.apply(x)?)
    }
}

/// Coarse/fine taxonomy of inpainting holes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStyle {
    /// Random one-pixel strokes.
    Thin,
    /// Random axis-aligned rectangles.
    Medium,
    /// A random half-plane.
    Thick,
}

impl std::str::FromStr for MaskStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thin" => Ok(Self::Thin),
            "medium" => Ok(Self::Medium),
            "thick" => Ok(Self::Thick),
            other => Err(Error::InvalidParameter(format!("unknown mask style '{other}'"))),
        }
    }
}

/// Random observed-pixel bitmap for an `height x width` image. Hides pixels
/// until at most `observed_fraction` of them remain observed (at least one
/// pixel is always hidden and at least one kept).
pub fn generate_mask(
    style: MaskStyle,
    height: usize,
    width: usize,
    observed_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<bool>> {
    let pixels = height * width;
    if pixels < 2 || !(0.0 < observed_fraction && observed_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "observed fraction must be in (0, 1), got {observed_fraction}"
        )));
    }
    let target_hidden = (((1.0 - observed_fraction) * pixels as f64).round() as usize).clamp(1, pixels - 1);
    let mut observed = vec![true; pixels];
    let mut hidden = 0usize;
    let hide = |observed: &mut Vec<bool>, y: usize, x: usize, hidden: &mut usize| {
        let i = y * width + x;
        if observed[i] && *hidden < target_hidden {
            observed[i] = false;
            *hidden += 1;
        }
    };

    match style {
        MaskStyle::Thin => {
            while hidden < target_hidden {
                let (mut y, mut x) = (rng.random_range(0..height) as i64, rng.random_range(0..width) as i64);
                let len = rng.random_range(3..=(height.max(width) as i64));
                let (dy, dx) = [(0, 1), (1, 0), (1, 1), (1, -1)][rng.random_range(0..4)];
                for _ in 0..len {
                    if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
                        break;
                    }
                    hide(&mut observed, y as usize, x as usize, &mut hidden);
                    y += dy;
                    x += dx;
                }
            }
        }
        MaskStyle::Medium => {
            while hidden < target_hidden {
                let h = rng.random_range(2..=(height / 2).max(2)).min(height);
                let w = rng.random_range(2..=(width / 2).max(2)).min(width);
                let y0 = rng.random_range(0..=height - h);
                let x0 = rng.random_range(0..=width - w);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        hide(&mut observed, y, x, &mut hidden);
                    }
                }
            }
        }
        MaskStyle::Thick => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            let mut order: Vec<(f64, usize)> = (0..pixels)
                .map(|i| {
                    let (y, x) = ((i / width) as f64, (i % width) as f64);
                    (x * c + y * s, i)
                })
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, i) in order.iter().take(target_hidden) {
                observed[i] = false;
            }
        }
    }
    Ok(observed)
}
