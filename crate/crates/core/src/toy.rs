//! Procedural toy images: flat background with a few rectangles and discs.

use rand::Rng;

use crate::operators::ImageShape;

pub const TOY_SIDE: usize = 16;

pub fn toy_image(shape: ImageShape, rng: &mut impl Rng) -> Vec<f64> {
    let ch = shape.channels;
    let background: Vec<f64> = (0..ch).map(|_| rng.random_range(-1.0..-0.4)).collect();
    let mut img: Vec<f64> = (0..shape.pixels()).flat_map(|_| background.iter().copied()).collect();
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let color: Vec<f64> = if ch == 1 || rng.random_bool(0.2) {
            vec![rng.random_range(-0.2..1.0); ch]
        } else {
            (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let (h, w) = (shape.height as f64, shape.width as f64);
        // discs need a side of at least 7
        if rng.random_bool(0.5) || h.min(w) < 7.0 {
            let rh = rng.random_range(3.min(shape.height)..=shape.height / 2 + 2).min(shape.height);
            let rw = rng.random_range(3.min(shape.width)..=shape.width / 2 + 2).min(shape.width);
            let y0 = rng.random_range(0..=shape.height - rh);
            let x0 = rng.random_range(0..=shape.width - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    let p = (y * shape.width + x) * ch;
                    img[p..p + ch].copy_from_slice(&color);
                }
            }
        } else {
            let r = rng.random_range(2.0..h.min(w) / 3.0);
            let cy = rng.random_range(r..h - r);
            let cx = rng.random_range(r..w - r);
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        let p = (y * shape.width + x) * ch;
                        img[p..p + ch].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    img
}

pub fn toy_dataset(shape: ImageShape, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| toy_image(shape, rng)).collect()
}
