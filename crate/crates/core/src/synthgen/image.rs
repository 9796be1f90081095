use serde::{Deserialize, Serialize};

pub const IMG_HEIGHT: usize = 64;
pub const IMG_WIDTH: usize = 32;
pub const CHANNELS: usize = 3;

/// Row-major `height x width x 3` raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == height * width * CHANNELS && height > 0 && width > 0)
            .then_some(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Paints the rectangle `[y0, y1) x [x0, x1)`, clipped to the canvas.
    pub fn fill_rect(&mut self, y0: i32, y1: i32, x0: i32, x1: i32, rgb: [f64; 3]) {
        let ys = y0.max(0) as usize..y1.clamp(0, self.height as i32) as usize;
        let xs = x0.max(0) as usize..x1.clamp(0, self.width as i32) as usize;
        for y in ys {
            for x in xs.clone() {
                self.set(y, x, rgb);
            }
        }
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Channel-planar copy (`3 x H x W`), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * CHANNELS];
        for p in 0..plane {
            for c in 0..CHANNELS {
                out[c * plane + p] = self.data[p * CHANNELS + c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f64]) -> Option<Self> {
        let plane = height * width;
        if chw.len() != plane * CHANNELS {
            return None;
        }
        let mut data = vec![0.0; chw.len()];
        for p in 0..plane {
            for c in 0..CHANNELS {
                data[p * CHANNELS + c] = chw[c * plane + p];
            }
        }
        Some(Self { height, width, data })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

/// 3x3 colour matrix plus offset applied to every pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorAffine {
    pub matrix: [[f64; 3]; 3],
    pub bias: [f64; 3],
}

impl ColorAffine {
    pub const IDENTITY: Self = Self {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        bias: [0.0; 3],
    };

    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let mut out = self.bias;
        for (r, o) in out.iter_mut().enumerate() {
            for (c, v) in rgb.iter().enumerate() {
                *o += self.matrix[r][c] * v;
            }
        }
        out
    }
}

/// Mean over channels of the total-variation distance between the pixel
/// histograms of two image sets. 0 for identical marginals, 1 for disjoint.
pub fn histogram_distance(a: &[&Image], b: &[&Image], bins: usize) -> f64 {
    let hist = |set: &[&Image], ch: usize| {
        let mut h = vec![0.0f64; bins];
        let mut total = 0.0f64;
        for img in set {
            for px in img.data().chunks(CHANNELS) {
                let bin = ((px[ch] * bins as f64) as usize).min(bins - 1);
                h[bin] += 1.0;
                total += 1.0;
            }
        }
        h.iter_mut().for_each(|v| *v /= total.max(1.0));
        h
    };
    (0..CHANNELS)
        .map(|ch| {
            let (ha, hb) = (hist(a, ch), hist(b, ch));
            0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
        })
        .sum::<f64>()
        / CHANNELS as f64
}
