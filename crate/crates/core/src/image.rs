//! Minimal row-major image container plus the few raster operations the
//! pipeline needs (mask erosion/dilation, 2x downsampling).

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// Depth in metres; zero or non-finite marks an invalid pixel.
pub type DepthImage = Image<f32>;
pub type Mask = Image<bool>;
pub type RgbImage = Image<[u8; 3]>;

impl<T: Clone> Image<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }
}

impl<T> Image<T> {
    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = y * self.width + x;
        self.data[i] = v;
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[inline]
pub fn valid_depth(d: f32) -> bool {
    d > 0.0 && d.is_finite()
}

impl Image<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Erosion by a square structuring element of the given radius; pixels
    /// whose window leaves the image are cleared.
    pub fn eroded(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        // separable: rows then columns
        let mut tmp = Image::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if x < radius || x + radius >= w {
                    continue;
                }
                tmp.data[y * w + x] = (x - radius..=x + radius).all(|xx| self.data[y * w + xx]);
            }
        }
        let mut out = Image::new(w, h, false);
        for y in radius..h.saturating_sub(radius) {
            for x in 0..w {
                out.data[y * w + x] = (y - radius..=y + radius).all(|yy| tmp.data[yy * w + x]);
            }
        }
        out
    }

    /// Dilation by a square structuring element of the given radius.
    pub fn dilated(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let mut tmp = Image::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                tmp.data[y * w + x] = (lo..=hi).any(|xx| self.data[y * w + xx]);
            }
        }
        let mut out = Image::new(w, h, false);
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                out.data[y * w + x] = (lo..=hi).any(|yy| tmp.data[yy * w + x]);
            }
        }
        out
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert!(self.same_size(other));
        Image::from_vec(
            self.width,
            self.height,
            self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        )
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// True when any set pixel lies within `band` pixels of the image edge.
    pub fn touches_border(&self, band: usize) -> bool {
        let (w, h) = (self.width, self.height);
        for y in 0..h {
            let row_in_band = y < band || y + band >= h;
            for x in 0..w {
                if self.data[y * w + x] && (row_in_band || x < band || x + band >= w) {
                    return true;
                }
            }
        }
        false
    }
}

impl Image<f32> {
    /// Average of the valid depths in each 2x2 block; blocks with no valid
    /// depth stay invalid.
    pub fn downsample_depth(&self) -> DepthImage {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image::new(w, h, 0.0f32);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f32;
                let mut n = 0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let d = *self.get(2 * x + dx, 2 * y + dy);
                    if valid_depth(d) {
                        sum += d;
                        n += 1;
                    }
                }
                if n > 0 {
                    out.set(x, y, sum / n as f32);
                }
            }
        }
        out
    }
}
