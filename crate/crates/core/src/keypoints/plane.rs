//! Float image plane with the handful of operations the detectors need.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(w: usize, h: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), w * h);
        Self { w, h, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    /// Pixel access with coordinates clamped to the image.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.at(x, y)
    }

    /// Bilinear interpolation, clamped at the borders.
    pub fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.at_clamped(xi, yi);
        let b = self.at_clamped(xi + 1, yi);
        let c = self.at_clamped(xi, yi + 1);
        let d = self.at_clamped(xi + 1, yi + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }

    pub fn sub(&self, other: &Plane) -> Plane {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Plane::new(self.w, self.h, data)
    }

    /// Every second pixel in each direction.
    pub fn downsample(&self) -> Plane {
        let w = self.w.div_ceil(2);
        let h = self.h.div_ceil(2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane::new(w, h, data)
    }

    /// Bilinear upsampling by two (pixel centres aligned at even indices).
    pub fn upsample(&self) -> Plane {
        let w = self.w * 2;
        let h = self.h * 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.bilinear(x as f32 * 0.5, y as f32 * 0.5));
            }
        }
        Plane::new(w, h, data)
    }

    /// Separable Gaussian blur, kernel radius `ceil(4σ)`, mirrored borders.
    pub fn gaussian_blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let mut tmp = vec![0.0f32; self.w * self.h];
        for y in 0..self.h {
            let row = &self.data[y * self.w..(y + 1) * self.w];
            for x in 0..self.w {
                let mut acc = 0.0f32;
                for (k, &wk) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, self.w);
                    acc += wk * row[xx];
                }
                tmp[y * self.w + x] = acc;
            }
        }
        let mut out = vec![0.0f32; self.w * self.h];
        for y in 0..self.h {
            for (k, &wk) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - r, self.h);
                let src = &tmp[yy * self.w..(yy + 1) * self.w];
                let dst = &mut out[y * self.w..(y + 1) * self.w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wk * s;
                }
            }
        }
        Plane::new(self.w, self.h, out)
    }
}

/// Mirror index into `[0, n)` without repeating the edge pixel.
#[inline]
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let two_s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / two_s2).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / sum) as f32).collect()
}
