//! Small RGB image type in CHW layout with the geometric ops the training
//! augmentations need.

/// An image with values in `[0, 1]`, stored channel-major:
/// `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height, self.channels);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Nearest-neighbor resize.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height, self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
                let sy = sy.min(self.height - 1);
                for x in 0..width {
                    let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                    let sx = sx.min(self.width - 1);
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }

    /// Crops a `width x height` window with its top-left corner at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Image {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut out = Image::new(width, height, self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_reverses_rows() {
        let mut img = Image::new(3, 1, 1);
        img.data = vec![1.0, 2.0, 3.0];
        assert_eq!(img.flip_horizontal().data, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn resize_identity_and_downscale() {
        let mut img = Image::new(2, 2, 1);
        img.data = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(img.resize(2, 2).data, img.data);
        let down = img.resize(1, 1);
        assert_eq!(down.data.len(), 1);
    }

    #[test]
    fn crop_takes_window() {
        let mut img = Image::new(3, 3, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let c = img.crop(1, 1, 2, 2);
        assert_eq!(c.data, vec![4.0, 5.0, 7.0, 8.0]);
    }
}
