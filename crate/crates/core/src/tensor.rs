use crate::error::{input, Result};

/// Dense `channels × height × width` array in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return input(format!(
                "tensor data length {} does not match {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the window `[top, top+h) × [left, left+w)`; samples outside the
    /// tensor read as zero.
    pub fn crop(&self, top: isize, left: isize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(self.channels, h, w, |c, y, x| {
            let sy = top + y as isize;
            let sx = left + x as isize;
            if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                0.0
            } else {
                self.at(c, sy as usize, sx as usize)
            }
        })
    }

    /// Vector across channels at spatial position `(y, x)`.
    pub fn column(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn crop_zero_fills_outside() {
        let t = Tensor::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as f32 + 1.0);
        let c = t.crop(-1, 1, 2, 3);
        assert_eq!(c.data(), &[0.0, 0.0, 0.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn column_gathers_channels() {
        let t = Tensor::from_fn(3, 2, 2, |c, y, x| (c * 100 + y * 10 + x) as f32);
        assert_eq!(t.column(1, 0), vec![10.0, 110.0, 210.0]);
    }
}
