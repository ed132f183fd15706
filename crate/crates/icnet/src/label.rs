use crate::error::{Error, Result};

/// Reserved class index excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// 2-D map of class indices (`0..N-1`) with 255 as the ignore value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("label map dims must be >= 1"));
        }
        if data.len() != h * w {
            return Err(Error::shape(format!(
                "label data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        LabelMap { h, w, data: vec![v; h * w] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.w..(y + 1) * self.w]
    }

    /// Check the invariant: every value < `num_classes` or the ignore index.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE && (v as usize) >= num_classes {
                return Err(Error::data(format!(
                    "label value {v} at pixel ({}, {}) is >= {num_classes} and not the ignore index",
                    i / self.w,
                    i % self.w
                )));
            }
        }
        Ok(())
    }

    /// Corner-aligned nearest-neighbor resize. Class indices are categorical,
    /// so interpolation is meaningless; the nearest source pixel wins.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> LabelMap {
        if out_h == self.h && out_w == self.w {
            return self.clone();
        }
        let pick = |o: usize, out_len: usize, in_len: usize| -> usize {
            if out_len == 1 || in_len == 1 {
                return 0;
            }
            let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            ((src + 0.5).floor() as usize).min(in_len - 1)
        };
        let mut data = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = pick(oy, out_h, self.h);
            for ox in 0..out_w {
                let sx = pick(ox, out_w, self.w);
                data.push(self.at(sy, sx));
            }
        }
        LabelMap { h: out_h, w: out_w, data }
    }

    /// Horizontal mirror (an involution).
    pub fn mirror(&self) -> LabelMap {
        let mut data = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            data.extend(self.row(y).iter().rev());
        }
        LabelMap { h: self.h, w: self.w, data }
    }

    /// Sorted distinct class values present (ignore included if present).
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    /// Count of non-ignored pixels.
    pub fn valid_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_out_of_range() {
        let m = LabelMap::new(1, 3, vec![0, 4, IGNORE]).unwrap();
        assert!(m.validate(5).is_ok());
        assert!(m.validate(4).is_err());
    }

    #[test]
    fn mirror_is_involution() {
        let m = LabelMap::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(m.mirror().mirror(), m);
        assert_eq!(m.mirror().row(0), &[3, 2, 1]);
    }

    #[test]
    fn nearest_resize_keeps_classes() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
        let up = m.resize_nearest(5, 5);
        for &v in up.data() {
            assert!(v == 0 || v == 1 || v == 2 || v == IGNORE);
        }
        assert_eq!(m.resize_nearest(2, 2), m);
        // Corners map to corners under corner alignment.
        assert_eq!(up.at(0, 0), 0);
        assert_eq!(up.at(4, 4), IGNORE);
    }
}
