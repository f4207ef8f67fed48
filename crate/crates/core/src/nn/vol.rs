//! Multi-channel cubic feature volume: layout `[channel][z][y][x]`,
//! x contiguous.

use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Vol<T> {
    pub ch: usize,
    pub res: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Vol<T> {
    pub fn zeros(ch: usize, res: usize) -> Self {
        Self {
            ch,
            res,
            data: vec![T::ZERO; ch * res * res * res],
        }
    }

    pub fn from_vec(ch: usize, res: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), ch * res * res * res);
        Self { ch, res, data }
    }

    /// Voxels per channel.
    #[inline]
    pub fn plane(&self) -> usize {
        self.res * self.res * self.res
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Linear index within one channel (x-fastest).
    #[inline]
    pub fn vox(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.res * (y + self.res * z)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat(a: &Self, b: &Self) -> Self {
        assert_eq!(a.res, b.res);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self {
            ch: a.ch + b.ch,
            res: a.res,
            data,
        }
    }

    /// Splits a channel-concatenated volume back into `(first, rest)`.
    pub fn split(&self, first_ch: usize) -> (Self, Self) {
        assert!(first_ch <= self.ch);
        let p = self.plane();
        let a = Self {
            ch: first_ch,
            res: self.res,
            data: self.data[..first_ch * p].to_vec(),
        };
        let b = Self {
            ch: self.ch - first_ch,
            res: self.res,
            data: self.data[first_ch * p..].to_vec(),
        };
        (a, b)
    }

    pub fn cast<U: Scalar>(&self) -> Vol<U> {
        Vol {
            ch: self.ch,
            res: self.res,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
