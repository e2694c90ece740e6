use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch of 2D feature maps, channel-last (`n, h, w, c`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![T::zero(); n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::Shape(format!(
                "feature map {n}x{h}x{w}x{c} needs {} values, got {}",
                n * h * w * c,
                data.len()
            )));
        }
        Ok(Self { n, h, w, c, data })
    }

    /// Stacks equally sized HWC tiles into a batch.
    pub fn stack<'a>(tiles: impl IntoIterator<Item = (&'a [T], usize, usize, usize)>) -> Result<Self> {
        let mut out: Option<Self> = None;
        for (data, h, w, c) in tiles {
            match &mut out {
                None => out = Some(Self::from_vec(1, h, w, c, data.to_vec())?),
                Some(fm) => {
                    if (fm.h, fm.w, fm.c) != (h, w, c) || data.len() != h * w * c {
                        return Err(Error::Shape("tiles in a batch must share their shape".into()));
                    }
                    fm.data.extend_from_slice(data);
                    fm.n += 1;
                }
            }
        }
        out.ok_or_else(|| Error::Shape("empty batch".into()))
    }

    /// Pixels across the batch (`n * h * w`).
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }

    /// One channel of the whole batch, pixel order.
    pub fn channel(&self, c: usize) -> Vec<T> {
        self.data.iter().skip(c).step_by(self.c).copied().collect()
    }

    pub fn image(&self, n: usize) -> &[T] {
        let len = self.h * self.w * self.c;
        &self.data[n * len..(n + 1) * len]
    }
}
