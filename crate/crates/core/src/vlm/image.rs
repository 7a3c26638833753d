use crate::error::{Error, Result};
use crate::scalar::Real;

/// Channels x height x width image with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<F>,
}

impl<F: Real> ImageTensor<F> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < F::zero() || **v > F::one())
        {
            return Err(Error::Parameter(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: F) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> F,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Wraps values the caller has already clamped; range is debug-checked.
    pub(crate) fn from_clamped(channels: usize, height: usize, width: usize, data: Vec<F>) -> Self {
        debug_assert!(data.iter().all(|v| *v >= F::zero() && *v <= F::one()));
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

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// L-infinity distance to another image of the same shape.
    pub fn linf_distance(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn cast<G: Real>(&self) -> ImageTensor<G> {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| G::lit(v.as_f64()).max(G::zero()).min(G::one()))
                .collect(),
        }
    }

    /// SHA-256 over the canonical little-endian f64 pixel bytes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in [self.channels, self.height, self.width] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.as_f64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
