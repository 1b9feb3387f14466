use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

/// A `channels × height × width` map stored as spatial tokens: row `y*w + x`
/// holds the channel vector at `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    tokens: DenseMatrix,
}

impl FeatureMap {
    pub fn from_tokens(height: usize, width: usize, tokens: DenseMatrix) -> Result<Self> {
        if tokens.rows() != height * width || tokens.cols() == 0 {
            return Err(Error::shape(
                "FeatureMap::from_tokens",
                format!("{:?} tokens for {height}x{width}", tokens.shape()),
            ));
        }
        Ok(Self {
            channels: tokens.cols(),
            height,
            width,
            tokens,
        })
    }

    /// From channel-major (`c`, then `y`, then `x`) values.
    pub fn from_chw(channels: usize, height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::shape(
                "FeatureMap::from_chw",
                format!("{} values for {channels}x{height}x{width}", values.len()),
            ));
        }
        let hw = height * width;
        let tokens = DenseMatrix::from_fn(hw, channels, |p, c| values[c * hw + p]);
        Ok(Self {
            channels,
            height,
            width,
            tokens,
        })
    }

    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.channels * hw];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.tokens[(p, c)];
            }
        }
        out
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

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tokens[(y * self.width + x, c)]
    }

    pub fn tokens(&self) -> &DenseMatrix {
        &self.tokens
    }

    pub fn into_tokens(self) -> DenseMatrix {
        self.tokens
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.is_finite()
    }
}
