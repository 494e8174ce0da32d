use crate::engine::Tensor;
use crate::error::{shape_err, Result, SpnError};
use crate::scalar::Scalar;

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width * height != data.len() {
            return Err(shape_err!("{width}x{height} label map with {} values", data.len()));
        }
        Ok(LabelMap { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        LabelMap { width, height, data: vec![class; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        LabelMap { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.data.iter().map(|&c| c as usize).collect()
    }

    /// Keeps the top-left pixel of every `factor x factor` cell.
    pub fn downsample_nearest(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(shape_err!("{}x{} label map not divisible by factor {factor}", self.width, self.height));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        Ok(LabelMap::from_fn(w, h, |x, y| self.get(x * factor, y * factor)))
    }

    /// `1 x C x H x W` one-hot encoding.
    pub fn one_hot<S: Scalar>(&self, num_classes: usize) -> Result<Tensor<S>> {
        if let Some(bad) = self.data.iter().find(|&&c| c as usize >= num_classes) {
            return Err(SpnError::InvalidArgument(format!("class index {bad} >= {num_classes} classes")));
        }
        let hw = self.data.len();
        let mut t = Tensor::zeros(&[1, num_classes, self.height, self.width]);
        for (p, &c) in self.data.iter().enumerate() {
            t.data_mut()[c as usize * hw + p] = S::one();
        }
        Ok(t)
    }

    /// Per-pixel argmax of a `1 x C x H x W` probability map; ties go to the
    /// lower class index.
    pub fn argmax<S: Scalar>(probs: &Tensor<S>) -> Result<LabelMap> {
        let [n, c, h, w] = probs.nchw()?;
        if n != 1 || c > 256 {
            return Err(shape_err!("argmax expects 1xCxHxW with C <= 256, got {:?}", probs.shape()));
        }
        Ok(LabelMap { width: w, height: h, data: argmax_channels(probs.data(), c, h * w) })
    }
}

pub(crate) fn argmax_channels<S: Scalar>(x: &[S], channels: usize, inner: usize) -> Vec<u8> {
    (0..inner)
        .map(|p| {
            let mut best = 0;
            for c in 1..channels {
                if x[c * inner + p] > x[best * inner + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
