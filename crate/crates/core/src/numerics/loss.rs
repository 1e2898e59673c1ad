use super::{Shape, Tensor, TensorError};

/// Per-pixel class index of one image; [`LabelMap::IGNORE`] excludes a pixel
/// from both loss and metrics.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub const IGNORE: u8 = u8::MAX;
    pub const NOT_ROAD: u8 = 0;
    pub const ROAD: u8 = 1;

    pub fn new(height: usize, width: usize, fill: u8) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self, TensorError> {
        if data.len() != height * width {
            return Err(TensorError::DataLength {
                shape: Shape::new(1, 1, height, width),
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn evaluated(&self) -> usize {
        self.data.len() - self.count(Self::IGNORE)
    }
}

/// Mean softmax cross-entropy over all non-ignored pixels and its gradient
/// with respect to the logits (zero at ignored pixels).
///
/// `labels[n]` holds the targets of batch item `n`.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[LabelMap],
) -> Result<(f64, Tensor), TensorError> {
    let s = logits.shape();
    if labels.len() != s.batch
        || labels
            .iter()
            .any(|l| l.height != s.height || l.width != s.width)
    {
        return Err(TensorError::ShapeMismatch {
            expected: s.with_channels(1),
            actual: labels
                .first()
                .map(|l| Shape::new(labels.len(), 1, l.height, l.width))
                .unwrap_or(Shape::new(0, 1, 0, 0)),
        });
    }
    let classes = s.channels;
    let count: usize = labels.iter().map(LabelMap::evaluated).sum();
    if count == 0 {
        return Err(TensorError::UndefinedLoss);
    }
    let mut grad = Tensor::zeros(s);
    let plane = s.plane();
    // compensated sum: the mean must be accurate to an ulp or two for
    // finite-difference checks with small steps
    let (mut total, mut carry) = (0.0f64, 0.0f64);
    let mut probs = vec![0.0; classes];
    for (n, lab) in labels.iter().enumerate() {
        for (p, &label) in lab.data.iter().enumerate() {
            if label == LabelMap::IGNORE {
                continue;
            }
            if label as usize >= classes {
                return Err(TensorError::LabelOutOfRange { label, classes });
            }
            let base = n * classes * plane + p;
            let arg = (0..classes)
                .reduce(|a, c| {
                    if logits.data()[base + c * plane] > logits.data()[base + a * plane] {
                        c
                    } else {
                        a
                    }
                })
                .unwrap_or(0);
            let max = logits.data()[base + arg * plane];
            // z = 1 + rest, where 1 is the max term
            let mut rest = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (logits.data()[base + c * plane] - max).exp();
                if c != arg {
                    rest += *pr;
                }
            }
            let z = 1.0 + rest;
            let target = logits.data()[base + label as usize * plane] - max;
            let term = rest.ln_1p() - target;
            let t = total + term;
            carry += if total.abs() >= term.abs() {
                (total - t) + term
            } else {
                (term - t) + total
            };
            total = t;
            let g = grad.data_mut();
            for (c, pr) in probs.iter().enumerate() {
                let one_hot = if c == label as usize { 1.0 } else { 0.0 };
                g[base + c * plane] = (pr / z - one_hot) / count as f64;
            }
        }
    }
    Ok(((total + carry) / count as f64, grad))
}

/// Softmax probability of `class` at every pixel of batch item `n`.
pub fn class_probability(logits: &Tensor, n: usize, class: usize) -> Vec<f64> {
    let s = logits.shape();
    let plane = s.plane();
    (0..plane)
        .map(|p| {
            let at = |c: usize| logits.get(n, c, p / s.width, p % s.width);
            let max = (0..s.channels).map(at).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..s.channels).map(|c| (at(c) - max).exp()).sum();
            (at(class) - max).exp() / z
        })
        .collect()
}
