use super::{RngState, Tensor, TensorError};

/// `x` for `x >= 0`, `e^x - 1` otherwise.
pub fn elu(input: &Tensor) -> Tensor {
    input.map(|x| if x >= 0.0 { x } else { x.exp_m1() })
}

/// Backward of [`elu`] from its forward *output*: the slope is 1 on the
/// non-negative branch and `f(x) + 1` on the negative one.
pub fn elu_backward(grad_out: &Tensor, output: &Tensor) -> Result<Tensor, TensorError> {
    if grad_out.shape() != output.shape() {
        return Err(TensorError::ShapeMismatch {
            expected: output.shape(),
            actual: grad_out.shape(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y >= 0.0 { g } else { g * (y + 1.0) })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// Per-(item, channel) multipliers drawn by [`spatial_dropout`]: either 0 or `1 / (1 - p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    scales: Vec<f64>,
}

impl DropoutMask {
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn dropped(&self) -> usize {
        self.scales.iter().filter(|&&s| s == 0.0).count()
    }

    fn apply(&self, t: &Tensor) -> Tensor {
        let s = t.shape();
        let mut out = t.clone();
        for n in 0..s.batch {
            for c in 0..s.channels {
                let k = self.scales[n * s.channels + c];
                out.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
            }
        }
        out
    }
}

/// Zeroes whole feature maps with probability `p` during training and scales
/// the survivors by `1 / (1 - p)`. Identity at inference time or when `p == 0`.
///
/// Returns the mask when one was drawn so the backward pass can reuse it.
pub fn spatial_dropout(
    input: &Tensor,
    p: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<(Tensor, Option<DropoutMask>), TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Domain(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok((input.clone(), None));
    }
    let s = input.shape();
    let keep = 1.0 / (1.0 - p);
    let scales = (0..s.batch * s.channels)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    let mask = DropoutMask { scales };
    Ok((mask.apply(input), Some(mask)))
}

pub fn spatial_dropout_backward(
    grad_out: &Tensor,
    mask: &DropoutMask,
) -> Result<Tensor, TensorError> {
    let s = grad_out.shape();
    if s.batch * s.channels != mask.scales.len() {
        return Err(TensorError::StaleState(format!(
            "dropout mask covers {} maps, gradient has {}",
            mask.scales.len(),
            s.batch * s.channels
        )));
    }
    Ok(mask.apply(grad_out))
}
