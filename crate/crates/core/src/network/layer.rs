use crate::numerics::{
    conv2d_backward, conv_forward, elu, elu_backward, spatial_dropout, spatial_dropout_backward,
    ConvGrads, ConvParams, ConvState, DropoutMask, RngState, Tensor,
};

use super::spec::LayerSpec;
use super::NetworkError;

/// A convolution followed by its optional ELU and spatial dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: ConvParams,
}

/// What one layer keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerTape {
    conv: ConvState,
    activation: Option<Tensor>,
    dropout: Option<DropoutMask>,
}

impl LayerTape {
    /// Output of the ELU, before dropout, when the layer has one.
    pub fn activation(&self) -> Option<&Tensor> {
        self.activation.as_ref()
    }
}

impl Layer {
    pub fn new(spec: LayerSpec, rng: &mut RngState) -> Self {
        let params =
            ConvParams::he_uniform(spec.geometry(), spec.in_channels, spec.out_channels, rng);
        Self { spec, params }
    }

    pub fn zeros(spec: LayerSpec) -> Self {
        let params = ConvParams::zeros(spec.geometry(), spec.in_channels, spec.out_channels);
        Self { spec, params }
    }

    pub fn forward(
        &self,
        input: Tensor,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Tensor, LayerTape), NetworkError> {
        let (mut out, conv) = conv_forward(input, &self.params, self.spec.kind.conv_kind())?;
        let mut activation = None;
        if self.spec.has_elu {
            out = elu(&out);
            activation = Some(out.clone());
        }
        let (out, dropout) = spatial_dropout(&out, self.spec.dropout_p, rng, training)?;
        Ok((
            out,
            LayerTape {
                conv,
                activation,
                dropout,
            },
        ))
    }

    /// Forward pass without keeping anything for backward.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, NetworkError> {
        let out = match self.spec.kind.conv_kind() {
            crate::numerics::ConvKind::Forward => crate::numerics::conv2d(input, &self.params)?,
            crate::numerics::ConvKind::Transposed => {
                crate::numerics::transposed_conv2d(input, &self.params)?
            }
        };
        Ok(if self.spec.has_elu { elu(&out) } else { out })
    }

    pub fn backward(&self, grad: &Tensor, tape: &LayerTape) -> Result<ConvGrads, NetworkError> {
        let mut g = match &tape.dropout {
            Some(mask) => spatial_dropout_backward(grad, mask)?,
            None => grad.clone(),
        };
        if let Some(act) = &tape.activation {
            g = elu_backward(&g, act)?;
        }
        Ok(conv2d_backward(&g, &tape.conv, &self.params)?)
    }
}
