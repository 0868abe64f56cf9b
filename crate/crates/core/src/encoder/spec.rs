use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding dimensions the encoder head may produce.
pub const EMBEDDING_DIMS: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// 2×2 window, stride 2; odd trailing rows/columns are dropped.
    MaxPool,
    Fc {
        inputs: usize,
        outputs: usize,
    },
    /// Scales its input to unit Euclidean length.
    L2Norm,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        }
    }

    /// (weight count, bias count).
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => (out_channels * in_channels * kernel_h * kernel_w, out_channels),
            LayerSpec::Fc { inputs, outputs } => (inputs * outputs, outputs),
            _ => (0, 0),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            LayerSpec::Fc { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

/// Activation shape: channels × height × width. Vectors are `(n, 1, 1)`.
pub type Shape = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Three conv/relu/pool stages, a 256-wide fully-connected layer, and
    /// three FC + L2 reduction pairs (256 → 128 → 128 → `dim`).
    pub fn desk(input_h: usize, input_w: usize, dim: usize) -> Self {
        let mut layers = Vec::new();
        let mut c = 1;
        let (mut h, mut w) = (input_h, input_w);
        for out in [8, 16, 32] {
            layers.push(LayerSpec::conv3x3(c, out));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool);
            c = out;
            h /= 2;
            w /= 2;
        }
        layers.push(LayerSpec::Fc {
            inputs: c * h * w,
            outputs: 256,
        });
        layers.push(LayerSpec::Relu);
        for (i, o) in [(256, 128), (128, 128), (128, dim)] {
            layers.push(LayerSpec::Fc {
                inputs: i,
                outputs: o,
            });
            layers.push(LayerSpec::L2Norm);
        }
        Self {
            input: [1, input_h, input_w],
            layers,
        }
    }

    /// Output shape of every layer, checking compatibility along the way.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("empty input shape {:?}", self.input)));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                } => {
                    if in_channels != shape[0] {
                        return Err(Error::Spec(format!(
                            "layer {i}: conv expects {in_channels} channels, got {}",
                            shape[0]
                        )));
                    }
                    if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                        return Err(Error::Spec(format!("layer {i}: degenerate conv")));
                    }
                    let (ph, pw) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if ph < kernel_h || pw < kernel_w {
                        return Err(Error::Spec(format!("layer {i}: kernel larger than input")));
                    }
                    [
                        out_channels,
                        (ph - kernel_h) / stride + 1,
                        (pw - kernel_w) / stride + 1,
                    ]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool => {
                    if shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::Spec(format!("layer {i}: input too small to pool")));
                    }
                    [shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let n = shape.iter().product::<usize>();
                    if inputs != n || outputs == 0 {
                        return Err(Error::Spec(format!(
                            "layer {i}: fully-connected expects {inputs} inputs, got {n}"
                        )));
                    }
                    [outputs, 1, 1]
                }
                LayerSpec::L2Norm => {
                    if shape[1] != 1 || shape[2] != 1 {
                        return Err(Error::Spec(format!("layer {i}: L2 norm needs a vector")));
                    }
                    shape
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    /// Checks layer compatibility and that the network ends in a unit-norm
    /// vector. Returns the output dimension.
    pub fn validate(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        match self.layers.last() {
            Some(LayerSpec::L2Norm) => Ok(shapes.last().unwrap()[0]),
            _ => Err(Error::Spec("network must end with an L2 normalization".into())),
        }
    }

    /// Additionally requires the embedding head: three trailing FC + L2
    /// pairs and an output dimension from [`EMBEDDING_DIMS`].
    pub fn validate_encoder(&self) -> Result<usize> {
        let d = self.validate()?;
        let n = self.layers.len();
        let head_ok = n >= 6
            && self.layers[n - 6..].chunks(2).all(|p| {
                matches!(p[0], LayerSpec::Fc { .. }) && p[1] == LayerSpec::L2Norm
            });
        if !head_ok {
            return Err(Error::Spec(
                "encoder must end with three fully-connected + L2 pairs".into(),
            ));
        }
        if !EMBEDDING_DIMS.contains(&d) {
            return Err(Error::Spec(format!(
                "embedding dimension {d} not in {EMBEDDING_DIMS:?}"
            )));
        }
        Ok(d)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = l.param_counts();
                w + b
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_architecture_shapes() {
        let spec = NetworkSpec::desk(128, 128, 32);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[8], [32, 16, 16]);
        assert_eq!(*shapes.last().unwrap(), [32, 1, 1]);
        assert_eq!(spec.validate_encoder().unwrap(), 32);
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let spec = NetworkSpec {
            input: [1, 8, 8],
            layers: vec![LayerSpec::conv3x3(2, 4), LayerSpec::L2Norm],
        };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
        let spec = NetworkSpec {
            input: [1, 4, 4],
            layers: vec![LayerSpec::Fc { inputs: 15, outputs: 2 }, LayerSpec::L2Norm],
        };
        assert!(spec.validate().is_err());
        let spec = NetworkSpec {
            input: [1, 4, 4],
            layers: vec![LayerSpec::Fc { inputs: 16, outputs: 2 }],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn head_contract() {
        let spec = NetworkSpec {
            input: [1, 1, 2],
            layers: vec![LayerSpec::Fc { inputs: 2, outputs: 2 }, LayerSpec::L2Norm],
        };
        assert_eq!(spec.validate().unwrap(), 2);
        assert!(spec.validate_encoder().is_err());
        assert!(NetworkSpec::desk(32, 32, 24).validate_encoder().is_err());
    }
}
