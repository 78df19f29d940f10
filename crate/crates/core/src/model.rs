//! Sequential layer graphs: shape inference, parameter accounting and layer
//! replacement. Models are values; every edit returns a new model.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{output_extent, ConvGeometry, Tensor};

/// Shape of one sample as it flows between layers (batch axis excluded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn elements(&self) -> usize {
        match *self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Image { c, h, w } => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub geom: ConvGeometry,
    /// `[out, in, kh, kw]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Fully connected layer computing `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Rank-`r` CP factorization of a convolution, executed as
/// pointwise `in→r` (F3), vertical depthwise `kh×1` (F2),
/// horizontal depthwise `1×kw` (F1), pointwise `r→out` (F4).
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedConv2d {
    pub geom: ConvGeometry,
    pub rank: usize,
    /// `[r, 1, 1, kw]`
    pub f1: Tensor,
    /// `[r, 1, kh, 1]`
    pub f2: Tensor,
    /// `[r, in, 1, 1]`
    pub f3: Tensor,
    /// `[out, r, 1, 1]`
    pub f4: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Truncated-SVD dense layer computing `((x · U) · diag(s)) · Vᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedDense {
    pub inputs: usize,
    pub outputs: usize,
    pub rank: usize,
    /// `[in, r]`
    pub u: Tensor,
    /// `[r]`
    pub s: Tensor,
    /// `[out, r]`
    pub v: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    Dense(Dense),
    DecomposedConv2d(DecomposedConv2d),
    DecomposedDense(DecomposedDense),
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::DecomposedConv2d(_) => "decomposed_conv2d",
            LayerSpec::DecomposedDense(_) => "decomposed_dense",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_optimizable(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Dense(_))
    }

    /// Trainable tensors in a fixed order (also the checkpoint order).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            LayerSpec::Conv2d(l) => vec![&l.weight, &l.bias],
            LayerSpec::Dense(l) => vec![&l.weight, &l.bias],
            LayerSpec::DecomposedConv2d(l) => vec![&l.f1, &l.f2, &l.f3, &l.f4, &l.bias],
            LayerSpec::DecomposedDense(l) => vec![&l.u, &l.s, &l.v, &l.bias],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerSpec::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            LayerSpec::Dense(l) => vec![&mut l.weight, &mut l.bias],
            LayerSpec::DecomposedConv2d(l) => {
                vec![&mut l.f1, &mut l.f2, &mut l.f3, &mut l.f4, &mut l.bias]
            }
            LayerSpec::DecomposedDense(l) => vec![&mut l.u, &mut l.s, &mut l.v, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Expected parameter shapes implied by the layer's structural fields.
    pub fn expected_param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv2d(l) => vec![l.geom.kernel_shape().to_vec(), vec![l.geom.out_ch]],
            LayerSpec::Dense(l) => vec![vec![l.inputs, l.outputs], vec![l.outputs]],
            LayerSpec::DecomposedConv2d(l) => {
                let (g, r) = (&l.geom, l.rank);
                vec![
                    vec![r, 1, 1, g.kernel_w],
                    vec![r, 1, g.kernel_h, 1],
                    vec![r, g.in_ch, 1, 1],
                    vec![g.out_ch, r, 1, 1],
                    vec![g.out_ch],
                ]
            }
            LayerSpec::DecomposedDense(l) => vec![
                vec![l.inputs, l.rank],
                vec![l.rank],
                vec![l.outputs, l.rank],
                vec![l.outputs],
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters excluding biases.
    pub fn weight_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d(l) => l.weight.len(),
            LayerSpec::Dense(l) => l.weight.len(),
            LayerSpec::DecomposedConv2d(l) => l.f1.len() + l.f2.len() + l.f3.len() + l.f4.len(),
            LayerSpec::DecomposedDense(l) => l.u.len() + l.s.len() + l.v.len(),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d(l) => l.geom.validate()?,
            LayerSpec::DecomposedConv2d(l) => {
                l.geom.validate()?;
                if l.rank == 0 {
                    return Err(Error::invalid("decomposed conv rank must be >= 1"));
                }
            }
            LayerSpec::Dense(l) if l.inputs == 0 || l.outputs == 0 => {
                return Err(Error::invalid("dense extents must be positive"));
            }
            LayerSpec::DecomposedDense(l) => {
                if l.rank == 0 || l.rank > l.inputs.min(l.outputs) {
                    return Err(Error::invalid(format!(
                        "decomposed dense rank {} outside [1, {}]",
                        l.rank,
                        l.inputs.min(l.outputs)
                    )));
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } if *kernel == 0 || *stride == 0 => {
                return Err(Error::invalid("pool kernel and stride must be positive"));
            }
            _ => {}
        }
        for (t, want) in self.params().iter().zip(self.expected_param_shapes()) {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "{} parameter shape {:?}, expected {:?}",
                    self.kind(),
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    /// Output shape for one sample given its input shape.
    pub fn output_shape(&self, input: &ActShape) -> Result<ActShape> {
        match (self, input) {
            (LayerSpec::Conv2d(Conv2d { geom, .. }), ActShape::Image { c, h, w })
            | (LayerSpec::DecomposedConv2d(DecomposedConv2d { geom, .. }), ActShape::Image { c, h, w }) => {
                if *c != geom.in_ch {
                    return Err(Error::shape(format!(
                        "expects {} input channels, got {c}",
                        geom.in_ch
                    )));
                }
                let (oh, ow) = geom.output_hw(*h, *w)?;
                Ok(ActShape::Image {
                    c: geom.out_ch,
                    h: oh,
                    w: ow,
                })
            }
            (LayerSpec::Dense(Dense { inputs, outputs, .. }), ActShape::Flat(n))
            | (LayerSpec::DecomposedDense(DecomposedDense { inputs, outputs, .. }), ActShape::Flat(n)) => {
                if n != inputs {
                    return Err(Error::shape(format!("expects {inputs} inputs, got {n}")));
                }
                Ok(ActShape::Flat(*outputs))
            }
            (LayerSpec::Relu, s) => Ok(s.clone()),
            (LayerSpec::MaxPool2d { kernel, stride }, ActShape::Image { c, h, w }) => {
                let oh = output_extent(*h, *kernel, *stride, 0, "height")?;
                let ow = output_extent(*w, *kernel, *stride, 0, "width")?;
                Ok(ActShape::Image { c: *c, h: oh, w: ow })
            }
            (LayerSpec::Flatten, s) => Ok(ActShape::Flat(s.elements())),
            (layer, s) => Err(Error::shape(format!(
                "{} cannot consume activation of shape {s}",
                layer.kind()
            ))),
        }
    }
}

/// Per-channel z-normalization applied to raw `[0, 1]` inputs before the
/// first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: String,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Statistics the model was trained against, carried in checkpoints.
    pub input_norm: Option<InputNorm>,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        num_classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let model = Model {
            name: name.into(),
            input_shape,
            num_classes,
            layers,
            input_norm: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_input_norm(mut self, norm: InputNorm) -> Result<Self> {
        if norm.mean.len() != self.input_shape[0] || norm.std.len() != self.input_shape[0] {
            return Err(Error::invalid(format!(
                "normalization has {}/{} channels, model input has {}",
                norm.mean.len(),
                norm.std.len(),
                self.input_shape[0]
            )));
        }
        self.input_norm = Some(norm);
        Ok(self)
    }

    pub fn input_act(&self) -> ActShape {
        let [c, h, w] = self.input_shape;
        ActShape::Image { c, h, w }
    }

    /// Per-layer output shapes. The error names the first offending layer.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_act();
        for (i, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| Error::layer(i, format!("{}: {e}", layer.kind())))?;
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::layer(i, format!("{}: {e}", layer.kind())))?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::invalid("input shape extents must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let shapes = self.infer_shapes()?;
        let last = shapes.last().cloned().unwrap_or_else(|| self.input_act());
        if !self.layers.is_empty() && last != ActShape::Flat(self.num_classes) {
            return Err(Error::shape(format!(
                "model output {last} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn count_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Indices of plain `Conv2d` and `Dense` layers, in order.
    pub fn optimizable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_optimizable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Returns a copy with layer `index` swapped for `new`, provided the
    /// replacement keeps the layer's input and output shapes.
    pub fn replace_layer(&self, index: usize, new: LayerSpec) -> Result<Model> {
        let old = self
            .layers
            .get(index)
            .ok_or_else(|| Error::invalid(format!("layer index {index} out of range")))?;
        let shapes = self.infer_shapes()?;
        let input = if index == 0 {
            self.input_act()
        } else {
            shapes[index - 1].clone()
        };
        new.validate().map_err(|e| Error::layer(index, e.to_string()))?;
        let got = new
            .output_shape(&input)
            .map_err(|e| Error::layer(index, format!("replacement breaks input contract: {e}")))?;
        if got != shapes[index] {
            return Err(Error::layer(
                index,
                format!(
                    "replacement {} produces {got}, {} produced {}",
                    new.kind(),
                    old.kind(),
                    shapes[index]
                ),
            ));
        }
        let mut out = self.clone();
        out.layers[index] = new;
        Ok(out)
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn conv(in_ch: usize, out_ch: usize, k: usize, pad: usize) -> LayerSpec {
        let geom = ConvGeometry::square(k, 1, pad, in_ch, out_ch);
        LayerSpec::Conv2d(Conv2d {
            geom,
            weight: Tensor::zeros(&geom.kernel_shape()).unwrap(),
            bias: Tensor::zeros(&[out_ch]).unwrap(),
        })
    }

    pub fn dense(inputs: usize, outputs: usize) -> LayerSpec {
        LayerSpec::Dense(Dense {
            inputs,
            outputs,
            weight: Tensor::zeros(&[inputs, outputs]).unwrap(),
            bias: Tensor::zeros(&[outputs]).unwrap(),
        })
    }

    pub fn decomposed_conv(geom: ConvGeometry, rank: usize) -> LayerSpec {
        LayerSpec::DecomposedConv2d(DecomposedConv2d {
            geom,
            rank,
            f1: Tensor::zeros(&[rank, 1, 1, geom.kernel_w]).unwrap(),
            f2: Tensor::zeros(&[rank, 1, geom.kernel_h, 1]).unwrap(),
            f3: Tensor::zeros(&[rank, geom.in_ch, 1, 1]).unwrap(),
            f4: Tensor::zeros(&[geom.out_ch, rank, 1, 1]).unwrap(),
            bias: Tensor::zeros(&[geom.out_ch]).unwrap(),
        })
    }

    pub fn decomposed_dense(inputs: usize, outputs: usize, rank: usize) -> LayerSpec {
        LayerSpec::DecomposedDense(DecomposedDense {
            inputs,
            outputs,
            rank,
            u: Tensor::zeros(&[inputs, rank]).unwrap(),
            s: Tensor::zeros(&[rank]).unwrap(),
            v: Tensor::zeros(&[outputs, rank]).unwrap(),
            bias: Tensor::zeros(&[outputs]).unwrap(),
        })
    }

    fn small_cnn() -> Model {
        Model::new(
            "small",
            [1, 28, 28],
            10,
            vec![
                conv(1, 8, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                dense(1568, 10),
            ],
        )
        .unwrap()
    }

    #[test]
    fn shape_inference_examples() {
        let shapes = small_cnn().infer_shapes().unwrap();
        assert_eq!(shapes[0], ActShape::Image { c: 8, h: 28, w: 28 });
        assert_eq!(shapes[2], ActShape::Image { c: 8, h: 14, w: 14 });
        assert_eq!(shapes[3], ActShape::Flat(1568));
        assert_eq!(shapes[4], ActShape::Flat(10));
    }

    #[test]
    fn shape_failure_names_layer() {
        let err = Model::new(
            "bad",
            [1, 28, 28],
            10,
            vec![conv(1, 8, 3, 1), LayerSpec::Flatten, dense(1000, 10)],
        )
        .unwrap_err();
        match err {
            Error::Layer { index, .. } => assert_eq!(index, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn param_counts() {
        let c = conv(64, 128, 3, 1);
        assert_eq!(c.weight_count(), 73_728);
        assert_eq!(c.param_count(), 73_728 + 128);
        let d = decomposed_conv(ConvGeometry::square(3, 1, 1, 64, 128), 16);
        assert_eq!(d.weight_count(), 3_168);
        assert_eq!(d.param_count(), 3_168 + 128);
        let dd = decomposed_dense(512, 100, 32);
        assert_eq!(dd.param_count(), 19_584 + 32 + 100);
    }

    #[test]
    fn optimizable_examples() {
        let m = Model::new(
            "m",
            [1, 4, 4],
            3,
            vec![conv(1, 2, 3, 1), LayerSpec::Relu, LayerSpec::Flatten, dense(32, 3)],
        )
        .unwrap();
        assert_eq!(m.optimizable_indices(), vec![0, 3]);
        let m = Model::new("r", [1, 1, 1], 1, vec![LayerSpec::Relu, LayerSpec::Flatten]).unwrap();
        assert!(m.optimizable_indices().is_empty());
        let m = Model::new(
            "d",
            [1, 4, 4],
            3,
            vec![
                decomposed_conv(ConvGeometry::square(3, 1, 1, 1, 2), 2),
                LayerSpec::Flatten,
                dense(32, 3),
            ],
        )
        .unwrap();
        assert_eq!(m.optimizable_indices(), vec![2]);
    }

    #[test]
    fn replace_preserves_contract() {
        let m = small_cnn();
        let before = m.clone();
        let g = ConvGeometry::square(3, 1, 1, 1, 8);
        let r = m.replace_layer(0, decomposed_conv(g, 9)).unwrap();
        assert_eq!(r.infer_shapes().unwrap(), m.infer_shapes().unwrap());
        assert_eq!(m, before);

        let m = Model::new("d", [512, 1, 1], 100, vec![LayerSpec::Flatten, dense(512, 100)]).unwrap();
        let r = m.replace_layer(1, decomposed_dense(512, 100, 32)).unwrap();
        assert_eq!(r.infer_shapes().unwrap().last(), Some(&ActShape::Flat(100)));

        let bad = ConvGeometry::square(3, 1, 1, 1, 4);
        assert!(small_cnn().replace_layer(0, decomposed_conv(bad, 2)).is_err());
    }

    #[test]
    fn rejects_bad_factor_shapes() {
        let mut l = decomposed_dense(10, 5, 3);
        if let LayerSpec::DecomposedDense(d) = &mut l {
            d.s = Tensor::zeros(&[4]).unwrap();
        }
        assert!(l.validate().is_err());
        assert!(decomposed_dense(10, 5, 6).validate().is_err());
    }
}
