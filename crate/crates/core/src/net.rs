//! Feedforward network representation, forward evaluation, and model file I/O.
//!
//! Networks are ordered sequences of layers ending in a dense logit layer.
//! Activations are flat row-major `Vec<f64>` buffers; convolutional shapes
//! are interpreted as `[height, width, channels]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GloroError, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Geometry of a convolution with zero "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvMeta {
    pub fn new(
        input_shape: &[usize],
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(GloroError::ShapeMismatch(format!(
                "conv expects [h, w, c] input, got {input_shape:?}"
            )));
        }
        let (in_h, in_w, c) = (input_shape[0], input_shape[1], input_shape[2]);
        if c != in_c {
            return Err(GloroError::ShapeMismatch(format!(
                "conv expects {in_c} input channels, got {c}"
            )));
        }
        if stride == 0 {
            return Err(GloroError::InvalidNetwork("conv stride must be positive".into()));
        }
        // TensorFlow-style "same" padding.
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
        Ok(ConvMeta {
            in_h,
            in_w,
            in_c,
            out_c,
            kh,
            kw,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h,
            out_w,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn out_dim(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    pub fn kernel_len(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }
}

/// y[oy, ox, oc] = sum over (ky, kx, ic) of k[oc, ic, ky, kx] * x[oy*s + ky - pad, ...]
pub fn conv_apply(kernel: &[f64], x: &[f64], m: &ConvMeta) -> Vec<f64> {
    let mut out = vec![0.0; m.out_dim()];
    for oy in 0..m.out_h {
        for ox in 0..m.out_w {
            for oc in 0..m.out_c {
                let mut acc = 0.0;
                for ky in 0..m.kh {
                    let iy = (oy * m.stride + ky) as isize - m.pad_top as isize;
                    if iy < 0 || iy >= m.in_h as isize {
                        continue;
                    }
                    for kx in 0..m.kw {
                        let ix = (ox * m.stride + kx) as isize - m.pad_left as isize;
                        if ix < 0 || ix >= m.in_w as isize {
                            continue;
                        }
                        let xbase = (iy as usize * m.in_w + ix as usize) * m.in_c;
                        let kbase = ((oc * m.in_c) * m.kh + ky) * m.kw + kx;
                        for ic in 0..m.in_c {
                            acc += kernel[kbase + ic * m.kh * m.kw] * x[xbase + ic];
                        }
                    }
                }
                out[(oy * m.out_w + ox) * m.out_c + oc] = acc;
            }
        }
    }
    out
}

/// Transpose of `conv_apply` in its input argument (bias excluded).
pub fn conv_apply_transpose(kernel: &[f64], y: &[f64], m: &ConvMeta) -> Vec<f64> {
    let mut out = vec![0.0; m.in_dim()];
    for oy in 0..m.out_h {
        for ox in 0..m.out_w {
            for oc in 0..m.out_c {
                let g = y[(oy * m.out_w + ox) * m.out_c + oc];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..m.kh {
                    let iy = (oy * m.stride + ky) as isize - m.pad_top as isize;
                    if iy < 0 || iy >= m.in_h as isize {
                        continue;
                    }
                    for kx in 0..m.kw {
                        let ix = (ox * m.stride + kx) as isize - m.pad_left as isize;
                        if ix < 0 || ix >= m.in_w as isize {
                            continue;
                        }
                        let xbase = (iy as usize * m.in_w + ix as usize) * m.in_c;
                        let kbase = ((oc * m.in_c) * m.kh + ky) * m.kw + kx;
                        for ic in 0..m.in_c {
                            out[xbase + ic] += kernel[kbase + ic * m.kh * m.kw] * g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `sum(y * conv_apply(kernel, x))` w.r.t. the kernel.
pub fn conv_grad_kernel(x: &[f64], y: &[f64], m: &ConvMeta) -> Vec<f64> {
    let mut grad = vec![0.0; m.kernel_len()];
    for oy in 0..m.out_h {
        for ox in 0..m.out_w {
            for oc in 0..m.out_c {
                let g = y[(oy * m.out_w + ox) * m.out_c + oc];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..m.kh {
                    let iy = (oy * m.stride + ky) as isize - m.pad_top as isize;
                    if iy < 0 || iy >= m.in_h as isize {
                        continue;
                    }
                    for kx in 0..m.kw {
                        let ix = (ox * m.stride + kx) as isize - m.pad_left as isize;
                        if ix < 0 || ix >= m.in_w as isize {
                            continue;
                        }
                        let xbase = (iy as usize * m.in_w + ix as usize) * m.in_c;
                        let kbase = ((oc * m.in_c) * m.kh + ky) * m.kw + kx;
                        for ic in 0..m.in_c {
                            grad[kbase + ic * m.kh * m.kw] += x[xbase + ic] * g;
                        }
                    }
                }
            }
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        /// Row-major `rows x cols`.
        weights: Vec<f64>,
        rows: usize,
        cols: usize,
        bias: Vec<f64>,
    },
    Conv {
        /// Row-major `out_c x in_c x kh x kw`.
        kernel: Vec<f64>,
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        bias: Vec<f64>,
    },
    MinMax,
    InvertibleDownsample {
        factor: usize,
    },
}

impl Layer {
    pub fn dense(weights: Vec<f64>, rows: usize, cols: usize, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(GloroError::InvalidNetwork(format!(
                "dense weights have {} entries, expected {}x{}",
                weights.len(),
                rows,
                cols
            )));
        }
        if bias.len() != rows {
            return Err(GloroError::InvalidNetwork(format!(
                "dense bias has {} entries, expected {}",
                bias.len(),
                rows
            )));
        }
        Ok(Layer::Dense { weights, rows, cols, bias })
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }

    /// Shape produced by this layer on the given input shape.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input_shape.iter().product();
        match self {
            Layer::Dense { rows, cols, .. } => {
                if numel != *cols {
                    return Err(GloroError::ShapeMismatch(format!(
                        "dense layer expects {cols} inputs, got shape {input_shape:?}"
                    )));
                }
                Ok(vec![*rows])
            }
            Layer::Conv { out_c, in_c, kh, kw, stride, .. } => {
                let m = ConvMeta::new(input_shape, *out_c, *in_c, *kh, *kw, *stride)?;
                Ok(vec![m.out_h, m.out_w, m.out_c])
            }
            Layer::MinMax => Ok(input_shape.to_vec()),
            Layer::InvertibleDownsample { factor } => {
                if input_shape.len() != 3 {
                    return Err(GloroError::ShapeMismatch(format!(
                        "downsample expects [h, w, c] input, got {input_shape:?}"
                    )));
                }
                let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
                let s = *factor;
                if s == 0 || h % s != 0 || w % s != 0 {
                    return Err(GloroError::ShapeMismatch(format!(
                        "downsample factor {s} does not divide {h}x{w}"
                    )));
                }
                Ok(vec![h / s, w / s, c * s * s])
            }
        }
    }
}

/// Sorts each consecutive disjoint pair of the vector ascending; a trailing
/// unpaired element passes through unchanged. A per-pair permutation, hence
/// norm-preserving and 1-Lipschitz in l2.
pub fn minmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for i in (0..v.len().saturating_sub(1)).step_by(2) {
        if out[i] > out[i + 1] {
            out.swap(i, i + 1);
        }
    }
    out
}

/// Index permutation of an invertible downsample: `out[i] = input[perm[i]]`.
pub fn downsample_permutation(h: usize, w: usize, c: usize, s: usize) -> Vec<usize> {
    let (oh, ow) = (h / s, w / s);
    let oc = c * s * s;
    let mut perm = vec![0usize; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..s {
                for dx in 0..s {
                    for ch in 0..c {
                        let out_ch = (dy * s + dx) * c + ch;
                        let out_idx = (oy * ow + ox) * oc + out_ch;
                        let in_idx = ((oy * s + dy) * w + (ox * s + dx)) * c + ch;
                        perm[out_idx] = in_idx;
                    }
                }
            }
        }
    }
    perm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub metadata: ModelMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// One of "standard", "rtk", "affinity".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guarantee: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity_sets: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    /// Seed for fresh power-iteration states, recorded for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        let num_classes = match layers.last() {
            Some(Layer::Dense { rows, .. }) => *rows,
            _ => {
                return Err(GloroError::InvalidNetwork(
                    "final layer must be dense (logit layer)".into(),
                ))
            }
        };
        Ok(Network { layers, input_shape, num_classes, metadata: ModelMetadata::default() })
    }

    /// Shapes of all intermediate activations, starting with the input shape.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Rows of the final dense layer, addressable per class.
    pub fn final_dense(&self) -> (&[f64], usize, usize) {
        match self.layers.last() {
            Some(Layer::Dense { weights, rows, cols, .. }) => (weights, *rows, *cols),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Evaluates the network on `x`, returning the logit vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(GloroError::ShapeMismatch(format!(
                "input has {} entries, expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut act = x.to_vec();
        for layer in &self.layers {
            let next_shape = layer.output_shape(&shape)?;
            act = match layer {
                Layer::Dense { weights, rows, cols, bias } => {
                    let mut out = bias.clone();
                    for r in 0..*rows {
                        let row = &weights[r * cols..(r + 1) * cols];
                        out[r] += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
                    }
                    out
                }
                Layer::Conv { kernel, out_c, in_c, kh, kw, stride, bias } => {
                    let m = ConvMeta::new(&shape, *out_c, *in_c, *kh, *kw, *stride)?;
                    let mut out = conv_apply(kernel, &act, &m);
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += bias[i % m.out_c];
                    }
                    out
                }
                Layer::MinMax => minmax(&act),
                Layer::InvertibleDownsample { factor } => {
                    let perm = downsample_permutation(shape[0], shape[1], shape[2], *factor);
                    perm.iter().map(|&i| act[i]).collect()
                }
            };
            shape = next_shape;
        }
        Ok(act)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file: ModelFile = self.into();
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        file.try_into()
    }
}

/// Class indices ranked by descending logit. Ties break toward the lower
/// class index.
pub fn rank_classes(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// The k classes with the largest logits (F^k), in rank order.
pub fn predict_topk(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > logits.len() {
        return Err(GloroError::InvalidArgument(format!(
            "k = {k} out of range 1..={}",
            logits.len()
        )));
    }
    Ok(rank_classes(logits)[..k].to_vec())
}

// ---------------------------------------------------------------------------
// Model file schema

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerFile>,
    #[serde(default)]
    metadata: ModelMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerFile {
    Dense { shape: [usize; 2], weights: Vec<f64>, bias: Vec<f64> },
    Conv { shape: [usize; 4], stride: usize, weights: Vec<f64>, bias: Vec<f64> },
    MinMax {},
    Downsample { factor: usize },
}

impl From<&Network> for ModelFile {
    fn from(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weights, rows, cols, bias } => LayerFile::Dense {
                    shape: [*rows, *cols],
                    weights: weights.clone(),
                    bias: bias.clone(),
                },
                Layer::Conv { kernel, out_c, in_c, kh, kw, stride, bias } => LayerFile::Conv {
                    shape: [*out_c, *in_c, *kh, *kw],
                    stride: *stride,
                    weights: kernel.clone(),
                    bias: bias.clone(),
                },
                Layer::MinMax => LayerFile::MinMax {},
                Layer::InvertibleDownsample { factor } => {
                    LayerFile::Downsample { factor: *factor }
                }
            })
            .collect();
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            input_shape: net.input_shape.clone(),
            layers,
            metadata: net.metadata.clone(),
        }
    }
}

impl TryFrom<ModelFile> for Network {
    type Error = GloroError;

    fn try_from(file: ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(GloroError::Config(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| match l {
                LayerFile::Dense { shape, weights, bias } => {
                    Layer::dense(weights, shape[0], shape[1], bias)
                }
                LayerFile::Conv { shape, stride, weights, bias } => {
                    if weights.len() != shape.iter().product::<usize>() {
                        return Err(GloroError::InvalidNetwork(
                            "conv kernel size does not match shape".into(),
                        ));
                    }
                    if bias.len() != shape[0] {
                        return Err(GloroError::InvalidNetwork(
                            "conv bias size does not match output channels".into(),
                        ));
                    }
                    Ok(Layer::Conv {
                        kernel: weights,
                        out_c: shape[0],
                        in_c: shape[1],
                        kh: shape[2],
                        kw: shape[3],
                        stride,
                        bias,
                    })
                }
                LayerFile::MinMax {} => Ok(Layer::MinMax),
                LayerFile::Downsample { factor } => Ok(Layer::InvertibleDownsample { factor }),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Network::new(layers, file.input_shape)?;
        net.metadata = file.metadata;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_dense(n: usize) -> Layer {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Layer::dense(w, n, n, vec![0.0; n]).unwrap()
    }

    #[test]
    fn forward_identity_dense() {
        let net = Network::new(vec![identity_dense(2)], vec![2]).unwrap();
        assert_eq!(net.forward(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn forward_hand_matvec() {
        let layer = Layer::dense(vec![1.0, 1.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0]).unwrap();
        let net = Network::new(vec![layer], vec![2]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn forward_two_layer_composition() {
        // Dense (all ones) -> MinMax -> Dense (all ones) on x = (1, 0):
        // first layer (1, 1), minmax (1, 1), logits (2, 2).
        let ones = Layer::dense(vec![1.0; 4], 2, 2, vec![0.0; 2]).unwrap();
        let net = Network::new(
            vec![ones.clone(), Layer::MinMax, ones],
            vec![2],
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, 0.0]).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let net = Network::new(vec![identity_dense(2)], vec![2]).unwrap();
        assert!(net.forward(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn minmax_pair_sort() {
        assert_eq!(minmax(&[3.0, 1.0, 2.0, 5.0]), vec![1.0, 3.0, 2.0, 5.0]);
        assert_eq!(minmax(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        // Odd length: last element passes through.
        assert_eq!(minmax(&[5.0, -1.0, 0.0]), vec![-1.0, 5.0, 0.0]);
    }

    #[test]
    fn minmax_preserves_norm() {
        let v = [0.3, -2.0, 1.5, 1.5, -0.1];
        let out = minmax(&v);
        let n1: f64 = v.iter().map(|x| x * x).sum();
        let n2: f64 = out.iter().map(|x| x * x).sum();
        assert_eq!(n1, n2);
    }

    #[test]
    fn predict_topk_ordering_and_ties() {
        assert_eq!(predict_topk(&[3.0, 2.0, 0.5], 2).unwrap(), vec![0, 1]);
        assert_eq!(predict_topk(&[1.0, 1.0, 0.0], 1).unwrap(), vec![0]);
        assert_eq!(predict_topk(&[0.5, 3.0, 2.0], 3).unwrap(), vec![1, 2, 0]);
        assert!(predict_topk(&[1.0, 2.0], 0).is_err());
        assert!(predict_topk(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn downsample_is_invertible() {
        let (h, w, c, s) = (4, 4, 3, 2);
        let perm = downsample_permutation(h, w, c, s);
        let mut seen = vec![false; h * w * c];
        for &i in &perm {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with single weight 3 scales every entry.
        let m = ConvMeta::new(&[3, 3, 1], 1, 1, 1, 1, 1).unwrap();
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let y = conv_apply(&[3.0], &x, &m);
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(*b, 3.0 * a);
        }
    }

    #[test]
    fn model_file_round_trip_bit_exact() {
        let layer = Layer::dense(
            vec![0.1, -0.2, 1.0 / 3.0, std::f64::consts::PI],
            2,
            2,
            vec![1e-17, -0.0],
        )
        .unwrap();
        let mut net = Network::new(vec![layer, Layer::MinMax, identity_dense(2)], vec![2]).unwrap();
        net.metadata.epsilon = Some(0.3);
        net.metadata.guarantee = Some("rtk".into());
        net.metadata.k = Some(2);
        net.metadata.power_seed = Some(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(net, loaded);
    }
}
