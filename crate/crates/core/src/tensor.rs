//! Dense row-major `f64` tensors with a fixed set of differentiable operations.
//!
//! There is no dynamic graph. Each operation has a forward function and a
//! matching `*_backward` that maps an upstream gradient onto the operation's
//! inputs. [`GradPair`] bundles a forward value with the record needed to run
//! that backward step, which is all the toy counter and the losses need.
//!
//! Every constructor and operation rejects non-finite values, so a `Tensor`
//! that exists is always finite.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!(
                    "shape {:?} holds {} elements but {} values were given",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor data at flat index {i} ({})",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(shape.to_vec(), (0..numel(shape)).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// True for rank-0 tensors and single-element rank-1 tensors.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for axis of size {d}");
                acc * d + i
            })
    }

    /// Copy with one element replaced. Used by finite-difference probes.
    pub fn with_value(&self, flat: usize, value: f64) -> Result<Self> {
        let mut data = self.data.clone();
        data[flat] = value;
        Self::new(self.shape.clone(), data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn checked(shape: Vec<usize>, data: Vec<f64>, op: &str) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op} output at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("lhs {:?} vs rhs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

/// Gradient through a sigmoid given its *output* `s`: `grad * s * (1 - s)`.
pub fn sigmoid_backward(output: &Tensor, grad: &Tensor) -> Result<Tensor> {
    output.same_shape(grad, "sigmoid_backward")?;
    let data = output
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::checked(output.shape.clone(), data, "sigmoid_backward")
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient through a relu given its *input*. The derivative at 0 is 0.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    input.same_shape(grad, "relu_backward")?;
    let data = input
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape.clone(),
        data,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::checked(a.shape.clone(), data, "add")
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::checked(a.shape.clone(), data, "sub")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::checked(a.shape.clone(), data, "mul")
}

/// Gradients of `a * b` with respect to `a` and `b`.
pub fn mul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    a.same_shape(grad, "mul_backward")?;
    Ok((mul(grad, b)?, mul(grad, a)?))
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x * factor).collect();
    Tensor::checked(a.shape.clone(), data, "scale")
}

/// Sum of all elements in index order, as a rank-0 tensor.
pub fn sum(a: &Tensor) -> Result<Tensor> {
    let total: f64 = a.data.iter().sum();
    Tensor::checked(Vec::new(), vec![total], "sum")
}

pub fn sum_backward(shape: &[usize], grad: f64) -> Tensor {
    Tensor::full(shape, grad)
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.is_empty() {
        return Err(Error::Contract("mean of an empty tensor".into()));
    }
    let total: f64 = a.data.iter().sum();
    Tensor::checked(Vec::new(), vec![total / a.len() as f64], "mean")
}

pub fn mean_backward(shape: &[usize], grad: f64) -> Tensor {
    let n = numel(shape) as f64;
    Tensor::full(shape, grad / n)
}

/// Adds `bias[c]` to every element of channel `c` of a `[C, H, W]` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 || bias.shape != [x.shape[0]] {
        return Err(Error::dim(
            "add_channel_bias",
            format!("input {:?} with bias {:?}", x.shape, bias.shape),
        ));
    }
    let plane = x.shape[1] * x.shape[2];
    let mut data = x.data.clone();
    for (chunk, b) in data.chunks_mut(plane).zip(&bias.data) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::checked(x.shape.clone(), data, "add_channel_bias")
}

/// Bias gradient: per-channel sum of the upstream gradient.
pub fn add_channel_bias_backward(grad: &Tensor) -> Result<Tensor> {
    if grad.ndim() != 3 {
        return Err(Error::dim(
            "add_channel_bias_backward",
            format!("expected [C,H,W], got {:?}", grad.shape),
        ));
    }
    let plane = grad.shape[1] * grad.shape[2];
    let data = grad.data.chunks(plane).map(|c| c.iter().sum()).collect();
    Tensor::checked(vec![grad.shape[0]], data, "add_channel_bias_backward")
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<ConvDims> {
    if input.ndim() != 3 {
        return Err(Error::dim(
            "conv2d",
            format!("input must be [C_in,H,W], got {:?}", input.shape),
        ));
    }
    if kernel.ndim() != 4 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel must be [C_out,C_in,k,k], got {:?}", kernel.shape),
        ));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kc != c_in {
        return Err(Error::dim(
            "conv2d",
            format!("kernel axis 1 (C_in = {kc}) does not match input axis 0 (C_in = {c_in})"),
        ));
    }
    if kh != kw {
        return Err(Error::dim(
            "conv2d",
            format!("kernel axes 2 and 3 differ ({kh} vs {kw})"),
        ));
    }
    if kh % 2 == 0 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel size {kh} on axes 2/3 must be odd"),
        ));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < kh || wp < kw {
        return Err(Error::dim(
            "conv2d",
            format!("padded input axes 1/2 ({hp}x{wp}) smaller than kernel ({kh}x{kw})"),
        ));
    }
    Ok(ConvDims {
        c_in,
        c_out,
        k: kh,
        pad: padding,
        h,
        w,
        hp,
        wp,
        ho: hp - kh + 1,
        wo: wp - kw + 1,
    })
}

fn pad_input(input: &Tensor, d: &ConvDims) -> Vec<f64> {
    if d.pad == 0 {
        return input.data.clone();
    }
    let mut padded = vec![0.0; d.c_in * d.hp * d.wp];
    for c in 0..d.c_in {
        for y in 0..d.h {
            let src = &input.data[(c * d.h + y) * d.w..][..d.w];
            let dst = (c * d.hp + y + d.pad) * d.wp + d.pad;
            padded[dst..dst + d.w].copy_from_slice(src);
        }
    }
    padded
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with a
/// `[C_out, C_in, k, k]` kernel and symmetric zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let d = conv_dims(input, kernel, padding)?;
    let padded = pad_input(input, &d);
    let mut out = vec![0.0; d.c_out * d.ho * d.wo];
    let kk = d.k * d.k;
    for co in 0..d.c_out {
        let out_plane = &mut out[co * d.ho * d.wo..][..d.ho * d.wo];
        for ci in 0..d.c_in {
            let in_plane = &padded[ci * d.hp * d.wp..][..d.hp * d.wp];
            let taps = &kernel.data[(co * d.c_in + ci) * kk..][..kk];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = taps[ky * d.k + kx];
                    for y in 0..d.ho {
                        let src = &in_plane[(y + ky) * d.wp + kx..][..d.wo];
                        let dst = &mut out_plane[y * d.wo..][..d.wo];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += wgt * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::checked(vec![d.c_out, d.ho, d.wo], out, "conv2d")
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(input, kernel, padding)?;
    if grad_out.shape != [d.c_out, d.ho, d.wo] {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} does not match output [{}, {}, {}]",
                grad_out.shape, d.c_out, d.ho, d.wo
            ),
        ));
    }
    let padded = pad_input(input, &d);
    let kk = d.k * d.k;
    let mut grad_padded = vec![0.0; d.c_in * d.hp * d.wp];
    let mut grad_kernel = vec![0.0; kernel.len()];
    for co in 0..d.c_out {
        let g_plane = &grad_out.data[co * d.ho * d.wo..][..d.ho * d.wo];
        for ci in 0..d.c_in {
            let in_plane = &padded[ci * d.hp * d.wp..][..d.hp * d.wp];
            let gin_plane = &mut grad_padded[ci * d.hp * d.wp..][..d.hp * d.wp];
            let base = (co * d.c_in + ci) * kk;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = kernel.data[base + ky * d.k + kx];
                    let mut acc = 0.0;
                    for y in 0..d.ho {
                        let g_row = &g_plane[y * d.wo..][..d.wo];
                        let off = (y + ky) * d.wp + kx;
                        let src = &in_plane[off..][..d.wo];
                        acc += g_row.iter().zip(src).map(|(g, s)| g * s).sum::<f64>();
                        let dst = &mut gin_plane[off..][..d.wo];
                        for (o, &g) in dst.iter_mut().zip(g_row) {
                            *o += wgt * g;
                        }
                    }
                    grad_kernel[base + ky * d.k + kx] += acc;
                }
            }
        }
    }
    let grad_input = if d.pad == 0 {
        grad_padded
    } else {
        let mut cropped = Vec::with_capacity(input.len());
        for c in 0..d.c_in {
            for y in 0..d.h {
                let src = (c * d.hp + y + d.pad) * d.wp + d.pad;
                cropped.extend_from_slice(&grad_padded[src..src + d.w]);
            }
        }
        cropped
    };
    Ok((
        Tensor::checked(input.shape.clone(), grad_input, "conv2d_backward")?,
        Tensor::checked(kernel.shape.clone(), grad_kernel, "conv2d_backward")?,
    ))
}

/// What a [`GradPair`] must remember to push a gradient back to its inputs.
#[derive(Clone, Debug)]
pub enum GradFn {
    Leaf,
    Sigmoid { output: Tensor },
    Relu { input: Tensor },
    Add,
    Mul { lhs: Tensor, rhs: Tensor },
    Sum { shape: Vec<usize> },
    Mean { shape: Vec<usize> },
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        padding: usize,
    },
}

/// A forward value plus the record needed to differentiate through it.
#[derive(Clone, Debug)]
pub struct GradPair {
    pub value: Tensor,
    pub grad_fn: GradFn,
}

impl GradPair {
    pub fn leaf(value: Tensor) -> Self {
        Self {
            value,
            grad_fn: GradFn::Leaf,
        }
    }

    pub fn sigmoid(x: &Tensor) -> Self {
        let output = sigmoid(x);
        Self {
            value: output.clone(),
            grad_fn: GradFn::Sigmoid { output },
        }
    }

    pub fn relu(x: &Tensor) -> Self {
        Self {
            value: relu(x),
            grad_fn: GradFn::Relu { input: x.clone() },
        }
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Self> {
        Ok(Self {
            value: add(a, b)?,
            grad_fn: GradFn::Add,
        })
    }

    pub fn mul(a: &Tensor, b: &Tensor) -> Result<Self> {
        Ok(Self {
            value: mul(a, b)?,
            grad_fn: GradFn::Mul {
                lhs: a.clone(),
                rhs: b.clone(),
            },
        })
    }

    pub fn sum(a: &Tensor) -> Result<Self> {
        Ok(Self {
            value: sum(a)?,
            grad_fn: GradFn::Sum {
                shape: a.shape.clone(),
            },
        })
    }

    pub fn mean(a: &Tensor) -> Result<Self> {
        Ok(Self {
            value: mean(a)?,
            grad_fn: GradFn::Mean {
                shape: a.shape.clone(),
            },
        })
    }

    pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Self> {
        Ok(Self {
            value: conv2d(input, kernel, padding)?,
            grad_fn: GradFn::Conv2d {
                input: input.clone(),
                kernel: kernel.clone(),
                padding,
            },
        })
    }

    /// Gradients with respect to each input, in argument order, given the
    /// gradient of a downstream scalar with respect to `self.value`.
    pub fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        if upstream.shape() != self.value.shape() {
            return Err(Error::dim(
                "GradPair::backward",
                format!(
                    "upstream {:?} vs value {:?}",
                    upstream.shape(),
                    self.value.shape()
                ),
            ));
        }
        let grads = match &self.grad_fn {
            GradFn::Leaf => vec![upstream.clone()],
            GradFn::Sigmoid { output } => vec![sigmoid_backward(output, upstream)?],
            GradFn::Relu { input } => vec![relu_backward(input, upstream)?],
            GradFn::Add => vec![upstream.clone(), upstream.clone()],
            GradFn::Mul { lhs, rhs } => {
                let (ga, gb) = mul_backward(lhs, rhs, upstream)?;
                vec![ga, gb]
            }
            GradFn::Sum { shape } => vec![sum_backward(shape, upstream.item()?)],
            GradFn::Mean { shape } => vec![mean_backward(shape, upstream.item()?)],
            GradFn::Conv2d {
                input,
                kernel,
                padding,
            } => {
                let (gi, gk) = conv2d_backward(input, kernel, *padding, upstream)?;
                vec![gi, gk]
            }
        };
        if let Some(g) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of shape {:?}",
                g.shape()
            )));
        }
        Ok(grads)
    }
}

/// Largest element-wise relative disagreement between an analytic gradient
/// and central finite differences of step `h`:
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// `f` returns `(value, gradient)` where `value` must be a scalar tensor and
/// `gradient` has the shape of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(Tensor, Tensor)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let (value, analytic) = f(x)?;
    if !value.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            value.shape()
        )));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::dim(
            "grad_check",
            format!(
                "gradient {:?} does not match input {:?}",
                analytic.shape(),
                x.shape()
            ),
        ));
    }
    if analytic.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let (v, _) = f(t)?;
        v.item()
    };
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let xi = x.data[i];
        let plus = eval(&x.with_value(i, xi + h)?)?;
        let minus = eval(&x.with_value(i, xi - h)?)?;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at flat index {i}"
            )));
        }
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.get(&[0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn conv_identity_kernel_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 6, 5], &mut rng);
        let k = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            let (co, ci, pos) = (i / 27, (i / 9) % 3, i % 9);
            if co == ci && pos == 4 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        assert_eq!(conv2d(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::ones(&[2, 4, 4]);
        let k = Tensor::ones(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1") && err.contains("axis 0"), "{err}");
        let even = Tensor::ones(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &even, 1).is_err());
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 5, 5], &mut rng);
        let k = random(&[1, 1, 3, 3], &mut rng);
        let r = random(&[1, 5, 5], &mut rng);
        let f = |t: &Tensor| {
            let y = conv2d(t, &k, 1)?;
            let (gi, _) = conv2d_backward(t, &k, 1, &r)?;
            Ok((sum(&mul(&y, &r)?)?, gi))
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let r = random(&[3, 6, 6], &mut rng);
        let f = |kt: &Tensor| {
            let y = conv2d(&x, kt, 1)?;
            let (_, gk) = conv2d_backward(&x, kt, 1, &r)?;
            Ok((sum(&mul(&y, &r)?)?, gk))
        };
        assert!(grad_check(f, &k, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn sigmoid_values() {
        let s = sigmoid(&Tensor::new(vec![3], vec![0.0, 1.0, 800.0]).unwrap());
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(s.data()[2], 1.0);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
    }

    #[test]
    fn relu_and_reductions() {
        let r = relu(&Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 2.0]);
        assert_eq!(sum(&Tensor::ones(&[2, 2])).unwrap().item().unwrap(), 4.0);
        let g = relu_backward(
            &Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap(),
            &Tensor::ones(&[3]),
        )
        .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_gradient_distributes_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 3], &mut rng);
        let g = mean_backward(x.shape(), 1.0);
        assert!(g.data().iter().all(|&v| v == 1.0 / 12.0));
        let f = |t: &Tensor| Ok((mean(t)?, mean_backward(t.shape(), 1.0)));
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn grad_check_exact_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[10], &mut rng);
        let f = |t: &Tensor| Ok((sum(&mul(t, t)?)?, scale(t, 2.0)?));
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn grad_check_sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[10], &mut rng);
        let f = |t: &Tensor| {
            let s = GradPair::sigmoid(t);
            let total = GradPair::sum(&s.value)?;
            let up = total.backward(&Tensor::scalar(1.0)?)?.remove(0);
            Ok((total.value, s.backward(&up)?.remove(0)))
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn grad_check_rejects_nan_gradient_and_vector_output() {
        let x = Tensor::ones(&[3]);
        let nan_grad = |t: &Tensor| {
            Ok((
                sum(t)?,
                Tensor {
                    shape: vec![3],
                    data: vec![f64::NAN; 3],
                },
            ))
        };
        assert!(matches!(
            grad_check(nan_grad, &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
        let vector = |t: &Tensor| Ok((t.clone(), t.clone()));
        assert!(matches!(
            grad_check(vector, &x, 1e-5),
            Err(Error::Contract(_))
        ));
        assert!(grad_check(|t: &Tensor| Ok((sum(t)?, Tensor::ones(&[3]))), &x, 1.0).is_err());
    }

    #[test]
    fn grad_pair_backward_shapes_match_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[4, 2, 3, 3], &mut rng);
        let y = GradPair::conv2d(&x, &k, 1).unwrap();
        let grads = y.backward(&Tensor::ones(y.value.shape())).unwrap();
        assert_eq!(grads[0].shape(), x.shape());
        assert_eq!(grads[1].shape(), k.shape());
        let m = GradPair::mul(&x, &x).unwrap();
        let g = m.backward(&Tensor::ones(x.shape())).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0], scale(&x, 1.0).unwrap());
    }

    #[test]
    fn reductions_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1000], &mut rng);
        let a = sum(&x).unwrap().item().unwrap();
        let b = sum(&x.clone()).unwrap().item().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
