//! Toy prompt-conditioned density counter.
//!
//! ```text
//! image[4,H,W] -> conv3x3(8) -> relu -> conv3x3(8) -> sigmoid = F[8,H,W]
//!              -> conv1x1(1) -> sigmoid = M^p[H,W]
//! ```
//!
//! `F` doubles as the feature map handed to the attribute module.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    add_channel_bias, add_channel_bias_backward, conv2d, conv2d_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, Tensor,
};

pub const INPUT_CHANNELS: usize = 4;
pub const HIDDEN_CHANNELS: usize = 8;
const MIN_SPATIAL: usize = 8;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FCNT";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights of the counter. Also used to hold parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub const PARAM_NAMES: [&str; 6] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b"];

fn param_shapes() -> [Vec<usize>; 6] {
    [
        vec![HIDDEN_CHANNELS, INPUT_CHANNELS, 3, 3],
        vec![HIDDEN_CHANNELS],
        vec![HIDDEN_CHANNELS, HIDDEN_CHANNELS, 3, 3],
        vec![HIDDEN_CHANNELS],
        vec![1, HIDDEN_CHANNELS, 1, 1],
        vec![1],
    ]
}

impl CounterParams {
    pub fn zeros() -> Self {
        let [a, b, c, d, e, f] = param_shapes();
        Self {
            conv1_w: Tensor::zeros(&a),
            conv1_b: Tensor::zeros(&b),
            conv2_w: Tensor::zeros(&c),
            conv2_b: Tensor::zeros(&d),
            head_w: Tensor::zeros(&e),
            head_b: Tensor::zeros(&f),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    fn from_tensors(t: Vec<Tensor>) -> Result<Self> {
        let shapes = param_shapes();
        if t.len() != 6 {
            return Err(Error::Contract(format!("expected 6 parameter tensors, got {}", t.len())));
        }
        for ((tensor, shape), name) in t.iter().zip(&shapes).zip(PARAM_NAMES) {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "CounterParams",
                    format!("{name} has shape {:?}, expected {:?}", tensor.shape(), shape),
                ));
            }
        }
        let mut it = t.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            head_w: next(),
            head_b: next(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in [`PARAM_NAMES`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(6);
        for shape in param_shapes() {
            let n: usize = shape.iter().product();
            let chunk = flat.get(offset..offset + n).ok_or_else(|| {
                Error::Contract(format!("flat parameter vector too short ({})", flat.len()))
            })?;
            tensors.push(Tensor::new(shape, chunk.to_vec())?);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} values, expected {offset}",
                flat.len()
            )));
        }
        Self::from_tensors(tensors)
    }

    /// `self + factor * other`, element-wise.
    pub fn add_scaled(&self, other: &CounterParams, factor: f64) -> Result<Self> {
        let tensors = self
            .tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| crate::tensor::add(a, &crate::tensor::scale(b, factor)?))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(PARAM_NAMES.len() as u32).to_le_bytes())?;
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let bad = |reason: &str| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        if read_u32(&mut input)? != CHECKPOINT_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let count = read_u32(&mut input)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for expected in PARAM_NAMES.iter().take(count) {
            let len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            if name != expected.as_bytes() {
                return Err(bad(&format!("expected record `{expected}`")));
            }
            let ndim = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut u64_buf = [0u8; 8];
            for _ in 0..ndim {
                input.read_exact(&mut u64_buf)?;
                shape.push(u64::from_le_bytes(u64_buf) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input.read_exact(&mut u64_buf)?;
                data.push(f64::from_le_bytes(u64_buf));
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        Self::from_tensors(tensors)
    }
}

/// Uniform `(-a, a)` kernels with `a = sqrt(1 / fan_in)`; zero biases.
pub fn init_params(seed: u64) -> CounterParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernel = |shape: &[usize]| {
        let fan_in: usize = shape[1..].iter().product();
        let a = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| loop {
            let v = rng.gen_range(-a..a);
            if v != -a {
                break v;
            }
        })
        .expect("finite init")
    };
    let [s1, _, s2, _, sh, _] = param_shapes();
    CounterParams {
        conv1_w: kernel(&s1),
        conv2_w: kernel(&s2),
        head_w: kernel(&sh),
        ..CounterParams::zeros()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    /// `[8, H, W]`, post-sigmoid hidden activation.
    pub features: Tensor,
    /// `[H, W]`, post-sigmoid density.
    pub pred_density: Tensor,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Tensor,
    pre_relu: Tensor,
    hidden: Tensor,
    pub result: ForwardResult,
}

pub fn forward_with_cache(params: &CounterParams, image: &Tensor) -> Result<ForwardCache> {
    match *image.shape() {
        [INPUT_CHANNELS, h, w] if h >= MIN_SPATIAL && w >= MIN_SPATIAL => {}
        _ => {
            return Err(Error::dim(
                "forward",
                format!(
                    "image must be [{INPUT_CHANNELS}, H>={MIN_SPATIAL}, W>={MIN_SPATIAL}], got {:?}",
                    image.shape()
                ),
            ))
        }
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let pre_relu = add_channel_bias(&conv2d(image, &params.conv1_w, 1)?, &params.conv1_b)?;
    let hidden = relu(&pre_relu);
    let features = sigmoid(&add_channel_bias(
        &conv2d(&hidden, &params.conv2_w, 1)?,
        &params.conv2_b,
    )?);
    let logits = add_channel_bias(&conv2d(&features, &params.head_w, 0)?, &params.head_b)?;
    let pred_density = sigmoid(&logits).reshape(&[h, w])?;
    Ok(ForwardCache {
        input: image.clone(),
        pre_relu,
        hidden,
        result: ForwardResult {
            features,
            pred_density,
        },
    })
}

pub fn forward(params: &CounterParams, image: &Tensor) -> Result<ForwardResult> {
    Ok(forward_with_cache(params, image)?.result)
}

/// Parameter gradients given `dL/dM^p` for one image.
pub fn backward(
    params: &CounterParams,
    cache: &ForwardCache,
    grad_density: &Tensor,
) -> Result<CounterParams> {
    let pred = &cache.result.pred_density;
    if grad_density.shape() != pred.shape() {
        return Err(Error::dim(
            "backward",
            format!(
                "density gradient {:?} vs prediction {:?}",
                grad_density.shape(),
                pred.shape()
            ),
        ));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let d_logits = sigmoid_backward(&pred.reshape(&[1, h, w])?, &grad_density.reshape(&[1, h, w])?)?;
    let head_b = add_channel_bias_backward(&d_logits)?;
    let features = &cache.result.features;
    let (d_features, head_w) = conv2d_backward(features, &params.head_w, 0, &d_logits)?;
    let d_z2 = sigmoid_backward(features, &d_features)?;
    let conv2_b = add_channel_bias_backward(&d_z2)?;
    let (d_hidden, conv2_w) = conv2d_backward(&cache.hidden, &params.conv2_w, 1, &d_z2)?;
    let d_z1 = relu_backward(&cache.pre_relu, &d_hidden)?;
    let conv1_b = add_channel_bias_backward(&d_z1)?;
    let (_, conv1_w) = conv2d_backward(&cache.input, &params.conv1_w, 1, &d_z1)?;
    Ok(CounterParams {
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        head_w,
        head_b,
    })
}

/// Count implied by a density map: its total mass.
pub fn predict_count(density: &Tensor) -> Result<f64> {
    if let Some(v) = density.data().iter().find(|v| **v < 0.0) {
        return Err(Error::Contract(format!("density map has negative entry {v}")));
    }
    Ok(density.data().iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_in_range() {
        let a = init_params(5);
        assert_eq!(a, init_params(5));
        for (t, fan_in) in [(&a.conv1_w, 36.0), (&a.conv2_w, 72.0), (&a.head_w, 8.0)] {
            let bound = (1.0 / fan_in as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() < bound));
        }
        assert!(a.conv1_b.data().iter().all(|&v| v == 0.0));
        assert!(a.head_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_seeds_give_different_params() {
        let a = init_params(1).flatten();
        let b = init_params(2).flatten();
        let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64;
        let kernels = a.iter().filter(|v| **v != 0.0).count() as f64;
        assert!(differ >= 0.99 * kernels);
    }

    #[test]
    fn zero_network_outputs_half() {
        let out = forward(&CounterParams::zeros(), &Tensor::zeros(&[4, 8, 8])).unwrap();
        assert!(out.pred_density.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.features.shape(), &[8, 8, 8]);
    }

    #[test]
    fn rejects_bad_images() {
        let p = init_params(0);
        assert!(forward(&p, &Tensor::zeros(&[3, 8, 8])).is_err());
        assert!(forward(&p, &Tensor::zeros(&[4, 7, 8])).is_err());
    }

    #[test]
    fn predict_count_examples() {
        assert_eq!(predict_count(&Tensor::zeros(&[4, 4])).unwrap(), 0.0);
        assert_eq!(predict_count(&Tensor::full(&[32, 32], 0.5)).unwrap(), 512.0);
        let neg = Tensor::new(vec![1, 2], vec![1.0, -0.1]).unwrap();
        assert!(predict_count(&neg).is_err());
    }

    #[test]
    fn flat_round_trip_and_checkpoint() {
        let p = init_params(3);
        assert_eq!(CounterParams::from_flat(&p.flatten()).unwrap(), p);
        assert_eq!(p.num_params(), 288 + 8 + 576 + 8 + 8 + 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        p.save(&path).unwrap();
        assert_eq!(CounterParams::load(&path).unwrap(), p);
        std::fs::write(&path, b"nope").unwrap();
        assert!(CounterParams::load(&path).is_err());
    }
}
