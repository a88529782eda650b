//! Per-image feature attributes (entropy, horizontal offset, inverted
//! certainty) and their Dirichlet-weighted fusion into a loss weight.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Clamp applied to feature values before taking logs.
pub const ENTROPY_EPS: f64 = 1e-7;

/// Denominator used when averaging absolute activations for certainty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CertaintyNorm {
    /// Divide by `H * W` only.
    Spatial,
    /// Divide by `C * H * W`.
    #[default]
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttributeNormalization {
    /// Batch min-max scaling to `[0, 1]`.
    #[default]
    MinMax,
    /// Raw values are used as-is.
    None,
}

fn check_features(f: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::dim(
            op,
            format!("expected a non-empty [C,H,W] feature map, got {:?}", f.shape()),
        )),
    }
}

/// Summed binary entropy `-Σ [F ln F + (1-F) ln(1-F)]` over every element,
/// with `F` clamped to `[1e-7, 1 - 1e-7]`.
pub fn compute_entropy(features: &Tensor) -> Result<f64> {
    check_features(features, "compute_entropy")?;
    let total: f64 = features
        .data()
        .iter()
        .map(|&v| {
            let p = v.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        })
        .sum();
    Ok(total.max(0.0))
}

/// Horizontal distance between the feature-mass centroid (over all channels)
/// and the image center `(W - 1) / 2`, in columns.
pub fn compute_offset(features: &Tensor) -> Result<f64> {
    let (_, _, w) = check_features(features, "compute_offset")?;
    let mut mass = 0.0;
    let mut moment = 0.0;
    for row in features.data().chunks(w) {
        for (col, &v) in row.iter().enumerate() {
            mass += v;
            moment += col as f64 * v;
        }
    }
    if mass <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "feature map mass {mass} is too small to locate a centroid"
        )));
    }
    let center = (w as f64 - 1.0) / 2.0;
    Ok((moment / mass - center).abs())
}

/// `1 - sigmoid(mean |F|)`. Grows as activations weaken, so it is the
/// inverted certainty used as the third attribute.
pub fn compute_certainty(features: &Tensor, norm: CertaintyNorm) -> Result<f64> {
    let (c, h, w) = check_features(features, "compute_certainty")?;
    let total: f64 = features.data().iter().map(|v| v.abs()).sum();
    let denom = match norm {
        CertaintyNorm::Spatial => (h * w) as f64,
        CertaintyNorm::Full => (c * h * w) as f64,
    };
    Ok(1.0 - sigmoid_scalar(total / denom))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawAttributes {
    pub entropy: f64,
    pub offset: f64,
    pub inv_certainty: f64,
}

impl RawAttributes {
    pub fn from_features(features: &Tensor, norm: CertaintyNorm) -> Result<Self> {
        Ok(Self {
            entropy: compute_entropy(features)?,
            offset: compute_offset(features)?,
            inv_certainty: compute_certainty(features, norm)?,
        })
    }

    fn get(&self, k: usize) -> f64 {
        [self.entropy, self.offset, self.inv_certainty][k]
    }
}

/// Raw attributes of one image and their batch-normalized counterparts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttributeTriple {
    pub entropy_raw: f64,
    pub offset_raw: f64,
    pub inv_certainty_raw: f64,
    pub entropy: f64,
    pub offset: f64,
    pub inv_certainty: f64,
}

impl AttributeTriple {
    pub fn normalized(&self) -> [f64; 3] {
        [self.entropy, self.offset, self.inv_certainty]
    }
}

fn minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.5; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Scales each attribute across the batch. Under min-max a constant attribute
/// maps to 0.5 for every image.
pub fn normalize_attributes(
    batch: &[RawAttributes],
    mode: AttributeNormalization,
) -> Result<Vec<AttributeTriple>> {
    if batch.is_empty() {
        return Err(Error::Contract("cannot normalize an empty batch".into()));
    }
    let columns: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            let raw: Vec<f64> = batch.iter().map(|a| a.get(k)).collect();
            match mode {
                AttributeNormalization::MinMax => minmax(&raw),
                AttributeNormalization::None => raw,
            }
        })
        .collect();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, raw)| AttributeTriple {
            entropy_raw: raw.entropy,
            offset_raw: raw.offset,
            inv_certainty_raw: raw.inv_certainty,
            entropy: columns[0][i],
            offset: columns[1][i],
            inv_certainty: columns[2][i],
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirichletParams {
    alpha: [f64; 3],
}

impl DirichletParams {
    pub fn new(alpha: [f64; 3]) -> Result<Self> {
        if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Contract(format!(
                "Dirichlet concentrations must be positive and finite, got {alpha:?}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> [f64; 3] {
        self.alpha
    }

    /// Analytic mean `α / Σα`.
    pub fn mean(&self) -> [f64; 3] {
        let total: f64 = self.alpha.iter().sum();
        self.alpha.map(|a| a / total)
    }
}

impl Default for DirichletParams {
    fn default() -> Self {
        Self { alpha: [1.0; 3] }
    }
}

/// A point on the 2-simplex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightVector([f64; 3]);

impl WeightVector {
    pub fn new(w: [f64; 3]) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "weights {w:?} are not on the simplex"
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn vertex(k: usize) -> Self {
        let mut w = [0.0; 3];
        w[k] = 1.0;
        Self(w)
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }
}

/// Draws `w ~ Dirichlet(α)` by normalizing independent `Gamma(α_k, 1)` draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(params: &DirichletParams, rng: &mut R) -> WeightVector {
    loop {
        let draws = params.alpha.map(|a| {
            Gamma::new(a, 1.0)
                .expect("alpha validated positive")
                .sample(rng)
        });
        let total: f64 = draws.iter().sum();
        // Every draw can underflow to zero for tiny α; redraw in that case.
        if total > 0.0 && total.is_finite() {
            return WeightVector(draws.map(|g| g / total));
        }
    }
}

/// `U_C = w_1 * entropy + w_2 * offset + w_3 * inv_certainty` on normalized
/// attributes.
pub fn combine_weight(triple: &AttributeTriple, w: &WeightVector) -> Result<f64> {
    let values = triple.normalized();
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(format!(
            "attributes {values:?} are not normalized to [0, 1]"
        )));
    }
    Ok(combine_unchecked(values, w))
}

/// Convex combination without the `[0, 1]` check, for unnormalized runs.
pub fn combine_unchecked(values: [f64; 3], w: &WeightVector) -> f64 {
    values.iter().zip(w.0.iter()).map(|(u, wk)| u * wk).sum()
}
