//! Self-check suites run by `focalcount verify`: finite-difference gradient
//! checks, Dirichlet moments, loss gradient dominance and attribute trends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attributes::{
    compute_certainty, compute_entropy, compute_offset, sample_dirichlet, CertaintyNorm,
    DirichletParams, RawAttributes,
};
use crate::error::{Error, Result};
use crate::losses::{batch_loss_with_kind, es_loss, focal_mse_loss, loss_for, mse_loss, LossKind, DEFAULT_ES_EPS};
use crate::model::{backward, forward_with_cache, init_params, CounterParams};
use crate::synthgen::{generate_corpus, probe_features};
use crate::tensor::{self, grad_check, GradPair, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_INSTANCES: u64 = 100;
pub const DIRICHLET_SAMPLES: usize = 100_000;
pub const DIRICHLET_ALPHA: [f64; 3] = [2.0, 1.0, 1.0];
pub const PROBE_SCENES: usize = 200;
pub const PROBE_FRACTION: f64 = 0.2;

/// Deliberate defects for exercising the suites' failure paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Focal-MSE gradient computed without its ES term.
    DropEsGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &'static str, outcome: Result<(bool, String)>) -> SuiteResult {
    match outcome {
        Ok((passed, detail)) => SuiteResult { name, passed, detail },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all(fault: Option<Fault>) -> Vec<SuiteResult> {
    vec![
        suite("gradients", gradient_suite(GRAD_INSTANCES)),
        suite("dirichlet", dirichlet_suite(DIRICHLET_SAMPLES, 7)),
        suite("dominance", dominance_suite(fault)),
        suite("attributes", attribute_suite(11)),
    ]
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn scalar_sum(t: &Tensor) -> Result<Tensor> {
    tensor::sum(t)
}

/// Worst relative error of each primitive over `instances` random inputs.
/// Each check reduces the op output `y` to `Σ y * r` with a fixed random `r`.
pub fn primitive_errors(instances: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut worst = vec![
        ("sigmoid", 0.0),
        ("relu", 0.0),
        ("add", 0.0),
        ("mul", 0.0),
        ("sum", 0.0),
        ("mean", 0.0),
        ("conv2d", 0.0),
        ("channel_bias", 0.0),
        ("mse", 0.0),
        ("es", 0.0),
        ("focal_mse", 0.0),
    ];
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 4, 4], &mut rng, -2.0, 2.0)?;
        // keep relu inputs away from the kink
        let xr = Tensor::from_fn(&[2, 4, 4], |i| {
            let v = x.data()[i];
            if v.abs() < 0.05 { v + 0.1 } else { v }
        })?;
        let other = random(&[2, 4, 4], &mut rng, -2.0, 2.0)?;
        let r = random(&[2, 4, 4], &mut rng, -1.0, 1.0)?;
        let kernel = random(&[3, 2, 3, 3], &mut rng, -1.0, 1.0)?;
        let r_conv = random(&[3, 4, 4], &mut rng, -1.0, 1.0)?;
        let bias = random(&[2], &mut rng, -1.0, 1.0)?;
        let pred = random(&[4, 4], &mut rng, 0.05, 0.95)?;
        let gt = random(&[4, 4], &mut rng, 0.0, 1.0)?;

        let project = |pair: GradPair, r: &Tensor| -> Result<(Tensor, Tensor)> {
            let value = scalar_sum(&tensor::mul(&pair.value, r)?)?;
            let grads = pair.backward(r)?;
            Ok((value, grads[0].clone()))
        };
        let checks: [(usize, f64); 11] = [
            (0, grad_check(|t| project(GradPair::sigmoid(t), &r), &x, GRAD_STEP)?),
            (1, grad_check(|t| project(GradPair::relu(t), &r), &xr, GRAD_STEP)?),
            (2, grad_check(|t| project(GradPair::add(t, &other)?, &r), &x, GRAD_STEP)?),
            (3, grad_check(|t| project(GradPair::mul(t, &other)?, &r), &x, GRAD_STEP)?),
            (
                4,
                grad_check(
                    |t| {
                        let pair = GradPair::sum(&tensor::mul(t, &r)?)?;
                        let g = pair.backward(&Tensor::scalar(1.0)?)?;
                        Ok((pair.value, tensor::mul(&g[0], &r)?))
                    },
                    &x,
                    GRAD_STEP,
                )?,
            ),
            (
                5,
                grad_check(
                    |t| {
                        let pair = GradPair::mean(&tensor::mul(t, &r)?)?;
                        let g = pair.backward(&Tensor::scalar(1.0)?)?;
                        Ok((pair.value, tensor::mul(&g[0], &r)?))
                    },
                    &x,
                    GRAD_STEP,
                )?,
            ),
            (
                6,
                grad_check(|t| project(GradPair::conv2d(t, &kernel, 1)?, &r_conv), &x, GRAD_STEP)?
                    .max(grad_check(
                        |k| project_kernel(&x, k, &r_conv),
                        &kernel,
                        GRAD_STEP,
                    )?),
            ),
            (
                7,
                grad_check(
                    |b| {
                        let y = tensor::add_channel_bias(&x, b)?;
                        let value = scalar_sum(&tensor::mul(&y, &r)?)?;
                        Ok((value, tensor::add_channel_bias_backward(&r)?))
                    },
                    &bias,
                    GRAD_STEP,
                )?,
            ),
            (8, grad_check(|p| loss_pair(mse_loss(p, &gt)?), &pred, GRAD_STEP)?),
            (9, grad_check(|p| loss_pair(es_loss(p, &gt)?), &pred, GRAD_STEP)?),
            (10, grad_check(|p| loss_pair(focal_mse_loss(p, &gt)?), &pred, GRAD_STEP)?),
        ];
        for (i, err) in checks {
            worst[i].1 = f64::max(worst[i].1, err);
        }
    }
    Ok(worst)
}

fn project_kernel(x: &Tensor, k: &Tensor, r: &Tensor) -> Result<(Tensor, Tensor)> {
    let pair = GradPair::conv2d(x, k, 1)?;
    let value = scalar_sum(&tensor::mul(&pair.value, r)?)?;
    let grads = pair.backward(r)?;
    Ok((value, grads[1].clone()))
}

fn loss_pair(report: crate::losses::LossReport) -> Result<(Tensor, Tensor)> {
    Ok((Tensor::scalar(report.value)?, report.grad))
}

/// Step used for the full composition, where the loss sums many pixels and
/// a smaller step would be dominated by rounding.
pub const COMPOSITION_STEP: f64 = 1e-3;


struct CompositionInstance {
    images: [Tensor; 2],
    gts: [Tensor; 2],
    weights: [f64; 2],
    params: CounterParams,
}

/// Draws instance `seed`, redrawing while any first-layer pre-activation lies
/// within `margin` of the relu kink: a central difference straddling the kink
/// does not measure a derivative. Inputs lie in [0, 1), so a parameter step of
/// `h` moves a pre-activation by less than `h`.
fn composition_instance(seed: u64, margin: f64) -> Result<CompositionInstance> {
    for attempt in 0..1000u64 {
        let draw = seed ^ (attempt << 32);
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let images = [
            random(&[4, 8, 8], &mut rng, 0.0, 1.0)?,
            random(&[4, 8, 8], &mut rng, 0.0, 1.0)?,
        ];
        let gts = [
            random(&[8, 8], &mut rng, 0.0, 0.1)?,
            random(&[8, 8], &mut rng, 0.0, 0.1)?,
        ];
        let weights = [rng.gen_range(0.2..1.8), rng.gen_range(0.2..1.8)];
        let params = init_params(draw);
        let mut closest = f64::INFINITY;
        for img in &images {
            let z = tensor::add_channel_bias(&tensor::conv2d(img, &params.conv1_w, 1)?, &params.conv1_b)?;
            closest = z.data().iter().fold(closest, |m, v| m.min(v.abs()));
        }
        if closest > margin {
            return Ok(CompositionInstance {
                images,
                gts,
                weights,
                params,
            });
        }
    }
    Err(Error::Contract(format!("instance {seed}: every draw sits on a relu kink")))
}

/// Relative error of the full `batch_loss ∘ forward` gradient with respect
/// to every model parameter, on a batch of two random 8×8 images.
pub fn composition_error(seed: u64, kind: LossKind) -> Result<f64> {
    composition_error_with_step(seed, kind, COMPOSITION_STEP)
}

pub fn composition_error_with_step(seed: u64, kind: LossKind, h: f64) -> Result<f64> {
    let CompositionInstance {
        images,
        gts,
        weights,
        params,
    } = composition_instance(seed, h)?;
    let x = Tensor::new(vec![params.num_params()], params.flatten())?;
    grad_check(
        |flat| {
            let p = CounterParams::from_flat(flat.data())?;
            let caches = images
                .iter()
                .map(|img| forward_with_cache(&p, img))
                .collect::<Result<Vec<_>>>()?;
            let preds: Vec<Tensor> = caches.iter().map(|c| c.result.pred_density.clone()).collect();
            let loss = batch_loss_with_kind(&preds, &gts, &weights, kind, DEFAULT_ES_EPS)?;
            let mut total = CounterParams::zeros();
            for (c, g) in caches.iter().zip(&loss.grads) {
                total = total.add_scaled(&backward(&p, c, g)?, 1.0)?;
            }
            Ok((Tensor::scalar(loss.value)?, Tensor::new(vec![total.num_params()], total.flatten())?))
        },
        &x,
        h,
    )
}

fn gradient_suite(instances: u64) -> Result<(bool, String)> {
    let prims = primitive_errors(instances)?;
    let mut composed = 0.0_f64;
    for seed in 0..instances {
        let kind = if seed % 2 == 0 { LossKind::Fmse } else { LossKind::Mse };
        composed = composed.max(composition_error(seed, kind)?);
    }
    let worst = prims.iter().map(|p| p.1).fold(composed, f64::max);
    let detail = prims
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .chain(std::iter::once(format!("batch_loss∘forward {composed:.1e}")))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((worst < GRAD_TOLERANCE, detail))
}

/// Componentwise mean and worst simplex deviation of `samples` draws.
pub fn dirichlet_moments(alpha: [f64; 3], samples: usize, seed: u64) -> Result<([f64; 3], f64)> {
    let params = DirichletParams::new(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = [0.0; 3];
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let w = sample_dirichlet(&params, &mut rng).get();
        let total: f64 = w.iter().sum();
        worst = worst.max((total - 1.0).abs());
        if w.iter().any(|v| *v < 0.0) {
            worst = f64::INFINITY;
        }
        for k in 0..3 {
            mean[k] += w[k] / samples as f64;
        }
    }
    Ok((mean, worst))
}

fn dirichlet_suite(samples: usize, seed: u64) -> Result<(bool, String)> {
    let (mean, worst) = dirichlet_moments(DIRICHLET_ALPHA, samples, seed)?;
    let expected = DirichletParams::new(DIRICHLET_ALPHA)?.mean();
    let off = (0..3).map(|k| (mean[k] - expected[k]).abs()).fold(0.0, f64::max);
    Ok((
        off < 0.01 && worst <= 1e-12,
        format!(
            "mean [{:.4}, {:.4}, {:.4}], max deviation {off:.4}, simplex error {worst:.1e}",
            mean[0], mean[1], mean[2]
        ),
    ))
}

/// Per-pixel gradients `(focal_mse, mse)` at prediction `p` and target `g`.
pub fn pixel_gradients(p: f64, g: f64, fault: Option<Fault>) -> Result<(f64, f64)> {
    let pt = Tensor::new(vec![1, 1], vec![p])?;
    let gt = Tensor::new(vec![1, 1], vec![g])?;
    let mse = mse_loss(&pt, &gt)?.grad.data()[0];
    let fmse = match fault {
        Some(Fault::DropEsGradient) => mse,
        None => loss_for(LossKind::Fmse, &pt, &gt, DEFAULT_ES_EPS)?.grad.data()[0],
    };
    Ok((fmse, mse))
}

/// Grid points `(p, g)` where the Focal-MSE gradient fails to dominate.
pub fn dominance_violations(fault: Option<Fault>) -> Result<Vec<(f64, f64)>> {
    let mut bad = Vec::new();
    for i in 1..=99 {
        let p = i as f64 / 100.0;
        for g in [0.0, 1.0] {
            let (f, m) = pixel_gradients(p, g, fault)?;
            if !(f.abs() > m.abs() && f.signum() == m.signum()) {
                bad.push((p, g));
            }
        }
    }
    Ok(bad)
}

fn dominance_suite(fault: Option<Fault>) -> Result<(bool, String)> {
    let bad = dominance_violations(fault)?;
    Ok((bad.is_empty(), format!("{} violations on 198 grid points", bad.len())))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two equal lists of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("spearman of a constant list".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Rank correlations `(entropy, offset, inverted certainty)` against the
/// number of categories, over probe feature maps of a seeded corpus.
pub fn attribute_trends(seed: u64) -> Result<(f64, f64, f64)> {
    let scenes = generate_corpus(PROBE_SCENES, PROBE_FRACTION, seed)?;
    let mut ks = Vec::new();
    let mut attrs = Vec::new();
    for s in &scenes {
        ks.push(s.num_categories() as f64);
        attrs.push(RawAttributes::from_features(&probe_features(s)?, CertaintyNorm::Full)?);
    }
    let col = |f: fn(&RawAttributes) -> f64| attrs.iter().map(f).collect::<Vec<_>>();
    Ok((
        spearman(&col(|a| a.entropy), &ks)?,
        spearman(&col(|a| a.offset), &ks)?,
        spearman(&col(|a| a.inv_certainty), &ks)?,
    ))
}

fn attribute_suite(seed: u64) -> Result<(bool, String)> {
    // entropy grows with the number of half-on activations
    let mut entropy_ok = true;
    let mut prev = -1.0;
    for on in 0..=16 {
        let f = Tensor::from_fn(&[1, 4, 4], |i| if i < on { 0.5 } else { 0.0 })?;
        let e = compute_entropy(&f)?;
        entropy_ok &= e > prev;
        prev = e;
    }
    // offset grows as a single bump moves away from the centre column
    let mut offset_ok = true;
    prev = -1.0;
    for col in 4..8 {
        let f = Tensor::from_fn(&[1, 8, 8], |i| if i % 8 == col { 1.0 } else { 0.0 })?;
        let o = compute_offset(&f)?;
        offset_ok &= o > prev;
        prev = o;
    }
    // inverted certainty falls as activations strengthen
    let mut certainty_ok = true;
    prev = f64::INFINITY;
    for step in 1..=10 {
        let f = Tensor::full(&[2, 4, 4], step as f64 / 10.0);
        let c = compute_certainty(&f, CertaintyNorm::Full)?;
        certainty_ok &= c < prev;
        prev = c;
    }
    let (re, ro, rc) = attribute_trends(seed)?;
    let trends_ok = re > 0.5 && ro > 0.3;
    Ok((
        entropy_ok && offset_ok && certainty_ok && trends_ok,
        format!(
            "monotone entropy {entropy_ok}, offset {offset_ok}, certainty {certainty_ok}; \
             spearman vs K: entropy {re:.3}, offset {ro:.3}, inverted certainty {rc:.3}"
        ),
    ))
}
