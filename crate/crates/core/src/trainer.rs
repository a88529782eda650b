//! Seeded SGD training of the toy counter with attribute-weighted losses and
//! the dual-phase curriculum, plus the ablation matrix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attributes::{
    combine_unchecked, combine_weight, normalize_attributes, sample_dirichlet,
    AttributeNormalization, DirichletParams, RawAttributes, WeightVector,
};
use crate::config::{DirichletCadence, ExperimentConfig, Optimizer, WeightPhase, Weighting};
use crate::error::{Error, Result};
use crate::losses::{batch_loss_with_kind, select_loss, CurriculumPolicy, LossKind};
use crate::metrics::EvalReport;
use crate::model::{backward, forward, forward_with_cache, init_params, predict_count, CounterParams, ForwardResult};
use crate::synthgen::{derive_seed, generate_corpus, Scene};

const EVAL_SEED_TAG: u64 = 0xE7A1;
const SHUFFLE_SEED_TAG: u64 = 0x5117;
/// Multi-category fraction of the held-out set, independent of training.
const EVAL_SINGLE_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_kind: LossKind,
    pub train_loss: f64,
    pub mean_uc: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_leakage: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAINLOG_HEADER: &str = "epoch,loss_kind,train_loss,mean_uc,val_mae,val_rmse,val_leakage";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAINLOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
                r.epoch, r.loss_kind, r.train_loss, r.mean_uc, r.val_mae, r.val_rmse, r.val_leakage
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let err = |line: usize, reason: String| Error::Parse {
            path: name.clone(),
            line,
            reason,
        };
        let mut records = Vec::new();
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if i == 0 {
                if line.trim() != TRAINLOG_HEADER {
                    return Err(err(lineno, format!("expected header `{TRAINLOG_HEADER}`")));
                }
                saw_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err(lineno, format!("expected 7 fields, got {}", f.len())));
            }
            let real = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(lineno, format!("bad number `{s}`")))
            };
            records.push(EpochRecord {
                epoch: f[0]
                    .trim()
                    .parse()
                    .map_err(|_| err(lineno, format!("bad epoch `{}`", f[0])))?,
                loss_kind: f[1]
                    .trim()
                    .parse()
                    .map_err(|e: Error| err(lineno, e.to_string()))?,
                train_loss: real(f[2])?,
                mean_uc: real(f[3])?,
                val_mae: real(f[4])?,
                val_rmse: real(f[5])?,
                val_leakage: real(f[6])?,
            });
        }
        if !saw_header {
            return Err(err(1, "empty file".into()));
        }
        if records.is_empty() {
            return Err(err(2, "log has no records".into()));
        }
        Ok(Self { records })
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameter update state for one run.
#[derive(Clone, Debug)]
pub struct UpdateRule {
    kind: Optimizer,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl UpdateRule {
    pub fn new(kind: Optimizer, weight_decay: f64, num_params: usize) -> Self {
        Self {
            kind,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &CounterParams, grad: &CounterParams, lr: f64) -> Result<CounterParams> {
        match self.kind {
            Optimizer::Sgd => params.add_scaled(grad, -lr),
            Optimizer::AdamW => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                let mut flat = params.flatten();
                let g = grad.flatten();
                for i in 0..flat.len() {
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    flat[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * flat[i]);
                }
                CounterParams::from_flat(&flat)
            }
        }
    }
}

/// Which per-image loss a run uses at each epoch, derived from the
/// `use_mse` / `use_es` flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSchedule {
    MseOnly,
    EsOnly,
    Curriculum(CurriculumPolicy),
}

impl LossSchedule {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        match (config.use_mse, config.use_es) {
            (true, true) => LossSchedule::Curriculum(CurriculumPolicy {
                switch_epoch: config.switch_epoch_t,
            }),
            (false, true) => LossSchedule::EsOnly,
            _ => LossSchedule::MseOnly,
        }
    }

    pub fn kind_at(&self, epoch: usize) -> LossKind {
        match self {
            LossSchedule::MseOnly => LossKind::Mse,
            LossSchedule::EsOnly => LossKind::Es,
            LossSchedule::Curriculum(p) => select_loss(p, epoch),
        }
    }
}

/// Computes the raw attributes of one forward pass.
pub type AttributeFn = dyn Fn(&ForwardResult) -> Result<RawAttributes> + Sync;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub params: CounterParams,
    /// Evaluation of the returned parameters on the held-out set.
    pub final_eval: EvalReport,
}

/// Learning rate in effect during `epoch`: decayed once, from
/// `lr_decay_epoch` on.
pub fn learning_rate_at(config: &ExperimentConfig, epoch: usize) -> f64 {
    if epoch >= config.lr_decay_epoch {
        config.learning_rate * config.lr_decay_factor
    } else {
        config.learning_rate
    }
}

/// Held-out scenes: a quarter of `n` (at least 2), half of them multi-category,
/// from a seed disjoint from the training corpus.
pub fn eval_corpus(config: &ExperimentConfig) -> Result<Vec<Scene>> {
    let size = ((config.n as f64) / 4.0).round().max(2.0) as usize;
    generate_corpus(size, EVAL_SINGLE_FRACTION, derive_seed(config.corpus_seed, EVAL_SEED_TAG))
}

pub fn evaluate(params: &CounterParams, scenes: &[Scene]) -> Result<EvalReport> {
    let preds = scenes
        .par_iter()
        .map(|s| predict_count(&forward(params, &s.image)?.pred_density))
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_predictions(scenes, &preds)
}

fn mixing_weights(
    config: &ExperimentConfig,
    params: &DirichletParams,
    rng: &mut ChaCha8Rng,
) -> WeightVector {
    match config.weighting {
        Weighting::Dirichlet => sample_dirichlet(params, rng),
        Weighting::Entropy => WeightVector::vertex(0),
        Weighting::Offset => WeightVector::vertex(1),
        Weighting::Certainty => WeightVector::vertex(2),
        Weighting::Average => WeightVector::uniform(),
    }
}

/// Per-image loss weights for one batch. With `weight_mean_one` the weights
/// are rescaled to batch mean 1; a batch of equal weights becomes all ones.
fn uc_weights(
    config: &ExperimentConfig,
    raw: &[RawAttributes],
    w: &WeightVector,
) -> Result<Vec<f64>> {
    let triples = normalize_attributes(raw, config.attribute_normalization)?;
    let mut weights = triples
        .iter()
        .map(|t| match config.attribute_normalization {
            AttributeNormalization::MinMax => combine_weight(t, w),
            AttributeNormalization::None => Ok(combine_unchecked(t.normalized(), w)),
        })
        .collect::<Result<Vec<f64>>>()?;
    if config.weight_mean_one {
        let first = weights[0];
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        if weights.iter().all(|&u| u == first) || mean <= 0.0 {
            weights.iter_mut().for_each(|u| *u = 1.0);
        } else {
            weights.iter_mut().for_each(|u| *u /= mean);
        }
    }
    Ok(weights)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<TrainOutcome> {
    let norm = config.certainty_norm;
    run_experiment_with(config, &move |fr: &ForwardResult| {
        RawAttributes::from_features(&fr.features, norm)
    })
}

/// [`run_experiment`] with a caller-supplied attribute extractor.
pub fn run_experiment_with(config: &ExperimentConfig, attributes: &AttributeFn) -> Result<TrainOutcome> {
    config.validate()?;
    let train = generate_corpus(config.n, config.single_category_fraction, config.corpus_seed)?;
    let held_out = eval_corpus(config)?;
    let schedule = LossSchedule::from_config(config);
    let dirichlet = DirichletParams::new(config.alpha)?;
    let mut dir_rng = ChaCha8Rng::seed_from_u64(config.dirichlet_seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.corpus_seed, SHUFFLE_SEED_TAG));
    let mut params = init_params(config.init_seed);
    let mut rule = UpdateRule::new(config.optimizer, config.weight_decay, params.num_params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut run_w = None;
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let lr = learning_rate_at(config, epoch);
        let kind = schedule.kind_at(epoch);
        let weighted = config.use_uc
            && match config.weight_phase {
                WeightPhase::Both => true,
                WeightPhase::Late => epoch >= config.switch_epoch_t,
            };
        order.shuffle(&mut shuffle_rng);
        let mut epoch_w = None;
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let caches = chunk
                .par_iter()
                .map(|&i| forward_with_cache(&params, &train[i].image))
                .collect::<Result<Vec<_>>>()?;
            let weights = if weighted {
                let w = match config.dirichlet_cadence {
                    DirichletCadence::Step => mixing_weights(config, &dirichlet, &mut dir_rng),
                    DirichletCadence::Epoch => *epoch_w
                        .get_or_insert_with(|| mixing_weights(config, &dirichlet, &mut dir_rng)),
                    DirichletCadence::Run => *run_w
                        .get_or_insert_with(|| mixing_weights(config, &dirichlet, &mut dir_rng)),
                };
                let raw = caches
                    .par_iter()
                    .map(|c| attributes(&c.result))
                    .collect::<Result<Vec<_>>>()?;
                uc_weights(config, &raw, &w)?
            } else {
                vec![1.0; chunk.len()]
            };
            let preds: Vec<_> = caches.iter().map(|c| c.result.pred_density.clone()).collect();
            let gts: Vec<_> = chunk.iter().map(|&i| train[i].gt_density.clone()).collect();
            let diverged = |loss: f64| Error::Divergence { epoch, step, loss };
            let loss = batch_loss_with_kind(&preds, &gts, &weights, kind, config.es_clamp_eps)
                .map_err(|_| diverged(f64::NAN))?;
            if !loss.value.is_finite() {
                return Err(diverged(loss.value));
            }
            let grads = caches
                .par_iter()
                .zip(&loss.grads)
                .map(|(c, g)| backward(&params, c, g))
                .collect::<Result<Vec<_>>>()
                .map_err(|_| diverged(loss.value))?;
            let mut total = CounterParams::zeros();
            for g in &grads {
                total = total.add_scaled(g, 1.0).map_err(|_| diverged(loss.value))?;
            }
            params = rule.step(&params, &total, lr).map_err(|_| diverged(loss.value))?;
            loss_sum += loss.value;
            weight_sum += weights.iter().sum::<f64>();
            batches += 1;
            step += 1;
        }

        let eval = evaluate(&params, &held_out)?;
        log.records.push(EpochRecord {
            epoch,
            loss_kind: kind,
            train_loss: loss_sum / batches as f64,
            mean_uc: weight_sum / train.len() as f64,
            val_mae: eval.mae,
            val_rmse: eval.rmse,
            val_leakage: eval.leakage,
        });
    }
    let final_eval = evaluate(&params, &held_out)?;
    Ok(TrainOutcome {
        log,
        params,
        final_eval,
    })
}

/// Writes `trainlog.csv`, `config.txt` and `checkpoint.bin` into the
/// configured output directory.
pub fn write_outputs(config: &ExperimentConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    outcome.log.write_csv(&dir.join("trainlog.csv"))?;
    std::fs::write(dir.join("config.txt"), config.to_text())?;
    outcome.params.save(&dir.join("checkpoint.bin"))?;
    Ok(())
}

/// One named configuration of the ablation matrix.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub config: ExperimentConfig,
}

/// The four loss/weighting component rows followed by the five attribute
/// weighting variants.
pub fn ablation_rows(base: &ExperimentConfig) -> Vec<AblationRow> {
    let row = |name: &'static str, mse: bool, es: bool, uc: bool, weighting: Weighting| {
        let mut config = base.clone();
        config.use_mse = mse;
        config.use_es = es;
        config.use_uc = uc;
        config.weighting = weighting;
        config.output_dir = base.output_dir.join(name);
        AblationRow { name, config }
    };
    vec![
        row("mse", true, false, false, Weighting::Dirichlet),
        row("es", false, true, false, Weighting::Dirichlet),
        row("es_uc", false, true, true, Weighting::Dirichlet),
        row("full", true, true, true, Weighting::Dirichlet),
        row("u1_entropy", true, true, true, Weighting::Entropy),
        row("u2_offset", true, true, true, Weighting::Offset),
        row("u3_certainty", true, true, true, Weighting::Certainty),
        row("average", true, true, true, Weighting::Average),
        row("dirichlet", true, true, true, Weighting::Dirichlet),
    ]
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub config_hash: String,
    pub eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub name: &'static str,
    /// Training fingerprint, so tables from different output dirs compare equal.
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationResult {
    pub fn summary(&self, metric: fn(&EvalReport) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self.seeds.iter().map(|s| metric(&s.eval)).collect();
        mean_std(&values)
    }
}

/// Config of `row` for seed index `s`: every seed is offset from the base.
pub fn seeded(config: &ExperimentConfig, s: u64) -> ExperimentConfig {
    let mut c = config.clone();
    c.corpus_seed = config.corpus_seed.wrapping_add(s);
    c.init_seed = config.init_seed.wrapping_add(s);
    c.dirichlet_seed = config.dirichlet_seed.wrapping_add(s);
    c.output_dir = config.output_dir.join(format!("seed{s}"));
    c
}

/// Runs every ablation row for `seeds` seeds. Rows whose training settings
/// coincide share one run per seed.
pub fn run_ablation_matrix(base: &ExperimentConfig, seeds: u64) -> Result<Vec<AblationResult>> {
    let mut cache: HashMap<String, EvalReport> = HashMap::new();
    let mut results = Vec::new();
    for row in ablation_rows(base) {
        let mut seed_results = Vec::new();
        for s in 0..seeds {
            let config = seeded(&row.config, s);
            let key = config.training_fingerprint();
            let eval = match cache.get(&key) {
                Some(e) => e.clone(),
                None => {
                    let outcome = run_experiment(&config)?;
                    cache.insert(key, outcome.final_eval.clone());
                    outcome.final_eval
                }
            };
            seed_results.push(SeedResult {
                seed: s,
                config_hash: config.training_fingerprint(),
                eval,
            });
        }
        results.push(AblationResult {
            name: row.name,
            config_hash: row.config.training_fingerprint(),
            seeds: seed_results,
        });
    }
    Ok(results)
}

pub const ABLATION_HEADER: &str =
    "row,config_hash,seeds,mae_mean,mae_std,rmse_mean,rmse_std,leakage_mean,leakage_std";

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in results {
        let (mm, ms) = r.summary(|e| e.mae);
        let (rm, rs) = r.summary(|e| e.rmse);
        let (lm, ls) = r.summary(|e| e.leakage);
        let _ = writeln!(
            s,
            "{},{},{},{mm:.6},{ms:.6},{rm:.6},{rs:.6},{lm:.6},{ls:.6}",
            r.name,
            r.config_hash,
            r.seeds.len()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n: 12,
            epochs: 3,
            switch_epoch_t: 2,
            batch_size: 4,
            lr_decay_epoch: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn schedule_follows_flags() {
        let mut c = tiny();
        assert_eq!(LossSchedule::from_config(&c).kind_at(0), LossKind::Fmse);
        assert_eq!(LossSchedule::from_config(&c).kind_at(2), LossKind::Mse);
        c.use_mse = false;
        assert_eq!(LossSchedule::from_config(&c).kind_at(0), LossKind::Es);
        c.use_mse = true;
        c.use_es = false;
        assert_eq!(LossSchedule::from_config(&c).kind_at(0), LossKind::Mse);
    }

    #[test]
    fn equal_weights_collapse_to_ones() {
        let c = tiny();
        let raw = vec![
            RawAttributes {
                entropy: 1.0,
                offset: 2.0,
                inv_certainty: 0.3,
            };
            5
        ];
        let w = uc_weights(&c, &raw, &WeightVector::new([0.2, 0.3, 0.5]).unwrap()).unwrap();
        assert_eq!(w, vec![1.0; 5]);
    }

    #[test]
    fn mean_one_rescaling() {
        let c = tiny();
        let raw: Vec<RawAttributes> = (0..4)
            .map(|i| RawAttributes {
                entropy: i as f64,
                offset: 0.0,
                inv_certainty: 0.0,
            })
            .collect();
        let w = uc_weights(&c, &raw, &WeightVector::vertex(0)).unwrap();
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn training_log_shape_and_determinism() {
        let c = tiny();
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.params, b.params);
        let kinds: Vec<LossKind> = a.log.records.iter().map(|r| r.loss_kind).collect();
        assert_eq!(kinds, vec![LossKind::Fmse, LossKind::Fmse, LossKind::Mse]);
    }

    #[test]
    fn zero_epochs_keeps_initial_model() {
        let mut c = tiny();
        c.epochs = 0;
        c.switch_epoch_t = 0;
        let out = run_experiment(&c).unwrap();
        assert!(out.log.records.is_empty());
        assert_eq!(out.params, init_params(c.init_seed));
        let init_eval = evaluate(&init_params(c.init_seed), &eval_corpus(&c).unwrap()).unwrap();
        assert_eq!(out.final_eval, init_eval);
    }

    #[test]
    fn ablation_rows_are_distinct() {
        let rows = ablation_rows(&ExperimentConfig::default());
        assert_eq!(rows.len(), 9);
        let mut hashes: Vec<String> = rows.iter().map(|r| r.config.hash()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 9);
    }

    #[test]
    fn trainlog_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let out = run_experiment(&tiny()).unwrap();
        out.log.write_csv(&path).unwrap();
        let back = TrainLog::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 3);
        assert_eq!(back.to_csv(), out.log.to_csv());
        std::fs::write(&path, format!("{TRAINLOG_HEADER}\n0,MSE,1,1,1,1\n")).unwrap();
        let err = TrainLog::read_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        std::fs::write(&path, format!("{TRAINLOG_HEADER}\n")).unwrap();
        assert!(TrainLog::read_csv(&path).is_err());
    }
}
