//! Experiment configuration and its `key = value` text format.
//!
//! Keys are exactly the [`ExperimentConfig`] field names. Blank lines and
//! lines starting with `#` are ignored. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::attributes::{AttributeNormalization, CertaintyNorm};
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_ES_EPS, DEFAULT_SWITCH_EPOCH};

/// How per-image attribute weights are mixed into `U_C`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Weighting {
    /// Fresh Dirichlet draw per step, epoch or run.
    #[default]
    Dirichlet,
    Entropy,
    Offset,
    Certainty,
    /// Fixed equal weights.
    Average,
}

/// When the Dirichlet mixture weights are redrawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DirichletCadence {
    #[default]
    Step,
    Epoch,
    Run,
}

/// Parameter update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Optimizer {
    Sgd,
    /// Adam moments with decoupled weight decay.
    #[default]
    AdamW,
}

/// Which curriculum phases apply `U_C`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WeightPhase {
    #[default]
    Both,
    /// Only from `switch_epoch_t` on.
    Late,
}

macro_rules! keyword_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($name),+].join(", ")
                    )),
                }
            }
        }

        impl $ty {
            pub fn keyword(&self) -> &'static str {
                $(if *self == $variant { return $name; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Weighting {
    "dirichlet" => Weighting::Dirichlet,
    "entropy" => Weighting::Entropy,
    "offset" => Weighting::Offset,
    "certainty" => Weighting::Certainty,
    "average" => Weighting::Average,
});

keyword_enum!(DirichletCadence {
    "step" => DirichletCadence::Step,
    "epoch" => DirichletCadence::Epoch,
    "run" => DirichletCadence::Run,
});

keyword_enum!(Optimizer {
    "sgd" => Optimizer::Sgd,
    "adamw" => Optimizer::AdamW,
});

keyword_enum!(WeightPhase {
    "both" => WeightPhase::Both,
    "late" => WeightPhase::Late,
});

keyword_enum!(CertaintyNorm {
    "spatial" => CertaintyNorm::Spatial,
    "full" => CertaintyNorm::Full,
});

keyword_enum!(AttributeNormalization {
    "minmax" => AttributeNormalization::MinMax,
    "none" => AttributeNormalization::None,
});

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Training corpus size.
    pub n: usize,
    pub single_category_fraction: f64,
    pub epochs: usize,
    pub switch_epoch_t: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Decoupled decay for `adamw`; ignored by `sgd`.
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Epoch at whose start the learning rate is multiplied by the decay
    /// factor. Values `>= epochs` disable decay.
    pub lr_decay_epoch: usize,
    pub alpha: [f64; 3],
    pub corpus_seed: u64,
    pub init_seed: u64,
    pub dirichlet_seed: u64,
    pub use_uc: bool,
    pub use_es: bool,
    pub use_mse: bool,
    pub weighting: Weighting,
    pub dirichlet_cadence: DirichletCadence,
    pub weight_phase: WeightPhase,
    pub weight_mean_one: bool,
    pub certainty_norm: CertaintyNorm,
    pub attribute_normalization: AttributeNormalization,
    pub es_clamp_eps: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 512,
            single_category_fraction: 0.9,
            epochs: 60,
            switch_epoch_t: DEFAULT_SWITCH_EPOCH,
            batch_size: 16,
            optimizer: Optimizer::AdamW,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            lr_decay_factor: 0.33,
            lr_decay_epoch: 20,
            alpha: [1.0, 1.0, 1.0],
            corpus_seed: 1,
            init_seed: 2,
            dirichlet_seed: 3,
            use_uc: true,
            use_es: true,
            use_mse: true,
            weighting: Weighting::Dirichlet,
            dirichlet_cadence: DirichletCadence::Step,
            weight_phase: WeightPhase::Both,
            weight_mean_one: true,
            certainty_norm: CertaintyNorm::Full,
            attribute_normalization: AttributeNormalization::MinMax,
            es_clamp_eps: DEFAULT_ES_EPS,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const CONFIG_KEYS: [&str; 25] = [
    "n",
    "single_category_fraction",
    "epochs",
    "switch_epoch_t",
    "batch_size",
    "optimizer",
    "learning_rate",
    "weight_decay",
    "lr_decay_factor",
    "lr_decay_epoch",
    "alpha",
    "corpus_seed",
    "init_seed",
    "dirichlet_seed",
    "use_uc",
    "use_es",
    "use_mse",
    "weighting",
    "dirichlet_cadence",
    "weight_phase",
    "weight_mean_one",
    "certainty_norm",
    "attribute_normalization",
    "es_clamp_eps",
    "output_dir",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_alpha(raw: &str) -> Result<[f64; 3]> {
    let inner = raw
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::config("alpha", format!("expected `[a1, a2, a3]`, got `{raw}`")))?;
    let values: Vec<f64> = inner
        .split(',')
        .map(|v| parse_value::<f64>("alpha", v.trim()))
        .collect::<Result<_>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| Error::config("alpha", format!("expected 3 values, got {}", v.len())))
}

impl ExperimentConfig {
    /// Applies a single `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "n" => self.n = parse_value(key, raw)?,
            "single_category_fraction" => self.single_category_fraction = parse_value(key, raw)?,
            "epochs" => self.epochs = parse_value(key, raw)?,
            "switch_epoch_t" => self.switch_epoch_t = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "optimizer" => self.optimizer = parse_value(key, raw)?,
            "learning_rate" => self.learning_rate = parse_value(key, raw)?,
            "weight_decay" => self.weight_decay = parse_value(key, raw)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_value(key, raw)?,
            "lr_decay_epoch" => self.lr_decay_epoch = parse_value(key, raw)?,
            "alpha" => self.alpha = parse_alpha(raw)?,
            "corpus_seed" => self.corpus_seed = parse_value(key, raw)?,
            "init_seed" => self.init_seed = parse_value(key, raw)?,
            "dirichlet_seed" => self.dirichlet_seed = parse_value(key, raw)?,
            "use_uc" => self.use_uc = parse_value(key, raw)?,
            "use_es" => self.use_es = parse_value(key, raw)?,
            "use_mse" => self.use_mse = parse_value(key, raw)?,
            "weighting" => self.weighting = parse_value(key, raw)?,
            "dirichlet_cadence" => self.dirichlet_cadence = parse_value(key, raw)?,
            "weight_phase" => self.weight_phase = parse_value(key, raw)?,
            "weight_mean_one" => self.weight_mean_one = parse_value(key, raw)?,
            "certainty_norm" => self.certainty_norm = parse_value(key, raw)?,
            "attribute_normalization" => self.attribute_normalization = parse_value(key, raw)?,
            "es_clamp_eps" => self.es_clamp_eps = parse_value(key, raw)?,
            "output_dir" => self.output_dir = PathBuf::from(raw),
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected `key = value`"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: String| Err(Error::config(key, reason));
        if self.n == 0 {
            return fail("n", "corpus size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.single_category_fraction) {
            return fail(
                "single_category_fraction",
                format!("{} outside [0, 1]", self.single_category_fraction),
            );
        }
        if self.switch_epoch_t > self.epochs {
            return fail(
                "switch_epoch_t",
                format!("{} exceeds epochs = {}", self.switch_epoch_t, self.epochs),
            );
        }
        if self.batch_size == 0 || self.batch_size > self.n {
            return fail(
                "batch_size",
                format!("{} must be in 1..={}", self.batch_size, self.n),
            );
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate", format!("{} must be positive", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay", format!("{} must be non-negative", self.weight_decay));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return fail(
                "lr_decay_factor",
                format!("{} must be positive", self.lr_decay_factor),
            );
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return fail("alpha", format!("{:?} must be positive", self.alpha));
        }
        if !(self.use_es || self.use_mse) {
            return fail("use_mse", "at least one of use_mse and use_es must be true".into());
        }
        if !(self.es_clamp_eps > 0.0 && self.es_clamp_eps < 0.5) {
            return fail("es_clamp_eps", format!("{} outside (0, 0.5)", self.es_clamp_eps));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("n", self.n.to_string());
        put("single_category_fraction", self.single_category_fraction.to_string());
        put("epochs", self.epochs.to_string());
        put("switch_epoch_t", self.switch_epoch_t.to_string());
        put("batch_size", self.batch_size.to_string());
        put("optimizer", self.optimizer.keyword().into());
        put("learning_rate", self.learning_rate.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("lr_decay_factor", self.lr_decay_factor.to_string());
        put("lr_decay_epoch", self.lr_decay_epoch.to_string());
        put(
            "alpha",
            format!("[{}, {}, {}]", self.alpha[0], self.alpha[1], self.alpha[2]),
        );
        put("corpus_seed", self.corpus_seed.to_string());
        put("init_seed", self.init_seed.to_string());
        put("dirichlet_seed", self.dirichlet_seed.to_string());
        put("use_uc", self.use_uc.to_string());
        put("use_es", self.use_es.to_string());
        put("use_mse", self.use_mse.to_string());
        put("weighting", self.weighting.keyword().into());
        put("dirichlet_cadence", self.dirichlet_cadence.keyword().into());
        put("weight_phase", self.weight_phase.keyword().into());
        put("weight_mean_one", self.weight_mean_one.to_string());
        put("certainty_norm", self.certainty_norm.keyword().into());
        put(
            "attribute_normalization",
            self.attribute_normalization.keyword().into(),
        );
        put("es_clamp_eps", self.es_clamp_eps.to_string());
        put("output_dir", self.output_dir.display().to_string());
        s
    }

    /// Short hex digest of [`Self::to_text`].
    pub fn hash(&self) -> String {
        digest(&self.to_text())
    }

    /// Digest of everything that influences training, i.e. all keys except
    /// `output_dir`.
    pub fn training_fingerprint(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("output_dir"))
            .collect::<Vec<_>>()
            .join("\n");
        digest(&text)
    }

    /// Sets all three seeds from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.corpus_seed = seed;
        self.init_seed = seed.wrapping_add(1);
        self.dirichlet_seed = seed.wrapping_add(2);
    }
}

fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}
