//! Run configuration: a TOML file flattened to dotted keys, plus
//! `key=value` overrides.
//!
//! Every key is optional and falls back to the default shown by
//! `hexagan keys`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hexagan::data::LoadOptions;
use hexagan::eval::{Protocol, SweepAxis};
use hexagan::losses::{CriticBalance, Regularizer};
use hexagan::networks::InitScheme;
use hexagan::trainer::TrainConfig;
use hexagan::HexaError;
use toml::Value;

type Result<T> = std::result::Result<T, HexaError>;

fn bad(msg: impl Into<String>) -> HexaError {
    HexaError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub missing_token: String,
    /// `raw=merged` label pairs.
    pub merge: Vec<(String, String)>,
    /// Class name scored by F1; minority of each training fold when unset.
    pub positive_class: Option<String>,
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        let mut opts = LoadOptions::new(self.label_column.clone());
        opts.missing_token = self.missing_token.clone();
        opts.class_merge = self.merge.iter().cloned().collect();
        opts
    }

    pub fn require_path(&self) -> Result<&Path> {
        self.path.as_deref().ok_or_else(|| bad("data.path is not set"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptConfig {
    pub missing_rate: f64,
    pub label_missing_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<f64>,
    /// Ablation row names, or `all`.
    pub ablation: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub corrupt: CorruptConfig,
    pub train: TrainConfig,
    /// Fraction of observed training cells hidden and scored every epoch.
    pub probe_rate: f64,
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let protocol = Protocol::default();
        Self {
            data: DataConfig {
                path: None,
                label_column: "label".to_string(),
                missing_token: "NA".to_string(),
                merge: Vec::new(),
                positive_class: None,
            },
            corrupt: CorruptConfig {
                missing_rate: protocol.missing_rate,
                label_missing_rate: protocol.label_missing_rate,
                seed: 0,
            },
            train: TrainConfig::default(),
            probe_rate: 0.0,
            experiment: ExperimentConfig {
                folds: protocol.folds,
                repeats: protocol.repeats,
                seed: protocol.seed,
                sweep_axis: None,
                sweep_values: Vec::new(),
                ablation: vec!["all".to_string()],
            },
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Accepted keys with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("data.path", "CSV file with a header row"),
    ("data.label_column", "name of the class column"),
    ("data.missing_token", "cell text that marks a missing value"),
    ("data.merge", "list of \"raw=merged\" label renames"),
    ("data.positive_class", "class scored by F1 (default: training-fold minority)"),
    ("corrupt.missing_rate", "MCAR element rate in [0,1)"),
    ("corrupt.label_missing_rate", "label removal rate in [0,1)"),
    ("corrupt.seed", "seed for `corrupt` masks"),
    ("train.epochs", "passes over the training rows"),
    ("train.batch_size", "rows per batch (>= 2)"),
    ("train.learning_rate", "RMSProp step size"),
    ("train.decay", "RMSProp decay"),
    ("train.epsilon", "RMSProp epsilon"),
    ("train.n_critic", "critic updates per generator update"),
    ("train.n_cg", "conditional-generation rounds per batch"),
    ("train.d_z", "noise width of the conditional generator (default: feature count)"),
    ("train.seed", "training seed"),
    ("train.init", "he | xavier"),
    ("train.use_imputation", "train E, G_MI and D_MI"),
    ("train.use_conditional", "train G_CG and D_CG and balance classifier batches"),
    ("train.use_label_unit", "label unit of D_MI and pseudo-label term of C"),
    ("train.critic_sees_conditional", "feed generated rows to D_MI as fake"),
    ("train.penalize_label_unit", "include the label unit in the D_MI penalty"),
    ("train.checkpoint_every", "epochs between checkpoints (0: final only)"),
    ("train.export_hidden", "write encoded and generated hidden vectors every epoch"),
    ("train.probe_rate", "fraction of observed cells held out and scored each epoch"),
    ("loss.lambda1", "D_MI penalty weight"),
    ("loss.lambda2", "D_CG penalty weight"),
    ("loss.alpha1", "reconstruction weight"),
    ("loss.alpha2", "G_CG element-wise adversarial weight"),
    ("loss.alpha3", "G_CG cross-entropy weight"),
    ("loss.alpha4", "classifier pseudo-label weight"),
    ("loss.regularizer", "zero_centered | standard_gp | weight_clip"),
    ("loss.clip", "weight-clip bound"),
    ("loss.critic_balance", "per_unit | joint"),
    ("experiment.folds", "k of k-fold cross-validation"),
    ("experiment.repeats", "independent corruption and split repeats"),
    ("experiment.seed", "master seed of the protocol"),
    ("experiment.sweep_axis", "quantity varied by `sweep`"),
    ("experiment.sweep_values", "list of values for the sweep axis"),
    ("experiment.ablation", "\"all\" or list of ablation row names"),
    ("output.dir", "directory for all artifacts"),
];

/// Flattens nested tables into dotted keys.
fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses the value half of an override; bare words become strings.
pub fn parse_override(assignment: &str) -> Result<(String, Value)> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("override '{assignment}' is not of the form key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(format!("{key} must be a number"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(format!("{key} must be a non-negative integer"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(bad(format!("{key} must be a non-negative integer"))),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(format!("{key} must be true or false")))
}

fn as_string(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        _ => Err(bad(format!("{key} must be a string"))),
    }
}

fn as_list<T>(key: &str, v: &Value, item: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    match v {
        Value::Array(a) => a.iter().map(|x| item(key, x)).collect(),
        single => Ok(vec![item(key, single)?]),
    }
}

fn parse_with<T: std::str::FromStr<Err = HexaError>>(key: &str, v: &Value) -> Result<T> {
    as_string(key, v)?.parse()
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut flat = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| bad(format!("cannot read config {}: {e}", p.display())))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| bad(format!("{}: {e}", p.display())))?;
            flatten("", &table, &mut flat);
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            flat.insert(k, v);
        }
        Self::from_flat(&flat)
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (key, v) in flat {
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.train;
        let w = &mut t.weights;
        match key {
            "data.path" => self.data.path = Some(PathBuf::from(as_string(key, v)?)),
            "data.label_column" => self.data.label_column = as_string(key, v)?,
            "data.missing_token" => self.data.missing_token = as_string(key, v)?,
            "data.merge" => {
                self.data.merge = as_list(key, v, |k, x| {
                    let s = as_string(k, x)?;
                    let (raw, merged) = s
                        .split_once('=')
                        .ok_or_else(|| bad(format!("{k} entries look like \"raw=merged\", got '{s}'")))?;
                    Ok((raw.trim().to_string(), merged.trim().to_string()))
                })?
            }
            "data.positive_class" => self.data.positive_class = Some(as_string(key, v)?),
            "corrupt.missing_rate" => self.corrupt.missing_rate = as_f64(key, v)?,
            "corrupt.label_missing_rate" => self.corrupt.label_missing_rate = as_f64(key, v)?,
            "corrupt.seed" => self.corrupt.seed = as_u64(key, v)?,
            "train.epochs" => t.epochs = as_usize(key, v)?,
            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.learning_rate" => t.learning_rate = as_f64(key, v)?,
            "train.decay" => t.decay = as_f64(key, v)?,
            "train.epsilon" => t.epsilon = as_f64(key, v)?,
            "train.n_critic" => t.n_critic = as_usize(key, v)?,
            "train.n_cg" => t.n_cg = as_usize(key, v)?,
            "train.d_z" => t.d_z = Some(as_usize(key, v)?),
            "train.seed" => t.seed = as_u64(key, v)?,
            "train.init" => t.init = parse_with::<InitScheme>(key, v)?,
            "train.use_imputation" => t.use_imputation = as_bool(key, v)?,
            "train.use_conditional" => t.use_conditional = as_bool(key, v)?,
            "train.use_label_unit" => t.use_label_unit = as_bool(key, v)?,
            "train.critic_sees_conditional" => t.critic_sees_conditional = as_bool(key, v)?,
            "train.penalize_label_unit" => t.penalize_label_unit = as_bool(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = as_usize(key, v)?,
            "train.export_hidden" => t.export_hidden = as_bool(key, v)?,
            "train.probe_rate" => self.probe_rate = as_f64(key, v)?,
            "loss.lambda1" => w.lambda1 = as_f64(key, v)?,
            "loss.lambda2" => w.lambda2 = as_f64(key, v)?,
            "loss.alpha1" => w.alpha1 = as_f64(key, v)?,
            "loss.alpha2" => w.alpha2 = as_f64(key, v)?,
            "loss.alpha3" => w.alpha3 = as_f64(key, v)?,
            "loss.alpha4" => w.alpha4 = as_f64(key, v)?,
            "loss.regularizer" => w.regularizer = parse_with::<Regularizer>(key, v)?,
            "loss.clip" => w.clip = as_f64(key, v)?,
            "loss.critic_balance" => w.critic_balance = parse_with::<CriticBalance>(key, v)?,
            "experiment.folds" => self.experiment.folds = as_usize(key, v)?,
            "experiment.repeats" => self.experiment.repeats = as_usize(key, v)?,
            "experiment.seed" => self.experiment.seed = as_u64(key, v)?,
            "experiment.sweep_axis" => self.experiment.sweep_axis = Some(parse_with::<SweepAxis>(key, v)?),
            "experiment.sweep_values" => self.experiment.sweep_values = as_list(key, v, as_f64)?,
            "experiment.ablation" => self.experiment.ablation = as_list(key, v, as_string)?,
            "output.dir" => self.output_dir = PathBuf::from(as_string(key, v)?),
            other => return Err(bad(format!("unknown key '{other}' (see `hexagan keys`)"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("corrupt.missing_rate", self.corrupt.missing_rate),
            ("corrupt.label_missing_rate", self.corrupt.label_missing_rate),
            ("train.probe_rate", self.probe_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(bad(format!("{name} must lie in [0,1), got {r}")));
            }
        }
        self.train.validate()?;
        self.protocol().validate()
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            folds: self.experiment.folds,
            repeats: self.experiment.repeats,
            missing_rate: self.corrupt.missing_rate,
            label_missing_rate: self.corrupt.label_missing_rate,
            seed: self.experiment.seed,
            positive_class: None,
        }
    }
}
