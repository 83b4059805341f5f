//! Flat `key=value` run configuration.
//!
//! Values come from an optional config file and are overridden by the
//! same-named command-line flags (`phase1_epochs` in a file, `--phase1-epochs`
//! on the command line). Keys are resolved lazily by each command, so only the
//! keys a command uses need to parse.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use autotask::data::SyntheticSpec;
use autotask::model::ModelConfig;
use autotask::optim::AdamConfig;
use autotask::train::TrainPlan;
use autotask::Variant;
use serde_json::{json, Value};

use crate::error::CliError;

macro_rules! config_flags {
    ($($field:ident),* $(,)?) => {
        /// One optional flag per configuration key.
        #[derive(clap::Args, Clone, Debug, Default)]
        #[command(next_help_heading = "Configuration keys")]
        pub struct ConfigFlags {
            $(
                #[arg(long, value_name = "VALUE")]
                pub $field: Option<String>,
            )*
        }

        impl ConfigFlags {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $( if let Some(v) = &self.$field { out.push((stringify!($field), v.as_str())); } )*
                out
            }
        }

        /// Every key accepted in a config file.
        pub const KEYS: &[&str] = &["seed", $(stringify!($field)),*];
    };
}

config_flags!(
    // synthetic data
    n_tasks,
    d_raw,
    task_rows,
    rows_per_task,
    alpha,
    beta,
    noise,
    conflict_pairs,
    unseen_tasks,
    unseen_shared_rule,
    train_frac,
    calibration_frac,
    // model
    e1,
    e2,
    heads1,
    heads2,
    fusion_hidden,
    layers,
    variant,
    init_std,
    // training
    phase1_epochs,
    phase2_epochs,
    batch_size,
    block_len,
    lr,
    beta1,
    beta2,
    eps,
    lr_facet1,
    lr_facet2,
    eval_every,
    // paths
    data,
    checkpoint,
);

/// Merged configuration: file values overridden by flags.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl RunConfig {
    pub fn load(file: Option<&Path>, flags: &ConfigFlags, seed: Option<u64>) -> Result<Self, CliError> {
        let mut values = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                parse_file(path, &text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in flags.pairs() {
            values.insert(k.to_string(), v.to_string());
        }
        if let Some(seed) = seed {
            values.insert("seed".into(), seed.to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &'static str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|raw| raw.parse::<T>().map_err(|e| CliError::key(key, format!("{raw:?}: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &'static str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_or("seed", 0)
    }

    pub fn path(&self, key: &'static str) -> Option<PathBuf> {
        self.values.get(key).map(PathBuf::from)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let base = SyntheticSpec::default();
        let n_tasks = self.get_or("n_tasks", base.n_tasks)?;
        let unseen_tasks = self.get_or("unseen_tasks", base.unseen_tasks)?;
        let total = n_tasks + unseen_tasks;
        let task_rows = if let Some(list) = self.values.get("task_rows") {
            parse_list(list).map_err(|e| CliError::key("task_rows", e))?
        } else if let Some(r) = self.get::<usize>("rows_per_task")? {
            vec![r; total]
        } else {
            // Same shape as the default corpus: task 3 down-sampled.
            let mut rows = vec![2000; total];
            if total >= 3 {
                rows[2] = 200;
            }
            rows
        };
        let conflict_pairs = match self.values.get("conflict_pairs") {
            Some(s) => parse_pairs(s).map_err(|e| CliError::key("conflict_pairs", e))?,
            None => Vec::new(),
        };
        Ok(SyntheticSpec {
            n_tasks,
            d_raw: self.get_or("d_raw", base.d_raw)?,
            task_rows,
            alpha: self.get_or("alpha", base.alpha)?,
            beta: self.get_or("beta", base.beta)?,
            noise: self.get_or("noise", base.noise)?,
            conflict_pairs,
            unseen_tasks,
            unseen_shared_rule: self.get_or("unseen_shared_rule", base.unseen_shared_rule)?,
            train_frac: self.get_or("train_frac", base.train_frac)?,
            calibration_frac: self.get_or("calibration_frac", base.calibration_frac)?,
            seed: self.seed()?,
        })
    }

    pub fn train_plan(&self) -> Result<TrainPlan, CliError> {
        let base = TrainPlan::default();
        let adam = AdamConfig::default();
        let plan = TrainPlan {
            phase1_epochs: self.get_or("phase1_epochs", base.phase1_epochs)?,
            phase2_epochs: self.get_or("phase2_epochs", base.phase2_epochs)?,
            batch_size: self.get_or("batch_size", base.batch_size)?,
            block_len: self.get_or("block_len", base.block_len)?,
            seed: self.seed()?,
            adam: AdamConfig {
                lr: self.get_or("lr", adam.lr)?,
                beta1: self.get_or("beta1", adam.beta1)?,
                beta2: self.get_or("beta2", adam.beta2)?,
                eps: self.get_or("eps", adam.eps)?,
            },
            lr_facet1: self.get("lr_facet1")?,
            lr_facet2: self.get("lr_facet2")?,
            eval_every: self.get_or("eval_every", base.eval_every)?,
        };
        plan.validate().map_err(autotask::Error::from)?;
        Ok(plan)
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        match self.values.get("variant") {
            None => Ok(Variant::Full),
            Some(v) => Variant::parse(v).ok_or_else(|| {
                CliError::key("variant", format!("{v:?} is not one of full, task_id_number, no_task_id"))
            }),
        }
    }

    /// Model configuration for `d` inputs (features plus ID column) and
    /// `n_tasks` trained tasks. `e2` is derived as `d·e1`; an explicit `e2`
    /// must agree.
    pub fn model_config(&self, d: usize, n_tasks: usize) -> Result<ModelConfig, CliError> {
        let e1 = self.get_or("e1", 4)?;
        let mut config = ModelConfig::new(d, n_tasks, e1, self.get_or("block_len", TrainPlan::default().block_len)?)
            .with_variant(self.variant()?);
        if let Some(e2) = self.get("e2")? {
            config.e2 = e2;
        }
        config.heads1 = self.get_or("heads1", config.heads1)?;
        config.heads2 = self.get_or("heads2", config.heads2)?;
        config.fusion_hidden = self.get_or("fusion_hidden", config.e2)?;
        config.layers = self.get_or("layers", config.layers)?;
        config.init_std = self.get_or("init_std", config.init_std)?;
        config.validate().map_err(autotask::Error::from)?;
        Ok(config)
    }

    /// The raw merged values, for embedding in reports.
    pub fn to_json(&self) -> Value {
        json!(self.values)
    }
}

fn parse_file(path: &Path, text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| CliError::ConfigFile {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
        let key = normalize(k);
        if !KEYS.contains(&key.as_str()) {
            return Err(err(format!("unknown key {key:?}")));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

/// `"1:2,3:4"` → `[(1, 2), (3, 4)]`.
fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| format!("{p:?} is not of the form i:j"))?;
            let a = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
            let b = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
            Ok((a, b))
        })
        .collect()
}
