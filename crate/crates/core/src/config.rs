//! Hyperparameters, ablation switches and the flat `key=value` config format.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got `{content}`")]
    Syntax { line: usize, content: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// How the edge confidence enters the Concrete relaxation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateInput {
    /// The sigmoid output `w` itself is added to the logistic noise.
    Prob,
    /// The pre-sigmoid activation, i.e. `logit(w)`, is used.
    Logit,
}

/// Which per-behavior representation feeds the HSIC bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HsicRepr {
    /// Deepest propagated layer of each stack.
    Last,
    /// Layer-mean readout.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// Layer-0 inputs are the raw shared embeddings, no global encoder.
    NoGlobal,
    /// Gates fixed at 1 and no bottleneck term.
    NoIb,
    /// No contrastive term.
    NoInfonce,
    /// Both `NoIb` and `NoInfonce`.
    BothOff,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoGlobal,
        Ablation::NoIb,
        Ablation::NoInfonce,
        Ablation::BothOff,
    ];

    pub fn uses_global(self) -> bool {
        self != Ablation::NoGlobal
    }

    pub fn uses_gates(self) -> bool {
        !matches!(self, Ablation::NoIb | Ablation::BothOff)
    }

    pub fn uses_ib(self) -> bool {
        self.uses_gates()
    }

    pub fn uses_infonce(self) -> bool {
        !matches!(self, Ablation::NoInfonce | Ablation::BothOff)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::NoGlobal => "-Global",
            Ablation::NoIb => "-IB",
            Ablation::NoInfonce => "-Infonce",
            Ablation::BothOff => "-Both",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoGlobal => "no_global",
            Ablation::NoIb => "no_ib",
            Ablation::NoInfonce => "no_infonce",
            Ablation::BothOff => "both_off",
        })
    }
}

impl FromStr for Ablation {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "none" => Ablation::None,
            "no_global" => Ablation::NoGlobal,
            "no_ib" => Ablation::NoIb,
            "no_infonce" => Ablation::NoInfonce,
            "both_off" => Ablation::BothOff,
            _ => return Err(()),
        })
    }
}

impl fmt::Display for GateInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateInput::Prob => "prob",
            GateInput::Logit => "logit",
        })
    }
}

impl FromStr for GateInput {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "prob" => Ok(GateInput::Prob),
            "logit" => Ok(GateInput::Logit),
            _ => Err(()),
        }
    }
}

impl fmt::Display for HsicRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HsicRepr::Last => "last",
            HsicRepr::Mean => "mean",
        })
    }
}

impl FromStr for HsicRepr {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "last" => Ok(HsicRepr::Last),
            "mean" => Ok(HsicRepr::Mean),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub dim: usize,
    /// Propagation layers of the global encoder.
    pub global_layers: usize,
    /// Stack depth of target/auxiliary encoders, counting layer 0.
    pub domain_layers: usize,
    /// Bottleneck weight.
    pub beta: f64,
    /// Contrastive weight.
    pub lambda: f64,
    /// Squared-L2 weight.
    pub gamma: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Concrete relaxation temperature.
    pub concrete_temp: f64,
    /// RBF kernel bandwidth.
    pub rbf_sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub hsic_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_cutoffs: Vec<usize>,
    pub gate_input: GateInput,
    pub hsic_repr: HsicRepr,
    /// Standard deviation of the initial embeddings and MLP weights.
    pub init_std: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            dim: 64,
            global_layers: 2,
            domain_layers: 2,
            beta: 1.0,
            lambda: 0.1,
            gamma: 1e-5,
            tau: 0.2,
            concrete_temp: 0.5,
            rbf_sigma: 0.25,
            lr: 0.001,
            batch_size: 1024,
            hsic_batch: 1024,
            epochs: 50,
            seed: 0,
            eval_cutoffs: vec![10, 20],
            gate_input: GateInput::Prob,
            hsic_repr: HsicRepr::Last,
            init_std: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if !(1..=4).contains(&self.global_layers) || !(1..=4).contains(&self.domain_layers) {
            return bad("layer counts must be in 1..=4");
        }
        if !(self.tau > 0.0 && self.concrete_temp > 0.0 && self.rbf_sigma > 0.0) {
            return bad("tau, concrete_temp and rbf_sigma must be positive");
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0 && self.gamma >= 0.0) {
            return bad("beta, lambda and gamma must be non-negative");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive");
        }
        if self.hsic_batch < 2 {
            return bad("hsic_batch must be at least 2");
        }
        if self.eval_cutoffs.is_empty() || self.eval_cutoffs.contains(&0) {
            return bad("eval_cutoffs must be non-empty positive integers");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hyper: Hyperparams,
    pub ablation: Ablation,
    /// Evaluate on the validation carve-out every this many epochs; 0 disables
    /// validation and trains on every training edge.
    pub eval_every: usize,
    /// Non-improving evaluations tolerated before stopping; 0 never stops early.
    pub early_stop_patience: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: Hyperparams::default(),
            ablation: Ablation::None,
            eval_every: 5,
            early_stop_patience: 5,
            checkpoint_dir: None,
        }
    }
}

/// Documented config keys, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("dim", "embedding dimension"),
    ("global_layers", "global encoder propagation layers (1-4)"),
    ("domain_layers", "target/auxiliary stack depth counting layer 0 (1-4)"),
    ("beta", "bottleneck (HSIC) loss weight"),
    ("lambda", "contrastive loss weight"),
    ("gamma", "squared-L2 weight"),
    ("tau", "InfoNCE temperature"),
    ("concrete_temp", "Concrete relaxation temperature"),
    ("rbf_sigma", "RBF kernel bandwidth"),
    ("lr", "Adam learning rate"),
    ("batch_size", "positives per batch"),
    ("hsic_batch", "max nodes sampled for the HSIC term"),
    ("epochs", "training epochs"),
    ("seed", "RNG seed"),
    ("eval_cutoffs", "comma-separated K list"),
    ("gate_input", "prob | logit"),
    ("hsic_repr", "last | mean"),
    ("init_std", "initial parameter standard deviation"),
    ("ablation", "none | no_global | no_ib | no_infonce | both_off"),
    ("eval_every", "validation interval in epochs (0 = off)"),
    ("early_stop_patience", "non-improving validations before stopping (0 = off)"),
    ("checkpoint_dir", "where checkpoints are written"),
];

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                content: raw.to_string(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.hyper.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        let h = &mut self.hyper;
        match key {
            "dim" => h.dim = p(key, value)?,
            "global_layers" => h.global_layers = p(key, value)?,
            "domain_layers" => h.domain_layers = p(key, value)?,
            "beta" => h.beta = p(key, value)?,
            "lambda" => h.lambda = p(key, value)?,
            "gamma" => h.gamma = p(key, value)?,
            "tau" => h.tau = p(key, value)?,
            "concrete_temp" => h.concrete_temp = p(key, value)?,
            "rbf_sigma" => h.rbf_sigma = p(key, value)?,
            "lr" => h.lr = p(key, value)?,
            "batch_size" => h.batch_size = p(key, value)?,
            "hsic_batch" => h.hsic_batch = p(key, value)?,
            "epochs" => h.epochs = p(key, value)?,
            "seed" => h.seed = p(key, value)?,
            "eval_cutoffs" => {
                h.eval_cutoffs = value
                    .split(',')
                    .map(|s| p::<usize>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "gate_input" => h.gate_input = p(key, value)?,
            "hsic_repr" => h.hsic_repr = p(key, value)?,
            "init_std" => h.init_std = p(key, value)?,
            "ablation" => self.ablation = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "early_stop_patience" => self.early_stop_patience = p(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Serializes to the same `key=value` format, one key per line.
    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let cutoffs: Vec<String> = h.eval_cutoffs.iter().map(usize::to_string).collect();
        let mut lines = vec![
            format!("dim={}", h.dim),
            format!("global_layers={}", h.global_layers),
            format!("domain_layers={}", h.domain_layers),
            format!("beta={:?}", h.beta),
            format!("lambda={:?}", h.lambda),
            format!("gamma={:?}", h.gamma),
            format!("tau={:?}", h.tau),
            format!("concrete_temp={:?}", h.concrete_temp),
            format!("rbf_sigma={:?}", h.rbf_sigma),
            format!("lr={:?}", h.lr),
            format!("batch_size={}", h.batch_size),
            format!("hsic_batch={}", h.hsic_batch),
            format!("epochs={}", h.epochs),
            format!("seed={}", h.seed),
            format!("eval_cutoffs={}", cutoffs.join(",")),
            format!("gate_input={}", h.gate_input),
            format!("hsic_repr={}", h.hsic_repr),
            format!("init_std={:?}", h.init_std),
            format!("ablation={}", self.ablation),
            format!("eval_every={}", self.eval_every),
            format!("early_stop_patience={}", self.early_stop_patience),
        ];
        if let Some(dir) = &self.checkpoint_dir {
            lines.push(format!("checkpoint_dir={}", dir.display()));
        }
        lines.join("\n") + "\n"
    }

    pub fn effective_beta(&self) -> f64 {
        if self.ablation.uses_ib() {
            self.hyper.beta
        } else {
            0.0
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.uses_infonce() {
            self.hyper.lambda
        } else {
            0.0
        }
    }
}
