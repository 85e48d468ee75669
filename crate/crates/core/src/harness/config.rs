use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::{Components, FederationConfig};

/// Training variant: the full method, the uniform-averaging baseline, or one
/// component removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Method {
    #[default]
    Fvlfp,
    FedavgBaseline,
    WithoutCdfp,
    WithoutDsop,
    WithoutFpf,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fvlfp,
        Method::FedavgBaseline,
        Method::WithoutCdfp,
        Method::WithoutDsop,
        Method::WithoutFpf,
    ];

    pub fn components(self) -> Components {
        let all = Components::ALL;
        match self {
            Method::Fvlfp => all,
            Method::FedavgBaseline => Components::NONE,
            Method::WithoutCdfp => Components { cdfp: false, ..all },
            Method::WithoutDsop => Components { dsop: false, ..all },
            Method::WithoutFpf => Components { fpf: false, ..all },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Fvlfp => "fvlfp",
            Method::FedavgBaseline => "fedavg_baseline",
            Method::WithoutCdfp => "w/o-cdfp",
            Method::WithoutDsop => "w/o-dsop",
            Method::WithoutFpf => "w/o-fpf",
        }
    }

    /// Name usable as a directory component.
    pub fn slug(self) -> String {
        self.name().replace('/', "")
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || m.slug() == s)
            .ok_or_else(|| Error::Config {
                field: "method".into(),
                msg: format!(
                    "unknown method `{s}`; expected one of {}",
                    Method::ALL.map(Method::name).join(", ")
                ),
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic data recipe and split sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub label_signal: f64,
    pub group_signal: f64,
    pub spurious_strength: f64,
    pub noise_sigma: f64,
    pub label_jitter: f64,
    pub label_dropout: f64,
    /// Fraction of each client's shard kept out of training; the cross-client
    /// gap is measured on it.
    pub client_holdout: f64,
    /// Directory with `train.txt`, `val.txt` and `test.txt`; synthetic data
    /// is generated when unset.
    pub data_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 4000,
            val_size: 200,
            test_size: 400,
            label_signal: 0.5,
            group_signal: 0.2,
            spurious_strength: 0.8,
            noise_sigma: 0.15,
            label_jitter: 0.0,
            label_dropout: 0.3,
            client_holdout: 0.4,
            data_dir: None,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub method: Method,
    pub seed: u64,
    pub clients: usize,
    pub alpha: f64,
    pub data: DataConfig,
    /// Federation hyperparameters; `components` and `seed` are overwritten
    /// from `method` and `seed` when a run starts.
    pub fed: FederationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            method: Method::Fvlfp,
            seed: 0,
            clients: 5,
            alpha: 0.5,
            data: DataConfig::default(),
            fed: FederationConfig {
                adamw: crate::numerics::AdamWConfig {
                    lr: 2e-4,
                    ..Default::default()
                },
                ..FederationConfig::default()
            },
        }
    }
}

fn field_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

fn parse_value<T: FromStr>(field: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| field_err(field, format!("cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(field_err(field, format!("expected `true` or `false`, got `{v}`"))),
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "method",
    "seed",
    "clients",
    "alpha",
    "rounds",
    "local_epochs",
    "local_steps",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "mu",
    "lambda1",
    "k",
    "task_loss",
    "bias_metric",
    "lambda2",
    "refine_steps",
    "refine_lr",
    "refine_per_cell",
    "fglobal_cap",
    "compounding",
    "task",
    "attribute",
    "dim",
    "layers",
    "heads",
    "image_height",
    "image_width",
    "patch_height",
    "patch_width",
    "prompt_tokens",
    "mlp_ratio",
    "temperature",
    "encoder_seed",
    "train_size",
    "val_size",
    "test_size",
    "label_signal",
    "group_signal",
    "spurious_strength",
    "noise_sigma",
    "label_jitter",
    "label_dropout",
    "client_holdout",
    "data_dir",
];

impl Config {
    /// Sets one field from its textual form. Range checks happen in
    /// [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let f = &mut self.fed;
        let e = &mut f.encoder;
        let d = &mut self.data;
        match key {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "clients" => self.clients = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "rounds" => f.rounds = parse_value(key, v)?,
            "local_epochs" => f.local_epochs = parse_value(key, v)?,
            "local_steps" => {
                f.local_steps = match v {
                    "none" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "batch_size" => f.batch_size = parse_value(key, v)?,
            "lr" => f.adamw.lr = parse_value(key, v)?,
            "beta1" => f.adamw.beta1 = parse_value(key, v)?,
            "beta2" => f.adamw.beta2 = parse_value(key, v)?,
            "eps" => f.adamw.eps = parse_value(key, v)?,
            "weight_decay" => f.adamw.weight_decay = parse_value(key, v)?,
            "mu" => f.mu = parse_value(key, v)?,
            "lambda1" => f.lambda1 = parse_value(key, v)?,
            "k" => f.k = parse_value(key, v)?,
            "task_loss" => f.task_variant = v.parse().map_err(|e: Error| field_err(key, e.to_string()))?,
            "bias_metric" => f.bias_metric = v.parse().map_err(|e: Error| field_err(key, e.to_string()))?,
            "lambda2" => f.lambda2 = parse_value(key, v)?,
            "refine_steps" => f.refine_steps = parse_value(key, v)?,
            "refine_lr" => f.refine_lr = parse_value(key, v)?,
            "refine_per_cell" => f.refine_per_cell = parse_value(key, v)?,
            "fglobal_cap" => f.fglobal_cap = parse_value(key, v)?,
            "compounding" => f.compounding = parse_bool(key, v)?,
            "task" => f.task = v.to_string(),
            "attribute" => f.attribute = v.to_string(),
            "dim" => e.dim = parse_value(key, v)?,
            "layers" => e.layers = parse_value(key, v)?,
            "heads" => e.heads = parse_value(key, v)?,
            "image_height" => e.image_height = parse_value(key, v)?,
            "image_width" => e.image_width = parse_value(key, v)?,
            "patch_height" => e.patch_height = parse_value(key, v)?,
            "patch_width" => e.patch_width = parse_value(key, v)?,
            "prompt_tokens" => e.prompt_tokens = parse_value(key, v)?,
            "mlp_ratio" => e.mlp_ratio = parse_value(key, v)?,
            "temperature" => e.temperature = parse_value(key, v)?,
            "encoder_seed" => e.seed = parse_value(key, v)?,
            "train_size" => d.train_size = parse_value(key, v)?,
            "val_size" => d.val_size = parse_value(key, v)?,
            "test_size" => d.test_size = parse_value(key, v)?,
            "label_signal" => d.label_signal = parse_value(key, v)?,
            "group_signal" => d.group_signal = parse_value(key, v)?,
            "spurious_strength" => d.spurious_strength = parse_value(key, v)?,
            "noise_sigma" => d.noise_sigma = parse_value(key, v)?,
            "label_jitter" => d.label_jitter = parse_value(key, v)?,
            "label_dropout" => d.label_dropout = parse_value(key, v)?,
            "client_holdout" => d.client_holdout = parse_value(key, v)?,
            "data_dir" => d.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(field_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Textual value of one key, as written by [`to_text`](Self::to_text).
    pub fn get(&self, key: &str) -> Option<String> {
        let f = &self.fed;
        let e = &f.encoder;
        let d = &self.data;
        Some(match key {
            "method" => self.method.to_string(),
            "seed" => self.seed.to_string(),
            "clients" => self.clients.to_string(),
            "alpha" => self.alpha.to_string(),
            "rounds" => f.rounds.to_string(),
            "local_epochs" => f.local_epochs.to_string(),
            "local_steps" => f.local_steps.map_or("none".into(), |s| s.to_string()),
            "batch_size" => f.batch_size.to_string(),
            "lr" => f.adamw.lr.to_string(),
            "beta1" => f.adamw.beta1.to_string(),
            "beta2" => f.adamw.beta2.to_string(),
            "eps" => f.adamw.eps.to_string(),
            "weight_decay" => f.adamw.weight_decay.to_string(),
            "mu" => f.mu.to_string(),
            "lambda1" => f.lambda1.to_string(),
            "k" => f.k.to_string(),
            "task_loss" => f.task_variant.to_string(),
            "bias_metric" => f.bias_metric.to_string(),
            "lambda2" => f.lambda2.to_string(),
            "refine_steps" => f.refine_steps.to_string(),
            "refine_lr" => f.refine_lr.to_string(),
            "refine_per_cell" => f.refine_per_cell.to_string(),
            "fglobal_cap" => f.fglobal_cap.to_string(),
            "compounding" => f.compounding.to_string(),
            "task" => f.task.clone(),
            "attribute" => f.attribute.clone(),
            "dim" => e.dim.to_string(),
            "layers" => e.layers.to_string(),
            "heads" => e.heads.to_string(),
            "image_height" => e.image_height.to_string(),
            "image_width" => e.image_width.to_string(),
            "patch_height" => e.patch_height.to_string(),
            "patch_width" => e.patch_width.to_string(),
            "prompt_tokens" => e.prompt_tokens.to_string(),
            "mlp_ratio" => e.mlp_ratio.to_string(),
            "temperature" => e.temperature.to_string(),
            "encoder_seed" => e.seed.to_string(),
            "train_size" => d.train_size.to_string(),
            "val_size" => d.val_size.to_string(),
            "test_size" => d.test_size.to_string(),
            "label_signal" => d.label_signal.to_string(),
            "group_signal" => d.group_signal.to_string(),
            "spurious_strength" => d.spurious_strength.to_string(),
            "noise_sigma" => d.noise_sigma.to_string(),
            "label_jitter" => d.label_jitter.to_string(),
            "label_dropout" => d.label_dropout.to_string(),
            "client_holdout" => d.client_holdout.to_string(),
            "data_dir" => d
                .data_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` lines without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.fed;
        let d = &self.data;
        let check = |ok: bool, field: &str, msg: String| if ok { Ok(()) } else { Err(field_err(field, msg)) };
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", format!("must be > 0, got {}", self.alpha))?;
        check(f.k >= 1, "k", format!("must be >= 1, got {}", f.k))?;
        check(self.clients >= 1, "clients", "must be >= 1".into())?;
        check(f.batch_size >= 1, "batch_size", "must be >= 1".into())?;
        check(f.adamw.lr > 0.0, "lr", format!("must be > 0, got {}", f.adamw.lr))?;
        check(f.refine_lr > 0.0, "refine_lr", format!("must be > 0, got {}", f.refine_lr))?;
        check((0.0..1.0).contains(&f.mu), "mu", format!("must lie in [0, 1), got {}", f.mu))?;
        check(f.lambda1 >= 0.0, "lambda1", format!("must be >= 0, got {}", f.lambda1))?;
        check(f.lambda2 >= 0.0, "lambda2", format!("must be >= 0, got {}", f.lambda2))?;
        check(f.refine_per_cell >= 1, "refine_per_cell", "must be >= 1".into())?;
        check(f.encoder.prompt_tokens >= 1, "prompt_tokens", "must be >= 1".into())?;
        check(f.local_steps != Some(0), "local_steps", "use `none` for no cap, or a positive count".into())?;
        check(
            f.k < f.encoder.dim,
            "k",
            format!("must be below the embedding width {}", f.encoder.dim),
        )?;
        for (field, n) in [("val_size", d.val_size), ("test_size", d.test_size)] {
            check(n > 0 && n % 4 == 0, field, format!("must be a positive multiple of 4, got {n}"))?;
        }
        check(
            d.train_size >= self.clients,
            "train_size",
            format!("{} samples cannot fill {} clients", d.train_size, self.clients),
        )?;
        check(
            (0.0..=1.0).contains(&d.spurious_strength),
            "spurious_strength",
            format!("must lie in [0, 1], got {}", d.spurious_strength),
        )?;
        check(d.noise_sigma >= 0.0, "noise_sigma", "must be >= 0".into())?;
        for (field, v) in [("label_jitter", d.label_jitter), ("label_dropout", d.label_dropout)] {
            check((0.0..=1.0).contains(&v), field, format!("must lie in [0, 1], got {v}"))?;
        }
        check(
            (0.0..0.5).contains(&d.client_holdout),
            "client_holdout",
            format!("must lie in [0, 0.5), got {}", d.client_holdout),
        )?;
        for (field, v) in [("label_signal", d.label_signal), ("group_signal", d.group_signal)] {
            check(v.is_finite(), field, "must be finite".into())?;
        }
        f.encoder
            .validate()
            .map_err(|e| field_err("encoder", e.to_string()))?;
        self.federation()
            .validate()
            .map_err(|e| field_err("federation", e.to_string()))
    }

    /// Federation settings for this run.
    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            components: self.method.components(),
            seed: self.seed,
            ..self.fed.clone()
        }
    }

    /// Canonical `key=value` text; re-parses to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("every listed key has a value");
            writeln!(out, "{key}={v}").expect("writing to a String");
        }
        out
    }

    /// Hex sha256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.clients, 5);
        assert_eq!(c.fed.batch_size, 16);
        assert_eq!(c.fed.adamw.lr, 2e-4);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.fed.mu, 0.3);
        assert_eq!(c.fed.lambda1, 1.0);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut c = Config::parse("# header\n\nrounds = 50  # many\nmethod=w/o-dsop\n").unwrap();
        assert_eq!(c.fed.rounds, 50);
        assert_eq!(c.method, Method::WithoutDsop);
        c.set("rounds", "10").unwrap();
        assert_eq!(c.fed.rounds, 10);
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = Config::parse("alpha=-1").unwrap_err().to_string();
        assert!(err.contains("alpha") && err.contains("> 0"), "{err}");
        let err = Config::parse("k=0").unwrap_err().to_string();
        assert!(err.contains("`k`"), "{err}");
        let err = Config::parse("gamma=3").unwrap_err().to_string();
        assert!(err.contains("gamma") && err.contains("unknown"), "{err}");
        assert!(matches!(Config::parse("rounds"), Err(Error::Parse { line: 1, .. })));
        assert!(Config::parse("rounds=ten").is_err());
        assert!(Config::parse("method=fedprox").is_err());
        assert!(Config::parse("test_size=402").is_err());
        assert!(Config::parse("compounding=yes").is_err());
        assert!(Config::parse("client_holdout=0.5").is_err());
        assert!(Config::parse("label_dropout=1.5").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = Config::default();
        for (k, v) in [
            ("alpha", "0.1"),
            ("lr", "0.0005"),
            ("local_steps", "none"),
            ("method", "fedavg_baseline"),
            ("label_signal", "0.123456789012345"),
            ("data_dir", "/tmp/some dir"),
            ("bias_metric", "phi_demo"),
            ("task_loss", "strict"),
        ] {
            c.set(k, v).unwrap();
        }
        let text = c.to_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.to_text(), text);
        assert_eq!(text.lines().count(), KEYS.len());
        assert_ne!(Config::default().hash(), c.hash());
    }

    #[test]
    fn methods_map_to_components() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(m.slug().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::FedavgBaseline.components(), Components::NONE);
        let c = Method::WithoutFpf.components();
        assert!(c.cdfp && c.dsop && !c.fpf);
        let cfg = Config {
            method: Method::WithoutCdfp,
            seed: 9,
            ..Config::default()
        };
        assert!(!cfg.federation().components.cdfp);
        assert_eq!(cfg.federation().seed, 9);
    }
}
