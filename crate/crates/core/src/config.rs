// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a comment. Keys are case-sensitive and may appear once.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chain::TaskKind;
use crate::counterfactual::FilterConfig;
use crate::error::{Error, Result};
use crate::mock::{Regime, RegimeKind};
use crate::probe::ProbeConfig;
use crate::stats::BootstrapConfig;
use crate::taskgen::GenConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Traces,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantMode {
    Corruption,
    Paraphrase,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsaMode {
    Windowed,
    StepTerminal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub n: usize,
    pub seed: u64,
    pub chain_length: Option<usize>,
    pub dyck_bracket_types: usize,
    pub gsm8k_path: Option<PathBuf>,
    pub eval_fraction: f64,

    pub backend: Backend,
    pub traces_path: Option<PathBuf>,
    pub ppl_path: Option<PathBuf>,
    pub ppl_filter: bool,
    pub model: Option<String>,

    pub regime: RegimeKind,
    pub noise_scale: f64,
    pub interference: f64,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub horizon_fraction: f64,
    pub base_margin: f64,

    pub max_token_delta: i64,
    pub ppl_ratio_max: Option<f64>,
    pub max_variants_per_sample: usize,
    pub include_premise: bool,
    pub variants: VariantMode,

    pub condition_on_correct: bool,
    pub rsa_mode: RsaMode,
    pub window: usize,
    pub bootstrap_b: usize,
    pub bootstrap_seed: u64,
    pub ci_level: f64,

    pub probe: bool,
    pub probe_c: f64,
    pub probe_seed: u64,
    pub probe_test_fraction: f64,
    pub probe_max_iter: usize,
    pub probe_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let regime = Regime::new(RegimeKind::Faithful, 42);
        let probe = ProbeConfig::default();
        let boot = BootstrapConfig::default();
        let filter = FilterConfig::default();
        Self {
            task: TaskKind::Dyck,
            n: 200,
            seed: 42,
            chain_length: None,
            dyck_bracket_types: 4,
            gsm8k_path: None,
            eval_fraction: 0.5,
            backend: Backend::Mock,
            traces_path: None,
            ppl_path: None,
            ppl_filter: true,
            model: None,
            regime: regime.kind,
            noise_scale: regime.noise_scale,
            interference: regime.interference,
            hidden_dim: regime.d,
            n_layers: regime.n_layers,
            horizon_fraction: regime.horizon_fraction,
            base_margin: regime.base_margin,
            max_token_delta: filter.max_token_delta,
            ppl_ratio_max: None,
            max_variants_per_sample: filter.max_variants_per_sample,
            include_premise: filter.include_premise,
            variants: VariantMode::Corruption,
            condition_on_correct: true,
            rsa_mode: RsaMode::Windowed,
            window: crate::metrics::DEFAULT_WINDOW,
            bootstrap_b: boot.b,
            bootstrap_seed: boot.seed,
            ci_level: boot.level,
            probe: true,
            probe_c: probe.c,
            probe_seed: probe.seed,
            probe_test_fraction: probe.test_fraction,
            probe_max_iter: probe.max_iter,
            probe_tol: probe.tol,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e: T::Err| Error::Config(format!("{key}: cannot parse `{raw}`: {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{raw}`"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if raw == "none" || raw.is_empty() {
        Ok(None)
    } else {
        parse_value(key, raw).map(Some)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    lineno + 1,
                    e.to_string().trim_start_matches("invalid configuration: ")
                ))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => self.task = parse_value(key, v)?,
            "n" => self.n = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "chain_length" => self.chain_length = parse_optional(key, v)?,
            "dyck_bracket_types" => self.dyck_bracket_types = parse_value(key, v)?,
            "gsm8k_path" => self.gsm8k_path = parse_optional(key, v)?,
            "eval_fraction" => self.eval_fraction = parse_value(key, v)?,
            "backend" => {
                self.backend = match v {
                    "mock" => Backend::Mock,
                    "traces" => Backend::Traces,
                    _ => return Err(Error::Config(format!("{key}: expected mock or traces, got `{v}`"))),
                }
            }
            "traces" => self.traces_path = parse_optional(key, v)?,
            "ppl_file" => self.ppl_path = parse_optional(key, v)?,
            "ppl_filter" => self.ppl_filter = parse_bool(key, v)?,
            "model" => self.model = parse_optional(key, v)?,
            "regime" => self.regime = parse_value(key, v)?,
            "noise_scale" => self.noise_scale = parse_value(key, v)?,
            "interference" => self.interference = parse_value(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, v)?,
            "n_layers" => self.n_layers = parse_value(key, v)?,
            "horizon_fraction" => self.horizon_fraction = parse_value(key, v)?,
            "base_margin" => self.base_margin = parse_value(key, v)?,
            "max_token_delta" => self.max_token_delta = parse_value(key, v)?,
            "ppl_ratio_max" => self.ppl_ratio_max = parse_optional(key, v)?,
            "max_variants_per_sample" => self.max_variants_per_sample = parse_value(key, v)?,
            "include_premise" => self.include_premise = parse_bool(key, v)?,
            "variants" => {
                self.variants = match v {
                    "corruption" => VariantMode::Corruption,
                    "paraphrase" => VariantMode::Paraphrase,
                    "both" => VariantMode::Both,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected corruption, paraphrase or both, got `{v}`"
                        )))
                    }
                }
            }
            "condition_on_correct" => self.condition_on_correct = parse_bool(key, v)?,
            "rsa_mode" => {
                self.rsa_mode = match v {
                    "windowed" => RsaMode::Windowed,
                    "step-terminal" => RsaMode::StepTerminal,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected windowed or step-terminal, got `{v}`"
                        )))
                    }
                }
            }
            "window" => self.window = parse_value(key, v)?,
            "bootstrap_b" => self.bootstrap_b = parse_value(key, v)?,
            "bootstrap_seed" => self.bootstrap_seed = parse_value(key, v)?,
            "ci_level" => self.ci_level = parse_value(key, v)?,
            "probe" => self.probe = parse_bool(key, v)?,
            "probe_c" => self.probe_c = parse_value(key, v)?,
            "probe_seed" => self.probe_seed = parse_value(key, v)?,
            "probe_test_fraction" => self.probe_test_fraction = parse_value(key, v)?,
            "probe_max_iter" => self.probe_max_iter = parse_value(key, v)?,
            "probe_tol" => self.probe_tol = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.filter_config().validate()?;
        self.bootstrap_config().validate()?;
        if self.backend == Backend::Mock {
            self.mock_regime().validate()?;
        }
        if self.backend == Backend::Traces && self.traces_path.is_none() {
            return Err(Error::Config("backend = traces needs a `traces` path".into()));
        }
        if self.backend == Backend::Traces && self.ppl_filter && self.ppl_path.is_none() {
            return Err(Error::Config(
                "backend = traces needs `ppl_file` for the perplexity filter, or `ppl_filter = false`".into(),
            ));
        }
        if self.task == TaskKind::Gsm8k && self.gsm8k_path.is_none() {
            return Err(Error::Config("task = gsm8k needs `gsm8k_path`".into()));
        }
        if self.task == TaskKind::Gsm8k && self.variants != VariantMode::Corruption {
            return Err(Error::Config(
                "gsm8k has no paraphrase templates; use variants = corruption".into(),
            ));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config("eval_fraction must be in (0,1)".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(self.probe_c > 0.0) || !(self.probe_test_fraction > 0.0 && self.probe_test_fraction < 1.0) {
            return Err(Error::Config(
                "probe_c must be positive and probe_test_fraction in (0,1)".into(),
            ));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        let base = GenConfig::new(self.task);
        GenConfig {
            task: self.task,
            n_samples: self.n,
            seed: self.seed,
            chain_length: self.chain_length.unwrap_or(base.chain_length),
            dyck_bracket_types: self.dyck_bracket_types,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        let mut f = FilterConfig {
            max_token_delta: self.max_token_delta,
            max_variants_per_sample: self.max_variants_per_sample,
            include_premise: self.include_premise,
            ..FilterConfig::default()
        };
        if let Some(r) = self.ppl_ratio_max {
            f.ppl_ratio_max.insert(self.task, r);
        }
        f
    }

    pub fn mock_regime(&self) -> Regime {
        Regime {
            kind: self.regime,
            noise_scale: self.noise_scale,
            interference: self.interference,
            d: self.hidden_dim,
            seed: self.seed,
            horizon_fraction: self.horizon_fraction,
            n_layers: self.n_layers,
            base_margin: self.base_margin,
            emit_full_logits: true,
        }
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            b: self.bootstrap_b,
            seed: self.bootstrap_seed,
            level: self.ci_level,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            c: self.probe_c,
            seed: self.probe_seed,
            test_fraction: self.probe_test_fraction,
            max_iter: self.probe_max_iter,
            tol: self.probe_tol,
        }
    }

    pub fn model_tag(&self) -> String {
        self.model.clone().unwrap_or_else(|| match self.backend {
            Backend::Mock => format!(
                "mock-{}",
                match self.regime {
                    RegimeKind::Faithful => "faithful",
                    RegimeKind::AntiFaithful => "anti",
                    RegimeKind::MappingGap => "gap",
                }
            ),
            Backend::Traces => "external".to_string(),
        })
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
        }
        fn path(v: &Option<PathBuf>) -> String {
            v.as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        }
        let regime = match self.regime {
            RegimeKind::Faithful => "faithful",
            RegimeKind::AntiFaithful => "anti",
            RegimeKind::MappingGap => "gap",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("task", self.task.to_string());
        kv("n", self.n.to_string());
        kv("seed", self.seed.to_string());
        kv("chain_length", opt(&self.chain_length));
        kv("dyck_bracket_types", self.dyck_bracket_types.to_string());
        kv("gsm8k_path", path(&self.gsm8k_path));
        kv("eval_fraction", self.eval_fraction.to_string());
        kv(
            "backend",
            match self.backend {
                Backend::Mock => "mock".into(),
                Backend::Traces => "traces".into(),
            },
        );
        kv("traces", path(&self.traces_path));
        kv("ppl_file", path(&self.ppl_path));
        kv("ppl_filter", self.ppl_filter.to_string());
        kv("model", opt(&self.model));
        kv("regime", regime.into());
        kv("noise_scale", self.noise_scale.to_string());
        kv("interference", self.interference.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("horizon_fraction", self.horizon_fraction.to_string());
        kv("base_margin", self.base_margin.to_string());
        kv("max_token_delta", self.max_token_delta.to_string());
        kv("ppl_ratio_max", opt(&self.ppl_ratio_max));
        kv("max_variants_per_sample", self.max_variants_per_sample.to_string());
        kv("include_premise", self.include_premise.to_string());
        kv(
            "variants",
            match self.variants {
                VariantMode::Corruption => "corruption".into(),
                VariantMode::Paraphrase => "paraphrase".into(),
                VariantMode::Both => "both".into(),
            },
        );
        kv("condition_on_correct", self.condition_on_correct.to_string());
        kv(
            "rsa_mode",
            match self.rsa_mode {
                RsaMode::Windowed => "windowed".into(),
                RsaMode::StepTerminal => "step-terminal".into(),
            },
        );
        kv("window", self.window.to_string());
        kv("bootstrap_b", self.bootstrap_b.to_string());
        kv("bootstrap_seed", self.bootstrap_seed.to_string());
        kv("ci_level", self.ci_level.to_string());
        kv("probe", self.probe.to_string());
        kv("probe_c", self.probe_c.to_string());
        kv("probe_seed", self.probe_seed.to_string());
        kv("probe_test_fraction", self.probe_test_fraction.to_string());
        kv("probe_max_iter", self.probe_max_iter.to_string());
        kv("probe_tol", self.probe_tol.to_string());
        s
    }
}
