//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! A `preset` line applies its values at that point, so later lines
//! override it.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::trainer::{FinetuneConfig, PretrainConfig};
use crate::wucodec::SweepGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub net: NetConfig,
    pub pretrain: PretrainConfig,
    /// Fixed codec `q` for pre-training pairs; `None` targets the image rate
    /// used by `encode`.
    pub pretrain_q: Option<f64>,
    pub finetune: FinetuneConfig,
    pub grid: SweepGrid,
    /// Hard limit on total bundle rate.
    pub budget_bpp: f64,
    /// Share of the budget reserved for the weight update.
    pub margin_bpp: f64,
    pub rate_tol: f64,
    pub seed: u64,
}

/// Named operating points.
pub const PRESETS: [&str; 3] = ["desk", "low-rate-m0.03", "low-rate-m0.01"];

impl Default for Config {
    fn default() -> Self {
        Config {
            net: NetConfig::desk(),
            pretrain: PretrainConfig::default(),
            pretrain_q: None,
            finetune: FinetuneConfig::default(),
            grid: SweepGrid {
                taus: vec![1e-5, 1e-4, 5e-4, 1e-3, 2e-3, 5e-3],
                ks: vec![2, 4, 16, 64],
            },
            budget_bpp: 0.60,
            margin_bpp: 0.10,
            rate_tol: 0.005,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {
                self.budget_bpp = 0.60;
                self.margin_bpp = 0.10;
                self.finetune.lr = 1e-3;
            }
            "low-rate-m0.03" => {
                self.budget_bpp = 0.15;
                self.margin_bpp = 0.03;
                self.finetune.lr = 1e-3;
                self.pretrain.lr = 1e-3;
            }
            "low-rate-m0.01" => {
                self.budget_bpp = 0.15;
                self.margin_bpp = 0.01;
                self.finetune.lr = 5e-4;
                self.pretrain.lr = 5e-4;
            }
            _ => {
                return Err(Error::config(format!(
                    "unknown preset {name:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => self.apply_preset(v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "budget_bpp" => self.budget_bpp = parse_num(key, v)?,
            "margin_bpp" => self.margin_bpp = parse_num(key, v)?,
            "rate_tol" => self.rate_tol = parse_num(key, v)?,
            "net.contracting" => self.net.contracting = parse_list(key, v)?,
            "net.expansive" => self.net.expansive = parse_list(key, v)?,
            "net.kernel" => self.net.kernel = parse_num(key, v)?,
            "net.stride" => self.net.stride = parse_num(key, v)?,
            "net.leaky_slope" => self.net.leaky_slope = parse_num(key, v)?,
            "net.bn_eps" => self.net.bn_eps = parse_num(key, v)?,
            "net.residual" => self.net.residual = parse_bool(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse_num(key, v)?,
            "pretrain.patch" => self.pretrain.patch = parse_num(key, v)?,
            "pretrain.bn_momentum" => self.pretrain.bn_momentum = parse_num(key, v)?,
            "pretrain.augment" => self.pretrain.augment = parse_bool(key, v)?,
            "pretrain.q" => {
                self.pretrain_q = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "finetune.m" => self.finetune.m = parse_num(key, v)?,
            "finetune.lr" => self.finetune.lr = parse_num(key, v)?,
            "finetune.total_steps" => self.finetune.total_steps = parse_num(key, v)?,
            "finetune.phase1_steps" => self.finetune.switch.phase1_steps = parse_num(key, v)?,
            "finetune.mse_drop_ratio" => {
                self.finetune.switch.mse_drop_ratio = if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "finetune.alpha_ratio" => self.finetune.alpha_ratio = parse_num(key, v)?,
            "finetune.report_tau" => self.finetune.report_tau = parse_num(key, v)?,
            "sweep.taus" => self.grid.taus = parse_list(key, v)?,
            "sweep.ks" => self.grid.ks = parse_list(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.finetune.validate()?;
        if !(self.budget_bpp > 0.0) || !(self.margin_bpp >= 0.0) || self.margin_bpp >= self.budget_bpp {
            return Err(Error::config("need budget_bpp > margin_bpp >= 0"));
        }
        if !(self.rate_tol > 0.0) {
            return Err(Error::config("rate_tol must be positive"));
        }
        if self.grid.taus.is_empty() || self.grid.ks.is_empty() {
            return Err(Error::config("sweep grids must be nonempty"));
        }
        if self.grid.taus.iter().any(|t| !(*t >= 0.0)) || self.grid.ks.contains(&0) {
            return Err(Error::config("sweep taus must be >= 0 and ks >= 1"));
        }
        if self.pretrain.patch == 0 || !self.pretrain.patch.is_multiple_of(16) || self.pretrain.batch == 0 {
            return Err(Error::config("pretrain.patch must be a positive multiple of 16, batch positive"));
        }
        Ok(())
    }

    /// Inverse of [`Config::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ft = &self.finetune;
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("budget_bpp", self.budget_bpp.to_string()),
            ("margin_bpp", self.margin_bpp.to_string()),
            ("rate_tol", self.rate_tol.to_string()),
            ("net.contracting", join(&self.net.contracting)),
            ("net.expansive", join(&self.net.expansive)),
            ("net.kernel", self.net.kernel.to_string()),
            ("net.stride", self.net.stride.to_string()),
            ("net.leaky_slope", self.net.leaky_slope.to_string()),
            ("net.bn_eps", self.net.bn_eps.to_string()),
            ("net.residual", self.net.residual.to_string()),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.batch", self.pretrain.batch.to_string()),
            ("pretrain.patch", self.pretrain.patch.to_string()),
            ("pretrain.bn_momentum", self.pretrain.bn_momentum.to_string()),
            ("pretrain.augment", self.pretrain.augment.to_string()),
            ("pretrain.q", self.pretrain_q.map_or("auto".into(), |q| q.to_string())),
            ("finetune.m", ft.m.to_string()),
            ("finetune.lr", ft.lr.to_string()),
            ("finetune.total_steps", ft.total_steps.to_string()),
            ("finetune.phase1_steps", ft.switch.phase1_steps.to_string()),
            (
                "finetune.mse_drop_ratio",
                ft.switch.mse_drop_ratio.map_or("none".into(), |r| r.to_string()),
            ),
            ("finetune.alpha_ratio", ft.alpha_ratio.to_string()),
            ("finetune.report_tau", ft.report_tau.to_string()),
            ("sweep.taus", join(&self.grid.taus)),
            ("sweep.ks", join(&self.grid.ks)),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
