//! Training configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::LossFlags;

/// Width of the concatenated embedding when `chunk_dim` is derived from `k`.
pub const EMBED_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub window_len: usize,
    pub window_step: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub p_threshold: f64,
    pub n_neg: usize,
    pub k: usize,
    pub chunk_dim: usize,
    pub margin: Option<f64>,
    pub seed: u64,
    /// Enabled factors; empty means all.
    pub factor_mask: Vec<bool>,
    pub item_fraction: f64,
    pub loss_label: bool,
    pub loss_pro: bool,
    pub loss_triple: bool,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window_len: 10,
            window_step: 5,
            batch_size: 16,
            epochs: 30,
            lr: 1e-4,
            l2: 1e-5,
            p_threshold: 0.5,
            n_neg: 5,
            k: 4,
            chunk_dim: 64,
            margin: None,
            seed: 0,
            factor_mask: Vec::new(),
            item_fraction: 1.0,
            loss_label: true,
            loss_pro: true,
            loss_triple: true,
            temperature: 1.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "window_len",
    "window_step",
    "batch_size",
    "epochs",
    "lr",
    "l2",
    "p_threshold",
    "n_neg",
    "k",
    "chunk_dim",
    "margin",
    "seed",
    "factor_mask",
    "item_fraction",
    "loss_label",
    "loss_pro",
    "loss_triple",
    "temperature",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

/// `all` or a string of `0`/`1`, one per factor.
pub fn parse_factor_mask(v: &str) -> Result<Vec<bool>> {
    if v == "all" || v.is_empty() {
        return Ok(Vec::new());
    }
    v.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::Config(format!(
                "factor_mask: expected 0/1 digits or 'all', got {v:?}"
            ))),
        })
        .collect()
}

pub fn format_factor_mask(mask: &[bool]) -> String {
    if mask.is_empty() {
        "all".into()
    } else {
        mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

impl TrainConfig {
    pub fn flags(&self) -> LossFlags {
        LossFlags {
            label: self.loss_label,
            pro: self.loss_pro,
            triple: self.loss_triple,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.k * self.chunk_dim
    }

    /// Set one key. Setting `k` also resets `chunk_dim` to `256 / k`; set
    /// `chunk_dim` afterwards to override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "window_len" => self.window_len = parse_num(key, v)?,
            "window_step" => self.window_step = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "l2" => self.l2 = parse_num(key, v)?,
            "p_threshold" => self.p_threshold = parse_num(key, v)?,
            "n_neg" => self.n_neg = parse_num(key, v)?,
            "k" => {
                self.k = parse_num(key, v)?;
                if self.k == 0 || !EMBED_DIM.is_multiple_of(self.k) {
                    return Err(Error::Config(format!("k={v} does not divide {EMBED_DIM}")));
                }
                self.chunk_dim = EMBED_DIM / self.k;
            }
            "chunk_dim" => self.chunk_dim = parse_num(key, v)?,
            "margin" => {
                self.margin = match v {
                    "none" | "" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "seed" => self.seed = parse_num(key, v)?,
            "factor_mask" => self.factor_mask = parse_factor_mask(v)?,
            "item_fraction" => self.item_fraction = parse_num(key, v)?,
            "loss_label" => self.loss_label = parse_bool(key, v)?,
            "loss_pro" => self.loss_pro = parse_bool(key, v)?,
            "loss_triple" => self.loss_triple = parse_bool(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        // k first so an explicit chunk_dim in the same text wins
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "k");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = TrainConfig::default();
        c.apply_text(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "window_len" => self.window_len.to_string(),
            "window_step" => self.window_step.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "l2" => self.l2.to_string(),
            "p_threshold" => self.p_threshold.to_string(),
            "n_neg" => self.n_neg.to_string(),
            "k" => self.k.to_string(),
            "chunk_dim" => self.chunk_dim.to_string(),
            "margin" => self.margin.map_or("none".into(), |m| m.to_string()),
            "seed" => self.seed.to_string(),
            "factor_mask" => format_factor_mask(&self.factor_mask),
            "item_fraction" => self.item_fraction.to_string(),
            "loss_label" => self.loss_label.to_string(),
            "loss_pro" => self.loss_pro.to_string(),
            "loss_triple" => self.loss_triple.to_string(),
            "temperature" => self.temperature.to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window_len == 0 || self.window_step == 0 {
            return bad("window_len and window_step must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("bad lr/l2: {} / {}", self.lr, self.l2));
        }
        if !(self.p_threshold > -1.0 && self.p_threshold < 1.0) {
            return bad(format!("p_threshold must lie in (-1, 1), got {}", self.p_threshold));
        }
        if self.n_neg == 0 || self.k == 0 || self.chunk_dim == 0 {
            return bad("n_neg, k and chunk_dim must be at least 1".into());
        }
        if !(self.item_fraction > 0.0 && self.item_fraction <= 1.0) {
            return bad(format!("item_fraction must lie in (0, 1], got {}", self.item_fraction));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if let Some(m) = self.margin {
            if !m.is_finite() {
                return bad(format!("margin must be finite, got {m}"));
            }
        }
        if !self.factor_mask.is_empty() && !self.factor_mask.iter().any(|&b| b) {
            return bad("factor_mask disables every factor".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_256() {
        let c = TrainConfig::default();
        assert_eq!(c.embed_dim(), 256);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nk=8\nmargin=0.2\nfactor_mask=101111111\nloss_triple=false\nseed=7\n")
            .unwrap();
        assert_eq!(c.chunk_dim, 32);
        assert_eq!(c.margin, Some(0.2));
        let mut d = TrainConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn explicit_chunk_dim_beats_derived() {
        let mut c = TrainConfig::default();
        c.apply_text("chunk_dim=16\nk=2").unwrap();
        assert_eq!((c.k, c.chunk_dim), (2, 16));
    }

    #[test]
    fn rejects_garbage() {
        let mut c = TrainConfig::default();
        assert!(c.apply_text("nope=1").is_err());
        assert!(c.apply_text("lr").is_err());
        assert!(c.set("k", "3").is_err());
        c.item_fraction = 0.0;
        assert!(c.validate().is_err());
    }
}
