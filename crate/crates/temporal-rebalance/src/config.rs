//! DTR settings from flags and from a key-value config file.
//!
//! The file is TOML with any of `alpha`, `beta`, `epsilon`, `layer_start`,
//! `layer_end`:
//!
//! ```toml
//! alpha = 0.5
//! beta = 0.4
//! layer_start = 18
//! layer_end = 31
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use temporal_rebalance_core::dtr::DEFAULT_EPSILON;
use temporal_rebalance_core::DtrConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub epsilon: Option<f64>,
    pub layer_start: Option<usize>,
    pub layer_end: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Values from `self` where set, `base` otherwise.
    pub fn over(&self, base: DtrConfig) -> DtrConfig {
        DtrConfig {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta.unwrap_or(base.beta),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            layer_start: self.layer_start.unwrap_or(base.layer_start),
            layer_end: self.layer_end.unwrap_or(base.layer_end),
        }
    }
}

/// Inclusive layer window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    /// The 18–31-of-32 window scaled to `num_layers`.
    pub fn default_for(num_layers: usize) -> Self {
        Self {
            start: num_layers * 18 / 32,
            end: num_layers.saturating_sub(1),
        }
    }

    /// A window given on a 32-layer scale, mapped onto `num_layers`.
    pub fn scaled(start32: usize, end32: usize, num_layers: usize) -> Self {
        let map = |l: usize| (l * num_layers / 32).min(num_layers.saturating_sub(1));
        Self {
            start: map(start32),
            end: map(end32),
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

fn usage(msg: String) -> Error {
    Error::Usage(msg)
}

/// `A:B` with `A <= B`; a single `A` means `A:A`.
pub fn parse_window(text: &str) -> Result<Window> {
    let text = text.trim();
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("bad layer index {s:?} in {text:?}")))
    };
    let (start, end) = match text.split_once(':') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => {
            let a = num(text)?;
            (a, a)
        }
    };
    if start > end {
        return Err(usage(format!("layer window {text:?} is reversed")));
    }
    Ok(Window { start, end })
}

/// Comma-separated windows, `A:B[,C:D...]`.
pub fn parse_windows(text: &str) -> Result<Vec<Window>> {
    text.split(',').map(parse_window).collect()
}

/// Comma-separated non-negative numbers.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad number {s:?}")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(usage(format!("{s:?} must be finite and non-negative")));
            }
            Ok(v)
        })
        .collect()
}

pub fn parse_epsilon(text: &str) -> Result<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| usage(format!("bad epsilon {text:?}")))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(usage("epsilon must be positive".into()));
    }
    Ok(v)
}

/// A config with the default window for `num_layers`.
pub fn base_config(num_layers: usize) -> DtrConfig {
    let w = Window::default_for(num_layers);
    DtrConfig {
        alpha: 0.5,
        beta: 0.4,
        epsilon: DEFAULT_EPSILON,
        layer_start: w.start,
        layer_end: w.end,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows() {
        assert_eq!(parse_window("18:31").unwrap(), Window { start: 18, end: 31 });
        assert_eq!(parse_window("3").unwrap(), Window { start: 3, end: 3 });
        assert_eq!(parse_windows("0:1, 2:3").unwrap().len(), 2);
        assert!(matches!(parse_window("3:1"), Err(Error::Usage(_))));
        assert!(matches!(parse_window("a:b"), Err(Error::Usage(_))));
    }

    #[test]
    fn default_window_scales() {
        assert_eq!(Window::default_for(32), Window { start: 18, end: 31 });
        assert_eq!(Window::default_for(4), Window { start: 2, end: 3 });
        assert_eq!(Window::scaled(18, 31, 4), Window { start: 2, end: 3 });
    }

    #[test]
    fn values() {
        assert_eq!(parse_values("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_values("-1").is_err());
        assert!(parse_values("nan").is_err());
        assert!(parse_epsilon("0").is_err());
    }

    #[test]
    fn config_file_overrides_base() {
        let f = ConfigFile::parse("alpha = 0.25\nlayer_end = 3\n").unwrap();
        let c = f.over(base_config(4));
        assert_eq!((c.alpha, c.beta, c.layer_start, c.layer_end), (0.25, 0.4, 2, 3));
        assert!(ConfigFile::parse("gamma = 1").is_err());
        assert!(ConfigFile::parse("alpha = \"x\"").is_err());
    }
}
