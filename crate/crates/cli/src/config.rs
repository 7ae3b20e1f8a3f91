//! Run configuration: defaults, then a `key = value` file, then flags.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use tightpack::anneal::AnnealConfig;
use tightpack::pack::{ArrayGeometry, PackMode};
use tightpack::prune::SubwordFormat;
use tightpack::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FormatChoice {
    Auto,
    Fixed(SubwordFormat),
}

impl FromStr for FormatChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("auto") {
            Ok(FormatChoice::Auto)
        } else {
            s.parse().map(FormatChoice::Fixed)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub geometry: ArrayGeometry,
    pub mode: PackMode,
    pub format: FormatChoice,
    pub delta_max: f64,
    pub anneal: AnnealConfig,
    pub anneal_enabled: bool,
    /// Set once a subarray width is given; otherwise it follows `array_cols`.
    #[serde(skip)]
    subarray_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: ArrayGeometry::default(),
            mode: PackMode::Weight,
            format: FormatChoice::Auto,
            delta_max: 0.3,
            anneal: AnnealConfig::default(),
            anneal_enabled: true,
            subarray_explicit: false,
        }
    }
}

fn parse_mode(s: &str) -> Result<PackMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "weight" => Ok(PackMode::Weight),
        "subword" => Ok(PackMode::Subword),
        other => Err(Error::Invalid(format!("unknown mode {other:?} (weight|subword)"))),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Applies one setting. Keys match the long flag names with `_` or `-`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.geometry;
        let a = &mut self.anneal;
        match key.trim().replace('-', "_").as_str() {
            "rows" | "array_rows" => g.array_rows = parse_value(key, value)?,
            "cols" | "array_cols" => {
                g.array_cols = parse_value(key, value)?;
                if !self.subarray_explicit {
                    g.subarray_cols = ArrayGeometry::default_subarray_cols(g.array_cols);
                }
            }
            "group" | "group_max" => g.group_max = parse_value(key, value)?,
            "subarray" | "subarray_cols" => {
                g.subarray_cols = parse_value(key, value)?;
                self.subarray_explicit = true;
            }
            "act_bits" => g.act_bits = parse_value(key, value)?,
            "mode" => self.mode = parse_mode(value)?,
            "format" => self.format = value.parse()?,
            "delta_max" => self.delta_max = parse_value(key, value)?,
            "t_init" => {
                a.t_init = match value.trim() {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "t_end" => a.t_end = parse_value(key, value)?,
            "cooling" => a.cooling = parse_value(key, value)?,
            "iters" | "iters_per_temp" => a.iters_per_temp = parse_value(key, value)?,
            "seed" => a.seed = parse_value(key, value)?,
            "anneal" => self.anneal_enabled = parse_value(key, value)?,
            other => return Err(Error::Invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::at_line(n + 1, "expected key = value"))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn validate(&self, cols: usize) -> Result<()> {
        self.geometry.validate()?;
        if !(self.delta_max > 0.0 && self.delta_max < 1.0) {
            return Err(Error::Invalid(format!(
                "delta_max must be in (0, 1), got {}",
                self.delta_max
            )));
        }
        if self.anneal_enabled {
            self.anneal.validate(cols)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = std::env::temp_dir().join(format!("tp-config-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        fs::write(&path, "# geometry\nrows = 16\ngroup=8 # inline\nmode = subword\nformat = 4,4\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.geometry.array_rows, 16);
        assert_eq!(cfg.geometry.group_max, 8);
        assert_eq!(cfg.mode, PackMode::Subword);
        cfg.set("rows", "8").unwrap();
        assert_eq!(cfg.geometry.array_rows, 8);
        assert!(matches!(cfg.format, FormatChoice::Fixed(f) if f.label() == (4, 4)));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("colour", "blue").is_err());
        assert!(cfg.set("mode", "bitwise").is_err());
        assert!(cfg.set("seed", "-1").is_err());
        assert!(cfg.set("format", "6,2").is_err());
    }

    #[test]
    fn subarray_follows_width_until_set() {
        let mut cfg = RunConfig::default();
        cfg.set("cols", "12").unwrap();
        assert_eq!(cfg.geometry.subarray_cols, 6);
        cfg.set("subarray", "4").unwrap();
        cfg.set("cols", "16").unwrap();
        assert_eq!(cfg.geometry.subarray_cols, 4);
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::default();
        let g = cfg.geometry;
        assert_eq!((g.array_rows, g.array_cols, g.group_max), (32, 32, 16));
        assert_eq!(cfg.anneal.cooling, 0.01);
        assert_eq!(cfg.anneal.iters_per_temp, 15);
        assert_eq!(cfg.anneal.t_end, 1e-5);
        assert_eq!(cfg.mode, PackMode::Weight);
    }
}
