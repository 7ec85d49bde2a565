//! Run settings with layered resolution: built-in defaults, then an
//! optional `key=value` config file, then command-line flags. Flags are
//! applied by the command handlers; this module owns defaults, the file
//! layer, and the fully-materialized view recorded in run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use socprob_core::training::{TrainConfig, DEFAULT_MARGIN_FRAC};

use crate::error::{CliError, Result};

/// Everything a command needs beyond its positional inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    /// Samples drawn per prediction in best-of-k evaluation.
    pub k: usize,
    /// Fractional margin added around the scene when fitting the grid.
    pub margin_frac: f64,
    /// Step between consecutive sample windows on a trajectory.
    pub window_stride: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            k: 20,
            margin_frac: DEFAULT_MARGIN_FRAC,
            window_stride: 1,
        }
    }
}

/// Parses `WxH` (e.g. `100x100`) into `(width, height)`.
pub fn parse_grid(text: &str) -> Result<(usize, usize)> {
    let bad = || CliError::usage(format!("grid must be WxH, got '{text}'"));
    let (w, h) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

impl Settings {
    /// Applies one config-file layer. Lines are `key = value`; blank
    /// lines and `#` comments are skipped. Unknown keys and unparsable
    /// values are usage errors naming the file and line.
    pub fn apply_file(&mut self, text: &str, path: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| {
                CliError::usage(format!("{}:{}: {msg}", path.display(), idx + 1))
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value)
                .map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Sets one setting from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| CliError::usage(format!("bad value for {key}: '{value}'")))
        }
        let t = &mut self.train;
        match key {
            "grid" => {
                let (w, h) = parse_grid(value)?;
                t.grid_width = w;
                t.grid_height = h;
            }
            "grid_width" => t.grid_width = num(key, value)?,
            "grid_height" => t.grid_height = num(key, value)?,
            "sigma_target" => t.sigma_target = num(key, value)?,
            "sigma_other" => t.sigma_other = num(key, value)?,
            "obs_len" => t.obs_len = num(key, value)?,
            "pred_len" => t.pred_len = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "integration" => t.integrate_neighbors = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "kernel_size" => t.kernel_size = num(key, value)?,
            "hidden_channels" => {
                let channels: Result<Vec<usize>> = value
                    .split(',')
                    .map(|c| num("hidden_channels", c.trim()))
                    .collect();
                let channels = channels?;
                if channels.is_empty() || channels.contains(&0) {
                    return Err(CliError::usage(format!(
                        "hidden_channels needs positive entries, got '{value}'"
                    )));
                }
                t.hidden_channels = channels;
            }
            "k" => self.k = num(key, value)?,
            "margin_frac" => self.margin_frac = num(key, value)?,
            "window_stride" => self.window_stride = num(key, value)?,
            _ => {
                return Err(CliError::usage(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    /// Every setting in textual form, for the run manifest.
    pub fn resolved_map(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let channels = t
            .hidden_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_owned(), v);
        };
        put("grid_width", t.grid_width.to_string());
        put("grid_height", t.grid_height.to_string());
        put("sigma_target", t.sigma_target.to_string());
        put("sigma_other", t.sigma_other.to_string());
        put("obs_len", t.obs_len.to_string());
        put("pred_len", t.pred_len.to_string());
        put("lr", t.lr.to_string());
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("seed", t.seed.to_string());
        put("integration", t.integrate_neighbors.to_string());
        put("clip_norm", t.clip_norm.to_string());
        put("hidden_channels", channels);
        put("kernel_size", t.kernel_size.to_string());
        put("k", self.k.to_string());
        put("margin_frac", self.margin_frac.to_string());
        put("window_stride", self.window_stride.to_string());
        map
    }
}
