//! Experiment configuration: a TOML file plus command-line overrides.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use densba_core::ExperimentConfig;
use toml::{Table, Value};

/// Flags shared by every verb that builds an [`ExperimentConfig`].
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment configuration; unknown keys are rejected.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Number of scene frames (`scene.frames`).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Scene seed (`seeds.scene`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Oracle noise seed (`seeds.oracle`).
    #[arg(long)]
    pub oracle_seed: Option<u64>,
    /// Lower end of the consecutive-frame flow band in pixels (`scene.flow_min`).
    #[arg(long)]
    pub flow_min: Option<f64>,
    /// Upper end of the consecutive-frame flow band in pixels (`scene.flow_max`).
    #[arg(long)]
    pub flow_max: Option<f64>,
    /// Render right views with this baseline (`scene.stereo_baseline`).
    #[arg(long)]
    pub stereo_baseline: Option<f64>,
    /// Gaussian target noise in pixels (`noise.sigma`).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Fraction of outlier targets (`noise.outlier_fraction`).
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    /// Confidence fidelity (`noise.confidence`).
    #[arg(long, value_parser = ["oracle_true", "constant", "adversarial"])]
    pub confidence: Option<String>,
    /// Sensor mode (`system.mode`).
    #[arg(long, value_parser = ["mono", "stereo", "rgbd"])]
    pub mode: Option<String>,
    /// Weight of the RGB-D depth prior (`system.depth_weight`).
    #[arg(long)]
    pub depth_weight: Option<f64>,
    /// Threading profile (`profile`).
    #[arg(long, value_parser = ["single", "two_worker"])]
    pub profile: Option<String>,
    /// Damping emitted by the oracle (`damping`).
    #[arg(long)]
    pub damping: Option<f64>,
    /// Set any configuration field, e.g. `system.backend_iters=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Loads the file (if any), applies overrides and validates the result.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut table = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing {}", path.display()))?
            }
            None => Table::new(),
        };
        for (key, value) in self.overrides()? {
            insert(&mut table, &key, value)?;
        }
        let cfg: ExperimentConfig = Value::Table(table).try_into().map_err(|e| anyhow!("invalid configuration: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        let mut push = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((key.to_string(), v));
            }
        };
        let int = |v: Option<u64>| -> Result<Option<Value>> {
            v.map(|x| i64::try_from(x).map(Value::Integer).map_err(|_| anyhow!("{x} is too large")))
                .transpose()
        };
        push("scene.frames", int(self.frames.map(|f| f as u64))?);
        push("seeds.scene", int(self.seed)?);
        push("seeds.oracle", int(self.oracle_seed)?);
        push("scene.flow_min", self.flow_min.map(Value::Float));
        push("scene.flow_max", self.flow_max.map(Value::Float));
        push("scene.stereo_baseline", self.stereo_baseline.map(Value::Float));
        push("noise.sigma", self.sigma.map(Value::Float));
        push("noise.outlier_fraction", self.outlier_fraction.map(Value::Float));
        push("noise.confidence", self.confidence.clone().map(Value::String));
        push("system.mode", self.mode.clone().map(Value::String));
        push("system.depth_weight", self.depth_weight.map(Value::Float));
        push("profile", self.profile.clone().map(Value::String));
        push("damping", self.damping.map(Value::Float));
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {item:?}"))?;
            out.push((key.trim().to_string(), parse_value(raw.trim())));
        }
        Ok(out)
    }
}

/// A TOML literal, or a bare string when the text is not one.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert(table: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty key {dotted:?}"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("{p:?} in {dotted:?} is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
