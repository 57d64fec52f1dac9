//! TOML run configuration with dotted-key overrides. Unknown keys are
//! rejected, and every command writes the resolved snapshot next to its
//! outputs so a run can be reproduced from the snapshot alone.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use defrec_core::cloud::AugmentConfig;
use defrec_core::data::{PhantomSpec, ShellKind};
use defrec_core::model::{ModelConfig, TrainConfig};
use defrec_core::objective::{ObjectiveConfig, ObjectiveKind};
use defrec_core::pipeline::{ClosingKind, PipelineConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveToml,
    pub pipeline: PipelineToml,
    pub train: TrainToml,
    pub augment: AugmentToml,
    pub phantom: PhantomToml,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveToml {
    pub kind: String,
    pub alpha: f64,
    pub k: usize,
    pub temperature: f64,
}

impl Default for ObjectiveToml {
    fn default() -> Self {
        let d = ObjectiveConfig::default();
        ObjectiveToml {
            kind: d.kind.name().to_string(),
            alpha: d.alpha,
            k: d.k,
            temperature: d.dacd_temperature,
        }
    }
}

impl ObjectiveToml {
    pub fn build(&self) -> Result<ObjectiveConfig> {
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::parse(&self.kind)?,
            alpha: self.alpha,
            k: self.k,
            dacd_temperature: self.temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineToml {
    pub refinements: usize,
    pub jitter_sigma: f64,
    pub closing_kind: String,
    pub closing_radius: usize,
    pub connectivity: u8,
    pub mesh: bool,
}

impl Default for PipelineToml {
    fn default() -> Self {
        let d = PipelineConfig::default();
        PipelineToml {
            refinements: d.refinements,
            jitter_sigma: d.jitter_sigma,
            closing_kind: "cube26".into(),
            closing_radius: d.closing_radius,
            connectivity: d.connectivity,
            mesh: d.mesh,
        }
    }
}

impl PipelineToml {
    /// Budgets come from the model config (or the loaded checkpoint), never
    /// from the pipeline section.
    pub fn build(&self, model: &ModelConfig, master_seed: u64) -> Result<PipelineConfig> {
        let closing_kind = match self.closing_kind.as_str() {
            "cross6" => ClosingKind::Cross6,
            "cube26" => ClosingKind::Cube26,
            other => bail!("unknown closing kind {other:?} (expected cross6|cube26)"),
        };
        let cfg = PipelineConfig {
            refinements: self.refinements,
            jitter_sigma: self.jitter_sigma,
            group_in: model.group_in,
            group_out: model.group_out,
            closing_kind,
            closing_radius: self.closing_radius,
            connectivity: self.connectivity,
            master_seed,
            mesh: self.mesh,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainToml {
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub batch_groups: usize,
    pub clip_norm: f64,
    pub cd_warmup: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainToml {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainToml {
            steps: d.steps,
            lr: d.lr,
            lr_min: d.lr_min,
            warmup: d.warmup,
            batch_groups: d.batch_groups,
            clip_norm: d.clip_norm,
            cd_warmup: d.cd_warmup,
            checkpoint_every: 0,
        }
    }
}

impl TrainToml {
    pub fn build(
        &self,
        objective: ObjectiveConfig,
        augment: AugmentConfig,
        seed: u64,
    ) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            lr_min: self.lr_min,
            warmup: self.warmup,
            batch_groups: self.batch_groups,
            clip_norm: self.clip_norm,
            cd_warmup: self.cd_warmup,
            seed,
            objective,
            augment,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentToml {
    pub max_crop_fraction: f64,
    pub max_angle: f64,
    pub max_shift: f64,
}

impl Default for AugmentToml {
    fn default() -> Self {
        // permutation-only by default; magnitudes are opt-in per run
        AugmentToml {
            max_crop_fraction: 0.0,
            max_angle: 0.0,
            max_shift: 0.0,
        }
    }
}

impl AugmentToml {
    pub fn build(&self) -> AugmentConfig {
        AugmentConfig {
            max_crop_fraction: self.max_crop_fraction,
            max_angle: self.max_angle,
            max_shift: self.max_shift,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomToml {
    pub kind: String,
    pub grid: usize,
    pub thickness: f64,
    pub defect_fraction: f64,
}

impl Default for PhantomToml {
    fn default() -> Self {
        PhantomToml {
            kind: "sphere_shell".into(),
            grid: 64,
            thickness: 3.0,
            defect_fraction: 0.08,
        }
    }
}

impl PhantomToml {
    pub fn build(&self, seed: u64) -> Result<PhantomSpec> {
        let kind = match self.kind.as_str() {
            "sphere_shell" => ShellKind::SphereShell,
            "ellipsoid_shell" => ShellKind::EllipsoidShell,
            other => bail!("unknown phantom kind {other:?}"),
        };
        let spec = PhantomSpec {
            kind,
            grid: self.grid,
            thickness: self.thickness,
            defect_fraction: self.defect_fraction,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Loads the config file (if any), applies `--set key=value` overrides, and
/// deserializes strictly.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            text.parse()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Value::Table(Default::default()),
    };
    for pair in overrides {
        let (key, raw) = pair
            .split_once('=')
            .with_context(|| format!("override {pair:?} must look like section.key=value"))?;
        apply_override(&mut value, key.trim(), raw.trim())?;
    }
    let cfg: AppConfig = value
        .try_into()
        .context("invalid configuration (unknown key or wrong type)")?;
    cfg.model.validate()?;
    Ok(cfg)
}

fn apply_override(root: &mut toml::Value, dotted: &str, raw: &str) -> Result<()> {
    // parse the value as TOML when possible, else treat it as a string
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {dotted:?} has empty segments");
    }
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("{dotted:?} does not address a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .with_context(|| format!("{dotted:?} does not address a table"))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Writes the resolved snapshot next to the run's outputs.
pub fn write_resolved(cfg: &AppConfig, out_dir: &Path, seed: u64, jobs: usize) -> Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a> {
        seed: u64,
        jobs: usize,
        #[serde(flatten)]
        config: &'a AppConfig,
    }
    let text = toml::to_string_pretty(&Snapshot {
        seed,
        jobs,
        config: cfg,
    })?;
    defrec_core::util::write_atomic(&out_dir.join("config_resolved.toml"), text.as_bytes())?;
    Ok(())
}
