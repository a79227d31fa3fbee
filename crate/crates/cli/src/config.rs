//! Run configuration: preset defaults, then a flat TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use dssr::degradation::KernelKind;
use dssr::evaluation::Protocol;
use dssr::model::DssrConfig;
use dssr::training::TrainConfig;
use dssr::variants::VariantKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// File name of the resolved configuration written by every command.
pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

/// Every key accepted in a config file. Keys left out fall back to the
/// preset; flags override both.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base defaults: desk, full or tiny.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stru_fe_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail_fe_convs_per_branch: Option<usize>,
    /// Recurrent steps during training.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr0: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_iters: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_halve_every: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_patch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_kind: Option<KernelKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    /// Root seed for all randomness.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,

    /// Directory of HR training images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Directory of HR test images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,

    /// Test-set protocol: gaussian8 or anisotropic.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    /// Recurrent steps at evaluation / inference time.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_steps: Option<usize>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )+
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// `self` with every key set in `top` replaced.
    pub fn overlaid(&self, top: &RunConfig) -> RunConfig {
        let mut out = self.clone();
        overlay!(
            out, top, preset, variant, channels, stru_fe_blocks, recon_blocks, detail_fe_convs_per_branch, steps,
            alpha, lr0, beta1, beta2, eps, total_iters, lr_halve_every, batch, lr_patch, kernel_kind, scale, seed,
            checkpoint_every, workers, corpus, test_dir, out, checkpoint, protocol, eval_steps
        );
        out
    }

    /// Optional config file under flag overrides.
    pub fn load(file: Option<&Path>, flags: &RunConfig) -> Result<Self, CliError> {
        let base = match file {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        Ok(base.overlaid(flags))
    }

    pub fn scale(&self) -> usize {
        self.scale.unwrap_or(2)
    }

    fn preset_name(&self) -> &str {
        self.preset.as_deref().unwrap_or("desk")
    }

    pub fn model_config(&self) -> Result<DssrConfig, CliError> {
        let s = self.scale();
        let mut c = match self.preset_name() {
            "desk" => DssrConfig::desk(s),
            "full" => DssrConfig::full(s),
            "tiny" => DssrConfig::tiny(s),
            other => return Err(CliError::Usage(format!("unknown preset `{other}` (desk, full or tiny)"))),
        };
        overlay_into(&mut c.channels, self.channels);
        overlay_into(&mut c.stru_fe_blocks, self.stru_fe_blocks);
        overlay_into(&mut c.recon_blocks, self.recon_blocks);
        overlay_into(&mut c.detail_fe_convs_per_branch, self.detail_fe_convs_per_branch);
        overlay_into(&mut c.steps, self.steps);
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let s = self.scale();
        let mut c = match self.preset_name() {
            "desk" => TrainConfig::desk(s),
            "full" => TrainConfig::full(s),
            "tiny" => TrainConfig::tiny(s),
            other => return Err(CliError::Usage(format!("unknown preset `{other}` (desk, full or tiny)"))),
        };
        overlay_into(&mut c.alpha, self.alpha);
        overlay_into(&mut c.lr0, self.lr0);
        overlay_into(&mut c.beta1, self.beta1);
        overlay_into(&mut c.beta2, self.beta2);
        overlay_into(&mut c.eps, self.eps);
        overlay_into(&mut c.total_iters, self.total_iters);
        overlay_into(&mut c.lr_halve_every, self.lr_halve_every);
        overlay_into(&mut c.batch, self.batch);
        overlay_into(&mut c.lr_patch, self.lr_patch);
        overlay_into(&mut c.kernel_kind, self.kernel_kind);
        overlay_into(&mut c.seed, self.seed);
        overlay_into(&mut c.checkpoint_every, self.checkpoint_every);
        overlay_into(&mut c.workers, self.workers);
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn variant(&self) -> VariantKind {
        self.variant.unwrap_or(VariantKind::FullSmu)
    }

    /// Every model and training key filled in from the preset.
    pub fn resolved(&self) -> Result<RunConfig, CliError> {
        let m = self.model_config()?;
        let t = self.train_config()?;
        Ok(RunConfig {
            preset: Some(self.preset_name().to_string()),
            variant: Some(self.variant()),
            channels: Some(m.channels),
            stru_fe_blocks: Some(m.stru_fe_blocks),
            recon_blocks: Some(m.recon_blocks),
            detail_fe_convs_per_branch: Some(m.detail_fe_convs_per_branch),
            steps: Some(m.steps),
            alpha: Some(t.alpha),
            lr0: Some(t.lr0),
            beta1: Some(t.beta1),
            beta2: Some(t.beta2),
            eps: Some(t.eps),
            total_iters: Some(t.total_iters),
            lr_halve_every: Some(t.lr_halve_every),
            batch: Some(t.batch),
            lr_patch: Some(t.lr_patch),
            kernel_kind: Some(t.kernel_kind),
            scale: Some(t.scale),
            seed: Some(t.seed),
            checkpoint_every: Some(t.checkpoint_every),
            workers: Some(t.workers),
            protocol: Some(self.protocol.unwrap_or(Protocol::Gaussian8)),
            eval_steps: Some(self.eval_steps.unwrap_or(m.steps)),
            ..self.clone()
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(SNAPSHOT_NAME);
        fs::write(&path, self.to_toml()?)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn require_dir(&self, what: &str, p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = p.clone().ok_or_else(|| CliError::Usage(format!("--{what} is required")))?;
        if !p.is_dir() {
            return Err(CliError::Usage(format!("{what} directory {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_out(&self) -> Result<PathBuf, CliError> {
        self.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    pub fn require_checkpoint(&self) -> Result<PathBuf, CliError> {
        let p = self
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
        if !p.is_file() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display())));
        }
        Ok(p)
    }
}

fn overlay_into<T: Copy>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}
