//! Ablation variants of the structure modulation unit.
//!
//! Every variant shares the full network and differs only in how the
//! detail features modulate the structure maps (the affine-transform
//! stage) at HR and LR resolution.
//!
//! Adapter depths are chosen for parameter parity with the affine
//! generators (a 3×3 `C→C` conv followed by a narrow output conv), so all
//! variants stay within a few percent of the full model's size.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{init_params, Dssr, DssrConfig, Forward, ParamSpec};
use crate::tensor::Float;

/// Channel reduction ratio of the channel-attention variant.
pub const CA_REDUCTION: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VariantKind {
    /// Affine modulation at both resolutions.
    FullSmu,
    /// Modulation removed; structure maps pass through.
    NoSmu,
    /// Detail features added element-wise.
    Ea,
    /// Detail features concatenated with the structure map then projected.
    Fc,
    /// Channel attention over detail features.
    Ca,
    /// Spatial attention mask from detail features.
    Sa,
    SmuLrOnly,
    SmuHrOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Hr,
    Lr,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Hr => "hr",
            Stage::Lr => "lr",
        }
    }
}

impl VariantKind {
    pub const ALL: [VariantKind; 8] = [
        VariantKind::FullSmu,
        VariantKind::NoSmu,
        VariantKind::Ea,
        VariantKind::Fc,
        VariantKind::Ca,
        VariantKind::Sa,
        VariantKind::SmuLrOnly,
        VariantKind::SmuHrOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::FullSmu => "full_smu",
            VariantKind::NoSmu => "no_smu",
            VariantKind::Ea => "ea",
            VariantKind::Fc => "fc",
            VariantKind::Ca => "ca",
            VariantKind::Sa => "sa",
            VariantKind::SmuLrOnly => "smu_lr_only",
            VariantKind::SmuHrOnly => "smu_hr_only",
        }
    }

    /// Whether the variant modulates the structure map at `stage`.
    pub fn modulates(self, stage: Stage) -> bool {
        match self {
            VariantKind::NoSmu => false,
            VariantKind::SmuLrOnly => stage == Stage::Lr,
            VariantKind::SmuHrOnly => stage == Stage::Hr,
            _ => true,
        }
    }

    /// Whether the detail-feature branch of `stage` has weights. The
    /// pass-through variant keeps both branches (unused) so that it differs
    /// from the full model only by the removed modulation.
    pub fn has_detail_branch(self, stage: Stage) -> bool {
        self == VariantKind::NoSmu || self.modulates(stage)
    }

    /// Parameters of the modulation stage.
    pub(crate) fn stage_layout(self, stage: Stage, c: usize) -> Vec<ParamSpec> {
        if !self.modulates(stage) {
            return Vec::new();
        }
        let t = stage.tag();
        let conv = ParamSpec::conv;
        match self {
            VariantKind::FullSmu | VariantKind::SmuLrOnly | VariantKind::SmuHrOnly => {
                let mut v = conv(&format!("smu.affine_{t}.0"), c, c, 3, 1.0);
                v.extend(conv(&format!("smu.affine_{t}.1"), 6, c, 3, 0.1));
                v
            }
            VariantKind::Ea => adapter(t, c, c),
            VariantKind::Fc => adapter(t, c + 3, c),
            VariantKind::Ca => {
                let r = (c / CA_REDUCTION).max(1);
                let mut v = conv(&format!("smu.attention_{t}.squeeze"), r, c, 1, 1.0);
                v.extend(conv(&format!("smu.attention_{t}.excite"), c, r, 1, 1.0));
                v.extend(adapter(t, c, c));
                v
            }
            VariantKind::Sa => {
                let mut v = conv(&format!("smu.attention_{t}.0"), c, c, 3, 1.0);
                v.extend(conv(&format!("smu.attention_{t}.1"), 1, c, 3, 1.0));
                v
            }
            VariantKind::NoSmu => unreachable!("no_smu has no modulation stage"),
        }
    }
}

fn adapter(t: &str, c_in: usize, c: usize) -> Vec<ParamSpec> {
    let mut v = ParamSpec::conv(&format!("smu.adapter_{t}.0"), c, c_in, 3, 1.0);
    v.extend(ParamSpec::conv(&format!("smu.adapter_{t}.1"), 3, c, 1, 0.1));
    v
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = VariantKind::ALL.iter().map(|v| v.as_str()).collect();
                Error::Contract(format!("unknown variant `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

impl TryFrom<String> for VariantKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VariantKind> for String {
    fn from(v: VariantKind) -> String {
        v.as_str().to_string()
    }
}

/// Builds a freshly initialized network of the given variant.
pub fn build_variant<F: Float, R: Rng + ?Sized>(kind: VariantKind, config: &DssrConfig, rng: &mut R) -> Result<Dssr<F>> {
    let params = init_params(config, kind, rng)?;
    Dssr::new(config.clone(), kind, params)
}

impl<F: Float> Forward<'_, F> {
    /// Channel-attention weights in `(0, 1)` for detail features `d`.
    pub fn channel_attention(&mut self, stage: Stage, d: Var) -> Result<Var> {
        let t = stage.tag();
        let pooled = self.graph.channel_mean(d)?;
        let squeezed = self.conv(&format!("smu.attention_{t}.squeeze"), pooled, 0)?;
        let squeezed = self.graph.leaky_relu(squeezed, F::zero());
        let excited = self.conv(&format!("smu.attention_{t}.excite"), squeezed, 0)?;
        Ok(self.graph.sigmoid(excited))
    }

    fn adapter(&mut self, t: &str, x: Var) -> Result<Var> {
        let h = self.conv(&format!("smu.adapter_{t}.0"), x, 1)?;
        let h = self.lrelu(h);
        self.conv(&format!("smu.adapter_{t}.1"), h, 0)
    }

    /// Applies the variant's modulation of structure map `s` (3 channels)
    /// conditioned on detail features `d`. Stages the variant does not
    /// modulate return `s` unchanged.
    pub(crate) fn modulate(&mut self, stage: Stage, s: Var, d: Option<Var>) -> Result<Var> {
        let kind = self.variant;
        if !kind.modulates(stage) {
            return Ok(s);
        }
        let d = d.ok_or_else(|| Error::Contract(format!("{kind} needs detail features at the {} stage", stage.tag())))?;
        let t = stage.tag();
        let hr = stage == Stage::Hr;
        match kind {
            VariantKind::FullSmu | VariantKind::SmuLrOnly | VariantKind::SmuHrOnly => {
                let (gamma, beta) = self.affine_params(stage, d)?;
                let scaled = self.graph.mul(gamma, s)?;
                let shifted = self.graph.add(scaled, beta)?;
                if hr {
                    self.graph.add(shifted, s)
                } else {
                    Ok(shifted)
                }
            }
            VariantKind::Ea => {
                let a = self.adapter(t, d)?;
                self.graph.add(s, a)
            }
            VariantKind::Fc => {
                let cat = self.graph.concat(&[s, d])?;
                let a = self.adapter(t, cat)?;
                if hr {
                    self.graph.add(s, a)
                } else {
                    Ok(a)
                }
            }
            VariantKind::Ca => {
                let w = self.channel_attention(stage, d)?;
                let weighted = self.graph.mul_channel(d, w)?;
                let a = self.adapter(t, weighted)?;
                self.graph.add(s, a)
            }
            VariantKind::Sa => {
                let h = self.conv(&format!("smu.attention_{t}.0"), d, 1)?;
                let h = self.lrelu(h);
                let logits = self.conv(&format!("smu.attention_{t}.1"), h, 1)?;
                let mask = self.graph.sigmoid(logits);
                let masked = self.graph.mul_spatial(s, mask)?;
                if hr {
                    self.graph.add(s, masked)
                } else {
                    Ok(masked)
                }
            }
            VariantKind::NoSmu => unreachable!(),
        }
    }

    /// `(gamma, beta)`, each 3 channels, from the affine generator.
    pub fn affine_params(&mut self, stage: Stage, d: Var) -> Result<(Var, Var)> {
        let t = stage.tag();
        let h = self.conv(&format!("smu.affine_{t}.0"), d, 1)?;
        let h = self.lrelu(h);
        let gb = self.conv(&format!("smu.affine_{t}.1"), h, 1)?;
        Ok((self.graph.narrow(gb, 0, 3)?, self.graph.narrow(gb, 3, 3)?))
    }
}
