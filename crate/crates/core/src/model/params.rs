use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DssrConfig;
use crate::error::{contract, Error, Result};
use crate::tensor::{Float, Tensor};
use crate::variants::{Stage, VariantKind};

/// LeakyReLU negative slope used throughout the network.
pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with std `gain * scale / sqrt(fan_in)`, gain tuned for LeakyReLU.
    He { fan_in: usize, scale: f64 },
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    /// Weight `[out, in, k, k]` and bias `[out]` of a convolution.
    pub fn conv(prefix: &str, c_out: usize, c_in: usize, k: usize, scale: f64) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![c_out, c_in, k, k],
                init: Init::He { fan_in: c_in * k * k, scale },
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![c_out],
                init: Init::Zero,
            },
        ]
    }

    /// Weight `[in, out, k, k]` and bias of a transposed convolution.
    fn deconv(prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![c_in, c_out, k, k],
                init: Init::He {
                    fan_in: (c_in * k * k / (stride * stride)).max(1),
                    scale: 1.0,
                },
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![c_out],
                init: Init::Zero,
            },
        ]
    }

    fn res_block(prefix: &str, c: usize) -> Vec<ParamSpec> {
        let mut v = ParamSpec::conv(&format!("{prefix}.conv1"), c, c, 3, 1.0);
        // residual branches start near identity
        v.extend(ParamSpec::conv(&format!("{prefix}.conv2"), c, c, 3, 0.1));
        v
    }
}

/// Canonical parameter names and shapes, in initialization order.
///
/// | prefix | layer |
/// |---|---|
/// | `shallow` | 3×3 conv, RGB → C |
/// | `fusion` | 1×1 conv, `[hidden, features]` (2C) → C |
/// | `dru.body.{i}.conv{1,2}` | structure residual blocks |
/// | `dru.upsample` | transposed conv, ×scale |
/// | `dru.project` | 3×3 conv, C → RGB structure map |
/// | `smu.detail_{hr,lr}.{j}` | detail feature branches (3 → C → … → C) |
/// | `smu.affine_{hr,lr}.{0,1}` | affine generators, C → C → 6 (γ, β) |
/// | `smu.lift` | 1×1 conv, RGB → C |
/// | `recon.body.{i}.conv{1,2}` | reconstruction residual blocks |
/// | `recon.upsample` | 3×3 conv C → C·s² before the sub-pixel shuffle |
/// | `recon.output` | 3×3 conv, C → RGB residual |
///
/// Ablation variants replace `smu.affine_*` with their own adapters.
pub(crate) fn layout(config: &DssrConfig, variant: VariantKind) -> Vec<ParamSpec> {
    let c = config.channels;
    let s = config.scale;
    let mut v = ParamSpec::conv("shallow", c, 3, 3, 1.0);
    v.extend(ParamSpec::conv("fusion", c, 2 * c, 1, 1.0));
    for i in 0..config.stru_fe_blocks {
        v.extend(ParamSpec::res_block(&format!("dru.body.{i}"), c));
    }
    let (k, stride, _) = config.deconv_geometry();
    v.extend(ParamSpec::deconv("dru.upsample", c, c, k, stride));
    v.extend(ParamSpec::conv("dru.project", 3, c, 3, 1.0));
    for stage in [Stage::Hr, Stage::Lr] {
        if variant.has_detail_branch(stage) {
            for j in 0..config.detail_fe_convs_per_branch {
                let c_in = if j == 0 { 3 } else { c };
                v.extend(ParamSpec::conv(&format!("smu.detail_{}.{j}", stage.tag()), c, c_in, 3, 1.0));
            }
        }
        v.extend(variant.stage_layout(stage, c));
    }
    v.extend(ParamSpec::conv("smu.lift", c, 3, 1, 1.0));
    for i in 0..config.recon_blocks {
        v.extend(ParamSpec::res_block(&format!("recon.body.{i}"), c));
    }
    v.extend(ParamSpec::conv("recon.upsample", c * s * s, c, 3, 1.0));
    v.extend(ParamSpec::conv("recon.output", 3, c, 3, 0.1));
    v
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct DssrParams<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Float> DssrParams<F> {
    pub fn from_entries(entries: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(DssrParams { entries, index })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<G: Float>(&self) -> DssrParams<G> {
        DssrParams {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names and shapes against the layout of `config`/`variant`.
    pub fn check_layout(&self, config: &DssrConfig, variant: VariantKind) -> Result<()> {
        let want = layout(config, variant);
        let mut problems = Vec::new();
        for spec in &want {
            match self.get(&spec.name) {
                None => problems.push(format!("missing `{}`", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    problems.push(format!("`{}` has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape))
                }
                Some(_) => {}
            }
        }
        for name in self.names() {
            if !want.iter().any(|s| s.name == name) {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "parameters do not match {variant} layout: {}",
                problems.join("; ")
            )))
        }
    }
}

/// He-normal weights (gain for LeakyReLU) and zero biases, drawn in layout
/// order from `rng`.
pub fn init_params<F: Float, R: Rng + ?Sized>(
    config: &DssrConfig,
    variant: VariantKind,
    rng: &mut R,
) -> Result<DssrParams<F>> {
    config.validate()?;
    let gain = (2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE)).sqrt();
    let entries = layout(config, variant)
        .into_iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zero => vec![F::zero(); n],
                Init::He { fan_in, scale } => {
                    let std = gain * scale / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            F::of(z * std)
                        })
                        .collect()
                }
            };
            Ok((spec.name, Tensor::from_vec(&spec.shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let params = DssrParams::from_entries(entries)?;
    contract!(params.all_finite(), "initialization produced non-finite weights");
    Ok(params)
}
