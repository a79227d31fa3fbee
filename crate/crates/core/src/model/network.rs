use std::collections::HashMap;

use super::{DssrConfig, DssrParams, LRELU_SLOPE};
use crate::autograd::{Graph, Var};
use crate::error::{shape_check, Error, Result};
use crate::imaging::resize_tensor;
use crate::tensor::{Float, Tensor};
use crate::variants::{Stage, VariantKind};

/// Outputs of one recurrent step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    /// Super-resolved image, `[n, 3, sH, sW]`.
    pub sr: T,
    /// Predicted HR detail map, `[n, 3, sH, sW]`.
    pub detail_hr: T,
    /// Modulated LR structure features passed to the next step, `[n, C, H, W]`.
    pub hidden: T,
}

/// Intermediate maps of the structure modulation unit.
#[derive(Clone, Copy, Debug)]
pub struct SmuParts {
    pub detail_lr: Var,
    /// HR structure map after HR modulation.
    pub s_hat_hr: Var,
    /// Bicubic downsampling of `s_hat_hr`.
    pub s_hat_lr: Var,
    /// LR structure map after LR modulation.
    pub s_tilde_lr: Var,
    /// `lift(s_tilde_lr) + f_in`.
    pub hidden: Var,
}

/// Parameter leaves of a network inserted into a [`Graph`].
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// A network: configuration, variant and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dssr<F> {
    config: DssrConfig,
    variant: VariantKind,
    params: DssrParams<F>,
}

impl<F: Float> Dssr<F> {
    pub fn new(config: DssrConfig, variant: VariantKind, params: DssrParams<F>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config, variant)?;
        Ok(Dssr { config, variant, params })
    }

    pub fn config(&self) -> &DssrConfig {
        &self.config
    }

    pub fn variant(&self) -> VariantKind {
        self.variant
    }

    pub fn params(&self) -> &DssrParams<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DssrParams<F> {
        &mut self.params
    }

    pub fn into_params(self) -> DssrParams<F> {
        self.params
    }

    pub fn cast<G: Float>(&self) -> Dssr<G> {
        Dssr {
            config: self.config.clone(),
            variant: self.variant,
            params: self.params.cast(),
        }
    }

    /// Inserts every parameter as a trainable leaf.
    pub fn bind_trainable(&self, g: &mut Graph<F>) -> BoundParams {
        let vars = self.params.iter().map(|(n, t)| (n.to_string(), g.param(t.clone()))).collect();
        BoundParams { vars }
    }

    /// Inserts every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> BoundParams {
        let vars = self.params.iter().map(|(n, t)| (n.to_string(), g.input(t.clone()))).collect();
        BoundParams { vars }
    }

    /// Bicubic upsampling of an LR batch by the network scale.
    pub fn upsample_input(&self, lr: &Tensor<F>) -> Result<Tensor<F>> {
        let (_, c, h, w) = lr.dims4()?;
        shape_check!(c == 3, "network input must have 3 channels, got {c}");
        let s = self.config.scale;
        resize_tensor(lr, h * s, w * s)
    }

    /// Zero initial hidden state for an LR batch.
    pub fn zero_hidden(&self, lr: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, _, h, w) = lr.dims4()?;
        Ok(Tensor::zeros(&[n, self.config.channels, h, w]))
    }

    /// One recurrent step on an `[n, 3, H, W]` batch. `hidden_prev = None`
    /// starts from the zero state.
    pub fn forward_step(&self, lr: &Tensor<F>, hidden_prev: Option<&Tensor<F>>) -> Result<StepOutput<Tensor<F>>> {
        let ihat = self.upsample_input(lr)?;
        let hidden_prev = match hidden_prev {
            Some(h) => h.clone(),
            None => self.zero_hidden(lr)?,
        };
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let lr_v = g.input(lr.clone());
        let ihat_v = g.input(ihat);
        let h_v = g.input(hidden_prev);
        let out = self.forward(&mut g, &p).forward_step(lr_v, ihat_v, h_v)?;
        Ok(collect(&g, &out))
    }

    /// Runs `steps` recurrent steps from the zero state.
    pub fn unroll(&self, lr: &Tensor<F>, steps: usize) -> Result<Vec<StepOutput<Tensor<F>>>> {
        let ihat = self.upsample_input(lr)?;
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let lr_v = g.input(lr.clone());
        let ihat_v = g.input(ihat);
        let outs = self.forward(&mut g, &p).unroll(lr_v, ihat_v, steps)?;
        Ok(outs.iter().map(|o| collect(&g, o)).collect())
    }

    pub fn forward<'a>(&'a self, graph: &'a mut Graph<F>, params: &'a BoundParams) -> Forward<'a, F> {
        Forward {
            graph,
            params,
            config: &self.config,
            variant: self.variant,
        }
    }
}

fn collect<F: Float>(g: &Graph<F>, o: &StepOutput<Var>) -> StepOutput<Tensor<F>> {
    StepOutput {
        sr: g.value(o.sr).clone(),
        detail_hr: g.value(o.detail_hr).clone(),
        hidden: g.value(o.hidden).clone(),
    }
}

/// Builds the network's ops on a graph.
pub struct Forward<'a, F> {
    pub graph: &'a mut Graph<F>,
    params: &'a BoundParams,
    pub(crate) config: &'a DssrConfig,
    pub(crate) variant: VariantKind,
}

impl<F: Float> Forward<'_, F> {
    fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("network has no parameter `{name}`")))
    }

    /// Convolution `prefix.weight` / `prefix.bias` with the given padding.
    pub(crate) fn conv(&mut self, prefix: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.conv2d(x, w, Some(b), pad)
    }

    pub(crate) fn lrelu(&mut self, x: Var) -> Var {
        self.graph.leaky_relu(x, F::of(LRELU_SLOPE))
    }

    fn res_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.conv(&format!("{prefix}.conv1"), x, 1)?;
        let h = self.lrelu(h);
        let h = self.conv(&format!("{prefix}.conv2"), h, 1)?;
        self.graph.add(x, h)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.graph.value(v).dims4()
    }

    /// Shallow features of the LR input.
    pub fn shallow(&mut self, lr: Var) -> Result<Var> {
        let (_, c, _, _) = self.dims(lr)?;
        shape_check!(c == 3, "network input must have 3 channels, got {c}");
        self.conv("shallow", lr, 1)
    }

    /// 1×1 compression of `[hidden_prev, f_in]`.
    pub fn fuse_hidden(&mut self, f_in: Var, hidden_prev: Var) -> Result<Var> {
        shape_check!(
            self.dims(f_in)? == self.dims(hidden_prev)?,
            "hidden state {:?} does not match features {:?}",
            self.graph.value(hidden_prev).shape(),
            self.graph.value(f_in).shape()
        );
        let cat = self.graph.concat(&[hidden_prev, f_in])?;
        self.conv("fusion", cat, 0)
    }

    /// Structure map `s_hr` and detail map `s_hr - ihat`.
    pub fn dru_forward(&mut self, fused: Var, ihat: Var) -> Result<(Var, Var)> {
        let (n, _, h, w) = self.dims(fused)?;
        let s = self.config.scale;
        shape_check!(
            self.dims(ihat)? == (n, 3, h * s, w * s),
            "upsampled input {:?} does not match features {:?} at scale {s}",
            self.graph.value(ihat).shape(),
            self.graph.value(fused).shape()
        );
        let mut x = fused;
        for i in 0..self.config.stru_fe_blocks {
            x = self.res_block(&format!("dru.body.{i}"), x)?;
        }
        let (_, stride, pad) = self.config.deconv_geometry();
        let w_up = self.param("dru.upsample.weight")?;
        let b_up = self.param("dru.upsample.bias")?;
        let x = self.graph.conv_transpose2d(x, w_up, Some(b_up), stride, pad)?;
        let x = self.lrelu(x);
        let s_hr = self.conv("dru.project", x, 1)?;
        let detail = self.graph.sub(s_hr, ihat)?;
        Ok((s_hr, detail))
    }

    fn detail_features(&mut self, stage: Stage, m: Var) -> Result<Var> {
        let mut x = m;
        for j in 0..self.config.detail_fe_convs_per_branch {
            x = self.conv(&format!("smu.detail_{}.{j}", stage.tag()), x, 1)?;
            x = self.lrelu(x);
        }
        Ok(x)
    }

    /// Structure modulation with all intermediate maps exposed.
    pub fn smu_parts(&mut self, detail_hr: Var, s_hr: Var, f_in: Var) -> Result<SmuParts> {
        let (n, _, h, w) = self.dims(f_in)?;
        let s = self.config.scale;
        shape_check!(
            self.dims(detail_hr)? == (n, 3, h * s, w * s) && self.dims(s_hr)? == (n, 3, h * s, w * s),
            "detail {:?} / structure {:?} do not match features {:?}",
            self.graph.value(detail_hr).shape(),
            self.graph.value(s_hr).shape(),
            self.graph.value(f_in).shape()
        );
        let detail_lr = self.graph.resize(detail_hr, h, w)?;
        let d_hr = if self.variant.modulates(Stage::Hr) {
            Some(self.detail_features(Stage::Hr, detail_hr)?)
        } else {
            None
        };
        let d_lr = if self.variant.modulates(Stage::Lr) {
            Some(self.detail_features(Stage::Lr, detail_lr)?)
        } else {
            None
        };
        let s_hat_hr = self.modulate(Stage::Hr, s_hr, d_hr)?;
        let s_hat_lr = self.graph.resize(s_hat_hr, h, w)?;
        let s_tilde_lr = self.modulate(Stage::Lr, s_hat_lr, d_lr)?;
        let lifted = self.conv("smu.lift", s_tilde_lr, 0)?;
        let hidden = self.graph.add(lifted, f_in)?;
        Ok(SmuParts {
            detail_lr,
            s_hat_hr,
            s_hat_lr,
            s_tilde_lr,
            hidden,
        })
    }

    /// New hidden state `S_LR`.
    pub fn smu_forward(&mut self, detail_hr: Var, s_hr: Var, f_in: Var) -> Result<Var> {
        Ok(self.smu_parts(detail_hr, s_hr, f_in)?.hidden)
    }

    /// `(residual, sr)` with `sr = residual + ihat`.
    pub fn reconstruct_parts(&mut self, hidden: Var, ihat: Var) -> Result<(Var, Var)> {
        let (n, _, h, w) = self.dims(hidden)?;
        let s = self.config.scale;
        shape_check!(
            self.dims(ihat)? == (n, 3, h * s, w * s),
            "upsampled input {:?} does not match hidden {:?}",
            self.graph.value(ihat).shape(),
            self.graph.value(hidden).shape()
        );
        let mut x = hidden;
        for i in 0..self.config.recon_blocks {
            x = self.res_block(&format!("recon.body.{i}"), x)?;
        }
        let x = self.conv("recon.upsample", x, 1)?;
        let x = self.graph.pixel_shuffle(x, s)?;
        let residual = self.conv("recon.output", x, 1)?;
        let sr = self.graph.add(residual, ihat)?;
        Ok((residual, sr))
    }

    pub fn reconstruct(&mut self, hidden: Var, ihat: Var) -> Result<Var> {
        Ok(self.reconstruct_parts(hidden, ihat)?.1)
    }

    pub fn forward_step(&mut self, lr: Var, ihat: Var, hidden_prev: Var) -> Result<StepOutput<Var>> {
        let f_in = self.shallow(lr)?;
        let fused = self.fuse_hidden(f_in, hidden_prev)?;
        let (s_hr, detail_hr) = self.dru_forward(fused, ihat)?;
        let hidden = self.smu_forward(detail_hr, s_hr, f_in)?;
        let sr = self.reconstruct(hidden, ihat)?;
        Ok(StepOutput { sr, detail_hr, hidden })
    }

    /// `steps` forward steps sharing weights, threading the hidden state
    /// from zeros.
    pub fn unroll(&mut self, lr: Var, ihat: Var, steps: usize) -> Result<Vec<StepOutput<Var>>> {
        if steps == 0 {
            return Err(Error::Contract("unroll needs at least one step".into()));
        }
        let (n, _, h, w) = self.dims(lr)?;
        let mut hidden = self.graph.input(Tensor::zeros(&[n, self.config.channels, h, w]));
        let mut outs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let out = self.forward_step(lr, ihat, hidden)?;
            hidden = out.hidden;
            outs.push(out);
        }
        Ok(outs)
    }
}
