//! Patch sampling, the joint detail + SR loss, Adam and the training loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::degradation::{check_scale, degrade, sample_training_spec, DegradationSpec, KernelKind};
use crate::error::{contract, shape_check, Error, Result};
use crate::imaging::{bicubic_resize, load_image, Image};
use crate::model::{Checkpoint, Dssr, DssrParams, OptimizerState, StepOutput};
use crate::tensor::{Float, Tensor};

/// Columns of the training log.
pub const LOG_HEADER: &str = "iter,lr,detail_loss,sr_loss,total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the detail term.
    pub alpha: f64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_iters: u64,
    pub lr_halve_every: u64,
    pub batch: usize,
    /// LR patch side in pixels.
    pub lr_patch: usize,
    pub kernel_kind: KernelKind,
    pub scale: usize,
    pub seed: u64,
    /// Iterations between checkpoints (0 = only at the end).
    pub checkpoint_every: u64,
    /// Batch preparation threads (0 = prepare on the training thread).
    pub workers: usize,
}

impl TrainConfig {
    /// Full-scale schedule.
    pub fn full(scale: usize) -> Self {
        TrainConfig {
            alpha: 1.0,
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            total_iters: 480_000,
            lr_halve_every: 80_000,
            batch: 8,
            lr_patch: 64,
            kernel_kind: KernelKind::Isotropic,
            scale,
            seed: 0,
            checkpoint_every: 5_000,
            workers: 0,
        }
    }

    /// Schedule sized for a single CPU core.
    pub fn desk(scale: usize) -> Self {
        TrainConfig {
            total_iters: 20_000,
            lr_halve_every: 4_000,
            lr0: 5e-4,
            batch: 4,
            lr_patch: 24,
            checkpoint_every: 1_000,
            ..Self::full(scale)
        }
    }

    /// Short run for smoke tests.
    pub fn tiny(scale: usize) -> Self {
        TrainConfig {
            total_iters: 200,
            lr_halve_every: 100,
            lr0: 1e-3,
            batch: 2,
            lr_patch: 12,
            checkpoint_every: 0,
            ..Self::full(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        contract!(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be positive, got {}", self.lr0);
        contract!(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be >= 0, got {}", self.alpha);
        contract!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        contract!(self.eps > 0.0, "eps must be positive");
        contract!(self.batch >= 1, "batch must be >= 1");
        contract!(self.lr_patch >= self.scale, "lr_patch {} must be >= scale {}", self.lr_patch, self.scale);
        contract!(self.lr_halve_every >= 1, "lr_halve_every must be >= 1");
        Ok(())
    }

    /// Learning rate used by (1-based) iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let halvings = (iter / self.lr_halve_every).min(1074) as i32;
        self.lr0 * 0.5f64.powi(halvings)
    }

    pub fn hr_patch(&self) -> usize {
        self.lr_patch * self.scale
    }
}

/// HR training images, cropped to a multiple of the scale and in RGB.
#[derive(Clone, Debug)]
pub struct Corpus {
    images: Vec<(String, Image)>,
}

impl Corpus {
    /// Keeps images whose sides are at least `min_side` after cropping.
    pub fn from_images(images: Vec<(String, Image)>, scale: usize, min_side: usize) -> Result<Self> {
        let mut kept = Vec::with_capacity(images.len());
        for (name, img) in images {
            let img = img.to_rgb().crop_to_multiple(scale)?;
            if img.height() < min_side || img.width() < min_side {
                warn!(
                    "skipping {name}: {}x{} is smaller than the {min_side}px HR patch",
                    img.height(),
                    img.width()
                );
                continue;
            }
            kept.push((name, img));
        }
        if kept.is_empty() {
            return Err(Error::Contract(format!("training corpus has no image of at least {min_side}px")));
        }
        Ok(Corpus { images: kept })
    }

    /// Loads every PNG/JPEG in `dir` (sorted by file name).
    pub fn load_dir(dir: impl AsRef<Path>, scale: usize, min_side: usize) -> Result<Self> {
        let images = read_image_dir(dir)?;
        Self::from_images(images, scale, min_side)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[(String, Image)] {
        &self.images
    }
}

pub(crate) fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// `(file stem, image)` for every PNG/JPEG in `dir`, sorted by file name.
pub fn read_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Contract(format!("{} contains no PNG/JPEG images", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_image(&p)?))
        })
        .collect()
}

/// One training batch, all `[n, 3, ·, ·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub lr: Tensor<F>,
    pub hr: Tensor<F>,
    /// Bicubic upsampling of `lr`.
    pub ihat: Tensor<F>,
    /// `hr - ihat`.
    pub detail_label: Tensor<F>,
}

impl<F: Float> Batch<F> {
    pub fn cast<G: Float>(&self) -> Batch<G> {
        Batch {
            lr: self.lr.cast(),
            hr: self.hr.cast(),
            ihat: self.ihat.cast(),
            detail_label: self.detail_label.cast(),
        }
    }
}

/// Seed reported in diagnostics for the batch of iteration `iter`.
pub fn batch_seed(seed: u64, iter: u64) -> u64 {
    seed ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generator for the batch of iteration `iter`: batches depend only on
/// `(seed, iter)`, so resuming or prefetching never changes them.
pub fn batch_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

/// Degrades only a window around an HR patch. The margin covers the blur
/// radius and the bicubic support, so the result equals cropping the
/// degraded full image.
pub(crate) fn degrade_patch(
    hr: &Image,
    spec: &DegradationSpec,
    top: usize,
    left: usize,
    size: usize,
) -> Result<Image> {
    let s = spec.scale;
    contract!(
        top.is_multiple_of(s) && left.is_multiple_of(s) && size.is_multiple_of(s),
        "patch must be aligned to the scale"
    );
    contract!(hr.height().is_multiple_of(s) && hr.width().is_multiple_of(s), "HR image must be cropped to the scale");
    let reach = spec.kernel.size() / 2 + 2 * s + 2;
    let margin = reach.div_ceil(s) * s;
    let wt = top.saturating_sub(margin);
    let wl = left.saturating_sub(margin);
    let wb = (top + size + margin).min(hr.height());
    let wr = (left + size + margin).min(hr.width());
    let window = hr.crop(wt, wl, wb - wt, wr - wl)?;
    let lr = degrade(&window, spec)?;
    lr.crop((top - wt) / s, (left - wl) / s, size / s, size / s)
}

/// Random LR/HR patch pair with consistent flip and rotation.
pub fn sample_pair<R: Rng + ?Sized>(corpus: &Corpus, cfg: &TrainConfig, rng: &mut R) -> Result<(Image, Image)> {
    let s = cfg.scale;
    let (_, img) = &corpus.images[rng.random_range(0..corpus.len())];
    let spec = sample_training_spec(s, cfg.kernel_kind, rng)?;
    let hp = cfg.hr_patch();
    let top = rng.random_range(0..=(img.height() - hp) / s) * s;
    let left = rng.random_range(0..=(img.width() - hp) / s) * s;
    let mut lr = degrade_patch(img, &spec, top, left, hp)?;
    let mut hr = img.crop(top, left, hp, hp)?;
    if rng.random_bool(0.5) {
        lr = lr.flip_horizontal();
        hr = hr.flip_horizontal();
    }
    if rng.random_bool(0.5) {
        lr = lr.rot90();
        hr = hr.rot90();
    }
    Ok((lr, hr))
}

/// Builds a batch from LR/HR pairs.
pub fn make_batch<F: Float>(pairs: &[(Image, Image)], scale: usize) -> Result<Batch<F>> {
    let mut lrs = Vec::with_capacity(pairs.len());
    let mut hrs = Vec::with_capacity(pairs.len());
    let mut ihats = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for (lr, hr) in pairs {
        let (lr, hr) = (lr.to_rgb(), hr.to_rgb());
        shape_check!(
            hr.height() == lr.height() * scale && hr.width() == lr.width() * scale,
            "HR {}x{} is not {scale}x LR {}x{}",
            hr.height(),
            hr.width(),
            lr.height(),
            lr.width()
        );
        let ihat = bicubic_resize(&lr, hr.height(), hr.width())?;
        let label = hr.zip_map(&ihat, |a, b| a - b)?;
        lrs.push(lr.to_tensor());
        hrs.push(hr.to_tensor());
        ihats.push(ihat.to_tensor());
        labels.push(label.to_tensor());
    }
    Ok(Batch {
        lr: Tensor::stack(&lrs)?,
        hr: Tensor::stack(&hrs)?,
        ihat: Tensor::stack(&ihats)?,
        detail_label: Tensor::stack(&labels)?,
    })
}

/// The batch of iteration `iter`.
pub fn sample_batch<F: Float>(corpus: &Corpus, cfg: &TrainConfig, iter: u64) -> Result<Batch<F>> {
    let mut rng = batch_rng(cfg.seed, iter);
    let pairs = (0..cfg.batch)
        .map(|_| sample_pair(corpus, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    make_batch(&pairs, cfg.scale)
}

/// Loss nodes of one unrolled forward pass.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub detail: Vec<Var>,
    pub sr: Vec<Var>,
}

/// `Σ_t α·L1(label, detail_t) + L1(hr, sr_t)`, mean-reduced L1.
pub fn loss_graph<F: Float>(
    g: &mut Graph<F>,
    outputs: &[StepOutput<Var>],
    hr: Var,
    detail_label: Var,
    alpha: f64,
) -> Result<LossVars> {
    contract!(!outputs.is_empty(), "loss needs at least one step");
    let mut detail = Vec::with_capacity(outputs.len());
    let mut sr = Vec::with_capacity(outputs.len());
    let mut total: Option<Var> = None;
    for o in outputs {
        let d = g.l1(o.detail_hr, detail_label)?;
        let r = g.l1(o.sr, hr)?;
        let wd = g.scale(d, F::of(alpha));
        let step = g.add(wd, r)?;
        total = Some(match total {
            None => step,
            Some(t) => g.add(t, step)?,
        });
        detail.push(d);
        sr.push(r);
    }
    Ok(LossVars {
        total: total.expect("non-empty"),
        detail,
        sr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted `(detail, sr)` L1 per step.
    pub per_step: Vec<(f64, f64)>,
}

impl LossReport {
    pub fn detail(&self) -> f64 {
        self.per_step.iter().map(|p| p.0).sum()
    }

    pub fn sr(&self) -> f64 {
        self.per_step.iter().map(|p| p.1).sum()
    }
}

fn mean_abs_diff<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    shape_check!(a.shape() == b.shape(), "loss operands {:?} vs {:?}", a.shape(), b.shape());
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Tensor-level loss, accumulated in `f64`.
pub fn loss<F: Float>(
    outputs: &[StepOutput<Tensor<F>>],
    hr: &Tensor<F>,
    detail_label: &Tensor<F>,
    alpha: f64,
) -> Result<LossReport> {
    contract!(!outputs.is_empty(), "loss needs at least one step");
    let mut per_step = Vec::with_capacity(outputs.len());
    let mut total = 0.0;
    for o in outputs {
        let d = mean_abs_diff(&o.detail_hr, detail_label)?;
        let r = mean_abs_diff(&o.sr, hr)?;
        total += alpha * d + r;
        per_step.push((d, r));
    }
    Ok(LossReport { total, per_step })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl Adam {
    pub fn new(params: &DssrParams<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &DssrParams<f32>| {
            let mut z = p.clone();
            for (_, t) in z.iter_mut() {
                t.data_mut().fill(0.0);
            }
            z
        };
        Adam {
            beta1,
            beta2,
            eps,
            state: OptimizerState {
                step: 0,
                m: zeros(params),
                v: zeros(params),
            },
        }
    }

    pub fn from_state(state: OptimizerState, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            state,
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// One update. `grad(name)` returns the gradient of a parameter or
    /// `None` when it received none.
    pub fn update<'g>(
        &mut self,
        params: &mut DssrParams<f32>,
        lr: f64,
        grad: impl Fn(&str) -> Option<&'g Tensor<f32>>,
    ) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, p) in params.iter_mut() {
            let m = self
                .state
                .m
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("optimizer has no moments for `{name}`")))?;
            let v = self.state.v.get_mut(name).expect("moments share a layout");
            let Some(g) = grad(name) else {
                continue;
            };
            shape_check!(g.shape() == p.shape(), "gradient of `{name}` has shape {:?}", g.shape());
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub lr: f64,
    pub detail_loss: f64,
    pub sr_loss: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:.9e},{:.9e},{:.9e}", self.iter, self.lr, self.detail_loss, self.sr_loss, self.total)
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Parse(format!("malformed log row `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(LossRecord {
            iter: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            detail_loss: num(f[2])?,
            sr_loss: num(f[3])?,
            total: num(f[4])?,
        })
    }
}

/// Reads a training log written by [`Trainer::run`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(LossRecord::parse_csv_row)
        .collect()
}

/// Output locations of a training run.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Dssr<f32>,
    adam: Adam,
    iter: u64,
    history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Dssr<f32>) -> Result<Self> {
        cfg.validate()?;
        contract!(
            cfg.scale == model.config().scale,
            "training scale {} does not match model scale {}",
            cfg.scale,
            model.config().scale
        );
        let adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Trainer {
            cfg,
            model,
            adam,
            iter: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint, keeping its weights, moments and
    /// iteration counter.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, ckpt.model)?;
        if let Some(state) = ckpt.optimizer {
            t.adam = Adam::from_state(state, t.cfg.beta1, t.cfg.beta2, t.cfg.eps);
        }
        t.iter = ckpt.iter;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Dssr<f32> {
        &self.model
    }

    pub fn into_model(self) -> Dssr<f32> {
        self.model
    }

    /// Completed iterations.
    pub fn iter(&self) -> u64 {
        self.iter
    }

    /// Records produced by this trainer instance.
    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.adam.state().clone()),
            iter: self.iter,
            extra: serde_json::json!({ "train": serde_json::to_value(&self.cfg).map_err(|e| Error::Parse(e.to_string()))? }),
        })
    }

    /// One optimization step on `batch`.
    pub fn step(&mut self, batch: &Batch<f32>) -> Result<LossRecord> {
        let iter = self.iter + 1;
        let lr = self.cfg.lr_at(iter);
        let mut g = Graph::new();
        let bound = self.model.bind_trainable(&mut g);
        let lr_v = g.input(batch.lr.clone());
        let ihat_v = g.input(batch.ihat.clone());
        let hr_v = g.input(batch.hr.clone());
        let label_v = g.input(batch.detail_label.clone());
        let steps = self.model.config().steps;
        let outs = self.model.forward(&mut g, &bound).unroll(lr_v, ihat_v, steps)?;
        let terms = loss_graph(&mut g, &outs, hr_v, label_v, self.cfg.alpha)?;
        let scalar = |v: Var| g.value(v).item().to_f64();
        let detail_loss: f64 = terms.detail.iter().map(|&v| scalar(v)).sum();
        let sr_loss: f64 = terms.sr.iter().map(|&v| scalar(v)).sum();
        let total = scalar(terms.total);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                iter,
                lr,
                batch_seed: batch_seed(self.cfg.seed, iter),
            });
        }
        let grads = g.backward(terms.total)?;
        self.adam
            .update(self.model.params_mut(), lr, |name| bound.get(name).and_then(|v| grads.get(v)))?;
        self.iter = iter;
        let rec = LossRecord {
            iter,
            lr,
            detail_loss,
            sr_loss,
            total,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `total_iters`, appending to the log and writing
    /// checkpoints. Log rows past the current iteration (left by an
    /// interrupted run) are discarded first.
    pub fn run(&mut self, corpus: &Arc<Corpus>, paths: &RunPaths, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        let mut log = match &paths.log {
            Some(p) => Some(open_log(p, self.iter)?),
            None => None,
        };
        let end = self.cfg.total_iters;
        if self.iter >= end {
            return Ok(());
        }
        let batches = BatchSource::new(Arc::clone(corpus), self.cfg.clone(), self.iter + 1, end);
        info!("training iterations {}..={end}", self.iter + 1);
        for next in self.iter + 1..=end {
            let batch = batches.get(next)?;
            let rec = self.step(&batch)?;
            if let Some((p, w)) = log.as_mut() {
                writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            on_step(&rec);
            let every = self.cfg.checkpoint_every;
            if next == end || (every > 0 && next % every == 0) {
                if let Some((p, w)) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(p.as_path(), e))?;
                }
                if let Some(path) = &paths.checkpoint {
                    self.checkpoint()?.save(path)?;
                }
            }
        }
        Ok(())
    }
}

fn open_log(path: &Path, keep_through: u64) -> Result<(PathBuf, BufWriter<fs::File>)> {
    let mut text = format!("{LOG_HEADER}\n");
    if keep_through > 0 && path.exists() {
        for rec in read_log(path)? {
            if rec.iter <= keep_through {
                text.push_str(&rec.csv_row());
                text.push('\n');
            }
        }
    }
    fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    let f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok((path.to_path_buf(), BufWriter::new(f)))
}

/// Batches in iteration order, either built inline or prefetched by
/// worker threads through bounded queues. Worker `k` handles the
/// iterations congruent to `k`, so the order never depends on timing.
enum BatchSource {
    Inline { corpus: Arc<Corpus>, cfg: TrainConfig },
    Workers { start: u64, queues: Vec<Receiver<Result<Batch<f32>>>> },
}

impl BatchSource {
    fn new(corpus: Arc<Corpus>, cfg: TrainConfig, start: u64, end: u64) -> Self {
        if cfg.workers == 0 {
            return BatchSource::Inline { corpus, cfg };
        }
        let n = cfg.workers as u64;
        let queues = (0..n)
            .map(|k| {
                let (tx, rx) = sync_channel(2);
                let corpus = Arc::clone(&corpus);
                let cfg = cfg.clone();
                std::thread::spawn(move || {
                    let mut it = start + k;
                    while it <= end {
                        if tx.send(sample_batch(&corpus, &cfg, it)).is_err() {
                            break;
                        }
                        it += n;
                    }
                });
                rx
            })
            .collect();
        BatchSource::Workers { start, queues }
    }

    fn get(&self, iter: u64) -> Result<Batch<f32>> {
        match self {
            BatchSource::Inline { corpus, cfg } => sample_batch(corpus, cfg, iter),
            BatchSource::Workers { start, queues } => {
                let k = ((iter - start) % queues.len() as u64) as usize;
                queues[k]
                    .recv()
                    .map_err(|_| Error::Contract("batch worker stopped unexpectedly".into()))?
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::make_isotropic_kernel;
    use crate::degradation::Downsampler;
    use crate::imaging::ColorSpace;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, ColorSpace::Rgb, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn windowed_degradation_matches_full() {
        let hr = noise(60, 72, 3);
        for scale in [2, 3, 4] {
            let hr = hr.crop_to_multiple(scale).unwrap();
            let spec = DegradationSpec {
                scale,
                kernel: make_isotropic_kernel(21, 1.7).unwrap(),
                downsampler: Downsampler::Bicubic,
            };
            let full = degrade(&hr, &spec).unwrap();
            let size = 8 * scale;
            for (top, left) in [(0, 0), (scale * 3, scale * 5), (hr.height() - size, hr.width() - size)] {
                let patch = degrade_patch(&hr, &spec, top, left, size).unwrap();
                let want = full.crop(top / scale, left / scale, 8, 8).unwrap();
                let diff = patch.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "scale {scale} at ({top},{left}): {diff}");
            }
        }
    }

    #[test]
    fn schedule_halves() {
        let cfg = TrainConfig::desk(2);
        assert_eq!(cfg.lr_at(1), cfg.lr0);
        assert_eq!(cfg.lr_at(cfg.lr_halve_every - 1), cfg.lr0);
        assert_eq!(cfg.lr_at(cfg.lr_halve_every), cfg.lr0 / 2.0);
        assert_eq!(cfg.lr_at(3 * cfg.lr_halve_every), cfg.lr0 / 8.0);
    }

    #[test]
    fn log_row_round_trip() {
        let r = LossRecord {
            iter: 12,
            lr: 2e-4,
            detail_loss: 0.123456789,
            sr_loss: 1.5,
            total: 1.623456789,
        };
        let back = LossRecord::parse_csv_row(&r.csv_row()).unwrap();
        assert_eq!(back.csv_row(), r.csv_row());
        assert_eq!(back.iter, 12);
    }

    #[test]
    fn constant_offset_loss() {
        let hr = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
        let label = Tensor::<f64>::full(&[1, 3, 4, 4], 0.1);
        let out = StepOutput {
            sr: hr.map(|v| v + 0.25),
            detail_hr: label.clone(),
            hidden: Tensor::zeros(&[1, 2, 2, 2]),
        };
        let r = loss(&[out], &hr, &label, 1.0).unwrap();
        assert!((r.total - 0.25).abs() < 1e-15);
    }
}
