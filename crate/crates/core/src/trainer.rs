//! End-to-end training with the loss on the final blended image only, and
//! frozen evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ATTENTION_MODULES, GROUP_FINETUNE, GROUP_G1, GROUP_G2, GROUP_REFINER};
use crate::objectives::{total_loss_on_tape, FeatureExtractor, ImageMetrics, LossValues, MetricReport};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::synthdata::{Dataset, Pair};
use crate::tensor::Tensor;

/// Seed of the default perceptual extractor.
pub const EXTRACTOR_SEED: u64 = 0x1795;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: LossValues,
}

pub const HISTORY_HEADER: &str = "step,l1,perceptual,ssim_loss,total";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(s, "{},{:.8},{:.8},{:.8},{:.8}", r.step, l.l1, l.perceptual, l.ssim_loss, l.total);
    }
    s
}

/// Gradient L2 norms per parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupNorms {
    pub groups: Vec<(String, f64)>,
}

impl GroupNorms {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub fn group_grad_norms(store: &ParamStore<f32>, grads: &Grads<f32>) -> GroupNorms {
    let mut prefixes: Vec<&str> = vec![GROUP_G1, GROUP_G2, GROUP_REFINER, GROUP_FINETUNE];
    prefixes.extend(ATTENTION_MODULES);
    let groups = prefixes
        .into_iter()
        .map(|p| {
            let sq: f64 = store
                .iter()
                .filter(|(_, n, _)| n.starts_with(p))
                .filter_map(|(id, _, _)| grads.param(id))
                .flat_map(|g| g.data().iter().map(|v| (*v as f64).powi(2)))
                .sum();
            (p.trim_end_matches('.').to_owned(), sq.sqrt())
        })
        .collect();
    GroupNorms { groups }
}

fn stack_images(pairs: &[&Pair], f: impl Fn(&Pair) -> Tensor<f32>) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = pairs.iter().map(|p| f(p)).collect();
    let first = items[0].shape();
    if let Some(bad) = items.iter().find(|t| t.shape() != first) {
        return Err(Error::shape(&first, &bad.shape()));
    }
    Ok(Tensor::stack(&items))
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: LossValues,
    pub grad_norms: GroupNorms,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub extractor: FeatureExtractor,
    pub step: u64,
    pub history: Vec<HistoryRow>,
}

/// Knobs of a training run beyond the model configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many total steps instead of the configured epochs.
    pub max_steps: Option<u64>,
    /// Where periodic checkpoints and the final one are written.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub evaluations: Vec<(u64, MetricReport)>,
}

impl Trainer {
    pub fn new(config: &ModelConfig, extractor: FeatureExtractor) -> Result<Self> {
        let model = Model::new(config, config.train.seed)?;
        let adam = Adam::new(&model.params, config.train.learning_rate);
        Ok(Trainer { model, adam, extractor, step: 0, history: Vec::new() })
    }

    /// Continues from a checkpoint, reusing its optimizer moments.
    pub fn resume(ckpt: &Checkpoint, extractor: FeatureExtractor) -> Result<Self> {
        let model = ckpt.to_model()?;
        let lr = model.config().train.learning_rate;
        let adam = match &ckpt.optimizer {
            Some(state) => Adam::with_state(&model.params, lr, state.clone())?,
            None => Adam::new(&model.params, lr),
        };
        Ok(Trainer { model, adam, extractor, step: ckpt.training_step, history: Vec::new() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, Some(&self.adam.state))
    }

    /// Forward, loss and gradients of one batch without updating.
    pub fn loss_and_grads(&self, batch: &[&Pair]) -> Result<(LossValues, Grads<f32>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let input = stack_images(batch, |p| p.input.to_rgb().into_tensor())?;
        let target = stack_images(batch, |p| p.target.to_rgb().into_tensor())?;
        if input.shape() != target.shape() {
            return Err(Error::shape(&input.shape(), &target.shape()));
        }
        let config = self.model.config();
        let masks = if config.use_g1 {
            None
        } else {
            let m = batch
                .iter()
                .map(|p| {
                    p.gt_mask.as_ref().map(|m| m.tensor().clone()).ok_or_else(|| {
                        Error::InvalidArgument(format!("{}: variant without G1 needs a mask per sample", p.name))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::stack(&m))
        };
        let tape = Tape::new(&self.model.params);
        let vars = self.model.net.forward(&tape, &input, masks.as_ref())?;
        let t = tape.constant(target);
        let loss = total_loss_on_tape(&tape, vars.b0, t, &config.loss_weights, &self.extractor)?;
        let values = LossValues::read(&tape, &loss);
        let grads = tape.backward(loss.total);
        Ok((values, grads))
    }

    pub fn train_step(&mut self, batch: &[&Pair]) -> Result<StepOutcome> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        let step = self.step + 1;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss is {}", loss.total) });
        }
        if let Some((_, name, _)) =
            self.model.params.iter().find(|(id, _, _)| grads.param(*id).is_some_and(|g| !g.all_finite()))
        {
            return Err(Error::Diverged { step, detail: format!("non-finite gradient in {name}") });
        }
        let grad_norms = group_grad_norms(&self.model.params, &grads);
        self.adam.step(&mut self.model.params, &grads);
        self.step = step;
        self.history.push(HistoryRow { step, loss });
        Ok(StepOutcome { loss, grad_norms })
    }

    /// Order of training indices within an epoch, fixed by seed and epoch.
    pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x2545_F491_4F6C_DD1D));
        order.shuffle(&mut rng);
        order
    }

    /// The batch taken at global step `step` (0-based).
    pub fn batch_at<'a>(&self, train: &'a [Pair], step: u64) -> Vec<&'a Pair> {
        let t = &self.model.config().train;
        let bs = t.batch_size.min(train.len());
        let per_epoch = train.len().div_ceil(bs) as u64;
        let epoch = step / per_epoch;
        let offset = (step % per_epoch) as usize * bs;
        let order = Self::epoch_order(t.seed, epoch, train.len());
        order[offset..(offset + bs).min(train.len())].iter().map(|&i| &train[i]).collect()
    }

    pub fn train(&mut self, data: &Dataset, opts: &TrainOptions) -> Result<TrainSummary> {
        if data.train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let t = self.model.config().train.clone();
        let per_epoch = data.train.len().div_ceil(t.batch_size.min(data.train.len())) as u64;
        let total = opts.max_steps.unwrap_or(per_epoch * t.epochs as u64);
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut summary = TrainSummary { steps: 0, first_loss: None, last_loss: None, evaluations: Vec::new() };
        while self.step < total {
            let batch = self.batch_at(&data.train, self.step);
            let out = self.train_step(&batch)?;
            summary.steps += 1;
            summary.first_loss.get_or_insert(out.loss.total);
            summary.last_loss = Some(out.loss.total);
            log::debug!("step {} total {:.5}", self.step, out.loss.total);
            if t.eval_every > 0 && self.step % t.eval_every as u64 == 0 {
                if !data.eval.is_empty() {
                    let report = evaluate(&self.model, &data.eval, &self.extractor, false)?;
                    log::info!("step {} eval psnr {:.3} ssim {:.4}", self.step, report.psnr, report.ssim);
                    summary.evaluations.push((self.step, report));
                }
                if let Some(dir) = &opts.checkpoint_dir {
                    self.checkpoint().save(dir.join(format!("step{:07}.ampn", self.step)))?;
                }
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            self.checkpoint().save(dir.join("last.ampn"))?;
            std::fs::write(dir.join("history.csv"), history_csv(&self.history))?;
        }
        Ok(summary)
    }

    pub fn write_history(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, history_csv(&self.history))?;
        Ok(())
    }
}

/// Frozen forward pass over `pairs`. A variant without G1 uses each
/// pair's ground-truth mask.
pub fn evaluate(model: &Model, pairs: &[Pair], extractor: &FeatureExtractor, quantize: bool) -> Result<MetricReport> {
    let mut rows: Vec<ImageMetrics> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mask = if model.config().use_g1 { None } else { p.gt_mask.as_ref() };
        let out = model.render(&p.input, mask)?;
        if out.image.shape() != p.target.to_rgb().shape() {
            return Err(Error::shape(&p.target.shape(), &out.image.shape()));
        }
        rows.push(MetricReport::measure(&p.name, &out.image, &p.target.to_rgb(), quantize, extractor)?);
    }
    MetricReport::from_images(rows, quantize, &extractor.label)
}
