//! Training loop, evaluation, ablations and the artifact plumbing behind the
//! command-line tool.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod gradreport;
mod optim;

pub use ablate::{ablate, ablation_settings, holdout_split, AblationAxis, AblationRow, AblationSetting, AblationTable};
pub use checkpoint::{Checkpoint, RngState, MAGIC as CHECKPOINT_MAGIC};
pub use config::TrainConfig;
pub use eval::{evaluate, export_obj, predict, score, EvalOptions, EvalReport, Prediction, SampleMetrics};
pub use gradreport::{gradcheck, GradcheckOptions, GradcheckReport, TermCheck};
pub use optim::Adam;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::losses::{mpjpe, LossParts, SmoothTerms};
use crate::mesh::MeshTemplate;
use crate::model::{Batch, Model, Targets};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::synthetic::{default_rig, Dataset, MultiViewSample};

/// Millimetres per length unit; the synthetic bodies are in metres.
pub const MM_PER_UNIT: f64 = 1000.0;

/// Stream of the seed used for weight initialisation; training randomness
/// (shuffling, dropout, masking) uses stream 1.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

/// The rig the model sees: the dataset's default rig cut to `n_views`.
pub fn model_rig(config: &TrainConfig, n_views: usize) -> Result<CameraRig> {
    default_rig(config.max_views, config.image_size)?.truncated(n_views)
}

pub fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<()> {
    let h = &data.header;
    if h.n_views != config.max_views || h.height != config.image_size || h.width != config.image_size {
        return Err(Error::shape(
            "dataset",
            format!("{} views of {}x{}", config.max_views, config.image_size, config.image_size),
            format!("{} views of {}x{}", h.n_views, h.height, h.width),
        ));
    }
    if h.n_vertices != config.m_full || h.n_joints != crate::mesh::skeleton::NUM_JOINTS {
        return Err(Error::shape(
            "dataset",
            format!("{} vertices, {} joints", config.m_full, crate::mesh::skeleton::NUM_JOINTS),
            format!("{} vertices, {} joints", h.n_vertices, h.n_joints),
        ));
    }
    Ok(())
}

/// Samples restricted to the first `n` views.
pub fn first_views(samples: &[&MultiViewSample], n: usize) -> Vec<MultiViewSample> {
    let idx: Vec<usize> = (0..n).collect();
    samples.iter().map(|s| s.select_views(&idx)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossRecord {
    pub total: f64,
    pub joint: f64,
    pub vertex: f64,
    pub align: f64,
    pub smooth: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TrainMetrics {
    /// Master-view MPJPE of the training-mode predictions, averaged over
    /// the epoch's batches.
    pub train_mpjpe_mm: f64,
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub steps: u64,
    pub loss: LossRecord,
    pub metrics: TrainMetrics,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub parts: LossParts,
    /// Master-view MPJPE of this step's predictions, in millimetres.
    pub mpjpe_mm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub step: u64,
    rig: CameraRig,
    smooth: SmoothTerms,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let template = MeshTemplate::new(config.template())?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let model = Model::new(config.model(), template, &mut store, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        let adam = Adam::new(store.len(), config.adam_beta1, config.adam_beta2, config.adam_eps);
        Self::assemble(config, model, store, adam, rng, 0, 0)
    }

    fn assemble(
        config: TrainConfig,
        model: Model,
        store: ParamStore,
        adam: Adam,
        rng: ChaCha8Rng,
        epoch: u64,
        step: u64,
    ) -> Result<Self> {
        let rig = model_rig(&config, config.n_views)?;
        let smooth = SmoothTerms::new(&model.template);
        Ok(Self {
            config,
            model,
            store,
            adam,
            rng,
            epoch,
            step,
            rig,
            smooth,
        })
    }

    /// Rebuilds a trainer; the parameter table must match the layout the
    /// checkpoint's config produces.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let fresh = Self::new(ck.config.clone())?;
        if fresh.store.entries() != ck.params.entries() {
            return Err(Error::shape(
                "Trainer::from_checkpoint",
                format!("{} parameter tensors for this config", fresh.store.entries().len()),
                format!("{} tensors in checkpoint", ck.params.entries().len()),
            ));
        }
        Self::assemble(ck.config, fresh.model, ck.params, ck.adam, ck.rng.restore(), ck.epoch, ck.step)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::of(&self.rng),
            params: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    /// One optimizer step on `samples` (all dataset views; the first
    /// `n_views` are used). Parameters are left untouched when the loss or
    /// gradient is not finite.
    pub fn train_step(&mut self, samples: &[&MultiViewSample]) -> Result<StepReport> {
        let views = first_views(samples, self.rig.len());
        let refs: Vec<&MultiViewSample> = views.iter().collect();
        let batch = Batch::new(&refs, &self.rig)?;
        let targets = Targets::new(&refs, &self.rig, &self.model.template)?;
        let weights = self.config.weights();
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &self.store, &batch, &mut Mode::Train(&mut self.rng))?;
        let (total, parts) = self.model.loss(&mut g, &fwd, &targets, &self.rig, &weights, self.config.alignment, Some(&self.smooth))?;
        let report = crate::losses::total_loss(parts, &weights)?;
        let value = g.scalar(total);
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "training loss".into() });
        }
        let joints = g.value(fwd.body.joints);
        let gt = &targets.joints3d[self.rig.master()];
        let k = self.model.n_joints();
        let mpjpe_mm = (0..batch.size)
            .map(|s| mpjpe(&joints.slice_rows(s * k, k), &gt.slice_rows(s * k, k)))
            .sum::<f64>()
            / batch.size as f64
            * MM_PER_UNIT;

        let grads = g.backward(total);
        let mut flat = vec![0.0; self.store.len()];
        grads.accumulate_params(&g, &self.store, &mut flat);
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "gradient".into() });
        }
        let lr = self.config.lr_at(self.epoch as usize);
        self.adam.step(self.store.flat_mut(), &flat, lr);
        self.step += 1;
        Ok(StepReport {
            total: report.total,
            parts,
            mpjpe_mm,
        })
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn run_epoch(&mut self, data: &[MultiViewSample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::shape("run_epoch", "at least one sample", "0"));
        }
        let lr = self.config.lr_at(self.epoch as usize);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss = LossRecord::default();
        let mut mm = 0.0;
        let steps_before = self.step;
        for chunk in order.chunks(self.config.batch_size) {
            let refs: Vec<&MultiViewSample> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.train_step(&refs)?;
            let w = chunk.len() as f64 / data.len() as f64;
            loss.total += w * r.total;
            loss.joint += w * r.parts.joint;
            loss.vertex += w * r.parts.vertex;
            loss.align += w * r.parts.align;
            loss.smooth += w * r.parts.smooth;
            mm += w * r.mpjpe_mm;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            lr,
            steps: self.step - steps_before,
            loss,
            metrics: TrainMetrics { train_mpjpe_mm: mm },
        })
    }

    /// Runs the remaining epochs, writing one JSON line per epoch to `log`
    /// and handing each completed state to `on_epoch` (the CLI saves a
    /// checkpoint there, so a failed epoch leaves the last good one).
    pub fn train(
        &mut self,
        data: &[MultiViewSample],
        log: &mut dyn Write,
        on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        while (self.epoch as usize) < self.config.epochs {
            let rec = self.run_epoch(data)?;
            writeln!(log, "{}", rec.to_json_line())?;
            on_epoch(self)?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// Trains a model on all of `data` with `config`.
pub fn train(config: &TrainConfig, data: &Dataset, log: &mut dyn Write) -> Result<Trainer> {
    check_dataset(config, data)?;
    let mut t = Trainer::new(config.clone())?;
    t.train(&data.samples, log, &mut |_| Ok(()))?;
    Ok(t)
}
