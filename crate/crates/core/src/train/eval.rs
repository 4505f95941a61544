//! Evaluation on held-out samples and mesh export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{check_dataset, first_views, model_rig, TrainConfig, MM_PER_UNIT};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::{rotate_points, CameraRig};
use crate::losses::{loss_smooth, mpjpe, mpve, pa_mpjpe, SmoothTerms};
use crate::mesh::{obj, MeshTemplate};
use crate::model::{relative_rotations, Batch, Model};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::synthetic::{Dataset, MultiViewSample};
use crate::tensor::Matrix;

/// Samples per forward pass at evaluation. Fixed so results never depend
/// on how the caller chunks the data.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub n_views: usize,
    /// Score the prediction in every view (rotated by the rig) instead of
    /// the master view only.
    pub all_views: bool,
}

/// Master-frame prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub joints: Matrix,
    pub vertices: Matrix,
}

/// Per-sample metrics in millimetres; `smooth` is the unweighted
/// smoothness loss of the predicted mesh against the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpve: f64,
    pub smooth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_views: usize,
    pub all_views: bool,
    pub rows: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let scope = if self.all_views { "all views" } else { "master view" };
        let _ = writeln!(s, "# n_views={} samples={} scope={scope} units=mm", self.n_views, self.rows.len());
        let _ = writeln!(s, "index\tmpjpe\tpa_mpjpe\tmpve\tsmooth");
        let line = |s: &mut String, label: &str, m: &SampleMetrics| {
            let _ = writeln!(s, "{label}\t{:.4}\t{:.4}\t{:.4}\t{:.6}", m.mpjpe, m.pa_mpjpe, m.mpve, m.smooth);
        };
        for (i, r) in self.rows.iter().enumerate() {
            line(&mut s, &i.to_string(), r);
        }
        line(&mut s, "mean", &self.mean);
        s
    }
}

/// Eval-mode predictions for `samples`, which must already be cut to the
/// rig's views.
pub fn predict(model: &Model, store: &ParamStore, samples: &[&MultiViewSample], rig: &CameraRig) -> Result<Vec<Prediction>> {
    let (k, m) = (model.n_joints(), model.template.num_vertices());
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk, rig)?;
        let mut g = Graph::new();
        let f = model.forward(&mut g, store, &batch, &mut Mode::Eval)?;
        let (j, v) = (g.value(f.body.joints), g.value(f.body.v_full));
        for s in 0..chunk.len() {
            out.push(Prediction {
                joints: j.slice_rows(s * k, k),
                vertices: v.slice_rows(s * m, m),
            });
        }
    }
    Ok(out)
}

/// Scores predictions against ground truth. Means are plain averages of
/// the per-sample rows.
pub fn score(
    preds: &[Prediction],
    samples: &[&MultiViewSample],
    rig: &CameraRig,
    template: &MeshTemplate,
    all_views: bool,
) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::shape("score", format!("{} predictions", samples.len()), format!("{}", preds.len())));
    }
    let terms = SmoothTerms::new(template);
    let rel = relative_rotations(rig);
    let master = rig.master();
    let views: Vec<usize> = if all_views { (0..rig.len()).collect() } else { vec![master] };
    let mut rows = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(samples) {
        if p.joints.shape() != s.joints3d[master].shape() || p.vertices.shape() != s.vertices[master].shape() {
            return Err(Error::shape(
                "score",
                format!("{:?} / {:?}", s.joints3d[master].shape(), s.vertices[master].shape()),
                format!("{:?} / {:?}", p.joints.shape(), p.vertices.shape()),
            ));
        }
        let mut row = SampleMetrics::default();
        for &i in &views {
            let (j, v) = if i == master {
                (p.joints.clone(), p.vertices.clone())
            } else {
                (rotate_points(&rel[i], &p.joints), rotate_points(&rel[i], &p.vertices))
            };
            row.mpjpe += mpjpe(&j, &s.joints3d[i]);
            row.pa_mpjpe += pa_mpjpe(&j, &s.joints3d[i])?;
            row.mpve += mpve(&v, &s.vertices[i]);
        }
        let c = MM_PER_UNIT / views.len() as f64;
        row.mpjpe *= c;
        row.pa_mpjpe *= c;
        row.mpve *= c;
        let mut g = Graph::new();
        let v = g.constant(p.vertices.clone());
        let l = loss_smooth(&mut g, v, &s.vertices[master], &terms)?;
        row.smooth = g.scalar(l);
        rows.push(row);
    }
    let mut mean = SampleMetrics::default();
    if !rows.is_empty() {
        let n = rows.len() as f64;
        mean.mpjpe = rows.iter().map(|r| r.mpjpe).sum::<f64>() / n;
        mean.pa_mpjpe = rows.iter().map(|r| r.pa_mpjpe).sum::<f64>() / n;
        mean.mpve = rows.iter().map(|r| r.mpve).sum::<f64>() / n;
        mean.smooth = rows.iter().map(|r| r.smooth).sum::<f64>() / n;
    }
    Ok(EvalReport {
        n_views: rig.len(),
        all_views,
        rows,
        mean,
    })
}

fn check_views(config: &TrainConfig, n_views: usize) -> Result<()> {
    if n_views == 0 || n_views > config.max_views {
        return Err(Error::shape("evaluate", format!("1..={} views", config.max_views), format!("{n_views}")));
    }
    Ok(())
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    config: &TrainConfig,
    samples: &[MultiViewSample],
    opts: EvalOptions,
) -> Result<EvalReport> {
    check_views(config, opts.n_views)?;
    let rig = model_rig(config, opts.n_views)?;
    let refs: Vec<&MultiViewSample> = samples.iter().collect();
    let cut = first_views(&refs, opts.n_views);
    let cut: Vec<&MultiViewSample> = cut.iter().collect();
    let preds = predict(model, store, &cut, &rig)?;
    score(&preds, &cut, &rig, &model.template, opts.all_views)
}

/// Writes `pred_<index>.obj` and `gt_<index>.obj` (master view) into
/// `out_dir` and returns their paths.
pub fn export_obj(
    model: &Model,
    store: &ParamStore,
    config: &TrainConfig,
    data: &Dataset,
    index: usize,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    check_dataset(config, data)?;
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| Error::shape("export_obj", format!("index < {}", data.samples.len()), format!("{index}")))?;
    let rig = model_rig(config, config.n_views)?;
    let cut = first_views(&[sample], config.n_views);
    let pred = predict(model, store, &[&cut[0]], &rig)?.remove(0);
    std::fs::create_dir_all(out_dir)?;
    let pred_path = out_dir.join(format!("pred_{index}.obj"));
    let gt_path = out_dir.join(format!("gt_{index}.obj"));
    let faces = &model.template.faces;
    std::fs::write(&pred_path, obj::to_obj_string(&pred.vertices, faces))?;
    std::fs::write(&gt_path, obj::to_obj_string(&sample.vertices[rig.master()], faces))?;
    Ok((pred_path, gt_path))
}
