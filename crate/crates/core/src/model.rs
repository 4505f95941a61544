//! The full network: shared backbone, multi-view fusion, alignment head and
//! mesh decoder, plus the training objective built on top of it.
//!
//! Predictions live in the master view's frame. Rig rotations are used
//! relative to the master, `R_i R_mᵀ`; for the default rig `R_m = I`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::alignment::{predict_master, AlignmentHead};
use crate::autodiff::{Graph, Var};
use crate::backbone::{stack_images, Backbone, BackboneConfig};
use crate::decoder::{decode_body, DecodedBody, DecoderConfig, MeshDecoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_conv1x1, Conv1x1Params, FusionConfig, FusionDims, FusionParams};
use crate::geometry::{project_var, rotate_var, CameraRig, Rotation};
use crate::losses::{loss_align, loss_joint, loss_smooth, loss_vertex, normalize_pixels, JointPrediction, LossParts, LossWeights, SmoothTerms};
use crate::mesh::MeshTemplate;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::synthetic::MultiViewSample;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionVariant {
    /// Encoder/decoder attention fusion.
    Mmt,
    /// Per-view 1×1 convolution merge, tiled to the decoder length.
    Conv1x1,
    /// Mesh decoder sees only the master view's tokens; only master 3D
    /// pose supervises the alignment head.
    StrategyA,
    /// No alignment task; the master prediction is rotated into every view
    /// and the joint and vertex losses are averaged over views.
    StrategyB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentMode {
    Off,
    ThreeD,
    ThreeD2D,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of {:?}"),
                        s,
                        [$($text),*]
                    ))),
                }
            }
        }
    };
}

text_enum!(FusionVariant { Mmt => "mmt", Conv1x1 => "conv1x1", StrategyA => "strategyA", StrategyB => "strategyB" });
text_enum!(AlignmentMode { Off => "off", ThreeD => "3d", ThreeD2D => "3d2d" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    /// Size of the view-embedding table.
    pub max_views: usize,
    pub fusion: FusionVariant,
    pub template_replacement: bool,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            d: 64,
            heads: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.1,
            max_views: 4,
            fusion: FusionVariant::Mmt,
            template_replacement: false,
            decoder: DecoderConfig::progressive(64),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub template: MeshTemplate,
    pub backbone: Backbone,
    pub fusion: Option<FusionParams>,
    pub conv: Option<Conv1x1Params>,
    pub head: AlignmentHead,
    pub decoder: MeshDecoder,
}

impl Model {
    /// Registers all parameters in `store` in a fixed order.
    pub fn new(config: ModelConfig, template: MeshTemplate, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if config.decoder.d != config.d {
            return Err(Error::Config(format!("decoder width {} does not match d = {}", config.decoder.d, config.d)));
        }
        if config.max_views == 0 {
            return Err(Error::Config("max_views must be positive".into()));
        }
        let backbone = Backbone::new(config.backbone.clone(), store, rng);
        let dims = FusionDims {
            cells: config.backbone.cells(),
            n_joints: template.num_joints(),
            max_views: config.max_views,
            d: config.d,
        };
        let channels = config.backbone.out_channels();
        let (fusion, conv) = match config.fusion {
            FusionVariant::Conv1x1 => (None, Some(Conv1x1Params::new(store, dims, channels, rng))),
            _ => {
                let fc = FusionConfig {
                    channels,
                    heads: config.heads,
                    encoder_layers: config.encoder_layers,
                    decoder_layers: config.decoder_layers,
                    dropout: config.dropout,
                };
                (Some(FusionParams::new(store, dims, &fc, rng)?), None)
            }
        };
        let head = AlignmentHead::new(store, config.d, rng);
        let decoder = MeshDecoder::new(store, config.decoder.clone(), &template, rng)?;
        Ok(Self {
            config,
            template,
            backbone,
            fusion,
            conv,
            head,
            decoder,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.template.num_joints()
    }

    /// Runs the network on one batch.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch, mode: &mut Mode) -> Result<Forward> {
        let n = batch.view_ids.len();
        let (b, k) = (batch.size, self.n_joints());
        if n == 0 || n > self.config.max_views || batch.master >= n {
            return Err(Error::shape(
                "Model::forward",
                format!("1..={} views with master in range", self.config.max_views),
                format!("{n} views, master {}", batch.master),
            ));
        }
        let images = g.constant(batch.images.clone());
        let grid = self.backbone.forward(g, store, images, b * n)?;
        let z = match (&self.fusion, &self.conv) {
            (Some(fp), _) => fuse(g, store, fp, grid, &batch.view_ids, b, mode)?,
            (None, Some(cp)) => fuse_conv1x1(g, store, cp, grid, &batch.view_ids, self.backbone.config.cells(), k, b)?,
            (None, None) => unreachable!("one fusion module is always built"),
        };
        let (p3d, intrinsics) = predict_master(g, store, &self.head, z, n, batch.master, k, b)?;
        let joint_coords = self.config.template_replacement.then_some(p3d);
        let body = if self.config.fusion == FusionVariant::StrategyA {
            let idx = (0..b * k).map(|r| ((r / k) * n + batch.master) * k + r % k).collect();
            let zm = g.gather_rows(z, idx);
            decode_body(g, store, &self.decoder, &self.template, zm, 1, 0, b, joint_coords, mode)?
        } else {
            decode_body(g, store, &self.decoder, &self.template, z, n, batch.master, b, joint_coords, mode)?
        };
        Ok(Forward {
            z,
            p3d,
            intrinsics,
            body,
        })
    }

    /// Training objective. Returns the weighted total on the tape and the
    /// unweighted parts (averaged over the batch).
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        fwd: &Forward,
        targets: &Targets,
        rig: &CameraRig,
        weights: &LossWeights,
        alignment: AlignmentMode,
        smooth: Option<&SmoothTerms>,
    ) -> Result<(Var, LossParts)> {
        let (b, k, n) = (targets.size, self.n_joints(), rig.len());
        let m = self.template.num_vertices();
        let master = rig.master();
        let rel = relative_rotations(rig);
        let regressor = g.constant(self.template.joint_regressor.clone());
        let regressed: Vec<Var> = (0..b)
            .map(|s| {
                let v = g.slice_rows(fwd.body.v_full, s * m, m);
                g.matmul(regressor, v)
            })
            .collect();

        // Joint and vertex terms for one view index `i`.
        let view_terms = |g: &mut Graph, i: usize, rotate: bool| -> Result<(Var, Var)> {
            let rot = |g: &mut Graph, v: Var| if rotate { rotate_var(g, &rel[i], v) } else { v };
            let mut d3 = Vec::with_capacity(b);
            let mut d2 = Vec::with_capacity(b);
            let mut r3 = Vec::with_capacity(b);
            let mut r2 = Vec::with_capacity(b);
            for s in 0..b {
                let intr = g.slice_rows(fwd.intrinsics, s * n + i, 1);
                let j = g.slice_rows(fwd.body.joints, s * k, k);
                let j = rot(g, j);
                d2.push(project_var(g, intr, &Rotation::IDENTITY, j));
                d3.push(j);
                let rj = rot(g, regressed[s]);
                r2.push(project_var(g, intr, &Rotation::IDENTITY, rj));
                r3.push(rj);
            }
            let cat = |g: &mut Graph, v: &[Var]| if v.len() == 1 { v[0] } else { g.concat_rows(v) };
            let pred = JointPrediction {
                direct3d: cat(g, &d3),
                direct2d: cat(g, &d2),
                regressed3d: cat(g, &r3),
                regressed2d: cat(g, &r2),
            };
            let lj = loss_joint(g, &pred, &targets.joints3d[i], &targets.joints2d[i], &weights.lambda)?;
            let vs = [fwd.body.v_full, fwd.body.v_sub1, fwd.body.v_sub2].map(|v| rot(g, v));
            let gt = &targets.vertices[i];
            let lv = loss_vertex(g, vs, [&gt[0], &gt[1], &gt[2]], &weights.eta)?;
            Ok((lj, lv))
        };

        let (lj, lv) = if self.config.fusion == FusionVariant::StrategyB {
            let mut sum: Option<(Var, Var)> = None;
            for i in 0..n {
                let (a, c) = view_terms(g, i, true)?;
                sum = Some(match sum {
                    Some((x, y)) => (g.add(x, a), g.add(y, c)),
                    None => (a, c),
                });
            }
            let (x, y) = sum.expect("at least one view");
            (g.scale(x, 1.0 / n as f64), g.scale(y, 1.0 / n as f64))
        } else {
            view_terms(g, master, false)?
        };

        let la = match (self.config.fusion, alignment) {
            (FusionVariant::StrategyB, _) | (_, AlignmentMode::Off) => None,
            (variant, mode) => {
                let views: Vec<usize> = if variant == FusionVariant::StrategyA { vec![master] } else { (0..n).collect() };
                let use_2d = mode == AlignmentMode::ThreeD2D && variant != FusionVariant::StrategyA;
                let mut per_view = Vec::with_capacity(b * views.len());
                let mut gt2 = Vec::with_capacity(b * views.len());
                let mut gt3 = Vec::with_capacity(b * views.len());
                for s in 0..b {
                    let p3 = g.slice_rows(fwd.p3d, s * k, k);
                    for &i in &views {
                        let intr = g.slice_rows(fwd.intrinsics, s * n + i, 1);
                        let r3 = rotate_var(g, &rel[i], p3);
                        let r2 = project_var(g, intr, &Rotation::IDENTITY, r3);
                        per_view.push((r2, r3));
                        gt2.push(targets.joints2d[i].slice_rows(s * k, k));
                        gt3.push(targets.joints3d[i].slice_rows(s * k, k));
                    }
                }
                Some(loss_align(g, &per_view, &gt2, &gt3, use_2d)?)
            }
        };

        let ls = match smooth {
            Some(terms) if weights.mu > 0.0 => Some(self.smooth_term(g, fwd.body.v_full, targets, master, terms)?),
            _ => None,
        };

        let parts = LossParts {
            joint: g.scalar(lj),
            vertex: g.scalar(lv),
            align: la.map_or(0.0, |v| g.scalar(v)),
            smooth: ls.map_or(0.0, |v| g.scalar(v)),
        };
        let total = crate::losses::weighted_total(
            g,
            [(Some(lj), weights.alpha), (Some(lv), weights.beta), (la, weights.gamma), (ls, weights.mu)],
        );
        Ok((total, parts))
    }

    /// Mean over the batch of the smoothness loss of `v_full` against the
    /// master-view ground truth.
    pub fn smooth_term(&self, g: &mut Graph, v_full: Var, targets: &Targets, master: usize, terms: &SmoothTerms) -> Result<Var> {
        let m = self.template.num_vertices();
        let mut sum: Option<Var> = None;
        for s in 0..targets.size {
            let v = g.slice_rows(v_full, s * m, m);
            let gt = targets.vertices[master][0].slice_rows(s * m, m);
            let l = loss_smooth(g, v, &gt, terms)?;
            sum = Some(match sum {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        let sum = sum.ok_or_else(|| Error::shape("smooth_term", "non-empty batch", "0"))?;
        Ok(g.scale(sum, 1.0 / targets.size as f64))
    }
}

/// `R_i R_mᵀ` for every view.
pub fn relative_rotations(rig: &CameraRig) -> Vec<Rotation> {
    let to_master = rig.view(rig.master()).rotation.transpose();
    rig.views().iter().map(|v| v.rotation.compose(&to_master)).collect()
}

/// Network outputs for one batch, rows stacked per sample.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Fused sequence, `batch·K·N × d`.
    pub z: Var,
    /// Alignment-head master pose, `batch·K × 3`.
    pub p3d: Var,
    /// `batch·N × 3` rows of normalised `(s, tx, ty)`.
    pub intrinsics: Var,
    pub body: DecodedBody,
}

/// Network input for a batch of samples seen through one rig.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(size · N · H · W) × 1`, ordered sample, view position, pixel.
    pub images: Matrix,
    pub view_ids: Vec<usize>,
    /// Position of the master view in `view_ids`.
    pub master: usize,
    pub size: usize,
}

impl Batch {
    pub fn new(samples: &[&MultiViewSample], rig: &CameraRig) -> Result<Self> {
        check_samples(samples, rig)?;
        let images = stack_images(samples.iter().flat_map(|s| s.images.iter().map(|im| im.data.as_slice())));
        Ok(Self {
            images,
            view_ids: rig.views().iter().map(|v| v.view_id).collect(),
            master: rig.master(),
            size: samples.len(),
        })
    }
}

/// Ground truth for a batch, per view position, rows stacked per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub size: usize,
    pub joints3d: Vec<Matrix>,
    /// Normalised image units.
    pub joints2d: Vec<Matrix>,
    /// `[full, sub1, sub2]` per view.
    pub vertices: Vec<[Matrix; 3]>,
}

impl Targets {
    pub fn new(samples: &[&MultiViewSample], rig: &CameraRig, template: &MeshTemplate) -> Result<Self> {
        check_samples(samples, rig)?;
        let n = rig.len();
        let stack = |f: &dyn Fn(&MultiViewSample) -> Matrix| -> Matrix {
            let rows: Vec<Matrix> = samples.iter().map(|s| f(s)).collect();
            let cols = rows[0].cols();
            let data = rows.into_iter().flat_map(Matrix::into_vec).collect::<Vec<_>>();
            let r = data.len() / cols;
            Matrix::from_vec(r, cols, data).expect("consistent columns")
        };
        let mut joints3d = Vec::with_capacity(n);
        let mut joints2d = Vec::with_capacity(n);
        let mut vertices = Vec::with_capacity(n);
        for i in 0..n {
            joints3d.push(stack(&|s| s.joints3d[i].clone()));
            joints2d.push(stack(&|s| {
                let im = &s.images[i];
                normalize_pixels(&s.joints2d[i], im.width, im.height)
            }));
            vertices.push([
                stack(&|s| s.vertices[i].clone()),
                stack(&|s| s.vertices[i].select_rows(&template.sub1_idx)),
                stack(&|s| s.vertices[i].select_rows(&template.sub2_idx)),
            ]);
        }
        Ok(Self {
            size: samples.len(),
            joints3d,
            joints2d,
            vertices,
        })
    }
}

fn check_samples(samples: &[&MultiViewSample], rig: &CameraRig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::shape("batch", "at least one sample", "0"));
    }
    if let Some(s) = samples.iter().find(|s| s.n_views() != rig.len()) {
        return Err(Error::shape("batch", format!("{} views per sample", rig.len()), format!("{}", s.n_views())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::synthetic::{default_rig, generate, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(fusion: FusionVariant) -> ModelConfig {
        ModelConfig {
            fusion,
            ..ModelConfig::default()
        }
    }

    fn setup(fusion: FusionVariant, n_views: usize) -> (Model, ParamStore, CameraRig, Vec<MultiViewSample>) {
        let template = MeshTemplate::default();
        let mut store = ParamStore::new();
        let model = Model::new(small_config(fusion), template.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let rig = default_rig(4, 112).unwrap();
        let samples = generate(2, 11, &rig, &template, &GenConfig::default()).unwrap();
        let rig = rig.truncated(n_views).unwrap();
        let samples = samples.samples.iter().map(|s| s.select_views(&(0..n_views).collect::<Vec<_>>())).collect();
        (model, store, rig, samples)
    }

    #[test]
    fn text_enums_round_trip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.as_str().parse::<FusionVariant>().unwrap(), *v);
        }
        for a in AlignmentMode::ALL {
            assert_eq!(a.to_string().parse::<AlignmentMode>().unwrap(), *a);
        }
        assert!("mmtx".parse::<FusionVariant>().is_err());
    }

    #[test]
    fn forward_shapes_for_every_variant() {
        for &variant in FusionVariant::ALL {
            for n in [1, 4] {
                let (model, store, rig, samples) = setup(variant, n);
                let refs: Vec<&MultiViewSample> = samples.iter().collect();
                let batch = Batch::new(&refs, &rig).unwrap();
                let mut g = Graph::new();
                let f = model.forward(&mut g, &store, &batch, &mut Mode::Eval).unwrap();
                assert_eq!(g.shape(f.z), (2 * 14 * n, 64), "{variant}");
                assert_eq!(g.shape(f.p3d), (28, 3));
                assert_eq!(g.shape(f.intrinsics), (2 * n, 3));
                assert_eq!(g.shape(f.body.v_full), (800, 3));
                assert!(g.value(f.body.v_full).is_finite());
            }
        }
    }

    #[test]
    fn loss_is_finite_and_positive_for_every_mode() {
        for &variant in FusionVariant::ALL {
            for &align in AlignmentMode::ALL {
                let (model, store, rig, samples) = setup(variant, 4);
                let refs: Vec<&MultiViewSample> = samples.iter().collect();
                let batch = Batch::new(&refs, &rig).unwrap();
                let targets = Targets::new(&refs, &rig, &model.template).unwrap();
                let terms = SmoothTerms::new(&model.template);
                let w = LossWeights { mu: 0.1, ..LossWeights::default() };
                let mut g = Graph::new();
                let f = model.forward(&mut g, &store, &batch, &mut Mode::Eval).unwrap();
                let (total, parts) = model.loss(&mut g, &f, &targets, &rig, &w, align, Some(&terms)).unwrap();
                let t = g.scalar(total);
                assert!(t.is_finite() && t > 0.0);
                let expect = parts.joint + parts.vertex + 0.1 * parts.align + 0.1 * parts.smooth;
                assert!((t - expect).abs() < 1e-9 * t.max(1.0));
                let align_on = align != AlignmentMode::Off && variant != FusionVariant::StrategyB;
                assert_eq!(parts.align > 0.0, align_on, "{variant} {align}");
            }
        }
    }

    #[test]
    fn batch_rows_match_single_sample_runs() {
        let (model, store, rig, samples) = setup(FusionVariant::Mmt, 3);
        let refs: Vec<&MultiViewSample> = samples.iter().collect();
        let mut g = Graph::new();
        let both = model.forward(&mut g, &store, &Batch::new(&refs, &rig).unwrap(), &mut Mode::Eval).unwrap();
        let both_v = g.value(both.body.v_full).clone();
        for (s, r) in refs.iter().enumerate() {
            let mut g = Graph::new();
            let one = model.forward(&mut g, &store, &Batch::new(&[r], &rig).unwrap(), &mut Mode::Eval).unwrap();
            assert!(g.value(one.body.v_full).max_abs_diff(&both_v.slice_rows(s * 400, 400)) < 1e-10);
        }
    }

    #[test]
    fn template_replacement_changes_queries() {
        let template = MeshTemplate::default();
        let rig = default_rig(2, 112).unwrap();
        let samples = generate(1, 3, &rig, &template, &GenConfig::default()).unwrap();
        let refs: Vec<&MultiViewSample> = samples.samples.iter().collect();
        let batch = Batch::new(&refs, &rig).unwrap();
        let run = |replace: bool| {
            let mut store = ParamStore::new();
            let cfg = ModelConfig { template_replacement: replace, ..ModelConfig::default() };
            let model = Model::new(cfg, template.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let mut g = Graph::new();
            let f = model.forward(&mut g, &store, &batch, &mut Mode::Eval).unwrap();
            g.value(f.body.joints).clone()
        };
        assert!(run(true).max_abs_diff(&run(false)) > 1e-9);
    }

    #[test]
    fn relative_rotation_of_master_is_identity() {
        let rig = default_rig(4, 112).unwrap().permuted(&[2, 0, 3, 1]).unwrap();
        let rel = relative_rotations(&rig);
        let m = rel[rig.master()].as_matrix();
        assert!(m.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (model, store, rig, samples) = setup(FusionVariant::Mmt, 2);
        let refs: Vec<&MultiViewSample> = samples[..1].iter().collect();
        let batch = Batch::new(&refs, &rig).unwrap();
        let targets = Targets::new(&refs, &rig, &model.template).unwrap();
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut idx = Vec::new();
        for e in store.entries() {
            let r = store.range(store.find(&e.name).unwrap());
            idx.push(rng.gen_range(r));
        }
        let report = check_params(&store, &idx, 1e-5, |g, s| {
            let f = model.forward(g, s, &batch, &mut Mode::Eval)?;
            Ok(model.loss(g, &f, &targets, &rig, &w, AlignmentMode::ThreeD2D, None)?.0)
        })
        .unwrap();
        assert!(report.max_rel < 1e-3, "{report:?}");
    }
}
