//! Per-view convolutional feature extractor: four stride-2 3×3 conv blocks
//! with SiLU, mapping each `H × W × c` image to a `7 × 7 × C` grid.

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 112,
            in_channels: 1,
            channels: vec![16, 32, 64, 128],
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    /// Spatial size after the stride-2 stack.
    pub fn grid_size(&self) -> usize {
        self.channels.iter().fold(self.image_size, |s, _| (s + 2 - 3) / 2 + 1)
    }

    pub fn cells(&self) -> usize {
        self.grid_size() * self.grid_size()
    }
}

/// Per-view feature grids for one sample, rows ordered `(view, cell)`:
/// row `49·i + j` is cell `j` (row-major over the 7×7 grid) of view `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub n_views: usize,
    pub cells: usize,
    pub features: Matrix,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn view(&self, i: usize) -> Matrix {
        self.features.slice_rows(i * self.cells, self.cells)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut cin = config.in_channels;
        let mut layers = Vec::new();
        for (l, &cout) in config.channels.iter().enumerate() {
            let fan_in = 9 * cin;
            // Variance-preserving for SiLU-like units.
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = store.uniform(format!("backbone.conv{l}.w"), fan_in, cout, limit, rng);
            let b = store.zeros(format!("backbone.conv{l}.b"), 1, cout);
            layers.push((w, b));
            cin = cout;
        }
        Self { config, layers }
    }

    pub fn weight_ids(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.layers.iter().copied()
    }

    /// `images` is `(n_images · H · W) × c`, one image after another in
    /// row-major pixel order. Returns `(n_images · cells) × C`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var, n_images: usize) -> Result<Var> {
        let s = self.config.image_size;
        let expect = (n_images * s * s, self.config.in_channels);
        if g.shape(images) != expect {
            return Err(Error::shape("Backbone::forward", format!("{expect:?}"), format!("{:?}", g.shape(images))));
        }
        let (mut x, mut size, mut cin) = (images, s, self.config.in_channels);
        for &(w, b) in &self.layers {
            let geom = ConvGeom {
                batch: n_images,
                h: size,
                w: size,
                cin,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.conv2d(x, wv, geom);
            let y = g.add_row(y, bv);
            x = g.silu(y);
            size = geom.out_h();
            cin = g.shape(wv).1;
        }
        Ok(x)
    }
}

/// Stacks per-view images (each `H × W`, one channel) into the backbone's
/// input layout.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a [f32]>) -> Matrix {
    let data: Vec<f64> = images.into_iter().flat_map(|im| im.iter().map(|&x| x as f64)).collect();
    let n = data.len();
    Matrix::from_vec(n, 1, data).expect("length is n")
}

/// Runs the shared backbone over `N` views and concatenates their grids
/// along the view axis.
pub fn extract_features(backbone: &Backbone, store: &ParamStore, images: &Matrix, n_views: usize) -> Result<FeatureGrid> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let y = backbone.forward(&mut g, store, x, n_views)?;
    Ok(FeatureGrid {
        n_views,
        cells: backbone.config.cells(),
        features: g.value(y).clone(),
    })
}
