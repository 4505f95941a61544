//! Multi-view fusion transformer: tokenisation of the per-view grids, an
//! encoder over the `49·N` image tokens, and a decoder whose `K·N`
//! content-free queries cross-attend to them.
//!
//! Batches are stacked along rows. Attention never mixes samples: each
//! sample's rows form one [`AttnGroup`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{rotate_points, CameraRig};
use crate::mesh::PosedBody;
use crate::nn::{dropout, Linear, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    /// Encoder token: grid `cell` of the view with id `view`.
    Cell { view: usize, cell: usize },
    /// Decoder query: joint slot `joint` of the view with id `view`.
    Query { view: usize, joint: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub meta: Vec<TokenOrigin>,
}

/// Origins of the encoder tokens: index `cells·i + j` is cell `j` of the
/// view at position `i`.
pub fn encoder_meta(view_ids: &[usize], cells: usize) -> Vec<TokenOrigin> {
    view_ids
        .iter()
        .flat_map(|&view| (0..cells).map(move |cell| TokenOrigin::Cell { view, cell }))
        .collect()
}

/// Origins of the decoder queries: index `K·i + k` is joint `k` of the view
/// at position `i`.
pub fn query_meta(view_ids: &[usize], n_joints: usize) -> Vec<TokenOrigin> {
    view_ids
        .iter()
        .flat_map(|&view| (0..n_joints).map(move |joint| TokenOrigin::Query { view, joint }))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Query rows attend to key/value rows of the same group only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub q: Span,
    pub kv: Span,
}

impl AttnGroup {
    /// `batch` consecutive groups of fixed sizes.
    pub fn batched(batch: usize, q_len: usize, kv_len: usize) -> Vec<AttnGroup> {
        (0..batch)
            .map(|b| AttnGroup {
                q: Span { start: b * q_len, len: q_len },
                kv: Span { start: b * kv_len, len: kv_len },
            })
            .collect()
    }
}

/// One attention block: head projections, output mix `W^Z`, the sublayer
/// map `W^L` and the layer-norm gain/shift.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub width: usize,
    pub heads: usize,
    pub dropout: f64,
    /// `width × width`; head `i` uses columns `i·dh .. (i+1)·dh`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wz: ParamId,
    pub wl: ParamId,
    pub gain: ParamId,
    pub shift: ParamId,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            width,
            heads,
            dropout,
            wq: store.glorot(format!("{name}.wq"), width, width, rng),
            wk: store.glorot(format!("{name}.wk"), width, width, rng),
            wv: store.glorot(format!("{name}.wv"), width, width, rng),
            wz: store.glorot(format!("{name}.wz"), width, width, rng),
            wl: store.glorot(format!("{name}.wl"), width, width, rng),
            gain: store.add(format!("{name}.ln_gain"), Matrix::filled(1, width, 1.0)),
            shift: store.zeros(format!("{name}.ln_shift"), 1, width),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

fn check_width(g: &Graph, v: Var, width: usize, op: &'static str) -> Result<()> {
    if g.shape(v).1 != width {
        return Err(Error::shape(op, format!("{width} columns"), format!("{}", g.shape(v).1)));
    }
    Ok(())
}

/// Scaled dot-product attention per head and group, heads concatenated and
/// mixed by `W^Z`. Also returns every softmax weight matrix, group-major.
pub fn multi_head_attention_weights(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    xq: Var,
    xkv: Var,
    groups: &[AttnGroup],
) -> Result<(Var, Vec<Var>)> {
    check_width(g, xq, p.width, "multi_head_attention")?;
    check_width(g, xkv, p.width, "multi_head_attention")?;
    let (nq, nkv) = (g.shape(xq).0, g.shape(xkv).0);
    for gr in groups {
        if gr.q.start + gr.q.len > nq || gr.kv.start + gr.kv.len > nkv || gr.kv.len == 0 {
            return Err(Error::shape("multi_head_attention", "groups inside the inputs", format!("{gr:?}")));
        }
    }
    let (wq, wk, wv, wz) = (g.param(store, p.wq), g.param(store, p.wk), g.param(store, p.wv), g.param(store, p.wz));
    let q = g.matmul(xq, wq);
    let k = g.matmul(xkv, wk);
    let v = g.matmul(xkv, wv);
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut rows = Vec::with_capacity(groups.len());
    let mut weights = Vec::with_capacity(groups.len() * p.heads);
    for gr in groups {
        let qg = g.slice_rows(q, gr.q.start, gr.q.len);
        let kg = g.slice_rows(k, gr.kv.start, gr.kv.len);
        let vg = g.slice_rows(v, gr.kv.start, gr.kv.len);
        let mut heads = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let (qh, kh, vh) = if p.heads == 1 {
                (qg, kg, vg)
            } else {
                (g.slice_cols(qg, h * dh, dh), g.slice_cols(kg, h * dh, dh), g.slice_cols(vg, h * dh, dh))
            };
            let s = g.matmul_t(qh, false, kh, true);
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            weights.push(a);
            heads.push(g.matmul(a, vh));
        }
        rows.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) });
    }
    let y = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
    Ok((g.matmul(y, wz), weights))
}

pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    xq: Var,
    xkv: Var,
    groups: &[AttnGroup],
) -> Result<Var> {
    Ok(multi_head_attention_weights(g, store, p, xq, xkv, groups)?.0)
}

/// `LayerNorm(z + Dropout(z W^L))` with learned gain and shift.
pub fn sublayer(g: &mut Graph, store: &ParamStore, p: &AttentionParams, z: Var, mode: &mut Mode) -> Result<Var> {
    check_width(g, z, p.width, "sublayer")?;
    let wl = g.param(store, p.wl);
    let zl = g.matmul(z, wl);
    let zl = dropout(g, zl, p.dropout, mode);
    let u = g.add(z, zl);
    let n = g.layer_norm(u, LN_EPS);
    let gain = g.param(store, p.gain);
    let shift = g.param(store, p.shift);
    let n = g.mul_row(n, gain);
    Ok(g.add_row(n, shift))
}

/// Attention followed by the sublayer, with a residual from the queries:
/// `sublayer(xq + MHA(xq, xkv))`.
pub fn attention_block(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    xq: Var,
    xkv: Var,
    groups: &[AttnGroup],
    mode: &mut Mode,
) -> Result<Var> {
    let a = multi_head_attention(g, store, p, xq, xkv, groups)?;
    let u = g.add(xq, a);
    sublayer(g, store, p, u, mode)
}

/// Uniform bound giving unit variance.
pub const EMBEDDING_LIMIT: f64 = 1.732_050_807_568_877_2;

/// Learned additive embeddings: grid position, view identity and joint slot.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub pos: ParamId,
    pub view: ParamId,
    pub joint: ParamId,
}

impl Embeddings {
    pub fn new(store: &mut ParamStore, cells: usize, n_views: usize, n_joints: usize, d: usize, rng: &mut impl Rng) -> Self {
        // Unit variance, so the content-free queries start with non-flat attention.
        let a = EMBEDDING_LIMIT;
        Self {
            pos: store.uniform("fusion.emb_pos", cells, d, a, rng),
            view: store.uniform("fusion.emb_view", n_views, d, a, rng),
            joint: store.uniform("fusion.emb_joint", n_joints, d, a, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    pub cells: usize,
    pub n_joints: usize,
    /// Size of the view-embedding table (views the model can ever see).
    pub max_views: usize,
    pub d: usize,
}

/// Projects grid rows (ordered sample, view position, cell) to `d` and adds
/// position and view embeddings.
pub fn tokenize(
    g: &mut Graph,
    store: &ParamStore,
    wx: &Linear,
    emb: &Embeddings,
    grid: Var,
    view_ids: &[usize],
    cells: usize,
) -> Result<Var> {
    let rows = g.shape(grid).0;
    let per_sample = cells * view_ids.len();
    if per_sample == 0 || !rows.is_multiple_of(per_sample) {
        return Err(Error::shape("tokenize", format!("multiple of {per_sample} rows"), format!("{rows}")));
    }
    let x = wx.forward(g, store, grid);
    let pos_idx: Vec<usize> = (0..rows).map(|r| r % cells).collect();
    let view_idx: Vec<usize> = (0..rows).map(|r| view_ids[(r / cells) % view_ids.len()]).collect();
    let pos = g.param(store, emb.pos);
    let view = g.param(store, emb.view);
    if let Some(&bad) = view_idx.iter().find(|&&v| v >= g.shape(view).0) {
        return Err(Error::shape("tokenize", format!("view id < {}", g.shape(view).0), format!("{bad}")));
    }
    let pos = g.gather_rows(pos, pos_idx);
    let view = g.gather_rows(view, view_idx);
    let x = g.add(x, pos);
    Ok(g.add(x, view))
}

/// Content-free decoder queries: row `K·i + k` is the joint-`k` embedding
/// plus the embedding of the view at position `i`.
pub fn decoder_queries(g: &mut Graph, store: &ParamStore, emb: &Embeddings, view_ids: &[usize], n_joints: usize) -> Var {
    let joint = g.param(store, emb.joint);
    let view = g.param(store, emb.view);
    let jidx = (0..view_ids.len() * n_joints).map(|r| r % n_joints).collect();
    let vidx = (0..view_ids.len() * n_joints).map(|r| view_ids[r / n_joints]).collect();
    let j = g.gather_rows(joint, jidx);
    let v = g.gather_rows(view, vidx);
    g.add(j, v)
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub dims: FusionDims,
    pub embeddings: Embeddings,
    pub wx: Linear,
    pub encoder: Vec<AttentionParams>,
    pub decoder: Vec<AttentionParams>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, dims: FusionDims, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let embeddings = Embeddings::new(store, dims.cells, dims.max_views, dims.n_joints, dims.d, rng);
        let wx = Linear::new(store, "fusion.wx", cfg.channels, dims.d, false, rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| AttentionParams::new(store, &format!("fusion.enc{l}"), dims.d, cfg.heads, cfg.dropout, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|l| AttentionParams::new(store, &format!("fusion.dec{l}"), dims.d, cfg.heads, cfg.dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            dims,
            embeddings,
            wx,
            encoder,
            decoder,
        })
    }
}

/// Encoder over each sample's `cells·N` tokens, then decoder layers in which
/// the `K·N` queries cross-attend to the encoder output. Returns
/// `(batch · K·N) × d`.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    fp: &FusionParams,
    grid: Var,
    view_ids: &[usize],
    batch: usize,
    mode: &mut Mode,
) -> Result<Var> {
    let FusionDims { cells, n_joints, .. } = fp.dims;
    let n = view_ids.len();
    let (le, ld) = (cells * n, n_joints * n);
    let mut tokens = tokenize(g, store, &fp.wx, &fp.embeddings, grid, view_ids, cells)?;
    if g.shape(tokens).0 != batch * le {
        return Err(Error::shape("fuse", format!("{} grid rows", batch * le), format!("{}", g.shape(tokens).0)));
    }
    let self_groups = AttnGroup::batched(batch, le, le);
    for layer in &fp.encoder {
        tokens = attention_block(g, store, layer, tokens, tokens, &self_groups, mode)?;
    }
    let q = decoder_queries(g, store, &fp.embeddings, view_ids, n_joints);
    let mut q = if batch == 1 { q } else { g.concat_rows(&vec![q; batch]) };
    let cross = AttnGroup::batched(batch, ld, le);
    for layer in &fp.decoder {
        q = attention_block(g, store, layer, q, tokens, &cross, mode)?;
    }
    Ok(q)
}

/// Weights of the 1×1-convolution fusion variant.
#[derive(Clone, Debug)]
pub struct Conv1x1Params {
    /// One `C × d` slice of the 1×1 kernel per view id.
    pub per_view: Vec<ParamId>,
    pub bias: ParamId,
    pub pos: ParamId,
}

impl Conv1x1Params {
    pub fn new(store: &mut ParamStore, dims: FusionDims, channels: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (channels * dims.max_views + dims.d) as f64).sqrt();
        let per_view = (0..dims.max_views)
            .map(|v| store.uniform(format!("fusion.merge{v}"), channels, dims.d, limit, rng))
            .collect();
        Self {
            per_view,
            bias: store.zeros("fusion.merge_b", 1, dims.d),
            pos: store.uniform("fusion.merge_pos", dims.cells, dims.d, 0.1, rng),
        }
    }
}

/// Merges the `N` grids with a 1×1 convolution over the stacked
/// view-channel axis (`Σ_i F_i W_i + b`), adds position embeddings, and
/// tiles the `cells` tokens to `K·N` rows (row `r` repeats token `r mod
/// cells`). Returns `(batch · K·N) × d`.
pub fn fuse_conv1x1(
    g: &mut Graph,
    store: &ParamStore,
    cp: &Conv1x1Params,
    grid: Var,
    view_ids: &[usize],
    cells: usize,
    n_joints: usize,
    batch: usize,
) -> Result<Var> {
    let n = view_ids.len();
    let rows = g.shape(grid).0;
    if rows != batch * n * cells {
        return Err(Error::shape("fuse_conv1x1", format!("{} grid rows", batch * n * cells), format!("{rows}")));
    }
    let mut merged: Option<Var> = None;
    for (i, &vid) in view_ids.iter().enumerate() {
        let w = cp
            .per_view
            .get(vid)
            .ok_or_else(|| Error::shape("fuse_conv1x1", format!("view id < {}", cp.per_view.len()), format!("{vid}")))?;
        let idx: Vec<usize> = (0..batch * cells).map(|r| ((r / cells) * n + i) * cells + r % cells).collect();
        let f = g.gather_rows(grid, idx);
        let w = g.param(store, *w);
        let y = g.matmul(f, w);
        merged = Some(match merged {
            Some(m) => g.add(m, y),
            None => y,
        });
    }
    let merged = merged.ok_or_else(|| Error::shape("fuse_conv1x1", "at least one view", "0"))?;
    let b = g.param(store, cp.bias);
    let merged = g.add_row(merged, b);
    let pos = g.param(store, cp.pos);
    let pos = g.gather_rows(pos, (0..batch * cells).map(|r| r % cells).collect());
    let merged = g.add(merged, pos);
    let ld = n_joints * n;
    let tile: Vec<usize> = (0..batch * ld).map(|r| (r / ld) * cells + (r % ld) % cells).collect();
    Ok(g.gather_rows(merged, tile))
}

/// Output-level fusion: the master prediction expressed in every view.
pub fn output_level_fusion_targets(master: &PosedBody, rig: &CameraRig) -> Vec<PosedBody> {
    rig.views()
        .iter()
        .map(|v| PosedBody {
            vertices: rotate_points(&v.rotation, &master.vertices),
            joints: rotate_points(&v.rotation, &master.joints),
        })
        .collect()
}
