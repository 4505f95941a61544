//! Mesh decoder: body queries built from the fused sequence and the rest
//! template, optional masking, a stack of attention blocks with shrinking
//! width, and the two-stage upsampling to the full mesh.
//!
//! Everything is batched along rows; `L = K + M_sub2` rows per sample.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{attention_block, AttentionParams, AttnGroup};
use crate::mesh::MeshTemplate;
use crate::nn::{Linear, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    /// Widths of the attention blocks; the first must be `d + 3`.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub dropout: f64,
    pub mask_fraction_max: f64,
    pub learnable_upsampling: bool,
}

impl DecoderConfig {
    /// `(d+3) → (d+3)/2 → (d+3)/4`.
    pub fn progressive(d: usize) -> Self {
        let w = d + 3;
        Self {
            d,
            widths: vec![w, w / 2, w / 4],
            heads: 1,
            dropout: 0.1,
            mask_fraction_max: 0.3,
            learnable_upsampling: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MeshDecoder {
    pub config: DecoderConfig,
    pub n_joints: usize,
    pub n_coarse: usize,
    /// `L × K` length maps applied to the master group and to the mean of
    /// the other views' groups.
    pub len_master: ParamId,
    pub len_other: ParamId,
    pub w_body: ParamId,
    pub mask: ParamId,
    pub blocks: Vec<AttentionParams>,
    pub downs: Vec<Linear>,
    pub out: Linear,
    /// Learnable copies of the upsampling matrices, when enabled.
    pub up: Option<(ParamId, ParamId)>,
}

impl MeshDecoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, template: &MeshTemplate, rng: &mut impl Rng) -> Result<Self> {
        let (k, m2) = (template.num_joints(), template.config.m_sub2);
        let l = k + m2;
        let d = config.d;
        if config.widths.first() != Some(&(d + 3)) {
            return Err(Error::Config(format!("first decoder width must be d + 3 = {}", d + 3)));
        }
        let len_limit = (3.0 / k as f64).sqrt();
        let len_master = store.uniform("decoder.len_master", l, k, len_limit, rng);
        let len_other = store.uniform("decoder.len_other", l, k, len_limit, rng);
        let w_body = store.glorot("decoder.w_body", d, d, rng);
        let mask = store.uniform("decoder.mask", 1, d, 0.1, rng);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(AttentionParams::new(store, &format!("decoder.block{i}"), w, config.heads, config.dropout, rng)?);
            if let Some(&next) = config.widths.get(i + 1) {
                downs.push(Linear::new(store, &format!("decoder.down{i}"), w, next, true, rng));
            }
        }
        let last = *config.widths.last().expect("non-empty widths");
        let out = Linear::new(store, "decoder.out", last, 3, true, rng);
        let up = config
            .learnable_upsampling
            .then(|| (store.add("decoder.up1", template.up1.clone()), store.add("decoder.up2", template.up2.clone())));
        Ok(Self {
            config,
            n_joints: k,
            n_coarse: m2,
            len_master,
            len_other,
            w_body,
            mask,
            blocks,
            downs,
            out,
            up,
        })
    }

    pub fn query_len(&self) -> usize {
        self.n_joints + self.n_coarse
    }
}

/// Template coordinates of the query rows: `J_Tpose` then `V_Tpose[sub2]`.
pub fn template_coords(template: &MeshTemplate) -> Matrix {
    let v = template.v_tpose_sub2();
    let k = template.num_joints();
    Matrix::from_fn(k + v.rows(), 3, |r, c| if r < k { template.j_tpose[(r, c)] } else { v[(r - k, c)] })
}

/// `Q_body` per sample: the length-matched projection of `z` (master group
/// plus pooled other groups), mapped by `W^body` and concatenated with the
/// template coordinates. `joint_coords`, when given (`batch·K × 3`),
/// replaces `J_Tpose` in every sample.
#[allow(clippy::too_many_arguments)]
pub fn build_body_queries(
    g: &mut Graph,
    store: &ParamStore,
    dec: &MeshDecoder,
    z: Var,
    template: &MeshTemplate,
    n_views: usize,
    master: usize,
    batch: usize,
    joint_coords: Option<Var>,
) -> Result<Var> {
    let k = dec.n_joints;
    let (rows, d) = g.shape(z);
    if rows != batch * n_views * k || d != dec.config.d || master >= n_views {
        return Err(Error::shape(
            "build_body_queries",
            format!("{} x {} with master < {n_views}", batch * n_views * k, dec.config.d),
            format!("{rows} x {d}, master {master}"),
        ));
    }
    let pm = g.param(store, dec.len_master);
    let po = g.param(store, dec.len_other);
    let wb = g.param(store, dec.w_body);
    let coords = template_coords(template);
    let mut per_sample = Vec::with_capacity(batch);
    for b in 0..batch {
        let group = |g: &mut Graph, i: usize| g.slice_rows(z, (b * n_views + i) * k, k);
        let zm = group(g, master);
        let mut f = g.matmul(pm, zm);
        if n_views > 1 {
            let others: Vec<Var> = (0..n_views).filter(|&i| i != master).map(|i| group(g, i)).collect();
            let mut acc = others[0];
            for &o in &others[1..] {
                acc = g.add(acc, o);
            }
            let mean = g.scale(acc, 1.0 / others.len() as f64);
            let fo = g.matmul(po, mean);
            f = g.add(f, fo);
        }
        let feat = g.matmul(f, wb);
        let tmpl = match joint_coords {
            Some(j) => {
                let jb = g.slice_rows(j, b * k, k);
                let vb = g.constant(coords.slice_rows(k, dec.n_coarse));
                g.concat_rows(&[jb, vb])
            }
            None => g.constant(coords.clone()),
        };
        per_sample.push(g.concat_cols(&[feat, tmpl]));
    }
    Ok(if batch == 1 { per_sample[0] } else { g.concat_rows(&per_sample) })
}

/// Replaces the feature part of the rows listed per sample with the learned
/// mask vector; template coordinates are untouched.
pub fn mask_rows(g: &mut Graph, store: &ParamStore, dec: &MeshDecoder, q: Var, rows: &[usize]) -> Var {
    if rows.is_empty() {
        return q;
    }
    let (n, w) = g.shape(q);
    let d = dec.config.d;
    let mut keep = Matrix::filled(n, w, 1.0);
    let mut put = Matrix::zeros(n, w);
    for &r in rows {
        for c in 0..d {
            keep[(r, c)] = 0.0;
            put[(r, c)] = 1.0;
        }
    }
    let mask = g.param(store, dec.mask);
    let zeros = g.constant(Matrix::zeros(1, w - d));
    let mask = g.concat_cols(&[mask, zeros]);
    let mask = g.gather_rows(mask, vec![0; n]);
    let (keep, put) = (g.constant(keep), g.constant(put));
    let kept = g.mul(q, keep);
    let masked = g.mul(mask, put);
    g.add(kept, masked)
}

/// Rows to mask when each sample masks `round(fraction · L)` rows chosen
/// uniformly.
pub fn choose_masked_rows(rng: &mut impl Rng, l: usize, batch: usize, fraction: f64) -> Vec<usize> {
    let count = (fraction.clamp(0.0, 1.0) * l as f64).round() as usize;
    let mut out = Vec::with_capacity(count * batch);
    for b in 0..batch {
        let mut idx: Vec<usize> = (0..l).collect();
        idx.shuffle(rng);
        let mut chosen = idx[..count].to_vec();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|r| b * l + r));
    }
    out
}

/// Masked vertex modeling: in training, each sample draws a fraction in
/// `[0, mask_fraction_max]` of its joint and vertex rows to mask. Identity
/// at eval.
pub fn mask_queries(g: &mut Graph, store: &ParamStore, dec: &MeshDecoder, q: Var, batch: usize, mode: &mut Mode) -> Var {
    let max = dec.config.mask_fraction_max;
    let Some(rng) = mode.rng() else { return q };
    if max <= 0.0 {
        return q;
    }
    let l = dec.query_len();
    let mut rows = Vec::new();
    for b in 0..batch {
        let frac = rng.gen_range(0.0..=max);
        rows.extend(choose_masked_rows(rng, l, 1, frac).into_iter().map(|r| b * l + r));
    }
    mask_rows(g, store, dec, q, &rows)
}

/// Attention blocks of decreasing width with linear down-projections in
/// between, then a linear map to 3 coordinates per row. Returns
/// `(joints: batch·K × 3, coarse vertices: batch·M_sub2 × 3)`.
pub fn progressive_encode(
    g: &mut Graph,
    store: &ParamStore,
    dec: &MeshDecoder,
    q: Var,
    batch: usize,
    mode: &mut Mode,
) -> Result<(Var, Var)> {
    let l = dec.query_len();
    if g.shape(q) != (batch * l, dec.config.d + 3) {
        return Err(Error::shape(
            "progressive_encode",
            format!("{} x {}", batch * l, dec.config.d + 3),
            format!("{:?}", g.shape(q)),
        ));
    }
    let groups = AttnGroup::batched(batch, l, l);
    let mut x = q;
    for (i, block) in dec.blocks.iter().enumerate() {
        x = attention_block(g, store, block, x, x, &groups, mode)?;
        if let Some(down) = dec.downs.get(i) {
            x = down.forward(g, store, x);
        }
    }
    let y = dec.out.forward(g, store, x);
    let k = dec.n_joints;
    let joints = g.gather_rows(y, (0..batch * k).map(|r| (r / k) * l + r % k).collect());
    let m2 = dec.n_coarse;
    let verts = g.gather_rows(y, (0..batch * m2).map(|r| (r / m2) * l + k + r % m2).collect());
    Ok((joints, verts))
}

/// Decoded body at all resolutions, rows stacked per sample.
#[derive(Clone, Copy, Debug)]
pub struct DecodedBody {
    pub joints: Var,
    pub v_sub2: Var,
    pub v_sub1: Var,
    pub v_full: Var,
}

/// `v_sub1 = up2 · v_sub2`, `v_full = up1 · v_sub1`, per sample.
pub fn upsample_var(
    g: &mut Graph,
    store: &ParamStore,
    dec: &MeshDecoder,
    template: &MeshTemplate,
    v_sub2: Var,
    batch: usize,
) -> (Var, Var) {
    let (up1, up2) = match dec.up {
        Some((a, b)) => (g.param(store, a), g.param(store, b)),
        None => (g.constant(template.up1.clone()), g.constant(template.up2.clone())),
    };
    let m2 = dec.n_coarse;
    let mut s1 = Vec::with_capacity(batch);
    let mut full = Vec::with_capacity(batch);
    for b in 0..batch {
        let v = if batch == 1 { v_sub2 } else { g.slice_rows(v_sub2, b * m2, m2) };
        let a = g.matmul(up2, v);
        full.push(g.matmul(up1, a));
        s1.push(a);
    }
    if batch == 1 {
        (s1[0], full[0])
    } else {
        (g.concat_rows(&s1), g.concat_rows(&full))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn decode_body(
    g: &mut Graph,
    store: &ParamStore,
    dec: &MeshDecoder,
    template: &MeshTemplate,
    z: Var,
    n_views: usize,
    master: usize,
    batch: usize,
    joint_coords: Option<Var>,
    mode: &mut Mode,
) -> Result<DecodedBody> {
    let q = build_body_queries(g, store, dec, z, template, n_views, master, batch, joint_coords)?;
    let q = mask_queries(g, store, dec, q, batch, mode);
    let (joints, v_sub2) = progressive_encode(g, store, dec, q, batch, mode)?;
    let (v_sub1, v_full) = upsample_var(g, store, dec, template, v_sub2, batch);
    Ok(DecodedBody {
        joints,
        v_sub2,
        v_sub1,
        v_full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::mesh::{regress_joints, upsample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, MeshDecoder, MeshTemplate) {
        let t = MeshTemplate::default();
        let mut store = ParamStore::new();
        let dec = MeshDecoder::new(&mut store, DecoderConfig::progressive(64), &t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, dec, t)
    }

    fn z(seed: u64, rows: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, 64, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn widths_follow_progressive_plan() {
        let (_, dec, _) = setup();
        assert_eq!(dec.config.widths, vec![67, 33, 16]);
        assert_eq!(dec.query_len(), 39);
    }

    #[test]
    fn query_shape_and_template_part() {
        let (store, dec, t) = setup();
        let mut g = Graph::new();
        let zv = g.constant(z(2, 56));
        let q = build_body_queries(&mut g, &store, &dec, zv, &t, 4, 0, 1, None).unwrap();
        assert_eq!(g.shape(q), (39, 67));
        let coords = template_coords(&t);
        let sub2 = t.v_tpose_sub2();
        for r in 0..39 {
            let tail = &g.value(q).row(r)[64..];
            assert_eq!(tail, coords.row(r));
            if r < 14 {
                assert_eq!(tail, t.j_tpose.row(r));
            } else {
                assert_eq!(tail, sub2.row(r - 14));
            }
        }
        // Zero input: feature part zero, template intact.
        let mut g = Graph::new();
        let zv = g.constant(Matrix::zeros(56, 64));
        let q = build_body_queries(&mut g, &store, &dec, zv, &t, 4, 0, 1, None).unwrap();
        for r in 0..39 {
            assert!(g.value(q).row(r)[..64].iter().all(|&x| x == 0.0));
            assert_eq!(&g.value(q).row(r)[64..], coords.row(r));
        }
    }

    #[test]
    fn query_shape_for_all_view_counts() {
        let (store, dec, t) = setup();
        for n in 1..=4 {
            let mut g = Graph::new();
            let zv = g.constant(z(3, 2 * 14 * n));
            let q = build_body_queries(&mut g, &store, &dec, zv, &t, n, n - 1, 2, None).unwrap();
            assert_eq!(g.shape(q), (78, 67));
        }
        let mut g = Graph::new();
        let zv = g.constant(z(3, 50));
        assert!(build_body_queries(&mut g, &store, &dec, zv, &t, 4, 0, 1, None).is_err());
    }

    #[test]
    fn template_replacement_swaps_joint_coords() {
        let (store, dec, t) = setup();
        let mut g = Graph::new();
        let zv = g.constant(z(4, 28));
        let j = g.constant(Matrix::filled(14, 3, 0.5));
        let q = build_body_queries(&mut g, &store, &dec, zv, &t, 2, 0, 1, Some(j)).unwrap();
        assert!(g.value(q).row(0)[64..].iter().all(|&x| x == 0.5));
        assert_eq!(&g.value(q).row(20)[64..], template_coords(&t).row(20));
    }

    fn queries(store: &ParamStore, dec: &MeshDecoder, t: &MeshTemplate, g: &mut Graph) -> Var {
        let zv = g.constant(z(5, 56));
        build_body_queries(g, store, dec, zv, t, 4, 0, 1, None).unwrap()
    }

    #[test]
    fn masking_identity_cases() {
        let (store, mut dec, t) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let q = queries(&store, &dec, &t, &mut g);
        assert_eq!(mask_queries(&mut g, &store, &dec, q, 1, &mut Mode::Eval), q);
        dec.config.mask_fraction_max = 0.0;
        assert_eq!(mask_queries(&mut g, &store, &dec, q, 1, &mut Mode::Train(&mut rng)), q);
    }

    #[test]
    fn full_fraction_masks_every_row() {
        let (store, dec, t) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask = store.matrix(dec.mask);
        let coords = template_coords(&t);
        for _ in 0..1000 {
            let mut g = Graph::new();
            let q = queries(&store, &dec, &t, &mut g);
            let rows = choose_masked_rows(&mut rng, 39, 1, 1.0);
            let m = mask_rows(&mut g, &store, &dec, q, &rows);
            let v = g.value(m);
            for r in 0..39 {
                assert_eq!(&v.row(r)[..64], mask.row(0));
                assert_eq!(&v.row(r)[64..], coords.row(r));
            }
        }
    }

    #[test]
    fn partial_masking_keeps_template_and_bounds_count() {
        let (store, dec, t) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = store.matrix(dec.mask);
        for _ in 0..200 {
            let mut g = Graph::new();
            let q = queries(&store, &dec, &t, &mut g);
            let before = g.value(q).clone();
            let m = mask_queries(&mut g, &store, &dec, q, 1, &mut Mode::Train(&mut rng));
            let after = g.value(m);
            let mut masked = 0;
            for r in 0..39 {
                assert_eq!(&after.row(r)[64..], &before.row(r)[64..]);
                if after.row(r)[..64] == *mask.row(0) {
                    masked += 1;
                } else {
                    assert_eq!(after.row(r), before.row(r));
                }
            }
            assert!(masked as f64 <= (0.3f64 * 39.0).round());
        }
    }

    fn decode(store: &ParamStore, dec: &MeshDecoder, t: &MeshTemplate, zm: &Matrix, batch: usize) -> (Matrix, Matrix, Matrix, Matrix) {
        let mut g = Graph::new();
        let zv = g.constant(zm.clone());
        let b = decode_body(&mut g, store, dec, t, zv, 4, 0, batch, None, &mut Mode::Eval).unwrap();
        (
            g.value(b.joints).clone(),
            g.value(b.v_sub2).clone(),
            g.value(b.v_sub1).clone(),
            g.value(b.v_full).clone(),
        )
    }

    #[test]
    fn pipeline_shapes_and_linkage() {
        let (store, dec, t) = setup();
        let (j, v2, v1, vf) = decode(&store, &dec, &t, &z(9, 56), 1);
        assert_eq!((j.shape(), v2.shape(), v1.shape(), vf.shape()), ((14, 3), (25, 3), (100, 3), (400, 3)));
        let (u1, uf) = upsample(&v2, &t).unwrap();
        assert_eq!(v1, u1);
        assert_eq!(vf, uf);
        let r = regress_joints(&vf, &t.joint_regressor).unwrap();
        assert!(r.is_finite() && r.shape() == (14, 3));
        // Deterministic at eval.
        assert_eq!(decode(&store, &dec, &t, &z(9, 56), 1).3, vf);
    }

    #[test]
    fn batch_rows_are_independent() {
        let (store, dec, t) = setup();
        let (a, b) = (z(10, 56), z(11, 56));
        let both = Matrix::from_fn(112, 64, |r, c| if r < 56 { a[(r, c)] } else { b[(r - 56, c)] });
        let (_, _, _, vf) = decode(&store, &dec, &t, &both, 2);
        assert!(vf.slice_rows(0, 400).max_abs_diff(&decode(&store, &dec, &t, &a, 1).3) < 1e-12);
        assert!(vf.slice_rows(400, 400).max_abs_diff(&decode(&store, &dec, &t, &b, 1).3) < 1e-12);
    }

    #[test]
    fn vertex_norm_gradient() {
        let (store, dec, t) = setup();
        let zm = z(12, 56);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let idx: Vec<usize> = (0..40).map(|_| rng.gen_range(0..store.len())).collect();
        let r = check_params(&store, &idx, 1e-5, |g, s| {
            let zv = g.constant(zm.clone());
            let q = build_body_queries(g, s, &dec, zv, &t, 4, 0, 1, None)?;
            let (_, v) = progressive_encode(g, s, &dec, q, 1, &mut Mode::Eval)?;
            let n = g.row_norm(v);
            Ok(g.sum(n))
        })
        .unwrap();
        assert!(r.max_rel < 1e-3, "{r:?}");
    }
}
