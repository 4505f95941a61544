//! Multi-view samples and the `MMTD` binary dataset file.
//!
//! Layout (little-endian): magic `MMTD`, then u32 `version, n_samples, N, K,
//! M_full, H, W, c`, then per sample the f32 arrays `images[N][H][W][c]`,
//! `gt_joints3d[N][K][3]`, `gt_joints2d[N][K][2]`, `gt_vertices[N][M_full][3]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pose::{pose_body, sample_pose_with, PoseConfig};
use super::render::{render_view, Raster, RenderConfig};
use crate::error::{Error, Result};
use crate::geometry::{project, rotate_points, CameraRig, Rotation};
use crate::mesh::{MeshTemplate, PosedBody};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MMTD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub images: Vec<Raster>,
    /// Per view, `K × 3` in that view's frame.
    pub joints3d: Vec<Matrix>,
    /// Per view, `K × 2` pixels.
    pub joints2d: Vec<Matrix>,
    /// Per view, `M_full × 3` in that view's frame.
    pub vertices: Vec<Matrix>,
}

impl MultiViewSample {
    pub fn n_views(&self) -> usize {
        self.images.len()
    }

    /// Keeps the listed views, in order.
    pub fn select_views(&self, views: &[usize]) -> Self {
        Self {
            images: views.iter().map(|&v| self.images[v].clone()).collect(),
            joints3d: views.iter().map(|&v| self.joints3d[v].clone()).collect(),
            joints2d: views.iter().map(|&v| self.joints2d[v].clone()).collect(),
            vertices: views.iter().map(|&v| self.vertices[v].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_samples: usize,
    pub n_views: usize,
    pub n_joints: usize,
    pub n_vertices: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl DatasetHeader {
    fn record_floats(&self) -> usize {
        self.n_views
            * (self.height * self.width * self.channels + self.n_joints * 5 + self.n_vertices * 3)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<MultiViewSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct GenConfig {
    pub pose: PoseConfig,
    pub render: RenderConfig,
}


/// Rotation from the posing frame into the master camera frame of the
/// default rig (camera 0 of the evenly spaced ring).
fn body_to_master(rig: &CameraRig) -> Rotation {
    super::render::default_world_rotations(rig.len().max(1))[0]
}

/// Builds all views of one body given in the master frame.
pub fn sample_from_body(master_body: &PosedBody, rig: &CameraRig, config: &RenderConfig) -> MultiViewSample {
    let mut s = MultiViewSample {
        images: Vec::with_capacity(rig.len()),
        joints3d: Vec::with_capacity(rig.len()),
        joints2d: Vec::with_capacity(rig.len()),
        vertices: Vec::with_capacity(rig.len()),
    };
    for view in rig.views() {
        s.images.push(render_view(view, master_body, config));
        s.joints3d.push(rotate_points(&view.rotation, &master_body.joints));
        s.joints2d.push(project(&view.intrinsics, &view.rotation, &master_body.joints));
        s.vertices.push(rotate_points(&view.rotation, &master_body.vertices));
    }
    s
}

/// Sample `index` of the dataset seeded with `seed`; each index draws from
/// its own random stream, so samples are independent of generation order.
pub fn generate_sample(
    index: u64,
    seed: u64,
    rig: &CameraRig,
    template: &MeshTemplate,
    config: &GenConfig,
) -> Result<MultiViewSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let params = sample_pose_with(&config.pose, &mut rng);
    let body = pose_body(&params, template)?;
    let to_master = body_to_master(rig);
    let master = PosedBody {
        vertices: rotate_points(&to_master, &body.vertices),
        joints: rotate_points(&to_master, &body.joints),
    };
    Ok(sample_from_body(&master, rig, &config.render))
}

pub fn generate(
    n_samples: usize,
    seed: u64,
    rig: &CameraRig,
    template: &MeshTemplate,
    config: &GenConfig,
) -> Result<Dataset> {
    let samples = (0..n_samples as u64)
        .map(|i| generate_sample(i, seed, rig, template, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            n_samples,
            n_views: rig.len(),
            n_joints: template.num_joints(),
            n_vertices: template.num_vertices(),
            height: config.render.height,
            width: config.render.width,
            channels: 1,
        },
        samples,
    })
}

/// Generates `n_samples` samples and writes them to `path`.
pub fn make_dataset(
    path: &Path,
    n_samples: usize,
    rig: &CameraRig,
    seed: u64,
    template: &MeshTemplate,
    config: &GenConfig,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let ds = generate(n_samples, seed, rig, template, config)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, &ds)?;
    w.flush()?;
    Ok(ds)
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for &x in m.as_slice() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn write_dataset(w: &mut impl Write, ds: &Dataset) -> Result<()> {
    let h = &ds.header;
    if h.n_samples != ds.samples.len() {
        return Err(Error::Format("header sample count disagrees with samples".into()));
    }
    w.write_all(MAGIC)?;
    for v in [VERSION as usize, h.n_samples, h.n_views, h.n_joints, h.n_vertices, h.height, h.width, h.channels] {
        put_u32(w, v)?;
    }
    let mut buf = Vec::with_capacity(h.record_floats() * 4);
    for s in &ds.samples {
        check_sample(h, s)?;
        buf.clear();
        for img in &s.images {
            for &x in &img.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        for m in s.joints3d.iter().chain(&s.joints2d).chain(&s.vertices) {
            put_matrix(&mut buf, m);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn check_sample(h: &DatasetHeader, s: &MultiViewSample) -> Result<()> {
    let ok = s.images.len() == h.n_views
        && s.images.iter().all(|i| i.height == h.height && i.width == h.width && i.data.len() == h.height * h.width * h.channels)
        && s.joints3d.iter().all(|m| m.shape() == (h.n_joints, 3))
        && s.joints2d.iter().all(|m| m.shape() == (h.n_joints, 2))
        && s.vertices.iter().all(|m| m.shape() == (h.n_vertices, 3))
        && s.joints3d.len() == h.n_views
        && s.joints2d.len() == h.n_views
        && s.vertices.len() == h.n_views;
    if ok {
        Ok(())
    } else {
        Err(Error::Format("sample does not match dataset header".into()))
    }
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an MMTD dataset".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut f = [0usize; 7];
    for x in &mut f {
        *x = get_u32(r)?;
    }
    let header = DatasetHeader {
        n_samples: f[0],
        n_views: f[1],
        n_joints: f[2],
        n_vertices: f[3],
        height: f[4],
        width: f[5],
        channels: f[6],
    };
    if header.channels != 1 {
        return Err(Error::Format(format!("expected 1 image channel, got {}", header.channels)));
    }
    let mut bytes = vec![0u8; header.record_floats() * 4];
    let mut samples = Vec::with_capacity(header.n_samples);
    for _ in 0..header.n_samples {
        r.read_exact(&mut bytes)?;
        let mut vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take_matrix = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| vals.next().expect("record length checked") as f64)
        };
        let npx = header.height * header.width;
        let mut images = Vec::with_capacity(header.n_views);
        for _ in 0..header.n_views {
            let m = take_matrix(1, npx);
            images.push(Raster {
                height: header.height,
                width: header.width,
                data: m.as_slice().iter().map(|&x| x as f32).collect(),
                outside_fraction: 0.0,
            });
        }
        let joints3d = (0..header.n_views).map(|_| take_matrix(header.n_joints, 3)).collect();
        let joints2d = (0..header.n_views).map(|_| take_matrix(header.n_joints, 2)).collect();
        let vertices = (0..header.n_views).map(|_| take_matrix(header.n_vertices, 3)).collect();
        samples.push(MultiViewSample {
            images,
            joints3d,
            joints2d,
            vertices,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last sample".into()));
    }
    Ok(Dataset { header, samples })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Largest deviation of the ground truth from the cross-view relations
/// `j3d[i] = R_i j3d[master]` and `j2d[i] = Π(K_i, R_i, j3d[master])`.
/// Returns `(max 3D error, max 2D error in pixels)`.
pub fn cross_view_error(sample: &MultiViewSample, rig: &CameraRig) -> (f64, f64) {
    let master = &sample.joints3d[rig.master()];
    let (mut e3, mut e2) = (0.0f64, 0.0f64);
    for (i, view) in rig.views().iter().enumerate() {
        e3 = e3.max(rotate_points(&view.rotation, master).max_abs_diff(&sample.joints3d[i]));
        e2 = e2.max(project(&view.intrinsics, &view.rotation, master).max_abs_diff(&sample.joints2d[i]));
    }
    (e3, e2)
}
