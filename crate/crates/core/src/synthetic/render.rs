//! Toy camera rig and z-buffered vertex-splat rendering.

use crate::error::Result;
use crate::geometry::{project, rotate_points, CameraRig, CameraView, Rotation, WeakPerspectiveIntrinsics};
use crate::mesh::PosedBody;

/// Fraction of projected vertices outside the frame above which a raster is
/// flagged.
pub const OUT_OF_FRAME_LIMIT: f64 = 0.1;

/// Pixel scale (per metre) and principal-point offset of each default camera,
/// for a 112-pixel image. Cycled when more than four views are requested.
const SCALES: [f64; 4] = [45.0, 47.0, 43.0, 46.0];
const OFFSETS: [[f64; 2]; 4] = [[0.0, 0.0], [2.0, -1.0], [-2.0, 1.0], [1.0, 2.0]];
pub const ELEVATION_DEG: f64 = 10.0;

/// World-to-camera rotations of the default rig: evenly spaced azimuths at a
/// fixed elevation, all looking at the origin.
pub fn default_world_rotations(n_views: usize) -> Vec<Rotation> {
    (0..n_views)
        .map(|i| {
            let az = (360.0 * i as f64 / n_views as f64).to_radians();
            Rotation::look_at_origin(az, ELEVATION_DEG.to_radians())
        })
        .collect()
}

/// The default rig with view 0 as master. View rotations are relative to
/// the master camera frame.
pub fn default_rig(n_views: usize, image_size: usize) -> Result<CameraRig> {
    let world = default_world_rotations(n_views);
    let to_master = world.first().map(|r| r.transpose()).unwrap_or(Rotation::IDENTITY);
    let px = image_size as f64 / 112.0;
    let views = world
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let off = OFFSETS[i % 4];
            let c = image_size as f64 / 2.0;
            let intr = WeakPerspectiveIntrinsics::new(SCALES[i % 4] * px, [c + off[0] * px, c + off[1] * px])?;
            Ok(CameraView {
                view_id: i,
                rotation: r.compose(&to_master),
                intrinsics: intr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(views, 0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Splat disc radius in pixels.
    pub splat_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 112,
            width: 112,
            splat_radius: 2.5,
        }
    }
}

/// Single-channel `H × W` image; pixel `(row, col)` is `data[row * W + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Fraction of vertices whose projection fell outside the frame.
    pub outside_fraction: f64,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
            outside_fraction: 0.0,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn out_of_frame(&self) -> bool {
        self.outside_fraction > OUT_OF_FRAME_LIMIT
    }
}

/// Depth shading: nearer surfaces are brighter; background stays 0.
fn shade(z: f64) -> f32 {
    (0.6 - 0.4 * (z / 1.2).clamp(-1.0, 1.0)) as f32
}

/// Projects the body's vertices (master frame) into `view` and splats a
/// depth-shaded disc per vertex, nearest surface winning.
pub fn render_view(view: &CameraView, body: &PosedBody, config: &RenderConfig) -> Raster {
    let (h, w) = (config.height, config.width);
    let mut raster = Raster::zeros(h, w);
    let n = body.vertices.rows();
    if n == 0 {
        return raster;
    }
    let cam = rotate_points(&view.rotation, &body.vertices);
    let uv = project(&view.intrinsics, &view.rotation, &body.vertices);
    let mut depth = vec![f64::INFINITY; h * w];
    let r = config.splat_radius;
    let mut outside = 0usize;
    for k in 0..n {
        let (u, v, z) = (uv[(k, 0)], uv[(k, 1)], cam[(k, 2)]);
        if !(u >= -0.5 && u < w as f64 - 0.5 && v >= -0.5 && v < h as f64 - 0.5) {
            outside += 1;
        }
        let c0 = (u - r).ceil().max(0.0) as usize;
        let r0 = (v - r).ceil().max(0.0) as usize;
        let c1 = ((u + r).floor()).min(w as f64 - 1.0);
        let r1 = ((v + r).floor()).min(h as f64 - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let (du, dv) = (col as f64 - u, row as f64 - v);
                if du * du + dv * dv > r * r {
                    continue;
                }
                let i = row * w + col;
                if z < depth[i] {
                    depth[i] = z;
                    raster.data[i] = shade(z);
                }
            }
        }
    }
    raster.outside_fraction = outside as f64 / n as f64;
    raster
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn front_view() -> CameraView {
        CameraView {
            view_id: 0,
            rotation: Rotation::IDENTITY,
            intrinsics: WeakPerspectiveIntrinsics::new(45.0, [56.0, 56.0]).unwrap(),
        }
    }

    fn body(pts: &[[f64; 3]]) -> PosedBody {
        PosedBody {
            vertices: Matrix::from_rows(pts),
            joints: Matrix::zeros(0, 3),
        }
    }

    #[test]
    fn empty_body_renders_blank() {
        let b = PosedBody {
            vertices: Matrix::zeros(0, 3),
            joints: Matrix::zeros(0, 3),
        };
        let r = render_view(&front_view(), &b, &RenderConfig::default());
        assert!(r.data.iter().all(|&x| x == 0.0));
        assert!(!r.out_of_frame());
    }

    #[test]
    fn centre_vertex_splats_around_centre_pixel() {
        let r = render_view(&front_view(), &body(&[[0.0, 0.0, 0.0]]), &RenderConfig::default());
        assert!(r.get(56, 56) > 0.0);
        let lit: Vec<(usize, usize)> = (0..112)
            .flat_map(|y| (0..112).map(move |x| (y, x)))
            .filter(|&(y, x)| r.get(y, x) > 0.0)
            .collect();
        // One disc of radius 2.5 around (56, 56).
        assert_eq!(lit.len(), 21);
        for (y, x) in lit {
            let d2 = (y as f64 - 56.0).powi(2) + (x as f64 - 56.0).powi(2);
            assert!(d2 <= 2.5 * 2.5);
        }
    }

    #[test]
    fn nearer_vertex_wins() {
        let r = render_view(
            &front_view(),
            &body(&[[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]]),
            &RenderConfig::default(),
        );
        assert_eq!(r.get(56, 56), shade(-0.5));
    }

    #[test]
    fn flags_out_of_frame() {
        let r = render_view(
            &front_view(),
            &body(&[[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
            &RenderConfig::default(),
        );
        assert!(r.out_of_frame());
        assert_eq!(r.outside_fraction, 0.5);
    }

    #[test]
    fn default_rig_layout() {
        let rig = default_rig(4, 112).unwrap();
        assert_eq!(rig.len(), 4);
        assert_eq!(rig.master(), 0);
        let r0 = rig.view(0).rotation.matrix();
        for (a, b) in r0.iter().flatten().zip(Rotation::IDENTITY.matrix().iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Opposite cameras see mirrored x: the 180° view flips master x.
        let p = rig.view(2).rotation.apply([1.0, 0.0, 0.0]);
        assert!((p[0] + 1.0).abs() < 1e-9);
    }
}
