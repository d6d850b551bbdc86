//! Camera geometry: projection of LIDAR returns, RBF depth densification and
//! depth-aware image remapping between calibrated cameras.
//!
//! Pixel coordinates put the centre of pixel `(i, j)` at `u = i, v = j`.
//! Images are assumed rectified; lens distortion is not modelled here.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::raster::{Image, LabelMap, IGNORE};
use crate::{Error, Result};

/// Kernel-block diagonal regularization for the RBF system.
pub const RBF_REGULARIZATION: f64 = 1e-10;
/// Lower bound applied to densified depth, in meters.
pub const DEPTH_FLOOR: f64 = 1e-3;
/// Default cap on the number of RBF control points.
pub const DEFAULT_MAX_CONTROLS: usize = 2000;

const ROTATION_TOLERANCE: f64 = 1e-9;

/// Pinhole intrinsics of a rectified camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && fx.is_finite()
            && fy.is_finite()
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::Invalid(format!(
                "camera fx={fx} fy={fy} cx={cx} cy={cy} size={width}x{height}"
            )));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Project a camera-frame point. Returns `None` for points at or behind
    /// the image plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Nearest pixel index for a continuous coordinate, if it lies in the image.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (x, y) = (u.round(), v.round());
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Rigid transform `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Extrinsics {
    /// Fails unless `R` is orthonormal with determinant one.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho_err <= ROTATION_TOLERANCE) || !((det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(Error::Invalid(format!(
                "rotation is not proper orthonormal (|RᵀR - I| = {ortho_err:e}, det = {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite translation".into()));
        }
        Ok(Extrinsics {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Extrinsics {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Extrinsics {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about the camera y axis (yaw) followed by a translation.
    pub fn from_yaw(angle: f64, t: Vector3<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        Extrinsics {
            rotation: r,
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Extrinsics {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// The transform applying `self` first and then `next`.
    pub fn then(&self, next: &Extrinsics) -> Self {
        Extrinsics {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn is_valid(&self) -> bool {
        self.points.iter().all(|p| {
            p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.reflectivity >= 0.0
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

/// Projected LIDAR returns on one image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<DepthSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseDepth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DenseDepth {
    pub fn constant(width: usize, height: usize, d: f64) -> Self {
        DenseDepth {
            width,
            height,
            depth: vec![d; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }
}

/// Transform the cloud into the camera frame and keep returns that land in
/// front of the camera and inside the image.
pub fn project_points(cloud: &PointCloud, ext: &Extrinsics, cam: &CameraModel) -> SparseDepth {
    let samples = cloud
        .points
        .iter()
        .filter_map(|p| {
            let pc = ext.apply(&Vector3::new(p.x, p.y, p.z));
            let (u, v) = cam.project(&pc)?;
            cam.contains(u, v).then_some(DepthSample { u, v, d: pc.z })
        })
        .collect();
    SparseDepth {
        width: cam.width,
        height: cam.height,
        samples,
    }
}

/// Inverse pinhole model: camera-frame point seen at `(u, v)` at depth `d`.
pub fn backproject(u: f64, v: f64, d: f64, cam: &CameraModel) -> Result<Vector3<f64>> {
    if !(d > 0.0) {
        return Err(Error::Invalid(format!("backprojection depth must be > 0, got {d}")));
    }
    Ok(Vector3::new((u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d))
}

/// Fitted RBF interpolant `s(p) = Σ wᵢ |p - pᵢ| + poly(p)`.
#[derive(Debug, Clone)]
pub struct RbfInterpolant {
    centers: Vec<(f64, f64)>,
    weights: Vec<f64>,
    // Polynomial part in normalized coordinates: c0 + c1·(u-mu)/s + c2·(v-mv)/s.
    poly: [f64; 3],
    origin: (f64, f64),
    scale: f64,
}

impl RbfInterpolant {
    /// Fit an exact interpolant through `(u, v) -> value` control points using
    /// the linear kernel with affine augmentation. Collinear (or fewer than
    /// three) controls fall back to constant augmentation, since the affine
    /// block is rank deficient there.
    pub fn fit(controls: &[(f64, f64, f64)]) -> Result<Self> {
        let n = controls.len();
        if n == 0 {
            return Err(Error::EmptyDepth);
        }
        let mu = controls.iter().map(|c| c.0).sum::<f64>() / n as f64;
        let mv = controls.iter().map(|c| c.1).sum::<f64>() / n as f64;
        let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
        for &(u, v, _) in controls {
            suu += (u - mu) * (u - mu);
            svv += (v - mv) * (v - mv);
            suv += (u - mu) * (v - mv);
        }
        let scale = ((suu + svv) / n as f64).sqrt().max(1.0);
        // Smallest eigenvalue of the 2x2 scatter decides whether the
        // controls span the plane.
        let tr = suu + svv;
        let det = suu * svv - suv * suv;
        let lambda_min = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
        let affine = n >= 3 && lambda_min > 1e-9 * tr.max(1.0);
        let m = if affine { 3 } else { 1 };

        let dim = n + m;
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..n {
            let (ui, vi, di) = controls[i];
            for j in 0..n {
                let (uj, vj, _) = controls[j];
                a[(i, j)] = ((ui - uj).powi(2) + (vi - vj).powi(2)).sqrt();
            }
            a[(i, i)] += RBF_REGULARIZATION;
            let basis = [1.0, (ui - mu) / scale, (vi - mv) / scale];
            for k in 0..m {
                a[(i, n + k)] = basis[k];
                a[(n + k, i)] = basis[k];
            }
            rhs[i] = di;
        }
        let sol = a.lu().solve(&rhs).ok_or_else(|| {
            Error::Singular(format!("{n} controls, {m} polynomial terms, LU factorization failed"))
        })?;
        if !sol.iter().all(|v| v.is_finite()) {
            return Err(Error::Singular(format!(
                "{n} controls, {m} polynomial terms, solution not finite"
            )));
        }
        let mut poly = [0.0; 3];
        poly[..m].copy_from_slice(&sol.as_slice()[n..]);
        Ok(RbfInterpolant {
            centers: controls.iter().map(|c| (c.0, c.1)).collect(),
            weights: sol.as_slice()[..n].to_vec(),
            poly,
            origin: (mu, mv),
            scale,
        })
    }

    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let mut s = self.poly[0]
            + self.poly[1] * (u - self.origin.0) / self.scale
            + self.poly[2] * (v - self.origin.1) / self.scale;
        for (&(cu, cv), &w) in self.centers.iter().zip(&self.weights) {
            s += w * ((u - cu).powi(2) + (v - cv).powi(2)).sqrt();
        }
        s
    }

    pub fn num_controls(&self) -> usize {
        self.centers.len()
    }
}

/// Uniformly strided subset of at most `max_controls` samples, with exact
/// duplicates of a pixel position collapsed to the nearest return.
pub fn select_controls(sparse: &SparseDepth, max_controls: usize) -> Vec<(f64, f64, f64)> {
    let n = sparse.samples.len();
    let take = n.min(max_controls.max(1));
    let mut picked: Vec<(f64, f64, f64)> = (0..take)
        .map(|i| {
            let s = sparse.samples[i * n / take];
            (s.u, s.v, s.d)
        })
        .collect();
    picked.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    picked.dedup_by(|later, earlier| later.0 == earlier.0 && later.1 == earlier.1);
    picked
}

/// Dense depth for every pixel centre of `cam` from sparse control points.
pub fn densify_depth(sparse: &SparseDepth, cam: &CameraModel, max_controls: usize) -> Result<DenseDepth> {
    if sparse.samples.is_empty() {
        return Err(Error::EmptyDepth);
    }
    let controls = select_controls(sparse, max_controls);
    let rbf = RbfInterpolant::fit(&controls)?;
    let mut depth = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = rbf.eval(x as f64, y as f64);
            depth.push(if d.is_finite() { d.max(DEPTH_FLOOR) } else { DEPTH_FLOOR });
        }
    }
    Ok(DenseDepth {
        width: cam.width,
        height: cam.height,
        depth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Bilinear,
    Nearest,
}

/// Source-image coordinates seen by every destination pixel, `None` where
/// the reprojection leaves the source image or falls behind it.
fn reprojection_map(
    src_cam: &CameraModel,
    src_ext: &Extrinsics,
    dst_cam: &CameraModel,
    dst_depth: &DenseDepth,
) -> Result<Vec<Option<(f64, f64)>>> {
    if dst_depth.width != dst_cam.width || dst_depth.height != dst_cam.height {
        return Err(Error::Shape(format!(
            "depth {}x{} vs destination camera {}x{}",
            dst_depth.width, dst_depth.height, dst_cam.width, dst_cam.height
        )));
    }
    let mut out = Vec::with_capacity(dst_cam.width * dst_cam.height);
    for y in 0..dst_cam.height {
        for x in 0..dst_cam.width {
            let d = dst_depth.at(x, y);
            let coord = if d > 0.0 {
                let p = backproject(x as f64, y as f64, d, dst_cam)?;
                src_cam
                    .project(&src_ext.apply(&p))
                    .filter(|&(u, v)| src_cam.pixel_of(u, v).is_some())
            } else {
                None
            };
            out.push(coord);
        }
    }
    Ok(out)
}

fn bilinear(plane: &[f64], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let x0f = u.floor();
    let y0f = v.floor();
    let ax = u - x0f;
    let ay = v - y0f;
    let clamp_x = |x: f64| x.clamp(0.0, (width - 1) as f64) as usize;
    let clamp_y = |y: f64| y.clamp(0.0, (height - 1) as f64) as usize;
    let (x0, x1) = (clamp_x(x0f), clamp_x(x0f + 1.0));
    let (y0, y1) = (clamp_y(y0f), clamp_y(y0f + 1.0));
    let p = |x: usize, y: usize| plane[y * width + x];
    (1.0 - ay) * ((1.0 - ax) * p(x0, y0) + ax * p(x1, y0)) + ay * ((1.0 - ax) * p(x0, y1) + ax * p(x1, y1))
}

/// Pull `src_img` onto the destination image plane using the destination's
/// dense depth. `src_ext` maps destination-camera coordinates into the
/// source camera frame. Returns the remapped image and a validity mask.
pub fn remap_image(
    src_img: &Image,
    src_cam: &CameraModel,
    src_ext: &Extrinsics,
    dst_cam: &CameraModel,
    dst_depth: &DenseDepth,
    sampling: Sampling,
) -> Result<(Image, Vec<bool>)> {
    if src_img.width != src_cam.width || src_img.height != src_cam.height {
        return Err(Error::Shape(format!(
            "source image {}x{} vs source camera {}x{}",
            src_img.width, src_img.height, src_cam.width, src_cam.height
        )));
    }
    let map = reprojection_map(src_cam, src_ext, dst_cam, dst_depth)?;
    let mut out = Image::zeros(src_img.channels, dst_cam.height, dst_cam.width);
    let valid: Vec<bool> = map.iter().map(Option::is_some).collect();
    for c in 0..src_img.channels {
        let plane = src_img.plane(c);
        let dst = out.plane_mut(c);
        for (i, coord) in map.iter().enumerate() {
            let Some((u, v)) = *coord else { continue };
            dst[i] = match sampling {
                Sampling::Nearest => {
                    let (x, y) = src_cam.pixel_of(u, v).expect("validated by reprojection_map");
                    plane[y * src_img.width + x]
                }
                Sampling::Bilinear => bilinear(plane, src_img.width, src_img.height, u, v),
            };
        }
    }
    Ok((out, valid))
}

/// Nearest-neighbour remap of a label map; pixels with no valid source get
/// the ignore id.
pub fn transfer_labels(
    labels: &LabelMap,
    src_cam: &CameraModel,
    src_ext: &Extrinsics,
    dst_cam: &CameraModel,
    dst_depth: &DenseDepth,
) -> Result<LabelMap> {
    if labels.width != src_cam.width || labels.height != src_cam.height {
        return Err(Error::Shape(format!(
            "labels {}x{} vs source camera {}x{}",
            labels.width, labels.height, src_cam.width, src_cam.height
        )));
    }
    let map = reprojection_map(src_cam, src_ext, dst_cam, dst_depth)?;
    let ids = map
        .iter()
        .map(|coord| match coord {
            Some((u, v)) => {
                let (x, y) = src_cam.pixel_of(*u, *v).expect("validated by reprojection_map");
                labels.get(x, y)
            }
            None => IGNORE,
        })
        .collect();
    Ok(LabelMap {
        width: dst_cam.width,
        height: dst_cam.height,
        ids,
    })
}

/// Single-channel LIDAR input image: `d / normalizer` (clamped to `[0, 1]`)
/// splatted at the rounded pixel of every sample, nearest return winning.
pub fn lidar_input_image(sparse: &SparseDepth, cam: &CameraModel, normalizer: f64) -> Result<Image> {
    if !(normalizer > 0.0) {
        return Err(Error::Invalid(format!("lidar normalizer must be > 0, got {normalizer}")));
    }
    let mut nearest = vec![f64::INFINITY; cam.width * cam.height];
    for s in &sparse.samples {
        if let Some((x, y)) = cam.pixel_of(s.u, s.v) {
            let slot = &mut nearest[y * cam.width + x];
            if s.d < *slot {
                *slot = s.d;
            }
        }
    }
    let mut img = Image::zeros(1, cam.height, cam.width);
    for (dst, d) in img.data.iter_mut().zip(nearest) {
        if d.is_finite() {
            *dst = (d / normalizer).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}
