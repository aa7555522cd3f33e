//! Scene representation: Gaussians, the per-Gaussian semantic field, cameras
//! and training images, plus the perspective projection of a 3D Gaussian to a
//! 2D screen-space splat.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Label of a Gaussian that belongs to no group.
pub const UNASSIGNED: u32 = u32::MAX;

/// Low-pass floor added to every projected covariance, in px².
pub const COV2D_BLUR: f64 = 0.3;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One 3D Gaussian primitive.
///
/// Stored in its unconstrained parameterization: log-scale, pre-sigmoid
/// opacity and a quaternion that is renormalized whenever it is read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    /// (w, x, y, z)
    pub rotation: [f32; 4],
    pub log_scale: [f32; 3],
    pub opacity_logit: f32,
    pub color: [f32; 3],
}

impl Gaussian {
    pub fn new(
        position: [f64; 3],
        rotation: [f64; 4],
        scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    ) -> Self {
        let q = normalize_quat(rotation);
        Self {
            position: position.map(|v| v as f32),
            rotation: q.map(|v| v as f32),
            log_scale: scale.map(|s| s.ln() as f32),
            opacity_logit: logit(opacity) as f32,
            color: color.map(|c| c as f32),
        }
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(|s| (s as f64).exp())
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        normalize_quat(self.rotation.map(|v| v as f64))
    }

    pub fn color_f64(&self) -> [f64; 3] {
        self.color.map(|c| c as f64)
    }

    pub fn geometry(&self) -> GaussianGeometry {
        GaussianGeometry {
            position: self.position.map(|v| v as f64),
            rotation: self.rotation.map(|v| v as f64),
            log_scale: self.log_scale.map(|v| v as f64),
        }
    }

    /// World-space covariance R diag(s²) Rᵀ.
    pub fn covariance(&self) -> Matrix3<f64> {
        self.geometry().covariance()
    }
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    q.map(|v| v / n)
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back onto the unit quaternion.
fn quat_matrix_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Double-precision view of the geometric parameters of a Gaussian, in the
/// same unconstrained parameterization as [`Gaussian`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianGeometry {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
}

impl GaussianGeometry {
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = quat_to_matrix(normalize_quat(self.rotation));
        let s = self.log_scale.map(f64::exp);
        let m = r * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
        m * m.transpose()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryGrads {
    pub position: [f64; 3],
    /// Gradient with respect to the stored (possibly unnormalized) quaternion.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
}

/// Pinhole camera with a world-to-camera rigid transform. Camera space is
/// x right, y down, z forward; pixel centers sit at integer coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target` with vertical field of view `fov_y`
    /// (radians).
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        fov_y: f64,
    ) -> Self {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
            rotation,
            translation,
            width,
            height,
            near: 0.05,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidData(format!(
                "camera resolution {}x{} below 16x16",
                self.width, self.height
            )));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).amax();
        if err > 1e-6 {
            return Err(Error::InvalidData(format!(
                "camera rotation not orthonormal (error {err:e})"
            )));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidData("camera clip range invalid".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A Gaussian projected to screen space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: [f64; 2],
    /// Symmetric covariance stored as (xx, xy, yy), px².
    pub cov: [f64; 3],
    pub depth: f64,
}

fn perspective_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

pub fn project_geometry(geom: &GaussianGeometry, cam: &Camera) -> Result<Splat2D> {
    let t = cam.to_camera(&Vector3::from(geom.position));
    if t.z <= cam.near {
        return Err(Error::BehindCamera {
            depth: t.z,
            near: cam.near,
        });
    }
    let j = perspective_jacobian(cam, &t);
    let m = j * cam.rotation;
    let cov = m * geom.covariance() * m.transpose();
    Ok(Splat2D {
        mean: [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy],
        cov: [cov[(0, 0)] + COV2D_BLUR, cov[(0, 1)], cov[(1, 1)] + COV2D_BLUR],
        depth: t.z,
    })
}

pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Result<Splat2D> {
    project_geometry(&g.geometry(), cam)
}

/// Reverse-mode derivative of [`project_geometry`]. `d_cov` uses the same
/// (xx, xy, yy) parameterization as [`Splat2D::cov`]; the depth output is
/// not differentiated.
pub fn project_backward(
    geom: &GaussianGeometry,
    cam: &Camera,
    d_mean: [f64; 2],
    d_cov: [f64; 3],
) -> GeometryGrads {
    let t = cam.to_camera(&Vector3::from(geom.position));
    let iz = 1.0 / t.z;
    let j = perspective_jacobian(cam, &t);
    let w = cam.rotation;
    let m = j * w;

    let q = normalize_quat(geom.rotation);
    let rot = quat_to_matrix(q);
    let s = geom.log_scale.map(f64::exp);
    let rs = rot * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
    let sigma = rs * rs.transpose();

    // Symmetric gradient on the 2x2 covariance.
    let g = nalgebra::Matrix2::new(d_cov[0], 0.5 * d_cov[1], 0.5 * d_cov[1], d_cov[2]);

    // cov = M Σ Mᵀ
    let d_sigma = m.transpose() * g * m;
    let d_m = 2.0 * g * m * sigma;
    let d_j = d_m * w.transpose();

    let mut d_t = Vector3::new(
        d_mean[0] * cam.fx * iz,
        d_mean[1] * cam.fy * iz,
        -d_mean[0] * cam.fx * t.x * iz * iz - d_mean[1] * cam.fy * t.y * iz * iz,
    );
    d_t.x += d_j[(0, 2)] * (-cam.fx * iz * iz);
    d_t.y += d_j[(1, 2)] * (-cam.fy * iz * iz);
    d_t.z += d_j[(0, 0)] * (-cam.fx * iz * iz)
        + d_j[(0, 2)] * (2.0 * cam.fx * t.x * iz * iz * iz)
        + d_j[(1, 1)] * (-cam.fy * iz * iz)
        + d_j[(1, 2)] * (2.0 * cam.fy * t.y * iz * iz * iz);
    let d_p = w.transpose() * d_t;

    // Σ = (R S)(R S)ᵀ
    let d_rs = 2.0 * d_sigma * rs;
    let mut d_rot = d_rs;
    let mut d_log_scale = [0.0; 3];
    for c in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            ds += d_rs[(r, c)] * rot[(r, c)];
            d_rot[(r, c)] *= s[c];
        }
        d_log_scale[c] = ds * s[c];
    }
    let d_qn = quat_matrix_backward(q, &d_rot);
    // Through the normalization q / |q|.
    let raw = geom.rotation;
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|i| d_qn[i] * q[i]).sum();
    let d_q = [0, 1, 2, 3].map(|i| (d_qn[i] - q[i] * dot) / norm);

    GeometryGrads {
        position: [d_p.x, d_p.y, d_p.z],
        rotation: d_q,
        log_scale: d_log_scale,
    }
}

/// Per-Gaussian semantic vectors and instance labels, in the same order as
/// the Gaussian array.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticField {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
}

impl SemanticField {
    pub fn new(len: usize, dim: usize) -> Self {
        Self {
            dim,
            features: vec![0.0; len * dim],
            labels: vec![UNASSIGNED; len],
        }
    }

    pub fn from_parts(dim: usize, features: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} entries of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f32] {
        &mut self.features
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    /// Number of groups implied by the labels (largest assigned label + 1).
    pub fn n_groups(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != UNASSIGNED)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Zero features and clear all labels.
    pub fn reset(&mut self) {
        self.features.fill(0.0);
        self.labels.fill(UNASSIGNED);
    }

    pub fn push(&mut self, feature: &[f32], label: u32) {
        assert_eq!(feature.len(), self.dim);
        self.features.extend_from_slice(feature);
        self.labels.push(label);
    }
}

/// Interleaved RGB float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_f64(width: usize, height: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f32; 3] {
        let o = (v * self.width + u) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub idsf: SemanticField,
    pub cameras: Vec<Camera>,
    pub train_images: Vec<Image>,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, feature_dim: usize) -> Self {
        let n = gaussians.len();
        Self {
            gaussians,
            idsf: SemanticField::new(n, feature_dim),
            cameras: Vec::new(),
            train_images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.len() != self.idsf.len() {
            return Err(Error::InvalidData(format!(
                "{} gaussians but {} semantic entries",
                self.gaussians.len(),
                self.idsf.len()
            )));
        }
        if !self.train_images.is_empty() && self.train_images.len() != self.cameras.len() {
            return Err(Error::InvalidData(format!(
                "{} cameras but {} training images",
                self.cameras.len(),
                self.train_images.len()
            )));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        for (img, cam) in self.train_images.iter().zip(&self.cameras) {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::InvalidData("image and camera resolution differ".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn axis_camera(cx: f64, cy: f64) -> Camera {
        Camera {
            fx: 100.0,
            fy: 120.0,
            cx,
            cy,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width: 64,
            height: 64,
            near: 0.1,
            far: 100.0,
        }
    }

    fn random_geometry(rng: &mut ChaCha8Rng) -> GaussianGeometry {
        GaussianGeometry {
            position: [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(2.0..4.0),
            ],
            rotation: [0; 4].map(|_| StandardNormal.sample(rng)),
            log_scale: [0; 3].map(|_| rng.random_range(-3.0f64..-1.0)),
        }
    }

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let q = normalize_quat([1.0, 0.0, 0.0, 0.0].map(|v: f64| v + rng.random_range(-0.1..0.1)));
        Camera {
            rotation: quat_to_matrix(q),
            translation: Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.2..0.2),
            ),
            ..axis_camera(32.0, 30.0)
        }
    }

    #[test]
    fn on_axis_projection() {
        let cam = axis_camera(31.5, 30.0);
        let s = 0.2;
        let z = 4.0;
        let g = Gaussian::new([0.0, 0.0, z], [1.0, 0.0, 0.0, 0.0], [s; 3], 0.5, [0.5; 3]);
        let sp = project_gaussian(&g, &cam).unwrap();
        assert_eq!(sp.mean, [31.5, 30.0]);
        // log/exp round trip of the f32-stored scale
        let s = g.scale()[0];
        assert!((sp.cov[0] - ((100.0 * s / z).powi(2) + 0.3)).abs() < 1e-9);
        assert!((sp.cov[2] - ((120.0 * s / z).powi(2) + 0.3)).abs() < 1e-9);
        assert!(sp.cov[1].abs() < 1e-12);
        assert_eq!(sp.depth, z);
    }

    #[test]
    fn behind_near_plane_is_rejected() {
        let cam = axis_camera(32.0, 32.0);
        let g = Gaussian::new([0.0, 0.0, 0.05], [1.0, 0.0, 0.0, 0.0], [0.1; 3], 0.5, [0.5; 3]);
        assert!(matches!(
            project_gaussian(&g, &cam),
            Err(Error::BehindCamera { .. })
        ));
        let g = Gaussian::new([0.0, 0.0, -1.0], [1.0, 0.0, 0.0, 0.0], [0.1; 3], 0.5, [0.5; 3]);
        assert!(project_gaussian(&g, &cam).is_err());
    }

    #[test]
    fn covariance_matches_monte_carlo_projection() {
        // Sample the 3D Gaussian, push every sample through the exact pinhole
        // model and take the empirical covariance of the image points.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            // Footprints small against depth, where the local affine
            // approximation of the perspective map holds.
            let mut geom = random_geometry(&mut rng);
            geom.log_scale = [0; 3].map(|_| rng.random_range(-4.5f64..-3.0));
            let cam = random_camera(&mut rng);
            let sp = project_geometry(&geom, &cam).unwrap();
            let q = normalize_quat(geom.rotation);
            let r = quat_to_matrix(q);
            let s = geom.log_scale.map(f64::exp);
            let n = 100_000;
            let mut pts = Vec::with_capacity(n);
            for _ in 0..n {
                let z: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
                let local = Vector3::new(z[0] * s[0], z[1] * s[1], z[2] * s[2]);
                let p = Vector3::from(geom.position) + r * local;
                let t = cam.to_camera(&p);
                pts.push([cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy]);
            }
            let mean = pts.iter().fold([0.0; 2], |a, p| [a[0] + p[0], a[1] + p[1]]);
            let mean = [mean[0] / n as f64, mean[1] / n as f64];
            let mut c = [0.0; 3];
            for p in &pts {
                let d = [p[0] - mean[0], p[1] - mean[1]];
                c[0] += d[0] * d[0];
                c[1] += d[0] * d[1];
                c[2] += d[1] * d[1];
            }
            let c = c.map(|v| v / (n as f64 - 1.0));
            let analytic = [sp.cov[0] - COV2D_BLUR, sp.cov[1], sp.cov[2] - COV2D_BLUR];
            let diff = ((analytic[0] - c[0]).powi(2)
                + 2.0 * (analytic[1] - c[1]).powi(2)
                + (analytic[2] - c[2]).powi(2))
            .sqrt();
            let norm = (c[0].powi(2) + 2.0 * c[1].powi(2) + c[2].powi(2)).sqrt();
            assert!(diff / norm < 0.02, "relative Frobenius error {}", diff / norm);
        }
    }

    fn fd_projection_scalar(geom: &GaussianGeometry, cam: &Camera, wm: [f64; 2], wc: [f64; 3]) -> f64 {
        let sp = project_geometry(geom, cam).unwrap();
        wm[0] * sp.mean[0] + wm[1] * sp.mean[1] + wc[0] * sp.cov[0] + wc[1] * sp.cov[1] + wc[2] * sp.cov[2]
    }

    #[test]
    fn projection_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let geom = random_geometry(&mut rng);
            let cam = random_camera(&mut rng);
            let wm = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let wc = [0; 3].map(|_| rng.random_range(-1.0..1.0));
            let g = project_backward(&geom, &cam, wm, wc);
            let eps = 1e-6;
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for k in 0..10 {
                let mut plus = geom;
                let mut minus = geom;
                let (a, p, m) = match k {
                    0..=2 => (g.position[k], &mut plus.position[k], &mut minus.position[k]),
                    3..=6 => (g.rotation[k - 3], &mut plus.rotation[k - 3], &mut minus.rotation[k - 3]),
                    _ => (g.log_scale[k - 7], &mut plus.log_scale[k - 7], &mut minus.log_scale[k - 7]),
                };
                *p += eps;
                *m -= eps;
                let n = (fd_projection_scalar(&plus, &cam, wm, wc) - fd_projection_scalar(&minus, &cam, wm, wc))
                    / (2.0 * eps);
                analytic.push(a);
                numeric.push(n);
            }
            let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-4 * scale.max(1e-12), "analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn principal_point_shift_moves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = random_geometry(&mut rng);
        let cam = random_camera(&mut rng);
        let mut shifted = cam.clone();
        shifted.cx += 3.25;
        shifted.cy -= 1.5;
        let a = project_geometry(&geom, &cam).unwrap();
        let b = project_geometry(&geom, &shifted).unwrap();
        assert!((b.mean[0] - a.mean[0] - 3.25).abs() < 1e-9);
        assert!((b.mean[1] - a.mean[1] + 1.5).abs() < 1e-9);
        assert_eq!(a.cov, b.cov);
    }

    proptest! {
        #[test]
        fn covariance_is_spd_with_scale_floor(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(0.01f64..2.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let geom = GaussianGeometry { position: [0.0; 3], rotation: q, log_scale: s.map(f64::ln) };
            let eig = geom.covariance().symmetric_eigen();
            let min_s = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let min_eig = eig.eigenvalues.min();
            prop_assert!(min_eig > 0.0);
            prop_assert!(min_eig >= min_s * min_s * (1.0 - 1e-9));
        }
    }
}
