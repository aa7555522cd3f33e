//! Binary containers: the scene file, the generic tensor file, and 8-bit
//! PPM/PGM previews.
//!
//! Scene file layout (all little-endian):
//!
//! ```text
//! "IDSF" | u32 version | u32 gaussian count N | u32 feature dim D
//! u64 byte length of the Gaussian block and labels that follow
//! f32[N*3] position | f32[N*4] rotation | f32[N*3] log_scale
//! f32[N] opacity_logit | f32[N*3] color | f32[N*D] feature
//! i64[N] label (i64::MAX = unassigned)
//! u32 camera count C, then per camera:
//!   u64 width | u64 height | f64 fx fy cx cy near far | f64[9] rotation | f64[3] translation
//! u32 image count (0 or C), then per image f32[H*W*3]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{Camera, Gaussian, Image, Scene, SemanticField, UNASSIGNED};

pub const SCENE_MAGIC: &[u8; 4] = b"IDSF";
pub const SCENE_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedPayload {
                expected: (self.pos + n) as u64,
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Fails up front when `n` elements of `size` bytes cannot fit.
    fn require(&self, n: u64, size: u64) -> Result<()> {
        let need = n
            .checked_mul(size)
            .and_then(|b| b.checked_add(self.pos as u64))
            .ok_or_else(|| Error::MalformedHeader("declared sizes overflow".into()))?;
        if need > self.buf.len() as u64 {
            return Err(Error::TruncatedPayload {
                expected: need,
                found: self.buf.len() as u64,
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        self.require(n as u64, 4)?;
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i64s(&mut self, n: usize) -> Result<Vec<i64>> {
        self.require(n as u64, 8)?;
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let n = scene.gaussians.len();
    let d = scene.idsf.dim();
    let mut out = Vec::with_capacity(16 + n * (17 + d) * 4 + n * 8);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64 * ((17 + d as u64) * 4 + 8)).to_le_bytes());
    let g = &scene.gaussians;
    put_f32s(&mut out, g.iter().flat_map(|g| g.position));
    put_f32s(&mut out, g.iter().flat_map(|g| g.rotation));
    put_f32s(&mut out, g.iter().flat_map(|g| g.log_scale));
    put_f32s(&mut out, g.iter().map(|g| g.opacity_logit));
    put_f32s(&mut out, g.iter().flat_map(|g| g.color));
    put_f32s(&mut out, scene.idsf.features().iter().copied());
    for &l in scene.idsf.labels() {
        let v = if l == UNASSIGNED { i64::MAX } else { l as i64 };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(scene.cameras.len() as u32).to_le_bytes());
    for cam in &scene.cameras {
        out.extend_from_slice(&(cam.width as u64).to_le_bytes());
        out.extend_from_slice(&(cam.height as u64).to_le_bytes());
        for v in [cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in 0..3 {
            for c in 0..3 {
                out.extend_from_slice(&cam.rotation[(r, c)].to_le_bytes());
            }
        }
        for v in cam.translation.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(scene.train_images.len() as u32).to_le_bytes());
    for img in &scene.train_images {
        put_f32s(&mut out, img.data.iter().copied());
    }
    out
}

pub fn decode_scene(buf: &[u8]) -> Result<Scene> {
    let mut r = Reader::new(buf);
    let magic = r
        .take(4)
        .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
    if magic != SCENE_MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let expected = n as u64 * ((17 + d as u64) * 4 + 8);
    let declared = r.u64()?;
    if declared < expected {
        return Err(Error::TruncatedPayload { expected, found: declared });
    }
    if declared != expected {
        return Err(Error::MalformedHeader(format!(
            "block length {declared} does not match N = {n}, D = {d}"
        )));
    }
    // Gaussian block + labels must be present in full before anything is parsed.
    r.require(n as u64, (17 + d as u64) * 4 + 8)?;

    let pos = r.f32s(n * 3)?;
    let rot = r.f32s(n * 4)?;
    let scl = r.f32s(n * 3)?;
    let opa = r.f32s(n)?;
    let col = r.f32s(n * 3)?;
    let features = r.f32s(n * d)?;
    let labels = r
        .i64s(n)?
        .into_iter()
        .map(|v| match v {
            i64::MAX => Ok(UNASSIGNED),
            0..=0xFFFF_FFFE => Ok(v as u32),
            _ => Err(Error::InvalidData(format!("label {v} out of range"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let gaussians = (0..n)
        .map(|i| Gaussian {
            position: [pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]],
            rotation: [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
            log_scale: [scl[3 * i], scl[3 * i + 1], scl[3 * i + 2]],
            opacity_logit: opa[i],
            color: [col[3 * i], col[3 * i + 1], col[3 * i + 2]],
        })
        .collect();

    let n_cams = r.u32()? as usize;
    r.require(n_cams as u64, 16 + 18 * 8)?;
    let mut cameras = Vec::with_capacity(n_cams);
    for _ in 0..n_cams {
        let width = r.u64()? as usize;
        let height = r.u64()? as usize;
        let mut intr = [0.0; 6];
        for v in &mut intr {
            *v = r.f64()?;
        }
        let [fx, fy, cx, cy, near, far] = intr;
        let mut rotation = Matrix3::zeros();
        for row in 0..3 {
            for c in 0..3 {
                rotation[(row, c)] = r.f64()?;
            }
        }
        let translation = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        cameras.push(Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            near,
            far,
        });
    }
    let n_images = r.u32()? as usize;
    if n_images != 0 && n_images != n_cams {
        return Err(Error::InvalidData(format!(
            "{n_images} images for {n_cams} cameras"
        )));
    }
    let mut train_images = Vec::with_capacity(n_images);
    for cam in cameras.iter().take(n_images) {
        let data = r.f32s(cam.width * cam.height * 3)?;
        train_images.push(Image {
            width: cam.width,
            height: cam.height,
            data,
        });
    }
    r.finish()?;
    Ok(Scene {
        gaussians,
        idsf: SemanticField::from_parts(d, features, labels)?,
        cameras,
        train_images,
    })
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_scene(scene))?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    decode_scene(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I64(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

/// Dense row-major tensor as stored in a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::ShapeMismatch("rank above 255".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::F64(data))
    }

    pub fn f32(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::F32(data))
    }

    pub fn i64(dims: &[usize], data: Vec<i64>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::I64(data))
    }

    pub fn u8(dims: &[usize], data: Vec<u8>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::U8(data))
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    /// Any floating payload widened to f64.
    pub fn as_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(Error::InvalidData("expected a floating-point tensor".into())),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            _ => Err(Error::InvalidData("expected an i64 tensor".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic = r
            .take(4)
            .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
        if magic != TENSOR_MAGIC {
            return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: TENSOR_VERSION,
            });
        }
        let code = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::MalformedHeader("dims overflow".into()))?;
        let size = match code {
            0 => 4,
            1 | 2 => 8,
            3 => 1,
            c => return Err(Error::MalformedHeader(format!("unknown dtype code {c}"))),
        };
        r.require(count, size)?;
        let n = count as usize;
        let bytes = r.take(n * size as usize)?;
        let data = match code {
            0 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U8(bytes.to_vec()),
        };
        r.finish()?;
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255) from interleaved RGB values in [0, 1].
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch("PPM buffer size".into()));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(&rgb.iter().map(|&v| quantize(v)).collect::<Vec<_>>())?;
    Ok(())
}

/// Binary PGM (P5, maxval 255) from gray values in [0, 1].
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, gray: &[f64]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::ShapeMismatch("PGM buffer size".into()));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&gray.iter().map(|&v| quantize(v)).collect::<Vec<_>>())?;
    Ok(())
}

/// Reads a binary P5/P6 file into (width, height, channels, values in [0, 1]).
pub fn read_pnm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("short PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::MalformedHeader(format!("unsupported PNM magic {m}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::MalformedHeader(format!("bad PNM field {s}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::MalformedHeader("only maxval 255 is supported".into()));
    }
    let n = w * h * channels;
    if buf.len() < pos + n {
        return Err(Error::TruncatedPayload {
            expected: (pos + n) as u64,
            found: buf.len() as u64,
        });
    }
    Ok((w, h, channels, buf[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_scene(n: usize, d: usize) -> Scene {
        let gaussians = (0..n)
            .map(|i| {
                let f = i as f64;
                Gaussian::new(
                    [f * 0.1, -f * 0.2, 3.0 + f * 0.01],
                    [1.0, 0.1 * f, 0.0, -0.2],
                    [0.1 + 0.001 * f, 0.2, 0.05],
                    0.3 + 0.005 * f,
                    [0.1, 0.5, (f * 0.01).min(1.0)],
                )
            })
            .collect();
        let mut scene = Scene::new(gaussians, d);
        for i in 0..n {
            for (k, v) in scene.idsf.feature_mut(i).iter_mut().enumerate() {
                *v = (i * 31 + k) as f32 * 0.001;
            }
            scene.idsf.labels_mut()[i] = if i % 7 == 0 { UNASSIGNED } else { (i % 5) as u32 };
        }
        let cam = Camera::look_at([0.0, -3.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0], 32, 24, 0.8);
        scene.cameras = vec![cam.clone(), cam];
        scene.train_images = (0..2)
            .map(|k| Image {
                width: 32,
                height: 24,
                data: (0..32 * 24 * 3).map(|j| ((j + k) % 255) as f32 / 255.0).collect(),
            })
            .collect();
        scene
    }

    #[test]
    fn scene_round_trip_is_identity() {
        let scene = sample_scene(100, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.idsf");
        save_scene(&scene, &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(scene, back);
        assert_eq!(encode_scene(&back), encode_scene(&scene));
    }

    #[test]
    fn corrupted_magic_is_malformed_header() {
        let mut bytes = encode_scene(&sample_scene(3, 4));
        bytes[0] = b'X';
        assert!(matches!(decode_scene(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_scene(&sample_scene(3, 4));
        bytes[4] = 9;
        assert!(matches!(
            decode_scene(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn payload_sized_for_smaller_dim_is_truncated() {
        // Write a scene with D = 64, then patch the header to claim D = 128.
        let scene = sample_scene(10, 64);
        let mut bytes = encode_scene(&scene);
        bytes[12..16].copy_from_slice(&128u32.to_le_bytes());
        assert!(matches!(
            decode_scene(&bytes),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn tensor_rejects_bad_inputs() {
        assert!(Tensor::f64(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::i64(&[4], vec![1, 2, 3, 4]).unwrap();
        let mut bytes = t.encode();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Tensor::decode(&bytes), Err(Error::TruncatedPayload { .. })));
        let mut bytes = t.encode();
        bytes[8] = 42;
        assert!(matches!(Tensor::decode(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<f64> = (0..4 * 3 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        write_ppm(dir.path().join("a.ppm"), 4, 3, &rgb).unwrap();
        let (w, h, c, back) = read_pnm(dir.path().join("a.ppm")).unwrap();
        assert_eq!((w, h, c), (4, 3, 3));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        write_pgm(dir.path().join("m.pgm"), 2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let (_, _, c, g) = read_pnm(dir.path().join("m.pgm")).unwrap();
        assert_eq!(c, 1);
        assert_eq!(g, vec![0.0, 1.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn tensor_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let f: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin()).collect();
            let t = Tensor::f64(&dims, f).unwrap();
            prop_assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
            let u: Vec<u8> = (0..n).map(|i| (seed as usize + i) as u8).collect();
            let t = Tensor::u8(&dims, u).unwrap();
            prop_assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
        }
    }
}
