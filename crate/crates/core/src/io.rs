//! Binary containers for models, heads and scenes, and result export.
//!
//! Every container is
//!
//! ```text
//! magic    16 bytes  ASCII, NUL padded ("MVFUSE-MODEL-v1", "MVFUSE-HEAD-v1", "MVFUSE-SCENE-v1")
//! length    u64 LE   payload byte count
//! payload  length bytes
//! crc32     u32 LE   CRC-32 (IEEE) of magic, length and payload
//! ```
//!
//! Numbers inside payloads are little-endian; floats are IEEE-754 binary64
//! bit patterns, so round trips are bit-exact. The byte layout of each
//! payload is documented in `docs/formats.md`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseParams, ShapeParams};
use crate::camera::{CameraModel, Extrinsics, Intrinsics, Projection};
use crate::error::{Error, Result};
use crate::fusion::{OrientMode, VirtualView};
use crate::losses::Detection2D;
use crate::optimizer::TtaResult;
use crate::prior::{PriorHead, Token};
use crate::rotation::RotMat;
use crate::synth::{GroundTruth, Scene};

pub const MODEL_MAGIC: &str = "MVFUSE-MODEL-v1";
pub const HEAD_MAGIC: &str = "MVFUSE-HEAD-v1";
pub const SCENE_MAGIC: &str = "MVFUSE-SCENE-v1";

const MAGIC_LEN: usize = 16;
const HEADER_LEN: usize = MAGIC_LEN + 8;
const FOOTER_LEN: usize = 4;
const FAMILY: &str = "MVFUSE-";

/// Wraps a payload in the container.
pub fn seal(magic: &str, payload: &[u8]) -> Vec<u8> {
    debug_assert!(magic.len() < MAGIC_LEN);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + FOOTER_LEN);
    let mut m = [0u8; MAGIC_LEN];
    m[..magic.len()].copy_from_slice(magic.as_bytes());
    out.extend_from_slice(&m);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks framing, checksum and magic, in that order, and returns the payload.
pub fn unseal<'a>(magic: &str, bytes: &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < HEADER_LEN + FOOTER_LEN {
        return Err(Error::Truncated(format!("{} bytes is shorter than the container header", bytes.len())));
    }
    let found_magic = &bytes[..MAGIC_LEN];
    if !found_magic.starts_with(FAMILY.as_bytes()) {
        return Err(Error::MalformedHeader("missing MVFUSE magic".into()));
    }
    let len = u64::from_le_bytes(bytes[MAGIC_LEN..HEADER_LEN].try_into().expect("8 bytes"));
    let expected = (HEADER_LEN as u64).checked_add(len).and_then(|n| n.checked_add(FOOTER_LEN as u64));
    match expected {
        Some(n) if n == bytes.len() as u64 => {}
        Some(n) if n > bytes.len() as u64 => {
            return Err(Error::Truncated(format!("header announces {n} bytes, file has {}", bytes.len())));
        }
        _ => {
            return Err(Error::MalformedHeader(format!("payload length {len} disagrees with file size {}", bytes.len())));
        }
    }
    let body_end = bytes.len() - FOOTER_LEN;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let name_end = found_magic.iter().position(|&b| b == 0).unwrap_or(MAGIC_LEN);
    if found_magic[name_end..].iter().any(|&b| b != 0) {
        return Err(Error::MalformedHeader("magic is not NUL padded".into()));
    }
    let found = String::from_utf8_lossy(&found_magic[..name_end]).into_owned();
    if found != magic {
        return Err(Error::VersionMismatch { expected: magic.to_string(), found });
    }
    Ok(&bytes[HEADER_LEN..body_end])
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn i32(&mut self, x: i32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: usize) {
        self.0.extend_from_slice(&(x as u64).to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }
    fn vec3s(&mut self, vs: &[Vector3<f64>]) {
        for v in vs {
            self.f64s(v.as_slice());
        }
    }
    /// Row-major 3×3.
    fn mat3(&mut self, m: &Matrix3<f64>) {
        for r in 0..3 {
            for c in 0..3 {
                self.f64(m[(r, c)]);
            }
        }
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("payload ends before byte {}", self.pos.saturating_add(n)))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    /// A count, bounded by what the remaining bytes could possibly hold.
    fn count(&mut self, bytes_per_item: usize) -> Result<usize> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(bytes_per_item.max(1) as u64) > remaining {
            return Err(Error::MalformedHeader(format!("count {n} exceeds the remaining payload")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn vec3s(&mut self, n: usize) -> Result<Vec<Vector3<f64>>> {
        (0..n).map(|_| self.vec3()).collect()
    }
    fn mat3(&mut self) -> Result<Matrix3<f64>> {
        let v = self.f64s(9)?;
        Ok(Matrix3::from_row_slice(&v))
    }
    fn rot(&mut self) -> Result<RotMat> {
        RotMat::new(self.mat3()?)
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.count(1)?;
        self.take(n)
    }
    fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::MalformedHeader(format!("{} trailing payload bytes", self.buf.len() - self.pos)))
        }
    }
}

fn model_payload(m: &BodyModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(m.n_vertices());
    w.u64(m.n_joints());
    w.u64(m.n_betas());
    w.u64(m.n_keypoints());
    w.u64(m.n_landmarks());
    w.vec3s(m.template());
    w.f64s(m.shape_dirs());
    for &p in m.parents() {
        w.i32(p);
    }
    w.f64s(m.joint_regressor());
    w.f64s(m.skin_weights());
    w.f64s(m.kp_regressor());
    for &i in m.landmark_indices() {
        w.u32(i);
    }
    w.0
}

fn read_model(payload: &[u8]) -> Result<BodyModel> {
    let mut r = Reader::new(payload);
    let nv = r.count(24)?;
    let nj = r.count(4)?;
    let nb = r.count(0)?;
    let nk = r.count(0)?;
    let nl = r.count(4)?;
    let size = |a: usize, b: usize| {
        a.checked_mul(b).ok_or_else(|| Error::MalformedHeader("model dimensions overflow".into()))
    };
    let template = r.vec3s(nv)?;
    let shape_dirs = r.f64s(size(nv * 3, nb)?)?;
    let parents = (0..nj).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
    let joint_regressor = r.f64s(size(nj, nv)?)?;
    let skin_weights = r.f64s(size(nv, nj)?)?;
    let kp_regressor = r.f64s(size(nk, nv)?)?;
    let landmarks = (0..nl).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    BodyModel::new(template, shape_dirs, nb, parents, joint_regressor, skin_weights, kp_regressor, landmarks)
}

fn head_payload(h: &PriorHead) -> Vec<u8> {
    let mut w = Writer::default();
    let weight = h.weight();
    w.u64(weight.ncols());
    w.u64(weight.nrows());
    for r in 0..weight.nrows() {
        for c in 0..weight.ncols() {
            w.f64(weight[(r, c)]);
        }
    }
    w.f64s(h.bias().as_slice());
    w.0
}

fn read_head(payload: &[u8]) -> Result<PriorHead> {
    let mut r = Reader::new(payload);
    let d = r.count(0)?;
    let p = r.count(8)?;
    let n = d.checked_mul(p).ok_or_else(|| Error::MalformedHeader("head dimensions overflow".into()))?;
    let w = r.f64s(n)?;
    let b = r.f64s(p)?;
    r.finish()?;
    PriorHead::new(DMatrix::from_row_slice(p, d, &w), DVector::from_vec(b))
}

fn write_camera(w: &mut Writer, c: &CameraModel) {
    match c.projection {
        Projection::Perspective => w.u8(0),
        Projection::WeakPerspective { scale, tx, ty } => {
            w.u8(1);
            w.f64s(&[scale, tx, ty]);
        }
    }
    let k = &c.intrinsics;
    w.f64s(&[k.fx, k.fy, k.cx, k.cy, k.width, k.height]);
    match &c.extrinsics {
        None => w.u8(0),
        Some(e) => {
            w.u8(1);
            w.mat3(e.rotation.matrix());
            w.f64s(e.translation.as_slice());
        }
    }
    w.f64s(c.body_offset.as_slice());
}

fn read_camera(r: &mut Reader) -> Result<CameraModel> {
    let projection = match r.u8()? {
        0 => Projection::Perspective,
        1 => Projection::WeakPerspective {
            scale: r.f64()?,
            tx: r.f64()?,
            ty: r.f64()?,
        },
        t => return Err(Error::MalformedHeader(format!("unknown projection tag {t}"))),
    };
    let k = r.f64s(6)?;
    let intrinsics = Intrinsics {
        fx: k[0],
        fy: k[1],
        cx: k[2],
        cy: k[3],
        width: k[4],
        height: k[5],
    };
    let extrinsics = match r.u8()? {
        0 => None,
        1 => Some(Extrinsics {
            rotation: r.rot()?,
            translation: r.vec3()?,
        }),
        t => return Err(Error::MalformedHeader(format!("unknown extrinsics tag {t}"))),
    };
    let cam = CameraModel {
        projection,
        intrinsics,
        extrinsics,
        body_offset: r.vec3()?,
    };
    cam.validate()?;
    Ok(cam)
}

fn write_rows(w: &mut Writer, rows: &[[f64; 3]]) {
    w.u64(rows.len());
    for row in rows {
        w.f64s(row);
    }
}

fn read_rows(r: &mut Reader) -> Result<Vec<[f64; 3]>> {
    let n = r.count(24)?;
    (0..n).map(|_| Ok([r.f64()?, r.f64()?, r.f64()?])).collect()
}

fn scene_payload(s: &Scene) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(s.calibrated as u8);
    w.blob(&model_payload(&s.model));
    w.blob(&head_payload(&s.head));
    w.u64(s.cameras.len());
    for ((cam, det), tok) in s.cameras.iter().zip(&s.detections).zip(&s.tokens) {
        write_camera(&mut w, cam);
        write_rows(&mut w, &det.keypoints);
        write_rows(&mut w, &det.landmarks);
        w.u64(tok.0.len());
        w.f64s(&tok.0);
    }
    match &s.gt {
        None => w.u8(0),
        Some(gt) => {
            w.u8(1);
            w.u64(gt.pose.n_joints());
            w.mat3(gt.pose.root.matrix());
            for r in &gt.pose.body {
                w.mat3(r.matrix());
            }
            w.u64(gt.shape.beta.len());
            w.f64s(&gt.shape.beta);
            w.u64(gt.joints3d.len());
            w.vec3s(&gt.joints3d);
            w.u64(gt.vertices.len());
            w.vec3s(&gt.vertices);
            for r in &gt.view_roots {
                w.mat3(r.matrix());
            }
        }
    }
    w.0
}

fn read_scene(payload: &[u8]) -> Result<Scene> {
    let mut r = Reader::new(payload);
    let calibrated = match r.u8()? {
        0 => false,
        1 => true,
        t => return Err(Error::MalformedHeader(format!("bad calibration flag {t}"))),
    };
    let model = read_model(r.blob()?)?;
    let head = read_head(r.blob()?)?;
    let n = r.count(1)?;
    let mut cameras = Vec::with_capacity(n);
    let mut detections = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        cameras.push(read_camera(&mut r)?);
        let keypoints = read_rows(&mut r)?;
        let landmarks = read_rows(&mut r)?;
        detections.push(Detection2D { keypoints, landmarks });
        let d = r.count(8)?;
        tokens.push(Token(r.f64s(d)?));
    }
    let gt = match r.u8()? {
        0 => None,
        1 => {
            let nj = r.count(72)?;
            if nj == 0 {
                return Err(Error::MalformedHeader("ground truth without joints".into()));
            }
            let root = r.rot()?;
            let body = (1..nj).map(|_| r.rot()).collect::<Result<Vec<_>>>()?;
            let nb = r.count(8)?;
            let beta = r.f64s(nb)?;
            let nj3 = r.count(24)?;
            let joints3d = r.vec3s(nj3)?;
            let nv = r.count(24)?;
            let vertices = r.vec3s(nv)?;
            let view_roots = (0..n).map(|_| r.rot()).collect::<Result<Vec<_>>>()?;
            Some(GroundTruth {
                pose: PoseParams { root, body },
                shape: ShapeParams { beta },
                joints3d,
                vertices,
                view_roots,
            })
        }
        t => return Err(Error::MalformedHeader(format!("bad ground-truth flag {t}"))),
    };
    r.finish()?;
    let scene = Scene {
        model,
        head,
        cameras,
        detections,
        tokens,
        calibrated,
        gt,
    };
    scene.validate()?;
    Ok(scene)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn encode_model(m: &BodyModel) -> Vec<u8> {
    seal(MODEL_MAGIC, &model_payload(m))
}

pub fn decode_model(bytes: &[u8]) -> Result<BodyModel> {
    read_model(unseal(MODEL_MAGIC, bytes)?)
}

pub fn encode_head(h: &PriorHead) -> Vec<u8> {
    seal(HEAD_MAGIC, &head_payload(h))
}

pub fn decode_head(bytes: &[u8]) -> Result<PriorHead> {
    read_head(unseal(HEAD_MAGIC, bytes)?)
}

pub fn encode_scene(s: &Scene) -> Vec<u8> {
    seal(SCENE_MAGIC, &scene_payload(s))
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    read_scene(unseal(SCENE_MAGIC, bytes)?)
}

pub fn save_model(m: &BodyModel, path: &Path) -> Result<()> {
    write_file(path, &encode_model(m))
}

pub fn load_model(path: &Path) -> Result<BodyModel> {
    decode_model(&read_file(path)?)
}

pub fn save_head(h: &PriorHead, path: &Path) -> Result<()> {
    write_file(path, &encode_head(h))
}

pub fn load_head(path: &Path) -> Result<PriorHead> {
    decode_head(&read_file(path)?)
}

pub fn save_scene(s: &Scene, path: &Path) -> Result<()> {
    write_file(path, &encode_scene(s))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    decode_scene(&read_file(path)?)
}

/// A body as plain data: row-major rotation matrices (root first) and β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyRecord {
    pub orient_mode: OrientMode,
    pub rotations: Vec<[f64; 9]>,
    pub beta: Vec<f64>,
}

impl BodyRecord {
    pub fn new(pose: &PoseParams, shape: &ShapeParams, orient_mode: OrientMode) -> Self {
        let row_major = |r: &RotMat| {
            let m = r.matrix();
            [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
        };
        BodyRecord {
            orient_mode,
            rotations: std::iter::once(&pose.root).chain(&pose.body).map(row_major).collect(),
            beta: shape.beta.clone(),
        }
    }

    pub fn of_virtual(v: &VirtualView) -> Self {
        Self::new(&v.pose, &v.shape, v.orient_mode)
    }

    pub fn to_params(&self) -> Result<(PoseParams, ShapeParams)> {
        let mut rots = self
            .rotations
            .iter()
            .map(|m| RotMat::new(Matrix3::from_row_slice(m)))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let root = rots.next().ok_or_else(|| Error::invalid("body record has no rotations"))?;
        Ok((
            PoseParams { root, body: rots.collect() },
            ShapeParams { beta: self.beta.clone() },
        ))
    }
}

pub fn save_body(record: &BodyRecord, path: &Path) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(record)?.as_bytes())
}

pub fn load_body(path: &Path) -> Result<BodyRecord> {
    let bytes = read_file(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    /// One JSON object per trace step.
    Records,
    /// The final metric report as one JSON object.
    Summary,
}

/// Writes the trace (one line per step) or the final metric report.
pub fn write_result(result: &TtaResult, format: ExportFormat, out: &mut impl Write) -> Result<()> {
    match format {
        ExportFormat::Records => {
            for rec in &result.trace {
                serde_json::to_writer(&mut *out, rec)?;
                out.write_all(b"\n")?;
            }
        }
        ExportFormat::Summary => {
            let report = result.final_metrics().ok_or(Error::MissingGroundTruth)?;
            serde_json::to_writer(&mut *out, &report)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn export_result(result: &TtaResult, path: &Path, format: ExportFormat) -> Result<()> {
    let mut buf = Vec::new();
    write_result(result, format, &mut buf)?;
    write_file(path, &buf)
}
