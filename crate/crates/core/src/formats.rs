//! On-disk formats.
//!
//! Binary files are little-endian with a four-byte magic:
//!
//! * `BKP1` point cloud: `u64` count, then `count × 5` `f32` values.
//! * `BKT1` tensor: `u32` rank, `rank × u64` extents, then `f64` data.
//! * `BKM1` parameters: `u32` count, then per entry a `u32` name length,
//!   the UTF-8 name and a tensor body as in `BKT1` without its magic.
//!
//! Scenes and camera rigs are TOML; detections and evaluation tables are
//! CSV; BEV images are 16-bit binary PGM.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraParams;
use crate::metrics::{EvalResult, DISTANCE_THRESHOLDS};
use crate::nn::ParamSet;
use crate::numerics::Tensor;
use crate::predictor::Detection;
use crate::scene::{PointCloud, Scene};

const POINTS_MAGIC: &[u8; 4] = b"BKP1";
const TENSOR_MAGIC: &[u8; 4] = b"BKT1";
const PARAMS_MAGIC: &[u8; 4] = b"BKM1";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Byte cursor that reports truncation as a parse error.
struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::parse(self.path, "unexpected end of file"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::parse(
                self.path,
                format!("bad magic {:?}, expected {}", String::from_utf8_lossy(got), String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if !self.bytes.is_empty() {
            return Err(Error::parse(self.path, format!("{} trailing bytes", self.bytes.len())));
        }
        Ok(())
    }
}

pub fn encode_points(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + pc.len() * 20);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&(pc.len() as u64).to_le_bytes());
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let mut r = Reader { bytes, path };
    r.magic(POINTS_MAGIC)?;
    let n = r.u64()? as usize;
    if n.checked_mul(20) != Some(r.bytes.len()) {
        return Err(Error::parse(path, format!("header says {n} points, body has {} bytes", r.bytes.len())));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0; 5];
        for v in &mut p {
            *v = f64::from(r.f32()?);
        }
        points.push(p);
    }
    r.finish()?;
    Ok(PointCloud { points })
}

pub fn write_points(path: &Path, pc: &PointCloud) -> Result<()> {
    write_file(path, &encode_points(pc))
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    decode_points(&read_file(path)?, path)
}

fn push_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor_body(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::parse(r.path, format!("tensor rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::parse(r.path, "tensor too large"))?;
    if len.checked_mul(8).is_none_or(|b| b > r.bytes.len()) {
        return Err(Error::parse(r.path, format!("tensor {shape:?} exceeds the file")));
    }
    let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| Error::parse(r.path, e.to_string()))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    push_tensor_body(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { bytes, path };
    r.magic(TENSOR_MAGIC)?;
    let t = read_tensor_body(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?, path)
}

pub fn encode_params(ps: &ParamSet) -> Vec<u8> {
    let mut out = PARAMS_MAGIC.to_vec();
    out.extend_from_slice(&(ps.len() as u32).to_le_bytes());
    for (name, t) in ps.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        push_tensor_body(&mut out, t);
    }
    out
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamSet> {
    let mut r = Reader { bytes, path };
    r.magic(PARAMS_MAGIC)?;
    let n = r.u32()?;
    let mut ps = ParamSet::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::parse(path, "parameter name is not UTF-8"))?;
        let t = read_tensor_body(&mut r)?;
        ps.insert(name, t);
    }
    r.finish()?;
    Ok(ps)
}

pub fn write_params(path: &Path, ps: &ParamSet) -> Result<()> {
    write_file(path, &encode_params(ps))
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    decode_params(&read_file(path)?, path)
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn toml_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    toml::to_string(value).map(String::into_bytes).map_err(|e| Error::parse("<toml>", e.to_string()))
}

pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    toml_bytes(scene)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_file(path, &encode_scene(scene)?)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    read_toml(path)
}

/// Camera rig file: one `[[camera]]` table per camera.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Rig {
    camera: Vec<CameraParams>,
}

pub fn encode_rig(cams: &[CameraParams]) -> Result<Vec<u8>> {
    toml_bytes(&Rig { camera: cams.to_vec() })
}

pub fn write_rig(path: &Path, cams: &[CameraParams]) -> Result<()> {
    write_file(path, &encode_rig(cams)?)
}

pub fn read_rig(path: &Path) -> Result<Vec<CameraParams>> {
    let rig: Rig = read_toml(path)?;
    for cam in &rig.camera {
        cam.validate().map_err(|e| Error::parse(path, e.to_string()))?;
    }
    Ok(rig.camera)
}

/// One CSV row of a detection file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct DetectionRow {
    class_id: usize,
    score: f64,
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
    vx: f64,
    vy: f64,
}

/// Column order of detection files.
pub const DETECTION_COLUMNS: [&str; 11] = ["class_id", "score", "x", "y", "z", "l", "w", "h", "yaw", "vx", "vy"];

pub fn encode_detections(dets: &[Detection]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(DETECTION_COLUMNS).map_err(csv_err)?;
    for d in dets {
        w.serialize(DetectionRow {
            class_id: d.class_id,
            score: d.score,
            x: d.center[0],
            y: d.center[1],
            z: d.center[2],
            l: d.size[0],
            w: d.size[1],
            h: d.size[2],
            yaw: d.yaw,
            vx: d.velocity[0],
            vy: d.velocity[1],
        })
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::parse("<detections>", e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse("<csv>", e.to_string())
}

pub fn decode_detections(bytes: &[u8], path: &Path) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    if headers.iter().ne(DETECTION_COLUMNS) {
        return Err(Error::parse(path, format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    r.deserialize::<DetectionRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| Error::parse(path, format!("row {}: {e}", i + 2)))?;
            Ok(Detection {
                class_id: row.class_id,
                score: row.score,
                center: [row.x, row.y, row.z],
                size: [row.l, row.w, row.h],
                yaw: row.yaw,
                velocity: [row.vx, row.vy],
            })
        })
        .collect()
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_file(path, &encode_detections(dets)?)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    decode_detections(&read_file(path)?, path)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

/// Per-class rows plus a closing `all` row with the means.
pub fn encode_eval_csv(r: &EvalResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["class".to_string()];
    header.extend(DISTANCE_THRESHOLDS.iter().map(|t| format!("ap@{t}")));
    header.extend(["mAP", "mATE", "mASE", "mAOE", "mAVE", "NDS"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for c in &r.per_class {
        let defined: Vec<f64> = c.ap.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let mut row = vec![c.class_id.to_string()];
        row.extend(c.ap.iter().map(|a| fmt_opt(*a)));
        row.push(fmt_opt(mean));
        row.extend(c.errors.as_array().iter().map(|e| format!("{e:.6}")));
        row.push(String::new());
        w.write_record(&row).map_err(csv_err)?;
    }
    let mut row = vec!["all".to_string()];
    for i in 0..DISTANCE_THRESHOLDS.len() {
        let v: Vec<f64> = r.per_class.iter().filter_map(|c| c.ap[i]).collect();
        row.push(fmt_opt((!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)));
    }
    row.extend([r.map, r.mate, r.mase, r.maoe, r.mave, r.nds].iter().map(|v| format!("{v:.6}")));
    w.write_record(&row).map_err(csv_err)?;
    w.into_inner().map_err(|e| Error::parse("<eval>", e.to_string()))
}

pub fn encode_eval_json(r: &EvalResult) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(r).expect("eval serializes");
    out.push(b'\n');
    out
}

/// 16-bit binary PGM, big-endian samples, row-major `[height, width]`.
pub fn encode_pgm(width: usize, height: usize, samples: &[u16]) -> Result<Vec<u8>> {
    if samples.len() != width * height || width == 0 || height == 0 {
        return Err(Error::dim(format!("PGM {width}×{height} with {} samples", samples.len())));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    Ok(out)
}

/// Parses a 16-bit binary PGM into `(width, height, samples)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::parse(path, format!("not a 16-bit binary PGM: {fields:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, format!("bad PGM extent `{s}`")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * w * h {
        return Err(Error::parse(path, format!("PGM body has {} bytes for {w}×{h}", body.len())));
    }
    Ok((w, h, body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

/// Per-cell L2 norm of a `[n², C]` BEV map scaled to the full 16-bit
/// range. Image rows run from +x (top) to −x and columns from +y (left) to
/// −y, so the image is a top-down view with forward pointing up.
pub fn bev_to_pgm(bev: &Tensor, n: usize) -> Result<Vec<u8>> {
    if bev.rank() != 2 || bev.rows() != n * n {
        return Err(Error::dim(format!("BEV {:?} is not [{}, C]", bev.shape(), n * n)));
    }
    let norms: Vec<f64> = (0..n * n).map(|r| bev.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let mut samples = vec![0u16; n * n];
    for gx in 0..n {
        for gy in 0..n {
            let v = norms[gx * n + gy];
            let s = if max > 0.0 { (v / max * 65535.0).round() as u16 } else { 0 };
            samples[(n - 1 - gx) * n + (n - 1 - gy)] = s;
        }
    }
    encode_pgm(n, n, &samples)
}

/// Reads a whole file or standard input for `-`.
pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        return Ok(buf);
    }
    read_file(path)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
