//! Versioned file formats. Every loader rejects malformed input with the
//! offending line (text formats) or byte offset (binary payloads); every
//! saver is deterministic, so save -> load -> save reproduces the bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image, Mask, RgbImage};
use crate::manipulate::ScriptedMotion;
use crate::motion::{rigid_rotation, rigid_se3, BasisDelta, FrameTrace, MotionField, MotionMode, Observations, ViewFrame};
use crate::scene::{Camera, Pose, Scene, SplatPrimitive};
use crate::semantics::{DetectionInput, FeatureSet, ObjectMask, SemanticTable, ViewDetections};
use crate::synth::{SynthOutput, SynthSpec};

pub const SCENE_MAGIC: &str = "MSGF1";
pub const SCENE_FIELDS: &str = "mu_x mu_y mu_z q_w q_x q_y q_z s_u s_v opacity c_r c_g c_b label dynamic";
/// Major version of the JSON formats.
pub const JSON_VERSION: u32 = 1;

/// Feature vectors further than this from unit norm are renormalised.
const RENORM_TOL: f64 = 1e-12;
/// Renormalisation beyond this deviation is logged.
const RENORM_WARN: f64 = 1e-3;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|e| {
        let line = 1 + e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        Error::parse(path, line, "file is not valid UTF-8")
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.8e}")
}

// ---------------------------------------------------------------- scene

pub fn scene_to_string(scene: &Scene) -> String {
    let mut out = format!("{SCENE_MAGIC}\ncount {}\nfields {SCENE_FIELDS}\n", scene.len());
    for (p, d) in scene.primitives.iter().zip(&scene.dynamic) {
        let mut row: Vec<String> = p.mu.iter().map(|v| fmt_f(*v)).collect();
        row.extend(p.q.iter().map(|v| fmt_f(*v)));
        row.extend(p.s.iter().map(|v| fmt_f(*v)));
        row.push(fmt_f(p.o));
        row.extend(p.c.iter().map(|v| fmt_f(*v)));
        row.push(p.label.to_string());
        row.push(u8::from(*d).to_string());
        out += &row.join(" ");
        out.push('\n');
    }
    out
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write(path, scene_to_string(scene).as_bytes())
}

pub fn parse_scene(text: &str, path: &Path) -> Result<Scene> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(path, 0, format!("missing {what}")));
    let (_, magic) = next("magic")?;
    if magic != SCENE_MAGIC {
        if magic.starts_with("MSGF") {
            return Err(Error::VersionMismatch {
                path: path.into(),
                expected: SCENE_MAGIC.into(),
                found: magic.into(),
            });
        }
        return Err(Error::parse(path, 1, format!("bad magic {magic:?}")));
    }
    let (ln, count_line) = next("count line")?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| Error::parse(path, ln, format!("expected `count <n>`, found {count_line:?}")))?;
    let (ln, fields) = next("field list")?;
    if fields != format!("fields {SCENE_FIELDS}") {
        return Err(Error::parse(path, ln, format!("unsupported field list {fields:?}")));
    }
    let mut scene = Scene::default();
    for k in 0..count {
        let (ln, row) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 4 + k, format!("truncated: expected {count} rows, found {k}")))?;
        let tok: Vec<&str> = row.split_ascii_whitespace().collect();
        if tok.len() != 15 {
            return Err(Error::parse(path, ln, format!("expected 15 fields, found {}", tok.len())));
        }
        let f = |i: usize| -> Result<f64> {
            tok[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, ln, format!("field {} is not a finite number: {:?}", i + 1, tok[i])))
        };
        let label: u32 = tok[13]
            .parse()
            .map_err(|_| Error::parse(path, ln, format!("bad label {:?}", tok[13])))?;
        let dynamic = match tok[14] {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(path, ln, format!("dynamic flag must be 0 or 1, found {other:?}"))),
        };
        let prim = SplatPrimitive::new_exact(
            Vector3::new(f(0)?, f(1)?, f(2)?),
            [f(3)?, f(4)?, f(5)?, f(6)?],
            [f(7)?, f(8)?],
            f(9)?,
            [f(10)?, f(11)?, f(12)?],
            label,
        )
        .map_err(|e| Error::parse(path, ln, e.to_string()))?;
        scene.push(prim, dynamic);
    }
    if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::parse(path, ln, format!("unexpected content after {count} rows: {extra:?}")));
    }
    Ok(scene)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    parse_scene(&read_text(path)?, path)
}

// ---------------------------------------------------------------- json helpers

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::parse(path, e.line(), format!("column {}: {e}", e.column()))
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<serde_json::Value>,
}

fn check_version(path: &Path, text: &str) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| json_error(path, e))?;
    match probe.version {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(JSON_VERSION as u64) => Ok(()),
        Some(v) => Err(Error::VersionMismatch {
            path: path.into(),
            expected: JSON_VERSION.to_string(),
            found: v.to_string(),
        }),
        None => Err(Error::parse(path, 1, "missing \"version\" field")),
    }
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    check_version(path, &text)?;
    serde_json::from_str(&text).map_err(|e| json_error(path, e))
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    write(path, s.as_bytes())
}

// ---------------------------------------------------------------- cameras

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseJson {
    q: [f64; 4],
    t: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    id: String,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    pose: PoseJson,
    near: f64,
    far: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    version: u32,
    cameras: Vec<CameraJson>,
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let file = CameraFile {
        version: JSON_VERSION,
        cameras: cameras
            .iter()
            .map(|c| CameraJson {
                id: c.id.clone(),
                width: c.width,
                height: c.height,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                pose: PoseJson {
                    q: c.pose.q,
                    t: c.pose.t.into(),
                },
                near: c.near,
                far: c.far,
            })
            .collect(),
    };
    save_json(&file, path)
}

/// Loads a camera set. Poses map world points into the camera frame.
pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let file: CameraFile = load_json(path)?;
    let mut ids = Vec::new();
    file.cameras
        .into_iter()
        .map(|c| {
            if ids.contains(&c.id) {
                return Err(Error::InvalidCamera {
                    id: c.id,
                    msg: "duplicate camera id".into(),
                });
            }
            ids.push(c.id.clone());
            let pose = Pose {
                q: c.pose.q,
                t: c.pose.t.into(),
            };
            Camera::new(c.id, c.width, c.height, c.fx, c.fy, c.cx, c.cy, pose, c.near, c.far)
        })
        .collect()
}

// ---------------------------------------------------------------- netpbm

struct Netpbm<'a> {
    width: usize,
    height: usize,
    maxval: usize,
    payload: &'a [u8],
    offset: usize,
}

fn parse_netpbm<'a>(bytes: &'a [u8], path: &Path, magic: &[u8; 2]) -> Result<Netpbm<'a>> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::parse(
            path,
            1,
            format!("byte 0: expected magic {}, found {found:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut line = 1;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => {
                    if *b == b'\n' {
                        line += 1;
                    }
                    pos += 1;
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][k];
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, line, format!("byte {start}: expected {name}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(path, line, format!("byte {pos}: expected whitespace after header")));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, line, format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(
            path,
            line,
            format!("maxval {maxval} unsupported: only 8-bit images (maxval 1..=255) are accepted"),
        ));
    }
    Ok(Netpbm {
        width,
        height,
        maxval,
        payload: &bytes[pos..],
        offset: pos,
    })
}

fn check_payload(img: &Netpbm, channels: usize, path: &Path) -> Result<()> {
    let need = img.width * img.height * channels;
    if img.payload.len() != need {
        return Err(Error::parse(
            path,
            0,
            format!(
                "byte {}: payload has {} bytes, expected {need}",
                img.offset + img.payload.len().min(need),
                img.payload.len()
            ),
        ));
    }
    Ok(())
}

/// 8-bit P5 mask; foreground is a value at or above half range.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = read(path)?;
    let img = parse_netpbm(&bytes, path, b"P5")?;
    check_payload(&img, 1, path)?;
    let data = img.payload.iter().map(|&v| 2 * v as usize > img.maxval).collect();
    Image::from_vec(img.width, img.height, data)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let bytes = read(path)?;
    let img = parse_netpbm(&bytes, path, b"P5")?;
    check_payload(&img, 1, path)?;
    let data = img.payload.iter().map(|&v| v as f64 / img.maxval as f64).collect();
    Image::from_vec(img.width, img.height, data)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = read(path)?;
    let img = parse_netpbm(&bytes, path, b"P6")?;
    check_payload(&img, 3, path)?;
    let m = img.maxval as f64;
    let data = img
        .payload
        .chunks(3)
        .map(|p| [p[0] as f64 / m, p[1] as f64 / m, p[2] as f64 / m])
        .collect();
    Image::from_vec(img.width, img.height, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn netpbm_bytes(magic: &str, width: usize, height: usize, maxval: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let payload: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write(path, &netpbm_bytes("P5", mask.width, mask.height, 255, &payload))
}

/// Values in `[0, 1]` quantised to 8 bits.
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let payload: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write(path, &netpbm_bytes("P5", img.width, img.height, 255, &payload))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let payload: Vec<u8> = img.data.iter().flat_map(|p| p.map(quantize)).collect();
    write(path, &netpbm_bytes("P6", img.width, img.height, 255, &payload))
}

/// Integer label image: 8-bit when every label fits, 16-bit big-endian
/// otherwise (labels above 65535 are clamped).
pub fn save_labels(img: &Image<u32>, path: &Path) -> Result<()> {
    let max = img.data.iter().copied().max().unwrap_or(0);
    let bytes = if max <= 255 {
        let payload: Vec<u8> = img.data.iter().map(|&l| l as u8).collect();
        netpbm_bytes("P5", img.width, img.height, 255, &payload)
    } else {
        let payload: Vec<u8> = img.data.iter().flat_map(|&l| (l.min(65535) as u16).to_be_bytes()).collect();
        netpbm_bytes("P5", img.width, img.height, 65535, &payload)
    };
    write(path, &bytes)
}

// ---------------------------------------------------------------- features

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureFile {
    version: u32,
    dim: usize,
    canon: Vec<Vec<f64>>,
    objects: BTreeMap<u32, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextFeatureFile {
    version: u32,
    feature: Vec<f64>,
}

/// Checks the dimension and rescales to unit norm.
pub fn normalize_feature(v: &mut [f64], dim: usize, context: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: v.len(),
            context: context.into(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("{context}: non-finite feature entry")));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Domain(format!("{context}: zero feature vector")));
    }
    if (n - 1.0).abs() > RENORM_TOL {
        if (n - 1.0).abs() > RENORM_WARN {
            log::warn!("{context}: feature norm {n} renormalised to 1");
        }
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let mut f: FeatureFile = load_json(path)?;
    if f.dim == 0 {
        return Err(Error::Domain("feature dimension must be positive".into()));
    }
    for (i, v) in f.canon.iter_mut().enumerate() {
        normalize_feature(v, f.dim, &format!("canonical phrase {i}"))?;
    }
    for (label, v) in f.objects.iter_mut() {
        normalize_feature(v, f.dim, &format!("object {label}"))?;
    }
    Ok(FeatureSet {
        dim: f.dim,
        canon: f.canon,
        objects: f.objects,
    })
}

pub fn save_features(features: &FeatureSet, path: &Path) -> Result<()> {
    save_json(
        &FeatureFile {
            version: JSON_VERSION,
            dim: features.dim,
            canon: features.canon.clone(),
            objects: features.objects.clone(),
        },
        path,
    )
}

/// A semantic table is stored in the feature-file format.
pub fn save_table(table: &SemanticTable, path: &Path) -> Result<()> {
    save_features(
        &FeatureSet {
            dim: table.dim(),
            canon: table.canon().to_vec(),
            objects: table.entries().clone(),
        },
        path,
    )
}

pub fn load_table(path: &Path) -> Result<SemanticTable> {
    let f = load_features(path)?;
    SemanticTable::new(f.dim, f.objects, f.canon)
}

/// Unit-normalised text-query feature.
pub fn load_text_feature(path: &Path) -> Result<Vec<f64>> {
    let mut f: TextFeatureFile = load_json(path)?;
    let dim = f.feature.len();
    if dim == 0 {
        return Err(Error::parse(path, 1, "empty feature vector"));
    }
    normalize_feature(&mut f.feature, dim, "text feature")?;
    Ok(f.feature)
}

pub fn save_text_feature(feature: &[f64], path: &Path) -> Result<()> {
    save_json(
        &TextFeatureFile {
            version: JSON_VERSION,
            feature: feature.to_vec(),
        },
        path,
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    version: u32,
    motions: Vec<ScriptedMotion>,
}

/// Scripted object motions for the simulated world.
pub fn load_script(path: &Path) -> Result<Vec<ScriptedMotion>> {
    Ok(load_json::<ScriptFile>(path)?.motions)
}

pub fn save_script(motions: &[ScriptedMotion], path: &Path) -> Result<()> {
    save_json(
        &ScriptFile {
            version: JSON_VERSION,
            motions: motions.to_vec(),
        },
        path,
    )
}

// ---------------------------------------------------------------- detections

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionObjectJson {
    label: u32,
    /// Mask path relative to the manifest.
    mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionViewJson {
    camera: String,
    objects: Vec<DetectionObjectJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionFile {
    version: u32,
    views: Vec<DetectionViewJson>,
}

pub fn load_detections(path: &Path) -> Result<DetectionInput> {
    let file: DetectionFile = load_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::new();
    for v in file.views {
        let mut objects = Vec::new();
        for o in v.objects {
            let mut feature = o.feature;
            if let Some(f) = feature.as_mut() {
                let dim = f.len();
                normalize_feature(f, dim, &format!("detection feature for label {}", o.label))?;
            }
            objects.push(ObjectMask {
                label: o.label,
                mask: load_mask(&base.join(&o.mask))?,
                feature,
            });
        }
        views.push(ViewDetections {
            camera: v.camera,
            objects,
        });
    }
    Ok(DetectionInput { views })
}

/// Writes the manifest and one mask file per detection under
/// `masks/<camera>/<label>.pgm` next to it.
pub fn save_detections(det: &DetectionInput, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::new();
    for v in &det.views {
        let mut objects = Vec::new();
        for o in &v.objects {
            let rel = format!("masks/{}/{}.pgm", v.camera, o.label);
            save_mask(&o.mask, &base.join(&rel))?;
            objects.push(DetectionObjectJson {
                label: o.label,
                mask: rel,
                feature: o.feature.clone(),
            });
        }
        views.push(DetectionViewJson {
            camera: v.camera.clone(),
            objects,
        });
    }
    save_json(
        &DetectionFile {
            version: JSON_VERSION,
            views,
        },
        path,
    )
}

// ---------------------------------------------------------------- trajectory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisJson {
    dmu: [f64; 3],
    dq: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    version: u32,
    t: usize,
    mode: MotionMode,
    /// Final loss of the frame's optimisation; `null` for the reference
    /// frame.
    loss: Option<f64>,
    bases: Vec<BasisJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    se3: Option<[[f64; 4]; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation_q: Option<[f64; 4]>,
    coeff_digest: String,
    // reference-frame record only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dynamic: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pivot: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coeffs: Option<Vec<Vec<f64>>>,
}

/// A loaded trajectory: the motion field plus the per-timestep losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub field: MotionField,
    pub losses: Vec<Option<f64>>,
}

/// SHA-256 of the coefficient matrix as little-endian f64 bytes, row by
/// row.
pub fn coeff_digest(coeffs: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for row in coeffs {
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn matrix_rows(m: &nalgebra::Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

pub fn trajectory_to_string(field: &MotionField, frames: &[FrameTrace]) -> Result<String> {
    let digest = coeff_digest(&field.coeffs);
    let mut out = String::new();
    for (ti, &t) in field.timesteps.iter().enumerate() {
        let rigid = field.mode == MotionMode::Rigid;
        let rec = TrajectoryRecord {
            version: JSON_VERSION,
            t,
            mode: field.mode,
            loss: frames.iter().find(|f| f.t == t).map(|f| f.final_loss),
            bases: field.bases[ti]
                .iter()
                .map(|b| BasisJson {
                    dmu: b.dmu.into(),
                    dq: b.dq,
                })
                .collect(),
            se3: if rigid { Some(matrix_rows(&rigid_se3(field, t)?)) } else { None },
            rotation_q: if rigid { Some(rigid_rotation(field, t)?) } else { None },
            coeff_digest: digest.clone(),
            dynamic: (ti == 0).then(|| field.dynamic.clone()),
            pivot: (ti == 0).then(|| field.pivot.into()),
            coeffs: (ti == 0 && !rigid).then(|| field.coeffs.clone()),
        };
        out += &serde_json::to_string(&rec).expect("serialisable");
        out.push('\n');
    }
    Ok(out)
}

pub fn save_trajectory(field: &MotionField, frames: &[FrameTrace], path: &Path) -> Result<()> {
    write(path, trajectory_to_string(field, frames)?.as_bytes())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        check_version(path, line).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::parse(path, i + 1, msg),
            other => other,
        })?;
        let rec: TrajectoryRecord = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        records.push((i + 1, rec));
    }
    let (first_line, first) = records.first().ok_or_else(|| Error::parse(path, 1, "empty trajectory"))?;
    let mode = first.mode;
    let nb = first.bases.len();
    let dynamic = first
        .dynamic
        .clone()
        .ok_or_else(|| Error::parse(path, *first_line, "reference record lacks \"dynamic\""))?;
    let pivot = first
        .pivot
        .ok_or_else(|| Error::parse(path, *first_line, "reference record lacks \"pivot\""))?;
    let coeffs = match mode {
        MotionMode::Rigid => {
            let mut w = vec![0.0; nb];
            if nb > 0 {
                w[0] = 1.0;
            }
            vec![w; dynamic.len()]
        }
        MotionMode::Nonrigid => first
            .coeffs
            .clone()
            .ok_or_else(|| Error::parse(path, *first_line, "non-rigid reference record lacks \"coeffs\""))?,
    };
    if coeffs.len() != dynamic.len() || coeffs.iter().any(|c| c.len() != nb) {
        return Err(Error::parse(path, *first_line, "coefficient matrix does not match dynamic set and bases"));
    }
    let digest = coeff_digest(&coeffs);
    let mut field = MotionField {
        mode,
        timesteps: Vec::new(),
        bases: Vec::new(),
        dynamic,
        coeffs,
        pivot: pivot.into(),
    };
    let mut losses = Vec::new();
    for (ln, rec) in &records {
        if rec.mode != mode || rec.bases.len() != nb {
            return Err(Error::parse(path, *ln, "record disagrees with the reference record's mode or basis count"));
        }
        if rec.coeff_digest != digest {
            return Err(Error::parse(path, *ln, "coefficient digest mismatch"));
        }
        if field.timesteps.last().is_some_and(|&p| rec.t <= p) {
            return Err(Error::parse(path, *ln, "timesteps must increase"));
        }
        field.timesteps.push(rec.t);
        field.bases.push(
            rec.bases
                .iter()
                .map(|b| BasisDelta {
                    dmu: b.dmu.into(),
                    dq: b.dq,
                })
                .collect(),
        );
        losses.push(rec.loss);
        if mode == MotionMode::Rigid {
            let stored = rec.se3.ok_or_else(|| Error::parse(path, *ln, "rigid record lacks \"se3\""))?;
            let m = matrix_rows(&rigid_se3(&field, rec.t)?);
            let dev = (0..4)
                .flat_map(|r| (0..4).map(move |c| (r, c)))
                .map(|(r, c)| (m[r][c] - stored[r][c]).abs())
                .fold(0.0, f64::max);
            if dev > 1e-9 {
                return Err(Error::parse(path, *ln, format!("se3 disagrees with the stored bases by {dev:e}")));
            }
        }
    }
    Ok(Trajectory { field, losses })
}

// ---------------------------------------------------------------- datasets

pub fn frame_dir(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:04}"))
}

/// Loads `frames/NNNN/<camera>.ppm` and the dynamic-object mask
/// `frames/NNNN/<camera>.mask.pgm` for every frame directory present.
/// Frames without a directory are left empty.
pub fn load_observations(dir: &Path, cameras: &[Camera]) -> Result<Observations> {
    let root = dir.join("frames");
    let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut present = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&root, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Ok(t) = name.parse::<usize>() {
            present.push(t);
        }
    }
    present.sort_unstable();
    let n = present.last().map_or(0, |t| t + 1);
    let mut frames = vec![None; n];
    for t in present {
        let fd = frame_dir(dir, t);
        let mut views = Vec::new();
        for cam in cameras {
            let image = load_rgb(&fd.join(format!("{}.ppm", cam.id)))?;
            let mask = load_mask(&fd.join(format!("{}.mask.pgm", cam.id)))?;
            image.check_shape(&mask)?;
            if image.width != cam.width || image.height != cam.height {
                return Err(Error::shape(
                    format!("{}x{} for camera {}", cam.width, cam.height, cam.id),
                    format!("{}x{}", image.width, image.height),
                ));
            }
            views.push(ViewFrame { image, mask });
        }
        frames[t] = Some(views);
    }
    Ok(Observations { frames })
}

/// One-hot object features plus a single canonical phrase, for the labels
/// in `labels` (dimension = number of labels + 1).
pub fn orthogonal_features(labels: &[u32]) -> FeatureSet {
    let dim = labels.len() + 1;
    let one_hot = |k: usize| (0..dim).map(|i| f64::from(u8::from(i == k))).collect::<Vec<_>>();
    FeatureSet {
        dim,
        canon: vec![one_hot(labels.len())],
        objects: labels.iter().enumerate().map(|(k, &l)| (l, one_hot(k))).collect(),
    }
}

/// Writes a generated dataset; the layout is described in docs/dataset.md.
pub fn save_dataset(spec: &SynthSpec, out: &SynthOutput, dir: &Path) -> Result<()> {
    save_json(&VersionedSpec { version: JSON_VERSION, spec }, &dir.join("spec.json"))?;
    save_scene(&out.scene, &dir.join("scene.msgf"))?;
    save_cameras(&out.cameras, &dir.join("cameras.json"))?;
    let moving = out.moving_labels(spec);
    for (t, posed) in out.poses.iter().enumerate() {
        save_scene(posed, &dir.join("truth").join(format!("{t:04}.msgf")))?;
        let fd = frame_dir(dir, t);
        for (c, cam) in out.cameras.iter().enumerate() {
            save_rgb(&out.images[t][c], &fd.join(format!("{}.ppm", cam.id)))?;
            save_mask(&out.union_mask(t, c, &moving), &fd.join(format!("{}.mask.pgm", cam.id)))?;
        }
    }
    let det = DetectionInput {
        views: out
            .cameras
            .iter()
            .enumerate()
            .map(|(c, cam)| ViewDetections {
                camera: cam.id.clone(),
                objects: out.masks[0][c]
                    .iter()
                    .map(|(label, mask)| ObjectMask {
                        label: *label,
                        mask: mask.clone(),
                        feature: None,
                    })
                    .collect(),
            })
            .collect(),
    };
    save_detections(&det, &dir.join("detections.json"))?;
    let labels: Vec<u32> = spec.objects.iter().map(|o| o.label).collect();
    save_features(&orthogonal_features(&labels), &dir.join("features.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct VersionedSpec<'a> {
    version: u32,
    #[serde(flatten)]
    spec: &'a SynthSpec,
}

/// Reads a synthetic spec file (JSON with a version field, or TOML).
pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        return toml::from_str(&text).map_err(|e| {
            let line = e.span().map_or(0, |s| 1 + text[..s.start].matches('\n').count());
            Error::parse(path, line, e.message().to_string())
        });
    }
    check_version(path, &text)?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("version");
    }
    serde_json::from_value(v).map_err(|e| Error::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn mask_payload_example() {
        let d = tmp();
        let p = d.path().join("m.pgm");
        fs::write(&p, b"P5\n2 2\n255\n\xff\x00\x00\xff").unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.data, vec![true, false, false, true]);
    }

    #[test]
    fn mask_rejections() {
        let d = tmp();
        let p = d.path().join("m.pgm");
        fs::write(&p, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Parse { .. })));
        fs::write(&p, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        let err = load_mask(&p).unwrap_err().to_string();
        assert!(err.contains("8-bit"), "{err}");
        fs::write(&p, b"P5\n2 2\n255\n\x00\x00\x00").unwrap();
        let err = load_mask(&p).unwrap_err().to_string();
        assert!(err.contains("byte"), "{err}");
    }

    #[test]
    fn mask_header_comments() {
        let d = tmp();
        let p = d.path().join("m.pgm");
        fs::write(&p, b"P5\n# made by hand\n1 2 # size\n255\n\x80\x7f").unwrap();
        assert_eq!(load_mask(&p).unwrap().data, vec![true, false]);
    }

    #[test]
    fn scene_errors_name_lines() {
        let d = tmp();
        let p = d.path().join("s.msgf");
        fs::write(&p, format!("MSGF2\ncount 0\nfields {SCENE_FIELDS}\n")).unwrap();
        assert!(matches!(load_scene(&p), Err(Error::VersionMismatch { .. })));
        let row = "0 0 1 1 0 0 0 0.1 0.1 0.5 0.2 0.3 0.4 1 0";
        fs::write(&p, format!("MSGF1\ncount 3\nfields {SCENE_FIELDS}\n{row}\n{row}\n")).unwrap();
        match load_scene(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        fs::write(&p, format!("MSGF1\ncount 1\nfields {SCENE_FIELDS} extra\n{row}\n")).unwrap();
        assert!(matches!(load_scene(&p), Err(Error::Parse { line: 3, .. })));
        fs::write(&p, format!("MSGF1\ncount 1\nfields {SCENE_FIELDS}\n0 0 1 1 0 0 0 0.1 0.1 0.5 0.2 0.3\n")).unwrap();
        assert!(matches!(load_scene(&p), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn camera_examples() {
        let d = tmp();
        let p = d.path().join("c.json");
        let one = r#"{"version": 1, "cameras": [{"id": "a", "width": 4, "height": 3, "fx": 2, "fy": 2,
            "cx": 2, "cy": 1.5, "pose": {"q": [1, 0, 0, 0], "t": [0, 0, 0]}, "near": 0.1, "far": 10}]}"#;
        fs::write(&p, one).unwrap();
        let cams = load_cameras(&p).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].id, "a");
        fs::write(&p, one.replace("\"far\": 10", "\"far\": 0.1")).unwrap();
        assert!(matches!(load_cameras(&p), Err(Error::InvalidCamera { .. })));
        fs::write(&p, one.replace("\"version\": 1", "\"version\": 2")).unwrap();
        assert!(matches!(load_cameras(&p), Err(Error::VersionMismatch { .. })));
        fs::write(&p, one.replace("\"near\"", "\"zoom\": 1, \"near\"")).unwrap();
        assert!(matches!(load_cameras(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn feature_examples() {
        let d = tmp();
        let p = d.path().join("f.json");
        fs::write(&p, r#"{"version": 1, "dim": 4, "canon": [[0, 0, 0, 2]], "objects": {"3": [1, 1, 0, 0]}}"#).unwrap();
        let f = load_features(&p).unwrap();
        assert_eq!(f.dim, 4);
        assert_eq!(f.canon[0], vec![0.0, 0.0, 0.0, 1.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.objects[&3][0] - s).abs() < 1e-15);
        fs::write(&p, r#"{"version": 1, "dim": 4, "canon": [[0, 0, 0, 1]], "objects": {"3": [1, 1, 0]}}"#).unwrap();
        assert!(matches!(load_features(&p), Err(Error::DimMismatch { .. })));
        fs::write(&p, r#"{"version": 1, "dim": 4, "canon": [[0, 0, 0, 1]], "objects": {"3": [0, 0, 0, 0]}}"#).unwrap();
        assert!(matches!(load_features(&p), Err(Error::Domain(_))));
    }
}
