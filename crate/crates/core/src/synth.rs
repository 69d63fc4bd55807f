//! Deterministic synthetic scenes with labeled objects, scripted motion and
//! rendered two-view observations.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::math::{matrix_to_quat, quat_from_axis_angle, quat_mul, quat_normalize, Quat};
use crate::motion::{Observations, ViewFrame};
use crate::raster::{Channels, Overrides, Rasterizer, RenderConfig};
use crate::scene::{Camera, Scene, SplatPrimitive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Thin square slab facing the cameras.
    Box,
    /// Front cap of a sphere.
    SphereShell,
    /// Two coplanar panels joined along a vertical edge; the right panel
    /// swings about the edge.
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionProgram {
    Static,
    /// Per-frame increments: after `k` frames the object is rotated by
    /// `k * rotation_deg` about `axis` through its centroid, then translated
    /// by `k * translation`.
    Rigid {
        translation: [f64; 3],
        #[serde(default)]
        rotation_deg: f64,
        #[serde(default = "default_axis")]
        axis: [f64; 3],
    },
    /// The hinge flap turns by `angle_deg` per frame.
    Hinge { angle_deg: f64 },
}

fn default_axis() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub count: usize,
    pub color: [f64; 3],
    pub label: u32,
    pub center: [f64; 3],
    /// Edge length (box, hinge panel) or radius (sphere shell).
    pub size: f64,
    #[serde(default = "default_opacity")]
    pub opacity: f64,
    #[serde(default = "default_motion")]
    pub motion: MotionProgram,
    /// Vertical stripes of this width alternate between `color` and its
    /// complement; `None` gives a plain jittered color.
    #[serde(default)]
    pub stripe_width: Option<f64>,
    /// Splat standard deviation as a multiple of the sample spacing.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.65
}

fn default_opacity() -> f64 {
    0.98
}

fn default_motion() -> MotionProgram {
    MotionProgram::Static
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub count: usize,
    /// Cameras are spread over `[-azimuth_deg, azimuth_deg]` about the
    /// vertical axis.
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            count: 2,
            azimuth_deg: 30.0,
            elevation_deg: 10.0,
            distance: 2.6,
            width: 64,
            height: 64,
            focal: 115.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    /// Primitives in the backdrop wall behind the objects.
    #[serde(default)]
    pub background: usize,
    #[serde(default)]
    pub rig: RigSpec,
    #[serde(default = "default_frames")]
    pub frames: usize,
}

fn default_frames() -> usize {
    1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Spec("frames must be >= 1".into()));
        }
        if self.rig.count == 0 || self.rig.width == 0 || self.rig.height == 0 {
            return Err(Error::Spec("rig needs at least one non-empty camera".into()));
        }
        let mut labels = Vec::new();
        for o in &self.objects {
            if o.label == 0 {
                return Err(Error::Spec("object label 0 is reserved for background".into()));
            }
            if labels.contains(&o.label) {
                return Err(Error::Spec(format!("duplicate object label {}", o.label)));
            }
            labels.push(o.label);
            if o.count < 2 || !(o.size > 0.0) {
                return Err(Error::Spec(format!("object {} needs count >= 2 and size > 0", o.label)));
            }
            if !(0.0..=1.0).contains(&o.opacity) || o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Spec(format!("object {} color/opacity out of range", o.label)));
            }
            if !(o.spread > 0.0 && o.spread.is_finite()) {
                return Err(Error::Spec(format!("object {} spread must be > 0", o.label)));
            }
            if o.stripe_width.is_some_and(|w| !(w > 0.0)) {
                return Err(Error::Spec(format!("object {} stripe width must be > 0", o.label)));
            }
            if matches!(o.motion, MotionProgram::Hinge { .. }) && o.shape != Shape::Hinge {
                return Err(Error::Spec(format!("hinge motion needs a hinge shape (object {})", o.label)));
            }
        }
        Ok(())
    }
}

/// Everything a spec generates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Scene at frame 0 with ground-truth labels; primitives of moving
    /// objects are flagged dynamic.
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    /// Ground-truth posed scene per frame.
    pub poses: Vec<Scene>,
    /// `images[frame][camera]`.
    pub images: Vec<Vec<RgbImage>>,
    /// `masks[frame][camera]`: `(label, mask)` per object.
    pub masks: Vec<Vec<Vec<(u32, Mask)>>>,
    /// Ground-truth rigid transform per object (by spec order) and frame;
    /// for hinges this is the flap transform.
    pub transforms: Vec<Vec<Matrix4<f64>>>,
    /// For hinge objects, the primitive indices of the moving flap.
    pub flap: Vec<Vec<usize>>,
}

impl SynthOutput {
    /// Union mask of the given labels at frame `t` in camera `c`.
    pub fn union_mask(&self, t: usize, c: usize, labels: &[u32]) -> Mask {
        let first = &self.masks[t][c];
        let (w, h) = (self.cameras[c].width, self.cameras[c].height);
        let mut m = Mask::filled(w, h, false);
        for (l, mask) in first {
            if labels.contains(l) {
                for (a, b) in m.data.iter_mut().zip(&mask.data) {
                    *a |= *b;
                }
            }
        }
        m
    }

    /// Tracking observations for the moving objects `labels`.
    pub fn observations(&self, labels: &[u32]) -> Observations {
        Observations {
            frames: (0..self.images.len())
                .map(|t| {
                    Some(
                        (0..self.cameras.len())
                            .map(|c| ViewFrame {
                                image: self.images[t][c].clone(),
                                mask: self.union_mask(t, c, labels),
                            })
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn moving_labels(&self, spec: &SynthSpec) -> Vec<u32> {
        spec.objects
            .iter()
            .filter(|o| o.motion != MotionProgram::Static)
            .map(|o| o.label)
            .collect()
    }
}

/// Camera rig looking at the origin from the negative z side.
pub fn rig_cameras(rig: &RigSpec) -> Result<Vec<Camera>> {
    (0..rig.count)
        .map(|i| {
            let a = if rig.count == 1 {
                0.0
            } else {
                -rig.azimuth_deg + 2.0 * rig.azimuth_deg * i as f64 / (rig.count - 1) as f64
            }
            .to_radians();
            let e = rig.elevation_deg.to_radians();
            let eye = Vector3::new(
                rig.distance * e.cos() * a.sin(),
                rig.distance * e.sin(),
                -rig.distance * e.cos() * a.cos(),
            );
            Camera::looking_at(format!("cam{i}"), rig.width, rig.height, rig.focal, eye, Vector3::zeros())
        })
        .collect()
}

fn frame_quat(tu: Vector3<f64>, n: Vector3<f64>) -> Quat {
    let tv = n.cross(&tu);
    matrix_to_quat(&Matrix3::from_columns(&[tu, tv, n]))
}

/// Base color at horizontal offset `x` from the object's left edge.
fn pattern_color(spec: &ObjectSpec, x: f64) -> [f64; 3] {
    match spec.stripe_width {
        Some(w) if (x / w).floor() as i64 % 2 != 0 => spec.color.map(|c| 1.0 - c),
        _ => spec.color,
    }
}

fn jitter_color(base: &[f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = *base;
    for v in &mut c {
        *v = (*v + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0);
    }
    c
}

/// Jittered grid of `count` points on `[0, 1]^2`, with the grid spacing.
fn grid(count: usize, aspect: f64, rng: &mut ChaCha8Rng) -> (Vec<(f64, f64)>, f64) {
    let ny = ((count as f64 / aspect).sqrt().ceil() as usize).max(1);
    let nx = count.div_ceil(ny);
    let (dx, dy) = (1.0 / nx as f64, 1.0 / ny as f64);
    let pts = (0..count)
        .map(|k| {
            let (i, j) = (k % nx, k / nx);
            (
                (i as f64 + 0.5 + rng.random_range(-0.1..0.1)) * dx,
                (j as f64 + 0.5 + rng.random_range(-0.1..0.1)) * dy,
            )
        })
        .collect();
    (pts, dx.min(dy))
}

/// A panel in the plane `z = center.z` spanning `[x0, x0 + w] x [y0, y0 + h]`.
#[allow(clippy::too_many_arguments)]
fn panel(
    count: usize,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    z: f64,
    color: &dyn Fn(f64) -> [f64; 3],
    opacity: f64,
    label: u32,
    spread: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SplatPrimitive>> {
    let (pts, spacing) = grid(count, w / h, rng);
    let step = spacing * w.max(h);
    pts.into_iter()
        .map(|(u, v)| {
            let spin = rng.random_range(0.0..std::f64::consts::PI);
            let q = quat_from_axis_angle(&Vector3::z(), spin);
            let s = [step * spread * rng.random_range(0.85..1.15), step * spread * rng.random_range(0.85..1.15)];
            let mu = Vector3::new(x0 + u * w, y0 + v * h, z + rng.random_range(-0.002..0.002));
            let base = color(u * w);
            SplatPrimitive::new(mu, q, s, opacity, jitter_color(&base, rng), label)
        })
        .collect()
}

/// Polar angle of the outer rim of a sphere-shell cap.
const CAP_DEG: f64 = 30.0;

/// Ring sizes of a cap sampled with `rings` rings plus a centre point;
/// the outer ring absorbs the remainder so the total equals `count`.
fn cap_rings(count: usize, rings: usize, cap: f64) -> Option<Vec<usize>> {
    let dphi = cap / rings as f64;
    let mut sizes = vec![1];
    for k in 1..=rings {
        let circumference = 2.0 * std::f64::consts::PI * (k as f64 * dphi).sin();
        sizes.push(((circumference / dphi).round() as usize).max(3));
    }
    let inner: usize = sizes[..rings].iter().sum();
    let outer = count.checked_sub(inner)?;
    (outer >= sizes[rings]).then(|| {
        sizes[rings] = outer;
        sizes
    })
}

fn sphere_cap(spec: &ObjectSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SplatPrimitive>> {
    let c = Vector3::from(spec.center);
    let r = spec.size;
    let cap = CAP_DEG.to_radians();
    // the most rings whose regular layout still fits in `count`
    let (rings, sizes) = (1..=spec.count)
        .map_while(|k| cap_rings(spec.count, k, cap).map(|s| (k, s)))
        .last()
        .ok_or_else(|| Error::Spec(format!("object {} needs more primitives for a sphere shell", spec.label)))?;
    let dphi = cap / rings as f64;
    let step = r * dphi;
    let mut out = Vec::with_capacity(spec.count);
    for (k, &n) in sizes.iter().enumerate() {
        let phi = k as f64 * dphi;
        let offset = rng.random_range(0.0..std::f64::consts::TAU);
        for j in 0..n {
            let theta = offset + std::f64::consts::TAU * j as f64 / n as f64;
            let d = Vector3::new(phi.sin() * theta.cos(), phi.sin() * theta.sin(), -phi.cos());
            let tu = Vector3::y().cross(&d).normalize();
            let s = [
                step * spec.spread * rng.random_range(0.85..1.15),
                step * spec.spread * rng.random_range(0.85..1.15),
            ];
            out.push(SplatPrimitive::new(
                c + d * r,
                frame_quat(tu, d),
                s,
                spec.opacity,
                jitter_color(&pattern_color(spec, d.x * r + r), rng),
                spec.label,
            )?);
        }
    }
    Ok(out)
}

/// Builds an object's primitives; the second value flags hinge-flap
/// primitives.
fn build_object(spec: &ObjectSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<SplatPrimitive>, Vec<bool>)> {
    let [cx, cy, cz] = spec.center;
    let a = spec.size;
    match spec.shape {
        Shape::Box => {
            let color = |x| pattern_color(spec, x);
            let p = panel(spec.count, cx - a / 2.0, cy - a / 2.0, a, a, cz, &color, spec.opacity, spec.label, spec.spread, rng)?;
            let n = p.len();
            Ok((p, vec![false; n]))
        }
        Shape::SphereShell => {
            let p = sphere_cap(spec, rng)?;
            let n = p.len();
            Ok((p, vec![false; n]))
        }
        Shape::Hinge => {
            let half = spec.count / 2;
            let base_color = |x| pattern_color(spec, x);
            let mut p = panel(half, cx - a, cy - a / 2.0, a, a, cz, &base_color, spec.opacity, spec.label, spec.spread, rng)?;
            let flap_color = |x| {
                let c = pattern_color(spec, x + a);
                [c[2], c[0], c[1]]
            };
            let f = panel(spec.count - half, cx, cy - a / 2.0, a, a, cz, &flap_color, spec.opacity, spec.label, spec.spread, rng)?;
            let mut flags = vec![false; p.len()];
            flags.extend(vec![true; f.len()]);
            p.extend(f);
            Ok((p, flags))
        }
    }
}

fn rotation_about(axis: &Vector3<f64>, angle: f64, pivot: &Vector3<f64>) -> (Matrix4<f64>, Quat) {
    let q = if angle == 0.0 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        quat_from_axis_angle(axis, angle)
    };
    let r = crate::math::quat_to_matrix(&q);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(pivot - r * pivot));
    (m, q)
}

fn transform_prim(p: &SplatPrimitive, m: &Matrix4<f64>, q: &Quat) -> SplatPrimitive {
    let mut out = p.clone();
    out.mu = m.fixed_view::<3, 3>(0, 0) * p.mu + m.fixed_view::<3, 1>(0, 3);
    out.q = quat_normalize(&quat_mul(q, &p.q)).unwrap_or(p.q);
    out
}

/// Generates the frame-0 scene, ground-truth motion, masks and rendered
/// observations.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene = Scene::default();
    let mut ranges = Vec::new();
    let mut flap = Vec::new();
    for o in &spec.objects {
        let (prims, flags) = build_object(o, &mut rng)?;
        let start = scene.len();
        let moving = o.motion != MotionProgram::Static;
        for p in prims {
            scene.push(p, moving);
        }
        ranges.push(start..scene.len());
        flap.push(
            flags
                .iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(k, _)| start + k)
                .collect::<Vec<_>>(),
        );
    }
    if spec.background > 0 {
        let wall = panel(
            spec.background,
            -1.3,
            -1.1,
            2.6,
            2.2,
            0.6,
            &|_| [0.55, 0.55, 0.5],
            0.95,
            0,
            default_spread(),
            &mut rng,
        )?;
        for p in wall {
            scene.push(p, false);
        }
    }
    let cameras = rig_cameras(&spec.rig)?;

    let mut transforms: Vec<Vec<Matrix4<f64>>> = vec![Vec::new(); spec.objects.len()];
    let mut poses = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let mut posed = scene.clone();
        for (oi, o) in spec.objects.iter().enumerate() {
            let range = ranges[oi].clone();
            let idx: Vec<usize> = range.clone().collect();
            let centroid = scene.centroid(&idx).unwrap_or_else(Vector3::zeros);
            let kf = k as f64;
            let (m, q, which): (Matrix4<f64>, Quat, Vec<usize>) = match &o.motion {
                MotionProgram::Static => (Matrix4::identity(), [1.0, 0.0, 0.0, 0.0], Vec::new()),
                MotionProgram::Rigid {
                    translation,
                    rotation_deg,
                    axis,
                } => {
                    let (mut m, q) =
                        rotation_about(&Vector3::from(*axis), (kf * rotation_deg).to_radians(), &centroid);
                    let t = Vector3::from(*translation) * kf;
                    m[(0, 3)] += t.x;
                    m[(1, 3)] += t.y;
                    m[(2, 3)] += t.z;
                    (m, q, idx)
                }
                MotionProgram::Hinge { angle_deg } => {
                    let hinge = Vector3::new(o.center[0], o.center[1], o.center[2]);
                    // positive angles swing the flap toward the cameras
                    let (m, q) = rotation_about(&Vector3::y(), (kf * angle_deg).to_radians(), &hinge);
                    (m, q, flap[oi].clone())
                }
            };
            for i in which {
                posed.primitives[i] = transform_prim(&scene.primitives[i], &m, &q);
            }
            transforms[oi].push(m);
        }
        poses.push(posed);
    }

    let r = Rasterizer::new(RenderConfig::default());
    let mut images = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for posed in &poses {
        let mut frame_imgs = Vec::new();
        let mut frame_masks = Vec::new();
        for cam in &cameras {
            let t = r.render_naive(posed, cam, Channels::COLOR_OPACITY, &Overrides::default())?;
            frame_imgs.push(t.color.expect("color enabled"));
            let mut per_obj = Vec::new();
            for o in &spec.objects {
                per_obj.push((o.label, object_mask(&r, posed, cam, o.label)?));
            }
            frame_masks.push(per_obj);
        }
        images.push(frame_imgs);
        masks.push(frame_masks);
    }
    Ok(SynthOutput {
        scene,
        cameras,
        poses,
        images,
        masks,
        transforms,
        flap,
    })
}

/// Object-only opacity render thresholded at 0.5.
pub fn object_mask(r: &Rasterizer, scene: &Scene, cam: &Camera, label: u32) -> Result<Mask> {
    let flags = scene.primitives.iter().map(|p| p.label == label).collect();
    let t = r.render_naive(scene, cam, Channels::OPACITY, &Overrides::subset(flags))?;
    Ok(t.opacity.expect("opacity enabled").threshold(0.5))
}

/// Adds seeded Gaussian noise with standard deviation `sigma` to the
/// positions of dynamic primitives.
pub fn perturb_scene(scene: &Scene, sigma: f64, seed: u64) -> Result<Scene> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma = {sigma} must be finite and >= 0")));
    }
    let mut out = scene.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    for (p, &d) in out.primitives.iter_mut().zip(&scene.dynamic) {
        if d {
            p.mu += Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(out)
}

/// Two labeled objects side by side in front of a backdrop wall.
pub fn two_object_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        objects: vec![
            ObjectSpec {
                shape: Shape::Box,
                count: 200,
                color: [0.85, 0.2, 0.15],
                label: 1,
                center: [-0.32, 0.0, 0.0],
                size: 0.38,
                opacity: default_opacity(),
                motion: MotionProgram::Static,
                stripe_width: None,
                spread: 3.0,
            },
            ObjectSpec {
                shape: Shape::SphereShell,
                count: 100,
                color: [0.15, 0.35, 0.85],
                label: 2,
                center: [0.32, 0.0, 0.15],
                size: 0.22,
                opacity: default_opacity(),
                motion: MotionProgram::Static,
                stripe_width: None,
                spread: 3.0,
            },
        ],
        background: 400,
        rig: RigSpec::default(),
        frames: 1,
    }
}

/// Generator used by the random scene helpers.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random unit quaternion from a normalised draw in the 4-cube.
pub fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if let Some(q) = quat_normalize(&q) {
            return q;
        }
    }
}

/// Unstructured splats with random pose, scale, opacity and color in a
/// cube of half-width 0.6 around the origin; labels cycle through 0..3.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, scale: (f64, f64)) -> Scene {
    let prims = (0..n)
        .map(|i| {
            let mu = Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            SplatPrimitive::new(
                mu,
                random_quat(rng),
                [rng.random_range(scale.0..scale.1), rng.random_range(scale.0..scale.1)],
                rng.random_range(0.1..0.99),
                [rng.random(), rng.random(), rng.random()],
                (i % 3) as u32,
            )
            .expect("valid random primitive")
        })
        .collect();
    Scene::new(prims)
}

/// Two square cameras on either side of the origin, looking at it.
pub fn camera_pair(size: usize) -> [Camera; 2] {
    let f = size as f64 * 1.2;
    [
        Camera::looking_at("left", size, size, f, Vector3::new(-1.5, 0.3, -2.6), Vector3::zeros()).expect("valid camera"),
        Camera::looking_at("right", size, size, f, Vector3::new(1.5, -0.2, -2.6), Vector3::zeros()).expect("valid camera"),
    ]
}

/// Re-draws orientations of splats seen nearly edge-on from `cam`
/// (`|cos|` of the view angle below `min_cos`), where the ray-plane
/// intersection is too curved for coarse finite differences.
pub fn avoid_grazing(scene: &mut Scene, cam: &Camera, rng: &mut ChaCha8Rng, min_cos: f64) {
    for p in &mut scene.primitives {
        loop {
            let view = (p.mu - cam.center()).normalize();
            if p.normal().dot(&view).abs() >= min_cos {
                break;
            }
            p.q = random_quat(rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moving_spec() -> SynthSpec {
        let mut s = two_object_spec(3);
        s.frames = 3;
        s.objects[0].motion = MotionProgram::Rigid {
            translation: [0.1, 0.0, 0.0],
            rotation_deg: 0.0,
            axis: default_axis(),
        };
        s.background = 50;
        s
    }

    #[test]
    fn static_spec_repeats_frames() {
        let mut s = two_object_spec(1);
        s.frames = 3;
        s.background = 30;
        let out = generate(&s).unwrap();
        assert_eq!(out.images.len(), 3);
        assert_eq!(out.images[0], out.images[1]);
        assert_eq!(out.images[1], out.images[2]);
        assert!(out.scene.dynamic.iter().all(|d| !d));
    }

    #[test]
    fn rigid_translation_program() {
        let out = generate(&moving_spec()).unwrap();
        for k in 0..3 {
            let m = out.transforms[0][k];
            assert!((m[(0, 3)] - 0.1 * k as f64).abs() < 1e-15);
            let i = 5;
            let moved = out.poses[k].primitives[i].mu - out.scene.primitives[i].mu;
            assert!((moved - Vector3::new(0.1 * k as f64, 0.0, 0.0)).norm() < 1e-12);
        }
        assert_ne!(out.images[0], out.images[1]);
    }

    #[test]
    fn same_seed_same_output() {
        assert_eq!(generate(&moving_spec()).unwrap(), generate(&moving_spec()).unwrap());
    }

    #[test]
    fn masks_equal_thresholded_object_render() {
        let s = moving_spec();
        let out = generate(&s).unwrap();
        let r = Rasterizer::default();
        for (k, posed) in out.poses.iter().enumerate() {
            for (c, cam) in out.cameras.iter().enumerate() {
                for (label, mask) in &out.masks[k][c] {
                    assert_eq!(mask, &object_mask(&r, posed, cam, *label).unwrap());
                    assert!(mask.count() > 20);
                }
            }
        }
    }

    #[test]
    fn perturb_contract() {
        let out = generate(&moving_spec()).unwrap();
        assert_eq!(perturb_scene(&out.scene, 0.0, 1).unwrap(), out.scene);
        let mut all_static = out.scene.clone();
        all_static.dynamic.iter_mut().for_each(|d| *d = false);
        assert_eq!(perturb_scene(&all_static, 0.3, 1).unwrap(), all_static);
        let p = perturb_scene(&out.scene, 0.05, 9).unwrap();
        for (i, (a, b)) in out.scene.primitives.iter().zip(&p.primitives).enumerate() {
            assert_eq!(a.mu == b.mu, !out.scene.dynamic[i]);
        }
    }

    #[test]
    fn perturbation_is_centered() {
        let prims = (0..10_000)
            .map(|_| SplatPrimitive::new(Vector3::zeros(), [1.0, 0.0, 0.0, 0.0], [0.1, 0.1], 1.0, [0.0; 3], 1).unwrap())
            .collect();
        let scene = Scene::with_dynamic(prims, vec![true; 10_000]).unwrap();
        let sigma = 0.2;
        let p = perturb_scene(&scene, sigma, 42).unwrap();
        let mean: Vector3<f64> = p.primitives.iter().map(|q| q.mu).sum::<Vector3<f64>>() / 10_000.0;
        for k in 0..3 {
            assert!(mean[k].abs() < 0.05 * sigma, "{mean:?}");
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = two_object_spec(0);
        s.objects[1].label = 1;
        assert!(matches!(generate(&s), Err(Error::Spec(_))));
        let mut s = two_object_spec(0);
        s.objects[0].motion = MotionProgram::Hinge { angle_deg: 5.0 };
        assert!(matches!(generate(&s), Err(Error::Spec(_))));
    }
}
