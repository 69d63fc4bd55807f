//! Motion-basis field: per-timestep basis deltas combined per primitive by
//! coefficient vectors, fitted to multi-view video with Adam.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::losses::{dice_loss, l1_rgb, ssim_loss, total_loss, AdamState, LossParts, LossWeights, RigidityGraph};
use crate::math::{
    mat4x4_t_vec, normalize_vjp, quat_add, quat_mul, quat_norm, quat_normalize, quat_right_matrix,
    quat_scale, quat_to_matrix, quat_to_matrix_vjp, Quat, QUAT_IDENTITY,
};
use crate::raster::{Channels, Overrides, Rasterizer, Upstream};
use crate::scene::{Camera, Scene, SplatPrimitive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    Rigid,
    #[serde(alias = "non-rigid")]
    Nonrigid,
}

impl std::str::FromStr for MotionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(Self::Rigid),
            "nonrigid" | "non-rigid" => Ok(Self::Nonrigid),
            other => Err(Error::Domain(format!("unknown motion mode {other:?}"))),
        }
    }
}

/// Translation and quaternion delta of one basis at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisDelta {
    pub dmu: Vector3<f64>,
    pub dq: Quat,
}

impl BasisDelta {
    pub const ZERO: BasisDelta = BasisDelta {
        dmu: Vector3::new(0.0, 0.0, 0.0),
        dq: [0.0; 4],
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub mode: MotionMode,
    /// Frame indices of the sampled timesteps; the first is the reference
    /// frame.
    pub timesteps: Vec<usize>,
    /// `bases[timestep][basis]`.
    pub bases: Vec<Vec<BasisDelta>>,
    /// Scene indices of the moving primitives.
    pub dynamic: Vec<usize>,
    /// One coefficient vector per dynamic primitive.
    pub coeffs: Vec<Vec<f64>>,
    /// Rotation centre of rigid motion: the dynamic centroid at the
    /// reference frame.
    pub pivot: Vector3<f64>,
}

impl MotionField {
    /// Zero bases (identity motion). Rigid fields use the coefficient
    /// vector `(1, 0, ..., 0)` for every primitive; non-rigid coefficients
    /// are drawn from a normal distribution with variance 0.01.
    pub fn new(
        scene: &Scene,
        mode: MotionMode,
        num_bases: usize,
        timesteps: Vec<usize>,
        dynamic: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if dynamic.is_empty() {
            return Err(Error::NoDynamicPrimitives);
        }
        if num_bases == 0 {
            return Err(Error::Domain("at least one motion basis is required".into()));
        }
        if timesteps.is_empty() {
            return Err(Error::Domain("motion field needs at least one timestep".into()));
        }
        if let Some(&i) = dynamic.iter().find(|&&i| i >= scene.len()) {
            return Err(Error::Domain(format!("dynamic index {i} out of range")));
        }
        let coeffs = match mode {
            MotionMode::Rigid => {
                let mut w = vec![0.0; num_bases];
                w[0] = 1.0;
                vec![w; dynamic.len()]
            }
            MotionMode::Nonrigid => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, 0.1).expect("valid normal");
                (0..dynamic.len())
                    .map(|_| (0..num_bases).map(|_| normal.sample(&mut rng)).collect())
                    .collect()
            }
        };
        let pivot = scene.centroid(&dynamic).unwrap_or_else(Vector3::zeros);
        Ok(Self {
            mode,
            bases: vec![vec![BasisDelta::ZERO; num_bases]; timesteps.len()],
            timesteps,
            dynamic,
            coeffs,
            pivot,
        })
    }

    pub fn num_bases(&self) -> usize {
        self.bases.first().map_or(0, Vec::len)
    }

    pub fn timestep_index(&self, t: usize) -> Result<usize> {
        self.timesteps
            .iter()
            .position(|&x| x == t)
            .ok_or(Error::UnknownTimestep(t))
    }

    /// Basis deltas at frame `t`.
    pub fn bases_at(&self, t: usize) -> Result<&[BasisDelta]> {
        Ok(&self.bases[self.timestep_index(t)?])
    }
}

/// `sum_b w_b * delta_b` for translation and quaternion, without
/// normalisation.
pub fn compose_motion(coeffs: &[f64], field: &MotionField, t: usize) -> Result<(Vector3<f64>, Quat)> {
    let bases = field.bases_at(t)?;
    if coeffs.len() != bases.len() {
        return Err(Error::shape(format!("{} coefficients", bases.len()), coeffs.len()));
    }
    let mut dmu = Vector3::zeros();
    let mut dq = [0.0; 4];
    for (w, b) in coeffs.iter().zip(bases) {
        dmu += b.dmu * *w;
        dq = quat_add(&dq, &quat_scale(&b.dq, *w));
    }
    Ok((dmu, dq))
}

/// Offsets the position by `dmu` and sets the orientation to
/// `normalize(q + dq)`.
pub fn apply_motion(prim: &SplatPrimitive, dmu: &Vector3<f64>, dq: &Quat) -> Result<SplatPrimitive> {
    let sum = quat_add(&prim.q, dq);
    let n = quat_norm(&sum);
    if !(n > 1e-9) {
        return Err(Error::DegenerateQuaternion(n));
    }
    let mut out = prim.clone();
    out.mu = prim.mu + dmu;
    out.q = quat_scale(&sum, 1.0 / n);
    Ok(out)
}

/// Rotation quaternion of a rigid field at `t`: `normalize(identity + dq)`.
pub fn rigid_rotation(field: &MotionField, t: usize) -> Result<Quat> {
    if field.mode != MotionMode::Rigid {
        return Err(Error::NotRigidMode);
    }
    let (_, dq) = compose_motion(&field.coeffs[0], field, t)?;
    let sum = quat_add(&QUAT_IDENTITY, &dq);
    quat_normalize(&sum).ok_or(Error::DegenerateQuaternion(quat_norm(&sum)))
}

/// Rigid transform of a rigid field at `t`: rotation about the pivot
/// followed by the composed translation.
pub fn rigid_se3(field: &MotionField, t: usize) -> Result<Matrix4<f64>> {
    let q = rigid_rotation(field, t)?;
    let (dmu, _) = compose_motion(&field.coeffs[0], field, t)?;
    let r = quat_to_matrix(&q);
    let trans = field.pivot + dmu - r * field.pivot;
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
    Ok(m)
}

/// Applies a rigid transform to a primitive: the centre is transformed and
/// the orientation is pre-multiplied by `rotation`.
pub fn apply_rigid(prim: &SplatPrimitive, se3: &Matrix4<f64>, rotation: &Quat) -> SplatPrimitive {
    let mut out = prim.clone();
    out.mu = se3.fixed_view::<3, 3>(0, 0) * prim.mu + se3.fixed_view::<3, 1>(0, 3);
    out.q = quat_normalize(&quat_mul(rotation, &prim.q)).unwrap_or(prim.q);
    out
}

/// The scene posed at timestep `t`; static primitives are copied unchanged.
pub fn pose_scene(scene: &Scene, field: &MotionField, t: usize) -> Result<Scene> {
    let mut out = scene.clone();
    match field.mode {
        MotionMode::Rigid => {
            let se3 = rigid_se3(field, t)?;
            let q = rigid_rotation(field, t)?;
            for &i in &field.dynamic {
                out.primitives[i] = apply_rigid(&scene.primitives[i], &se3, &q);
            }
        }
        MotionMode::Nonrigid => {
            for (k, &i) in field.dynamic.iter().enumerate() {
                let (dmu, dq) = compose_motion(&field.coeffs[k], field, t)?;
                out.primitives[i] = apply_motion(&scene.primitives[i], &dmu, &dq)?;
            }
        }
    }
    Ok(out)
}

/// `{0, stride, 2 stride, ...}` plus the last frame.
pub fn sample_frames(n_frames: usize, stride: usize) -> Vec<usize> {
    if n_frames == 0 {
        return Vec::new();
    }
    let stride = stride.max(1);
    let mut v: Vec<usize> = (0..n_frames).step_by(stride).collect();
    if *v.last().unwrap() != n_frames - 1 {
        v.push(n_frames - 1);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Adam steps per sampled frame; `None` picks 300 (rigid) or 1000
    /// (non-rigid).
    pub iterations: Option<usize>,
    pub num_bases: usize,
    pub lr_translation: f64,
    pub lr_quaternion: f64,
    pub lr_coeffs: f64,
    /// Learning-rate multiplier reached at the last step of each frame
    /// (exponential decay); 1 disables decay.
    pub lr_final_fraction: f64,
    pub weights: LossWeights,
    pub stride: usize,
    pub knn: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: None,
            num_bases: 10,
            lr_translation: 1e-2,
            lr_quaternion: 1e-3,
            lr_coeffs: 1e-2,
            lr_final_fraction: 0.1,
            weights: LossWeights::default(),
            stride: 1,
            knn: 8,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn iterations_for(&self, mode: MotionMode) -> usize {
        self.iterations.unwrap_or(match mode {
            MotionMode::Rigid => 300,
            MotionMode::Nonrigid => 1000,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.iterations == Some(0) {
            return Err(Error::Domain("iterations must be > 0".into()));
        }
        if self.stride == 0 || self.knn == 0 || self.num_bases == 0 {
            return Err(Error::Domain("stride, knn and num_bases must be >= 1".into()));
        }
        for (name, v) in [
            ("lr_translation", self.lr_translation),
            ("lr_quaternion", self.lr_quaternion),
            ("lr_coeffs", self.lr_coeffs),
            ("lr_final_fraction", self.lr_final_fraction),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// One camera's observation of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFrame {
    pub image: RgbImage,
    /// Silhouette of the moving object.
    pub mask: Mask,
}

/// Observed frames, `frames[t][camera]`; unobserved frames are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observations {
    pub frames: Vec<Option<Vec<ViewFrame>>>,
}

impl Observations {
    pub fn get(&self, t: usize, n_cams: usize) -> Result<&[ViewFrame]> {
        let views = self
            .frames
            .get(t)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::MissingObservation(format!("frame {t}")))?;
        if views.len() != n_cams {
            return Err(Error::MissingObservation(format!(
                "frame {t} has {} views, expected {n_cams}",
                views.len()
            )));
        }
        Ok(views)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTrace {
    pub t: usize,
    /// Total loss before each Adam step.
    pub losses: Vec<f64>,
    /// Loss parts after the last step.
    pub final_parts: LossParts,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub field: MotionField,
    pub frames: Vec<FrameTrace>,
}

impl FitResult {
    pub fn trace(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().flat_map(|f| f.losses.iter().copied())
    }
}

/// Photometric and silhouette objective over all cameras, with gradients
/// with respect to every posed primitive.
pub struct FrameObjective<'a> {
    pub rasterizer: &'a Rasterizer,
    pub cameras: &'a [Camera],
    pub views: &'a [ViewFrame],
    pub weights: LossWeights,
    pub dynamic_flags: Vec<bool>,
}

pub struct ObjectiveEval {
    pub parts: LossParts,
    pub d_mu: Vec<Vector3<f64>>,
    pub d_q: Vec<Quat>,
}

impl FrameObjective<'_> {
    pub fn evaluate(&self, posed: &Scene, with_grad: bool) -> Result<ObjectiveEval> {
        let n = posed.len();
        let mut parts = LossParts::default();
        let mut d_mu = vec![Vector3::zeros(); n];
        let mut d_q = vec![[0.0; 4]; n];
        let subset = Overrides::subset(self.dynamic_flags.clone());
        let full = Overrides::default();
        let w = &self.weights;
        for (cam, view) in self.cameras.iter().zip(self.views) {
            let (img, rec) = self.rasterizer.forward(posed, cam, Channels::COLOR_OPACITY, &full)?;
            let color = img.color.as_ref().expect("color enabled");
            let (l1, g1) = l1_rgb(color, &view.image)?;
            parts.rgb += l1;
            let mut g_color = g1;
            if w.ssim > 0.0 {
                let (ls, gs) = ssim_loss(color, &view.image)?;
                parts.ssim += ls;
                for (a, b) in g_color.data.iter_mut().zip(&gs.data) {
                    for k in 0..3 {
                        a[k] += w.ssim * b[k];
                    }
                }
            }
            let mut grads = Vec::new();
            if with_grad {
                grads.push(self.rasterizer.backward(
                    posed,
                    cam,
                    &full,
                    &rec,
                    &Upstream {
                        color: Some(&g_color),
                        opacity: None,
                    },
                )?);
            }
            if w.dice > 0.0 {
                let (dimg, drec) = self.rasterizer.forward(posed, cam, Channels::OPACITY, &subset)?;
                let opacity = dimg.opacity.as_ref().expect("opacity enabled");
                let (ld, mut gd) = dice_loss(opacity, &view.mask.to_gray())?;
                parts.dice += ld;
                if with_grad {
                    gd.data.iter_mut().for_each(|g| *g *= w.dice);
                    grads.push(self.rasterizer.backward(
                        posed,
                        cam,
                        &subset,
                        &drec,
                        &Upstream {
                            color: None,
                            opacity: Some(&gd),
                        },
                    )?);
                }
            }
            for g in &grads {
                for i in 0..n {
                    d_mu[i] += g.d_mu[i];
                    d_q[i] = quat_add(&d_q[i], &g.d_q[i]);
                }
            }
        }
        Ok(ObjectiveEval { parts, d_mu, d_q })
    }
}

fn flatten_bases(bases: &[BasisDelta]) -> (Vec<f64>, Vec<f64>) {
    let t = bases.iter().flat_map(|b| b.dmu.iter().copied()).collect();
    let q = bases.iter().flat_map(|b| b.dq).collect();
    (t, q)
}

fn unflatten_bases(t: &[f64], q: &[f64]) -> Vec<BasisDelta> {
    t.chunks(3)
        .zip(q.chunks(4))
        .map(|(t, q)| BasisDelta {
            dmu: Vector3::new(t[0], t[1], t[2]),
            dq: [q[0], q[1], q[2], q[3]],
        })
        .collect()
}

/// Fits the field's bases (and, for non-rigid fields, coefficients) to the
/// observations, frame by frame in timestep order. Each frame starts from
/// the previous frame's solution. The reference frame is not optimised.
pub fn fit(
    rasterizer: &Rasterizer,
    scene: &Scene,
    cameras: &[Camera],
    observations: &Observations,
    mut field: MotionField,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if field.dynamic.is_empty() {
        return Err(Error::NoDynamicPrimitives);
    }
    if cameras.is_empty() {
        return Err(Error::Domain("fit needs at least one camera".into()));
    }
    for &t in &field.timesteps {
        observations.get(t, cameras.len())?;
    }
    let iterations = cfg.iterations_for(field.mode);
    let nb = field.num_bases();
    let mut dynamic_flags = vec![false; scene.len()];
    for &i in &field.dynamic {
        dynamic_flags[i] = true;
    }
    let rigidity = match field.mode {
        MotionMode::Nonrigid if cfg.weights.rigidity > 0.0 && field.dynamic.len() >= 2 => {
            let pos: Vec<Vector3<f64>> = field.dynamic.iter().map(|&i| scene.primitives[i].mu).collect();
            Some(RigidityGraph::new(&pos, cfg.knn, None)?)
        }
        _ => None,
    };
    let decay = if iterations > 1 {
        cfg.lr_final_fraction.ln() / (iterations - 1) as f64
    } else {
        0.0
    };

    let mut frames = Vec::new();
    let mut coeffs_flat: Vec<f64> = field.coeffs.iter().flatten().copied().collect();
    let mut adam_w = AdamState::new(coeffs_flat.len());
    for ti in 1..field.timesteps.len() {
        let t = field.timesteps[ti];
        field.bases[ti] = field.bases[ti - 1].clone();
        let objective = FrameObjective {
            rasterizer,
            cameras,
            views: observations.get(t, cameras.len())?,
            weights: cfg.weights,
            dynamic_flags: dynamic_flags.clone(),
        };
        let (mut pt, mut pq) = flatten_bases(&field.bases[ti]);
        let mut adam_t = AdamState::new(pt.len());
        let mut adam_q = AdamState::new(pq.len());
        let mut losses = Vec::with_capacity(iterations);
        for it in 0..=iterations {
            field.bases[ti] = unflatten_bases(&pt, &pq);
            let posed = pose_scene(scene, &field, t)?;
            let last = it == iterations;
            let eval = objective.evaluate(&posed, !last)?;
            let mut parts = eval.parts;
            let mut g_w = vec![0.0; coeffs_flat.len()];
            if let Some(graph) = &rigidity {
                let (lr, gr) = graph.loss(&field.coeffs)?;
                parts.rigidity = lr;
                for (k, g) in gr.iter().enumerate() {
                    for b in 0..nb {
                        g_w[k * nb + b] += cfg.weights.rigidity * g[b];
                    }
                }
            }
            let loss = total_loss(&parts, &cfg.weights);
            if !loss.is_finite() {
                return Err(Error::Domain(format!("non-finite loss at frame {t}, iteration {it}")));
            }
            if last {
                frames.push(FrameTrace {
                    t,
                    losses: std::mem::take(&mut losses),
                    final_parts: parts,
                    final_loss: loss,
                });
                break;
            }
            losses.push(loss);

            let mut g_t = vec![0.0; pt.len()];
            let mut g_q = vec![0.0; pq.len()];
            match field.mode {
                MotionMode::Rigid => {
                    rigid_grads(scene, &field, ti, &eval, &mut g_t, &mut g_q);
                }
                MotionMode::Nonrigid => {
                    for (k, &i) in field.dynamic.iter().enumerate() {
                        let w = &field.coeffs[k];
                        let (_, dq) = compose_motion(w, &field, t)?;
                        let s = quat_add(&scene.primitives[i].q, &dq);
                        let g_s = normalize_vjp(&s, &eval.d_q[i]);
                        let g_mu = eval.d_mu[i];
                        for b in 0..nb {
                            let basis = &field.bases[ti][b];
                            for a in 0..3 {
                                g_t[b * 3 + a] += w[b] * g_mu[a];
                            }
                            for a in 0..4 {
                                g_q[b * 4 + a] += w[b] * g_s[a];
                            }
                            g_w[k * nb + b] += g_mu.dot(&basis.dmu)
                                + (0..4).map(|a| g_s[a] * basis.dq[a]).sum::<f64>();
                        }
                    }
                }
            }
            let scale = (decay * it as f64).exp();
            adam_t.step(&mut pt, &g_t, cfg.lr_translation * scale)?;
            adam_q.step(&mut pq, &g_q, cfg.lr_quaternion * scale)?;
            if field.mode == MotionMode::Nonrigid {
                adam_w.step(&mut coeffs_flat, &g_w, cfg.lr_coeffs * scale)?;
                for (k, c) in field.coeffs.iter_mut().enumerate() {
                    c.copy_from_slice(&coeffs_flat[k * nb..(k + 1) * nb]);
                }
            }
        }
    }
    Ok(FitResult { field, frames })
}

/// Chain rule from posed-primitive gradients to basis 0 of a rigid field.
fn rigid_grads(scene: &Scene, field: &MotionField, ti: usize, eval: &ObjectiveEval, g_t: &mut [f64], g_q: &mut [f64]) {
    let b0 = &field.bases[ti][0];
    let s = quat_add(&QUAT_IDENTITY, &b0.dq);
    let Some(q_hat) = quat_normalize(&s) else { return };
    let mut g_dmu = Vector3::zeros();
    let mut g_r = Matrix3::zeros();
    let mut g_qhat = [0.0; 4];
    for &i in &field.dynamic {
        let p = &scene.primitives[i];
        let g_mu = eval.d_mu[i];
        g_dmu += g_mu;
        g_r += g_mu * (p.mu - field.pivot).transpose();
        // posed q = q_hat (x) q0 = R(q0) q_hat
        let g = mat4x4_t_vec(&quat_right_matrix(&p.q), &eval.d_q[i]);
        g_qhat = quat_add(&g_qhat, &g);
    }
    g_qhat = quat_add(&g_qhat, &quat_to_matrix_vjp(&q_hat, &g_r));
    let g_s = normalize_vjp(&s, &g_qhat);
    for a in 0..3 {
        g_t[a] += g_dmu[a];
    }
    for a in 0..4 {
        g_q[a] += g_s[a];
    }
}

/// Rotation angle (degrees) and translation of the rigid motion between
/// two poses of a rigid body about `pivot`.
pub fn rigid_error(a: &Matrix4<f64>, b: &Matrix4<f64>, pivot: &Vector3<f64>) -> (f64, f64) {
    let ra: Matrix3<f64> = a.fixed_view::<3, 3>(0, 0).into();
    let rb: Matrix3<f64> = b.fixed_view::<3, 3>(0, 0).into();
    let rel = ra.transpose() * rb;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let pa = ra * pivot + a.fixed_view::<3, 1>(0, 3);
    let pb = rb * pivot + b.fixed_view::<3, 1>(0, 3);
    (cos.acos().to_degrees(), (pa - pb).norm())
}
