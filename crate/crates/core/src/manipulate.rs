//! Simulated language-guided manipulation: query the object, propose a grasp,
//! then approach it tick by tick, stopping to refit the object's motion
//! whenever the cameras see it move.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::math::{matrix_to_quat, quat_from_axis_angle, quat_mul, quat_normalize, Quat, QUAT_IDENTITY};
use crate::motion::{fit, pose_scene, FitConfig, MotionField, MotionMode, Observations, ViewFrame};
use crate::projection::{occluding_primitives, select_views, OCCLUSION_PADDING};
use crate::raster::{Channels, Overrides, Rasterizer};
use crate::scene::{Camera, Pose, Scene};
use crate::semantics::{query, SemanticTable};
use crate::synth::object_mask;

/// Default motion threshold on the masked mean absolute RGB difference.
/// A 5 px shift of a synthetic object scores above 0.05; re-rendering an
/// unchanged scene scores exactly 0.
pub const DEFAULT_TAU_M: f64 = 0.02;

/// True when the mean absolute difference between the two frames inside
/// `region` exceeds `tau_m`. Differences are averaged over channels; an
/// empty region never reports motion.
pub fn detect_motion(prev: &RgbImage, cur: &RgbImage, region: &Mask, tau_m: f64) -> Result<bool> {
    prev.check_shape(cur)?;
    prev.check_shape(region)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in prev.data.iter().zip(&cur.data).zip(&region.data) {
        if m {
            sum += (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>() / 3.0;
            n += 1;
        }
    }
    Ok(n > 0 && sum / n as f64 > tau_m)
}

/// End-effector target: gripper position and the rotation taking the
/// gripper's local +z onto the approach direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub position: [f64; 3],
    pub approach: Quat,
}

impl GraspPose {
    pub fn direction(&self) -> Vector3<f64> {
        crate::math::quat_to_matrix(&self.approach) * Vector3::z()
    }
}

/// Turns a set of object primitives into an end-effector pose.
pub trait GraspProvider {
    fn propose(&self, indices: &[usize], scene: &Scene, views: &[Camera]) -> Result<GraspPose>;
}

/// Grasps at the centroid of the selected primitives. Approaches from above
/// when that direction is within `max_misalignment_deg` of the arm axis and
/// nothing sits over the object; otherwise approaches along the viewing
/// direction of the least-occluded camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentroidGrasp {
    /// World up direction; the top-down approach points against it.
    pub up: [f64; 3],
    /// Direction the arm prefers to approach along.
    pub arm_axis: [f64; 3],
    pub max_misalignment_deg: f64,
    /// Height of the virtual overhead camera used for the occlusion check.
    pub overhead_distance: f64,
}

impl Default for CentroidGrasp {
    fn default() -> Self {
        Self {
            up: [0.0, 1.0, 0.0],
            arm_axis: [0.0, -1.0, 0.0],
            max_misalignment_deg: 60.0,
            overhead_distance: 2.0,
        }
    }
}

/// Label used to tag the selected primitives for the occlusion tests.
const SELECTED: u32 = u32::MAX;

/// Rotation taking +z onto `dir`.
pub fn approach_quat(dir: &Vector3<f64>) -> Quat {
    let z = Vector3::z();
    let d = dir.normalize();
    let rot = Rotation3::rotation_between(&z, &d).unwrap_or_else(|| {
        // antiparallel: half turn about x
        Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::x()), std::f64::consts::PI)
    });
    let m: Matrix3<f64> = rot.into_inner();
    matrix_to_quat(&m)
}

impl CentroidGrasp {
    fn overhead_camera(&self, target: &Vector3<f64>) -> Result<Camera> {
        let up = Vector3::from(self.up).normalize();
        let eye = target + up * self.overhead_distance;
        // any hint not parallel to the viewing direction
        let hint = if up.cross(&Vector3::z()).norm() > 1e-6 { Vector3::z() } else { Vector3::x() };
        Camera::new("overhead", 64, 64, 64.0, 64.0, 32.0, 32.0, Pose::look_at(eye, *target, hint), 0.05, 100.0)
    }
}

impl GraspProvider for CentroidGrasp {
    fn propose(&self, indices: &[usize], scene: &Scene, views: &[Camera]) -> Result<GraspPose> {
        let centroid = scene
            .centroid(indices)
            .ok_or_else(|| Error::NoGrasp("no primitives selected".into()))?;
        let mut tagged = scene.clone();
        for p in &mut tagged.primitives {
            p.label = 0;
        }
        for &i in indices {
            tagged.primitives[i].label = SELECTED;
        }
        let down = -Vector3::from(self.up).normalize();
        let arm = Vector3::from(self.arm_axis).normalize();
        let aligned = down.angle(&arm).to_degrees() <= self.max_misalignment_deg;
        let overhead = self.overhead_camera(&centroid)?;
        let top_clear = occluding_primitives(&tagged, SELECTED, &overhead, OCCLUSION_PADDING)?.is_empty();
        let dir = if aligned && top_clear {
            down
        } else {
            if views.is_empty() {
                return Err(Error::NoGrasp("top-down approach blocked and no views to choose from".into()));
            }
            let (best, _) = select_views(&tagged, SELECTED, views, OCCLUSION_PADDING)?[0];
            (centroid - views[best].center()).normalize()
        };
        Ok(GraspPose {
            position: centroid.into(),
            approach: approach_quat(&dir),
        })
    }
}

/// An instantaneous rigid jump of one object at a given tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedMotion {
    pub label: u32,
    pub at_tick: usize,
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
}

fn default_axis() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

/// Kinematic robot: the gripper moves at most `step` per tick and adopts
/// the target orientation immediately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robot {
    pub position: [f64; 3],
    pub approach: Quat,
    pub gripper_closed: bool,
}

/// Ground-truth world: the true scene, its scripted motion, the cameras
/// and the robot. The robot pose changes only through `move_toward`;
/// stopping is simply not moving during a tick.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub script: Vec<ScriptedMotion>,
    pub robot: Robot,
    pub home: [f64; 3],
    pub step: f64,
    pub clock: usize,
}

/// One camera's image and the oracle segmentation of the tracked object.
pub type Perception = Vec<ViewFrame>;

impl SimWorld {
    pub fn new(scene: Scene, cameras: Vec<Camera>, script: Vec<ScriptedMotion>, home: [f64; 3], step: f64) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Domain("simulation needs at least one camera".into()));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Domain(format!("robot step {step} must be positive")));
        }
        Ok(Self {
            scene,
            cameras,
            script,
            robot: Robot {
                position: home,
                approach: QUAT_IDENTITY,
                gripper_closed: false,
            },
            home,
            step,
            clock: 0,
        })
    }

    /// Advances the clock and applies any scripted motion due at the new
    /// tick.
    pub fn tick(&mut self) -> Result<()> {
        self.clock += 1;
        let due: Vec<ScriptedMotion> = self.script.iter().filter(|m| m.at_tick == self.clock).cloned().collect();
        for m in due {
            let idx = self.scene.indices_with_label(m.label);
            let pivot = self.scene.centroid(&idx).ok_or(Error::EmptyObject(m.label))?;
            let axis = Vector3::from(m.axis);
            let q = if m.rotation_deg == 0.0 {
                QUAT_IDENTITY
            } else {
                quat_from_axis_angle(&axis, m.rotation_deg.to_radians())
            };
            let r = crate::math::quat_to_matrix(&q);
            for i in idx {
                let p = &mut self.scene.primitives[i];
                p.mu = r * (p.mu - pivot) + pivot + Vector3::from(m.translation);
                p.q = quat_normalize(&quat_mul(&q, &p.q)).unwrap_or(p.q);
            }
        }
        Ok(())
    }

    /// Renders every camera plus the oracle mask of `label`.
    pub fn perceive(&self, r: &Rasterizer, label: u32) -> Result<Perception> {
        self.cameras
            .iter()
            .map(|cam| {
                let image = r.render(&self.scene, cam, Channels::COLOR_OPACITY, &Overrides::default())?;
                let mask = object_mask(r, &self.scene, cam, label)?;
                Ok(ViewFrame {
                    image: image.color.expect("color enabled"),
                    mask,
                })
            })
            .collect()
    }

    pub fn move_toward(&mut self, target: &GraspPose) {
        let cur = Vector3::from(self.robot.position);
        let goal = Vector3::from(target.position);
        let d = goal - cur;
        self.robot.position = if d.norm() <= self.step {
            target.position
        } else {
            (cur + d * (self.step / d.norm())).into()
        };
        self.robot.approach = target.approach;
    }

    pub fn at(&self, target: &GraspPose) -> bool {
        self.robot.position == target.position && self.robot.approach == target.approach
    }

    /// Ground-truth grasp point: the centroid of the object's primitives.
    pub fn true_grasp_point(&self, label: u32) -> Option<Vector3<f64>> {
        self.scene.centroid(&self.scene.indices_with_label(label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulationConfig {
    pub operation: String,
    pub tau_m: f64,
    /// Success radius around the true grasp point.
    pub epsilon_p: f64,
    pub max_ticks: usize,
    pub mode: MotionMode,
    /// Optimiser settings for the refit; configured separately from the
    /// loop itself.
    #[serde(skip)]
    pub fit: FitConfig,
}

impl Default for ManipulationConfig {
    fn default() -> Self {
        Self {
            operation: "grasp".into(),
            tau_m: DEFAULT_TAU_M,
            epsilon_p: 0.02,
            max_ticks: 500,
            mode: MotionMode::Rigid,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success { error: f64 },
    Failure { reason: String },
    /// The operation word has no implementation.
    Unsupported { operation: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulationReport {
    /// One JSON object per executed control-loop line.
    pub events: Vec<Value>,
    pub outcome: Outcome,
    pub refits: usize,
}

impl ManipulationReport {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s += &serde_json::to_string(e).expect("serialisable");
            s.push('\n');
        }
        s
    }
}

struct Log {
    events: Vec<Value>,
}

impl Log {
    fn push(&mut self, tick: usize, line: u32, op: &str, extra: Value) {
        let mut e = json!({ "tick": tick, "line": line, "op": op });
        if let (Some(obj), Value::Object(more)) = (e.as_object_mut(), extra) {
            obj.extend(more);
        }
        self.events.push(e);
    }
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e9).round() / 1e9).collect()
}

/// Runs the query-propose-approach loop against the simulated world.
///
/// The model scene is the robot's belief; it starts as a copy supplied by
/// the caller and is updated by every motion refit. The world supplies
/// oracle segmentations of the queried object.
pub fn run_manipulation(
    r: &Rasterizer,
    world: &mut SimWorld,
    model: &Scene,
    table: &SemanticTable,
    text_feature: &[f64],
    provider: &dyn GraspProvider,
    cfg: &ManipulationConfig,
) -> Result<ManipulationReport> {
    let mut log = Log { events: Vec::new() };
    let mut model = model.clone();
    world.robot.position = world.home;
    world.robot.gripper_closed = false;
    log.push(world.clock, 1, "init", json!({ "home": world.home, "gripper": "open" }));
    log.push(world.clock, 2, "input", json!({ "operation": cfg.operation }));

    let q = query(&model, table, text_feature)?;
    log.push(world.clock, 3, "semantic", json!({ "label": q.label, "primitives": q.indices.len() }));
    let indices = q.indices.clone();

    let cameras = world.cameras.clone();
    let propose = |model: &Scene| provider.propose(&indices, model, &cameras);
    let failure = |log: Log, reason: String, refits| ManipulationReport {
        events: log.events,
        outcome: Outcome::Failure { reason },
        refits,
    };
    let mut target = match propose(&model) {
        Ok(t) => t,
        Err(Error::NoGrasp(msg)) => return Ok(failure(log, format!("no grasp: {msg}"), 0)),
        Err(e) => return Err(e),
    };
    log.push(world.clock, 4, "geometry", json!({ "position": rounded(&target.position), "approach": rounded(&target.approach) }));

    let mut prev = world.perceive(r, q.label)?;
    let mut refits = 0;
    loop {
        let arrived = world.at(&target);
        log.push(world.clock, 5, "while", json!({ "arrived": arrived }));
        if arrived {
            break;
        }
        if world.clock >= cfg.max_ticks {
            return Ok(failure(log, format!("target not reached within {} ticks", cfg.max_ticks), refits));
        }
        world.tick()?;
        let cur = world.perceive(r, q.label)?;
        log.push(world.clock, 6, "perception", json!({ "views": cur.len() }));
        let mut moved = false;
        for (a, b) in prev.iter().zip(&cur) {
            moved |= detect_motion(&a.image, &b.image, &a.mask, cfg.tau_m)?;
        }
        log.push(world.clock, 7, "detect_motion", json!({ "moved": moved }));
        if moved {
            log.push(world.clock, 8, "stop", json!({ "position": rounded(&world.robot.position) }));
            let field = MotionField::new(&model, cfg.mode, cfg.fit.num_bases, vec![0, 1], indices.clone(), cfg.fit.seed)?;
            let obs = Observations {
                frames: vec![Some(prev.clone()), Some(cur.clone())],
            };
            let res = fit(r, &model, &world.cameras, &obs, field, &cfg.fit)?;
            let loss = res.frames.last().map_or(f64::NAN, |f| f.final_loss);
            log.push(world.clock, 9, "motion", json!({ "mode": cfg.mode, "final_loss": (loss * 1e12).round() / 1e12 }));
            model = pose_scene(&model, &res.field, 1)?;
            refits += 1;
            log.push(world.clock, 10, "update", json!({ "moved_primitives": indices.len() }));
            target = match propose(&model) {
                Ok(t) => t,
                Err(Error::NoGrasp(msg)) => return Ok(failure(log, format!("no grasp: {msg}"), refits)),
                Err(e) => return Err(e),
            };
            log.push(world.clock, 11, "geometry", json!({ "position": rounded(&target.position), "approach": rounded(&target.approach) }));
        } else {
            world.move_toward(&target);
            log.push(world.clock, 13, "move", json!({ "position": rounded(&world.robot.position) }));
        }
        prev = cur;
    }

    match cfg.operation.as_str() {
        "grasp" => {
            world.robot.gripper_closed = true;
            log.push(world.clock, 16, "grasp_close", json!({}));
        }
        "place" => {
            world.robot.gripper_closed = false;
            log.push(world.clock, 18, "grasp_open", json!({}));
        }
        other => {
            log.push(world.clock, 20, "raise", json!({ "error": "NotImplementedError", "operation": other }));
            return Ok(ManipulationReport {
                events: log.events,
                outcome: Outcome::Unsupported {
                    operation: other.into(),
                },
                refits,
            });
        }
    }

    let truth = world.true_grasp_point(q.label).ok_or(Error::EmptyObject(q.label))?;
    let error = (Vector3::from(world.robot.position) - truth).norm();
    let outcome = if error <= cfg.epsilon_p {
        Outcome::Success { error }
    } else {
        Outcome::Failure {
            reason: format!("gripper {error:.4} from the object, tolerance {}", cfg.epsilon_p),
        }
    };
    log.push(world.clock, 0, "result", serde_json::to_value(&outcome).expect("serialisable"));
    Ok(ManipulationReport {
        events: log.events,
        outcome,
        refits,
    })
}
