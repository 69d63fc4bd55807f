//! Object-centric labeling from multi-view masks and open-vocabulary
//! querying against per-object feature vectors.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::projection::{bounds_in_mask, splat_projection, Space};
use crate::raster::{Channels, Overrides, Rasterizer, Upstream};
use crate::scene::{Camera, Scene};

/// Tolerance on the unit norm of stored feature vectors.
pub const FEATURE_NORM_TOL: f64 = 1e-5;

/// Label to object feature map plus canonical-phrase features.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    dim: usize,
    entries: BTreeMap<u32, Vec<f64>>,
    canon: Vec<Vec<f64>>,
}

fn check_unit(v: &[f64], dim: usize, context: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: v.len(),
            context: context.to_string(),
        });
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !((n - 1.0).abs() <= FEATURE_NORM_TOL) {
        return Err(Error::Domain(format!("{context}: feature norm {n} is not 1")));
    }
    Ok(())
}

impl SemanticTable {
    pub fn new(dim: usize, entries: BTreeMap<u32, Vec<f64>>, canon: Vec<Vec<f64>>) -> Result<Self> {
        if canon.is_empty() {
            return Err(Error::Domain("at least one canonical phrase feature is required".into()));
        }
        for (label, v) in &entries {
            if *label == 0 {
                return Err(Error::Domain("label 0 is reserved for background".into()));
            }
            check_unit(v, dim, &format!("object {label}"))?;
        }
        for (i, v) in canon.iter().enumerate() {
            check_unit(v, dim, &format!("canonical phrase {i}"))?;
        }
        Ok(Self { dim, entries, canon })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &BTreeMap<u32, Vec<f64>> {
        &self.entries
    }

    pub fn canon(&self) -> &[Vec<f64>] {
        &self.canon
    }

    pub fn feature(&self, label: u32) -> Option<&[f64]> {
        self.entries.get(&label).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Unit-normalised feature vectors as read from a feature file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub dim: usize,
    pub canon: Vec<Vec<f64>>,
    pub objects: BTreeMap<u32, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pub label: u32,
    pub mask: Mask,
    pub feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewDetections {
    pub camera: String,
    pub objects: Vec<ObjectMask>,
}

/// Per-view object masks, keyed by camera id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionInput {
    pub views: Vec<ViewDetections>,
}

impl DetectionInput {
    /// Resolves camera ids and checks mask shapes, labels and feature
    /// uniqueness. Returns the camera index of every view.
    pub fn validate(&self, cameras: &[Camera]) -> Result<Vec<usize>> {
        let mut seen_feature = BTreeMap::new();
        let mut cam_idx = Vec::with_capacity(self.views.len());
        for view in &self.views {
            let ci = cameras
                .iter()
                .position(|c| c.id == view.camera)
                .ok_or_else(|| Error::InvalidCamera {
                    id: view.camera.clone(),
                    msg: "not present in the camera set".into(),
                })?;
            let cam = &cameras[ci];
            let mut labels = Vec::new();
            for obj in &view.objects {
                if obj.label == 0 {
                    return Err(Error::Domain("detection label 0 is reserved".into()));
                }
                if labels.contains(&obj.label) {
                    return Err(Error::Domain(format!(
                        "label {} appears twice in view {}",
                        obj.label, view.camera
                    )));
                }
                labels.push(obj.label);
                if obj.mask.width != cam.width || obj.mask.height != cam.height {
                    return Err(Error::shape(
                        format!("{}x{} mask for camera {}", cam.width, cam.height, cam.id),
                        format!("{}x{}", obj.mask.width, obj.mask.height),
                    ));
                }
                if obj.feature.is_some() && seen_feature.insert(obj.label, ()).is_some() {
                    return Err(Error::Domain(format!(
                        "label {} has more than one feature vector",
                        obj.label
                    )));
                }
            }
            cam_idx.push(ci);
        }
        Ok(cam_idx)
    }

    pub fn labels(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self
            .views
            .iter()
            .flat_map(|v| v.objects.iter().map(|o| o.label))
            .collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn is_empty(&self) -> bool {
        self.views.iter().all(|v| v.objects.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Gaussian level set bounded by the containment box (1 = unit level
    /// set).
    pub bounds_sigma: f64,
    /// Points sampled by the containment test, see [`bounds_in_mask`].
    pub mask_samples: usize,
    /// Minimum foreground blend contribution for a primitive to count as
    /// visible.
    pub tau_g: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            bounds_sigma: 1.0,
            mask_samples: 5,
            tau_g: 1e-4,
        }
    }
}

/// Primitives with a valid projection whose bounds lie on the mask.
pub fn candidate_primitives(
    scene: &Scene,
    cam: &Camera,
    mask: &Mask,
    bounds_sigma: f64,
    samples: usize,
) -> Result<Vec<usize>> {
    if mask.width != cam.width || mask.height != cam.height {
        return Err(Error::shape(
            format!("{}x{}", cam.width, cam.height),
            format!("{}x{}", mask.width, mask.height),
        ));
    }
    Ok(scene
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let ps = splat_projection(p, cam, Space::Pixel, bounds_sigma);
            (ps.valid && bounds_in_mask(&ps, mask, samples)).then_some(i)
        })
        .collect())
}

/// Foreground blend contribution of every primitive.
///
/// The scene is rendered with every color set to black and compared with a
/// white target on the mask foreground by a summed L1 loss. The magnitude of
/// the loss gradient with respect to a primitive's color is its total blend
/// weight over foreground pixels.
pub fn foreground_scores(r: &Rasterizer, scene: &Scene, cam: &Camera, mask: &Mask) -> Result<Vec<f64>> {
    let black = Overrides::black();
    let (_, record) = r.forward(scene, cam, Channels::COLOR_OPACITY, &black)?;
    // d/dC of sum_fg |C - 1| with C <= 1 is -1 on the foreground
    let upstream: Vec<[f64; 3]> = mask
        .data
        .iter()
        .map(|&fg| if fg { [-1.0, 0.0, 0.0] } else { [0.0; 3] })
        .collect();
    let upstream = Image::from_vec(mask.width, mask.height, upstream)?;
    let grads = r.backward(
        scene,
        cam,
        &black,
        &record,
        &Upstream {
            color: Some(&upstream),
            opacity: None,
        },
    )?;
    Ok(grads.d_color.iter().map(|g| g[0].abs()).collect())
}

/// Candidates that are visible on the mask foreground.
pub fn foreground_filter(
    r: &Rasterizer,
    scene: &Scene,
    cam: &Camera,
    mask: &Mask,
    candidates: &[usize],
    tau_g: f64,
) -> Result<Vec<usize>> {
    let scores = foreground_scores(r, scene, cam, mask)?;
    Ok(candidates.iter().copied().filter(|&i| scores[i] > tau_g).collect())
}

/// Per-label bookkeeping produced by [`distill`].
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct DistillReport {
    /// Number of primitives assigned to each label.
    pub counts: BTreeMap<u32, usize>,
    /// Primitives claimed by more than one label, resolved by contribution.
    pub conflicts: usize,
}

/// Labels primitives from multi-view detections and builds the semantic
/// table.
///
/// A primitive joins an object when its bounds lie on the object's mask in
/// every view that has one and it is visible on the mask foreground in at
/// least one of them. Unassigned primitives get label 0. Objects without a
/// feature vector in the detections fall back to `features.objects`.
pub fn distill(
    r: &Rasterizer,
    scene: &Scene,
    cameras: &[Camera],
    detections: &DetectionInput,
    features: &FeatureSet,
    cfg: &DistillConfig,
) -> Result<(Scene, SemanticTable, DistillReport)> {
    let cam_idx = detections.validate(cameras)?;
    let labels = detections.labels();

    let mut entries = BTreeMap::new();
    for &label in &labels {
        let inline = detections
            .views
            .iter()
            .flat_map(|v| &v.objects)
            .find(|o| o.label == label)
            .and_then(|o| o.feature.clone());
        let f = inline
            .or_else(|| features.objects.get(&label).cloned())
            .ok_or_else(|| Error::Domain(format!("no feature vector for label {label}")))?;
        entries.insert(label, f);
    }
    let table = SemanticTable::new(features.dim, entries, features.canon.clone())?;

    if detections.is_empty() {
        log::warn!("no detections: labels left unchanged");
        return Ok((scene.clone(), table, DistillReport::default()));
    }

    // (view, object) pairs evaluated in parallel, reduced in input order
    let jobs: Vec<(usize, usize)> = detections
        .views
        .iter()
        .enumerate()
        .flat_map(|(v, view)| (0..view.objects.len()).map(move |o| (v, o)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(v, o)| {
            let cam = &cameras[cam_idx[v]];
            let obj = &detections.views[v].objects[o];
            let cand = candidate_primitives(scene, cam, &obj.mask, cfg.bounds_sigma, cfg.mask_samples)?;
            let scores = if cand.is_empty() {
                vec![0.0; scene.len()]
            } else {
                foreground_scores(r, scene, cam, &obj.mask)?
            };
            Ok((obj.label, cand, scores))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = scene.len();
    let mut assigned: Vec<Option<(u32, f64)>> = vec![None; n];
    let mut conflicts = 0;
    for &label in &labels {
        let mut views_seen = 0usize;
        let mut contained = vec![0usize; n];
        let mut visible = vec![false; n];
        let mut contribution = vec![0.0; n];
        for (l, cand, scores) in &results {
            if *l != label {
                continue;
            }
            views_seen += 1;
            for &i in cand {
                contained[i] += 1;
                contribution[i] += scores[i];
                if scores[i] > cfg.tau_g {
                    visible[i] = true;
                }
            }
        }
        for i in 0..n {
            if views_seen == 0 || contained[i] != views_seen || !visible[i] {
                continue;
            }
            match assigned[i] {
                None => assigned[i] = Some((label, contribution[i])),
                Some((other, c)) => {
                    conflicts += 1;
                    if contribution[i] == c {
                        return Err(Error::ConflictingLabels {
                            index: i,
                            a: other,
                            b: label,
                            contribution: c,
                        });
                    }
                    if contribution[i] > c {
                        assigned[i] = Some((label, contribution[i]));
                    }
                }
            }
        }
    }

    let mut out = scene.clone();
    let mut report = DistillReport {
        conflicts,
        ..Default::default()
    };
    for (p, a) in out.primitives.iter_mut().zip(&assigned) {
        p.label = a.map_or(0, |(l, _)| l);
        if let Some((l, _)) = a {
            *report.counts.entry(*l).or_default() += 1;
        }
    }
    Ok((out, table, report))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relevancy of an object to a text query against the canonical phrases:
/// the smallest pairwise softmax `e^a / (e^a + e^b_i)` with `a = txt . obj`
/// and `b_i = canon_i . obj`.
pub fn relevancy(txt: &[f64], obj: &[f64], canon: &[Vec<f64>]) -> Result<f64> {
    let dim = obj.len();
    if txt.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: txt.len(),
            context: "text feature".into(),
        });
    }
    if canon.is_empty() {
        return Err(Error::Domain("at least one canonical phrase feature is required".into()));
    }
    let a = dot(txt, obj);
    let mut s = f64::INFINITY;
    for c in canon {
        if c.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: c.len(),
                context: "canonical phrase".into(),
            });
        }
        // logistic form of the pairwise softmax, stable for large gaps
        s = s.min(1.0 / (1.0 + (dot(c, obj) - a).exp()));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QueryResult {
    pub label: u32,
    pub indices: Vec<usize>,
    /// Relevancy of every label, in ascending label order.
    pub scores: Vec<(u32, f64)>,
}

/// Picks the most relevant label (smallest label on ties) and returns its
/// primitives.
pub fn query(scene: &Scene, table: &SemanticTable, txt: &[f64]) -> Result<QueryResult> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let scores = table
        .entries
        .iter()
        .map(|(&l, f)| Ok((l, relevancy(txt, f, &table.canon)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = scores[0];
    for &(l, s) in &scores[1..] {
        if s > best.1 {
            best = (l, s);
        }
    }
    Ok(QueryResult {
        label: best.0,
        indices: scene.indices_with_label(best.0),
        scores,
    })
}
