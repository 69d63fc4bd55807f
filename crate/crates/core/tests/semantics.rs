use std::collections::BTreeMap;

use msgfield::semantics::{
    candidate_primitives, distill, foreground_filter, query, DetectionInput, DistillConfig, FeatureSet, ObjectMask,
    ViewDetections,
};
use msgfield::synth::{generate, two_object_spec, SynthOutput};
use msgfield::{Error, Rasterizer, Scene};

fn detections(out: &SynthOutput) -> DetectionInput {
    DetectionInput {
        views: out
            .cameras
            .iter()
            .enumerate()
            .map(|(c, cam)| ViewDetections {
                camera: cam.id.clone(),
                objects: out.masks[0][c]
                    .iter()
                    .map(|(label, mask)| ObjectMask { label: *label, mask: mask.clone(), feature: None })
                    .collect(),
            })
            .collect(),
    }
}

fn features() -> FeatureSet {
    FeatureSet {
        dim: 4,
        canon: vec![vec![0.0, 0.0, 0.0, 1.0]],
        objects: BTreeMap::from([(1, vec![1.0, 0.0, 0.0, 0.0]), (2, vec![0.0, 1.0, 0.0, 0.0])]),
    }
}

fn unlabeled(scene: &Scene) -> Scene {
    let mut s = scene.clone();
    s.primitives.iter_mut().for_each(|p| p.label = 0);
    s
}

#[test]
fn distill_recovers_synthetic_labels() {
    let r = Rasterizer::default();
    for seed in 0..3 {
        let out = generate(&two_object_spec(seed)).unwrap();
        let (labeled, table, report) =
            distill(&r, &unlabeled(&out.scene), &out.cameras, &detections(&out), &features(), &DistillConfig::default())
                .unwrap();
        let mut leaked = 0;
        let mut background = 0;
        for (gt, got) in out.scene.primitives.iter().zip(&labeled.primitives) {
            if gt.label == 0 {
                background += 1;
                leaked += usize::from(got.label != 0);
            } else {
                assert_eq!(got.label, gt.label, "seed {seed}");
            }
        }
        assert!(leaked * 100 <= background, "seed {seed}: {leaked}/{background} background primitives labeled");
        assert_eq!(table.entries().len(), 2);
        assert_eq!(report.conflicts, 0);

        // the query for object 2's feature returns exactly object 2
        let q = query(&labeled, &table, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.label, 2);
        let mut expected = out.scene.indices_with_label(2);
        expected.sort_unstable();
        assert_eq!(q.indices, expected);
    }
}

#[test]
fn candidates_cover_cluster_and_hidden_background() {
    // containment keeps the object and the wall behind it; visibility drops
    // the wall
    let r = Rasterizer::default();
    let out = generate(&two_object_spec(4)).unwrap();
    let cam = &out.cameras[0];
    let mask = &out.masks[0][0][0].1;
    let cand = candidate_primitives(&out.scene, cam, mask, 1.0, 5).unwrap();
    for i in out.scene.indices_with_label(1) {
        assert!(cand.contains(&i));
    }
    let hidden: Vec<usize> = cand.iter().copied().filter(|&i| out.scene.primitives[i].label == 0).collect();
    assert!(!hidden.is_empty());
    let visible = foreground_filter(&r, &out.scene, cam, mask, &cand, 1e-4).unwrap();
    let leaked = visible.iter().filter(|&&i| out.scene.primitives[i].label == 0).count();
    assert!(leaked < hidden.len());
    assert!(cand.iter().all(|i| out.scene.primitives[*i].label != 2));
}

#[test]
fn empty_detections_leave_labels() {
    let r = Rasterizer::default();
    let out = generate(&two_object_spec(0)).unwrap();
    let empty = DetectionInput { views: vec![] };
    let (labeled, table, _) =
        distill(&r, &out.scene, &out.cameras, &empty, &features(), &DistillConfig::default()).unwrap();
    assert_eq!(labeled, out.scene);
    assert!(table.is_empty());
}

#[test]
fn single_view_distill_is_candidates_and_visible() {
    let r = Rasterizer::default();
    let out = generate(&two_object_spec(2)).unwrap();
    let mut det = detections(&out);
    det.views.truncate(1);
    det.views[0].objects.truncate(1);
    let scene = unlabeled(&out.scene);
    let (labeled, _, _) = distill(&r, &scene, &out.cameras, &det, &features(), &DistillConfig::default()).unwrap();
    let mask = &det.views[0].objects[0].mask;
    let cand = candidate_primitives(&scene, &out.cameras[0], mask, 1.0, 5).unwrap();
    let expected = foreground_filter(&r, &scene, &out.cameras[0], mask, &cand, 1e-4).unwrap();
    let got: Vec<usize> = (0..scene.len()).filter(|&i| labeled.primitives[i].label == 1).collect();
    assert_eq!(got, expected);
}

#[test]
fn identical_masks_with_equal_contribution_conflict() {
    // two labels detected with the same mask claim the same primitives with
    // identical contributions
    let r = Rasterizer::default();
    let out = generate(&two_object_spec(1)).unwrap();
    let mut det = detections(&out);
    for v in &mut det.views {
        let m = v.objects[0].mask.clone();
        v.objects[1].mask = m;
    }
    let err = distill(&r, &unlabeled(&out.scene), &out.cameras, &det, &features(), &DistillConfig::default());
    assert!(matches!(err, Err(Error::ConflictingLabels { .. })));
}
