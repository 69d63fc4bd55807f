//! Fixtures shared by the benchmarks.

use msgfield::io::orthogonal_features;
use msgfield::semantics::{ObjectMask, ViewDetections};
use msgfield::synth::{camera_pair, generate, random_scene, seeded_rng, two_object_spec};
use msgfield::{Camera, DetectionInput, FeatureSet, Scene, SynthOutput};

/// Random splats seen by two 64x64 cameras.
pub fn random_fixture(n: usize, seed: u64) -> (Scene, [Camera; 2]) {
    (random_scene(&mut seeded_rng(seed), n, (0.02, 0.2)), camera_pair(64))
}

/// The two-object dataset with oracle detections at frame 0.
pub fn distill_fixture(seed: u64) -> (SynthOutput, DetectionInput, FeatureSet) {
    let out = generate(&two_object_spec(seed)).expect("valid preset");
    let det = DetectionInput {
        views: out
            .cameras
            .iter()
            .zip(&out.masks[0])
            .map(|(cam, masks)| ViewDetections {
                camera: cam.id.clone(),
                objects: masks
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
    (out, det, orthogonal_features(&[1, 2]))
}
