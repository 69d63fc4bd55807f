//! Ready-made synthetic datasets used by `msgfield synth --preset` and the
//! acceptance suite.

use clap::ValueEnum;
use msgfield::synth::{two_object_spec, MotionProgram, ObjectSpec, RigSpec, Shape};
use msgfield::{FitConfig, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Two static labeled objects in front of a backdrop.
    TwoObject,
    /// A box translating 0.1 and turning 5 degrees per frame, 5 frames.
    Rigid,
    /// A hinge whose flap swings 10 degrees per frame, 3 frames.
    Hinge,
    /// A striped box turning 30 degrees and shifting 0.3 in one frame.
    Ablation,
}

impl Preset {
    pub fn spec(self, seed: u64) -> SynthSpec {
        match self {
            Preset::TwoObject => two_object_spec(seed),
            Preset::Rigid => rigid(seed),
            Preset::Hinge => hinge(seed),
            Preset::Ablation => ablation(seed),
        }
    }
}

fn moving_box(translation: [f64; 3], rotation_deg: f64, axis: [f64; 3], stripes: Option<f64>, spread: f64) -> ObjectSpec {
    ObjectSpec {
        shape: Shape::Box,
        count: 144,
        color: [0.8, 0.3, 0.2],
        label: 1,
        center: [-0.2, 0.0, 0.0],
        size: 0.4,
        opacity: 0.98,
        motion: MotionProgram::Rigid {
            translation,
            rotation_deg,
            axis,
        },
        stripe_width: stripes,
        spread,
    }
}

pub fn rigid(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        objects: vec![moving_box([0.1, 0.0, 0.0], 5.0, [0.3, 0.5, 1.0], None, 1.5)],
        background: 300,
        rig: RigSpec::default(),
        frames: 5,
    }
}

pub fn hinge(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        objects: vec![ObjectSpec {
            shape: Shape::Hinge,
            count: 300,
            color: [0.2, 0.7, 0.3],
            label: 1,
            center: [0.0; 3],
            size: 0.6,
            opacity: 0.98,
            motion: MotionProgram::Hinge { angle_deg: 10.0 },
            stripe_width: None,
            spread: 0.65,
        }],
        background: 300,
        rig: RigSpec::default(),
        frames: 3,
    }
}

pub fn ablation(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        objects: vec![moving_box([0.3, 0.0, 0.0], 30.0, [0.0, 0.0, 1.0], Some(0.05), 0.65)],
        background: 300,
        rig: RigSpec::default(),
        frames: 2,
    }
}

/// Fit settings for the ablation preset: a single large rotation needs a
/// faster quaternion step than the default.
pub fn ablation_fit(seed: u64) -> FitConfig {
    FitConfig {
        lr_quaternion: 5e-3,
        seed,
        ..FitConfig::default()
    }
}
