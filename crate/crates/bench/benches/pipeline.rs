use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msgfield::motion::{fit, sample_frames};
use msgfield::raster::Upstream;
use msgfield::semantics::distill;
use msgfield::synth::{generate, two_object_spec, MotionProgram};
use msgfield::{Channels, DistillConfig, FitConfig, Image, MotionField, MotionMode, Overrides, Rasterizer};
use msgfield_bench::{distill_fixture, random_fixture};

fn render(c: &mut Criterion) {
    let r = Rasterizer::default();
    let mut g = c.benchmark_group("render");
    for n in [50, 200, 1000] {
        let (scene, cams) = random_fixture(n, 1);
        g.bench_with_input(BenchmarkId::new("tiled", n), &n, |b, _| {
            b.iter(|| r.render(&scene, &cams[0], Channels::ALL, &Overrides::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter(|| r.render_naive(&scene, &cams[0], Channels::ALL, &Overrides::default()).unwrap())
        });
    }
    g.finish();
}

fn backward(c: &mut Criterion) {
    let r = Rasterizer::default();
    let (scene, cams) = random_fixture(200, 2);
    let (_, rec) = r.forward(&scene, &cams[0], Channels::COLOR_OPACITY, &Overrides::default()).unwrap();
    let up_color = Image::filled(64, 64, [0.1, -0.2, 0.05]);
    let up_opacity = Image::filled(64, 64, 0.3);
    c.bench_function("backward/200", |b| {
        b.iter(|| {
            r.backward(
                &scene,
                &cams[0],
                &Overrides::default(),
                &rec,
                &Upstream {
                    color: Some(&up_color),
                    opacity: Some(&up_opacity),
                },
            )
            .unwrap()
        })
    });
}

fn distillation(c: &mut Criterion) {
    let r = Rasterizer::default();
    let (out, det, feats) = distill_fixture(0);
    c.bench_function("distill/two-object", |b| {
        b.iter(|| distill(&r, &out.scene, &out.cameras, &det, &feats, &DistillConfig::default()).unwrap())
    });
}

fn fit_steps(c: &mut Criterion) {
    let r = Rasterizer::default();
    let mut spec = two_object_spec(0);
    spec.frames = 2;
    spec.objects[0].motion = MotionProgram::Rigid {
        translation: [0.05, 0.0, 0.0],
        rotation_deg: 3.0,
        axis: [0.0, 1.0, 0.0],
    };
    let out = generate(&spec).unwrap();
    let obs = out.observations(&[1]);
    let mut g = c.benchmark_group("fit-10-steps");
    g.sample_size(10);
    for mode in [MotionMode::Rigid, MotionMode::Nonrigid] {
        let cfg = FitConfig {
            iterations: Some(10),
            ..FitConfig::default()
        };
        let field =
            MotionField::new(&out.scene, mode, cfg.num_bases, sample_frames(2, 1), out.scene.dynamic_indices(), 0).unwrap();
        g.bench_function(format!("{mode:?}").to_lowercase(), |b| {
            b.iter(|| fit(&r, &out.scene, &out.cameras, &obs, field.clone(), &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, render, backward, distillation, fit_steps);
criterion_main!(benches);
