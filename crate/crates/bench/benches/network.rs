use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sdf3d_core::autodiff::Tape;
use sdf3d_core::rng::stream;
use sdf3d_core::{ColorCode, GeneratorNetwork, NetConfig, ShapeCode, Vec3};

fn points(n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            Vec3::new((t * 17.0).sin() * 0.5, (t * 11.0).cos() * 0.5, t - 0.5)
        })
        .collect()
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    for (name, cfg) in [("small", NetConfig::small()), ("full", NetConfig::default())] {
        let net = GeneratorNetwork::new(cfg.clone(), 1).unwrap();
        let mut rng = stream(1, &[0]);
        let zs = ShapeCode::sample(cfg.z_shape, &mut rng);
        let zc = ColorCode::sample(cfg.z_color, &mut rng);
        let pts = points(1024);
        g.bench_function(BenchmarkId::new("eval_sdf_1024", name), |b| b.iter(|| net.eval_sdf(&pts, &zs)));
        g.bench_function(BenchmarkId::new("taped_fwd_bwd_1024", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = net.register(&mut tape, true);
                let out = net.forward_taped(&mut tape, &p, &pts, None, &zs, &zc);
                let loss = tape.mean(out.sdf);
                tape.backward(loss)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
