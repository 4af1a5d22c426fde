use std::hint::black_box;

use aerorom::aero::{evaluate_design, SolverSettings};
use aerorom::cnn::{Architecture, CnnModel, Target};
use aerorom::dataset::sample_designs;
use aerorom::exec::Exec;
use aerorom::geometry::{loft_design, BoundsConfig};
use aerorom::levelset::{distance_field_of, GridSpec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn distance_field(c: &mut Criterion) {
    let design = &sample_designs(1, &BoundsConfig::default(), 1).unwrap()[0];
    let wing = loft_design(design).unwrap();
    let spec = GridSpec::default();
    let mut g = c.benchmark_group("distance_field_48x16x32");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| distance_field_of(black_box(&wing), &spec, exec).unwrap())
        });
    }
    g.finish();
}

fn cnn_batch(c: &mut Criterion) {
    let spec = GridSpec::default();
    let model = CnnModel::new(&Architecture::default(), spec.dims, Target::Cl, 1).unwrap();
    let fields: Vec<Vec<f64>> = sample_designs(4, &BoundsConfig::default(), 2)
        .unwrap()
        .iter()
        .map(|u| distance_field_of(&loft_design(u).unwrap(), &spec, Exec::Sequential).unwrap().phi)
        .collect();
    let batch: Vec<&[f64]> = fields.iter().map(Vec::as_slice).collect();
    let targets = vec![0.0; batch.len()];
    let mut g = c.benchmark_group("cnn_batch_of_4");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::new("inference", name), |b| {
            b.iter(|| model.predict_fields(black_box(&batch), exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let pass = model.forward_train(black_box(&batch), exec).unwrap();
                model.backward(&batch, &pass, &targets, exec).unwrap()
            })
        });
    }
    g.finish();
}

fn labeling(c: &mut Criterion) {
    let designs = sample_designs(8, &BoundsConfig::default(), 3).unwrap();
    let settings = SolverSettings::default();
    let mut g = c.benchmark_group("fom_labeling_8_designs");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map_slice(black_box(&designs), |u| evaluate_design(u, &settings).unwrap().cdi()))
        });
    }
    g.finish();
}

criterion_group!(benches, distance_field, cnn_batch, labeling);
criterion_main!(benches);
