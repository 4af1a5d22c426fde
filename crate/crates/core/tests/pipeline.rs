use aerorom::aero::{evaluate_design, SolverSettings};
use aerorom::cnn::train::{train, TrainConfig};
use aerorom::cnn::{Architecture, CnnModel, Target};
use aerorom::dataset::{generate_dataset, sample_designs, split_dataset, Campaign, CampaignManifest, Split};
use aerorom::exec::Exec;
use aerorom::geometry::{design_bounds, BoundsConfig, DesignVector};
use aerorom::levelset::GridSpec;
use aerorom::optimizer::{fom_verify, multi_start, FomSurrogate, OptStatus, WingProblem, WingSettings};

fn mini_campaign() -> Campaign {
    Campaign {
        bounds: BoundsConfig::default(),
        solver: SolverSettings {
            panels: 60,
            stations: 8,
            coeffs: 8,
        },
        grid: GridSpec {
            dims: [8, 5, 6],
            lower: [-1.0, 0.0, -0.5],
            upper: [3.0, 2.0, 0.5],
        },
        seed: 3,
    }
}

fn build(dir: &std::path::Path, exec: Exec) -> CampaignManifest {
    let c = mini_campaign();
    let designs = sample_designs(12, &c.bounds, 11).unwrap();
    let mut m = generate_dataset(dir, &designs, &c, exec, &|_| {}).unwrap();
    split_dataset(&mut m, (8, 2, 2), 5).unwrap();
    m
}

#[test]
fn dataset_and_training_are_reproducible_across_policies() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build(a.path(), Exec::Parallel);
    let mb = build(b.path(), Exec::Sequential);
    assert_eq!(ma, mb);
    assert_eq!(ma.counts.failed, 0);
    for r in &ma.records {
        let p = r.levelset_path.as_ref().unwrap();
        assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
    }

    let arch = Architecture {
        kernels: vec![3, 2],
        channels: vec![2, 3],
    };
    let cfg = TrainConfig {
        initial_lr: 1e-3,
        lr_decay: 0.9,
        epochs: 3,
        batch_size: 4,
        seed: 2,
    };
    let mut models = Vec::new();
    for (dir, m, exec) in [(a.path(), &ma, Exec::Parallel), (b.path(), &mb, Exec::Sequential)] {
        let tr = m.samples(dir, Split::Train, Target::Cdi).unwrap();
        let va = m.samples(dir, Split::Val, Target::Cdi).unwrap();
        let mut model = CnnModel::new(&arch, m.grid.dims, Target::Cdi, 9).unwrap();
        train(&mut model, &tr, &va, &cfg, exec, &mut |_| {}).unwrap();
        models.push(model);
    }
    assert_eq!(models[0], models[1]);
}

#[test]
fn wing_optimization_with_full_order_model_as_surrogate() {
    let solver = SolverSettings {
        panels: 60,
        stations: 10,
        coeffs: 10,
    };
    let fom = FomSurrogate(solver);
    let mut settings = WingSettings::default();
    settings.sqp.max_iter = 4;
    let problem = WingProblem::new(&fom, &BoundsConfig::default(), settings.clone()).unwrap();
    let (lo, hi) = design_bounds();
    let starts: Vec<DesignVector> = [0.3, 0.6]
        .iter()
        .map(|t| DesignVector::new(lo.as_slice().iter().zip(hi.as_slice()).map(|(l, h)| l + t * (h - l)).collect()).unwrap())
        .collect();
    let report = multi_start(&problem, &starts, Exec::Parallel, &|_| {});
    for run in &report.runs {
        let r = run.result.as_ref().expect("run completes");
        // iterates stay inside the normalized box
        for h in &r.history {
            assert!(h.x.iter().all(|z| (0.0..=1.0).contains(z)));
        }
        if r.status == OptStatus::Converged {
            assert!(r.max_violation() <= 1e-6 && r.kkt_residual <= 1e-6);
        }
    }

    // with the solver itself as the surrogate the verification agrees exactly
    let mut forced = report.clone();
    forced.converged = (0..forced.runs.len()).collect();
    let v = fom_verify(&forced, &solver, &settings, Exec::Sequential);
    assert!(v.failures.is_empty());
    for d in &v.designs {
        assert_eq!(d.cdi_surrogate, d.cdi_fom);
        assert_eq!(d.cl_surrogate, d.cl_fom);
        let direct = evaluate_design(&DesignVector::new(report.runs[d.start].u_final.clone().unwrap()).unwrap(), &solver).unwrap();
        assert_eq!(direct.cdi(), d.cdi_fom);
    }
    if v.designs.len() >= 2 {
        assert!((v.r2_cdi.unwrap() - 1.0).abs() < 1e-12);
    }
}
