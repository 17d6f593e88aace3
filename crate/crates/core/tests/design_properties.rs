use bof4::codebook::{
    compare_codebooks, fixtures, lloyd_design, lloyd_design_traced, CentroidMethod, CodebookSpec, DesignSource,
    Metric,
};
use bof4::dist::{BlockMaxModel, NormalizationMode, Uniform};
use bof4::metrics::{run_sweep, SweepSource};
use bof4::Error;

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn asymmetry(levels: &[f64]) -> f64 {
    let l = levels.len();
    (0..l).map(|k| (levels[k] + levels[l - 1 - k]).abs()).fold(0.0, f64::max)
}

#[test]
fn symmetric_constraints_give_symmetric_levels() {
    let spec = CodebookSpec::bof4(Metric::Mse, 64).with_constraints(vec![-1.0, 1.0]);
    let cb = lloyd_design(&spec, DesignSource::gaussian()).unwrap();
    assert!(asymmetry(&cb.levels) < 1e-6, "{:?}", cb.levels);

    let spec = CodebookSpec::bof4(Metric::Mae, 64).with_constraints(vec![-1.0, 1.0]);
    let cb = lloyd_design(&spec, DesignSource::gaussian()).unwrap();
    assert!(asymmetry(&cb.levels) < 1e-6, "{:?}", cb.levels);

    let spec = CodebookSpec::bof4(Metric::Mse, 64)
        .with_constraints(vec![-1.0, 1.0])
        .with_method(CentroidMethod::Empirical)
        .with_samples(1 << 22, 11);
    let cb = lloyd_design(&spec, DesignSource::gaussian()).unwrap();
    assert!(asymmetry(&cb.levels) < 5e-3, "{:?}", cb.levels);
}

#[test]
fn theoretical_objective_never_increases() {
    for (mode, metric) in [
        (NormalizationMode::Absolute, Metric::Mse),
        (NormalizationMode::Signed, Metric::Mae),
    ] {
        let spec = CodebookSpec::new(mode, metric, 64);
        let (cb, trace) = lloyd_design_traced(&spec, DesignSource::gaussian()).unwrap();
        assert!(cb.provenance.converged);
        for w in trace.objectives.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn theoretical_designs_track_the_tables() {
    let cases = [
        (CodebookSpec::bof4(Metric::Mae, 64), &fixtures::BOF4_MAE_64),
        (CodebookSpec::bof4s(Metric::Mae, 64), &fixtures::BOF4S_MAE_64),
        (CodebookSpec::bof4s(Metric::Mse, 128), &fixtures::BOF4S_MSE_128),
    ];
    for (spec, table) in cases {
        let cb = lloyd_design(&spec, DesignSource::gaussian()).unwrap();
        let dev = max_dev(&cb.levels, table);
        assert!(dev < 2e-3, "{}: {dev}", cb.name);
        assert!(cb.levels.contains(&0.0) && cb.levels[15] == 1.0);
    }
}

#[test]
fn codebook_comparison() {
    let model = BlockMaxModel::gaussian(64).unwrap();
    let a = fixtures::builtin("bof4-mse", 64).unwrap().unwrap();
    assert_eq!(compare_codebooks(&a, &a, &model, NormalizationMode::Absolute).unwrap(), f64::NEG_INFINITY);

    let mut t = a.clone();
    t.levels = fixtures::BOF4_MSE_64_THEORETICAL.to_vec();
    let db = compare_codebooks(&t, &a, &model, NormalizationMode::Absolute).unwrap();
    assert!(db < -50.0 && db > -80.0, "{db}");

    let short = lloyd_design(
        &CodebookSpec::bof4(Metric::Mse, 64).with_num_levels(8),
        DesignSource::gaussian(),
    )
    .unwrap();
    assert!(matches!(
        compare_codebooks(&a, &short, &model, NormalizationMode::Absolute),
        Err(Error::IncompatibleCodebooks(_))
    ));
}

#[test]
fn other_distributions_design_too() {
    let model = Uniform::new(1.0);
    let spec = CodebookSpec::bof4(Metric::Mse, 16);
    let cb = lloyd_design(&spec, DesignSource::Model(&model)).unwrap();
    assert_eq!(cb.num_levels(), 16);
    // uniform weights normalize to something close to uniform on [-1, 1]
    let gaps: Vec<f64> = cb.levels.windows(2).map(|w| w[1] - w[0]).collect();
    let (lo, hi) = gaps.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &g| (a.min(g), b.max(g)));
    assert!(hi / lo < 1.6, "{gaps:?}");
}

#[test]
fn designs_beat_their_baselines() {
    let sources: Vec<SweepSource> =
        ["nf4", "af4", "bof4-mae", "bof4-mse", "bof4s-mae", "bof4s-mse"].iter().map(|n| SweepSource::builtin(n)).collect();
    let report = run_sweep(&sources, &[16, 64, 256, 1024], 1 << 20, 3, None).unwrap();
    let row = |n: &str, i: usize| report.get(n, i).unwrap();
    for i in [16, 64, 256] {
        assert!(row("bof4-mae", i).mae <= row("af4", i).mae, "I={i}");
        assert!(row("bof4s-mae", i).mae <= row("af4", i).mae, "I={i}");
    }
    for i in [16, 64, 256, 1024] {
        assert!(row("bof4-mse", i).mse <= row("nf4", i).mse, "I={i}");
        assert!(row("bof4s-mse", i).mse <= row("nf4", i).mse, "I={i}");
    }
    assert!(row("af4", 1024).mse > row("nf4", 1024).mse);
}
