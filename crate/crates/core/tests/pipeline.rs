use lcdh::datamodel::{synth_generate, SynthConfig};
use lcdh::pipeline::{run_bench, BenchConfig};
use lcdh::similarity::AffinityMode;
use lcdh::student::{online_train, TrainConfig};
use lcdh::teacher::{label_fallback, train_teacher, DistillSource};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn accumulated_map_does_not_drop_over_chunks() {
    let reports: Vec<_> = (1..=5)
        .map(|s| run_bench(&BenchConfig::with_seed(s)).unwrap())
        .collect();
    let chunks = reports[0].per_chunk.len();
    let series = |f: fn(&lcdh::pipeline::CrossModalMap) -> f64| -> Vec<f64> {
        (0..chunks)
            .map(|t| median(reports.iter().map(|r| f(&r.per_chunk[t])).collect()))
            .collect()
    };
    for s in [series(|m| m.i2t), series(|m| m.t2i)] {
        assert!(s.windows(2).all(|w| w[1] >= w[0]), "{s:?}");
    }
}

#[test]
fn student_without_teacher_features_falls_back_to_labels() {
    let cfg = SynthConfig {
        n_online: 64,
        chunks: 2,
        ..SynthConfig::default()
    };
    let data = synth_generate::<f64>(&cfg).unwrap();
    let mut online = data.online.clone();
    online.teacher = None;
    let teacher = train_teacher(&data.offline, &TrainConfig::default().teacher_config()).unwrap();
    let tc = TrainConfig {
        epochs_per_chunk: 5,
        inner_alternations: 2,
        ..TrainConfig::default()
    };
    let out = online_train(&online, 32, Some(&teacher.params), 0.0, &tc, None).unwrap();
    assert!(out
        .chunks
        .iter()
        .all(|c| c.source == DistillSource::LabelFallback));
    let with = online_train(&data.online, 32, Some(&teacher.params), 0.0, &tc, None).unwrap();
    assert!(with
        .chunks
        .iter()
        .all(|c| c.source == DistillSource::Teacher));
    assert_eq!(out.db_image_codes.rows(), 64);
    let fallback =
        label_fallback::<f64>(&online.labels.row_block(0, 32), AffinityMode::RowNormalized)
            .unwrap();
    assert_eq!(fallback.n(), 32);
}

#[test]
fn f32_pipeline_runs() {
    let cfg = SynthConfig {
        n_offline: 64,
        n_online: 64,
        n_query: 16,
        chunks: 2,
        ..SynthConfig::default()
    };
    let data = synth_generate::<f32>(&cfg).unwrap();
    let tc = TrainConfig {
        bits: 16,
        epochs_teacher: 20,
        epochs_per_chunk: 10,
        inner_alternations: 2,
        ..TrainConfig::default()
    };
    let teacher = train_teacher(&data.offline, &tc.teacher_config()).unwrap();
    assert!(teacher.trace.windows(2).all(|w| w[1] <= w[0]));
    let out = online_train(&data.online, 32, Some(&teacher.params), 0.0f32, &tc, None).unwrap();
    assert_eq!(out.db_text_codes.shape(), (64, 16));
    for c in &out.chunks {
        assert!(c.epoch_trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
