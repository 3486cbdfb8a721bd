//! Seeded end-to-end run: synthesize, train the teacher offline, stream the
//! online split through the student, and score cross-modal retrieval.

use crate::datamodel::{synth_generate, LabelMatrix, SynthConfig, SynthData};
use crate::error::Result;
use crate::evalmetrics::{mean_average_precision, MapOptions};
use crate::numkernel::{Mat, SeededRng};
use crate::retrieval::PackedCodes;
use crate::student::{
    encode, online_train, teacher_term, ChunkResult, LabelNoise, Modality, StudentParams,
    TrainConfig,
};
use crate::teacher::{teacher_view, train_teacher};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Fraction of each chunk's labels replaced before supervision is built.
    pub label_noise: f64,
}

impl BenchConfig {
    pub fn with_seed(seed: u64) -> Self {
        BenchConfig {
            synth: SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            label_noise: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossModalMap {
    /// Image queries against text codes.
    pub i2t: f64,
    /// Text queries against image codes.
    pub t2i: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub map: CrossModalMap,
    pub random_baseline: CrossModalMap,
    /// Accumulated-database mAP after each chunk.
    pub per_chunk: Vec<CrossModalMap>,
    /// Weighted teacher objective per epoch (initial value first).
    pub teacher_trace: Vec<f64>,
    /// Unweighted teacher loss on the offline split.
    pub teacher_loss: f64,
    pub chunks: Vec<ChunkResult<f64>>,
    pub student: StudentParams<f64>,
}

/// Both retrieval directions; database codes and labels share row order.
pub fn cross_modal_map(
    query_img: &Mat<f64>,
    query_txt: &Mat<f64>,
    db_img: &Mat<f64>,
    db_txt: &Mat<f64>,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
    opts: MapOptions,
) -> Result<CrossModalMap> {
    let qi = PackedCodes::pack(query_img)?;
    let qt = PackedCodes::pack(query_txt)?;
    let di = PackedCodes::pack(db_img)?;
    let dt = PackedCodes::pack(db_txt)?;
    Ok(CrossModalMap {
        i2t: mean_average_precision(&qi, &dt, query_labels, db_labels, opts)?,
        t2i: mean_average_precision(&qt, &di, query_labels, db_labels, opts)?,
    })
}

fn random_codes(n: usize, r: usize, rng: &mut SeededRng) -> Mat<f64> {
    Mat::from_fn(n, r, |_, _| if rng.below(2) == 1 { 1.0 } else { -1.0 })
}

/// mAP of uniformly random codes on the same queries and database.
pub fn random_baseline(
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
    bits: usize,
    seed: u64,
) -> Result<CrossModalMap> {
    let mut rng = SeededRng::new(seed ^ 0xba5e_11e5);
    let (nq, nd) = (query_labels.n(), db_labels.n());
    let qi = random_codes(nq, bits, &mut rng);
    let qt = random_codes(nq, bits, &mut rng);
    let di = random_codes(nd, bits, &mut rng);
    let dt = random_codes(nd, bits, &mut rng);
    cross_modal_map(
        &qi,
        &qt,
        &di,
        &dt,
        query_labels,
        db_labels,
        MapOptions::default(),
    )
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let data: SynthData<f64> = synth_generate(&cfg.synth)?;
    run_bench_on(&data, cfg)
}

pub fn run_bench_on(data: &SynthData<f64>, cfg: &BenchConfig) -> Result<BenchReport> {
    let tc = &cfg.train;
    let teacher = train_teacher(&data.offline, &tc.teacher_config())?;
    let lt = teacher_term(
        &teacher.params,
        &teacher_view(&data.offline)?,
        &data.offline.labels,
        tc.affinity,
    )?;
    let noise = (cfg.label_noise > 0.0).then_some(LabelNoise {
        fraction: cfg.label_noise,
        seed: tc.seed ^ 0x0f11_5eed,
    });
    let online = online_train(
        &data.online,
        cfg.synth.chunk_size(),
        Some(&teacher.params),
        lt,
        tc,
        noise,
    )?;
    let query = &data.query;
    let db_labels = &data.online.labels;
    let mut per_chunk = Vec::with_capacity(online.chunks.len());
    let mut rows = 0;
    for (chunk, params) in online.chunks.iter().zip(&online.history) {
        rows += chunk.image_codes.rows();
        per_chunk.push(cross_modal_map(
            &encode(&query.image, Modality::Image, params)?,
            &encode(&query.text, Modality::Text, params)?,
            &online.db_image_codes.row_block(0, rows),
            &online.db_text_codes.row_block(0, rows),
            &query.labels,
            &db_labels.row_block(0, rows),
            MapOptions::default(),
        )?);
    }
    let map = *per_chunk.last().expect("online split is non-empty");
    Ok(BenchReport {
        map,
        random_baseline: random_baseline(&query.labels, db_labels, tc.bits, tc.seed)?,
        per_chunk,
        teacher_trace: teacher.trace,
        teacher_loss: lt,
        chunks: online.chunks,
        student: online.params,
    })
}

/// First index `k` after which every consecutive relative change in `trace`
/// stays below `tol`; `None` if the tail never settles.
pub fn convergence_unit(trace: &[f64], tol: f64) -> Option<usize> {
    let mut k = 0;
    for j in 1..trace.len() {
        let prev = trace[j - 1];
        let rel = (trace[j] - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        if !(rel < tol) {
            k = j;
        }
    }
    (trace.len() <= 1 || k + 1 < trace.len()).then_some(k)
}
