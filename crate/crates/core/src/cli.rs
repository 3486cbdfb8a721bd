//! Command line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::datamodel::container::ModelContainer;
use crate::datamodel::synth::read_manifest;
use crate::datamodel::{load_matrix, synth_generate, LabelMatrix, PairedDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    map_from_rankings, map_table_csv, pr_curve, ranked_relevance, topn_from_rankings, MapOptions,
    MapRow,
};
use crate::gradcheck::{run_gradcheck, TOLERANCE};
use crate::pipeline::{run_bench, BenchConfig};
use crate::retrieval::{knn_search, results_csv, PackedCodes};
use crate::similarity::AffinityMode;
use crate::student::{
    encode, online_train, teacher_term, trace_csv, LabelNoise, Modality, StudentParams, TrainConfig,
};
use crate::teacher::{teacher_view, train_teacher, TeacherParams};

#[derive(Debug, Parser)]
#[command(
    name = "lcdh",
    version,
    about = "Teacher-student online cross-modal hashing"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Print only machine-readable result lines.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-cluster dataset.
    Synth(SynthArgs),
    /// Train the offline teacher.
    TrainTeacher(TeacherArgs),
    /// Stream the online split through the student.
    TrainStudent(StudentArgs),
    /// Encode a feature matrix into packed codes.
    Encode(EncodeArgs),
    /// Hamming k-nearest-neighbour search.
    Retrieve(RetrieveArgs),
    /// Score retrieval: mAP, precision-recall and top-N precision.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// Seeded synthetic end-to-end benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim_img: usize,
    #[arg(long, default_value_t = 32)]
    dim_txt: usize,
    #[arg(long, default_value_t = 32)]
    dim_teacher: usize,
    #[arg(long, default_value_t = 512)]
    n_offline: usize,
    #[arg(long, default_value_t = 512)]
    n_online: usize,
    #[arg(long, default_value_t = 128)]
    n_query: usize,
    #[arg(long, default_value_t = 4)]
    chunks: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    max_labels: usize,
}

#[derive(Debug, Args)]
struct TeacherArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    bits: usize,
    #[arg(long, default_value_t = 1e4)]
    lambda1: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value = "row_normalized")]
    affinity: AffinityMode,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch objective as `epoch,objective`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StudentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    bits: usize,
    #[arg(long, default_value_t = 1e4)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    /// ω = s·r.
    #[arg(long, default_value_t = 0.5)]
    omega_scale: f64,
    #[arg(long, default_value_t = 50)]
    epochs_per_chunk: usize,
    #[arg(long, default_value_t = 5)]
    alternations: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Rows per chunk; defaults to the dataset manifest.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Fraction of each chunk's labels to corrupt before building supervision.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value = "row_normalized")]
    affinity: AffinityMode,
    /// Use the label affinity instead of the teacher's.
    #[arg(long)]
    no_distill: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Directory for the accumulated database codes.
    #[arg(long)]
    codes_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    modality: Modality,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    query_codes: PathBuf,
    #[arg(long)]
    db_codes: PathBuf,
    #[arg(long)]
    query_labels: PathBuf,
    #[arg(long)]
    db_labels: PathBuf,
    /// Score only the top N ranks.
    #[arg(long)]
    map_at: Option<usize>,
    /// Skip queries without any relevant database item.
    #[arg(long)]
    exclude_empty: bool,
    #[arg(long)]
    pr_out: Option<PathBuf>,
    #[arg(long)]
    topn_out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100")]
    topn_grid: Vec<usize>,
    /// Label for the `task` column.
    #[arg(long, default_value = "query")]
    task: String,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    bits: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long)]
    no_distill: bool,
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs; returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lcdh: {e}");
            e.exit_code()
        }
    }
}

struct Out {
    quiet: bool,
}

impl Out {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn result(&self, msg: impl AsRef<str>) {
        print!("{}", msg.as_ref());
        if !msg.as_ref().ends_with('\n') {
            println!();
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = Out { quiet: cli.quiet };
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed, &out),
        Command::TrainTeacher(a) => train_teacher_cmd(a, cli.seed, &out),
        Command::TrainStudent(a) => train_student_cmd(a, cli.seed, &out),
        Command::Encode(a) => encode_cmd(a, &out),
        Command::Retrieve(a) => retrieve_cmd(a, &out),
        Command::Eval(a) => eval_cmd(a, &out),
        Command::Gradcheck => gradcheck_cmd(cli.seed, &out),
        Command::Bench(a) => bench_cmd(a, cli.seed, &out),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "no such directory: {}",
            path.display()
        )))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Data(format!(
            "output directory does not exist: {}",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn synth(a: &SynthArgs, seed: u64, out: &Out) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        dim_img: a.dim_img,
        dim_txt: a.dim_txt,
        dim_teacher: a.dim_teacher,
        n_offline: a.n_offline,
        n_online: a.n_online,
        n_query: a.n_query,
        chunks: a.chunks,
        noise: a.noise,
        max_labels: a.max_labels,
        seed,
    };
    cfg.validate()?;
    let data = synth_generate::<f64>(&cfg)?;
    data.save(&a.out, &cfg)?;
    out.info(format!(
        "wrote {} offline, {} online ({} chunks), {} query instances to {}",
        cfg.n_offline,
        cfg.n_online,
        cfg.chunks,
        cfg.n_query,
        a.out.display()
    ));
    Ok(())
}

fn train_teacher_cmd(a: &TeacherArgs, seed: u64, out: &Out) -> Result<()> {
    require_dir(&a.data)?;
    require_parent(&a.out)?;
    if let Some(t) = &a.trace {
        require_parent(t)?;
    }
    let cfg = crate::teacher::TeacherConfig {
        bits: a.bits,
        lambda1: a.lambda1,
        epochs: a.epochs,
        lr: a.lr,
        seed,
        affinity: a.affinity,
    };
    cfg.validate()?;
    let offline = PairedDataset::<f64>::load(&a.data, "offline")?;
    let trained = train_teacher(&offline, &cfg)?;
    trained.params.to_container().save(&a.out)?;
    if let Some(path) = &a.trace {
        let mut csv = String::from("epoch,objective\n");
        for (e, v) in trained.trace.iter().enumerate() {
            csv.push_str(&format!("{e},{v:.6}\n"));
        }
        std::fs::write(path, csv)?;
    }
    out.info(format!(
        "teacher objective {:.6} -> {:.6} over {} epochs",
        trained.trace[0],
        trained.final_loss(),
        cfg.epochs
    ));
    out.result(format!("final_objective={:.6}", trained.final_loss()));
    Ok(())
}

fn chunk_size_from_manifest(dir: &Path, n_online: usize) -> Result<usize> {
    let manifest = read_manifest(dir)?;
    let parse = |k: &str| -> Option<usize> { manifest.get(k).and_then(|v| v.parse().ok()) };
    if let Some(cs) = parse("chunk_size") {
        return Ok(cs);
    }
    match parse("chunks") {
        Some(k) if k > 0 => Ok(n_online.div_ceil(k)),
        _ => Err(Error::Format(
            "manifest gives neither chunk_size nor chunks".into(),
        )),
    }
}

fn train_student_cmd(a: &StudentArgs, seed: u64, out: &Out) -> Result<()> {
    require_dir(&a.data)?;
    if let Some(t) = &a.teacher {
        require_file(t)?;
    }
    require_parent(&a.out)?;
    if let Some(t) = &a.trace {
        require_parent(t)?;
    }
    if let Some(d) = &a.codes_out {
        require_parent(d)?;
    }
    if !(0.0..=1.0).contains(&a.label_noise) {
        return Err(Error::Config("label noise must lie in [0, 1]".into()));
    }
    let cfg = TrainConfig {
        bits: a.bits,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        omega_scale: a.omega_scale,
        lr: a.lr,
        epochs_per_chunk: a.epochs_per_chunk,
        inner_alternations: a.alternations,
        distill: !a.no_distill,
        affinity: a.affinity,
        seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let online = PairedDataset::<f64>::load(&a.data, "online")?;
    let chunk_size = match a.chunk_size {
        Some(c) => c,
        None => chunk_size_from_manifest(&a.data, online.len())?,
    };
    let teacher = match &a.teacher {
        Some(p) => Some(TeacherParams::<f64>::from_container(
            &ModelContainer::load(p)?,
        )?),
        None => None,
    };
    if let Some(t) = &teacher {
        if t.bits() != a.bits {
            return Err(Error::Config(format!(
                "teacher has {} bits, student asked for {}",
                t.bits(),
                a.bits
            )));
        }
    }
    let lt = match &teacher {
        Some(t) => {
            let offline = PairedDataset::<f64>::load(&a.data, "offline")?;
            teacher_term(t, &teacher_view(&offline)?, &offline.labels, a.affinity)?
        }
        None => 0.0,
    };
    let noise = (a.label_noise > 0.0).then_some(LabelNoise {
        fraction: a.label_noise,
        seed: seed ^ 0x0f11_5eed,
    });
    let result = online_train(&online, chunk_size, teacher.as_ref(), lt, &cfg, noise)?;
    result.params.to_container().save(&a.out)?;
    if let Some(path) = &a.trace {
        std::fs::write(path, trace_csv(&result.chunks))?;
    }
    if let Some(dir) = &a.codes_out {
        std::fs::create_dir_all(dir)?;
        PackedCodes::pack(&result.db_image_codes)?.save(dir.join("db_image_codes.lcdm"))?;
        PackedCodes::pack(&result.db_text_codes)?.save(dir.join("db_text_codes.lcdm"))?;
    }
    for c in &result.chunks {
        let last = c.trace.last().expect("at least one alternation");
        out.info(format!(
            "round {} ({:?}): neg_ll {:.6} kd {:.6} objective {:.6}",
            c.round, c.source, last.neg_ll, last.kd, last.objective
        ));
    }
    let last = result
        .chunks
        .last()
        .and_then(|c| c.trace.last())
        .expect("non-empty stream");
    out.result(format!("final_objective={:.6}", last.objective));
    Ok(())
}

fn encode_cmd(a: &EncodeArgs, out: &Out) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.features)?;
    require_parent(&a.out)?;
    let params = StudentParams::<f64>::from_container(&ModelContainer::load(&a.model)?)?;
    let features = load_matrix::<f64>(&a.features)?;
    let codes = PackedCodes::pack(&encode(&features, a.modality, &params)?)?;
    codes.save(&a.out)?;
    out.info(format!(
        "encoded {} rows into {}-bit codes",
        codes.len(),
        codes.bits()
    ));
    Ok(())
}

fn retrieve_cmd(a: &RetrieveArgs, out: &Out) -> Result<()> {
    require_file(&a.index)?;
    require_file(&a.queries)?;
    require_parent(&a.out)?;
    let index = PackedCodes::load(&a.index)?;
    let queries = PackedCodes::load(&a.queries)?;
    let results = knn_search(&index, &queries, a.k)?;
    std::fs::write(&a.out, results_csv(&results))?;
    out.info(format!(
        "{} queries, top {} of {}",
        queries.len(),
        a.k,
        index.len()
    ));
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &Out) -> Result<()> {
    for p in [&a.query_codes, &a.db_codes, &a.query_labels, &a.db_labels] {
        require_file(p)?;
    }
    for p in [&a.pr_out, &a.topn_out].into_iter().flatten() {
        require_parent(p)?;
    }
    let queries = PackedCodes::load(&a.query_codes)?;
    let db = PackedCodes::load(&a.db_codes)?;
    let ql = LabelMatrix::load(&a.query_labels)?;
    let dl = LabelMatrix::load(&a.db_labels)?;
    let rankings = ranked_relevance(&queries, &db, &ql, &dl)?;
    let opts = MapOptions {
        cutoff: a.map_at,
        exclude_empty: a.exclude_empty,
    };
    let map = map_from_rankings(&rankings, opts)?;
    if let Some(path) = &a.pr_out {
        std::fs::write(path, pr_curve(&queries, &db, &ql, &dl)?.to_csv())?;
    }
    if let Some(path) = &a.topn_out {
        let grid = &a.topn_grid;
        if grid.iter().any(|&n| n == 0 || n > db.len()) || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "top-N grid must be strictly increasing within 1..={}",
                db.len()
            )));
        }
        std::fs::write(path, topn_from_rankings(&rankings, grid)?.to_csv())?;
    }
    out.result(map_table_csv(&[MapRow {
        task: a.task.clone(),
        bits: db.bits(),
        map,
    }]));
    Ok(())
}

fn gradcheck_cmd(seed: u64, out: &Out) -> Result<()> {
    let report = run_gradcheck(seed)?;
    for e in &report.entries {
        out.info(format!("{} {}: {:.3e}", e.model, e.tensor, e.max_rel_error));
    }
    out.result(format!(
        "teacher_max_rel_error={:.3e}\nstudent_max_rel_error={:.3e}",
        report.max_error("teacher"),
        report.max_error("student")
    ));
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient error {:.3e} exceeds {TOLERANCE:e}",
            report.overall_max()
        )))
    }
}

fn bench_cmd(a: &BenchArgs, seed: u64, out: &Out) -> Result<()> {
    if let Some(t) = &a.trace {
        require_parent(t)?;
    }
    let mut cfg = BenchConfig::with_seed(seed);
    cfg.train.bits = a.bits;
    cfg.train.lambda2 = a.lambda2;
    cfg.train.distill = !a.no_distill;
    cfg.label_noise = a.label_noise;
    let start = Instant::now();
    let report = run_bench(&cfg)?;
    if let Some(path) = &a.trace {
        std::fs::write(path, trace_csv(&report.chunks))?;
    }
    out.info(format!(
        "teacher objective {:.6} -> {:.6}; student trained on {} chunks in {:.2?}",
        report.teacher_trace[0],
        report.teacher_trace.last().expect("non-empty trace"),
        report.chunks.len(),
        start.elapsed()
    ));
    let row = |task: &str, map: f64| MapRow {
        task: task.into(),
        bits: a.bits,
        map,
    };
    out.result(map_table_csv(&[
        row("I2T", report.map.i2t),
        row("T2I", report.map.t2i),
        row("I2T_random", report.random_baseline.i2t),
        row("T2I_random", report.random_baseline.t2i),
    ]));
    Ok(())
}
