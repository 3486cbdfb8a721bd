//! Planted-cluster synthetic data.
//!
//! Each class owns one standard-normal prototype per modality; an instance's
//! feature is the mean of its classes' prototypes plus isotropic Gaussian
//! noise. Teacher-side features come from a second, independent pair of
//! prototype sets with a shared dimension so they can be fused.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datamodel::dataset::{LabelMatrix, PairedDataset, TeacherFeatures};
use crate::error::{Error, Result};
use crate::numkernel::{Mat, Scalar, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim_img: usize,
    pub dim_txt: usize,
    pub dim_teacher: usize,
    pub n_offline: usize,
    pub n_online: usize,
    pub n_query: usize,
    pub chunks: usize,
    pub noise: f64,
    pub max_labels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 8,
            dim_img: 32,
            dim_txt: 32,
            dim_teacher: 32,
            n_offline: 512,
            n_online: 512,
            n_query: 128,
            chunks: 4,
            noise: 0.3,
            max_labels: 1,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.max_labels < 1 || self.max_labels > self.classes {
            return bad("max labels must be in 1..=classes");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be a finite non-negative number");
        }
        if self.dim_img == 0 || self.dim_txt == 0 || self.dim_teacher == 0 {
            return bad("feature dimensions must be positive");
        }
        if self.n_offline == 0 || self.n_online == 0 || self.n_query == 0 {
            return bad("split sizes must be positive");
        }
        if self.chunks == 0 || self.chunks > self.n_online {
            return bad("chunk count must be in 1..=n_online");
        }
        Ok(())
    }

    pub fn chunk_size(&self) -> usize {
        self.n_online.div_ceil(self.chunks)
    }
}

/// Offline (teacher training), online (streamed to the student, and the
/// retrieval database) and query splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData<T> {
    pub offline: PairedDataset<T>,
    pub online: PairedDataset<T>,
    pub query: PairedDataset<T>,
    pub prototypes: Prototypes<T>,
}

impl<T> SynthData<T> {
    /// The retrieval database: every instance that passed through the stream.
    pub fn retrieval(&self) -> &PairedDataset<T> {
        &self.online
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes<T> {
    pub image: Mat<T>,
    pub text: Mat<T>,
    pub teacher_image: Mat<T>,
    pub teacher_text: Mat<T>,
}

pub fn synth_generate<T: Scalar>(cfg: &SynthConfig) -> Result<SynthData<T>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let c = cfg.classes;
    let prototypes = Prototypes {
        image: rng.normal_matrix(c, cfg.dim_img),
        text: rng.normal_matrix(c, cfg.dim_txt),
        teacher_image: rng.normal_matrix(c, cfg.dim_teacher),
        teacher_text: rng.normal_matrix(c, cfg.dim_teacher),
    };
    let offline = generate_split(cfg, &prototypes, cfg.n_offline, &mut rng)?;
    let online = generate_split(cfg, &prototypes, cfg.n_online, &mut rng)?;
    let query = generate_split(cfg, &prototypes, cfg.n_query, &mut rng)?;
    Ok(SynthData {
        offline,
        online,
        query,
        prototypes,
    })
}

fn generate_split<T: Scalar>(
    cfg: &SynthConfig,
    protos: &Prototypes<T>,
    n: usize,
    rng: &mut SeededRng,
) -> Result<PairedDataset<T>> {
    let c = cfg.classes;
    let mut labels = vec![0u8; n * c];
    let mut image = Mat::zeros(n, cfg.dim_img);
    let mut text = Mat::zeros(n, cfg.dim_txt);
    let mut t_image = Mat::zeros(n, cfg.dim_teacher);
    let mut t_text = Mat::zeros(n, cfg.dim_teacher);
    let mut classes: Vec<usize> = (0..c).collect();
    for i in 0..n {
        let count = 1 + rng.below(cfg.max_labels);
        // Partial Fisher–Yates: first `count` entries are a uniform subset.
        for k in 0..count {
            let j = k + rng.below(c - k);
            classes.swap(k, j);
        }
        let chosen = &classes[..count];
        for &k in chosen {
            labels[i * c + k] = 1;
        }
        for (feat, proto) in [
            (&mut image, &protos.image),
            (&mut text, &protos.text),
            (&mut t_image, &protos.teacher_image),
            (&mut t_text, &protos.teacher_text),
        ] {
            let inv = T::of(1.0 / count as f64);
            for j in 0..feat.cols() {
                let mean = chosen
                    .iter()
                    .fold(T::zero(), |acc, &k| acc + proto.get(k, j))
                    * inv;
                feat.set(i, j, mean + T::of(cfg.noise * rng.normal()));
            }
        }
    }
    PairedDataset::new(
        image,
        text,
        LabelMatrix::new(n, c, labels)?,
        Some(TeacherFeatures {
            image: t_image,
            text: t_text,
        }),
    )
}

pub const MANIFEST: &str = "manifest.txt";

impl SynthConfig {
    pub fn to_manifest(&self) -> String {
        let mut s = String::from("# synthetic planted-cluster dataset\n");
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "dim_img={}", self.dim_img);
        let _ = writeln!(s, "dim_txt={}", self.dim_txt);
        let _ = writeln!(s, "dim_teacher={}", self.dim_teacher);
        let _ = writeln!(s, "n_offline={}", self.n_offline);
        let _ = writeln!(s, "n_online={}", self.n_online);
        let _ = writeln!(s, "n_query={}", self.n_query);
        let _ = writeln!(s, "chunks={}", self.chunks);
        let _ = writeln!(s, "chunk_size={}", self.chunk_size());
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "max_labels={}", self.max_labels);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {} lacks '='", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    parse_manifest(&fs::read_to_string(dir.as_ref().join(MANIFEST))?)
}

impl<T: Scalar> SynthData<T> {
    pub fn save(&self, dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.offline.save(dir, "offline")?;
        self.online.save(dir, "online")?;
        self.query.save(dir, "query")?;
        fs::write(dir.join(MANIFEST), cfg.to_manifest())?;
        Ok(())
    }
}
