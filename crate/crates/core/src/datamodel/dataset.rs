use std::path::Path;

use crate::datamodel::lcdm::{LcdmMatrix, Payload};
use crate::error::{Error, Result};
use crate::numkernel::{Mat, Scalar, SeededRng};

/// Binary multi-label assignments, one row per instance.
///
/// Every row carries at least one label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    n: usize,
    c: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(n: usize, c: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * c {
            return Err(Error::Data(format!(
                "label matrix {n}x{c} needs {} entries, got {}",
                n * c,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|&b| b > 1) {
            return Err(Error::Data(format!("label entry {bad} is not binary")));
        }
        let m = LabelMatrix { n, c, data };
        if let Some(row) = (0..n).find(|&i| m.row(i).iter().all(|&b| b == 0)) {
            return Err(Error::Data(format!("instance {row} has no labels")));
        }
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let c = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if r.as_ref().len() != c {
                return Err(Error::Data("ragged label rows".into()));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), c, data)
    }

    /// One-hot labels from class indices.
    pub fn one_hot(classes: &[usize], c: usize) -> Result<Self> {
        let mut data = vec![0u8; classes.len() * c];
        for (i, &k) in classes.iter().enumerate() {
            if k >= c {
                return Err(Error::Data(format!(
                    "class {k} out of range for {c} classes"
                )));
            }
            data[i * c + k] = 1;
        }
        Self::new(classes.len(), c, data)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Number of labels shared by row `i` of `self` and row `j` of `other`.
    pub fn shared(&self, i: usize, other: &LabelMatrix, j: usize) -> usize {
        self.row(i)
            .iter()
            .zip(other.row(j))
            .filter(|(&a, &b)| a & b == 1)
            .count()
    }

    pub fn to_mat<T: Scalar>(&self) -> Mat<T> {
        Mat::from_fn(self.n, self.c, |i, j| {
            if self.data[i * self.c + j] == 1 {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn row_block(&self, start: usize, end: usize) -> Self {
        LabelMatrix {
            n: end - start,
            c: self.c,
            data: self.data[start * self.c..end * self.c].to_vec(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        LabelMatrix {
            n: rows.len(),
            c: self.c,
            data,
        }
    }

    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.c != other.c {
            return Err(Error::shape(
                "label vstack",
                (self.n, self.c),
                (other.n, other.c),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(LabelMatrix {
            n: self.n + other.n,
            c: self.c,
            data,
        })
    }

    /// Replaces the label set of `round(fraction * n)` randomly chosen rows by
    /// a single class that the row did not carry.
    pub fn with_flipped(&self, fraction: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "flip fraction {fraction} outside [0,1]"
            )));
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        rng.shuffle(&mut idx);
        let count = (fraction * self.n as f64).round() as usize;
        let mut data = self.data.clone();
        for &i in &idx[..count] {
            let row = &mut data[i * self.c..(i + 1) * self.c];
            let absent: Vec<usize> = (0..self.c).filter(|&k| row[k] == 0).collect();
            if absent.is_empty() {
                continue;
            }
            let k = absent[rng.below(absent.len())];
            row.iter_mut().for_each(|b| *b = 0);
            row[k] = 1;
        }
        Self::new(self.n, self.c, data)
    }

    pub fn to_lcdm(&self) -> LcdmMatrix {
        LcdmMatrix::u8(self.n, self.c, self.data.clone()).expect("valid label matrix")
    }

    pub fn from_lcdm(m: &LcdmMatrix) -> Result<Self> {
        match &m.payload {
            Payload::U8(v) => Self::new(m.rows, m.cols, v.clone()),
            other => Err(Error::Format(format!(
                "labels must be stored as u8, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_lcdm(&LcdmMatrix::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_lcdm().save(path)
    }
}

/// Converts a real matrix to on-disk `f32` storage.
pub fn mat_to_lcdm<T: Scalar>(m: &Mat<T>) -> LcdmMatrix {
    let data = m
        .as_slice()
        .iter()
        .map(|x| x.to_f32().unwrap_or(f32::NAN))
        .collect();
    LcdmMatrix::f32(m.rows(), m.cols(), data).expect("shape matches")
}

pub fn mat_from_lcdm<T: Scalar>(m: &LcdmMatrix) -> Result<Mat<T>> {
    let data: Vec<T> = match &m.payload {
        Payload::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
        Payload::U8(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
        Payload::Packed(_) => {
            return Err(Error::Format(
                "expected a real matrix, found packed codes".into(),
            ))
        }
    };
    Mat::from_vec(m.rows, m.cols, data).map_err(|e| match e {
        Error::Numeric(msg) | Error::Data(msg) => Error::Data(msg),
        other => other,
    })
}

pub fn load_matrix<T: Scalar>(path: impl AsRef<Path>) -> Result<Mat<T>> {
    mat_from_lcdm(&LcdmMatrix::load(path)?)
}

pub fn save_matrix<T: Scalar>(path: impl AsRef<Path>, m: &Mat<T>) -> Result<()> {
    mat_to_lcdm(m).save(path)
}

/// Image/text features paired by row index, with optional teacher-side
/// features for the same instances.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset<T> {
    pub image: Mat<T>,
    pub text: Mat<T>,
    pub labels: LabelMatrix,
    pub teacher: Option<TeacherFeatures<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures<T> {
    pub image: Mat<T>,
    pub text: Mat<T>,
}

impl<T: Scalar> PairedDataset<T> {
    pub fn new(
        image: Mat<T>,
        text: Mat<T>,
        labels: LabelMatrix,
        teacher: Option<TeacherFeatures<T>>,
    ) -> Result<Self> {
        let n = labels.n();
        let check = |what: &str, m: &Mat<T>| {
            if m.rows() != n {
                Err(Error::Data(format!(
                    "{what} has {} rows, labels have {n}",
                    m.rows()
                )))
            } else {
                Ok(())
            }
        };
        check("image features", &image)?;
        check("text features", &text)?;
        if let Some(t) = &teacher {
            check("teacher image features", &t.image)?;
            check("teacher text features", &t.text)?;
        }
        Ok(PairedDataset {
            image,
            text,
            labels,
            teacher,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        PairedDataset {
            image: self.image.row_block(start, end),
            text: self.text.row_block(start, end),
            labels: self.labels.row_block(start, end),
            teacher: self.teacher.as_ref().map(|t| TeacherFeatures {
                image: t.image.row_block(start, end),
                text: t.text.row_block(start, end),
            }),
        }
    }

    pub fn stream(&self, chunk_size: usize) -> Result<ChunkStream<'_, T>> {
        ChunkStream::new(self, chunk_size)
    }

    /// Writes `{prefix}_image.lcdm`, `{prefix}_text.lcdm`, `{prefix}_labels.lcdm`
    /// and, when present, `{prefix}_teacher_image.lcdm` / `{prefix}_teacher_text.lcdm`.
    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        save_matrix(dir.join(format!("{prefix}_image.lcdm")), &self.image)?;
        save_matrix(dir.join(format!("{prefix}_text.lcdm")), &self.text)?;
        self.labels
            .save(dir.join(format!("{prefix}_labels.lcdm")))?;
        if let Some(t) = &self.teacher {
            save_matrix(dir.join(format!("{prefix}_teacher_image.lcdm")), &t.image)?;
            save_matrix(dir.join(format!("{prefix}_teacher_text.lcdm")), &t.text)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, prefix: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let image = load_matrix(dir.join(format!("{prefix}_image.lcdm")))?;
        let text = load_matrix(dir.join(format!("{prefix}_text.lcdm")))?;
        let labels = LabelMatrix::load(dir.join(format!("{prefix}_labels.lcdm")))?;
        let ti = dir.join(format!("{prefix}_teacher_image.lcdm"));
        let tt = dir.join(format!("{prefix}_teacher_text.lcdm"));
        let teacher = if ti.exists() && tt.exists() {
            Some(TeacherFeatures {
                image: load_matrix(ti)?,
                text: load_matrix(tt)?,
            })
        } else {
            None
        };
        Self::new(image, text, labels, teacher)
    }
}

/// One block of rows handed to the online learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk<T> {
    pub round: usize,
    pub offset: usize,
    pub data: PairedDataset<T>,
}

/// Ordered, disjoint, covering iteration over a dataset in fixed-size blocks.
/// The last block may be shorter.
#[derive(Debug)]
pub struct ChunkStream<'a, T> {
    source: &'a PairedDataset<T>,
    chunk_size: usize,
    offset: usize,
    round: usize,
}

impl<'a, T: Scalar> ChunkStream<'a, T> {
    pub fn new(source: &'a PairedDataset<T>, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be positive".into()));
        }
        Ok(ChunkStream {
            source,
            chunk_size,
            offset: 0,
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn num_chunks(&self) -> usize {
        self.source.len().div_ceil(self.chunk_size)
    }

    /// Next block, or `None` once the source is exhausted.
    pub fn next_chunk(&mut self) -> Option<Chunk<T>> {
        if self.offset >= self.source.len() {
            return None;
        }
        let end = (self.offset + self.chunk_size).min(self.source.len());
        let chunk = Chunk {
            round: self.round,
            offset: self.offset,
            data: self.source.slice(self.offset, end),
        };
        self.offset = end;
        self.round += 1;
        Some(chunk)
    }
}

impl<'a, T: Scalar> Iterator for ChunkStream<'a, T> {
    type Item = Chunk<T>;

    fn next(&mut self) -> Option<Chunk<T>> {
        self.next_chunk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> PairedDataset<f64> {
        let image = Mat::from_fn(n, 3, |i, j| (i * 3 + j) as f64);
        let text = Mat::from_fn(n, 2, |i, j| -((i * 2 + j) as f64));
        let labels = LabelMatrix::one_hot(&(0..n).map(|i| i % 4).collect::<Vec<_>>(), 4).unwrap();
        PairedDataset::new(image, text, labels, None).unwrap()
    }

    #[test]
    fn zero_label_rows_rejected() {
        assert!(matches!(
            LabelMatrix::from_rows(&[[1u8, 0], [0, 0]]),
            Err(Error::Data(_))
        ));
        assert!(LabelMatrix::from_rows(&[[1u8, 2]]).is_err());
        let crafted = LcdmMatrix::u8(2, 2, vec![0, 1, 0, 0]).unwrap();
        assert!(matches!(
            LabelMatrix::from_lcdm(&crafted),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn chunk_sizes() {
        let d = dataset(512);
        let sizes: Vec<usize> = d.stream(128).unwrap().map(|c| c.data.len()).collect();
        assert_eq!(sizes, vec![128; 4]);
        let d = dataset(500);
        let sizes: Vec<usize> = d.stream(128).unwrap().map(|c| c.data.len()).collect();
        assert_eq!(sizes, vec![128, 128, 128, 116]);
    }

    #[test]
    fn chunks_slice_source_rows() {
        let d = dataset(10);
        let mut stream = d.stream(4).unwrap();
        let mut covered = Vec::new();
        let mut rounds = Vec::new();
        while let Some(c) = stream.next_chunk() {
            for r in 0..c.data.len() {
                assert_eq!(c.data.image.row(r), d.image.row(c.offset + r));
                assert_eq!(c.data.text.row(r), d.text.row(c.offset + r));
                assert_eq!(c.data.labels.row(r), d.labels.row(c.offset + r));
                covered.push(c.offset + r);
            }
            rounds.push(c.round);
        }
        assert_eq!(covered, (0..10).collect::<Vec<_>>());
        assert_eq!(rounds, vec![0, 1, 2]);
        assert!(stream.next_chunk().is_none());
    }

    #[test]
    fn mismatched_counts_rejected() {
        let labels = LabelMatrix::one_hot(&[0, 1], 2).unwrap();
        let r = PairedDataset::new(Mat::<f64>::zeros(3, 2), Mat::zeros(2, 2), labels, None);
        assert!(r.is_err());
    }

    #[test]
    fn flipping_changes_requested_fraction() {
        let labels = LabelMatrix::one_hot(&(0..100).map(|i| i % 5).collect::<Vec<_>>(), 5).unwrap();
        let mut rng = SeededRng::new(4);
        let flipped = labels.with_flipped(0.3, &mut rng).unwrap();
        let changed = (0..100)
            .filter(|&i| labels.row(i) != flipped.row(i))
            .count();
        assert_eq!(changed, 30);
    }
}
