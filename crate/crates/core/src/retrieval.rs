//! Bit-packed Hamming index with linear-scan search.

use std::path::Path;

use crate::datamodel::{LcdmMatrix, Payload};
use crate::error::{Error, Result};
use crate::numkernel::{Mat, Scalar};

/// ±1 codes packed one bit per entry: `+1` is bit 1, entry `j` lives at bit
/// `j % 64` of word `j / 64`. Bits past `r` in the last word are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    bits: usize,
    words: usize,
    data: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: u32,
}

impl PackedCodes {
    pub fn pack<T: Scalar>(codes: &Mat<T>) -> Result<Self> {
        let (n, bits) = codes.shape();
        if bits == 0 {
            return Err(Error::Data("codes need at least one bit".into()));
        }
        let words = bits.div_ceil(64);
        let mut data = vec![0u64; n * words];
        for i in 0..n {
            for (j, &v) in codes.row(i).iter().enumerate() {
                if v == T::one() {
                    data[i * words + j / 64] |= 1 << (j % 64);
                } else if v != -T::one() {
                    return Err(Error::Data(format!(
                        "code entry ({i},{j}) is {v}, expected ±1"
                    )));
                }
            }
        }
        Ok(PackedCodes {
            n,
            bits,
            words,
            data,
        })
    }

    pub fn unpack<T: Scalar>(&self) -> Mat<T> {
        Mat::from_fn(self.n, self.bits, |i, j| {
            if self.data[i * self.words + j / 64] >> (j % 64) & 1 == 1 {
                T::one()
            } else {
                -T::one()
            }
        })
    }

    pub fn from_words(n: usize, bits: usize, data: Vec<u64>) -> Result<Self> {
        let m = LcdmMatrix::packed(n, bits, data)?;
        Self::from_lcdm(&m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.words..(i + 1) * self.words]
    }

    pub fn as_words(&self) -> &[u64] {
        &self.data
    }

    pub fn to_lcdm(&self) -> LcdmMatrix {
        LcdmMatrix::packed(self.n, self.bits, self.data.clone()).expect("packed invariants hold")
    }

    pub fn from_lcdm(m: &LcdmMatrix) -> Result<Self> {
        match &m.payload {
            Payload::Packed(words) => Ok(PackedCodes {
                n: m.rows,
                bits: m.logical_cols,
                words: m.cols,
                data: words.clone(),
            }),
            _ => Err(Error::Format(format!(
                "expected packed codes, found dtype {:?}",
                m.dtype()
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_lcdm().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_lcdm(&LcdmMatrix::load(path)?)
    }
}

/// Number of differing bits; unused high bits are zero on both sides.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn check_pair(index: &PackedCodes, queries: &PackedCodes, k: usize) -> Result<()> {
    if index.bits != queries.bits {
        return Err(Error::shape(
            "knn_search",
            (index.n, index.bits),
            (queries.n, queries.bits),
        ));
    }
    if k > index.n {
        return Err(Error::Config(format!(
            "k = {k} exceeds database size {}",
            index.n
        )));
    }
    Ok(())
}

/// Full ranking of the database for one packed query: ascending distance, ties
/// by ascending database index.
pub fn rank_database(index: &PackedCodes, query: &[u64]) -> Vec<Neighbor> {
    // Counting sort over the r+1 possible distances keeps index order in ties.
    let dist: Vec<u32> = (0..index.n).map(|i| hamming(index.row(i), query)).collect();
    let mut start = vec![0usize; index.bits + 2];
    for &d in &dist {
        start[d as usize + 1] += 1;
    }
    for b in 1..start.len() {
        start[b] += start[b - 1];
    }
    let mut out = vec![
        Neighbor {
            index: 0,
            distance: 0
        };
        index.n
    ];
    for (i, &d) in dist.iter().enumerate() {
        let slot = &mut start[d as usize];
        out[*slot] = Neighbor {
            index: i,
            distance: d,
        };
        *slot += 1;
    }
    out
}

/// Top-`k` neighbours for every query.
pub fn knn_search(
    index: &PackedCodes,
    queries: &PackedCodes,
    k: usize,
) -> Result<Vec<Vec<Neighbor>>> {
    check_pair(index, queries, k)?;
    Ok((0..queries.n)
        .map(|q| {
            let mut ranked = rank_database(index, queries.row(q));
            ranked.truncate(k);
            ranked
        })
        .collect())
}

/// Reference search on unpacked ±1 codes.
pub fn oracle_search<T: Scalar>(db: &Mat<T>, query: &[T], k: usize) -> Result<Vec<Neighbor>> {
    if query.len() != db.cols() {
        return Err(Error::shape("oracle_search", db.shape(), (1, query.len())));
    }
    if k > db.rows() {
        return Err(Error::Config(format!(
            "k = {k} exceeds database size {}",
            db.rows()
        )));
    }
    let mut all: Vec<Neighbor> = (0..db.rows())
        .map(|i| {
            let mut d = 0u32;
            for (j, &q) in query.iter().enumerate() {
                if db.get(i, j) != q {
                    d += 1;
                }
            }
            Neighbor {
                index: i,
                distance: d,
            }
        })
        .collect();
    all.sort_by_key(|nb| (nb.distance, nb.index));
    all.truncate(k);
    Ok(all)
}

/// `query,rank,db_index,distance` rows, ranks starting at 1.
pub fn results_csv(results: &[Vec<Neighbor>]) -> String {
    let mut s = String::from("query,rank,db_index,distance\n");
    for (q, list) in results.iter().enumerate() {
        for (rank, nb) in list.iter().enumerate() {
            s.push_str(&format!("{q},{},{},{}\n", rank + 1, nb.index, nb.distance));
        }
    }
    s
}
