//! Pairwise similarity targets: label affinity, binary label similarity and
//! the distillation-coupled supervision update.

use crate::datamodel::LabelMatrix;
use crate::error::{Error, Result};
use crate::numkernel::{frob_sq, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffinityRange {
    /// Entries in `[-1, 1]`.
    Signed,
    /// Entries in `[0, 1]`.
    Unit,
}

/// How the label Gram factor is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AffinityMode {
    /// Each label row scaled to unit ℓ₂ norm: `S_ij = 2 cos(l_i, l_j) - 1`.
    #[default]
    RowNormalized,
    /// The whole label matrix divided by its squared Frobenius norm.
    FrobeniusNormalized,
}

impl std::str::FromStr for AffinityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row_normalized" => Ok(AffinityMode::RowNormalized),
            "frobenius_normalized" => Ok(AffinityMode::FrobeniusNormalized),
            other => Err(Error::Config(format!("unknown affinity mode {other:?}"))),
        }
    }
}

/// Symmetric n×n similarity with a declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T> {
    mat: Mat<T>,
    range: AffinityRange,
}

impl<T: Scalar> AffinityMatrix<T> {
    pub fn new(mat: Mat<T>, range: AffinityRange) -> Result<Self> {
        if mat.rows() != mat.cols() {
            return Err(Error::shape("affinity", mat.shape(), mat.shape()));
        }
        let (lo, hi) = match range {
            AffinityRange::Signed => (-T::one(), T::one()),
            AffinityRange::Unit => (T::zero(), T::one()),
        };
        let tol = T::of(1e-12);
        let n = mat.rows();
        for i in 0..n {
            for j in 0..n {
                let v = mat.get(i, j);
                if !v.is_finite() || v < lo - tol || v > hi + tol {
                    return Err(Error::Data(format!(
                        "affinity entry ({i},{j}) = {v} out of range"
                    )));
                }
                if (v - mat.get(j, i)).abs() > tol {
                    return Err(Error::Data(format!("affinity not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(AffinityMatrix { mat, range })
    }

    pub fn range(&self) -> AffinityRange {
        self.range
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.mat
    }

    pub fn into_mat(self) -> Mat<T> {
        self.mat
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }
}

/// Student-side pairwise targets in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionMatrix<T> {
    mat: Mat<T>,
}

impl<T: Scalar> SupervisionMatrix<T> {
    pub fn new(mat: Mat<T>) -> Result<Self> {
        AffinityMatrix::new(mat, AffinityRange::Unit).map(|a| SupervisionMatrix { mat: a.mat })
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.mat
    }

    pub fn into_mat(self) -> Mat<T> {
        self.mat
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }
}

/// `S = 2 G Gᵀ - 1 1ᵀ` with `G` built from the label matrix according to `mode`.
pub fn label_affinity<T: Scalar>(
    labels: &LabelMatrix,
    mode: AffinityMode,
) -> Result<AffinityMatrix<T>> {
    let n = labels.n();
    let g: Mat<T> = labels.to_mat();
    let two = T::of(2.0);
    let mat = match mode {
        AffinityMode::RowNormalized => {
            let norms: Vec<T> = (0..n)
                .map(|i| T::of(labels.row(i).iter().filter(|&&b| b == 1).count() as f64).sqrt())
                .collect();
            if let Some(i) = norms.iter().position(|x| *x == T::zero()) {
                return Err(Error::Data(format!("instance {i} has no labels")));
            }
            let mut s = Mat::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let shared = T::of(labels.shared(i, labels, j) as f64);
                    let v = if i == j {
                        T::one()
                    } else {
                        (two * shared / (norms[i] * norms[j]) - T::one())
                            .max(-T::one())
                            .min(T::one())
                    };
                    s.set(i, j, v);
                    s.set(j, i, v);
                }
            }
            s
        }
        AffinityMode::FrobeniusNormalized => {
            let f = frob_sq(&g);
            if f == T::zero() {
                return Err(Error::Data("empty label matrix".into()));
            }
            let g = g.scale(T::one() / f);
            let gram = crate::numkernel::matmul_nt(&g, &g)?;
            let mut s = gram.map(|x| two * x - T::one());
            // Symmetrize exactly; the Gram product is symmetric up to rounding.
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = s.get(i, j);
                    s.set(j, i, v);
                }
            }
            s
        }
    };
    AffinityMatrix::new(mat, AffinityRange::Signed)
}

/// Binary similarity: 1 when two instances share a label, else 0.
pub fn pairwise_label_sim<T: Scalar>(labels: &LabelMatrix) -> SupervisionMatrix<T> {
    let n = labels.n();
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            if labels.shared(i, labels, j) > 0 {
                s.set(i, j, T::one());
                s.set(j, i, T::one());
            }
        }
    }
    SupervisionMatrix { mat: s }
}

/// Maps a signed affinity onto `[0, 1]` via `(s + 1) / 2`.
pub fn to_unit_range<T: Scalar>(s: &AffinityMatrix<T>) -> Result<AffinityMatrix<T>> {
    if s.range != AffinityRange::Signed {
        return Err(Error::Data(
            "to_unit_range expects a signed affinity".into(),
        ));
    }
    let half = T::of(0.5);
    let mat = s
        .mat
        .map(|x| ((x + T::one()) * half).max(T::zero()).min(T::one()));
    Ok(AffinityMatrix {
        mat,
        range: AffinityRange::Unit,
    })
}

/// Closed-form supervision step.
///
/// Each entry minimizes `log(1 + e^Ω) - sΩ + λ₂ (s - ŝ)²` over `s ∈ [0, 1]`,
/// giving `s* = clip(ŝ + Ω / (2λ₂), 0, 1)`. `Ω` is symmetrized before clipping,
/// which makes the result the exact minimizer over symmetric `S`.
/// The previous supervision only contributes its shape: the minimizer does not
/// depend on it.
pub fn kd_supervision_update<T: Scalar>(
    s_t: &SupervisionMatrix<T>,
    s_teacher: &AffinityMatrix<T>,
    omega: &Mat<T>,
    lambda2: T,
) -> Result<SupervisionMatrix<T>> {
    if !(lambda2 > T::zero()) {
        return Err(Error::Config(format!(
            "lambda2 must be positive, got {lambda2}"
        )));
    }
    if s_teacher.range != AffinityRange::Unit {
        return Err(Error::Data(
            "distilled affinity must be in unit range".into(),
        ));
    }
    for other in [s_teacher.as_mat().shape(), omega.shape()] {
        if other != s_t.mat.shape() {
            return Err(Error::shape(
                "kd_supervision_update",
                s_t.mat.shape(),
                other,
            ));
        }
    }
    let scale = T::one() / (T::of(2.0) * lambda2);
    let n = omega.rows();
    let half = T::of(0.5);
    let teacher = s_teacher.as_mat();
    let mat = Mat::from_fn(n, n, |i, j| {
        let w = (omega.get(i, j) + omega.get(j, i)) * half;
        kd_entry((teacher.get(i, j) + teacher.get(j, i)) * half, w, scale)
    });
    Ok(SupervisionMatrix { mat })
}

#[inline]
fn kd_entry<T: Scalar>(teacher: T, omega: T, scale: T) -> T {
    (teacher + omega * scale).max(T::zero()).min(T::one())
}

/// `‖S - S⁽ᵗ⁾‖²_F`
pub fn kd_loss<T: Scalar>(s_teacher: &AffinityMatrix<T>, s_t: &SupervisionMatrix<T>) -> Result<T> {
    Ok(frob_sq(&s_teacher.as_mat().sub(s_t.as_mat())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::SeededRng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Scalar objective minimized by each supervision entry.
    fn scalar_objective(s: f64, teacher: f64, omega: f64, lambda2: f64) -> f64 {
        let softplus = omega.max(0.0) + (-omega.abs()).exp().ln_1p();
        softplus - s * omega + lambda2 * (s - teacher).powi(2)
    }

    fn grid_min(teacher: f64, omega: f64, lambda2: f64, steps: usize) -> (f64, f64) {
        (0..=steps)
            .map(|k| {
                let s = k as f64 / steps as f64;
                (s, scalar_objective(s, teacher, omega, lambda2))
            })
            .fold(
                (0.0, f64::INFINITY),
                |best, p| if p.1 < best.1 { p } else { best },
            )
    }

    fn unit(rows: &[[f64; 1]]) -> AffinityMatrix<f64> {
        AffinityMatrix::new(Mat::from_rows(rows), AffinityRange::Unit).unwrap()
    }

    fn update1(teacher: f64, omega: f64, lambda2: f64) -> f64 {
        let s_t = SupervisionMatrix::new(Mat::from_rows(&[[1.0]])).unwrap();
        kd_supervision_update(
            &s_t,
            &unit(&[[teacher]]),
            &Mat::from_rows(&[[omega]]),
            lambda2,
        )
        .unwrap()
        .as_mat()
        .get(0, 0)
    }

    #[test]
    fn row_normalized_one_hot() {
        let l = LabelMatrix::from_rows(&[[1u8, 0], [1, 0], [0, 1]]).unwrap();
        let s = label_affinity::<f64>(&l, AffinityMode::RowNormalized).unwrap();
        let want = Mat::from_rows(&[[1.0, 1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]);
        assert_eq!(s.as_mat(), &want);
    }

    #[test]
    fn row_normalized_cosine() {
        let l = LabelMatrix::from_rows(&[[1u8, 1], [1, 0]]).unwrap();
        let s = label_affinity::<f64>(&l, AffinityMode::RowNormalized).unwrap();
        // 2 * (1 / sqrt 2) - 1
        assert!(close(s.as_mat().get(0, 1), 2f64.sqrt() - 1.0, 1e-12));
        assert!(close(s.as_mat().get(0, 1), 0.41421, 1e-5));
    }

    #[test]
    fn frobenius_normalized_identity_labels() {
        let l = LabelMatrix::from_rows(&[[1u8, 0], [0, 1]]).unwrap();
        let s = label_affinity::<f64>(&l, AffinityMode::FrobeniusNormalized).unwrap();
        assert_eq!(s.as_mat(), &Mat::from_rows(&[[-0.5, -1.0], [-1.0, -0.5]]));
    }

    #[test]
    fn pairwise_sim_cases() {
        let l = LabelMatrix::from_rows(&[[1u8, 0, 0], [1, 0, 0], [0, 0, 1]]).unwrap();
        let s = pairwise_label_sim::<f64>(&l);
        assert_eq!(s.as_mat().get(0, 1), 1.0);
        assert_eq!(s.as_mat().get(0, 2), 0.0);
        let l = LabelMatrix::from_rows(&[[1u8, 1, 0], [0, 1, 1]]).unwrap();
        assert_eq!(pairwise_label_sim::<f64>(&l).as_mat().get(0, 1), 1.0);
    }

    #[test]
    fn pairwise_sim_matches_double_loop() {
        let mut rng = SeededRng::new(17);
        let mut data = vec![0u8; 20 * 5];
        for i in 0..20 {
            data[i * 5 + rng.below(5)] = 1;
            for k in 0..5 {
                if rng.uniform() < 0.2 {
                    data[i * 5 + k] = 1;
                }
            }
        }
        let l = LabelMatrix::new(20, 5, data).unwrap();
        let s = pairwise_label_sim::<f64>(&l);
        for i in 0..20 {
            for j in 0..20 {
                let mut dot = 0u32;
                for k in 0..5 {
                    dot += (l.row(i)[k] * l.row(j)[k]) as u32;
                }
                let want = if dot >= 1 { 1.0 } else { 0.0 };
                assert_eq!(s.as_mat().get(i, j), want);
            }
        }
    }

    #[test]
    fn unit_range_mapping() {
        let s = AffinityMatrix::<f64>::new(
            Mat::from_rows(&[[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            AffinityRange::Signed,
        )
        .unwrap();
        let u = to_unit_range(&s).unwrap();
        assert_eq!(u.as_mat().get(0, 0), 1.0);
        assert_eq!(u.as_mat().get(0, 1), 0.0);
        assert_eq!(u.as_mat().get(0, 2), 0.5);
        assert_eq!(u.range(), AffinityRange::Unit);
        assert!(to_unit_range(&u).is_err());
    }

    #[test]
    fn kd_update_examples() {
        assert_eq!(update1(0.0, 0.0, 1.0), 0.0);
        assert!(close(update1(1.0, -0.5, 1.0), 0.75, 1e-15));
        assert_eq!(update1(0.5, 10.0, 1.0), 1.0);
        // 1e-4 grid minimizer agrees with the closed form.
        let (s, _) = grid_min(1.0, -0.5, 1.0, 10_000);
        assert!(close(s, 0.75, 1e-4));
    }

    #[test]
    fn kd_update_rejects_bad_lambda_and_shapes() {
        let s_t = SupervisionMatrix::new(Mat::<f64>::from_rows(&[[1.0]])).unwrap();
        let r = kd_supervision_update(&s_t, &unit(&[[0.5]]), &Mat::from_rows(&[[0.0]]), 0.0);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = kd_supervision_update(&s_t, &unit(&[[0.5]]), &Mat::zeros(2, 2), 1.0);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn kd_update_large_lambda_tracks_teacher() {
        let mut rng = SeededRng::new(8);
        let n = 6;
        let mut t = Mat::from_fn(n, n, |_, _| rng.uniform());
        for i in 0..n {
            for j in 0..i {
                let v = t.get(j, i);
                t.set(i, j, v);
            }
        }
        let teacher = AffinityMatrix::new(t.clone(), AffinityRange::Unit).unwrap();
        let omega = Mat::from_fn(n, n, |_, _| 10.0 * rng.normal());
        let s_t = pairwise_label_sim::<f64>(&LabelMatrix::one_hot(&[0, 1, 0, 1, 2, 2], 3).unwrap());
        let out = kd_supervision_update(&s_t, &teacher, &omega, 1e9).unwrap();
        assert!(out.as_mat().sub(&t).unwrap().max_abs() <= 1e-6);
    }

    #[test]
    fn kd_update_beats_grid() {
        let mut rng = SeededRng::new(101);
        for _ in 0..100 {
            let teacher = rng.uniform();
            let omega = rng.uniform_range(-20.0, 20.0);
            let lambda2 = 10f64.powf(rng.uniform_range(-3.0, 3.0));
            let s = update1(teacher, omega, lambda2);
            let f_star = scalar_objective(s, teacher, omega, lambda2);
            for k in 0..=1000 {
                let g = k as f64 / 1000.0;
                assert!(f_star <= scalar_objective(g, teacher, omega, lambda2) + 1e-12);
            }
        }
    }

    #[test]
    fn kd_loss_cases() {
        let ones = AffinityMatrix::new(Mat::<f64>::ones(2, 2), AffinityRange::Unit).unwrap();
        let zeros = SupervisionMatrix::new(Mat::<f64>::zeros(2, 2)).unwrap();
        assert_eq!(kd_loss(&ones, &zeros).unwrap(), 4.0);
        let same = SupervisionMatrix::new(Mat::<f64>::ones(2, 2)).unwrap();
        assert_eq!(kd_loss(&ones, &same).unwrap(), 0.0);
        let big = SupervisionMatrix::new(Mat::<f64>::zeros(3, 3)).unwrap();
        assert!(kd_loss(&ones, &big).is_err());
    }

    fn arb_labels() -> impl Strategy<Value = LabelMatrix> {
        (2usize..8, 2usize..6).prop_flat_map(|(n, c)| {
            proptest::collection::vec(proptest::collection::vec(0u8..2, c), n).prop_map(
                move |mut rows| {
                    for (i, r) in rows.iter_mut().enumerate() {
                        if r.iter().all(|&b| b == 0) {
                            r[i % c] = 1;
                        }
                    }
                    LabelMatrix::from_rows(&rows).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn affinity_unit_diagonal_and_column_permutation(labels in arb_labels(), rot in 0usize..5) {
            let s = label_affinity::<f64>(&labels, AffinityMode::RowNormalized).unwrap();
            for i in 0..labels.n() {
                prop_assert_eq!(s.as_mat().get(i, i), 1.0);
            }
            let c = labels.classes();
            let perm: Vec<usize> = (0..c).map(|k| (k + rot) % c).collect();
            let rows: Vec<Vec<u8>> = (0..labels.n())
                .map(|i| perm.iter().map(|&k| labels.row(i)[k]).collect())
                .collect();
            let permuted = LabelMatrix::from_rows(&rows).unwrap();
            let s2 = label_affinity::<f64>(&permuted, AffinityMode::RowNormalized).unwrap();
            prop_assert!(s.as_mat().sub(s2.as_mat()).unwrap().max_abs() <= 1e-12);
        }

        #[test]
        fn single_label_sim_matches_affinity(classes in proptest::collection::vec(0usize..4, 2..10)) {
            let labels = LabelMatrix::one_hot(&classes, 4).unwrap();
            let s = label_affinity::<f64>(&labels, AffinityMode::RowNormalized).unwrap();
            let b = pairwise_label_sim::<f64>(&labels);
            for i in 0..classes.len() {
                for j in 0..classes.len() {
                    let want = if s.as_mat().get(i, j) > -1.0 { 1.0 } else { 0.0 };
                    prop_assert_eq!(b.as_mat().get(i, j), want);
                }
            }
        }
    }
}
