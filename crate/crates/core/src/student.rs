//! Online student hasher.
//!
//! Each modality has a linear projection followed by `tanh`. Per chunk, the
//! student alternates between gradient steps on the negated pairwise logistic
//! likelihood and a closed-form update of its supervision matrix toward the
//! teacher's distilled affinity.

use crate::datamodel::container::ModelContainer;
use crate::datamodel::{mat_from_lcdm, mat_to_lcdm, PairedDataset, TeacherFeatures};
use crate::error::{Error, Result};
use crate::numkernel::{
    matmul, matmul_nt, matmul_tn, sigmoid_scalar, sign_quantize, tanh_map, Mat, Scalar, SeededRng,
};
use crate::optim::{GuardedDescent, ParamSet};
use crate::similarity::{
    kd_loss, kd_supervision_update, label_affinity, pairwise_label_sim, AffinityMatrix,
    AffinityMode, SupervisionMatrix,
};
use crate::teacher::{
    distill_or_fallback, teacher_forward, teacher_loss, DistillSource, TeacherParams,
};

pub const MODEL_VERSION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Per-modality hash functions; these persist across chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams<T> {
    pub img_proj: Mat<T>,
    pub img_bias: Mat<T>,
    pub txt_proj: Mat<T>,
    pub txt_bias: Mat<T>,
}

impl<T: Scalar> StudentParams<T> {
    pub fn zeros(d_img: usize, d_txt: usize, r: usize) -> Self {
        StudentParams {
            img_proj: Mat::zeros(d_img, r),
            img_bias: Mat::zeros(1, r),
            txt_proj: Mat::zeros(d_txt, r),
            txt_bias: Mat::zeros(1, r),
        }
    }

    pub fn init(d_img: usize, d_txt: usize, r: usize, rng: &mut SeededRng) -> Self {
        StudentParams {
            img_proj: rng.xavier(d_img, r),
            img_bias: Mat::zeros(1, r),
            txt_proj: rng.xavier(d_txt, r),
            txt_bias: Mat::zeros(1, r),
        }
    }

    pub fn bits(&self) -> usize {
        self.img_proj.cols()
    }

    fn validate(&self) -> Result<()> {
        let r = self.bits();
        for (want, got) in [
            ((1, r), self.img_bias.shape()),
            ((self.txt_proj.rows(), r), self.txt_proj.shape()),
            ((1, r), self.txt_bias.shape()),
        ] {
            if want != got {
                return Err(Error::shape("student params", want, got));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> ModelContainer {
        let meta = Mat::from_rows(&[[
            self.bits() as f64,
            self.img_proj.rows() as f64,
            self.txt_proj.rows() as f64,
            MODEL_VERSION,
        ]]);
        let mut c = ModelContainer::new();
        c.push("Wv", mat_to_lcdm(&self.img_proj))
            .push("bv", mat_to_lcdm(&self.img_bias))
            .push("Wb", mat_to_lcdm(&self.txt_proj))
            .push("bb", mat_to_lcdm(&self.txt_bias))
            .push("meta", mat_to_lcdm::<T>(&meta));
        c
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        let meta: Mat<f64> = mat_from_lcdm(c.get("meta")?)?;
        if meta.shape() != (1, 4) || meta.get(0, 3) != MODEL_VERSION {
            return Err(Error::Format("unrecognized student meta block".into()));
        }
        let p = StudentParams {
            img_proj: mat_from_lcdm(c.get("Wv")?)?,
            img_bias: mat_from_lcdm(c.get("bv")?)?,
            txt_proj: mat_from_lcdm(c.get("Wb")?)?,
            txt_bias: mat_from_lcdm(c.get("bb")?)?,
        };
        p.validate().map_err(|e| Error::Format(e.to_string()))?;
        let dims = (
            meta.get(0, 0) as usize,
            meta.get(0, 1) as usize,
            meta.get(0, 2) as usize,
        );
        if dims != (p.bits(), p.img_proj.rows(), p.txt_proj.rows()) {
            return Err(Error::Format(
                "student meta disagrees with matrix shapes".into(),
            ));
        }
        Ok(p)
    }

    fn modality(&self, m: Modality) -> (&Mat<T>, &Mat<T>) {
        match m {
            Modality::Image => (&self.img_proj, &self.img_bias),
            Modality::Text => (&self.txt_proj, &self.txt_bias),
        }
    }
}

impl<T: Scalar> ParamSet<T> for StudentParams<T> {
    fn axpy(&mut self, s: T, o: &Self) {
        for (a, b) in [
            (&mut self.img_proj, &o.img_proj),
            (&mut self.img_bias, &o.img_bias),
            (&mut self.txt_proj, &o.txt_proj),
            (&mut self.txt_bias, &o.txt_bias),
        ] {
            a.axpy(s, b).expect("gradient shapes match parameters");
        }
    }

    fn max_abs(&self) -> T {
        [
            &self.img_proj,
            &self.img_bias,
            &self.txt_proj,
            &self.txt_bias,
        ]
        .iter()
        .fold(T::zero(), |m, t| m.max(t.max_abs()))
    }
}

/// Relaxed codes `tanh(X W + 1 bᵀ)`.
pub fn student_forward<T: Scalar>(
    features: &Mat<T>,
    modality: Modality,
    params: &StudentParams<T>,
) -> Result<Mat<T>> {
    let (w, b) = params.modality(modality);
    Ok(tanh_map(&matmul(features, w)?.add_row(b)?))
}

/// Binary codes for a feature matrix.
pub fn encode<T: Scalar>(
    features: &Mat<T>,
    modality: Modality,
    params: &StudentParams<T>,
) -> Result<Mat<T>> {
    Ok(sign_quantize(&student_forward(features, modality, params)?))
}

/// `Ω = (ω / r) U_text U_imageᵀ`: row `i` is text instance `i`, column `j`
/// image instance `j`.
pub fn omega_matrix<T: Scalar>(uv: &Mat<T>, ub: &Mat<T>, omega: T, r: usize) -> Result<Mat<T>> {
    if uv.shape() != ub.shape() || uv.cols() != r {
        return Err(Error::shape("omega_matrix", uv.shape(), ub.shape()));
    }
    Ok(matmul_nt(ub, uv)?.scale(omega / T::of(r as f64)))
}

/// `log(1 + e^w) - s w` without cancellation for large `|w|`.
#[inline]
fn logistic_term<T: Scalar>(w: T, s: T) -> T {
    let tail = (-w.abs()).exp().ln_1p();
    if w > T::zero() {
        (T::one() - s) * w + tail
    } else {
        tail - s * w
    }
}

/// `Σ log(1 + e^Ω) - S Ω`, the negated log-likelihood of `S` under `Ω`.
pub fn neg_log_likelihood<T: Scalar>(omega: &Mat<T>, s: &SupervisionMatrix<T>) -> Result<T> {
    if omega.shape() != s.as_mat().shape() {
        return Err(Error::shape(
            "neg_log_likelihood",
            omega.shape(),
            s.as_mat().shape(),
        ));
    }
    Ok(omega
        .as_slice()
        .iter()
        .zip(s.as_mat().as_slice())
        .fold(T::zero(), |acc, (&w, &sv)| acc + logistic_term(w, sv)))
}

/// `∂(-L)/∂Ω = σ(Ω) - S`
pub fn neg_ll_grad_omega<T: Scalar>(omega: &Mat<T>, s: &SupervisionMatrix<T>) -> Result<Mat<T>> {
    omega.zip_map(s.as_mat(), "neg_ll_grad_omega", |w, sv| {
        sigmoid_scalar(w) - sv
    })
}

/// Pulls `∂L/∂Ω` back to the relaxed image and text codes.
pub fn omega_backward<T: Scalar>(
    d_omega: &Mat<T>,
    uv: &Mat<T>,
    ub: &Mat<T>,
    omega: T,
    r: usize,
) -> Result<(Mat<T>, Mat<T>)> {
    let c = omega / T::of(r as f64);
    let d_ub = matmul(d_omega, uv)?.scale(c);
    let d_uv = matmul_tn(d_omega, ub)?.scale(c);
    Ok((d_uv, d_ub))
}

fn linear_tanh_backward<T: Scalar>(
    x: &Mat<T>,
    u: &Mat<T>,
    d_u: &Mat<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    let d_h = d_u.zip_map(u, "tanh backward", |g, v| g * (T::one() - v * v))?;
    Ok((matmul_tn(x, &d_h)?, d_h.col_sums()))
}

/// Negated log-likelihood of a chunk and its gradient for all four tensors.
pub fn student_loss_and_grad<T: Scalar>(
    image: &Mat<T>,
    text: &Mat<T>,
    s: &SupervisionMatrix<T>,
    params: &StudentParams<T>,
    omega: T,
) -> Result<(T, StudentParams<T>)> {
    let r = params.bits();
    let uv = student_forward(image, Modality::Image, params)?;
    let ub = student_forward(text, Modality::Text, params)?;
    let om = omega_matrix(&uv, &ub, omega, r)?;
    let loss = neg_log_likelihood(&om, s)?;
    let g = neg_ll_grad_omega(&om, s)?;
    let (d_uv, d_ub) = omega_backward(&g, &uv, &ub, omega, r)?;
    let (d_wv, d_bv) = linear_tanh_backward(image, &uv, &d_uv)?;
    let (d_wb, d_bb) = linear_tanh_backward(text, &ub, &d_ub)?;
    Ok((
        loss,
        StudentParams {
            img_proj: d_wv,
            img_bias: d_bv,
            txt_proj: d_wb,
            txt_bias: d_bb,
        },
    ))
}

pub fn student_neg_ll<T: Scalar>(
    image: &Mat<T>,
    text: &Mat<T>,
    s: &SupervisionMatrix<T>,
    params: &StudentParams<T>,
    omega: T,
) -> Result<T> {
    let om = chunk_omega(image, text, params, omega)?;
    neg_log_likelihood(&om, s)
}

fn chunk_omega<T: Scalar>(
    image: &Mat<T>,
    text: &Mat<T>,
    params: &StudentParams<T>,
    omega: T,
) -> Result<Mat<T>> {
    let uv = student_forward(image, Modality::Image, params)?;
    let ub = student_forward(text, Modality::Text, params)?;
    omega_matrix(&uv, &ub, omega, params.bits())
}

/// `-L_log + λ₁ L_T + λ₂ L_KD`
pub fn total_objective<T: Scalar>(teacher_loss: T, neg_ll: T, kd: T, lambda1: T, lambda2: T) -> T {
    neg_ll + lambda1 * teacher_loss + lambda2 * kd
}

/// `‖r S - U_v U_bᵀ‖²_F`; kept for comparison only, never used in training.
pub fn reference_mse_loss<T: Scalar>(uv: &Mat<T>, ub: &Mat<T>, s: &Mat<T>, r: usize) -> Result<T> {
    let prod = matmul_nt(uv, ub)?;
    let rr = T::of(r as f64);
    let resid = s.zip_map(&prod, "reference_mse_loss", |sv, p| rr * sv - p)?;
    Ok(crate::numkernel::frob_sq(&resid))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub bits: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// ω = omega_scale · r.
    pub omega_scale: f64,
    pub lr: f64,
    pub teacher_lr: f64,
    pub epochs_teacher: usize,
    pub epochs_per_chunk: usize,
    pub inner_alternations: usize,
    pub distill: bool,
    pub affinity: AffinityMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bits: 32,
            lambda1: 1e4,
            lambda2: 1.0,
            omega_scale: 0.5,
            lr: 0.05,
            teacher_lr: 0.01,
            epochs_teacher: 200,
            epochs_per_chunk: 50,
            inner_alternations: 5,
            distill: true,
            affinity: AffinityMode::RowNormalized,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn omega(&self) -> f64 {
        self.omega_scale * self.bits as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.bits == 0 {
            return bad("code length must be positive");
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.omega_scale > 0.0) || !self.omega_scale.is_finite() {
            return bad("omega scale must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.inner_alternations == 0 {
            return bad("need at least one alternation");
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> crate::teacher::TeacherConfig {
        crate::teacher::TeacherConfig {
            bits: self.bits,
            lambda1: self.lambda1,
            epochs: self.epochs_teacher,
            lr: self.teacher_lr,
            seed: self.seed,
            affinity: self.affinity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint<T> {
    pub alternation: usize,
    pub neg_ll: T,
    pub kd: T,
    pub objective: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkResult<T> {
    pub round: usize,
    /// `sign(U_v)`, n_t×r.
    pub image_codes: Mat<T>,
    /// `sign(U_b)`, n_t×r.
    pub text_codes: Mat<T>,
    pub supervision: SupervisionMatrix<T>,
    /// Objective after each alternation.
    pub trace: Vec<TracePoint<T>>,
    /// Student objective (`-L_log + λ₂ L_KD`) before training and after every
    /// gradient epoch; supervision updates are folded into the epoch that
    /// follows them.
    pub epoch_trace: Vec<T>,
    pub source: DistillSource,
}

/// Trains on one chunk; `params` are updated in place.
///
/// `teacher_term` is `L_T` of the frozen teacher, reported in the objective
/// but not optimized.
pub fn train_chunk<T: Scalar>(
    chunk: &PairedDataset<T>,
    round: usize,
    params: &mut StudentParams<T>,
    distilled: &AffinityMatrix<T>,
    source: DistillSource,
    teacher_term: T,
    cfg: &TrainConfig,
) -> Result<ChunkResult<T>> {
    cfg.validate()?;
    let n = chunk.len();
    if distilled.n() != n {
        return Err(Error::shape(
            "train_chunk",
            (n, n),
            distilled.as_mat().shape(),
        ));
    }
    let (lambda1, lambda2) = (T::of(cfg.lambda1), T::of(cfg.lambda2));
    let omega = T::of(cfg.omega());
    let (image, text) = (&chunk.image, &chunk.text);
    let mut s = pairwise_label_sim(&chunk.labels);
    let mut opt = GuardedDescent::new(T::of(cfg.lr));
    let mut trace = Vec::with_capacity(cfg.inner_alternations);
    let mut epoch_trace = Vec::new();

    let kd_of = |s: &SupervisionMatrix<T>| -> Result<T> {
        if lambda2 > T::zero() {
            kd_loss(distilled, s)
        } else {
            Ok(T::zero())
        }
    };
    let numeric = |what: &str, alt: usize| {
        Error::Numeric(format!(
            "{what} not finite in round {round}, alternation {alt}"
        ))
    };

    let mut kd = kd_of(&s)?;
    epoch_trace.push(student_neg_ll(image, text, &s, params, omega)? + lambda2 * kd);
    for alt in 0..cfg.inner_alternations {
        let mut neg_ll = T::zero();
        for _ in 0..cfg.epochs_per_chunk {
            let (loss, grad) = student_loss_and_grad(image, text, &s, params, omega)?;
            if !loss.is_finite() {
                return Err(numeric("student loss", alt));
            }
            let out = opt.step(params, &grad, loss, |p| {
                student_neg_ll(image, text, &s, p, omega)
            })?;
            neg_ll = out.loss;
            epoch_trace.push(neg_ll + lambda2 * kd);
        }
        if cfg.epochs_per_chunk == 0 {
            neg_ll = student_neg_ll(image, text, &s, params, omega)?;
        }
        if lambda2 > T::zero() {
            let om = chunk_omega(image, text, params, omega)?;
            s = kd_supervision_update(&s, distilled, &om, lambda2)?;
            kd = kd_loss(distilled, &s)?;
            neg_ll = neg_log_likelihood(&om, &s)?;
            if let Some(last) = epoch_trace.last_mut() {
                *last = neg_ll + lambda2 * kd;
            }
        }
        let objective = total_objective(teacher_term, neg_ll, kd, lambda1, lambda2);
        if !objective.is_finite() {
            return Err(numeric("objective", alt));
        }
        trace.push(TracePoint {
            alternation: alt,
            neg_ll,
            kd,
            objective,
        });
    }
    Ok(ChunkResult {
        round,
        image_codes: encode(image, Modality::Image, params)?,
        text_codes: encode(text, Modality::Text, params)?,
        supervision: s,
        trace,
        epoch_trace,
        source,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineResult<T> {
    pub params: StudentParams<T>,
    pub chunks: Vec<ChunkResult<T>>,
    /// Chunk codes concatenated in arrival order.
    pub db_image_codes: Mat<T>,
    pub db_text_codes: Mat<T>,
    /// Parameters after each chunk.
    pub history: Vec<StudentParams<T>>,
}

/// Optional per-chunk label corruption applied before the supervision matrix is
/// built (the stored dataset is untouched).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelNoise {
    pub fraction: f64,
    pub seed: u64,
}

/// Streams `online` through the student in chunks of `chunk_size`.
pub fn online_train<T: Scalar>(
    online: &PairedDataset<T>,
    chunk_size: usize,
    teacher: Option<&TeacherParams<T>>,
    teacher_term: T,
    cfg: &TrainConfig,
    noise: Option<LabelNoise>,
) -> Result<OnlineResult<T>> {
    cfg.validate()?;
    if online.is_empty() {
        return Err(Error::Data("online split is empty".into()));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut params =
        StudentParams::init(online.image.cols(), online.text.cols(), cfg.bits, &mut rng);
    online_train_from(
        online,
        chunk_size,
        &mut params,
        teacher,
        teacher_term,
        cfg,
        noise,
    )
}

/// Like [`online_train`] but continues from existing parameters.
pub fn online_train_from<T: Scalar>(
    online: &PairedDataset<T>,
    chunk_size: usize,
    params: &mut StudentParams<T>,
    teacher: Option<&TeacherParams<T>>,
    teacher_term: T,
    cfg: &TrainConfig,
    noise: Option<LabelNoise>,
) -> Result<OnlineResult<T>> {
    let mut chunks = Vec::new();
    let mut db_image = Mat::zeros(0, cfg.bits);
    let mut db_text = Mat::zeros(0, cfg.bits);
    let mut history = Vec::new();
    let mut noise_rng = noise.map(|n| SeededRng::new(n.seed));
    for chunk in online.stream(chunk_size)? {
        let mut data = chunk.data;
        if let (Some(n), Some(rng)) = (noise, noise_rng.as_mut()) {
            data.labels = data.labels.with_flipped(n.fraction, rng)?;
        }
        let active_teacher = if cfg.distill { teacher } else { None };
        let (distilled, source) = distill_or_fallback(active_teacher, &data, cfg.affinity)?;
        let result = train_chunk(
            &data,
            chunk.round,
            params,
            &distilled,
            source,
            teacher_term,
            cfg,
        )?;
        db_image = db_image.vstack(&result.image_codes)?;
        db_text = db_text.vstack(&result.text_codes)?;
        chunks.push(result);
        history.push(params.clone());
    }
    Ok(OnlineResult {
        params: params.clone(),
        chunks,
        db_image_codes: db_image,
        db_text_codes: db_text,
        history,
    })
}

/// `round,alternation,neg_ll,kd,objective` rows for every chunk.
pub fn trace_csv<T: Scalar>(chunks: &[ChunkResult<T>]) -> String {
    let mut s = String::from("round,alternation,neg_ll,kd,objective\n");
    for c in chunks {
        for p in &c.trace {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                c.round,
                p.alternation,
                p.neg_ll.f64(),
                p.kd.f64(),
                p.objective.f64()
            ));
        }
    }
    s
}

/// Frozen teacher's `L_T` on a labelled split, used as the reported constant.
pub fn teacher_term<T: Scalar>(
    params: &TeacherParams<T>,
    feats: &TeacherFeatures<T>,
    labels: &crate::datamodel::LabelMatrix,
    mode: AffinityMode,
) -> Result<T> {
    let out = teacher_forward(&feats.image, &feats.text, params)?;
    teacher_loss(&out.relaxed, &label_affinity(labels, mode)?, params.bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{synth_generate, LabelMatrix, SynthConfig};
    use crate::numkernel::{finite_diff_check, sigmoid};
    use crate::similarity::AffinityRange;
    use crate::teacher::label_fallback;

    fn sup(m: Mat<f64>) -> SupervisionMatrix<f64> {
        SupervisionMatrix::new(m).unwrap()
    }

    fn random_chunk(n: usize, d_img: usize, d_txt: usize, seed: u64) -> PairedDataset<f64> {
        let mut rng = SeededRng::new(seed);
        let classes: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        PairedDataset::new(
            rng.normal_matrix(n, d_img),
            rng.normal_matrix(n, d_txt),
            LabelMatrix::one_hot(&classes, 3).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn forward_basics() {
        let x = SeededRng::new(1).normal_matrix::<f64>(4, 3);
        let p = StudentParams::zeros(3, 2, 5);
        assert_eq!(
            student_forward(&x, Modality::Image, &p).unwrap(),
            Mat::zeros(4, 5)
        );
        let p = StudentParams::init(3, 2, 5, &mut SeededRng::new(2));
        let u = student_forward(&x, Modality::Image, &p).unwrap();
        assert!(u.as_slice().iter().all(|&v| v > -1.0 && v < 1.0));
        assert_eq!(u, student_forward(&x, Modality::Image, &p).unwrap());
        assert!(student_forward(&x, Modality::Text, &p).is_err());
    }

    #[test]
    fn omega_cases() {
        let a = Mat::<f64>::from_fn(1, 32, |_, j| if j % 3 == 0 { 1.0 } else { -1.0 });
        let om = omega_matrix(&a, &a, 16.0, 32).unwrap();
        assert_eq!(om.get(0, 0), 16.0);
        let om = omega_matrix(&a, &a.scale(-1.0), 16.0, 32).unwrap();
        assert_eq!(om.get(0, 0), -16.0);
        let mut rng = SeededRng::new(3);
        let uv: Mat<f64> = rng.normal_matrix(3, 4);
        let ub: Mat<f64> = rng.normal_matrix(3, 4);
        let o1 = omega_matrix(&uv, &ub, 1.5, 4).unwrap();
        let o2 = omega_matrix(&uv, &ub, 3.0, 4).unwrap();
        assert!(o1.scale(2.0).sub(&o2).unwrap().max_abs() <= 1e-12);
        // row i is text, column j is image
        assert!(
            (o1.get(0, 1) - 1.5 / 4.0 * crate::numkernel::dot(ub.row(0), uv.row(1))).abs() < 1e-12
        );
    }

    #[test]
    fn neg_ll_cases() {
        let ln2 = std::f64::consts::LN_2;
        let one = |s: f64, w: f64| {
            neg_log_likelihood(&Mat::from_rows(&[[w]]), &sup(Mat::from_rows(&[[s]]))).unwrap()
        };
        assert!((one(1.0, 0.0) - ln2).abs() < 1e-12);
        let sat = one(1.0, 50.0);
        assert!(sat.is_finite() && (sat - 1.9287e-22).abs() < 1e-25);
        assert!((one(0.5, 0.0) - ln2).abs() < 1e-12);
        assert!(one(0.0, 800.0).is_finite());
    }

    #[test]
    fn neg_ll_non_negative_on_random_inputs() {
        let mut rng = SeededRng::new(4);
        for _ in 0..200 {
            let w = rng.normal() * 30.0;
            let s = rng.uniform();
            let v =
                neg_log_likelihood(&Mat::from_rows(&[[w]]), &sup(Mat::from_rows(&[[s]]))).unwrap();
            assert!(v >= 0.0, "{w} {s} {v}");
        }
    }

    #[test]
    fn omega_gradient_closed_form() {
        let mut rng = SeededRng::new(5);
        let om: Mat<f64> = rng.normal_matrix(4, 4).scale(3.0);
        let mut s = Mat::from_fn(4, 4, |_, _| rng.uniform());
        for i in 0..4 {
            for j in 0..i {
                let v = s.get(j, i);
                s.set(i, j, v);
            }
        }
        let s = sup(s);
        let g = neg_ll_grad_omega(&om, &s).unwrap();
        let err = finite_diff_check(|x| neg_log_likelihood(x, &s), &g, &om, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
        // stationary when S = σ(Ω) entrywise (sym part only)
        let sym = Mat::from_fn(4, 4, |i, j| om.get(i, j).min(om.get(j, i)));
        let s_star =
            SupervisionMatrix::new(Mat::from_fn(4, 4, |i, j| sigmoid(&sym).get(i, j))).unwrap();
        assert_eq!(neg_ll_grad_omega(&sym, &s_star).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn omega_backward_scales_with_omega() {
        let mut rng = SeededRng::new(6);
        let g: Mat<f64> = rng.normal_matrix(5, 5);
        let uv: Mat<f64> = rng.normal_matrix(5, 4);
        let ub: Mat<f64> = rng.normal_matrix(5, 4);
        let (a_v, a_b) = omega_backward(&g, &uv, &ub, 2.0, 4).unwrap();
        let (b_v, b_b) = omega_backward(&g, &uv, &ub, 4.0, 4).unwrap();
        assert!(a_v.scale(2.0).sub(&b_v).unwrap().max_abs() <= 1e-12);
        assert!(a_b.scale(2.0).sub(&b_b).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for seed in [7, 8] {
            let chunk = random_chunk(5, 3, 6, seed);
            let mut rng = SeededRng::new(seed + 100);
            let mut params = StudentParams::init(3, 6, 4, &mut rng);
            params.img_bias = rng.normal_matrix(1, 4).scale(0.2);
            params.txt_bias = rng.normal_matrix(1, 4).scale(0.2);
            let s = pairwise_label_sim::<f64>(&chunk.labels);
            let omega = 2.0;
            let (_, grad) =
                student_loss_and_grad(&chunk.image, &chunk.text, &s, &params, omega).unwrap();
            for which in 0..4 {
                let pick = |p: &StudentParams<f64>| -> Mat<f64> {
                    match which {
                        0 => p.img_proj.clone(),
                        1 => p.img_bias.clone(),
                        2 => p.txt_proj.clone(),
                        _ => p.txt_bias.clone(),
                    }
                };
                let err = finite_diff_check(
                    |x| {
                        let mut p = params.clone();
                        *match which {
                            0 => &mut p.img_proj,
                            1 => &mut p.img_bias,
                            2 => &mut p.txt_proj,
                            _ => &mut p.txt_bias,
                        } = x.clone();
                        student_neg_ll(&chunk.image, &chunk.text, &s, &p, omega)
                    },
                    &pick(&grad),
                    &pick(&params),
                    1e-5,
                )
                .unwrap();
                assert!(err <= 1e-5, "tensor {which}: {err}");
            }
        }
    }

    #[test]
    fn objective_arithmetic() {
        assert_eq!(total_objective(0.0, 0.0, 0.0, 1e4, 1.0), 0.0);
        assert_eq!(total_objective(3.0, 2.0, 4.0, 1.0, 1.0), 9.0);
        assert_eq!(total_objective(0.0, 2.0, 4.0, 1.0, 0.0), 2.0);
    }

    #[test]
    fn reference_mse_cases() {
        let u = Mat::<f64>::from_rows(&[[1.0, 1.0], [1.0, -1.0]]);
        let gram = matmul_nt(&u, &u).unwrap();
        assert_eq!(
            reference_mse_loss(&u, &u, &gram.scale(0.5), 2).unwrap(),
            0.0
        );
        let uv = Mat::<f64>::from_rows(&[[1.0, 1.0]]);
        let ub = Mat::<f64>::from_rows(&[[1.0, -1.0]]);
        assert_eq!(
            reference_mse_loss(&uv, &ub, &Mat::from_rows(&[[1.0]]), 2).unwrap(),
            4.0
        );
        let mut rng = SeededRng::new(9);
        let uv: Mat<f64> = rng.normal_matrix(3, 2);
        let ub: Mat<f64> = rng.normal_matrix(3, 2);
        let s = Mat::from_fn(3, 3, |_, _| rng.uniform());
        let a = reference_mse_loss(&uv, &ub, &s, 2).unwrap();
        let b = reference_mse_loss(&ub, &uv, &s.transpose(), 2).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    fn small_cfg(bits: usize) -> TrainConfig {
        TrainConfig {
            bits,
            epochs_per_chunk: 30,
            inner_alternations: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn chunk_trace_non_increasing_and_deterministic() {
        let chunk = random_chunk(12, 4, 5, 10);
        let distilled = label_fallback::<f64>(&chunk.labels, AffinityMode::RowNormalized).unwrap();
        let cfg = small_cfg(8);
        let run = || {
            let mut p = StudentParams::init(4, 5, 8, &mut SeededRng::new(1));
            train_chunk(
                &chunk,
                0,
                &mut p,
                &distilled,
                DistillSource::LabelFallback,
                0.0,
                &cfg,
            )
            .map(|r| (r, p))
        };
        let (a, pa) = run().unwrap();
        let (b, pb) = run().unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
        assert!(a.epoch_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(
            a.epoch_trace.len(),
            1 + cfg.inner_alternations * cfg.epochs_per_chunk
        );
        assert!(a
            .image_codes
            .as_slice()
            .iter()
            .all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn huge_lambda2_pins_supervision_to_teacher() {
        let chunk = random_chunk(10, 4, 4, 11);
        let mut rng = SeededRng::new(2);
        let mut t = Mat::from_fn(10, 10, |_, _| rng.uniform());
        for i in 0..10 {
            t.set(i, i, 1.0);
            for j in 0..i {
                let v = t.get(j, i);
                t.set(i, j, v);
            }
        }
        let distilled = AffinityMatrix::new(t.clone(), AffinityRange::Unit).unwrap();
        let cfg = TrainConfig {
            lambda2: 1e9,
            ..small_cfg(8)
        };
        let mut p = StudentParams::init(4, 4, 8, &mut SeededRng::new(3));
        let r = train_chunk(
            &chunk,
            0,
            &mut p,
            &distilled,
            DistillSource::Teacher,
            0.0,
            &cfg,
        )
        .unwrap();
        assert!(r.supervision.as_mat().sub(&t).unwrap().max_abs() <= 1e-6);
    }

    #[test]
    fn zero_lambda2_ignores_distilled_matrix() {
        let chunk = random_chunk(10, 4, 4, 12);
        let good = label_fallback::<f64>(&chunk.labels, AffinityMode::RowNormalized).unwrap();
        let garbage = AffinityMatrix::new(Mat::filled(10, 10, 0.37), AffinityRange::Unit).unwrap();
        let cfg = TrainConfig {
            lambda2: 0.0,
            ..small_cfg(8)
        };
        let run = |d: &AffinityMatrix<f64>| {
            let mut p = StudentParams::init(4, 4, 8, &mut SeededRng::new(4));
            train_chunk(&chunk, 0, &mut p, d, DistillSource::Teacher, 0.0, &cfg).unwrap()
        };
        assert_eq!(run(&good), run(&garbage));
    }

    fn two_class(n: usize, seed: u64) -> PairedDataset<f64> {
        let cfg = SynthConfig {
            classes: 2,
            dim_img: 8,
            dim_txt: 8,
            dim_teacher: 8,
            n_offline: 4,
            n_online: n,
            n_query: 4,
            chunks: 1,
            noise: 0.0,
            max_labels: 1,
            seed,
        };
        synth_generate(&cfg).unwrap().online
    }

    #[test]
    fn zero_noise_two_class_codes_separate() {
        let chunk = two_class(32, 5);
        let distilled = label_fallback::<f64>(&chunk.labels, AffinityMode::RowNormalized).unwrap();
        let cfg = TrainConfig {
            bits: 16,
            ..TrainConfig::default()
        };
        let mut p = StudentParams::init(8, 8, 16, &mut SeededRng::new(6));
        let r = train_chunk(
            &chunk,
            0,
            &mut p,
            &distilled,
            DistillSource::LabelFallback,
            0.0,
            &cfg,
        )
        .unwrap();
        let ham = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x != y).count();
        let class = |i: usize| chunk.labels.row(i)[1] as usize;
        for i in 0..32 {
            for j in 0..32 {
                for (a, b) in [
                    (&r.image_codes, &r.image_codes),
                    (&r.text_codes, &r.text_codes),
                    (&r.image_codes, &r.text_codes),
                ] {
                    let h = ham(a.row(i), b.row(j));
                    if class(i) == class(j) {
                        assert_eq!(h, 0, "intra ({i},{j})");
                    } else {
                        assert!(h >= 8, "inter ({i},{j}) = {h}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_chunk_stream_equals_train_chunk() {
        let data = random_chunk(16, 4, 5, 13);
        let cfg = small_cfg(8);
        let streamed = online_train(&data, 16, None, 0.0, &cfg, None).unwrap();
        let mut p = StudentParams::init(4, 5, 8, &mut SeededRng::new(cfg.seed));
        let distilled = label_fallback::<f64>(&data.labels, AffinityMode::RowNormalized).unwrap();
        let direct = train_chunk(
            &data,
            0,
            &mut p,
            &distilled,
            DistillSource::LabelFallback,
            0.0,
            &cfg,
        )
        .unwrap();
        assert_eq!(streamed.chunks, vec![direct]);
        assert_eq!(streamed.params, p);
    }

    #[test]
    fn params_move_between_chunks() {
        let cfg = SynthConfig {
            n_online: 64,
            chunks: 2,
            ..SynthConfig::default()
        };
        let data = synth_generate::<f64>(&cfg).unwrap();
        let tc = small_cfg(16);
        let mut p = StudentParams::init(32, 32, 16, &mut SeededRng::new(1));
        let first =
            online_train_from(&data.online.slice(0, 32), 32, &mut p, None, 0.0, &tc, None).unwrap();
        let after_first = p.clone();
        online_train_from(&data.online.slice(32, 64), 32, &mut p, None, 0.0, &tc, None).unwrap();
        assert_ne!(after_first, p);
        assert_eq!(first.db_image_codes.rows(), 32);
    }

    #[test]
    fn trace_csv_layout() {
        let chunk = random_chunk(6, 3, 3, 14);
        let cfg = TrainConfig {
            epochs_per_chunk: 2,
            inner_alternations: 2,
            ..small_cfg(4)
        };
        let out = online_train(&chunk, 3, None, 0.0, &cfg, None).unwrap();
        let csv = trace_csv(&out.chunks);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "round,alternation,neg_ll,kd,objective");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("1,1,"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn container_round_trip() {
        let p = StudentParams::<f64>::init(3, 5, 7, &mut SeededRng::new(2));
        let bytes = p.to_container().to_bytes().unwrap();
        let back =
            StudentParams::<f64>::from_container(&ModelContainer::from_bytes(&bytes).unwrap())
                .unwrap();
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
        assert_eq!(back.bits(), 7);
    }
}
