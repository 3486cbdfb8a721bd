//! Offline teacher hasher.
//!
//! Paired teacher-side features are fused by an elementwise product, passed
//! through a sigmoid attention filter `A = F + sigmoid(F Wᵀ + D) ⊙ F`, and
//! projected to relaxed codes `U = tanh(A P + p0)`. Training fits `U Uᵀ` to
//! `r·S` for the label affinity `S`. At inference the sign codes give the
//! distilled affinity handed to the student.

use crate::datamodel::container::ModelContainer;
use crate::datamodel::{mat_from_lcdm, mat_to_lcdm, LabelMatrix, PairedDataset, TeacherFeatures};
use crate::error::{Error, Result};
use crate::numkernel::{
    hadamard, matmul, matmul_nt, matmul_tn, sigmoid, sign_quantize, tanh_map, Mat, Scalar,
    SeededRng,
};
use crate::optim::{GuardedDescent, ParamSet};
use crate::similarity::{
    label_affinity, to_unit_range, AffinityMatrix, AffinityMode, AffinityRange,
};

pub const MODEL_VERSION: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams<T> {
    /// Attention weight, d×d.
    pub attn_weight: Mat<T>,
    /// Attention bias, 1×d, broadcast over rows.
    pub attn_bias: Mat<T>,
    /// Code projection, d×r.
    pub proj: Mat<T>,
    /// Code bias, 1×r.
    pub proj_bias: Mat<T>,
}

impl<T: Scalar> TeacherParams<T> {
    pub fn zeros(d: usize, r: usize) -> Self {
        TeacherParams {
            attn_weight: Mat::zeros(d, d),
            attn_bias: Mat::zeros(1, d),
            proj: Mat::zeros(d, r),
            proj_bias: Mat::zeros(1, r),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(d: usize, r: usize, rng: &mut SeededRng) -> Self {
        TeacherParams {
            attn_weight: rng.xavier(d, d),
            attn_bias: Mat::zeros(1, d),
            proj: rng.xavier(d, r),
            proj_bias: Mat::zeros(1, r),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn_weight.rows()
    }

    pub fn bits(&self) -> usize {
        self.proj.cols()
    }

    fn validate(&self) -> Result<()> {
        let (d, r) = (self.dim(), self.bits());
        let want = [(d, d), (1, d), (d, r), (1, r)];
        let got = [
            self.attn_weight.shape(),
            self.attn_bias.shape(),
            self.proj.shape(),
            self.proj_bias.shape(),
        ];
        for (w, g) in want.iter().zip(got.iter()) {
            if w != g {
                return Err(Error::shape("teacher params", *w, *g));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> ModelContainer {
        let meta = Mat::from_rows(&[[self.bits() as f64, self.dim() as f64, MODEL_VERSION]]);
        let mut c = ModelContainer::new();
        c.push("W", mat_to_lcdm(&self.attn_weight))
            .push("D", mat_to_lcdm(&self.attn_bias))
            .push("P", mat_to_lcdm(&self.proj))
            .push("p0", mat_to_lcdm(&self.proj_bias))
            .push("meta", mat_to_lcdm::<T>(&meta));
        c
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        let meta: Mat<f64> = mat_from_lcdm(c.get("meta")?)?;
        if meta.shape() != (1, 3) || meta.get(0, 2) != MODEL_VERSION {
            return Err(Error::Format("unrecognized teacher meta block".into()));
        }
        let p = TeacherParams {
            attn_weight: mat_from_lcdm(c.get("W")?)?,
            attn_bias: mat_from_lcdm(c.get("D")?)?,
            proj: mat_from_lcdm(c.get("P")?)?,
            proj_bias: mat_from_lcdm(c.get("p0")?)?,
        };
        p.validate().map_err(|e| Error::Format(e.to_string()))?;
        if meta.get(0, 0) as usize != p.bits() || meta.get(0, 1) as usize != p.dim() {
            return Err(Error::Format(
                "teacher meta disagrees with matrix shapes".into(),
            ));
        }
        Ok(p)
    }
}

impl<T: Scalar> ParamSet<T> for TeacherParams<T> {
    fn axpy(&mut self, s: T, o: &Self) {
        for (a, b) in [
            (&mut self.attn_weight, &o.attn_weight),
            (&mut self.attn_bias, &o.attn_bias),
            (&mut self.proj, &o.proj),
            (&mut self.proj_bias, &o.proj_bias),
        ] {
            a.axpy(s, b).expect("gradient shapes match parameters");
        }
    }

    fn max_abs(&self) -> T {
        [
            &self.attn_weight,
            &self.attn_bias,
            &self.proj,
            &self.proj_bias,
        ]
        .iter()
        .fold(T::zero(), |m, t| m.max(t.max_abs()))
    }
}

/// Elementwise product of paired features.
pub fn fuse<T: Scalar>(image: &Mat<T>, text: &Mat<T>) -> Result<Mat<T>> {
    if image.shape() != text.shape() {
        return Err(Error::shape("fuse", image.shape(), text.shape()));
    }
    hadamard(image, text)
}

/// Returns the mask `M = sigmoid(F Wᵀ + 1 Dᵀ)` and the attended features
/// `A = F ⊙ (1 + M)`.
pub fn attention_forward<T: Scalar>(
    fused: &Mat<T>,
    params: &TeacherParams<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    let z = matmul_nt(fused, &params.attn_weight)?.add_row(&params.attn_bias)?;
    let mask = sigmoid(&z);
    let attended = fused.zip_map(&mask, "attention", |f, m| f * (T::one() + m))?;
    Ok((mask, attended))
}

/// Gradients of the attention parameters given `∂L/∂A`.
pub fn attention_backward<T: Scalar>(
    fused: &Mat<T>,
    mask: &Mat<T>,
    d_attended: &Mat<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    let d_mask = hadamard(d_attended, fused)?;
    let d_z = d_mask.zip_map(mask, "attention_backward", |g, m| g * m * (T::one() - m))?;
    Ok((matmul_tn(&d_z, fused)?, d_z.col_sums()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput<T> {
    pub fused: Mat<T>,
    pub mask: Mat<T>,
    pub attended: Mat<T>,
    pub relaxed: Mat<T>,
    pub codes: Mat<T>,
}

pub fn teacher_forward<T: Scalar>(
    image: &Mat<T>,
    text: &Mat<T>,
    params: &TeacherParams<T>,
) -> Result<TeacherOutput<T>> {
    let fused = fuse(image, text)?;
    if fused.cols() != params.dim() {
        return Err(Error::shape(
            "teacher_forward",
            fused.shape(),
            params.attn_weight.shape(),
        ));
    }
    let (mask, attended) = attention_forward(&fused, params)?;
    let relaxed = tanh_map(&matmul(&attended, &params.proj)?.add_row(&params.proj_bias)?);
    let codes = sign_quantize(&relaxed);
    Ok(TeacherOutput {
        fused,
        mask,
        attended,
        relaxed,
        codes,
    })
}

fn check_loss_shapes<T: Scalar>(u: &Mat<T>, s: &AffinityMatrix<T>) -> Result<()> {
    if s.n() != u.rows() {
        return Err(Error::shape("teacher_loss", u.shape(), s.as_mat().shape()));
    }
    Ok(())
}

/// `‖r S - U Uᵀ‖²_F`
pub fn teacher_loss<T: Scalar>(u: &Mat<T>, s: &AffinityMatrix<T>, r: usize) -> Result<T> {
    check_loss_shapes(u, s)?;
    let rr = T::of(r as f64);
    let gram = matmul_nt(u, u)?;
    Ok(gram
        .as_slice()
        .iter()
        .zip(s.as_mat().as_slice())
        .fold(T::zero(), |acc, (&g, &sv)| {
            let d = rr * sv - g;
            acc + d * d
        }))
}

/// `∂/∂U ‖r S - U Uᵀ‖²_F = 4 (U Uᵀ - r S) U` for symmetric `S`.
pub fn teacher_grad<T: Scalar>(u: &Mat<T>, s: &AffinityMatrix<T>, r: usize) -> Result<Mat<T>> {
    check_loss_shapes(u, s)?;
    let rr = T::of(r as f64);
    let resid = matmul_nt(u, u)?.zip_map(s.as_mat(), "teacher_grad", |g, sv| g - rr * sv)?;
    Ok(matmul(&resid, u)?.scale(T::of(4.0)))
}

/// `λ₁ ‖r S - U Uᵀ‖²_F` and its gradient with respect to every parameter.
pub fn teacher_loss_and_grad<T: Scalar>(
    feats: &TeacherFeatures<T>,
    s: &AffinityMatrix<T>,
    params: &TeacherParams<T>,
    lambda1: T,
) -> Result<(T, TeacherParams<T>)> {
    let r = params.bits();
    let out = teacher_forward(&feats.image, &feats.text, params)?;
    let loss = lambda1 * teacher_loss(&out.relaxed, s, r)?;
    let d_u = teacher_grad(&out.relaxed, s, r)?.scale(lambda1);
    let d_h = d_u.zip_map(&out.relaxed, "tanh backward", |g, u| g * (T::one() - u * u))?;
    let d_proj = matmul_tn(&out.attended, &d_h)?;
    let d_proj_bias = d_h.col_sums();
    let d_attended = matmul_nt(&d_h, &params.proj)?;
    let (d_w, d_d) = attention_backward(&out.fused, &out.mask, &d_attended)?;
    Ok((
        loss,
        TeacherParams {
            attn_weight: d_w,
            attn_bias: d_d,
            proj: d_proj,
            proj_bias: d_proj_bias,
        },
    ))
}

pub fn teacher_objective<T: Scalar>(
    feats: &TeacherFeatures<T>,
    s: &AffinityMatrix<T>,
    params: &TeacherParams<T>,
    lambda1: T,
) -> Result<T> {
    let out = teacher_forward(&feats.image, &feats.text, params)?;
    Ok(lambda1 * teacher_loss(&out.relaxed, s, params.bits())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub bits: usize,
    pub lambda1: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub affinity: AffinityMode,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            bits: 32,
            lambda1: 1e4,
            epochs: 200,
            lr: 0.01,
            seed: 42,
            affinity: AffinityMode::RowNormalized,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 {
            return Err(Error::Config("code length must be positive".into()));
        }
        if !(self.lambda1 > 0.0) || !self.lambda1.is_finite() {
            return Err(Error::Config("lambda1 must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedTeacher<T> {
    pub params: TeacherParams<T>,
    /// Objective before training followed by one value per epoch.
    pub trace: Vec<T>,
}

impl<T: Scalar> TrainedTeacher<T> {
    pub fn final_loss(&self) -> T {
        *self.trace.last().expect("trace holds the initial loss")
    }
}

/// Teacher features of a dataset, falling back to the student features when
/// the dataset carries none and both modalities share a dimension.
pub fn teacher_view<T: Scalar>(data: &PairedDataset<T>) -> Result<TeacherFeatures<T>> {
    match &data.teacher {
        Some(t) => Ok(t.clone()),
        None if data.image.cols() == data.text.cols() => Ok(TeacherFeatures {
            image: data.image.clone(),
            text: data.text.clone(),
        }),
        None => Err(Error::Data(
            "dataset has no teacher features and image/text dimensions differ".into(),
        )),
    }
}

pub fn train_teacher<T: Scalar>(
    data: &PairedDataset<T>,
    cfg: &TeacherConfig,
) -> Result<TrainedTeacher<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("offline split is empty".into()));
    }
    let feats = teacher_view(data)?;
    if feats.image.shape() != feats.text.shape() {
        return Err(Error::shape(
            "fuse",
            feats.image.shape(),
            feats.text.shape(),
        ));
    }
    let s = label_affinity(&data.labels, cfg.affinity)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut params = TeacherParams::init(feats.image.cols(), cfg.bits, &mut rng);
    let lambda1 = T::of(cfg.lambda1);
    let mut opt = GuardedDescent::new(T::of(cfg.lr));
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = teacher_loss_and_grad(&feats, &s, &params, lambda1)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "teacher loss is not finite at epoch {epoch}"
            )));
        }
        if epoch == 0 {
            trace.push(loss);
        }
        let out = opt.step(&mut params, &grad, loss, |p| {
            teacher_objective(&feats, &s, p, lambda1)
        })?;
        trace.push(out.loss);
    }
    if cfg.epochs == 0 {
        trace.push(teacher_objective(&feats, &s, &params, lambda1)?);
    }
    Ok(TrainedTeacher { params, trace })
}

/// Teacher-code similarity on a chunk: `to_unit_range(B Bᵀ / r)`.
pub fn distill_affinity<T: Scalar>(
    params: &TeacherParams<T>,
    feats: &TeacherFeatures<T>,
) -> Result<AffinityMatrix<T>> {
    let out = teacher_forward(&feats.image, &feats.text, params)?;
    let inv_r = T::one() / T::of(params.bits() as f64);
    let sim = matmul_nt(&out.codes, &out.codes)?.scale(inv_r);
    to_unit_range(&AffinityMatrix::new(sim, AffinityRange::Signed)?)
}

/// Where the student's distillation target came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillSource {
    Teacher,
    LabelFallback,
}

/// Distilled affinity for a chunk, or the unit-range label affinity when no
/// teacher (or no teacher features) is available.
pub fn distill_or_fallback<T: Scalar>(
    teacher: Option<&TeacherParams<T>>,
    chunk: &PairedDataset<T>,
    mode: AffinityMode,
) -> Result<(AffinityMatrix<T>, DistillSource)> {
    if let (Some(params), Some(feats)) = (teacher, chunk.teacher.as_ref()) {
        return Ok((distill_affinity(params, feats)?, DistillSource::Teacher));
    }
    Ok((
        label_fallback(&chunk.labels, mode)?,
        DistillSource::LabelFallback,
    ))
}

pub fn label_fallback<T: Scalar>(
    labels: &LabelMatrix,
    mode: AffinityMode,
) -> Result<AffinityMatrix<T>> {
    to_unit_range(&label_affinity(labels, mode)?)
}
