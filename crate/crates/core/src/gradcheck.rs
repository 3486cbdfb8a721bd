//! Finite-difference suite over the teacher and student gradients.

use crate::datamodel::{LabelMatrix, PairedDataset, TeacherFeatures};
use crate::error::Result;
use crate::numkernel::{finite_diff_check, Mat, SeededRng};
use crate::similarity::{label_affinity, pairwise_label_sim, AffinityMode};
use crate::student::{student_loss_and_grad, student_neg_ll, StudentParams};
use crate::teacher::{teacher_loss_and_grad, teacher_objective, TeacherParams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub model: &'static str,
    pub tensor: &'static str,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_error(&self, model: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.model == model)
            .fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn overall_max(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.overall_max() <= TOLERANCE
    }
}

fn random_labels(n: usize, c: usize, rng: &mut SeededRng) -> LabelMatrix {
    LabelMatrix::one_hot(&(0..n).map(|_| rng.below(c)).collect::<Vec<_>>(), c)
        .expect("valid labels")
}

fn slot<M>(p: &mut M, i: usize, pick: fn(&mut M) -> [&mut Mat<f64>; 4]) -> &mut Mat<f64> {
    let [a, b, c, d] = pick(p);
    [a, b, c, d].into_iter().nth(i).expect("four tensors")
}

fn teacher_slots(p: &mut TeacherParams<f64>) -> [&mut Mat<f64>; 4] {
    [
        &mut p.attn_weight,
        &mut p.attn_bias,
        &mut p.proj,
        &mut p.proj_bias,
    ]
}

fn student_slots(p: &mut StudentParams<f64>) -> [&mut Mat<f64>; 4] {
    [
        &mut p.img_proj,
        &mut p.img_bias,
        &mut p.txt_proj,
        &mut p.txt_bias,
    ]
}

/// Teacher objective (weighted by λ₁ = 1e4) through attention and projection.
pub fn check_teacher(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let (n, d, r) = (6, 4, 3);
    let mut rng = SeededRng::new(seed);
    let feats = TeacherFeatures {
        image: rng.normal_matrix(n, d),
        text: rng.normal_matrix(n, d),
    };
    let s = label_affinity(&random_labels(n, 3, &mut rng), AffinityMode::RowNormalized)?;
    let mut params = TeacherParams::init(d, r, &mut rng);
    params.attn_bias = rng.normal_matrix(1, d).scale(0.1);
    params.proj_bias = rng.normal_matrix(1, r).scale(0.1);
    let lambda1 = 1e4;
    let (_, mut grad) = teacher_loss_and_grad(&feats, &s, &params, lambda1)?;
    let names = ["W", "D", "P", "p0"];
    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let at = slot(&mut params.clone(), i, teacher_slots).clone();
        let err = finite_diff_check(
            |x| {
                let mut p = params.clone();
                *slot(&mut p, i, teacher_slots) = x.clone();
                teacher_objective(&feats, &s, &p, lambda1)
            },
            slot(&mut grad, i, teacher_slots),
            &at,
            STEP,
        )?;
        out.push(GradcheckEntry {
            model: "teacher",
            tensor: name,
            max_rel_error: err,
        });
    }
    Ok(out)
}

/// Student negated log-likelihood through both modality projections.
pub fn check_student(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let (n, d_img, d_txt, r) = (5, 3, 6, 4);
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let chunk = PairedDataset::new(
        rng.normal_matrix(n, d_img),
        rng.normal_matrix(n, d_txt),
        random_labels(n, 3, &mut rng),
        None,
    )?;
    let s = pairwise_label_sim(&chunk.labels);
    let mut params = StudentParams::init(d_img, d_txt, r, &mut rng);
    params.img_bias = rng.normal_matrix(1, r).scale(0.2);
    params.txt_bias = rng.normal_matrix(1, r).scale(0.2);
    let omega = r as f64 / 2.0;
    let (_, mut grad) = student_loss_and_grad(&chunk.image, &chunk.text, &s, &params, omega)?;
    let names = ["Wv", "bv", "Wb", "bb"];
    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let at = slot(&mut params.clone(), i, student_slots).clone();
        let err = finite_diff_check(
            |x| {
                let mut p = params.clone();
                *slot(&mut p, i, student_slots) = x.clone();
                student_neg_ll(&chunk.image, &chunk.text, &s, &p, omega)
            },
            slot(&mut grad, i, student_slots),
            &at,
            STEP,
        )?;
        out.push(GradcheckEntry {
            model: "student",
            tensor: name,
            max_rel_error: err,
        });
    }
    Ok(out)
}

pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut entries = check_teacher(seed)?;
    entries.extend(check_student(seed)?);
    Ok(GradcheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in [1, 7, 42] {
            let report = run_gradcheck(seed).unwrap();
            assert_eq!(report.entries.len(), 8);
            assert!(report.overall_max() <= 1e-5, "seed {seed}: {report:?}");
        }
    }
}
