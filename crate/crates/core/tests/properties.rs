use lcdh::datamodel::{LabelMatrix, LcdmMatrix};
use lcdh::evalmetrics::{mean_average_precision, pr_by_radius, MapOptions};
use lcdh::retrieval::PackedCodes;
use lcdh::similarity::{
    kd_loss, kd_supervision_update, pairwise_label_sim, AffinityMatrix, AffinityRange,
};
use lcdh::student::{neg_log_likelihood, omega_matrix};
use lcdh::{Matrix, SeededRng};
use proptest::prelude::*;

fn signs(n: usize, r: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(n, r, |_, _| if rng.below(2) == 1 { 1.0 } else { -1.0 })
}

fn labels(n: usize, c: usize, rng: &mut SeededRng) -> LabelMatrix {
    LabelMatrix::one_hot(&(0..n).map(|_| rng.below(c)).collect::<Vec<_>>(), c).unwrap()
}

fn symmetric_unit(n: usize, rng: &mut SeededRng) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rng.uniform();
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packed_codes_survive_the_file_format(seed in any::<u64>(), n in 1usize..20, r in 1usize..200) {
        let mut rng = SeededRng::new(seed);
        let codes = signs(n, r, &mut rng);
        let bytes = PackedCodes::pack(&codes).unwrap().to_lcdm().to_bytes();
        let back = PackedCodes::from_lcdm(&LcdmMatrix::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.unpack::<f64>(), codes);
    }

    #[test]
    fn supervision_update_stays_symmetric_and_bounded(seed in any::<u64>(), n in 1usize..12, l2 in 1e-3f64..1e3) {
        let mut rng = SeededRng::new(seed);
        let lab = labels(n, 3, &mut rng);
        let s0 = pairwise_label_sim::<f64>(&lab);
        let teacher = AffinityMatrix::new(symmetric_unit(n, &mut rng), AffinityRange::Unit).unwrap();
        let uv = rng.normal_matrix::<f64>(n, 8);
        let ub = rng.normal_matrix::<f64>(n, 8);
        let om = omega_matrix(&uv, &ub, 4.0, 8).unwrap();
        let s = kd_supervision_update(&s0, &teacher, &om, l2).unwrap();
        let m = s.as_mat();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                prop_assert!((0.0..=1.0).contains(&m.get(i, j)));
            }
        }
        // The update never raises the objective it minimizes.
        let before = neg_log_likelihood(&om, &s0).unwrap() + l2 * kd_loss(&teacher, &s0).unwrap();
        let after = neg_log_likelihood(&om, &s).unwrap() + l2 * kd_loss(&teacher, &s).unwrap();
        prop_assert!(after <= before + 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn retrieval_scores_are_bounded(seed in any::<u64>(), nq in 1usize..10, nd in 1usize..40, r in 1usize..70) {
        let mut rng = SeededRng::new(seed);
        let q = PackedCodes::pack(&signs(nq, r, &mut rng)).unwrap();
        let d = PackedCodes::pack(&signs(nd, r, &mut rng)).unwrap();
        let (ql, dl) = (labels(nq, 3, &mut rng), labels(nd, 3, &mut rng));
        let m = mean_average_precision(&q, &d, &ql, &dl, MapOptions::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let pr = pr_by_radius(&q, &d, &ql, &dl).unwrap();
        prop_assert_eq!(pr.len(), r + 1);
        prop_assert_eq!(pr[r].0, 1.0);
        prop_assert!(pr.iter().all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
    }
}
