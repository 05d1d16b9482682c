use candle_core::{Device, Tensor};
use dia_core::contrastive::{fine_ntxent_loss, MatrixDesign, PairLabel, PairLabelMatrix};
use dia_core::diffusion::{build_schedule, ScheduleKind};
use dia_core::scoring::{auroc, balancing_terms, FeatureBank};
use dia_core::transforms::{ShiftKind, ShiftSet, PERM_COUNT};
use dia_core::Image;
use proptest::prelude::*;

/// Image whose pixels are all distinct, so a bijection is visible as a
/// permutation of values.
fn indexed(c: usize, h: usize, w: usize) -> Image {
    Image::new(c, h, w, (0..c * h * w).map(|i| i as f32).collect()).unwrap()
}

fn sorted(v: &[f32]) -> Vec<f32> {
    let mut v = v.to_vec();
    v.sort_by(f32::total_cmp);
    v
}

fn shift_set() -> impl Strategy<Value = ShiftSet> {
    prop_oneof![
        prop_oneof![Just(1usize), Just(2), Just(4)].prop_map(|k| ShiftSet::new(
            ShiftKind::Rotate,
            k
        )
        .unwrap()),
        (1usize..=PERM_COUNT).prop_map(|k| ShiftSet::new(ShiftKind::Perm, k).unwrap()),
    ]
}

fn design() -> impl Strategy<Value = MatrixDesign> {
    prop_oneof![Just(MatrixDesign::A), Just(MatrixDesign::B)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shifts_start_at_identity_and_are_bijections(
        set in shift_set(),
        c in prop_oneof![Just(1usize), Just(3usize)],
        half in 1usize..6,
    ) {
        let side = 2 * half;
        let img = indexed(c, side, side);
        prop_assert_eq!(set.apply(0, &img).unwrap(), img.clone());
        for (k, shift) in set.shifts().iter().enumerate() {
            let out = set.apply(k, &img).unwrap();
            prop_assert_eq!(sorted(out.data()), sorted(img.data()));
            prop_assert_eq!(shift.inverse().apply(&out).unwrap(), img.clone());
        }
    }

    #[test]
    fn pair_matrix_structure(b in 1usize..5, k in 1usize..5, design in design(), include in any::<bool>()) {
        let m = PairLabelMatrix::new(b, k, design, include).unwrap();
        let branches = if include { 3 } else { 2 };
        prop_assert_eq!(m.size(), branches * k * b);
        let kb = k * b;
        for i in 0..m.size() {
            prop_assert_eq!(m.get(i, i), PairLabel::Excl);
            for j in 0..m.size() {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                let (bi, bj) = (i / kb, j / kb);
                let same_view = i % kb == j % kb;
                let want = if i == j {
                    PairLabel::Excl
                } else if same_view && bi.min(bj) == 0 && bi.max(bj) == 1 {
                    PairLabel::Pos
                } else if same_view && design == MatrixDesign::B && bi.max(bj) == 2 {
                    PairLabel::Excl
                } else {
                    PairLabel::Neg
                };
                prop_assert_eq!(m.get(i, j), want, "entry ({}, {})", i, j);
            }
        }
        prop_assert_eq!(m.count(PairLabel::Pos), 2 * kb);
    }

    #[test]
    fn schedule_is_monotone(steps in 1usize..400, lo in 1e-5f64..1e-3, span in 1e-3f64..0.5) {
        let s = build_schedule(steps, lo, lo + span, ScheduleKind::Linear).unwrap();
        let ab = s.alpha_bars();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            if t > 1 {
                prop_assert!(s.beta(t) > s.beta(t - 1));
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                // ᾱ is the correctly rounded running product, so the one-step
                // f64 recurrence may differ in the last place.
                let step = s.alpha_bar(t - 1) * s.alpha(t);
                prop_assert!((s.alpha_bar(t) - step).abs() <= 4.0 * f64::EPSILON * step);
            }
        }
        prop_assert_eq!(ab.len(), steps);
    }
}

fn embeddings(rows: usize, dim: usize, seed: &[f64]) -> Tensor {
    let data: Vec<f64> = (0..rows * dim)
        .map(|i| seed[i % seed.len()] + (i as f64 * 0.37).sin())
        .collect();
    Tensor::from_vec(data, (rows, dim), &Device::Cpu).unwrap()
}

fn loss(z: &Tensor, m: &PairLabelMatrix, tau: f64) -> f64 {
    fine_ntxent_loss(z, m, tau)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn contrastive_loss_is_nonnegative_and_scale_free(
        b in 1usize..4,
        k in 1usize..4,
        design in design(),
        seed in prop::collection::vec(-1.0f64..1.0, 1..16),
        scales in prop::collection::vec(0.1f64..10.0, 1..8),
        tau in 0.05f64..2.0,
    ) {
        let m = PairLabelMatrix::new(b, k, design, true).unwrap();
        let z = embeddings(m.size(), 6, &seed);
        let base = loss(&z, &m, tau);
        prop_assert!(base.is_finite() && base >= -1e-12);
        let factors: Vec<f64> = (0..m.size()).map(|i| scales[i % scales.len()]).collect();
        let f = Tensor::from_vec(factors, (m.size(), 1), &Device::Cpu).unwrap();
        let scaled = loss(&z.broadcast_mul(&f).unwrap(), &m, tau);
        prop_assert!((scaled - base).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn contrastive_loss_ignores_image_order(
        b in 2usize..5,
        k in 1usize..4,
        design in design(),
        seed in prop::collection::vec(-1.0f64..1.0, 1..16),
        rotate_by in 1usize..4,
    ) {
        let m = PairLabelMatrix::new(b, k, design, true).unwrap();
        let z = embeddings(m.size(), 5, &seed);
        // Relabel source images n → (n + r) mod B in every branch and shift.
        let order: Vec<u32> = (0..m.size())
            .map(|i| {
                let (block, n) = (i / b, i % b);
                (block * b + (n + rotate_by) % b) as u32
            })
            .collect();
        let idx = Tensor::from_vec(order, m.size(), &Device::Cpu).unwrap();
        let permuted = z.index_select(&idx, 0).unwrap();
        let (a, c) = (loss(&z, &m, 0.5), loss(&permuted, &m, 0.5));
        prop_assert!((a - c).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn auroc_bounds_and_symmetry(
        scores in prop::collection::vec(0u8..20, 2..60),
        flips in prop::collection::vec(any::<bool>(), 2..60),
    ) {
        let n = scores.len().min(flips.len());
        let mut labels: Vec<u8> = flips[..n].iter().map(|&f| f as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let s: Vec<f64> = scores[..n].iter().map(|&v| v as f64).collect();
        let a = auroc(&s, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let negated: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&negated, &labels).unwrap() - (1.0 - a)).abs() <= 1e-12);
        // Strictly increasing maps keep every rank and tie.
        let warped: Vec<f64> = s.iter().map(|v| (v / 3.0).exp() - 7.0).collect();
        prop_assert!((auroc(&warped, &labels).unwrap() - a).abs() <= 1e-12);
    }

    #[test]
    fn balancing_normalises_each_shift(
        con in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 3), 1..4),
        cls in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 3), 1..4),
    ) {
        let k = con.len().min(cls.len());
        let bank = FeatureBank {
            banks: vec![vec![vec![1.0, 0.0]; 3]; k],
            train_con: con[..k].to_vec(),
            train_cls: cls[..k].to_vec(),
        };
        let terms = balancing_terms(&bank).unwrap();
        for s in 0..k {
            let mc: f64 = bank.train_con[s].iter().map(|v| v * terms.lambda_con[s]).sum::<f64>() / 3.0;
            let ml: f64 = bank.train_cls[s].iter().map(|v| v * terms.lambda_cls[s]).sum::<f64>() / 3.0;
            prop_assert!((mc - 1.0).abs() <= 1e-12 && (ml - 1.0).abs() <= 1e-12);
        }
    }
}
