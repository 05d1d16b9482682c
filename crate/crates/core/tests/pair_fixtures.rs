use dia_core::contrastive::{build_pair_labels, MatrixDesign, PairLabelMatrix};

const DESIGN_A: &str = include_str!("fixtures/pairs_b2_k2_design_a.txt");
const DESIGN_B: &str = include_str!("fixtures/pairs_b2_k2_design_b.txt");

fn assert_golden(design: MatrixDesign, golden: &str) {
    let m = build_pair_labels(2, 2, design).unwrap();
    assert_eq!(m.to_grid().trim_end(), golden.trim_end(), "{design:?} grid differs");
}

#[test]
fn design_a_matches_golden_grid() {
    assert_golden(MatrixDesign::A, DESIGN_A);
}

#[test]
fn design_b_matches_golden_grid() {
    assert_golden(MatrixDesign::B, DESIGN_B);
}

#[test]
fn golden_grids_round_trip() {
    for (design, text) in [(MatrixDesign::A, DESIGN_A), (MatrixDesign::B, DESIGN_B)] {
        let parsed = PairLabelMatrix::parse_grid(text).unwrap();
        let m = build_pair_labels(2, 2, design).unwrap();
        assert_eq!(parsed.len(), m.size());
        for (i, row) in parsed.iter().enumerate() {
            for (j, label) in row.iter().enumerate() {
                assert_eq!(*label, m.get(i, j), "({i}, {j})");
            }
        }
    }
}
