use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Pos,
    Neg,
    Excl,
}

impl PairLabel {
    pub fn as_char(self) -> char {
        match self {
            PairLabel::Pos => 'P',
            PairLabel::Neg => 'N',
            PairLabel::Excl => 'E',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'P' => Some(PairLabel::Pos),
            'N' => Some(PairLabel::Neg),
            'E' => Some(PairLabel::Excl),
            _ => None,
        }
    }
}

/// `a`: every dissolved view is a negative for every other view.
/// `b`: additionally excludes `A_k(x_n)` against `O_k(x_n)` and `O′_k(x_n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixDesign {
    A,
    B,
}

impl std::str::FromStr for MatrixDesign {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(MatrixDesign::A),
            "b" => Ok(MatrixDesign::B),
            other => Err(validation(format!("unknown matrix design {other:?}"))),
        }
    }
}

/// Square POS/NEG/EXCL labels over views ordered `branch·K·B + k·B + n`
/// with branches O, O′ and (optionally) A.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLabelMatrix {
    b: usize,
    k: usize,
    branches: usize,
    design: MatrixDesign,
    labels: Vec<PairLabel>,
}

impl PairLabelMatrix {
    /// `include_dissolved = false` gives the two-branch matrix without A views.
    pub fn new(b: usize, k: usize, design: MatrixDesign, include_dissolved: bool) -> Result<Self> {
        if b == 0 || k == 0 {
            return Err(validation(format!("pair matrix needs B, K >= 1, got B={b}, K={k}")));
        }
        let branches = if include_dissolved { 3 } else { 2 };
        let kb = k * b;
        let size = branches * kb;
        let decode = |i: usize| (i / kb, (i % kb) / b, i % b);
        let mut labels = Vec::with_capacity(size * size);
        for i in 0..size {
            let (bi, ki, ni) = decode(i);
            for j in 0..size {
                let (bj, kj, nj) = decode(j);
                let same_view = ki == kj && ni == nj;
                let label = if i == j {
                    PairLabel::Excl
                } else if bi < 2 && bj < 2 && bi != bj && same_view {
                    PairLabel::Pos
                } else if design == MatrixDesign::B
                    && same_view
                    && (bi == 2) != (bj == 2)
                {
                    PairLabel::Excl
                } else {
                    PairLabel::Neg
                };
                labels.push(label);
            }
        }
        Ok(Self {
            b,
            k,
            branches,
            design,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.branches * self.k * self.b
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn design(&self) -> MatrixDesign {
        self.design
    }

    pub fn has_dissolved(&self) -> bool {
        self.branches == 3
    }

    pub fn get(&self, i: usize, j: usize) -> PairLabel {
        self.labels[i * self.size() + j]
    }

    pub fn count(&self, label: PairLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Row-major 0/1 mask of POS entries.
    pub fn positive_mask(&self) -> Vec<f64> {
        self.mask(|l| l == PairLabel::Pos)
    }

    /// Row-major 0/1 mask of entries that enter denominators (POS or NEG).
    pub fn denominator_mask(&self) -> Vec<f64> {
        self.mask(|l| l != PairLabel::Excl)
    }

    fn mask(&self, f: impl Fn(PairLabel) -> bool) -> Vec<f64> {
        self.labels.iter().map(|l| if f(*l) { 1.0 } else { 0.0 }).collect()
    }

    /// One line of `P`/`N`/`E` characters per row.
    pub fn to_grid(&self) -> String {
        self.to_string()
    }

    /// Parses a `P`/`N`/`E` grid into a square label table.
    pub fn parse_grid(text: &str) -> Result<Vec<Vec<PairLabel>>> {
        let rows: Vec<Vec<PairLabel>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.chars()
                    .map(|c| {
                        PairLabel::from_char(c)
                            .ok_or_else(|| validation(format!("unexpected grid character {c:?}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        if rows.iter().any(|r| r.len() != rows.len()) {
            return Err(validation("pair grid is not square"));
        }
        Ok(rows)
    }
}

impl fmt::Display for PairLabelMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.labels.chunks(self.size()) {
            for l in row {
                write!(f, "{}", l.as_char())?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn build_pair_labels(b: usize, k: usize, design: MatrixDesign) -> Result<PairLabelMatrix> {
    PairLabelMatrix::new(b, k, design, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_case() {
        let m = build_pair_labels(1, 1, MatrixDesign::A).unwrap();
        assert_eq!(m.to_grid(), "EPN\nPEN\nNNE\n");
        let m = build_pair_labels(1, 1, MatrixDesign::B).unwrap();
        assert_eq!(m.to_grid(), "EPE\nPEE\nEEE\n");
    }

    #[test]
    fn symmetric_with_excluded_diagonal() {
        for design in [MatrixDesign::A, MatrixDesign::B] {
            let m = build_pair_labels(3, 4, design).unwrap();
            for i in 0..m.size() {
                assert_eq!(m.get(i, i), PairLabel::Excl);
                for j in 0..m.size() {
                    assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }
    }

    #[test]
    fn two_branch_matrix() {
        let m = PairLabelMatrix::new(2, 2, MatrixDesign::B, false).unwrap();
        assert_eq!(m.size(), 8);
        assert_eq!(m.count(PairLabel::Pos), 8);
        assert_eq!(m.count(PairLabel::Excl), 8);
    }

    #[test]
    fn grid_round_trip() {
        let m = build_pair_labels(2, 2, MatrixDesign::B).unwrap();
        let parsed = PairLabelMatrix::parse_grid(&m.to_grid()).unwrap();
        for (i, row) in parsed.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                assert_eq!(*l, m.get(i, j));
            }
        }
        assert!(PairLabelMatrix::parse_grid("EP\nPX\n").is_err());
        assert!(PairLabelMatrix::parse_grid("EPN\nPE\n").is_err());
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(build_pair_labels(0, 1, MatrixDesign::A).is_err());
        assert!(build_pair_labels(1, 0, MatrixDesign::A).is_err());
    }
}
