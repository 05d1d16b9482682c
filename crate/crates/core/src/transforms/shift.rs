use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotate,
    Perm,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotate" => Ok(ShiftKind::Rotate),
            "perm" => Ok(ShiftKind::Perm),
            other => Err(validation(format!("unknown shift kind {other:?}"))),
        }
    }
}

/// One parameter-free pixel bijection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shift {
    /// Counter-clockwise quarter turns, `0..4`.
    Rotate(u8),
    /// Output tile `i` (row-major over a 2×2 grid) is input tile `tiles[i]`.
    Permute([u8; 4]),
}

/// Number of 2×2 tile permutations available to [`ShiftKind::Perm`].
pub const PERM_COUNT: usize = 24;

fn all_permutations() -> Vec<[u8; 4]> {
    let mut out = vec![[0, 1, 2, 3], [1, 0, 3, 2], [2, 3, 0, 1], [3, 2, 1, 0]];
    for a in 0..4u8 {
        for b in 0..4u8 {
            for c in 0..4u8 {
                for d in 0..4u8 {
                    let p = [a, b, c, d];
                    let distinct = (0..4).all(|i| (i + 1..4).all(|j| p[i] != p[j]));
                    if distinct && !out.contains(&p) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

impl Shift {
    pub fn identity() -> Self {
        Shift::Rotate(0)
    }

    pub fn inverse(self) -> Self {
        match self {
            Shift::Rotate(q) => Shift::Rotate((4 - q % 4) % 4),
            Shift::Permute(p) => {
                let mut inv = [0u8; 4];
                for (i, &src) in p.iter().enumerate() {
                    inv[src as usize] = i as u8;
                }
                Shift::Permute(inv)
            }
        }
    }

    /// Checks that the shift is defined for a `height × width` image.
    pub fn check(self, height: usize, width: usize) -> Result<()> {
        match self {
            Shift::Rotate(q) if q % 2 == 1 && height != width => Err(Error::Shape(format!(
                "quarter-turn rotation needs a square image, got {height}×{width}"
            ))),
            Shift::Permute(p) if p != [0, 1, 2, 3] && (height % 2 != 0 || width % 2 != 0) => {
                Err(Error::Shape(format!(
                    "tile permutation needs even sides, got {height}×{width}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(self, img: &Image) -> Result<Image> {
        let (c, h, w) = img.shape();
        self.check(h, w)?;
        let mut out = Image::zeros(c, h, w);
        match self {
            Shift::Rotate(q) => {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            // One counter-clockwise turn: out[y][x] = in[x][n-1-y].
                            let (sy, sx) = match q % 4 {
                                0 => (y, x),
                                1 => (x, w - 1 - y),
                                2 => (h - 1 - y, w - 1 - x),
                                _ => (h - 1 - x, y),
                            };
                            out.set(ch, y, x, img.get(ch, sy, sx));
                        }
                    }
                }
            }
            Shift::Permute(p) if p == [0, 1, 2, 3] => return Ok(img.clone()),
            Shift::Permute(p) => {
                let (th, tw) = (h / 2, w / 2);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let src = p[(y / th) * 2 + x / tw] as usize;
                            let sy = (src / 2) * th + y % th;
                            let sx = (src % 2) * tw + x % tw;
                            out.set(ch, y, x, img.get(ch, sy, sx));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `K` shifting transformations with the identity first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftSet {
    kind: ShiftKind,
    shifts: Vec<Shift>,
}

impl ShiftSet {
    pub fn new(kind: ShiftKind, k: usize) -> Result<Self> {
        let shifts = match kind {
            ShiftKind::Rotate => match k {
                1 => vec![Shift::Rotate(0)],
                2 => vec![Shift::Rotate(0), Shift::Rotate(2)],
                4 => (0..4).map(Shift::Rotate).collect(),
                _ => {
                    return Err(validation(format!(
                        "rotation shifts need K in {{1, 2, 4}}, got {k}"
                    )))
                }
            },
            ShiftKind::Perm => {
                if k == 0 || k > PERM_COUNT {
                    return Err(validation(format!(
                        "permutation shifts need 1 <= K <= {PERM_COUNT}, got {k}"
                    )));
                }
                all_permutations().into_iter().take(k).map(Shift::Permute).collect()
            }
        };
        Ok(Self { kind, shifts })
    }

    pub fn kind(&self) -> ShiftKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn shifts(&self) -> &[Shift] {
        &self.shifts
    }

    pub fn get(&self, k: usize) -> Shift {
        self.shifts[k]
    }

    pub fn apply(&self, k: usize, img: &Image) -> Result<Image> {
        self.shifts
            .get(k)
            .ok_or_else(|| validation(format!("shift index {k} outside 0..{}", self.len())))?
            .apply(img)
    }
}

pub fn make_shift_set(kind: ShiftKind, k: usize) -> Result<ShiftSet> {
    ShiftSet::new(kind, k)
}
