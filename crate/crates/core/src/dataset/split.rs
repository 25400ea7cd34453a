use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FrictionDataset, MaterialClass};
use crate::error::{Error, Result};

/// Disjoint unordered-pair sets. Each pair is `(i, j)` with `i <= j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum SplitScheme {
    /// Shuffled proportions; the remainder after train and val goes to test.
    Random { train: f64, val: f64 },
    /// K folds; fold `i` is the test set of split `i`.
    KFold { k: usize },
    /// All pairs touching the material go to test. `None` yields one split
    /// per material.
    LeaveOneMaterialOut { material: Option<usize> },
    /// All pairs crossing the two classes go to test.
    LeaveBlockOut { a: MaterialClass, b: MaterialClass },
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Random {
            train: 0.70,
            val: 0.15,
        }
    }
}

/// Fraction of non-test pairs used for validation in the held-out schemes.
const HOLDOUT_VAL_FRACTION: f64 = 0.15;

fn carve_val(
    mut rest: Vec<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    rest.shuffle(rng);
    let n_val = if rest.len() >= 3 {
        ((rest.len() as f64) * HOLDOUT_VAL_FRACTION)
            .round()
            .max(1.0) as usize
    } else {
        0
    };
    let val = rest.split_off(rest.len() - n_val);
    (sorted(rest), sorted(val))
}

fn sorted(mut v: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    v.sort_unstable();
    v
}

/// Partition the observed unordered pairs of `ds`.
pub fn split(ds: &FrictionDataset, scheme: &SplitScheme, seed: u64) -> Result<Vec<Split>> {
    let pairs = ds.observed_pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *scheme {
        SplitScheme::Random { train, val } => {
            if !(train > 0.0 && val >= 0.0 && train + val < 1.0) {
                return Err(Error::Split(format!("bad proportions {train}/{val}")));
            }
            if pairs.len() < 3 {
                return Err(Error::Split(format!(
                    "need at least 3 observed pairs, have {}",
                    pairs.len()
                )));
            }
            let n = pairs.len();
            let n_train = ((n as f64) * train).round().clamp(1.0, (n - 2) as f64) as usize;
            let n_val = ((n as f64) * val)
                .round()
                .clamp(0.0, (n - n_train - 1) as f64) as usize;
            let mut shuffled = pairs;
            shuffled.shuffle(&mut rng);
            let test = shuffled.split_off(n_train + n_val);
            let val = shuffled.split_off(n_train);
            Ok(vec![Split {
                train: sorted(shuffled),
                val: sorted(val),
                test: sorted(test),
            }])
        }
        SplitScheme::KFold { k } => {
            if k < 2 || pairs.len() < k {
                return Err(Error::Split(format!(
                    "k-fold needs 2 <= k <= {} pairs, got k = {k}",
                    pairs.len()
                )));
            }
            let mut shuffled = pairs;
            shuffled.shuffle(&mut rng);
            let folds: Vec<Vec<(usize, usize)>> = (0..k)
                .map(|f| shuffled.iter().skip(f).step_by(k).copied().collect())
                .collect();
            Ok((0..k)
                .map(|f| {
                    let rest: Vec<_> = folds
                        .iter()
                        .enumerate()
                        .filter(|&(g, _)| g != f)
                        .flat_map(|(_, p)| p.iter().copied())
                        .collect();
                    let (train, val) = carve_val(rest, &mut rng);
                    Split {
                        train,
                        val,
                        test: sorted(folds[f].clone()),
                    }
                })
                .collect())
        }
        SplitScheme::LeaveOneMaterialOut { material } => {
            let targets: Vec<usize> = match material {
                Some(m) if m < ds.n() => vec![m],
                Some(m) => {
                    return Err(Error::Lookup {
                        kind: "material",
                        name: m.to_string(),
                    })
                }
                None => (0..ds.n()).collect(),
            };
            targets
                .into_iter()
                .map(|m| {
                    let (test, rest): (Vec<_>, Vec<_>) =
                        pairs.iter().partition(|&&(i, j)| i == m || j == m);
                    if test.is_empty() || rest.is_empty() {
                        return Err(Error::Split(format!(
                            "material {m} leaves an empty train or test set"
                        )));
                    }
                    let (train, val) = carve_val(rest, &mut rng);
                    Ok(Split { train, val, test })
                })
                .collect()
        }
        SplitScheme::LeaveBlockOut { a, b } => {
            let lib = ds.library();
            let crosses = |i: usize, j: usize| {
                let (ci, cj) = (lib.class(i), lib.class(j));
                (ci == a && cj == b) || (ci == b && cj == a)
            };
            let (test, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|&&(i, j)| crosses(i, j));
            if test.is_empty() || rest.is_empty() {
                return Err(Error::Split(format!(
                    "block {a}–{b} leaves an empty train or test set"
                )));
            }
            let (train, val) = carve_val(rest, &mut rng);
            Ok(vec![Split { train, val, test }])
        }
    }
}
