use super::{FrictionDataset, MaterialLibrary};
use crate::error::{Error, Result};

/// Rectangular measurement block, e.g. nonfabric rows × fabric columns.
/// `values[c][r * cols.len() + k]` holds channel `c` of cell `(rows[r], cols[k])`.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl Block {
    pub fn observed(&self) -> usize {
        self.values
            .iter()
            .map(|ch| ch.iter().filter(|v| v.is_some()).count())
            .sum()
    }
}

const CONFLICT_TOL: f64 = 1e-12;

/// Assemble an incomplete block matrix. Every block cell `(r, k)` is also
/// written to its transpose `(k, r)` on the partner channel; cells no block
/// covers stay unobserved.
pub fn assemble_blocks(
    library: MaterialLibrary,
    channels: Vec<String>,
    mu_max: f64,
    blocks: &[Block],
) -> Result<FrictionDataset> {
    let mut ds = FrictionDataset::new(library, channels, mu_max)?;
    let nc = ds.n_channels();
    for block in blocks {
        let rows: Vec<usize> = block
            .rows
            .iter()
            .map(|r| ds.library().index_of(r))
            .collect::<Result<_>>()?;
        let cols: Vec<usize> = block
            .cols
            .iter()
            .map(|r| ds.library().index_of(r))
            .collect::<Result<_>>()?;
        if block.values.len() != nc {
            return Err(Error::Assembly(format!(
                "block `{}` has {} channels, dataset has {nc}",
                block.name,
                block.values.len()
            )));
        }
        for (c, vals) in block.values.iter().enumerate() {
            if vals.len() != rows.len() * cols.len() {
                return Err(Error::Assembly(format!(
                    "block `{}` channel {c}: {} cells for a {}×{} block",
                    block.name,
                    vals.len(),
                    rows.len(),
                    cols.len()
                )));
            }
            let pc = ds.partner(c);
            for (r, &i) in rows.iter().enumerate() {
                for (k, &j) in cols.iter().enumerate() {
                    let Some(v) = vals[r * cols.len() + k] else {
                        continue;
                    };
                    for (a, b, ch) in [(i, j, c), (j, i, pc)] {
                        if let Some(old) = ds.get(a, b, ch) {
                            if (old - v).abs() > CONFLICT_TOL {
                                return Err(Error::Assembly(format!(
                                    "block `{}` conflicts at ({}, {}, {}): {old} vs {v}",
                                    block.name,
                                    ds.library().name(a),
                                    ds.library().name(b),
                                    ds.channels()[ch]
                                )));
                            }
                        }
                        ds.set(a, b, ch, v)?;
                    }
                }
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MaterialClass;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn single_block_identity() {
        let lib = MaterialLibrary::numbered(2);
        let block = Block {
            name: "all".into(),
            rows: lib.names().to_vec(),
            cols: lib.names().to_vec(),
            values: vec![vec![Some(0.5), Some(0.4), Some(0.4), Some(0.6)]],
        };
        let ds = assemble_blocks(lib, vec!["s".into()], 2.0, &[block]).unwrap();
        assert_eq!(ds.get(0, 1, 0), Some(0.4));
        assert_eq!(ds.observed_count(), 4);
    }

    #[test]
    fn conflicting_blocks_rejected() {
        let lib = MaterialLibrary::numbered(2);
        let a = Block {
            name: "a".into(),
            rows: vec!["m0".into()],
            cols: vec!["m1".into()],
            values: vec![vec![Some(0.4)]],
        };
        let b = Block {
            name: "b".into(),
            rows: vec!["m1".into()],
            cols: vec!["m0".into()],
            values: vec![vec![Some(0.5)]],
        };
        let r = assemble_blocks(lib, vec!["s".into()], 2.0, &[a, b]);
        assert!(matches!(r, Err(Error::Assembly(_))));
    }

    #[test]
    fn unknown_material_rejected() {
        let lib = MaterialLibrary::numbered(2);
        let a = Block {
            name: "a".into(),
            rows: vec!["zz".into()],
            cols: vec!["m0".into()],
            values: vec![vec![Some(0.4)]],
        };
        assert!(assemble_blocks(lib, vec!["s".into()], 2.0, &[a]).is_err());
    }

    #[test]
    fn fabric_block_layout() {
        let knit = names("k", 12);
        let woven = names("w", 18);
        let nonfab = names("n", 10);
        let mut all = knit.clone();
        all.extend(woven.clone());
        all.extend(nonfab.clone());
        let mut classes = vec![MaterialClass::Knit; 12];
        classes.extend(vec![MaterialClass::Woven; 18]);
        classes.extend(vec![MaterialClass::Nonfabric; 10]);
        let lib = MaterialLibrary::new(all, classes).unwrap();

        // intra-class blocks as upper triangles incl. diagonal
        let tri = |m: usize| -> Vec<Option<f64>> {
            (0..m * m)
                .map(|x| (x / m <= x % m).then_some(0.3 + 0.001 * x as f64))
                .collect()
        };
        let mut fabric_cols = knit.clone();
        fabric_cols.extend(woven[..12].iter().cloned());
        let blocks = vec![
            Block {
                name: "knit".into(),
                rows: knit.clone(),
                cols: knit.clone(),
                values: vec![tri(12)],
            },
            Block {
                name: "woven".into(),
                rows: woven.clone(),
                cols: woven.clone(),
                values: vec![tri(18)],
            },
            Block {
                name: "nonfabric".into(),
                rows: nonfab.clone(),
                cols: fabric_cols,
                values: vec![(0..240).map(|x| Some(0.2 + 0.001 * x as f64)).collect()],
            },
        ];
        let expected: usize = blocks.iter().map(|b| 2 * b.observed()).sum::<usize>() - 12 - 18;
        let ds = assemble_blocks(lib, vec!["iso".into()], 2.0, &blocks).unwrap();
        assert_eq!(ds.n(), 40);
        assert_eq!(ds.observed_count(), expected);
        for i in 30..40 {
            for j in 30..40 {
                assert!(!ds.observed(i, j, 0));
            }
        }
        // knit–woven is withheld entirely
        assert!(!ds.observed(0, 12, 0));
        // only 12 of the 18 wovens meet nonfabrics
        assert!(ds.observed(30, 12 + 11, 0));
        assert!(!ds.observed(30, 12 + 12, 0));
        ds.check_invariants(true).unwrap();
    }
}
