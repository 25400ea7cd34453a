//! Synthetic friction datasets with known low-rank ground truth.
//!
//! The base channel is a Gram matrix `A·Aᵀ / r` with `A` drawn i.i.d.
//! standard normal, affinely mapped onto `mu_range`. Further channels are
//! derived from it:
//!
//! * `kinetic<suffix>` next to `static<suffix>`: `c·μ_s + ε`, clipped into
//!   `[0, μ_s]`;
//! * any other channel: a perturbation with correlation `channel_correlation`
//!   to the base (asymmetric for `wf`, whose `fw` partner is its transpose).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{io, FrictionDataset, MaterialClass, MaterialLibrary, DEFAULT_MU_MAX};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Coverage of one class-pair block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "coverage")]
pub enum Coverage {
    Full,
    Missing,
    /// Only the first `rows` members of the first class meet the first
    /// `cols` members of the second.
    Partial {
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRule {
    pub a: MaterialClass,
    pub b: MaterialClass,
    pub coverage: Coverage,
}

/// Class sizes (in library order) and block coverage. Class pairs without
/// a rule are missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub classes: Vec<(MaterialClass, usize)>,
    pub rules: Vec<BlockRule>,
}

impl BlockLayout {
    /// 12 knits, 18 wovens, 10 non-fabrics: complete intra-fabric blocks,
    /// knit–woven only for 3 knits, non-fabrics against all knits and 12
    /// wovens, no non-fabric–non-fabric pairs.
    pub fn fabric_campaign() -> Self {
        use MaterialClass::*;
        BlockLayout {
            classes: vec![(Knit, 12), (Woven, 18), (Nonfabric, 10)],
            rules: vec![
                BlockRule {
                    a: Knit,
                    b: Knit,
                    coverage: Coverage::Full,
                },
                BlockRule {
                    a: Woven,
                    b: Woven,
                    coverage: Coverage::Full,
                },
                BlockRule {
                    a: Knit,
                    b: Woven,
                    coverage: Coverage::Partial { rows: 3, cols: 18 },
                },
                BlockRule {
                    a: Nonfabric,
                    b: Knit,
                    coverage: Coverage::Full,
                },
                BlockRule {
                    a: Nonfabric,
                    b: Woven,
                    coverage: Coverage::Partial { rows: 10, cols: 12 },
                },
                BlockRule {
                    a: Nonfabric,
                    b: Nonfabric,
                    coverage: Coverage::Missing,
                },
            ],
        }
    }

    pub fn n(&self) -> usize {
        self.classes.iter().map(|c| c.1).sum()
    }

    fn class_of(&self) -> Vec<(MaterialClass, usize)> {
        self.classes
            .iter()
            .flat_map(|&(c, k)| (0..k).map(move |i| (c, i)))
            .collect()
    }

    /// Whether the layout admits a measurement between materials `i`, `j`.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        let members = self.class_of();
        let ((ci, ri), (cj, rj)) = (members[i], members[j]);
        for rule in &self.rules {
            let (first, second) = if rule.a == ci && rule.b == cj {
                (ri, rj)
            } else if rule.a == cj && rule.b == ci {
                (rj, ri)
            } else {
                continue;
            };
            return match rule.coverage {
                Coverage::Full => true,
                Coverage::Missing => false,
                Coverage::Partial { rows, cols } => {
                    let direct = first < rows && second < cols;
                    // the same class on both sides covers the square either way
                    direct || (rule.a == rule.b && second < rows && first < cols)
                }
            };
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub rank: usize,
    pub channels: Vec<String>,
    pub noise_std: f64,
    pub missing_rate: f64,
    pub mu_range: [f64; 2],
    pub mu_max: f64,
    /// Map the base Gram matrix affinely onto `mu_range`.
    pub rescale: bool,
    /// `c` in `μ_k = c·μ_s + ε`.
    pub kinetic_ratio: f64,
    pub kinetic_noise: f64,
    /// Target correlation of perturbed channels with the base channel.
    pub channel_correlation: f64,
    /// Overrides `n` and assigns material classes.
    pub layout: Option<BlockLayout>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 30,
            rank: 3,
            channels: vec!["static".into()],
            noise_std: 0.01,
            missing_rate: 0.1,
            mu_range: [0.2, 1.2],
            mu_max: DEFAULT_MU_MAX,
            rescale: true,
            kinetic_ratio: 0.8,
            kinetic_noise: 0.01,
            channel_correlation: 0.9,
            layout: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let n = self.size();
        if n == 0 || self.rank == 0 || self.rank > n {
            return Err(Error::domain(format!(
                "need 1 <= rank <= n, got rank {} and n {n}",
                self.rank
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::domain("at least one channel is required"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::domain(format!(
                "missing_rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        let [lo, hi] = self.mu_range;
        if !(0.0 <= lo && lo < hi && hi <= self.mu_max) {
            return Err(Error::domain(format!(
                "mu_range [{lo}, {hi}] must lie within [0, {}]",
                self.mu_max
            )));
        }
        if !(self.kinetic_ratio > 0.0 && self.kinetic_ratio < 1.0) {
            return Err(Error::domain(format!(
                "kinetic_ratio {} outside (0, 1)",
                self.kinetic_ratio
            )));
        }
        if !(-1.0..=1.0).contains(&self.channel_correlation) {
            return Err(Error::domain("channel_correlation outside [-1, 1]"));
        }
        if self.noise_std < 0.0 || self.kinetic_noise < 0.0 {
            return Err(Error::domain("noise levels must be nonnegative"));
        }
        Ok(())
    }

    fn size(&self) -> usize {
        self.layout.as_ref().map_or(self.n, BlockLayout::n)
    }
}

/// Generated dataset with its noiseless, fully observed ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthetic {
    pub dataset: FrictionDataset,
    /// One `n × n` matrix per channel.
    pub truth: Vec<Matrix>,
    /// Upper bound on the rank of the base channel's ground truth.
    pub rank_bound: usize,
}

fn gram(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Matrix {
    let a: Vec<f64> = (0..n * r).map(|_| StandardNormal.sample(rng)).collect();
    let mut f = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            f[(i, j)] = (0..r).map(|k| a[i * r + k] * a[j * r + k]).sum::<f64>() / r as f64;
        }
    }
    f
}

fn cross(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Matrix {
    let a: Vec<f64> = (0..n * r).map(|_| StandardNormal.sample(rng)).collect();
    let b: Vec<f64> = (0..n * r).map(|_| StandardNormal.sample(rng)).collect();
    let mut f = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            f[(i, j)] = (0..r).map(|k| a[i * r + k] * b[j * r + k]).sum::<f64>() / r as f64;
        }
    }
    f
}

fn mean_std(m: &Matrix) -> (f64, f64) {
    let d = m.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
    (mean, var.sqrt())
}

fn map_entries(m: &Matrix, f: impl Fn(usize, usize, f64) -> f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[(i, j)] = f(i, j, m[(i, j)]);
        }
    }
    out
}

/// Low-rank dataset (block-structured when the spec carries a layout).
pub fn gen_lowrank(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let n = spec.size();
    let r = spec.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let library = match &spec.layout {
        Some(layout) => {
            let mut names = Vec::with_capacity(n);
            let mut classes = Vec::with_capacity(n);
            for &(class, k) in &layout.classes {
                for i in 0..k {
                    names.push(format!("{}{:02}", class.as_str(), i));
                    classes.push(class);
                }
            }
            MaterialLibrary::new(names, classes)?
        }
        None => MaterialLibrary::numbered(n),
    };
    let mut ds = FrictionDataset::new(library, spec.channels.clone(), spec.mu_max)?;
    let n_ch = spec.channels.len();
    let clamp = |v: f64| v.clamp(0.0, spec.mu_max);

    let raw = gram(&mut rng, n, r);
    let base = if spec.rescale {
        let (lo, hi) = raw
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let [tlo, thi] = spec.mu_range;
        let scale = if hi > lo {
            (thi - tlo) / (hi - lo)
        } else {
            0.0
        };
        map_entries(&raw, |_, _, v| tlo + (v - lo) * scale)
    } else {
        raw
    };
    let (bmean, bstd) = mean_std(&base);
    let rho = spec.channel_correlation;

    let mut truth: Vec<Option<Matrix>> = vec![None; n_ch];
    truth[0] = Some(base.clone());
    let is_kinetic_of = |c: usize| -> Option<usize> {
        let rest = spec.channels[c].strip_prefix("kinetic")?;
        spec.channels
            .iter()
            .position(|l| l.strip_prefix("static") == Some(rest))
    };
    // perturbed channels first, then kinetic channels from their static source
    for c in 1..n_ch {
        if is_kinetic_of(c).is_some() {
            continue;
        }
        let p = ds.partner(c);
        if p < c && truth[p].is_some() {
            truth[c] = Some(truth[p].as_ref().expect("checked").transpose());
            continue;
        }
        let pert = if p == c {
            gram(&mut rng, n, r)
        } else {
            cross(&mut rng, n, r)
        };
        let (pm, ps) = mean_std(&pert);
        let ps = if ps > 0.0 { ps } else { 1.0 };
        let m = map_entries(&base, |i, j, v| {
            let z = (pert[(i, j)] - pm) / ps;
            clamp(bmean + rho * (v - bmean) + (1.0 - rho * rho).sqrt() * bstd * z)
        });
        if p != c {
            truth[p] = Some(m.transpose());
        }
        truth[c] = Some(m);
    }
    let kinetic_noise = Normal::new(0.0, spec.kinetic_noise.max(0.0)).expect("finite");
    for c in 0..n_ch {
        let Some(s) = is_kinetic_of(c) else { continue };
        if truth[c].is_some() {
            continue;
        }
        let src = truth[s].clone().unwrap_or_else(|| base.clone());
        let p = ds.partner(c);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            let start = if p == c { i } else { 0 };
            for j in start..n {
                let eps = if spec.kinetic_noise > 0.0 {
                    kinetic_noise.sample(&mut rng)
                } else {
                    0.0
                };
                let v = (spec.kinetic_ratio * src[(i, j)] + eps).clamp(0.0, src[(i, j)]);
                m[(i, j)] = v;
                if p == c {
                    m[(j, i)] = v;
                }
            }
        }
        if p != c {
            truth[p] = Some(m.transpose());
        }
        truth[c] = Some(m);
    }
    let truth: Vec<Matrix> = truth
        .into_iter()
        .map(|t| t.expect("every channel generated"))
        .collect();

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite");
    for c in 0..n_ch {
        let p = ds.partner(c);
        if p < c {
            continue;
        }
        for i in 0..n {
            let start = if p == c { i } else { 0 };
            for j in start..n {
                let allowed = spec.layout.as_ref().is_none_or(|l| l.allows(i, j));
                let drop = spec.missing_rate > 0.0 && rng.random_bool(spec.missing_rate);
                let eps = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                if !allowed || drop {
                    continue;
                }
                let v = clamp(truth[c][(i, j)] + eps);
                ds.set_clamped(i, j, c, v);
                ds.set_clamped(j, i, p, v);
            }
        }
    }
    let rank_bound = if spec.rescale { (r + 1).min(n) } else { r };
    Ok(Synthetic {
        dataset: ds,
        truth,
        rank_bound,
    })
}

/// Block-structured dataset; without a layout this is [`gen_lowrank`].
pub fn gen_blocks(spec: &SynthSpec) -> Result<Synthetic> {
    gen_lowrank(spec)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthSidecar {
    spec: SynthSpec,
    rank_bound: usize,
    channels: Vec<String>,
    truth: Vec<Vec<Vec<f64>>>,
}

/// Write the dataset (manifest plus matrix CSVs) and `truth.json` into
/// `dir`. Returns the manifest path.
pub fn write_synthetic(syn: &Synthetic, spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let manifest = io::write_dataset(&syn.dataset, dir)?;
    let sidecar = TruthSidecar {
        spec: spec.clone(),
        rank_bound: syn.rank_bound,
        channels: syn.dataset.channels().to_vec(),
        truth: syn
            .truth
            .iter()
            .map(|m| (0..m.rows()).map(|i| m.row(i).to_vec()).collect())
            .collect(),
    };
    let path = dir.join("truth.json");
    fs::write(&path, serde_json::to_string(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read the ground-truth matrices written by [`write_synthetic`].
pub fn read_truth(path: &Path) -> Result<Vec<Matrix>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: TruthSidecar = serde_json::from_str(&text)?;
    sidecar
        .truth
        .iter()
        .map(|rows| Matrix::from_rows(rows))
        .collect()
}
