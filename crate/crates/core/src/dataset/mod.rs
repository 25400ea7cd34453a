//! Friction matrices with observation masks.
//!
//! A [`FrictionDataset`] holds an `n × n × C` array of coefficients over a
//! material library, one slice per channel. Unobserved cells store `0.0`
//! and a cleared mask bit; NaN never appears internally.
//!
//! Single-orientation channels (isotropic, static, kinetic) are symmetric
//! under material swap. Orientation channels pair by transposition instead:
//! `value(i, j, wf) == value(j, i, fw)`.

mod blocks;
pub mod io;
mod split;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blocks::{assemble_blocks, Block};
pub use split::{split, Split, SplitScheme};

pub const DEFAULT_MU_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialClass {
    Knit,
    Woven,
    Nonfabric,
    Other,
}

impl MaterialClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MaterialClass::Knit => "knit",
            MaterialClass::Woven => "woven",
            MaterialClass::Nonfabric => "nonfabric",
            MaterialClass::Other => "other",
        }
    }
}

impl fmt::Display for MaterialClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaterialClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "knit" => Ok(MaterialClass::Knit),
            "woven" => Ok(MaterialClass::Woven),
            "nonfabric" | "non-fabric" => Ok(MaterialClass::Nonfabric),
            "other" | "" => Ok(MaterialClass::Other),
            other => Err(Error::schema(format!("unknown material class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialLibrary {
    names: Vec<String>,
    classes: Vec<MaterialClass>,
}

impl MaterialLibrary {
    pub fn new(names: Vec<String>, classes: Vec<MaterialClass>) -> Result<Self> {
        if names.len() != classes.len() {
            return Err(Error::schema(format!(
                "{} material names but {} classes",
                names.len(),
                classes.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::schema(format!("duplicate material name `{name}`")));
            }
        }
        Ok(MaterialLibrary { names, classes })
    }

    /// Library of `n` materials named `m0, m1, …` with class `other`.
    pub fn numbered(n: usize) -> Self {
        MaterialLibrary {
            names: (0..n).map(|i| format!("m{i}")).collect(),
            classes: vec![MaterialClass::Other; n],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn classes(&self) -> &[MaterialClass] {
        &self.classes
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup {
                kind: "material",
                name: name.to_string(),
            })
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn class(&self, i: usize) -> MaterialClass {
        self.classes[i]
    }
}

/// Row of the friction matrix for one material, with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionVector {
    pub u: Vec<f64>,
    pub s: Vec<bool>,
}

/// Interaction vector gathered at the proxy materials.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyVector {
    pub v: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionDataset {
    library: MaterialLibrary,
    channels: Vec<String>,
    values: Vec<f64>,
    mask: Vec<bool>,
    mu_max: f64,
}

/// Channel paired with `c` under material swap: `wf` ↔ `fw`, everything
/// else pairs with itself. Labels may carry a regime prefix (`static_wf`).
pub fn transpose_label(label: &str) -> String {
    if let Some(stem) = label.strip_suffix("wf") {
        format!("{stem}fw")
    } else if let Some(stem) = label.strip_suffix("fw") {
        format!("{stem}wf")
    } else {
        label.to_string()
    }
}

impl FrictionDataset {
    /// Empty (fully unobserved) dataset.
    pub fn new(library: MaterialLibrary, channels: Vec<String>, mu_max: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::schema("dataset needs at least one channel"));
        }
        if !(mu_max > 0.0 && mu_max.is_finite()) {
            return Err(Error::schema(format!(
                "mu_max must be positive, got {mu_max}"
            )));
        }
        let mut seen = HashSet::new();
        for c in &channels {
            if !seen.insert(c.as_str()) {
                return Err(Error::schema(format!("duplicate channel `{c}`")));
            }
        }
        for c in &channels {
            let t = transpose_label(c);
            if !seen.contains(t.as_str()) {
                return Err(Error::schema(format!(
                    "orientation channel `{c}` needs its transpose partner `{t}`"
                )));
            }
        }
        let len = library.len() * library.len() * channels.len();
        Ok(FrictionDataset {
            library,
            channels,
            values: vec![0.0; len],
            mask: vec![false; len],
            mu_max,
        })
    }

    /// Fully observed single-channel dataset from a square matrix in row-major order.
    pub fn from_dense(
        library: MaterialLibrary,
        channel: &str,
        matrix: &[f64],
        mu_max: f64,
    ) -> Result<Self> {
        let n = library.len();
        if matrix.len() != n * n {
            return Err(Error::shape("from_dense", &[matrix.len()], &[n, n]));
        }
        let mut ds = FrictionDataset::new(library, vec![channel.to_string()], mu_max)?;
        for i in 0..n {
            for j in 0..n {
                ds.set(i, j, 0, matrix[i * n + j])?;
            }
        }
        Ok(ds)
    }

    pub fn library(&self) -> &MaterialLibrary {
        &self.library
    }

    pub fn n(&self) -> usize {
        self.library.len()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn mu_max(&self) -> f64 {
        self.mu_max
    }

    pub fn channel_index(&self, label: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Lookup {
                kind: "channel",
                name: label.to_string(),
            })
    }

    /// Index of the channel that pairs with `c` under transposition.
    pub fn partner(&self, c: usize) -> usize {
        let label = transpose_label(&self.channels[c]);
        self.channels
            .iter()
            .position(|x| *x == label)
            .expect("partner presence checked at construction")
    }

    fn idx(&self, i: usize, j: usize, c: usize) -> usize {
        let n = self.n();
        (c * n + i) * n + j
    }

    pub fn value(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[self.idx(i, j, c)]
    }

    pub fn observed(&self, i: usize, j: usize, c: usize) -> bool {
        self.mask[self.idx(i, j, c)]
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> Option<f64> {
        let k = self.idx(i, j, c);
        self.mask[k].then(|| self.values[k])
    }

    /// Record an observation; rejects values outside `[0, mu_max]`.
    pub fn set(&mut self, i: usize, j: usize, c: usize, value: f64) -> Result<()> {
        if !(0.0..=self.mu_max).contains(&value) {
            return Err(Error::domain(format!(
                "coefficient {value} at ({i}, {j}, {}) outside [0, {}]",
                self.channels[c], self.mu_max
            )));
        }
        let k = self.idx(i, j, c);
        self.values[k] = value;
        self.mask[k] = true;
        Ok(())
    }

    /// Record an observation after clamping into `[0, mu_max]`.
    pub fn set_clamped(&mut self, i: usize, j: usize, c: usize, value: f64) {
        let v = value.clamp(0.0, self.mu_max);
        let k = self.idx(i, j, c);
        self.values[k] = v;
        self.mask[k] = true;
    }

    pub fn clear(&mut self, i: usize, j: usize, c: usize) {
        let k = self.idx(i, j, c);
        self.values[k] = 0.0;
        self.mask[k] = false;
    }

    /// Number of observed cells across all channels.
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn channel_observed_count(&self, c: usize) -> usize {
        let n = self.n();
        self.mask[c * n * n..(c + 1) * n * n]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Unordered pairs `(i, j)` with `i <= j` observed in at least one
    /// channel (either orientation), in lexicographic order.
    pub fn observed_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i..n {
                if (0..self.n_channels()).any(|c| self.observed(i, j, c) || self.observed(j, i, c))
                {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Observed target for the unordered pair `(a, b)` on channel `c`,
    /// falling back to the transpose partner cell.
    pub fn pair_value(&self, a: usize, b: usize, c: usize) -> Option<f64> {
        self.get(a, b, c)
            .or_else(|| self.get(b, a, self.partner(c)))
    }

    /// Copy of the dataset keeping only the listed unordered pairs (both
    /// cell orders, every channel).
    pub fn restrict_to_pairs(&self, pairs: &[(usize, usize)]) -> FrictionDataset {
        let n = self.n();
        let mut keep = vec![false; n * n];
        for &(a, b) in pairs {
            keep[a * n + b] = true;
            keep[b * n + a] = true;
        }
        let mut out = self.clone();
        for c in 0..self.n_channels() {
            for i in 0..n {
                for j in 0..n {
                    if !keep[i * n + j] {
                        out.clear(i, j, c);
                    }
                }
            }
        }
        out
    }

    /// Copy of the dataset with the listed unordered pairs removed.
    pub fn without_pairs(&self, pairs: &[(usize, usize)]) -> FrictionDataset {
        let mut out = self.clone();
        for &(a, b) in pairs {
            for c in 0..self.n_channels() {
                out.clear(a, b, c);
                out.clear(b, a, c);
            }
        }
        out
    }

    /// Single-channel view.
    pub fn select_channels(&self, labels: &[&str]) -> Result<FrictionDataset> {
        let idx: Vec<usize> = labels
            .iter()
            .map(|l| self.channel_index(l))
            .collect::<Result<_>>()?;
        let mut out = FrictionDataset::new(
            self.library.clone(),
            labels.iter().map(|s| s.to_string()).collect(),
            self.mu_max,
        )?;
        let n = self.n();
        for (new_c, &old_c) in idx.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    if let Some(v) = self.get(i, j, old_c) {
                        out.set_clamped(i, j, new_c, v);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn interaction_vector(&self, a: usize, c: usize) -> Result<InteractionVector> {
        self.check_material(a)?;
        self.check_channel(c)?;
        let n = self.n();
        let mut u = vec![0.0; n];
        let mut s = vec![false; n];
        for i in 0..n {
            if let Some(v) = self.get(a, i, c) {
                u[i] = v;
                s[i] = true;
            }
        }
        Ok(InteractionVector { u, s })
    }

    pub fn proxy_vector(&self, a: usize, proxies: &[usize], c: usize) -> Result<ProxyVector> {
        for &p in proxies {
            self.check_material(p)?;
        }
        let iv = self.interaction_vector(a, c)?;
        Ok(ProxyVector {
            v: proxies.iter().map(|&p| iv.u[p]).collect(),
            mask: proxies.iter().map(|&p| iv.s[p]).collect(),
        })
    }

    fn check_material(&self, a: usize) -> Result<()> {
        if a >= self.n() {
            return Err(Error::Lookup {
                kind: "material",
                name: a.to_string(),
            });
        }
        Ok(())
    }

    fn check_channel(&self, c: usize) -> Result<()> {
        if c >= self.n_channels() {
            return Err(Error::Lookup {
                kind: "channel",
                name: c.to_string(),
            });
        }
        Ok(())
    }

    /// Enforce swap symmetry: cells observed in both orders become their
    /// mean, singly observed cells are mirrored. Orientation channels pair
    /// `(i, j, wf)` with `(j, i, fw)`.
    pub fn symmetrize(&self) -> FrictionDataset {
        let n = self.n();
        let mut out = self.clone();
        for c in 0..self.n_channels() {
            let pc = self.partner(c);
            for i in 0..n {
                for j in 0..n {
                    // visit each (cell, partner cell) pair once
                    if (pc, j, i) < (c, i, j) {
                        continue;
                    }
                    match (self.get(i, j, c), self.get(j, i, pc)) {
                        (Some(a), Some(b)) => {
                            let m = 0.5 * (a + b);
                            out.set_clamped(i, j, c, m);
                            out.set_clamped(j, i, pc, m);
                        }
                        (Some(a), None) => out.set_clamped(j, i, pc, a),
                        (None, Some(b)) => out.set_clamped(i, j, c, b),
                        (None, None) => {}
                    }
                }
            }
        }
        out
    }

    /// Dense row-major matrix for one channel plus its mask.
    pub fn channel_matrix(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        let n = self.n();
        let r = c * n * n..(c + 1) * n * n;
        (self.values[r.clone()].to_vec(), self.mask[r].to_vec())
    }

    /// Validate the stored invariants (range, transpose pairing of masks).
    pub fn check_invariants(&self, require_symmetric: bool) -> Result<()> {
        let n = self.n();
        for c in 0..self.n_channels() {
            let pc = self.partner(c);
            for i in 0..n {
                for j in 0..n {
                    if let Some(v) = self.get(i, j, c) {
                        if !(0.0..=self.mu_max).contains(&v) {
                            return Err(Error::domain(format!("value {v} outside [0, mu_max]")));
                        }
                    }
                    if require_symmetric && self.get(i, j, c) != self.get(j, i, pc) {
                        return Err(Error::schema(format!(
                            "cell ({i}, {j}, {}) breaks transpose pairing",
                            self.channels[c]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
