//! Proxy-set selection: spectral (RRQR) selection at a retention level,
//! embedding-preserving mask optimization and minimal-budget search.
//!
//! A mask `m` over the model's input columns restricts every material's
//! interaction vector to the selected columns. Its alignment error is
//! `Σ_A ‖g(u_A) − g(u_A ⊙ m)‖²`. A material left with no observed entry
//! under `m` cannot be encoded; it is charged as if encoded to the mean
//! full embedding `z̄`, so the empty mask scores `Σ_A ‖g(u_A) − z̄‖²`, the
//! baseline against which relative alignment is reported.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::dataset::{FrictionDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{DecoderConfig, EncoderInput, Model};
use crate::spectral::{eig_sym, impute, retention_size, rrqr_select, Imputation, RetentionMode};
use crate::training::{parallel_map, Adam, TrainConfig};

/// Largest library the exhaustive search accepts.
pub const EXHAUSTIVE_MAX_N: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyMethod {
    Rrqr,
    MaskOpt,
    Manual,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxyDiagnostics {
    /// Fraction of spectral energy captured by the leading `k` eigenvalues.
    pub spectral_energy: Option<f64>,
    /// Retention level the budget was derived from.
    pub retention: Option<f64>,
    pub alignment_error: Option<f64>,
    /// Alignment error divided by the empty-mask baseline.
    pub relative_alignment: Option<f64>,
    /// Alignment error after each greedy step, starting from the empty set.
    pub trace: Vec<f64>,
    /// False when the tolerance was not reached within the budget.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySet {
    /// Material indices in selection order.
    pub indices: Vec<usize>,
    pub method: ProxyMethod,
    pub diagnostics: ProxyDiagnostics,
}

impl ProxySet {
    pub fn manual(indices: Vec<usize>, n: usize) -> Result<Self> {
        let set = ProxySet {
            indices,
            method: ProxyMethod::Manual,
            diagnostics: ProxyDiagnostics {
                converged: true,
                ..ProxyDiagnostics::default()
            },
        };
        set.validate(n)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices distinct and below `n`; diagnostics nonnegative.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in &self.indices {
            if i >= n {
                return Err(Error::domain(format!(
                    "proxy index {i} outside library of {n}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::domain(format!("proxy index {i} repeated")));
            }
        }
        let d = &self.diagnostics;
        let values = [d.spectral_energy, d.alignment_error, d.relative_alignment];
        if values
            .iter()
            .flatten()
            .chain(&d.trace)
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::domain("proxy diagnostics must be nonnegative"));
        }
        Ok(())
    }

    /// Boolean mask of length `n`.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }
}

/// Options for spectral selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RrqrOptions {
    pub mode: RetentionMode,
    pub imputation: Imputation,
}

/// Symmetrized and imputed matrix of one channel.
pub fn completed_matrix(
    ds: &FrictionDataset,
    channel: usize,
    imputation: Imputation,
) -> Result<Matrix> {
    if channel >= ds.n_channels() {
        return Err(Error::domain(format!(
            "channel {channel} outside {}",
            ds.n_channels()
        )));
    }
    let sym = ds.symmetrize();
    let (values, mask) = sym.channel_matrix(channel);
    impute(
        &Matrix::from_vec(ds.n(), ds.n(), values)?,
        &mask,
        imputation,
    )
}

/// Budget from the retention level, columns from pivoted QR.
pub fn select_rrqr(
    ds: &FrictionDataset,
    channel: usize,
    retention: f64,
    opts: RrqrOptions,
) -> Result<ProxySet> {
    let f = completed_matrix(ds, channel, opts.imputation)?;
    let spectrum = eig_sym(&f)?;
    let k = retention_size(&spectrum, retention, opts.mode)?;
    let sel = rrqr_select(&f, k)?;
    let total: f64 = spectrum.values.iter().map(|v| v * v).sum();
    let top: f64 = spectrum.values[..k].iter().map(|v| v * v).sum();
    let set = ProxySet {
        indices: sel.indices,
        method: ProxyMethod::Rrqr,
        diagnostics: ProxyDiagnostics {
            spectral_energy: Some(top / total),
            retention: Some(retention),
            converged: true,
            ..ProxyDiagnostics::default()
        },
    };
    set.validate(ds.n())?;
    Ok(set)
}

/// Per-entry keep flags for a column mask: the model's input is laid out
/// channel-major over its columns.
fn entry_keep(model: &Model, column_mask: &[bool]) -> Result<Vec<bool>> {
    let cols = model.arch().columns.len();
    if column_mask.len() != cols {
        return Err(Error::shape(
            "alignment mask",
            &[column_mask.len()],
            &[cols],
        ));
    }
    Ok((0..model.input_len())
        .map(|k| column_mask[k % cols])
        .collect())
}

/// Full embeddings of every material plus their mean.
pub struct Reference {
    pub embeddings: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl Reference {
    pub fn new(model: &Model, inputs: &[EncoderInput]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::domain("alignment needs at least one material"));
        }
        let embeddings = model.encode_many(inputs)?;
        let d = model.embed_dim();
        let mut mean = vec![0.0; d];
        for z in &embeddings {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= embeddings.len() as f64;
        }
        Ok(Reference { embeddings, mean })
    }

    /// Error of the empty mask.
    pub fn baseline(&self) -> f64 {
        self.embeddings.iter().map(|z| sq_dist(z, &self.mean)).sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Alignment error of `column_mask` given precomputed full embeddings.
pub fn alignment_with(
    model: &Model,
    inputs: &[EncoderInput],
    reference: &Reference,
    column_mask: &[bool],
) -> Result<f64> {
    if column_mask.iter().all(|&m| m) {
        return Ok(0.0);
    }
    let keep = entry_keep(model, column_mask)?;
    let mut total = 0.0;
    for (input, z) in inputs.iter().zip(&reference.embeddings) {
        let r = input.restricted(&keep);
        total += if r.observed() == 0 {
            sq_dist(z, &reference.mean)
        } else {
            sq_dist(z, &model.encode(&r)?)
        };
    }
    Ok(total)
}

/// `Σ_A ‖g(u_A) − g(u_A ⊙ m)‖²` over all `inputs`.
pub fn alignment_error(
    model: &Model,
    inputs: &[EncoderInput],
    column_mask: &[bool],
) -> Result<f64> {
    alignment_with(model, inputs, &Reference::new(model, inputs)?, column_mask)
}

/// How a candidate proxy set is scored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AlignmentMode {
    /// Mask the full encoder's input.
    #[default]
    Reuse,
    /// Distill a proxy-input encoder for each candidate and compare its
    /// embeddings with the full encoder's.
    Retrain { config: TrainConfig },
}

fn score(
    model: &Model,
    inputs: &[EncoderInput],
    reference: &Reference,
    mask: &[bool],
    mode: &AlignmentMode,
) -> Result<f64> {
    match mode {
        AlignmentMode::Reuse => alignment_with(model, inputs, reference, mask),
        AlignmentMode::Retrain { config } => {
            if mask.iter().all(|&m| m) {
                return Ok(0.0);
            }
            let columns: Vec<usize> = model
                .arch()
                .columns
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&c, _)| c)
                .collect();
            if columns.is_empty() {
                return Ok(reference.baseline());
            }
            let keep = entry_keep(model, mask)?;
            let student_inputs: Vec<EncoderInput> = inputs
                .iter()
                .map(|i| gather(&i.restricted(&keep), &keep))
                .collect();
            let student = distill(
                model,
                &columns,
                &student_inputs,
                &reference.embeddings,
                config,
            )?;
            let mut total = 0.0;
            for (input, z) in student_inputs.iter().zip(&reference.embeddings) {
                total += if input.observed() == 0 {
                    sq_dist(z, &reference.mean)
                } else {
                    sq_dist(z, &student.encode(input)?)
                };
            }
            Ok(total)
        }
    }
}

fn gather(input: &EncoderInput, keep: &[bool]) -> EncoderInput {
    let (x, mask) = input
        .x
        .iter()
        .zip(&input.mask)
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|((&x, &m), _)| (x, m))
        .unzip();
    EncoderInput { x, mask }
}

/// Greedy forward selection over the model's input columns: add the
/// column whose inclusion lowers the alignment error most (ties to the
/// lowest material index) until the error is at most `epsilon` or
/// `k_max` columns are chosen. Indices are material ids.
pub fn select_mask_opt(
    model: &Model,
    inputs: &[EncoderInput],
    epsilon: f64,
    k_max: usize,
    mode: &AlignmentMode,
) -> Result<ProxySet> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::domain(format!(
            "alignment tolerance must be nonnegative, got {epsilon}"
        )));
    }
    let columns = &model.arch().columns;
    let reference = Reference::new(model, inputs)?;
    let baseline = reference.baseline();
    let relative = |e: f64| if baseline > 0.0 { e / baseline } else { 0.0 };
    let mut mask = vec![false; columns.len()];
    let mut chosen: Vec<usize> = Vec::new();
    let mut error = score(model, inputs, &reference, &mask, mode)?;
    let mut trace = vec![error];
    while error > epsilon && chosen.len() < k_max.min(columns.len()) {
        let candidates: Vec<usize> = (0..columns.len()).filter(|&c| !mask[c]).collect();
        let scores = parallel_map(candidates.len(), |i| {
            let mut m = mask.clone();
            m[candidates[i]] = true;
            score(model, inputs, &reference, &m, mode)
        })?;
        let mut best = 0;
        for i in 1..candidates.len() {
            let better = scores[i] < scores[best]
                || (scores[i] == scores[best]
                    && columns[candidates[i]] < columns[candidates[best]]);
            if better {
                best = i;
            }
        }
        mask[candidates[best]] = true;
        chosen.push(columns[candidates[best]]);
        error = scores[best];
        trace.push(error);
    }
    Ok(ProxySet {
        indices: chosen,
        method: ProxyMethod::MaskOpt,
        diagnostics: ProxyDiagnostics {
            alignment_error: Some(error),
            relative_alignment: Some(relative(error)),
            converged: error <= epsilon,
            trace,
            ..ProxyDiagnostics::default()
        },
    })
}

/// Smallest greedy budget meeting `epsilon`, with its set.
pub fn budget_search(
    model: &Model,
    inputs: &[EncoderInput],
    epsilon: f64,
    mode: &AlignmentMode,
) -> Result<(usize, ProxySet)> {
    let set = select_mask_opt(model, inputs, epsilon, model.arch().columns.len(), mode)?;
    Ok((set.len(), set))
}

/// Exact minimum-size mask meeting `epsilon`, searching sizes up to
/// `k_limit` in increasing order (lexicographic within a size). `None`
/// when no subset of at most `k_limit` columns qualifies.
pub fn exhaustive_min(
    model: &Model,
    inputs: &[EncoderInput],
    epsilon: f64,
    k_limit: usize,
) -> Result<Option<(Vec<usize>, f64)>> {
    let columns = &model.arch().columns;
    let n = columns.len();
    if n > EXHAUSTIVE_MAX_N {
        return Err(Error::domain(format!(
            "exhaustive search limited to {EXHAUSTIVE_MAX_N} columns, got {n}"
        )));
    }
    let reference = Reference::new(model, inputs)?;
    for k in 0..=k_limit.min(n) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for subset in combinations(n, k) {
            let mut mask = vec![false; n];
            for &c in &subset {
                mask[c] = true;
            }
            let e = alignment_with(model, inputs, &reference, &mask)?;
            if e <= epsilon && best.as_ref().is_none_or(|(_, b)| e < *b) {
                best = Some((subset.iter().map(|&c| columns[c]).collect(), e));
            }
        }
        if best.is_some() {
            return Ok(best);
        }
    }
    Ok(None)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Train an encoder reading only `columns` to reproduce `targets` (the
/// teacher's full embeddings) by squared error. Fusion heads are copied
/// from the teacher; the student carries no decoder. Materials whose
/// proxy input is fully unobserved are skipped.
pub fn distill(
    teacher: &Model,
    columns: &[usize],
    inputs: &[EncoderInput],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Model> {
    let mut arch = teacher.arch().clone();
    arch.columns = columns.to_vec();
    arch.config.decoder = DecoderConfig::None;
    arch.seed = cfg.seed;
    let mut student = Model::new(arch)?;
    for (id, name) in student.params().names().to_vec().iter().enumerate() {
        if name.starts_with("enc.") {
            continue;
        }
        let pos = teacher
            .params()
            .names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::schema(format!("teacher lacks parameter `{name}`")))?;
        let t = teacher.params().tensors()[pos].clone();
        *student.params_mut().get_mut(crate::autodiff::ParamId(id)) = t;
    }
    if inputs.len() != targets.len() {
        return Err(Error::shape("distill", &[inputs.len()], &[targets.len()]));
    }
    let usable: Vec<usize> = (0..inputs.len())
        .filter(|&i| inputs[i].observed() > 0)
        .collect();
    if usable.is_empty() || cfg.max_epochs == 0 {
        return Ok(student);
    }
    let d = student.embed_dim();
    let mut frozen = vec![true; student.params().len()];
    for id in student.encoder_param_ids() {
        frozen[id.0] = false;
    }
    let mut adam = Adam::new(student.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = usable;
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&EncoderInput> = chunk.iter().map(|&i| &inputs[i]).collect();
            let mut g = Graph::new(student.params());
            let z = student.embed(&mut g, &refs)?;
            let t = g.constant(Tensor::new(
                chunk.len(),
                d,
                chunk.iter().flat_map(|&i| targets[i].clone()).collect(),
            )?);
            let diff = g.sub(z, t)?;
            let sq = g.square(diff);
            let loss = g.sum(sq);
            if !g.value(loss).item().is_finite() {
                return Err(Error::Numeric("non-finite distillation loss".into()));
            }
            let grads = g.backward(loss)?.params();
            adam.step(student.params_mut(), &grads, &frozen);
        }
    }
    Ok(student)
}

/// Every material is measured against the proxies, so pairs touching a
/// proxy are known inputs rather than prediction targets: they move from
/// validation and test into training. For a held-out material this
/// reveals exactly its proxy measurements.
pub fn reveal_proxy_pairs(split: &Split, proxies: &[usize]) -> Split {
    let touches = |&(a, b): &(usize, usize)| proxies.contains(&a) || proxies.contains(&b);
    let mut train = split.train.clone();
    let mut keep = |pairs: &[(usize, usize)]| -> Vec<(usize, usize)> {
        let (moved, kept): (Vec<_>, Vec<_>) = pairs.iter().partition(|p| touches(p));
        train.extend(moved);
        kept
    };
    let val = keep(&split.val);
    let test = keep(&split.test);
    train.sort_unstable();
    Split { train, val, test }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encoder_inputs, Architecture, EncoderConfig, ModelConfig};
    use crate::synthgen::{gen_lowrank, SynthSpec};

    fn setup(n: usize, seed: u64) -> (Model, Vec<EncoderInput>) {
        let syn = gen_lowrank(&SynthSpec {
            n,
            rank: 2,
            noise_std: 0.0,
            missing_rate: 0.1,
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        let arch = Architecture {
            config: ModelConfig {
                encoder: EncoderConfig::Mlp { widths: vec![16] },
                embed_dim: 4,
                fusion_widths: vec![8],
                ..ModelConfig::default()
            },
            columns: (0..n).collect(),
            channels: vec!["static".into()],
            mu_max: 2.0,
            seed,
        };
        let inputs = encoder_inputs(&syn.dataset, &arch).unwrap();
        (Model::new(arch).unwrap(), inputs)
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(6, 3).len(), 20);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn rrqr_rank_one_selects_one() {
        let v: Vec<f64> = (0..10).map(|i| 0.3 + 0.1 * i as f64).collect();
        let dense: Vec<f64> = (0..100).map(|k| v[k / 10] * v[k % 10]).collect();
        let ds = FrictionDataset::from_dense(
            crate::dataset::MaterialLibrary::numbered(10),
            "static",
            &dense,
            2.0,
        )
        .unwrap();
        for r in [0.5, 0.95, 0.999] {
            let set = select_rrqr(&ds, 0, r, RrqrOptions::default()).unwrap();
            assert_eq!(set.len(), 1);
            assert!(set.diagnostics.spectral_energy.unwrap() > 0.999_999);
        }
    }

    #[test]
    fn rrqr_size_tracks_rank() {
        for seed in 0..5 {
            let syn = gen_lowrank(&SynthSpec {
                n: 30,
                rank: 3,
                noise_std: 0.01,
                seed,
                ..SynthSpec::default()
            })
            .unwrap();
            let set = select_rrqr(&syn.dataset, 0, 0.999, RrqrOptions::default()).unwrap();
            assert!((3..=5).contains(&set.len()), "seed {seed}: {}", set.len());
            set.validate(30).unwrap();
        }
    }

    #[test]
    fn full_mask_error_is_exactly_zero() {
        let (model, inputs) = setup(8, 1);
        assert_eq!(
            alignment_error(&model, &inputs, &[true; 8])
                .unwrap()
                .to_bits(),
            0f64.to_bits()
        );
    }

    #[test]
    fn alignment_matches_direct_two_pass() {
        let (model, inputs) = setup(8, 2);
        let mask = [true, false, true, false, false, true, false, false];
        let keep: Vec<bool> = (0..8).map(|k| mask[k]).collect();
        let full: Vec<Vec<f64>> = inputs.iter().map(|i| model.encode(i).unwrap()).collect();
        let mean: Vec<f64> = (0..4)
            .map(|k| full.iter().map(|z| z[k]).sum::<f64>() / 8.0)
            .collect();
        let mut expected = 0.0;
        for (inp, z) in inputs.iter().zip(&full) {
            let r = inp.restricted(&keep);
            let w = if r.observed() == 0 {
                mean.clone()
            } else {
                model.encode(&r).unwrap()
            };
            for k in 0..4 {
                expected += (z[k] - w[k]).powi(2);
            }
        }
        let got = alignment_error(&model, &inputs, &mask).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
        let empty = alignment_error(&model, &inputs, &[false; 8]).unwrap();
        assert!((empty - Reference::new(&model, &inputs).unwrap().baseline()).abs() < 1e-12);
    }

    #[test]
    fn infinite_tolerance_selects_nothing() {
        let (model, inputs) = setup(8, 3);
        let set =
            select_mask_opt(&model, &inputs, f64::INFINITY, 8, &AlignmentMode::Reuse).unwrap();
        assert!(set.is_empty());
        assert!(set.diagnostics.converged);
        let (k, _) = budget_search(&model, &inputs, f64::INFINITY, &AlignmentMode::Reuse).unwrap();
        assert_eq!(k, 0);
    }

    #[test]
    fn greedy_is_deterministic_and_traced() {
        let (model, inputs) = setup(10, 4);
        let a = select_mask_opt(&model, &inputs, 0.0, 4, &AlignmentMode::Reuse).unwrap();
        let b = select_mask_opt(&model, &inputs, 0.0, 4, &AlignmentMode::Reuse).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a.diagnostics.trace.len(), 5);
        assert!(!a.diagnostics.converged);
        a.validate(10).unwrap();
        // each recorded step is the error of the prefix set
        for (k, &e) in a.diagnostics.trace.iter().enumerate() {
            let mask = ProxySet::manual(a.indices[..k].to_vec(), 10)
                .unwrap()
                .mask(10);
            assert_eq!(alignment_error(&model, &inputs, &mask).unwrap(), e);
        }
    }

    #[test]
    fn budget_nonincreasing_in_tolerance() {
        let (model, inputs) = setup(10, 5);
        let base = Reference::new(&model, &inputs).unwrap().baseline();
        let mut last = usize::MAX;
        for frac in [0.0, 0.01, 0.05, 0.1, 0.3, 0.6, 1.0, 2.0] {
            let (k, _) =
                budget_search(&model, &inputs, frac * base, &AlignmentMode::Reuse).unwrap();
            assert!(k <= last);
            last = k;
        }
    }

    #[test]
    fn greedy_within_one_of_exhaustive() {
        for seed in 0..4 {
            let (model, inputs) = setup(8, 10 + seed);
            let base = Reference::new(&model, &inputs).unwrap().baseline();
            for frac in [0.3, 0.1] {
                let eps = frac * base;
                let Some((best, e)) = exhaustive_min(&model, &inputs, eps, 3).unwrap() else {
                    continue;
                };
                assert!(e <= eps);
                let (k, _) = budget_search(&model, &inputs, eps, &AlignmentMode::Reuse).unwrap();
                assert!(
                    k <= best.len() + 1,
                    "seed {seed}: greedy {k} vs exact {}",
                    best.len()
                );
            }
        }
    }

    #[test]
    fn distilled_student_tracks_teacher() {
        let (model, inputs) = setup(10, 6);
        let columns = vec![0, 3, 7];
        let keep: Vec<bool> = (0..10).map(|c| columns.contains(&c)).collect();
        let student_inputs: Vec<EncoderInput> = inputs
            .iter()
            .map(|i| gather(&i.restricted(&keep), &keep))
            .collect();
        let reference = Reference::new(&model, &inputs).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let untrained = distill(
            &model,
            &columns,
            &student_inputs,
            &reference.embeddings,
            &cfg,
        )
        .unwrap();
        let trained = distill(
            &model,
            &columns,
            &student_inputs,
            &reference.embeddings,
            &TrainConfig {
                max_epochs: 300,
                ..cfg.clone()
            },
        )
        .unwrap();
        let err = |m: &Model| -> f64 {
            student_inputs
                .iter()
                .zip(&reference.embeddings)
                .filter(|(i, _)| i.observed() > 0)
                .map(|(i, z)| sq_dist(z, &m.encode(i).unwrap()))
                .sum()
        };
        assert!(err(&trained) < 0.2 * err(&untrained));
        assert_eq!(trained.arch().columns, columns);
        // heads are the teacher's
        let (z, w) = (vec![0.1, -0.2, 0.3, 0.0], vec![0.5, 0.1, -0.1, 0.2]);
        assert_eq!(
            trained.fuse_values(&z, &w, 0).unwrap(),
            model.fuse_values(&z, &w, 0).unwrap()
        );
        let retrain = AlignmentMode::Retrain {
            config: TrainConfig {
                max_epochs: 20,
                lr: 1e-2,
                ..TrainConfig::default()
            },
        };
        let set = select_mask_opt(&model, &inputs, 0.0, 2, &retrain).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn reveal_moves_proxy_pairs() {
        let split = Split {
            train: vec![(0, 1)],
            val: vec![(1, 2), (2, 3)],
            test: vec![(0, 3), (3, 3), (1, 3)],
        };
        let s = reveal_proxy_pairs(&split, &[2]);
        assert_eq!(s.train, vec![(0, 1), (1, 2), (2, 3)]);
        assert!(s.val.is_empty());
        assert_eq!(s.test, split.test);
        let s = reveal_proxy_pairs(&split, &[0, 1]);
        assert_eq!(s.test, vec![(3, 3)]);
    }

    #[test]
    fn invalid_sets_rejected() {
        assert!(ProxySet::manual(vec![0, 0], 3).is_err());
        assert!(ProxySet::manual(vec![5], 3).is_err());
        assert_eq!(
            ProxySet::manual(vec![2, 0], 3).unwrap().mask(3),
            vec![true, false, true]
        );
    }
}
