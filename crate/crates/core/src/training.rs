//! Losses, input corruption, Adam, early-stopped training, metrics and
//! cross-validation.
//!
//! Batch losses use the sum convention by default:
//!
//! ```text
//! L_noise = α Σ (f − f̂)² + β Σ ‖v − φ(z)‖² + γ L_NLL + θ Σ ‖φ(z) − v‖₁
//!         + λ_c Σ max(0, μ̂_k − μ̂_s)
//! ```
//!
//! Pair terms run over observed (pair, head) entries of the batch;
//! reconstruction terms run over the distinct materials of the batch and
//! compare against the clean input at its observed entries.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::dataset::{split, FrictionDataset, Split, SplitScheme};
use crate::error::{Error, Result};
use crate::model::{
    channel_indices, combine_members, encoder_inputs, Architecture, EncoderInput, Model,
};
use crate::proxy::reveal_proxy_pairs;

/// Environment variable capping parallel tasks.
pub const THREADS_ENV: &str = "TRIBOLENS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub kappa: f64,
    pub tau_quantile: f64,
    /// Residual-adaptive NLL weights; `false` uses `w ≡ 1`.
    pub robust_weights: bool,
    pub sigma_v: f64,
    pub mask_rate: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub constraint_weight: f64,
    pub reduction: Reduction,
    /// Keep encoder parameters fixed.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.9,
            beta: 0.1,
            gamma: 0.1,
            theta: 0.1,
            kappa: 50.0,
            tau_quantile: 0.90,
            robust_weights: true,
            sigma_v: 0.01,
            mask_rate: 0.15,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            constraint_weight: 0.1,
            reduction: Reduction::Sum,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    /// Validate and rescale `alpha`, `beta` to sum to one.
    pub fn normalized(&self) -> Result<TrainConfig> {
        let mut c = self.clone();
        if !(c.alpha > 0.0 && c.beta >= 0.0) || !(c.alpha + c.beta).is_finite() {
            return Err(Error::domain(format!(
                "need alpha > 0, beta >= 0, got {} and {}",
                c.alpha, c.beta
            )));
        }
        let s = c.alpha + c.beta;
        c.alpha /= s;
        c.beta /= s;
        for (name, v) in [
            ("gamma", c.gamma),
            ("theta", c.theta),
            ("constraint_weight", c.constraint_weight),
            ("sigma_v", c.sigma_v),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !(c.kappa > 0.0) {
            return Err(Error::domain(format!(
                "kappa must be positive, got {}",
                c.kappa
            )));
        }
        for (name, v) in [("mask_rate", c.mask_rate), ("tau_quantile", c.tau_quantile)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(c.lr > 0.0 && c.lr.is_finite()) {
            return Err(Error::domain(format!("lr must be positive, got {}", c.lr)));
        }
        if c.batch_size == 0 {
            return Err(Error::domain("batch_size must be positive"));
        }
        Ok(c)
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        if self.gamma > 0.0 && !model.heteroscedastic() {
            return Err(Error::domain("gamma > 0 needs a heteroscedastic head"));
        }
        if (self.beta > 0.0 || self.theta > 0.0) && !model.has_decoder() {
            return Err(Error::domain("beta or theta > 0 needs a decoder"));
        }
        Ok(())
    }
}

/// `(1 + exp(κ(|r| − τ)))⁻¹`.
pub fn residual_weight(r: f64, kappa: f64, tau: f64) -> f64 {
    let e = (kappa * (r.abs() - tau)).min(700.0);
    1.0 / (1.0 + e.exp())
}

/// Linear-interpolation quantile (`q` in `[0, 1]`) of a nonempty sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// `½ Σ w (r²/σ² + log σ²)`.
pub fn nll_value(residuals: &[f64], variances: &[f64], weights: &[f64]) -> f64 {
    0.5 * residuals
        .iter()
        .zip(variances)
        .zip(weights)
        .map(|((r, s), w)| w * (r * r / s + s.ln()))
        .sum::<f64>()
}

/// Drop each observed entry with probability `mask_rate` and add
/// `N(0, σ_v²)` noise to the kept ones. If every observed entry would be
/// dropped, the keep decisions are redrawn.
pub fn corrupt(
    input: &EncoderInput,
    mask_rate: f64,
    sigma_v: f64,
    rng: &mut ChaCha8Rng,
) -> EncoderInput {
    let observed = input.observed();
    let mut mask = input.mask.clone();
    if mask_rate > 0.0 && observed > 0 {
        loop {
            for (m, &o) in mask.iter_mut().zip(&input.mask) {
                *m = o && !rng.random_bool(mask_rate);
            }
            if mask.iter().any(|&m| m) {
                break;
            }
        }
    }
    let noise = (sigma_v > 0.0).then(|| Normal::new(0.0, sigma_v).expect("finite sigma"));
    let x = input
        .x
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| match (m, &noise) {
            (false, _) => 0.0,
            (true, Some(n)) => v + n.sample(rng),
            (true, None) => v,
        })
        .collect();
    EncoderInput { x, mask }
}

/// A labeled pair with one optional target per head.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTarget {
    pub a: usize,
    pub b: usize,
    pub values: Vec<Option<f64>>,
}

/// Targets for `pairs` read from `ds` at the given channel per head.
pub fn pair_targets(
    ds: &FrictionDataset,
    pairs: &[(usize, usize)],
    channels: &[usize],
) -> Vec<PairTarget> {
    pairs
        .iter()
        .map(|&(a, b)| PairTarget {
            a,
            b,
            values: channels.iter().map(|&c| ds.get(a, b, c)).collect(),
        })
        .filter(|t| t.values.iter().any(Option::is_some))
        .collect()
}

/// Head index pairs `(static, kinetic)` sharing a suffix, e.g.
/// `static` / `kinetic` or `static_wf` / `kinetic_wf`.
pub fn constraint_heads(channels: &[String]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, ls) in channels.iter().enumerate() {
        if let Some(rest) = ls.strip_prefix("static") {
            if let Some(k) = channels
                .iter()
                .position(|lk| lk.strip_prefix("kinetic") == Some(rest))
            {
                out.push((s, k));
            }
        }
    }
    out
}

/// One mini-batch ready for a loss evaluation. `pairs` index into
/// `clean`/`encoded`, which list the batch's distinct materials.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub clean: Vec<EncoderInput>,
    pub encoded: Vec<EncoderInput>,
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<Vec<Option<f64>>>,
}

impl LossBatch {
    /// Batch over `targets` with encoder inputs from `inputs` (indexed by
    /// material); `encode` maps each clean input to the one fed to the
    /// encoder.
    pub fn new(
        inputs: &[EncoderInput],
        targets: &[&PairTarget],
        mut encode: impl FnMut(&EncoderInput) -> EncoderInput,
    ) -> Result<LossBatch> {
        let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for t in targets {
            for m in [t.a, t.b] {
                if !slots.contains_key(&m) {
                    slots.insert(m, order.len());
                    order.push(m);
                }
            }
        }
        let clean = order
            .iter()
            .map(|&m| {
                let inp = inputs.get(m).ok_or_else(|| Error::Lookup {
                    kind: "material",
                    name: m.to_string(),
                })?;
                if inp.observed() == 0 {
                    return Err(Error::domain(format!(
                        "material {m} has no observed encoder inputs"
                    )));
                }
                Ok(inp.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let encoded = clean.iter().map(&mut encode).collect();
        Ok(LossBatch {
            clean,
            encoded,
            pairs: targets.iter().map(|t| (slots[&t.a], slots[&t.b])).collect(),
            targets: targets.iter().map(|t| t.values.clone()).collect(),
        })
    }
}

/// Graph nodes of every loss term plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub base: Var,
    pub recon: Var,
    pub nll: Var,
    pub latent: Var,
    pub constraint: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub recon: f64,
    pub nll: f64,
    pub latent: f64,
    pub constraint: f64,
    pub total: f64,
}

/// Build all loss terms for `batch` on a fresh graph. `cfg` weights are
/// used as given (see [`TrainConfig::normalized`]). NLL weights are
/// derived from the batch residuals unless `weights` (one per head and
/// pair, head-major) is given. Returns the weights used.
pub fn loss_graph(
    model: &Model,
    batch: &LossBatch,
    cfg: &TrainConfig,
    weights: Option<&[f64]>,
) -> Result<(Graph, LossVars, Vec<f64>)> {
    let mut g = Graph::new(model.params());
    let refs: Vec<&EncoderInput> = batch.encoded.iter().collect();
    let z = model.embed(&mut g, &refs)?;
    let ia: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = batch.pairs.iter().map(|p| p.1).collect();
    let za = g.gather_rows(z, &ia)?;
    let zb = g.gather_rows(z, &ib)?;
    let bsz = batch.pairs.len();
    let n_heads = model.n_heads();
    let mean = cfg.reduction == Reduction::Mean;

    let mut heads = Vec::with_capacity(n_heads);
    let mut sq_terms = Vec::new();
    let mut residual_nodes = Vec::new();
    let mut n_obs = 0usize;
    for h in 0..n_heads {
        let out = model.fuse(&mut g, za, zb, h)?;
        let obs: Vec<f64> = batch
            .targets
            .iter()
            .map(|t| if t[h].is_some() { 1.0 } else { 0.0 })
            .collect();
        let tgt: Vec<f64> = batch.targets.iter().map(|t| t[h].unwrap_or(0.0)).collect();
        n_obs += obs.iter().filter(|&&o| o > 0.0).count();
        let tv = g.constant(Tensor::column(tgt));
        let ov = g.constant(Tensor::column(obs));
        let diff = g.sub(out.mu, tv)?;
        let r = g.mul(diff, ov)?;
        let sq = g.square(r);
        sq_terms.push(g.sum(sq));
        residual_nodes.push(r);
        heads.push(out);
    }
    let base = sum_nodes(&mut g, &sq_terms)?;

    // NLL
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n_heads * bsz {
                return Err(Error::shape("loss weights", &[w.len()], &[n_heads * bsz]));
            }
            w.to_vec()
        }
        None => {
            let abs_r: Vec<f64> = (0..n_heads)
                .flat_map(|h| {
                    let vals = g.value(residual_nodes[h]).data().to_vec();
                    batch
                        .targets
                        .iter()
                        .zip(vals)
                        .filter(move |(t, _)| t[h].is_some())
                        .map(|(_, r)| r.abs())
                })
                .collect();
            if cfg.robust_weights && !abs_r.is_empty() {
                let tau = quantile(&abs_r, cfg.tau_quantile);
                (0..n_heads)
                    .flat_map(|h| {
                        let vals = g.value(residual_nodes[h]).data().to_vec();
                        vals.into_iter()
                            .map(move |r| residual_weight(r, cfg.kappa, tau))
                    })
                    .collect()
            } else {
                vec![1.0; n_heads * bsz]
            }
        }
    };
    let nll = if model.heteroscedastic() {
        let mut parts = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (lv, var) = (
                heads[h].log_var.expect("heteroscedastic"),
                heads[h].var.expect("heteroscedastic"),
            );
            let wh: Vec<f64> = (0..bsz)
                .map(|p| {
                    if batch.targets[p][h].is_some() {
                        w[h * bsz + p]
                    } else {
                        0.0
                    }
                })
                .collect();
            let wv = g.constant(Tensor::column(wh));
            let r2 = g.square(residual_nodes[h]);
            let inv = g.reciprocal(var);
            let ratio = g.mul(r2, inv)?;
            let inner = g.add(ratio, lv)?;
            let weighted = g.mul(inner, wv)?;
            let s = g.sum(weighted);
            parts.push(g.scale(s, 0.5));
        }
        sum_nodes(&mut g, &parts)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    // reconstruction
    let (recon, latent, n_entries) = if model.has_decoder() {
        let rec = model.decode(&mut g, z)?;
        let l = model.input_len();
        let mut clean = Vec::with_capacity(batch.clean.len() * l);
        let mut obs = Vec::with_capacity(clean.capacity());
        for inp in &batch.clean {
            clean.extend(&inp.x);
            obs.extend(inp.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
        let n_entries = obs.iter().filter(|&&o| o > 0.0).count();
        let cv = g.constant(Tensor::new(batch.clean.len(), l, clean)?);
        let ov = g.constant(Tensor::new(batch.clean.len(), l, obs)?);
        let d = g.sub(cv, rec)?;
        let dm = g.mul(d, ov)?;
        let sq = g.square(dm);
        let recon = g.sum(sq);
        let ab = g.abs(dm);
        let latent = g.sum(ab);
        (recon, latent, n_entries)
    } else {
        let zero = g.constant(Tensor::scalar(0.0));
        (zero, zero, 0)
    };

    // μ_s ≥ μ_k hinge
    let pairs = constraint_heads(&model.arch().channels);
    let constraint = if pairs.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut parts = Vec::new();
        for (s, k) in pairs {
            let gap = g.sub(heads[k].mu, heads[s].mu)?;
            let hinge = g.relu(gap);
            parts.push(g.sum(hinge));
        }
        sum_nodes(&mut g, &parts)?
    };

    let per = |n: usize| if mean { 1.0 / n.max(1) as f64 } else { 1.0 };
    let total = g.weighted_sum(&[
        (cfg.alpha * per(n_obs), base),
        (cfg.beta * per(n_entries), recon),
        (cfg.gamma * per(n_obs), nll),
        (cfg.theta * per(n_entries), latent),
        (cfg.constraint_weight * per(bsz), constraint),
    ])?;
    Ok((
        g,
        LossVars {
            base,
            recon,
            nll,
            latent,
            constraint,
            total,
        },
        w,
    ))
}

fn sum_nodes(g: &mut Graph, nodes: &[Var]) -> Result<Var> {
    let terms: Vec<(f64, Var)> = nodes.iter().map(|&v| (1.0, v)).collect();
    g.weighted_sum(&terms)
}

/// Values of every loss term for `batch`.
pub fn batch_losses(
    model: &Model,
    batch: &LossBatch,
    cfg: &TrainConfig,
    weights: Option<&[f64]>,
) -> Result<LossBreakdown> {
    let (g, v, _) = loss_graph(model, batch, cfg, weights)?;
    let val = |x: Var| g.value(x).item();
    Ok(LossBreakdown {
        base: val(v.base),
        recon: val(v.recon),
        nll: val(v.nll),
        latent: val(v.latent),
        constraint: val(v.constraint),
        total: val(v.total),
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters flagged in `frozen` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], frozen: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Inputs and labeled pairs for one training run. `inputs` must only
/// reveal coefficients the run is allowed to see.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub inputs: Vec<EncoderInput>,
    pub train: Vec<PairTarget>,
    pub val: Vec<PairTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss per training pair.
    pub train_loss: f64,
    /// Mean squared error of predicted means on validation pairs.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Validation metrics of the returned parameters.
    pub metrics: Option<Metrics>,
}

impl TrainReport {
    /// Per-epoch CSV: `epoch,train_loss,val_loss`.
    pub fn history_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for rec in &self.history {
            w.serialize(rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::schema(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::schema(e.to_string()))
    }
}

fn mean_sq_error(model: &Model, inputs: &[EncoderInput], targets: &[PairTarget]) -> Result<f64> {
    let pairs: Vec<(usize, usize)> = targets.iter().map(|t| (t.a, t.b)).collect();
    let preds = model.predict_pairs(inputs, &pairs)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (h, hp) in preds.iter().enumerate() {
        for (t, &(mu, _)) in targets.iter().zip(hp) {
            if let Some(f) = t.values[h] {
                s += (f - mu) * (f - mu);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Early-stopped mini-batch training from `model`'s current parameters.
/// Returns the parameters of the best validation epoch (the training loss
/// stands in when there are no validation pairs).
pub fn train(
    mut model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let cfg = cfg.normalized()?;
    cfg.check_model(&model)?;
    for t in data.train.iter().chain(&data.val) {
        if t.values.len() != model.n_heads() {
            return Err(Error::shape(
                "train targets",
                &[t.values.len()],
                &[model.n_heads()],
            ));
        }
    }
    let mut report = TrainReport {
        history: Vec::new(),
        epochs_run: 0,
        best_epoch: None,
        best_val_loss: None,
        metrics: None,
    };
    if cfg.max_epochs == 0 {
        return Ok((model, report));
    }
    if data.train.is_empty() {
        return Err(Error::domain("no observed training pairs"));
    }
    let mut frozen = vec![false; model.params().len()];
    if cfg.freeze_encoder {
        for id in model.encoder_param_ids() {
            frozen[id.0] = true;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let targets: Vec<&PairTarget> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = LossBatch::new(&data.inputs, &targets, |inp| {
                corrupt(inp, cfg.mask_rate, cfg.sigma_v, &mut rng)
            })?;
            let (g, vars, _) = loss_graph(&model, &batch, &cfg, None)?;
            let loss = g.value(vars.total).item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            let grads = g.backward(vars.total)?.params();
            adam.step(model.params_mut(), &grads, &frozen);
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let val_loss = if data.val.is_empty() {
            train_loss
        } else {
            mean_sq_error(&model, &data.inputs, &data.val)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        report.epochs_run = epoch + 1;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params().clone()));
            report.best_epoch = Some(epoch);
            report.best_val_loss = Some(val_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    if !data.val.is_empty() {
        let pairs: Vec<(usize, usize)> = data.val.iter().map(|t| (t.a, t.b)).collect();
        let heads: Vec<usize> = (0..model.n_heads()).collect();
        let preds = predictions(std::slice::from_ref(&model), &data.inputs, &pairs, &heads)?;
        let rows = label_predictions(&preds, &data.val, &heads);
        report.metrics = Some(metrics_from_rows(&rows, &model.arch().channels));
    }
    Ok((model, report))
}

/// Reconstruction-only training of encoder and decoder (the autoencoder
/// baseline). Batches run over materials. Returns the trained model and
/// the mean reconstruction error per observed entry after each epoch,
/// preceded by its value at initialization.
pub fn train_autoencoder(
    mut model: Model,
    inputs: &[EncoderInput],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    let cfg = cfg.normalized()?;
    if !model.has_decoder() {
        return Err(Error::domain("autoencoder training needs a decoder"));
    }
    let usable: Vec<usize> = (0..inputs.len())
        .filter(|&i| inputs[i].observed() > 0)
        .collect();
    if usable.is_empty() {
        return Err(Error::domain("no material has observed inputs"));
    }
    let recon_error = |model: &Model| -> Result<f64> {
        let refs: Vec<&EncoderInput> = usable.iter().map(|&i| &inputs[i]).collect();
        let mut g = Graph::new(model.params());
        let z = model.embed(&mut g, &refs)?;
        let r = model.decode(&mut g, z)?;
        let out = g.value(r);
        let (mut s, mut n) = (0.0, 0usize);
        for (row, inp) in refs.iter().enumerate() {
            for (k, (&x, &m)) in inp.x.iter().zip(&inp.mask).enumerate() {
                if m {
                    s += (x - out.get(row, k)).powi(2);
                    n += 1;
                }
            }
        }
        Ok(s / n as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut history = vec![recon_error(&model)?];
    let mut order = usable.clone();
    let frozen = vec![false; model.params().len()];
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let clean: Vec<EncoderInput> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let encoded: Vec<EncoderInput> = clean
                .iter()
                .map(|c| corrupt(c, cfg.mask_rate, cfg.sigma_v, &mut rng))
                .collect();
            let mut g = Graph::new(model.params());
            let refs: Vec<&EncoderInput> = encoded.iter().collect();
            let z = model.embed(&mut g, &refs)?;
            let r = model.decode(&mut g, z)?;
            let l = model.input_len();
            let cv = g.constant(Tensor::new(
                clean.len(),
                l,
                clean.iter().flat_map(|c| c.x.clone()).collect(),
            )?);
            let ov = g.constant(Tensor::new(
                clean.len(),
                l,
                clean
                    .iter()
                    .flat_map(|c| c.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
                    .collect(),
            )?);
            let d = g.sub(cv, r)?;
            let dm = g.mul(d, ov)?;
            let sq = g.square(dm);
            let loss = g.sum(sq);
            if !g.value(loss).item().is_finite() {
                return Err(Error::Numeric("non-finite reconstruction loss".into()));
            }
            let grads = g.backward(loss)?.params();
            adam.step(model.params_mut(), &grads, &frozen);
        }
        history.push(recon_error(&model)?);
    }
    Ok((model, history))
}

/// One evaluated (pair, head) entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub a: usize,
    pub b: usize,
    pub head: usize,
    pub truth: f64,
    pub mean: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: String,
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub per_channel: Vec<ChannelMetrics>,
    /// Fraction of residuals within 1σ and 2σ of the total predictive
    /// variance; absent when every predicted variance is zero.
    pub coverage_1sigma: Option<f64>,
    pub coverage_2sigma: Option<f64>,
}

fn summary(truth: &[f64], pred: &[f64]) -> (f64, f64, f64) {
    let n = truth.len() as f64;
    if truth.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    let mae = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| (t - p).abs())
        .sum::<f64>()
        / n;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    // a constant target leaves R² undefined; report 1 for an exact fit, else 0
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    (ss_res / n, mae, r2)
}

/// Metrics over prediction rows; `labels[head]` names each head.
pub fn metrics_from_rows(rows: &[PredictionRow], labels: &[String]) -> Metrics {
    let truth: Vec<f64> = rows.iter().map(|r| r.truth).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let (mse, mae, r2) = summary(&truth, &pred);
    let mut heads: Vec<usize> = rows.iter().map(|r| r.head).collect();
    heads.sort_unstable();
    heads.dedup();
    let per_channel = heads
        .into_iter()
        .map(|h| {
            let sel: Vec<&PredictionRow> = rows.iter().filter(|r| r.head == h).collect();
            let t: Vec<f64> = sel.iter().map(|r| r.truth).collect();
            let p: Vec<f64> = sel.iter().map(|r| r.mean).collect();
            let (mse, mae, r2) = summary(&t, &p);
            ChannelMetrics {
                channel: labels.get(h).cloned().unwrap_or_else(|| h.to_string()),
                n: sel.len(),
                mse,
                mae,
                r2,
            }
        })
        .collect();
    let has_var = rows.iter().any(|r| r.aleatoric + r.epistemic > 0.0);
    let coverage = |z: f64| {
        has_var.then(|| {
            let hits = rows
                .iter()
                .filter(|r| (r.truth - r.mean).abs() <= z * (r.aleatoric + r.epistemic).sqrt())
                .count();
            hits as f64 / rows.len().max(1) as f64
        })
    };
    Metrics {
        n: rows.len(),
        mse,
        mae,
        r2,
        per_channel,
        coverage_1sigma: coverage(1.0),
        coverage_2sigma: coverage(2.0),
    }
}

/// Ensemble predictions for `pairs` on each of `heads`: `[k][pair]`.
fn predictions(
    members: &[Model],
    inputs: &[EncoderInput],
    pairs: &[(usize, usize)],
    heads: &[usize],
) -> Result<Vec<Vec<crate::model::PairPrediction>>> {
    if members.is_empty() {
        return Err(Error::domain("empty ensemble"));
    }
    let outs = members
        .iter()
        .map(|m| m.predict_pairs(inputs, pairs))
        .collect::<Result<Vec<_>>>()?;
    heads
        .iter()
        .map(|&h| {
            (0..pairs.len())
                .map(|p| {
                    let per: Vec<(f64, f64)> = outs
                        .iter()
                        .map(|o| o.get(h).map(|hp| hp[p]))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| Error::Lookup {
                            kind: "head",
                            name: h.to_string(),
                        })?;
                    combine_members(&per)
                })
                .collect()
        })
        .collect()
}

fn label_predictions(
    preds: &[Vec<crate::model::PairPrediction>],
    targets: &[PairTarget],
    heads: &[usize],
) -> Vec<PredictionRow> {
    let mut rows = Vec::new();
    for (k, &h) in heads.iter().enumerate() {
        for (t, p) in targets.iter().zip(&preds[k]) {
            if let Some(f) = t.values[k] {
                rows.push(PredictionRow {
                    a: t.a,
                    b: t.b,
                    head: h,
                    truth: f,
                    mean: p.mean,
                    aleatoric: p.aleatoric,
                    epistemic: p.epistemic,
                });
            }
        }
    }
    rows
}

/// Evaluate an ensemble on `pairs`. Each `(head, channel)` in `targets`
/// compares head predictions against `truth` at that dataset channel
/// (a head may be scored against a different channel, e.g. static →
/// kinetic transfer). Encoder inputs are read from `visible`; pairs
/// touching a material with no visible input entry are skipped.
pub fn evaluate(
    members: &[Model],
    visible: &FrictionDataset,
    truth: &FrictionDataset,
    pairs: &[(usize, usize)],
    targets: &[(usize, usize)],
) -> Result<(Metrics, Vec<PredictionRow>)> {
    let first = members
        .first()
        .ok_or_else(|| Error::domain("empty ensemble"))?;
    let inputs = encoder_inputs(visible, first.arch())?;
    let heads: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let channels: Vec<usize> = targets.iter().map(|t| t.1).collect();
    let labeled = pair_targets(truth, &encodable_pairs(&inputs, pairs), &channels);
    let lp: Vec<(usize, usize)> = labeled.iter().map(|t| (t.a, t.b)).collect();
    let preds = predictions(members, &inputs, &lp, &heads)?;
    let rows = label_predictions(&preds, &labeled, &heads);
    let labels: Vec<String> = (0..first.n_heads())
        .map(|h| match targets.iter().find(|t| t.0 == h) {
            Some(&(_, c)) if truth.channels()[c] != first.arch().channels[h] => {
                format!("{}->{}", first.arch().channels[h], truth.channels()[c])
            }
            _ => first.arch().channels[h].clone(),
        })
        .collect();
    Ok((metrics_from_rows(&rows, &labels), rows))
}

/// CSV with one line per prediction row.
pub fn predictions_csv(rows: &[PredictionRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::schema(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::schema(e.to_string()))
}

/// Parse the output of [`predictions_csv`].
pub fn read_predictions_csv(text: &str) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Number of worker threads: `TRIBOLENS_THREADS` if set and positive,
/// otherwise rayon's default.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Run `f` over `0..n` on a pool capped by [`thread_count`], returning
/// results in index order.
pub fn parallel_map<T: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Training data for `split`: encoder inputs reveal only training pairs of
/// `ds`; targets are read from `ds` at the architecture's channels. Pairs
/// touching a material with no visible input entry are left out.
pub fn split_data(ds: &FrictionDataset, split: &Split, arch: &Architecture) -> Result<TrainData> {
    let channels = channel_indices(ds, &arch.channels)?;
    let visible = ds.restrict_to_pairs(&split.train);
    let inputs = encoder_inputs(&visible, arch)?;
    let train = encodable_pairs(&inputs, &split.train);
    let val = encodable_pairs(&inputs, &split.val);
    Ok(TrainData {
        train: pair_targets(ds, &train, &channels),
        val: pair_targets(ds, &val, &channels),
        inputs,
    })
}

/// Pairs whose two materials both have at least one observed input entry.
pub fn encodable_pairs(inputs: &[EncoderInput], pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    pairs
        .iter()
        .copied()
        .filter(|&(a, b)| inputs[a].observed() > 0 && inputs[b].observed() > 0)
        .collect()
}

/// Train `members` models with derived seeds `seed ⊕ i` (parameter
/// initialization and batch order) in parallel.
pub fn train_ensemble(
    arch: &Architecture,
    data: &TrainData,
    cfg: &TrainConfig,
    members: usize,
) -> Result<Vec<(Model, TrainReport)>> {
    if members == 0 {
        return Err(Error::domain("ensemble needs at least one member"));
    }
    parallel_map(members, |i| {
        let mut a = arch.clone();
        a.seed = arch.seed ^ i as u64;
        let mut c = cfg.clone();
        c.seed = cfg.seed ^ i as u64;
        train(Model::new(a)?, data, &c)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub metrics: Metrics,
    pub report: TrainReport,
    #[serde(skip)]
    pub rows: Vec<PredictionRow>,
}

/// Cross-validate under `scheme`: one model per split, folds trained in
/// parallel with seeds `seed ⊕ fold`, results in fold order. Every head is
/// scored against its own channel.
pub fn cross_validate(
    ds: &FrictionDataset,
    scheme: &SplitScheme,
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<FoldResult>> {
    let channels = channel_indices(ds, &arch.channels)?;
    let targets: Vec<(usize, usize)> = channels.iter().copied().enumerate().collect();
    cross_validate_with(ds, scheme, arch, cfg, seed, &targets)
}

/// [`cross_validate`] with explicit `(head, channel)` scoring targets, as
/// in [`evaluate`]. With a proxy architecture, pairs touching a proxy
/// move into training.
pub fn cross_validate_with(
    ds: &FrictionDataset,
    scheme: &SplitScheme,
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
    targets: &[(usize, usize)],
) -> Result<Vec<FoldResult>> {
    let splits = split(ds, scheme, seed)?;
    let proxy_columns = arch.columns.len() < ds.n();
    parallel_map(splits.len(), |f| {
        let s = &if proxy_columns {
            reveal_proxy_pairs(&splits[f], &arch.columns)
        } else {
            splits[f].clone()
        };
        let mut a = arch.clone();
        a.seed = arch.seed ^ f as u64;
        let mut c = cfg.clone();
        c.seed = cfg.seed ^ f as u64;
        let data = split_data(ds, s, &a)?;
        let (model, report) = train(Model::new(a)?, &data, &c)?;
        let visible = ds.restrict_to_pairs(&s.train);
        let (metrics, rows) =
            evaluate(std::slice::from_ref(&model), &visible, ds, &s.test, targets)?;
        Ok(FoldResult {
            fold: f,
            train_pairs: s.train.len(),
            test_pairs: s.test.len(),
            metrics,
            report,
            rows,
        })
    })
}
