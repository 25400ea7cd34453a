//! Encoder, symmetric fusion heads, decoder, ensembles and checkpoints.
//!
//! A material is encoded from its row of the friction matrix restricted to
//! a column set (all materials, or a proxy set), one block per input
//! channel. The fusion head for each channel sees the swap-invariant
//! feature map `[zA + zB, |zA - zB|, zA ⊙ zB]`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::dataset::FrictionDataset;
use crate::error::{Error, Result};

/// Bounds applied to the log-variance output of a heteroscedastic head.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum EncoderConfig {
    /// Consumes `[x ⊙ s, s]`; `widths` are the hidden layers.
    Mlp { widths: Vec<usize> },
    /// One token per input entry, post-norm transformer blocks.
    Attention {
        token_width: usize,
        layers: usize,
        heads: usize,
        ff_width: usize,
        pooling: Pooling,
    },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Attention {
            token_width: 32,
            layers: 4,
            heads: 4,
            ff_width: 64,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecoderConfig {
    None,
    /// No layers: returns `z` unchanged. Requires `embed_dim == input_len`.
    Identity,
    Mlp {
        widths: Vec<usize>,
    },
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig::Mlp { widths: vec![32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub embed_dim: usize,
    pub fusion_widths: Vec<usize>,
    pub heteroscedastic: bool,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            embed_dim: 16,
            fusion_widths: vec![64, 32],
            heteroscedastic: true,
            decoder: DecoderConfig::default(),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ModelConfig,
    /// Material columns read from each row: all materials or a proxy set.
    pub columns: Vec<usize>,
    /// Channel labels; each is both an input block and an output head.
    pub channels: Vec<String>,
    pub mu_max: f64,
    pub seed: u64,
}

impl Architecture {
    pub fn input_len(&self) -> usize {
        self.columns.len() * self.channels.len()
    }
}

/// Encoder input for one material: values with unobserved entries zeroed
/// plus the observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub x: Vec<f64>,
    pub mask: Vec<bool>,
}

impl EncoderInput {
    pub fn new(x: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if x.len() != mask.len() {
            return Err(Error::shape("EncoderInput::new", &[x.len()], &[mask.len()]));
        }
        let x = x
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(EncoderInput { x, mask })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same entries with additional positions dropped (`keep[i]` false).
    pub fn restricted(&self, keep: &[bool]) -> EncoderInput {
        let mask: Vec<bool> = self.mask.iter().zip(keep).map(|(&a, &b)| a && b).collect();
        let x = self
            .x
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        EncoderInput { x, mask }
    }
}

/// Resolve channel labels against a dataset.
pub fn channel_indices(ds: &FrictionDataset, labels: &[String]) -> Result<Vec<usize>> {
    labels.iter().map(|l| ds.channel_index(l)).collect()
}

/// Encoder input for material `a`: for each channel (outer) and column
/// (inner), the observed coefficient `f(a, column)`.
pub fn encoder_input(
    ds: &FrictionDataset,
    a: usize,
    columns: &[usize],
    channels: &[usize],
) -> Result<EncoderInput> {
    let mut x = Vec::with_capacity(columns.len() * channels.len());
    let mut mask = Vec::with_capacity(x.capacity());
    for &c in channels {
        let pv = ds.proxy_vector(a, columns, c)?;
        x.extend(pv.v);
        mask.extend(pv.mask);
    }
    Ok(EncoderInput { x, mask })
}

/// Encoder inputs for every material of `ds`.
pub fn encoder_inputs(ds: &FrictionDataset, arch: &Architecture) -> Result<Vec<EncoderInput>> {
    let channels = channel_indices(ds, &arch.channels)?;
    (0..ds.n())
        .map(|a| encoder_input(ds, a, &arch.columns, &channels))
        .collect()
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(rows, cols, data).expect("sized buffer")
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            xavier(rng, fan_in, fan_out, fan_in, fan_out),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, g.param(self.w))?;
        g.add_row(h, g.param(self.b))
    }
}

/// Dense layers with ReLU between them (not after the last).
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    fn apply(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    scale: ParamId,
    offset: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Norm {
            scale: store.add(format!("{name}.scale"), Tensor::filled(1, width, 1.0)),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(1, width)),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, g.param(self.scale))?;
        g.add_row(s, g.param(self.offset))
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff: Mlp,
    norm2: Norm,
}

#[derive(Debug, Clone)]
enum Encoder {
    Mlp(Mlp),
    Attention {
        token: Linear,
        position: ParamId,
        blocks: Vec<Block>,
        out: Linear,
        heads: usize,
        pooling: Pooling,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Encoder,
    heads: Vec<Mlp>,
    decoder: Option<Mlp>,
}

/// A trained (or freshly initialized) encoder/fusion/decoder stack.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    params: ParamStore,
    layout: Layout,
}

/// Graph handles produced by one fusion head over a batch of pairs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `B × 1` predicted means in `(0, mu_max)`.
    pub mu: Var,
    /// `B × 1` clamped log-variances, if heteroscedastic.
    pub log_var: Option<Var>,
    /// `B × 1` variances, if heteroscedastic.
    pub var: Option<Var>,
}

impl Model {
    /// Initialize parameters from `arch.seed`.
    pub fn new(arch: Architecture) -> Result<Self> {
        let cfg = &arch.config;
        let input_len = arch.input_len();
        let d = cfg.embed_dim;
        if d == 0 {
            return Err(Error::domain("embedding dimension must be positive"));
        }
        if input_len == 0 {
            return Err(Error::domain(
                "model needs at least one input column and channel",
            ));
        }
        if !(arch.mu_max > 0.0 && arch.mu_max.is_finite()) {
            return Err(Error::domain(format!(
                "mu_max {} must be positive",
                arch.mu_max
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut store = ParamStore::new();
        let encoder = match &cfg.encoder {
            EncoderConfig::Mlp { widths } => {
                let mut dims = vec![2 * input_len];
                dims.extend(widths);
                dims.push(d);
                Encoder::Mlp(Mlp::new(&mut store, &mut rng, "enc", &dims))
            }
            &EncoderConfig::Attention {
                token_width: w,
                layers,
                heads,
                ff_width,
                pooling,
            } => {
                if heads == 0 || w % heads != 0 {
                    return Err(Error::domain(format!(
                        "{heads} heads do not divide token width {w}"
                    )));
                }
                let token = Linear::new(&mut store, &mut rng, "enc.token", 1, w);
                let position =
                    store.add("enc.position", xavier(&mut rng, input_len, w, input_len, w));
                let blocks = (0..layers)
                    .map(|l| {
                        let p = format!("enc.block{l}");
                        Block {
                            q: Linear::new(&mut store, &mut rng, &format!("{p}.q"), w, w),
                            k: Linear::new(&mut store, &mut rng, &format!("{p}.k"), w, w),
                            v: Linear::new(&mut store, &mut rng, &format!("{p}.v"), w, w),
                            o: Linear::new(&mut store, &mut rng, &format!("{p}.o"), w, w),
                            norm1: Norm::new(&mut store, &format!("{p}.norm1"), w),
                            ff: Mlp::new(
                                &mut store,
                                &mut rng,
                                &format!("{p}.ff"),
                                &[w, ff_width, w],
                            ),
                            norm2: Norm::new(&mut store, &format!("{p}.norm2"), w),
                        }
                    })
                    .collect();
                let out = Linear::new(&mut store, &mut rng, "enc.out", w, d);
                Encoder::Attention {
                    token,
                    position,
                    blocks,
                    out,
                    heads,
                    pooling,
                }
            }
        };
        let out_width = if cfg.heteroscedastic { 2 } else { 1 };
        let heads = (0..arch.channels.len())
            .map(|c| {
                let mut dims = vec![3 * d];
                dims.extend(&cfg.fusion_widths);
                dims.push(out_width);
                Mlp::new(&mut store, &mut rng, &format!("head{c}"), &dims)
            })
            .collect();
        let decoder = match &cfg.decoder {
            DecoderConfig::None => None,
            DecoderConfig::Identity => {
                if d != input_len {
                    return Err(Error::domain(format!(
                        "identity decoder needs embed_dim {d} equal to input length {input_len}"
                    )));
                }
                Some(Mlp { layers: Vec::new() })
            }
            DecoderConfig::Mlp { widths } => {
                let mut dims = vec![d];
                dims.extend(widths);
                dims.push(input_len);
                Some(Mlp::new(&mut store, &mut rng, "dec", &dims))
            }
        };
        Ok(Model {
            arch,
            params: store,
            layout: Layout {
                encoder,
                heads,
                decoder,
            },
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.config.embed_dim
    }

    pub fn n_heads(&self) -> usize {
        self.layout.heads.len()
    }

    pub fn has_decoder(&self) -> bool {
        self.layout.decoder.is_some()
    }

    pub fn heteroscedastic(&self) -> bool {
        self.arch.config.heteroscedastic
    }

    /// Parameter ids belonging to the encoder.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("enc."))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    fn check_input(&self, input: &EncoderInput) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::shape("encode", &[input.len()], &[self.input_len()]));
        }
        if input.observed() == 0 {
            return Err(Error::domain("cannot encode a fully masked input"));
        }
        Ok(())
    }

    /// Embeddings of `inputs` stacked as an `m × d` node.
    pub fn embed(&self, g: &mut Graph, inputs: &[&EncoderInput]) -> Result<Var> {
        for input in inputs {
            self.check_input(input)?;
        }
        match &self.layout.encoder {
            Encoder::Mlp(mlp) => {
                let l = self.input_len();
                let mut data = Vec::with_capacity(inputs.len() * 2 * l);
                for input in inputs {
                    data.extend(
                        input
                            .x
                            .iter()
                            .zip(&input.mask)
                            .map(|(&x, &m)| if m { x } else { 0.0 }),
                    );
                    data.extend(input.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
                }
                let x = g.constant(Tensor::new(inputs.len(), 2 * l, data)?);
                mlp.apply(g, x)
            }
            Encoder::Attention { .. } => {
                let zs = inputs
                    .iter()
                    .map(|input| self.embed_attention(g, input))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_rows(&zs)
            }
        }
    }

    fn embed_attention(&self, g: &mut Graph, input: &EncoderInput) -> Result<Var> {
        let Encoder::Attention {
            token,
            position,
            blocks,
            out,
            heads,
            pooling,
        } = &self.layout.encoder
        else {
            unreachable!("attention layout");
        };
        let l = input.len();
        let xs = input
            .x
            .iter()
            .zip(&input.mask)
            .map(|(&x, &m)| if m { x } else { 0.0 })
            .collect();
        let col = g.constant(Tensor::column(xs));
        let t = token.apply(g, col)?;
        let mut h = g.add(t, g.param(*position))?;
        let width = g.shape(h)[1];
        let dh = width / heads;
        let key_mask: Arc<[bool]> = (0..l * l).map(|k| input.mask[k % l]).collect();
        let scale = 1.0 / (dh as f64).sqrt();
        for block in blocks {
            let q = block.q.apply(g, h)?;
            let k = block.k.apply(g, h)?;
            let v = block.v.apply(g, h)?;
            let mut per_head = Vec::with_capacity(*heads);
            for hd in 0..*heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, s, e)?;
                let kh = g.slice_cols(k, s, e)?;
                let vh = g.slice_cols(v, s, e)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let attn = g.masked_softmax(scores, key_mask.clone())?;
                per_head.push(g.matmul(attn, vh)?);
            }
            let cat = if per_head.len() == 1 {
                per_head[0]
            } else {
                g.concat_cols(&per_head)?
            };
            let o = block.o.apply(g, cat)?;
            let r = g.add(h, o)?;
            h = block.norm1.apply(g, r)?;
            let f = block.ff.apply(g, h)?;
            let r = g.add(h, f)?;
            h = block.norm2.apply(g, r)?;
        }
        let rows: Arc<[bool]> = Arc::from(input.mask.clone());
        let pooled = match pooling {
            Pooling::Mean => g.mean_pool(h, rows)?,
            Pooling::Max => g.max_pool(h, &rows)?,
        };
        out.apply(g, pooled)
    }

    /// Fusion head `channel` applied to row-aligned `B × d` embeddings.
    pub fn fuse(&self, g: &mut Graph, za: Var, zb: Var, channel: usize) -> Result<HeadOutput> {
        let head = self
            .layout
            .heads
            .get(channel)
            .ok_or_else(|| Error::Lookup {
                kind: "head",
                name: channel.to_string(),
            })?;
        let d = self.embed_dim();
        if g.shape(za)[1] != d || g.shape(za) != g.shape(zb) {
            return Err(Error::shape("fuse", &g.shape(za), &g.shape(zb)));
        }
        let sum = g.add(za, zb)?;
        let diff = g.sub(za, zb)?;
        let gap = g.abs(diff);
        let prod = g.mul(za, zb)?;
        let feat = g.concat_cols(&[sum, gap, prod])?;
        let raw = head.apply(g, feat)?;
        let logit = if self.heteroscedastic() {
            g.slice_cols(raw, 0, 1)?
        } else {
            raw
        };
        let s = g.sigmoid(logit);
        let mu = g.scale(s, self.arch.mu_max);
        let (log_var, var) = if self.heteroscedastic() {
            let lv = g.slice_cols(raw, 1, 2)?;
            let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
            (Some(lv), Some(g.exp(lv)))
        } else {
            (None, None)
        };
        Ok(HeadOutput { mu, log_var, var })
    }

    /// Decoder output for `m × d` embeddings.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let dec = self
            .layout
            .decoder
            .as_ref()
            .ok_or_else(|| Error::domain("model has no decoder"))?;
        if g.shape(z)[1] != self.embed_dim() {
            return Err(Error::shape(
                "decode",
                &g.shape(z),
                &[g.shape(z)[0], self.embed_dim()],
            ));
        }
        dec.apply(g, z)
    }

    /// Embedding of a single input.
    pub fn encode(&self, input: &EncoderInput) -> Result<Vec<f64>> {
        Ok(self.encode_many(std::slice::from_ref(input))?.remove(0))
    }

    pub fn encode_many(&self, inputs: &[EncoderInput]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.params);
        let refs: Vec<&EncoderInput> = inputs.iter().collect();
        let z = self.embed(&mut g, &refs)?;
        let t = g.value(z);
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    /// `(mu_hat, sigma_sq)` for one embedding pair on head `channel`.
    pub fn fuse_values(&self, z: &[f64], w: &[f64], channel: usize) -> Result<(f64, Option<f64>)> {
        let mut g = Graph::new(&self.params);
        let za = g.constant(Tensor::row(z.to_vec()));
        let zb = g.constant(Tensor::row(w.to_vec()));
        let out = self.fuse(&mut g, za, zb, channel)?;
        Ok((g.value(out.mu).item(), out.var.map(|v| g.value(v).item())))
    }

    pub fn decode_values(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let zv = g.constant(Tensor::row(z.to_vec()));
        let r = self.decode(&mut g, zv)?;
        Ok(g.value(r).data().to_vec())
    }

    /// Means (and variances) for `pairs` on every head, given encoder
    /// inputs for all materials. Returns `[head][pair]`.
    pub fn predict_pairs(
        &self,
        inputs: &[EncoderInput],
        pairs: &[(usize, usize)],
    ) -> Result<Vec<Vec<(f64, f64)>>> {
        let mut used: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        used.sort_unstable();
        used.dedup();
        let slot = |m: usize| used.binary_search(&m).expect("collected above");
        let refs = used
            .iter()
            .map(|&m| {
                inputs.get(m).ok_or_else(|| Error::Lookup {
                    kind: "material",
                    name: m.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&self.params);
        let z = self.embed(&mut g, &refs)?;
        let ia: Vec<usize> = pairs.iter().map(|&(a, _)| slot(a)).collect();
        let ib: Vec<usize> = pairs.iter().map(|&(_, b)| slot(b)).collect();
        let za = g.gather_rows(z, &ia)?;
        let zb = g.gather_rows(z, &ib)?;
        (0..self.n_heads())
            .map(|h| {
                let out = self.fuse(&mut g, za, zb, h)?;
                let mu = g.value(out.mu).data().to_vec();
                let var = match out.var {
                    Some(v) => g.value(v).data().to_vec(),
                    None => vec![0.0; mu.len()],
                };
                Ok(mu.into_iter().zip(var).collect())
            })
            .collect()
    }

    /// Write `<stem>.json` (manifest) and `<stem>.bin` (parameters).
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            parameters: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape(),
                })
                .collect(),
            binary: format!("{}.bin", file_stem(stem)),
        };
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let bytes: Vec<u8> = self
            .params
            .flatten()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
        fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&json_path, e))?;
        Ok(json_path)
    }

    /// Load from a checkpoint manifest path.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::schema(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let mut model = Model::new(manifest.architecture)?;
        let expected: Vec<(&String, [usize; 2])> = model
            .params
            .names()
            .iter()
            .zip(model.params.tensors().iter().map(Tensor::shape))
            .collect();
        let declared: Vec<(&String, [usize; 2])> = manifest
            .parameters
            .iter()
            .map(|p| (&p.name, p.shape))
            .collect();
        if expected != declared {
            return Err(Error::schema(
                "checkpoint parameter layout does not match its architecture",
            ));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let bin_path = base.join(&manifest.binary);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() != model.params.numel() * 8 {
            return Err(Error::schema(format!(
                "parameter file holds {} bytes, expected {}",
                bytes.len(),
                model.params.numel() * 8
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.params.load_flat(&flat)?;
        Ok(model)
    }
}

fn file_stem(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    architecture: Architecture,
    parameters: Vec<ParamEntry>,
    binary: String,
}

/// Ensemble prediction for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub mean: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

impl PairPrediction {
    pub fn total_variance(&self) -> f64 {
        self.aleatoric + self.epistemic
    }
}

/// Combine member `(mean, variance)` outputs: mean of means, mean of
/// variances, population variance of means.
pub fn combine_members(outputs: &[(f64, f64)]) -> Result<PairPrediction> {
    if outputs.is_empty() {
        return Err(Error::domain("empty ensemble"));
    }
    let m = outputs.len() as f64;
    let mean = outputs.iter().map(|o| o.0).sum::<f64>() / m;
    let aleatoric = outputs.iter().map(|o| o.1).sum::<f64>() / m;
    let epistemic = outputs
        .iter()
        .map(|o| (o.0 - mean) * (o.0 - mean))
        .sum::<f64>()
        / m;
    Ok(PairPrediction {
        mean,
        aleatoric,
        epistemic,
    })
}

/// Predictions of an ensemble for `pairs` on head `head`, with each member
/// reading its inputs from `ds`.
pub fn predict_ensemble(
    members: &[Model],
    ds: &FrictionDataset,
    pairs: &[(usize, usize)],
    head: usize,
) -> Result<Vec<PairPrediction>> {
    let first = members
        .first()
        .ok_or_else(|| Error::domain("empty ensemble"))?;
    for m in members {
        if m.input_len() != first.input_len() || m.arch.columns != first.arch.columns {
            return Err(Error::domain("ensemble members disagree on inputs"));
        }
    }
    let per_member = members
        .iter()
        .map(|m| {
            let inputs = encoder_inputs(ds, m.arch())?;
            let mut out = m.predict_pairs(&inputs, pairs)?;
            if head >= out.len() {
                return Err(Error::Lookup {
                    kind: "head",
                    name: head.to_string(),
                });
            }
            Ok(out.swap_remove(head))
        })
        .collect::<Result<Vec<_>>>()?;
    (0..pairs.len())
        .map(|p| {
            let outs: Vec<(f64, f64)> = per_member.iter().map(|m| m[p]).collect();
            combine_members(&outs)
        })
        .collect()
}

/// Single-pair ensemble prediction.
pub fn predict_pair(
    members: &[Model],
    ds: &FrictionDataset,
    a: usize,
    b: usize,
    head: usize,
) -> Result<PairPrediction> {
    Ok(predict_ensemble(members, ds, &[(a, b)], head)?.remove(0))
}
