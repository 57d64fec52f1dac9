//! The group-wise completion model: point proxies from farthest-point
//! sampling plus a local edge-feature extractor, a transformer encoder with
//! kNN-local aggregation, a query generator for the missing region, a
//! cross-attention decoder, and a folding head that deforms a 3-D seed
//! lattice around each predicted center.
//!
//! A group of `group_in` points always maps to exactly `group_out` output
//! points, so the working set of one forward pass depends on the
//! configuration alone.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{train, TrainConfig, TrainOutcome, TrainSample, TrainState};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{Frame, PointCloud, NORMALIZED_SLACK};
use crate::error::{Error, Result};
use crate::neighbors::knn;
use crate::tensor::{NodeId, Tape, Tensor};

/// Sinusoidal coordinate-embedding frequencies (per axis, sin and cos each).
const POS_FREQS: [f64; 8] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];
const POS_DIM: usize = 3 * 2 * POS_FREQS.len();

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Points consumed per group.
    pub group_in: usize,
    /// Points produced per group; must equal `n_queries * fold_seed³`.
    pub group_out: usize,
    /// Proxy centers kept by farthest-point sampling.
    pub n_proxies: usize,
    pub feat_dim: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub n_heads: usize,
    /// Neighborhood size of the local feature extractor and the encoder's
    /// kNN aggregation.
    pub knn_k: usize,
    /// Predicted coarse centers for the missing region.
    pub n_queries: usize,
    /// Seed lattice resolution per axis (s³ points per query).
    pub fold_seed: usize,
    /// Seed cube half-extent in normalized units.
    pub fold_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            group_in: 1024,
            group_out: 512,
            n_proxies: 128,
            feat_dim: 128,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            n_heads: 4,
            knn_k: 8,
            n_queries: 8,
            fold_seed: 4,
            fold_radius: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.group_in,
            self.group_out,
            self.n_proxies,
            self.feat_dim,
            self.n_enc_blocks,
            self.n_dec_blocks,
            self.n_heads,
            self.knn_k,
            self.n_queries,
            self.fold_seed,
        ];
        if all.iter().any(|&v| v == 0) {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        let folded = self.n_queries * self.fold_seed.pow(3);
        if folded != self.group_out {
            return Err(Error::InvalidConfig(format!(
                "n_queries * fold_seed^3 = {folded} must equal group_out = {}",
                self.group_out
            )));
        }
        if self.feat_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "feat_dim {} not divisible by n_heads {}",
                self.feat_dim, self.n_heads
            )));
        }
        if self.n_proxies > self.group_in {
            return Err(Error::InvalidConfig(
                "n_proxies cannot exceed group_in".into(),
            ));
        }
        if self.knn_k >= self.n_proxies {
            return Err(Error::InvalidConfig(
                "knn_k must be smaller than n_proxies".into(),
            ));
        }
        if self.knn_k > self.group_in {
            return Err(Error::InvalidConfig(
                "knn_k cannot exceed group_in".into(),
            ));
        }
        if !(self.fold_radius > 0.0) || !self.fold_radius.is_finite() {
            return Err(Error::InvalidConfig("fold_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors plus the configuration they were shaped for.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub version: u32,
    tensors: BTreeMap<String, Tensor>,
}

/// Expected shape of every parameter tensor under a configuration.
fn shape_schema(cfg: &ModelConfig) -> BTreeMap<String, [usize; 2]> {
    let f = cfg.feat_dim;
    let mut s: BTreeMap<String, [usize; 2]> = BTreeMap::new();
    let mut put = |name: String, rows: usize, cols: usize| {
        s.insert(name, [rows, cols]);
    };

    put("proxy.w1".into(), 6, f);
    put("proxy.b1".into(), 1, f);
    put("proxy.w2".into(), f, f);
    put("proxy.b2".into(), 1, f);
    put("enc.pos.w".into(), POS_DIM, f);
    put("dec.pos.w".into(), POS_DIM, f);

    for i in 0..cfg.n_enc_blocks {
        let p = format!("enc.{i}.");
        for ln in ["ln1", "ln2", "ln3"] {
            put(format!("{p}{ln}.g"), 1, f);
            put(format!("{p}{ln}.b"), 1, f);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            put(format!("{p}attn.{w}"), f, f);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            put(format!("{p}attn.{b}"), 1, f);
        }
        put(format!("{p}edge.w1"), 2 * f, f);
        put(format!("{p}edge.b1"), 1, f);
        put(format!("{p}edge.w2"), f, f);
        put(format!("{p}edge.b2"), 1, f);
        put(format!("{p}ffn.w1"), f, 4 * f);
        put(format!("{p}ffn.b1"), 1, 4 * f);
        put(format!("{p}ffn.w2"), 4 * f, f);
        put(format!("{p}ffn.b2"), 1, f);
    }

    for i in 0..cfg.n_dec_blocks {
        let p = format!("dec.{i}.");
        for ln in ["ln1", "ln2", "ln3"] {
            put(format!("{p}{ln}.g"), 1, f);
            put(format!("{p}{ln}.b"), 1, f);
        }
        for attn in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                put(format!("{p}{attn}.{w}"), f, f);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                put(format!("{p}{attn}.{b}"), 1, f);
            }
        }
        put(format!("{p}ffn.w1"), f, 4 * f);
        put(format!("{p}ffn.b1"), 1, 4 * f);
        put(format!("{p}ffn.w2"), 4 * f, f);
        put(format!("{p}ffn.b2"), 1, f);
    }

    put("query.center.w".into(), f, 3 * cfg.n_queries);
    put("query.center.b".into(), 1, 3 * cfg.n_queries);
    put("query.feat.w1".into(), f + 3, f);
    put("query.feat.b1".into(), 1, f);
    put("query.feat.w2".into(), f, f);
    put("query.feat.b2".into(), 1, f);

    for st in ["s1", "s2"] {
        put(format!("fold.{st}.w1"), f + 3, f);
        put(format!("fold.{st}.b1"), 1, f);
        put(format!("fold.{st}.w2"), f, 3);
        put(format!("fold.{st}.b2"), 1, 3);
    }
    s
}

impl ModelParams {
    /// All-zero parameters. Residual branches end in zero projections, so the
    /// encoder passes features through unchanged and the folding head emits
    /// exact translated seed lattices.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = shape_schema(&config)
            .into_iter()
            .map(|(name, [r, c])| (name, Tensor::zeros(r, c)))
            .collect();
        Ok(ModelParams {
            config,
            version: CHECKPOINT_VERSION,
            tensors,
        })
    }

    /// Random initialization for training: Xavier-scaled weights, unit layer
    /// norm gains, coarse centers biased to the cube center, and a damped
    /// final folding stage so early outputs stay near their seeds.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, [r, c]) in shape_schema(&config) {
            let t = if name.ends_with(".g") {
                Tensor::from_vec(r, c, vec![1.0; r * c])
            } else if name.ends_with(".b")
                || name.contains(".b1")
                || name.contains(".b2")
                || name.ends_with("bq")
                || name.ends_with("bk")
                || name.ends_with("bv")
                || name.ends_with("bo")
            {
                if name == "query.center.b" {
                    // spread the initial coarse centers over the unit cube so
                    // early outputs cover space instead of collapsing at one
                    // point, where the density-aware gradient nearly vanishes
                    let data = (0..r * c).map(|_| rng.gen_range(0.2..0.8)).collect();
                    Tensor::from_vec(r, c, data)
                } else {
                    Tensor::zeros(r, c)
                }
            } else {
                let std = (2.0 / (r + c) as f64).sqrt();
                // keep the residual stream near its input scale and the
                // predicted centers/offsets inside the unit cube at init
                let damp = if name == "query.center.w" || name == "fold.s2.w2" {
                    0.01
                } else if name == "fold.s1.w2" {
                    0.1
                } else if name.ends_with("attn.wo")
                    || name.ends_with("self.wo")
                    || name.ends_with("cross.wo")
                    || name.ends_with("edge.w2")
                    || name.ends_with("ffn.w2")
                {
                    0.25
                } else {
                    1.0
                };
                let data = (0..r * c)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        n * std * damp
                    })
                    .collect();
                Tensor::from_vec(r, c, data)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams {
            config,
            version: CHECKPOINT_VERSION,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name:?}"))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.data().len()).sum()
    }

    /// Shape consistency with the stored config plus a finiteness check;
    /// applied on checkpoint load.
    pub fn validate_tensors(&self) -> Result<()> {
        let schema = shape_schema(&self.config);
        if schema.len() != self.tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} tensors, config requires {}",
                self.tensors.len(),
                schema.len()
            )));
        }
        for (name, [r, c]) in &schema {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing tensor {name:?}")))?;
            if t.rows() != *r || t.cols() != *c {
                return Err(Error::InvalidConfig(format!(
                    "tensor {name:?} has shape [{}, {}], expected [{r}, {c}]",
                    t.rows(),
                    t.cols()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        Ok(())
    }

    pub(crate) fn from_tensors(
        config: ModelConfig,
        version: u32,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let p = ModelParams {
            config,
            version,
            tensors,
        };
        p.validate_tensors()?;
        Ok(p)
    }
}

/// Exact farthest-point sampling: starting from `start`, repeatedly picks the
/// point with the largest distance to the selected set (ties to the smaller
/// index). With `n == points.len()` this is a permutation of all indices.
pub fn farthest_point_sampling(points: &[[f64; 3]], n: usize, start: usize) -> Vec<u32> {
    assert!(n >= 1 && n <= points.len(), "fps budget out of range");
    assert!(start < points.len(), "fps start out of range");
    let mut selected = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = start;
    selected.push(start as u32);
    taken[start] = true;
    for _ in 1..n {
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let dz = p[2] - c[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best.0 || (min_d2[i] == best.0 && i < best.1) {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
        selected.push(current as u32);
        taken[current] = true;
    }
    selected
}

struct TapeParams {
    ids: BTreeMap<String, NodeId>,
}

impl TapeParams {
    fn load(tape: &mut Tape, params: &ModelParams) -> Self {
        let ids = params
            .tensors()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        TapeParams { ids }
    }

    fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name:?}"))
    }
}

fn linear(tape: &mut Tape, x: NodeId, p: &TapeParams, w: &str, b: &str) -> NodeId {
    let y = tape.matmul(x, p.id(w));
    tape.add_row_vec(y, p.id(b))
}

fn layer_norm(tape: &mut Tape, x: NodeId, p: &TapeParams, prefix: &str) -> NodeId {
    tape.layer_norm_rows(x, p.id(&format!("{prefix}.g")), p.id(&format!("{prefix}.b")))
}

/// Multi-head attention with pre-norm input `q_in` attending over `kv_in`.
fn attention(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    p: &TapeParams,
    prefix: &str,
    n_heads: usize,
) -> NodeId {
    let q = linear(tape, q_in, p, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
    let k = linear(tape, kv_in, p, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
    let v = linear(tape, kv_in, p, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
    let dim = tape.value(q).cols();
    let dh = dim / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged: Option<NodeId> = None;
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_tb(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        let oh = tape.matmul(attn, vh);
        merged = Some(match merged {
            Some(m) => tape.concat_cols(m, oh),
            None => oh,
        });
    }
    linear(
        tape,
        merged.expect("at least one head"),
        p,
        &format!("{prefix}.wo"),
        &format!("{prefix}.bo"),
    )
}

/// kNN edge aggregation: per node, max-pool an MLP over (self, neighbor-self)
/// feature pairs along fixed coordinate-space neighbor indices.
fn edge_aggregate(
    tape: &mut Tape,
    x: NodeId,
    p: &TapeParams,
    prefix: &str,
    self_idx: &[u32],
    nbr_idx: &[u32],
    k: usize,
) -> NodeId {
    let fi = tape.gather_rows(x, self_idx);
    let fj = tape.gather_rows(x, nbr_idx);
    let rel = tape.sub(fj, fi);
    let e = tape.concat_cols(fi, rel);
    let h = linear(tape, e, p, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
    let h = tape.gelu(h);
    let pooled = tape.max_pool_groups(h, k);
    linear(tape, pooled, p, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

fn ffn(tape: &mut Tape, x: NodeId, p: &TapeParams, prefix: &str) -> NodeId {
    let h = linear(tape, x, p, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
    let h = tape.gelu(h);
    linear(tape, h, p, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

fn sincos_embed(tape: &mut Tape, coords: NodeId, p: &TapeParams, w: &str) -> NodeId {
    let emb = tape.sincos(coords, &POS_FREQS);
    tape.matmul(emb, p.id(w))
}

/// Everything a caller needs to read or differentiate one group completion.
pub struct ForwardPass {
    pub tape: Tape,
    /// `[group_out, 3]` output points.
    pub output: NodeId,
    /// Proxy centers chosen by FPS (constants).
    pub proxy_centers: Vec<[f64; 3]>,
    /// Coarse query centers, `[n_queries, 3]`, on the tape.
    pub coarse_centers: NodeId,
    param_ids: BTreeMap<String, NodeId>,
}

impl ForwardPass {
    pub fn output_points(&self) -> Vec<[f64; 3]> {
        self.tape.value(self.output).to_points()
    }

    /// Backpropagates `d loss / d output` and returns per-tensor gradients.
    pub fn parameter_gradients(
        &self,
        output_grad: &[[f64; 3]],
    ) -> BTreeMap<String, Tensor> {
        let seed = Tensor::from_points(output_grad);
        let grads = self.tape.backward(self.output, seed);
        let mut out = BTreeMap::new();
        for (name, id) in &self.param_ids {
            if let Some(g) = &grads[id.index()] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Proxy stage as a standalone operation: FPS centers plus local edge
/// features. `fps_start` is the seeded start index.
pub fn extract_proxies(
    group: &[[f64; 3]],
    params: &ModelParams,
    fps_start: usize,
) -> Result<(Vec<[f64; 3]>, Tensor)> {
    let cfg = &params.config;
    if group.len() != cfg.group_in {
        return Err(Error::InvalidInput(format!(
            "group has {} points, config group_in is {}",
            group.len(),
            cfg.group_in
        )));
    }
    let mut tape = Tape::new();
    let p = TapeParams::load(&mut tape, params);
    let (centers, feats) = stage_proxies(&mut tape, &p, cfg, group, fps_start)?;
    let features = tape.value(feats).clone();
    Ok((centers, features))
}

fn stage_proxies(
    tape: &mut Tape,
    p: &TapeParams,
    cfg: &ModelConfig,
    group: &[[f64; 3]],
    fps_start: usize,
) -> Result<(Vec<[f64; 3]>, NodeId)> {
    let center_idx = farthest_point_sampling(group, cfg.n_proxies, fps_start);
    let centers: Vec<[f64; 3]> = center_idx.iter().map(|&i| group[i as usize]).collect();

    // neighborhood of each center among the raw group points
    let nn = knn(&centers, group, cfg.knn_k, false, 512)?;
    let k = cfg.knn_k;
    // constant edge input rows: (center, neighbor - center)
    let mut rows = Vec::with_capacity(centers.len() * k * 6);
    for (ci, c) in centers.iter().enumerate() {
        for &j in nn.row_indices(ci) {
            let q = group[j as usize];
            rows.extend_from_slice(&[c[0], c[1], c[2], q[0] - c[0], q[1] - c[1], q[2] - c[2]]);
        }
    }
    let e = tape.leaf(Tensor::from_vec(centers.len() * k, 6, rows));
    let h = linear(tape, e, p, "proxy.w1", "proxy.b1");
    let h = tape.gelu(h);
    let pooled = tape.max_pool_groups(h, k);
    let feats = linear(tape, pooled, p, "proxy.w2", "proxy.b2");
    Ok((centers, feats))
}

/// Encoder as a standalone operation over given centers and features.
pub fn encode(
    centers: &[[f64; 3]],
    features: &Tensor,
    params: &ModelParams,
) -> Result<Tensor> {
    let cfg = &params.config;
    if features.rows() != centers.len() || features.cols() != cfg.feat_dim {
        return Err(Error::InvalidInput("encoder feature shape mismatch".into()));
    }
    let mut tape = Tape::new();
    let p = TapeParams::load(&mut tape, params);
    let f = tape.leaf(features.clone());
    let out = stage_encode(&mut tape, &p, cfg, centers, f)?;
    let encoded = tape.value(out).clone();
    if !encoded.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(encoded)
}

fn stage_encode(
    tape: &mut Tape,
    p: &TapeParams,
    cfg: &ModelConfig,
    centers: &[[f64; 3]],
    features: NodeId,
) -> Result<NodeId> {
    // coordinate embedding enters through a learned projection
    let coords = tape.leaf(Tensor::from_points(centers));
    let pos = sincos_embed(tape, coords, p, "enc.pos.w");
    let mut x = tape.add(features, pos);

    // fixed coordinate-space neighbor graph shared by all blocks
    let nn = knn(centers, centers, cfg.knn_k, true, 512)?;
    let mut self_idx = Vec::with_capacity(centers.len() * cfg.knn_k);
    for i in 0..centers.len() {
        for _ in 0..cfg.knn_k {
            self_idx.push(i as u32);
        }
    }

    for i in 0..cfg.n_enc_blocks {
        let pre = format!("enc.{i}");
        let ln = layer_norm(tape, x, p, &format!("{pre}.ln1"));
        let a = attention(tape, ln, ln, p, &format!("{pre}.attn"), cfg.n_heads);
        x = tape.add(x, a);
        let ln = layer_norm(tape, x, p, &format!("{pre}.ln2"));
        let e = edge_aggregate(
            tape,
            ln,
            p,
            &format!("{pre}.edge"),
            &self_idx,
            &nn.indices,
            cfg.knn_k,
        );
        x = tape.add(x, e);
        let ln = layer_norm(tape, x, p, &format!("{pre}.ln3"));
        let f = ffn(tape, ln, p, &format!("{pre}.ffn"));
        x = tape.add(x, f);
    }
    Ok(x)
}

/// Query generation as a standalone operation: pooled global feature mapped
/// to coarse centers and per-query features.
pub fn generate_queries(
    encoded: &Tensor,
    params: &ModelParams,
) -> Result<(Vec<[f64; 3]>, Tensor)> {
    let cfg = &params.config;
    if encoded.cols() != cfg.feat_dim {
        return Err(Error::InvalidInput("encoded feature shape mismatch".into()));
    }
    let mut tape = Tape::new();
    let p = TapeParams::load(&mut tape, params);
    let e = tape.leaf(encoded.clone());
    let (centers, feats) = stage_queries(&mut tape, &p, cfg, e);
    Ok((
        tape.value(centers).to_points(),
        tape.value(feats).clone(),
    ))
}

fn stage_queries(
    tape: &mut Tape,
    p: &TapeParams,
    cfg: &ModelConfig,
    encoded: NodeId,
) -> (NodeId, NodeId) {
    let rows = tape.value(encoded).rows();
    let global = tape.max_pool_groups(encoded, rows); // [1, F]
    let flat = linear(tape, global, p, "query.center.w", "query.center.b");
    let centers = tape.reshape(flat, cfg.n_queries, 3);
    let grep = tape.gather_rows(global, &vec![0u32; cfg.n_queries]);
    let qin = tape.concat_cols(grep, centers);
    let h = linear(tape, qin, p, "query.feat.w1", "query.feat.b1");
    let h = tape.gelu(h);
    let feats = linear(tape, h, p, "query.feat.w2", "query.feat.b2");
    (centers, feats)
}

fn stage_decode(
    tape: &mut Tape,
    p: &TapeParams,
    cfg: &ModelConfig,
    query_feats: NodeId,
    query_centers: NodeId,
    memory: NodeId,
) -> NodeId {
    let pos = sincos_embed(tape, query_centers, p, "dec.pos.w");
    let mut x = tape.add(query_feats, pos);
    for i in 0..cfg.n_dec_blocks {
        let pre = format!("dec.{i}");
        let ln = layer_norm(tape, x, p, &format!("{pre}.ln1"));
        let a = attention(tape, ln, ln, p, &format!("{pre}.self"), cfg.n_heads);
        x = tape.add(x, a);
        let ln = layer_norm(tape, x, p, &format!("{pre}.ln2"));
        let a = attention(tape, ln, memory, p, &format!("{pre}.cross"), cfg.n_heads);
        x = tape.add(x, a);
        let ln = layer_norm(tape, x, p, &format!("{pre}.ln3"));
        let f = ffn(tape, ln, p, &format!("{pre}.ffn"));
        x = tape.add(x, f);
    }
    x
}

/// The s³ seed lattice spanning `[-fold_radius, +fold_radius]³`, x-fastest.
pub fn seed_lattice(cfg: &ModelConfig) -> Vec<[f64; 3]> {
    let s = cfg.fold_seed;
    let r = cfg.fold_radius;
    let coord = |i: usize| -> f64 {
        if s == 1 {
            0.0
        } else {
            -r + 2.0 * r * i as f64 / (s - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(s * s * s);
    for k in 0..s {
        for j in 0..s {
            for i in 0..s {
                out.push([coord(i), coord(j), coord(k)]);
            }
        }
    }
    out
}

/// Folding head as a standalone operation.
pub fn fold3d(
    coarse_centers: &[[f64; 3]],
    query_feats: &Tensor,
    params: &ModelParams,
) -> Result<Vec<[f64; 3]>> {
    let cfg = &params.config;
    if coarse_centers.len() != cfg.n_queries
        || query_feats.rows() != cfg.n_queries
        || query_feats.cols() != cfg.feat_dim
    {
        return Err(Error::InvalidInput("folding input shape mismatch".into()));
    }
    let mut tape = Tape::new();
    let p = TapeParams::load(&mut tape, params);
    let centers = tape.leaf(Tensor::from_points(coarse_centers));
    let feats = tape.leaf(query_feats.clone());
    let out = stage_fold(&mut tape, &p, cfg, centers, feats);
    Ok(tape.value(out).to_points())
}

fn stage_fold(
    tape: &mut Tape,
    p: &TapeParams,
    cfg: &ModelConfig,
    centers: NodeId,
    feats: NodeId,
) -> NodeId {
    let per = cfg.fold_seed.pow(3);
    let mut rep_idx = Vec::with_capacity(cfg.n_queries * per);
    for q in 0..cfg.n_queries {
        for _ in 0..per {
            rep_idx.push(q as u32);
        }
    }
    let frep = tape.gather_rows(feats, &rep_idx);
    let crep = tape.gather_rows(centers, &rep_idx);

    let lattice = seed_lattice(cfg);
    let mut seed_rows = Vec::with_capacity(cfg.n_queries * per * 3);
    for _ in 0..cfg.n_queries {
        for s in &lattice {
            seed_rows.extend_from_slice(s);
        }
    }
    let seeds = tape.leaf(Tensor::from_vec(cfg.n_queries * per, 3, seed_rows));

    let in1 = tape.concat_cols(frep, seeds);
    let h = linear(tape, in1, p, "fold.s1.w1", "fold.s1.b1");
    let h = tape.gelu(h);
    let mid = linear(tape, h, p, "fold.s1.w2", "fold.s1.b2");

    let in2 = tape.concat_cols(frep, mid);
    let h = linear(tape, in2, p, "fold.s2.w1", "fold.s2.b1");
    let h = tape.gelu(h);
    let off = linear(tape, h, p, "fold.s2.w2", "fold.s2.b2");

    let base = tape.add(crep, seeds);
    tape.add(base, off)
}

/// Full group completion on one tape; callers drive training through the
/// returned pass, inference through [`forward`].
pub fn forward_pass(
    group: &[[f64; 3]],
    params: &ModelParams,
    seed: u64,
) -> Result<ForwardPass> {
    let cfg = params.config;
    cfg.validate()?;
    if group.len() != cfg.group_in {
        return Err(Error::InvalidInput(format!(
            "group has {} points, config group_in is {}",
            group.len(),
            cfg.group_in
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fps_start = rng.gen_range(0..group.len());

    let mut tape = Tape::new();
    let p = TapeParams::load(&mut tape, params);
    let (proxy_centers, feats) = stage_proxies(&mut tape, &p, &cfg, group, fps_start)?;
    let encoded = stage_encode(&mut tape, &p, &cfg, &proxy_centers, feats)?;
    let (coarse, qfeats) = stage_queries(&mut tape, &p, &cfg, encoded);
    let decoded = stage_decode(&mut tape, &p, &cfg, qfeats, coarse, encoded);
    let output = stage_fold(&mut tape, &p, &cfg, coarse, decoded);

    if !tape.value(output).is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(ForwardPass {
        param_ids: p.ids,
        tape,
        output,
        proxy_centers,
        coarse_centers: coarse,
    })
}

/// Completes one group: exactly `group_out` points in the normalized frame,
/// clamped into the slack range, carrying the group's transform.
pub fn forward(group: &PointCloud, params: &ModelParams, seed: u64) -> Result<PointCloud> {
    group.expect_frame(Frame::Normalized)?;
    let t = group.transform().ok_or(Error::MissingTransform)?;
    let pass = forward_pass(group.points(), params, seed)?;
    let lo = -NORMALIZED_SLACK;
    let hi = 1.0 + NORMALIZED_SLACK;
    let points: Vec<[f64; 3]> = pass
        .output_points()
        .into_iter()
        .map(|p| [p[0].clamp(lo, hi), p[1].clamp(lo, hi), p[2].clamp(lo, hi)])
        .collect();
    PointCloud::normalized(points, t)
}
