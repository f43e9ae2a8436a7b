//! Fixed-capacity actor and critic networks with hand-written gradients.
//!
//! Both networks are `input → 32 → 32 → output` multilayer perceptrons with
//! tanh hidden units. Inputs arrive as sparse deviations from a reference
//! vector (the reading of an idle robot with nothing in sensor range), so a
//! mostly-empty 4096-beam depth image costs only its non-reference entries.
//! The result is mathematically identical to a dense first layer.
//!
//! Before reaching the network each deviation is divided by its running RMS
//! and clipped ([`ObsNormalizer`]); zero deviations stay zero, so the
//! sparsity survives normalization.
//!
//! All parameters live in one flat vector laid out as
//! `[actor MLP | log-std | critic MLP]`; each MLP is
//! `[W1 | b1 | W2 | b2 | W3 | b3]` with weights stored input-major
//! (`W[i * fan_out + o]`).

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

pub const HIDDEN: usize = 32;
pub const LOG_STD_INIT: f64 = -std::f64::consts::LN_2; // log(0.5)
pub const STD_MIN: f64 = 1e-4;
pub const STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;
/// Normalized inputs are clipped to `±OBS_CLIP`.
pub const OBS_CLIP: f64 = 10.0;
/// Smallest RMS used as a divisor, so rarely-seen inputs are not blown up.
pub const OBS_RMS_FLOOR: f64 = 1e-2;

/// Sparse rows `x = reference + Σ val·e_idx`, indices strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseBatch {
    pub dim: usize,
    indptr: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl SparseBatch {
    pub fn new(dim: usize) -> Self {
        SparseBatch { dim, indptr: vec![0], idx: Vec::new(), val: Vec::new() }
    }

    pub fn with_capacity(dim: usize, rows: usize, nnz: usize) -> Self {
        let mut b = SparseBatch::new(dim);
        b.indptr.reserve(rows);
        b.idx.reserve(nnz);
        b.val.reserve(nnz);
        b
    }

    pub fn len(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    /// Append a dense row, keeping only entries that differ from `reference`.
    pub fn push_dense(&mut self, x: &[f64], reference: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (i, (&v, &r)) in x.iter().zip(reference).enumerate() {
            if v != r {
                self.idx.push(i as u32);
                self.val.push(v - r);
            }
        }
        self.indptr.push(self.idx.len());
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.idx[a..b], &self.val[a..b])
    }

    pub fn to_dense(&self, r: usize, reference: &[f64]) -> Vec<f64> {
        let mut x = reference.to_vec();
        let (idx, val) = self.row(r);
        for (&i, &v) in idx.iter().zip(val) {
            x[i as usize] += v;
        }
        x
    }
}

/// Running second moments of input deviations from a reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObsMoments {
    pub count: f64,
    pub sum_sq: Vec<f64>,
}

impl ObsMoments {
    pub fn new(dim: usize) -> Self {
        ObsMoments { count: 0.0, sum_sq: vec![0.0; dim] }
    }

    pub fn add(&mut self, x: &[f64], reference: &[f64]) {
        self.count += 1.0;
        for ((s, &v), &r) in self.sum_sq.iter_mut().zip(x).zip(reference) {
            if v != r {
                *s += (v - r) * (v - r);
            }
        }
    }

    pub fn merge(&mut self, other: &ObsMoments) {
        self.count += other.count;
        self.sum_sq.iter_mut().zip(&other.sum_sq).for_each(|(a, b)| *a += b);
    }
}

/// Maps raw observations to `clip((x - reference) * inv_scale, ±OBS_CLIP)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsNormalizer {
    pub reference: Vec<f64>,
    pub inv_scale: Vec<f64>,
    pub moments: ObsMoments,
}

impl ObsNormalizer {
    /// Zero reference, unit scale.
    pub fn identity(dim: usize) -> Self {
        ObsNormalizer::new(vec![0.0; dim])
    }

    pub fn new(reference: Vec<f64>) -> Self {
        let dim = reference.len();
        ObsNormalizer { reference, inv_scale: vec![1.0; dim], moments: ObsMoments::new(dim) }
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    /// Fold in new statistics and recompute the scales.
    pub fn update(&mut self, m: &ObsMoments) {
        self.moments.merge(m);
        if self.moments.count == 0.0 {
            return;
        }
        for (inv, s) in self.inv_scale.iter_mut().zip(&self.moments.sum_sq) {
            *inv = 1.0 / (s / self.moments.count).sqrt().max(OBS_RMS_FLOOR);
        }
    }

    /// Append `x` (a prefix of the reference length is allowed) as a normalized sparse row.
    pub fn push(&self, batch: &mut SparseBatch, x: &[f64]) {
        debug_assert!(x.len() <= self.dim() && batch.dim == x.len());
        for (i, (&v, &r)) in x.iter().zip(&self.reference).enumerate() {
            if v != r {
                batch.idx.push(i as u32);
                batch.val.push(((v - r) * self.inv_scale[i]).clamp(-OBS_CLIP, OBS_CLIP));
            }
        }
        batch.indptr.push(batch.idx.len());
    }
}

/// A view of selected rows of a [`SparseBatch`], truncated to the first
/// `reference.len()` input dimensions.
#[derive(Clone, Copy)]
pub struct Inputs<'a> {
    pub batch: &'a SparseBatch,
    pub rows: &'a [usize],
    pub reference: &'a [f64],
}

impl<'a> Inputs<'a> {
    fn row(&self, k: usize) -> (&'a [u32], &'a [f64]) {
        let (idx, val) = self.batch.row(self.rows[k]);
        let keep = idx.partition_point(|&i| (i as usize) < self.reference.len());
        (&idx[..keep], &val[..keep])
    }
}

/// Shape and flat-vector offset of one MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub input: usize,
    pub hidden: [usize; 2],
    pub output: usize,
    pub offset: usize,
}

impl MlpLayout {
    pub fn new(input: usize, output: usize, offset: usize) -> Self {
        MlpLayout { input, hidden: [HIDDEN, HIDDEN], output, offset }
    }

    fn sizes(&self) -> [usize; 6] {
        let [h1, h2] = self.hidden;
        [self.input * h1, h1, h1 * h2, h2, h2 * self.output, self.output]
    }

    pub fn num_params(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Offsets of `[W1, b1, W2, b2, W3, b3]` in the flat vector.
    fn offsets(&self) -> [usize; 7] {
        let mut o = [self.offset; 7];
        for (k, s) in self.sizes().iter().enumerate() {
            o[k + 1] = o[k] + s;
        }
        o
    }

    pub fn end(&self) -> usize {
        self.offset + self.num_params()
    }
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pub n: usize,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pub out: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    // c (m×n, row-major) = op(a) · op(b) + beta·c
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl MlpLayout {
    pub fn forward(&self, params: &[f64], x: Inputs<'_>) -> MlpCache {
        let [h1, h2] = self.hidden;
        let o = self.offsets();
        let (w1, b1) = (&params[o[0]..o[1]], &params[o[1]..o[2]]);
        let (w2, b2) = (&params[o[2]..o[3]], &params[o[3]..o[4]]);
        let (w3, b3) = (&params[o[4]..o[5]], &params[o[5]..o[6]]);
        let n = x.rows.len();
        debug_assert_eq!(x.reference.len(), self.input);

        // reference·W1 + b1, shared by every row
        let mut base = b1.to_vec();
        for (i, &r) in x.reference.iter().enumerate() {
            if r != 0.0 {
                let w = &w1[i * h1..(i + 1) * h1];
                base.iter_mut().zip(w).for_each(|(acc, wv)| *acc += r * wv);
            }
        }

        let mut a1 = vec![0.0; n * h1];
        for k in 0..n {
            let z = &mut a1[k * h1..(k + 1) * h1];
            z.copy_from_slice(&base);
            let (idx, val) = x.row(k);
            for (&i, &v) in idx.iter().zip(val) {
                let w = &w1[i as usize * h1..(i as usize + 1) * h1];
                z.iter_mut().zip(w).for_each(|(acc, wv)| *acc += v * wv);
            }
            z.iter_mut().for_each(|v| *v = v.tanh());
        }

        let mut a2 = vec![0.0; n * h2];
        for k in 0..n {
            a2[k * h2..(k + 1) * h2].copy_from_slice(b2);
        }
        gemm(n, h1, h2, &a1, false, w2, false, &mut a2, 1.0);
        a2.iter_mut().for_each(|v| *v = v.tanh());

        let mut out = vec![0.0; n * self.output];
        for k in 0..n {
            out[k * self.output..(k + 1) * self.output].copy_from_slice(b3);
        }
        gemm(n, h2, self.output, &a2, false, w3, false, &mut out, 1.0);
        MlpCache { n, a1, a2, out }
    }

    /// Accumulate `∂L/∂θ` into `grad` given `∂L/∂out` (n × output).
    pub fn backward(&self, params: &[f64], x: Inputs<'_>, cache: &MlpCache, d_out: &[f64], grad: &mut [f64]) {
        let [h1, h2] = self.hidden;
        let o = self.offsets();
        let n = cache.n;
        let out_dim = self.output;
        debug_assert_eq!(d_out.len(), n * out_dim);
        let w2 = &params[o[2]..o[3]];
        let w3 = &params[o[4]..o[5]];

        // output layer
        gemm(h2, n, out_dim, &cache.a2, true, d_out, false, &mut grad[o[4]..o[5]], 1.0);
        let gb3 = &mut grad[o[5]..o[6]];
        for k in 0..n {
            gb3.iter_mut().zip(&d_out[k * out_dim..(k + 1) * out_dim]).for_each(|(g, d)| *g += d);
        }

        let mut dz2 = vec![0.0; n * h2];
        gemm(n, out_dim, h2, d_out, false, w3, true, &mut dz2, 0.0);
        dz2.iter_mut().zip(&cache.a2).for_each(|(d, a)| *d *= 1.0 - a * a);

        gemm(h1, n, h2, &cache.a1, true, &dz2, false, &mut grad[o[2]..o[3]], 1.0);
        let gb2 = &mut grad[o[3]..o[4]];
        for k in 0..n {
            gb2.iter_mut().zip(&dz2[k * h2..(k + 1) * h2]).for_each(|(g, d)| *g += d);
        }

        let mut dz1 = vec![0.0; n * h1];
        gemm(n, h2, h1, &dz2, false, w2, true, &mut dz1, 0.0);
        dz1.iter_mut().zip(&cache.a1).for_each(|(d, a)| *d *= 1.0 - a * a);

        // first layer: reference part is a rank-one update with the summed deltas
        let mut dz1_sum = vec![0.0; h1];
        for k in 0..n {
            dz1_sum.iter_mut().zip(&dz1[k * h1..(k + 1) * h1]).for_each(|(s, d)| *s += d);
        }
        let (gw1, rest) = grad[o[0]..o[2]].split_at_mut(o[1] - o[0]);
        rest.iter_mut().zip(&dz1_sum).for_each(|(g, d)| *g += d);
        for (i, &r) in x.reference.iter().enumerate() {
            if r != 0.0 {
                gw1[i * h1..(i + 1) * h1].iter_mut().zip(&dz1_sum).for_each(|(g, d)| *g += r * d);
            }
        }
        for k in 0..n {
            let d = &dz1[k * h1..(k + 1) * h1];
            let (idx, val) = x.row(k);
            for (&i, &v) in idx.iter().zip(val) {
                gw1[i as usize * h1..(i as usize + 1) * h1].iter_mut().zip(d).for_each(|(g, dv)| *g += v * dv);
            }
        }
    }
}

/// Sizes of consecutive input blocks; each block gets its own init stream so
/// that, for a fixed seed, shared blocks (proprioception) start identical
/// across sensor configurations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBlocks(pub Vec<usize>);

impl InputBlocks {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub actor_blocks: InputBlocks,
    /// Extra critic-only inputs appended after the actor inputs.
    pub critic_extra: usize,
    pub action_dim: usize,
}

impl PolicySpec {
    pub fn actor_dim(&self) -> usize {
        self.actor_blocks.total()
    }

    pub fn critic_dim(&self) -> usize {
        self.actor_dim() + self.critic_extra
    }
}

/// Actor, log-std and critic parameters in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    pub spec: PolicySpec,
    pub actor: MlpLayout,
    pub critic: MlpLayout,
    pub log_std_offset: usize,
    pub params: Vec<f64>,
    /// Input normalization over critic inputs; the actor uses its prefix.
    pub norm: ObsNormalizer,
}

/// Orthogonal `rows × cols` matrix (orthonormal along the shorter side) times `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut StreamRng) -> Vec<f64> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(short);
    while vecs.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut m = vec![0.0; rows * cols];
    for (s, v) in vecs.iter().enumerate() {
        for (l, &x) in v.iter().enumerate() {
            let (r, c) = if rows >= cols { (l, s) } else { (s, l) };
            m[r * cols + c] = gain * x;
        }
    }
    m
}

impl ActorCritic {
    pub fn zeros(spec: PolicySpec) -> Self {
        let actor = MlpLayout::new(spec.actor_dim(), spec.action_dim, 0);
        let log_std_offset = actor.end();
        let critic = MlpLayout::new(spec.critic_dim(), 1, log_std_offset + spec.action_dim);
        let params = vec![0.0; critic.end()];
        let norm = ObsNormalizer::identity(spec.critic_dim());
        ActorCritic { spec, actor, critic, log_std_offset, params, norm }
    }

    /// Seeded orthogonal initialization: gain 1 for hidden layers, 0.01 for
    /// the action head, 1 for the value head, zero biases, log-std = log 0.5.
    pub fn init(spec: PolicySpec, seed: u64) -> Self {
        let mut ac = ActorCritic::zeros(spec);
        let blocks = ac.spec.actor_blocks.0.clone();
        let extra = ac.spec.critic_extra;
        for (tag, layout, head_gain) in [("actor", ac.actor.clone(), 0.01), ("critic", ac.critic.clone(), 1.0)] {
            let o = layout.offsets();
            let [h1, h2] = layout.hidden;
            let mut block_sizes = blocks.clone();
            if tag == "critic" && extra > 0 {
                block_sizes.push(extra);
            }
            let mut row = 0;
            for (b, &size) in block_sizes.iter().enumerate() {
                let mut r = rng::indexed_stream(seed, &format!("{tag}-w1-block"), b as u64);
                let w = orthogonal(size, h1, 1.0, &mut r);
                ac.params[o[0] + row * h1..o[0] + (row + size) * h1].copy_from_slice(&w);
                row += size;
            }
            let w2 = orthogonal(h1, h2, 1.0, &mut rng::stream(seed, &format!("{tag}-w2")));
            ac.params[o[2]..o[3]].copy_from_slice(&w2);
            let w3 = orthogonal(h2, layout.output, head_gain, &mut rng::stream(seed, &format!("{tag}-w3")));
            ac.params[o[4]..o[5]].copy_from_slice(&w3);
        }
        let ls = ac.log_std_offset;
        ac.params[ls..ls + ac.spec.action_dim].fill(LOG_STD_INIT);
        ac
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_log_std(&mut self, value: f64) {
        let ls = self.log_std_offset;
        self.params[ls..ls + self.spec.action_dim].fill(value);
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params[self.log_std_offset..self.log_std_offset + self.spec.action_dim]
    }

    /// Clamped standard deviations.
    pub fn std(&self) -> Vec<f64> {
        self.log_std().iter().map(|l| l.exp().clamp(STD_MIN, STD_MAX)).collect()
    }

    /// Whether each log-std entry is inside the clamp band (gradient passes).
    pub fn std_active(&self) -> Vec<bool> {
        self.log_std().iter().map(|l| (STD_MIN.ln()..=STD_MAX.ln()).contains(l)).collect()
    }

    pub fn actor_forward(&self, x: Inputs<'_>) -> MlpCache {
        self.actor.forward(&self.params, x)
    }

    pub fn critic_forward(&self, x: Inputs<'_>) -> MlpCache {
        self.critic.forward(&self.params, x)
    }

    /// Dense single-observation mean and std.
    pub fn actor_forward_dense(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if obs.len() != self.actor.input {
            return Err(Error::config(format!("actor expects {} inputs, got {}", self.actor.input, obs.len())));
        }
        let reference = vec![0.0; obs.len()];
        let mut b = SparseBatch::new(obs.len());
        self.norm.push(&mut b, obs);
        let cache = self.actor_forward(Inputs { batch: &b, rows: &[0], reference: &reference });
        Ok((cache.out, self.std()))
    }

    pub fn critic_forward_dense(&self, obs: &[f64]) -> Result<f64> {
        if obs.len() != self.critic.input {
            return Err(Error::config(format!("critic expects {} inputs, got {}", self.critic.input, obs.len())));
        }
        let reference = vec![0.0; obs.len()];
        let mut b = SparseBatch::new(obs.len());
        self.norm.push(&mut b, obs);
        Ok(self.critic_forward(Inputs { batch: &b, rows: &[0], reference: &reference }).out[0])
    }
}

/// A sampled action and its log-density.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Diagonal Gaussian log-density.
pub fn log_prob(mean: &[f64], std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(a)
        .map(|((m, s), x)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - HALF_LOG_2PI
        })
        .sum()
}

pub fn sample_and_logprob(mean: &[f64], std: &[f64], rng: &mut impl Rng) -> ActionSample {
    let action: Vec<f64> = mean
        .iter()
        .zip(std)
        .map(|(m, s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * e
        })
        .collect();
    let lp = log_prob(mean, std, &action);
    ActionSample { action, log_prob: lp }
}

/// Differential entropy of the diagonal Gaussian.
pub fn entropy(std: &[f64]) -> f64 {
    std.iter().map(|s| 0.5 + HALF_LOG_2PI + s.ln()).sum()
}

pub fn gaussian_normalizer() -> f64 {
    (2.0 * PI).sqrt()
}

// ---------------------------------------------------------------- checkpoint

const MAGIC: &[u8; 8] = b"DODGEPOL";
const VERSION: u32 = 2;

/// Text sidecar written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub spec: PolicySpec,
    pub num_params: usize,
    /// Free-form run configuration (env, sensors, learner settings).
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl ActorCritic {
    /// Binary layout (little-endian): magic `DODGEPOL`, u32 version, u32
    /// block count, u32 block sizes, u32 critic extra, u32 action dim,
    /// u32 hidden width ×2, u64 parameter count, f32 parameters in flat
    /// order, then the input normalizer: f32 reference and f32 inverse scale,
    /// one of each per critic input.
    pub fn write_checkpoint(&self, path: &Path, config: serde_json::Value) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 4 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.spec.actor_blocks.0.len() as u32).to_le_bytes());
        for b in &self.spec.actor_blocks.0 {
            buf.extend_from_slice(&(*b as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.spec.critic_extra as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.action_dim as u32).to_le_bytes());
        for h in self.actor.hidden {
            buf.extend_from_slice(&(h as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in self.params.iter().chain(&self.norm.reference).chain(&self.norm.inv_scale) {
            buf.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let meta = CheckpointMeta {
            format: format!("dodge-policy v{VERSION}, f32 little-endian"),
            spec: self.spec.clone(),
            num_params: self.params.len(),
            config,
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        std::fs::write(&side, text).map_err(|e| Error::io(side, e))?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<ActorCritic> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Parse { path: path.to_path_buf(), message: m.to_string() };
        let mut cur = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(cur..cur + n).ok_or_else(|| bad("truncated checkpoint"))?;
            cur += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a policy checkpoint (bad magic)"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let version = u32_at(take(4)?);
        if version != VERSION as usize {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let nblocks = u32_at(take(4)?);
        if nblocks > 16 {
            return Err(bad("implausible block count"));
        }
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            blocks.push(u32_at(take(4)?));
        }
        let critic_extra = u32_at(take(4)?);
        let action_dim = u32_at(take(4)?);
        let h = [u32_at(take(4)?), u32_at(take(4)?)];
        if h != [HIDDEN, HIDDEN] {
            return Err(bad("hidden widths differ from the fixed 32×32 architecture"));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let spec = PolicySpec { actor_blocks: InputBlocks(blocks), critic_extra, action_dim };
        let mut ac = ActorCritic::zeros(spec);
        if count != ac.params.len() {
            return Err(bad("parameter count does not match the stored dimensions"));
        }
        let raw = take(4 * count)?;
        let read = |dst: &mut [f64], raw: &[u8]| {
            for (p, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        };
        read(&mut ac.params, raw);
        let dim = ac.spec.critic_dim();
        read(&mut ac.norm.reference, take(4 * dim)?);
        read(&mut ac.norm.inv_scale, take(4 * dim)?);
        if cur != bytes.len() {
            return Err(bad("trailing bytes after checkpoint payload"));
        }
        Ok(ac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn spec(blocks: Vec<usize>, extra: usize, act: usize) -> PolicySpec {
        PolicySpec { actor_blocks: InputBlocks(blocks), critic_extra: extra, action_dim: act }
    }

    fn dense_batch(rows: &[Vec<f64>], reference: &[f64]) -> SparseBatch {
        let mut b = SparseBatch::new(reference.len());
        for r in rows {
            b.push_dense(r, reference);
        }
        b
    }

    #[test]
    fn zero_params_give_zero_mean_unit_std() {
        let mut ac = ActorCritic::zeros(spec(vec![5], 3, 2));
        let ls = ac.log_std_offset;
        ac.params[ls..ls + 2].fill(0.0);
        let (mean, std) = ac.actor_forward_dense(&[0.3, -1.0, 2.0, 0.0, 5.0]).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        assert_eq!(std, vec![1.0, 1.0]);
        assert_eq!(ac.critic_forward_dense(&[1.0; 8]).unwrap(), 0.0);
        assert!(ac.actor_forward_dense(&[0.0; 4]).unwrap_err().is_config());
        assert!(ac.critic_forward_dense(&[0.0; 5]).unwrap_err().is_config());
    }

    #[test]
    fn std_is_clamped() {
        let mut ac = ActorCritic::zeros(spec(vec![2], 0, 3));
        let ls = ac.log_std_offset;
        ac.params[ls..ls + 3].copy_from_slice(&[-20.0, 0.0, 5.0]);
        assert_eq!(ac.std(), vec![STD_MIN, 1.0, STD_MAX]);
        assert_eq!(ac.std_active(), vec![false, true, false]);
    }

    #[test]
    fn sparse_forward_matches_dense_reference_free() {
        let ac = ActorCritic::init(spec(vec![4, 6], 3, 2), 7);
        let mut rng = StreamRng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..10).map(|i| if i % 3 == 0 { 1.0 } else { rng.random::<f64>() - 0.5 }).collect())
            .collect();
        let reference: Vec<f64> = (0..10).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let b = dense_batch(&rows, &reference);
        let ids: Vec<usize> = (0..5).collect();
        let sparse = ac.actor_forward(Inputs { batch: &b, rows: &ids, reference: &reference });
        for (k, r) in rows.iter().enumerate() {
            let (m, _) = ac.actor_forward_dense(r).unwrap();
            for (a, b) in m.iter().zip(&sparse.out[k * 2..k * 2 + 2]) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shared_input_blocks_start_identical() {
        let a = ActorCritic::init(spec(vec![48, 64], 3, 21), 5);
        let b = ActorCritic::init(spec(vec![48, 4096], 3, 21), 5);
        let h = HIDDEN;
        assert_eq!(&a.params[..48 * h], &b.params[..48 * h]);
        let off = |ac: &ActorCritic| ac.actor.offset + ac.actor.input * h;
        assert_eq!(&a.params[off(&a)..a.log_std_offset], &b.params[off(&b)..b.log_std_offset]);
        // fixed capacity: only the first-layer fan-in differs
        let diff = b.num_params() - a.num_params();
        assert_eq!(diff, 2 * (4096 - 64) * h);
    }

    #[test]
    fn init_is_orthogonal_and_seeded() {
        let ac = ActorCritic::init(spec(vec![40], 0, 3), 3);
        let w2 = &ac.params[40 * 32 + 32..40 * 32 + 32 + 32 * 32];
        for i in 0..32 {
            for j in 0..32 {
                let d: f64 = (0..32).map(|k| w2[k * 32 + i] * w2[k * 32 + j]).sum();
                assert_abs_diff_eq!(d, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-10);
            }
        }
        assert_eq!(ac, ActorCritic::init(spec(vec![40], 0, 3), 3));
        assert_ne!(ac, ActorCritic::init(spec(vec![40], 0, 3), 4));
        assert!(ac.log_std().iter().all(|&l| (l - 0.5f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn log_prob_examples() {
        assert_abs_diff_eq!(log_prob(&[0.3], &[1.0], &[0.3]), -0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(log_prob(&[0.3], &[1.0], &[1.3]), -0.5 - 0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(-0.5 * (2.0 * PI).ln(), -0.9189, epsilon = 1e-4);
    }

    #[test]
    fn sampled_log_prob_matches_recomputation() {
        let mut rng = StreamRng::seed_from_u64(3);
        let s = sample_and_logprob(&[0.1, -0.4], &[0.5, 2.0], &mut rng);
        assert_abs_diff_eq!(s.log_prob, log_prob(&[0.1, -0.4], &[0.5, 2.0], &s.action), epsilon = 1e-15);
    }

    #[test]
    fn entropy_closed_form() {
        let std = [0.5, 1.0, 1.7];
        let expect: f64 = std.iter().map(|s: &f64| 0.5 + 0.5 * (2.0 * PI).ln() + s.ln()).sum();
        assert_abs_diff_eq!(entropy(&std), expect, epsilon = 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let ac = ActorCritic::init(spec(vec![6], 2, 3), 1);
        let reference = vec![0.0; 6];
        let b = dense_batch(&[vec![0.5; 6], vec![-0.2; 6]], &reference);
        let ids = [0, 1];
        let x = Inputs { batch: &b, rows: &ids, reference: &reference };
        let cache = ac.actor_forward(x);
        let mut g = vec![0.0; ac.num_params()];
        ac.actor.backward(&ac.params, x, &cache, &[0.0; 6], &mut g);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_gradient_closed_form() {
        // with W2, W3 as identity-like maps, dL/db3 for L = Σ out equals n
        let ac = ActorCritic::init(spec(vec![3], 0, 2), 2);
        let reference = vec![0.0; 3];
        let b = dense_batch(&[vec![0.1, 0.2, 0.3], vec![1.0, 0.0, -1.0], vec![0.0; 3]], &reference);
        let ids = [0, 1, 2];
        let x = Inputs { batch: &b, rows: &ids, reference: &reference };
        let cache = ac.actor_forward(x);
        let mut g = vec![0.0; ac.num_params()];
        ac.actor.backward(&ac.params, x, &cache, &[1.0; 6], &mut g);
        let o = ac.actor.offsets();
        assert_eq!(&g[o[5]..o[6]], &[3.0, 3.0]);
        // dL/dW3[i, o] = Σ_n a2[n, i]
        for i in 0..32 {
            let s: f64 = (0..3).map(|n| cache.a2[n * 32 + i]).sum();
            assert_abs_diff_eq!(g[o[4] + i * 2], s, epsilon = 1e-12);
            assert_abs_diff_eq!(g[o[4] + i * 2 + 1], s, epsilon = 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut ac = ActorCritic::init(spec(vec![48, 64], 3, 21), 9);
        let mut reference = vec![0.0; 115];
        reference[47] = -1.0;
        ac.norm = ObsNormalizer::new(reference);
        let mut m = ObsMoments::new(115);
        let x: Vec<f64> = (0..115).map(|i| (i as f64 * 0.37).sin()).collect();
        m.add(&x, &ac.norm.reference.clone());
        ac.norm.update(&m);
        ac.write_checkpoint(&path, serde_json::json!({"note": "test"})).unwrap();
        let back = ActorCritic::read_checkpoint(&path).unwrap();
        assert_eq!(back.spec, ac.spec);
        for (a, b) in ac.params.iter().zip(&back.params) {
            assert_eq!(*b, (*a as f32) as f64);
        }
        assert_eq!(back.norm.reference, ac.norm.reference);
        for (a, b) in ac.norm.inv_scale.iter().zip(&back.norm.inv_scale) {
            assert_eq!(*b, (*a as f32) as f64);
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(ActorCritic::read_checkpoint(&path).unwrap_err().is_config());
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.num_params, ac.num_params());

        std::fs::write(&path, b"NOTAPOLICY").unwrap();
        assert!(ActorCritic::read_checkpoint(&path).unwrap_err().is_config());
    }

    #[test]
    fn normalizer_scales_by_rms_and_keeps_sparsity() {
        let reference = vec![0.0, 1.0, 0.0];
        let mut n = ObsNormalizer::new(reference.clone());
        let rows = [[0.2, 1.0, 0.0], [-0.2, 1.0, 0.0], [0.2, 1.0, 3.0], [-0.2, 1.0, 0.0]];
        let mut m = ObsMoments::new(3);
        for r in &rows {
            m.add(r, &reference);
        }
        n.update(&m);
        // rms of entry 0 is 0.2; entry 1 never deviates; entry 2 has rms 1.5
        assert_abs_diff_eq!(n.inv_scale[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.inv_scale[1], 1.0 / OBS_RMS_FLOOR, epsilon = 1e-9);
        assert_abs_diff_eq!(n.inv_scale[2], 1.0 / 1.5, epsilon = 1e-12);

        let mut b = SparseBatch::new(3);
        n.push(&mut b, &[0.1, 1.0, 100.0]);
        let (idx, val) = b.row(0);
        assert_eq!(idx, &[0, 2]);
        assert_abs_diff_eq!(val[0], 0.5, epsilon = 1e-12);
        assert_eq!(val[1], OBS_CLIP);

        // statistics accumulate across updates
        n.update(&m);
        assert_abs_diff_eq!(n.inv_scale[0], 5.0, epsilon = 1e-12);
        assert_eq!(n.moments.count, 8.0);
    }

    #[test]
    fn identity_normalizer_leaves_dense_forward_unchanged() {
        let mut ac = ActorCritic::init(spec(vec![4], 1, 2), 3);
        let x = [0.3, -0.1, 0.0, 2.0];
        let (m1, _) = ac.actor_forward_dense(&x).unwrap();
        let b = dense_batch(&[x.to_vec()], &[0.0; 4]);
        let direct = ac.actor_forward(Inputs { batch: &b, rows: &[0], reference: &[0.0; 4] }).out;
        assert_eq!(m1, direct);
        ac.norm.inv_scale = vec![2.0; 5];
        let (m2, _) = ac.actor_forward_dense(&[0.15, -0.05, 0.0, 1.0]).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
