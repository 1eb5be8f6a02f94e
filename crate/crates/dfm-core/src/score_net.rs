//! The structured score network: a per-asset diagonal rescaling built from a
//! learnable variance-like vector `c`, an orthonormal linear encoder/decoder
//! pair `V`, a small ReLU MLP acting in the k-dimensional latent space, and a
//! diagonal skip connection.
//!
//! Forward map:
//! `s(r, t) = alpha_t D_t V g(V' D_t r, t) - D_t r` with
//! `D_t = diag(1 / (h_t + alpha_t^2 c_i))`.
//!
//! `backward` returns exact reverse-mode gradients of the mean batch loss for
//! every parameter: `c` through both the skip term and the encoder input, and
//! `V` through its encoder and decoder occurrences. `project_constraints`
//! retracts `V` onto orthonormal columns and clamps `c` into `[0, c_max]`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{DfmError, Result};
use crate::linalg::{dot, norm2, qr_orthonormalize, Mat};
use crate::rng::keyed_rng;

/// Extra inputs handed to the MLP alongside the latent code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeFeatures {
    /// Normalized time `t / T` only.
    #[default]
    Normalized,
    /// `t / T`, `alpha_t`, and `h_t`.
    Extended,
}

impl TimeFeatures {
    fn width(self) -> usize {
        match self {
            TimeFeatures::Normalized => 1,
            TimeFeatures::Extended => 3,
        }
    }

    fn fill(self, out: &mut Vec<f64>, t: f64, sched: &DiffusionSchedule, alpha: f64, h: f64) {
        out.push(t / sched.t_terminal());
        if self == TimeFeatures::Extended {
            out.push(alpha);
            out.push(h);
        }
    }
}

/// One dense layer: `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// ReLU MLP over the latent code and time features: hidden layers ReLU,
/// linear output of width k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input: usize, hidden: &[usize], output: usize, seed: u64) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = keyed_rng(seed, &[0x6d6c70, l as u64]);
            let weight = Mat::from_fn(fan_out, fan_in, |_, _| {
                (rng.random::<f64>() * 2.0 - 1.0) * bound
            });
            layers.push(DenseLayer {
                weight,
                bias: vec![0.0; fan_out],
            });
        }
        MlpParams { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DfmError::InvalidInput("MLP needs at least one layer".into()));
        }
        for (l, w) in self.layers.windows(2).enumerate() {
            if w[1].weight.cols() != w[0].weight.rows() {
                return Err(DfmError::InvalidInput(format!(
                    "layer {} output width {} does not chain into layer {} input width {}",
                    l,
                    w[0].weight.rows(),
                    l + 1,
                    w[1].weight.cols()
                )));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(DfmError::InvalidInput(format!(
                    "layer {l} bias length mismatch"
                )));
            }
            if layer.weight.data().iter().any(|v| !v.is_finite())
                || layer.bias.iter().any(|v| !v.is_finite())
            {
                return Err(DfmError::InvalidInput(format!(
                    "layer {l} has non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    /// Forward pass caching pre-activations of every layer for backprop.
    fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n_layers = self.layers.len();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = layer.weight.matvec(acts.last().unwrap());
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            if l + 1 < n_layers {
                for p in pre.iter_mut() {
                    if *p < 0.0 {
                        *p = 0.0;
                    }
                }
            }
            acts.push(pre);
        }
        let out = acts.last().unwrap().clone();
        (out, acts)
    }

    /// Backprop through the cached activations; returns per-layer gradients
    /// and the gradient with respect to the input vector.
    fn backward_cached(
        &self,
        acts: &[Vec<f64>],
        out_grad: &[f64],
        grads: &mut [DenseLayer],
    ) -> Vec<f64> {
        let n_layers = self.layers.len();
        let mut delta = out_grad.to_vec();
        for l in (0..n_layers).rev() {
            // Hidden layers stored post-ReLU, so a zero activation gates
            // the gradient (output layer is linear).
            if l + 1 < n_layers {
                for (d, &a) in delta.iter_mut().zip(&acts[l + 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &acts[l];
            let g = &mut grads[l];
            for i in 0..delta.len() {
                g.bias[i] += delta[i];
                let row = g.weight.row_mut(i);
                let di = delta[i];
                for (w, &x) in row.iter_mut().zip(input.iter()) {
                    *w += di * x;
                }
            }
            delta = self.layers[l].weight.tr_matvec(&delta);
        }
        delta
    }

    fn zeros_like(&self) -> Vec<DenseLayer> {
        self.layers
            .iter()
            .map(|l| DenseLayer {
                weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect()
    }
}

/// Full parameter bundle of the score network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetParams {
    pub c: Vec<f64>,
    pub v: Mat,
    pub mlp: MlpParams,
    pub c_max: f64,
    /// Optional L2 clipping radius on the MLP output; off by default.
    pub clip_radius: Option<f64>,
    pub time_features: TimeFeatures,
}

impl ScoreNetParams {
    /// Fresh network: `V` is the QR of a Gaussian draw, `c = c_max / 2`, and
    /// the MLP input width is `k` plus the time features.
    pub fn init(
        d: usize,
        k: usize,
        hidden: &[usize],
        c_max: f64,
        time_features: TimeFeatures,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || k > d {
            return Err(DfmError::InvalidInput(format!(
                "need 1 <= k <= d, got k={k}, d={d}"
            )));
        }
        if !(c_max > 0.0 && c_max.is_finite()) {
            return Err(DfmError::InvalidInput("c_max must be positive".into()));
        }
        let mut rng = keyed_rng(seed, &[0x5643]);
        let raw = Mat::from_fn(d, k, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let v = qr_orthonormalize(&raw)?;
        let mlp = MlpParams::init(k + time_features.width(), hidden, k, seed);
        Ok(ScoreNetParams {
            c: vec![c_max / 2.0; d],
            v,
            mlp,
            c_max,
            clip_radius: None,
            time_features,
        })
    }

    pub fn d(&self) -> usize {
        self.v.rows()
    }

    pub fn k(&self) -> usize {
        self.v.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.len() != self.d() {
            return Err(DfmError::InvalidInput("c length != d".into()));
        }
        self.mlp.validate()?;
        let want = self.k() + self.time_features.width();
        if self.mlp.input_width() != want {
            return Err(DfmError::InvalidInput(format!(
                "MLP input width {} != k + time features = {want}",
                self.mlp.input_width()
            )));
        }
        if self.mlp.output_width() != self.k() {
            return Err(DfmError::InvalidInput(format!(
                "MLP output width {} != k = {}",
                self.mlp.output_width(),
                self.k()
            )));
        }
        Ok(())
    }

    /// Parameter norms for diagnostics.
    pub fn norms(&self) -> (f64, f64, f64) {
        let c = norm2(&self.c);
        let v = crate::linalg::fro_norm(&self.v);
        let mlp = self
            .mlp
            .layers
            .iter()
            .map(|l| {
                l.weight.data().iter().map(|x| x * x).sum::<f64>()
                    + l.bias.iter().map(|x| x * x).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        (c, v, mlp)
    }

    /// Flatten all parameters (c, V, layer weights and biases) into one
    /// vector in a fixed order. Mirrors [`ScoreNetParams::assign_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.c);
        out.extend_from_slice(self.v.data());
        for l in &self.mlp.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrite parameters from a flat vector produced by [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        let nc = self.c.len();
        self.c.copy_from_slice(&flat[at..at + nc]);
        at += nc;
        let (vr, vc) = (self.v.rows(), self.v.cols());
        self.v = Mat::from_vec(vr, vc, flat[at..at + vr * vc].to_vec()).expect("flat shape");
        at += vr * vc;
        for l in self.mlp.layers.iter_mut() {
            let (r, c) = (l.weight.rows(), l.weight.cols());
            l.weight = Mat::from_vec(r, c, flat[at..at + r * c].to_vec()).expect("flat shape");
            at += r * c;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }
}

/// Gradient bundle matching [`ScoreNetParams`].
#[derive(Clone, Debug)]
pub struct ScoreNetGrad {
    pub c: Vec<f64>,
    pub v: Mat,
    pub mlp: Vec<DenseLayer>,
}

impl ScoreNetGrad {
    fn zeros_like(p: &ScoreNetParams) -> Self {
        ScoreNetGrad {
            c: vec![0.0; p.c.len()],
            v: Mat::zeros(p.v.rows(), p.v.cols()),
            mlp: p.mlp.zeros_like(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.c);
        out.extend_from_slice(self.v.data());
        for l in &self.mlp {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn accumulate(&mut self, other: &ScoreNetGrad) {
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += b;
        }
        self.v = self.v.add(&other.v);
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            a.weight = a.weight.add(&b.weight);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

/// One training sample: the noised return, its diffusion time, the denoising
/// target, and a loss weight (1 for the plain objective).
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub r_t: Vec<f64>,
    pub t: f64,
    pub target: Vec<f64>,
    pub weight: f64,
}

struct ForwardCache {
    d_diag: Vec<f64>,
    u: Vec<f64>,
    acts: Vec<Vec<f64>>,
    g_raw: Vec<f64>,
    g: Vec<f64>,
    vg: Vec<f64>,
    score: Vec<f64>,
    alpha: f64,
}

fn forward_cached(
    p: &ScoreNetParams,
    sched: &DiffusionSchedule,
    r: &[f64],
    t: f64,
) -> Result<ForwardCache> {
    if r.len() != p.d() {
        return Err(DfmError::InvalidInput(format!(
            "input has {} entries for d={}",
            r.len(),
            p.d()
        )));
    }
    if !(t >= sched.t_early() - 1e-12 && t <= sched.t_terminal() + 1e-12) {
        return Err(DfmError::RangeError(format!(
            "network time {t} outside [{}, {}]",
            sched.t_early(),
            sched.t_terminal()
        )));
    }
    let alpha = sched.alpha(t)?;
    let h = sched.h(t)?;
    let d_diag: Vec<f64> = p.c.iter().map(|c| 1.0 / (h + alpha * alpha * c)).collect();
    let u: Vec<f64> = r.iter().zip(&d_diag).map(|(ri, di)| ri * di).collect();
    let z = p.v.tr_matvec(&u);
    let mut feats = z;
    p.time_features.fill(&mut feats, t, sched, alpha, h);
    let (g_raw, acts) = p.mlp.forward_cached(&feats);
    let g = match p.clip_radius {
        Some(radius) => {
            let n = norm2(&g_raw);
            if n > radius {
                g_raw.iter().map(|x| x * radius / n).collect()
            } else {
                g_raw.clone()
            }
        }
        None => g_raw.clone(),
    };
    let vg = p.v.matvec(&g);
    let score: Vec<f64> = (0..p.d())
        .map(|i| d_diag[i] * (alpha * vg[i] - r[i]))
        .collect();
    Ok(ForwardCache {
        d_diag,
        u,
        acts,
        g_raw,
        g,
        vg,
        score,
        alpha,
    })
}

/// Evaluate the network score at `(r, t)`.
pub fn forward(
    p: &ScoreNetParams,
    sched: &DiffusionSchedule,
    r: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    Ok(forward_cached(p, sched, r, t)?.score)
}

/// Mean weighted squared-error loss over a batch and its exact gradients.
///
/// Per sample the loss is `weight * |s(r_t, t) - target|^2`; the reported
/// value and all gradients correspond to the batch mean.
pub fn backward(
    p: &ScoreNetParams,
    sched: &DiffusionSchedule,
    batch: &[TrainSample],
) -> Result<(ScoreNetGrad, f64)> {
    if batch.is_empty() {
        return Err(DfmError::InvalidInput("empty batch".into()));
    }
    p.validate()?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = ScoreNetGrad::zeros_like(p);
    let mut loss = 0.0;
    for sample in batch {
        let (g_s, l_s) = backward_one(p, sched, sample, inv_b)?;
        grad.accumulate(&g_s);
        loss += l_s;
    }
    Ok((grad, loss))
}

fn backward_one(
    p: &ScoreNetParams,
    sched: &DiffusionSchedule,
    sample: &TrainSample,
    inv_b: f64,
) -> Result<(ScoreNetGrad, f64)> {
    let cache = forward_cached(p, sched, &sample.r_t, sample.t)?;
    if sample.target.len() != p.d() {
        return Err(DfmError::InvalidInput("target dimension mismatch".into()));
    }
    let d = p.d();
    let k = p.k();
    let alpha = cache.alpha;
    let w = sample.weight;

    let resid: Vec<f64> = cache
        .score
        .iter()
        .zip(&sample.target)
        .map(|(s, t)| s - t)
        .collect();
    let loss = w * inv_b * dot(&resid, &resid);

    // dL/ds, then push through the architecture.
    let ds: Vec<f64> = resid.iter().map(|r| 2.0 * w * inv_b * r).collect();
    let d_ds: Vec<f64> = ds.iter().zip(&cache.d_diag).map(|(g, di)| g * di).collect();

    // dL/dg through the decoder, with clip backprop when the clip is active.
    let q_clipped = {
        let mut q = p.v.tr_matvec(&d_ds);
        for qi in q.iter_mut() {
            *qi *= alpha;
        }
        q
    };
    let q_raw = match p.clip_radius {
        Some(radius) => {
            let n = norm2(&cache.g_raw);
            if n > radius {
                // g = radius * g_raw / |g_raw|: Jacobian (radius/n)(I - gg'/n^2).
                let ghat: Vec<f64> = cache.g_raw.iter().map(|x| x / n).collect();
                let along = dot(&ghat, &q_clipped);
                q_clipped
                    .iter()
                    .zip(&ghat)
                    .map(|(qi, gi)| (radius / n) * (qi - along * gi))
                    .collect()
            } else {
                q_clipped.clone()
            }
        }
        None => q_clipped.clone(),
    };

    let mut grad = ScoreNetGrad::zeros_like(p);
    let feat_grad = p.mlp.backward_cached(&cache.acts, &q_raw, &mut grad.mlp);
    let dz = &feat_grad[..k];

    // du = V dz (encoder input gradient).
    let du = p.v.matvec(dz);

    // dc_i picks up the skip/decoder term and the encoder term, both through
    // dD_ii/dc_i = -alpha^2 D_ii^2.
    for i in 0..d {
        let dd = -alpha * alpha * cache.d_diag[i] * cache.d_diag[i];
        let direct = ds[i] * (alpha * cache.vg[i] - sample.r_t[i]);
        let via_encoder = du[i] * sample.r_t[i];
        grad.c[i] = (direct + via_encoder) * dd;
    }

    // dV: decoder occurrence alpha (D ds) g' plus encoder occurrence u dz'.
    for i in 0..d {
        let row = grad.v.row_mut(i);
        let a_dsi = alpha * d_ds[i];
        let ui = cache.u[i];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = a_dsi * cache.g[j] + ui * dz[j];
        }
    }
    Ok((grad, loss))
}

/// Nondifferentiability signature of the network on a batch: the on/off mask
/// of every hidden ReLU plus the clip-active flag, per sample. Finite
/// difference probes that change this signature straddle a kink and cannot
/// be compared against the analytic (sub)gradient.
pub fn activation_signature(
    p: &ScoreNetParams,
    sched: &DiffusionSchedule,
    batch: &[TrainSample],
) -> Result<Vec<bool>> {
    let mut sig = Vec::new();
    for sample in batch {
        let cache = forward_cached(p, sched, &sample.r_t, sample.t)?;
        let n_layers = p.mlp.layers.len();
        for acts in cache.acts.iter().take(n_layers).skip(1) {
            for &a in acts {
                sig.push(a > 0.0);
            }
        }
        if let Some(radius) = p.clip_radius {
            sig.push(norm2(&cache.g_raw) > radius);
        }
    }
    Ok(sig)
}

/// Retract onto the constraint set: orthonormalize `V` by QR and clamp each
/// `c_i` into `[0, c_max]`.
pub fn project_constraints(p: &ScoreNetParams) -> Result<ScoreNetParams> {
    let mut out = p.clone();
    out.v = qr_orthonormalize(&p.v)?;
    for c in out.c.iter_mut() {
        *c = c.clamp(0.0, p.c_max);
    }
    Ok(out)
}

/// Versioned JSON checkpoint: dimensions, all parameters, schedule constants,
/// and the seed lineage. JSON floats round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub d: usize,
    pub k: usize,
    pub params: ScoreNetParams,
    pub schedule: DiffusionSchedule,
    pub seed_lineage: Vec<u64>,
}

impl Checkpoint {
    pub fn new(params: ScoreNetParams, schedule: DiffusionSchedule, seed_lineage: Vec<u64>) -> Self {
        Checkpoint {
            version: 1,
            d: params.d(),
            k: params.k(),
            params,
            schedule,
            seed_lineage,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let s = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&s)?;
        if ck.version != 1 {
            return Err(DfmError::InvalidInput(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}
