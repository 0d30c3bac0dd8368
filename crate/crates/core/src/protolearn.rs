//! Prototypical self-supervised pre-training across domains.
//!
//! An online encoder/projector/predictor sees a shifted frame stack `x_t`
//! and predicts, through a softmax over prototype similarities, the
//! cluster assignment that the slow (EMA) target encoder/projector gives
//! to the shifted next stack `x_{t+1}`. Assignment targets come from
//! [`crate::sinkhorn`] and carry no gradient. A prototype-diffusion term
//! pushes normalized prototypes apart. Buffers are visited cyclically,
//! one update per buffer.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::collect::DomainBuffer;
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics;
use crate::ndmath::layers::{self, bind, Bound, ConvTower};
use crate::ndmath::{ema_update, l2_normalize_rows, Adam, Checkpoint, Graph, ParamSet, Scalar, Tensor, Var};
use crate::seeds;
use crate::sinkhorn;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub temperature: f64,
    pub intrinsic_weight: f64,
    pub intrinsic_coef: f64,
    pub ema: f64,
    pub batch: usize,
    pub prototypes: usize,
    pub latent: usize,
    pub predictor_hidden: usize,
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub pretrain_updates: usize,
    pub finetune_updates: usize,
    pub lr: f64,
    pub shift_pad: usize,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iterations: usize,
    /// Rescale each target row to sum to one before the cross-entropy.
    pub renormalize_targets: bool,
    /// Coverage statistics are logged every this many updates (0 = never).
    pub coverage_every: usize,
    pub coverage_k: usize,
}

impl SslConfig {
    pub fn desk() -> Self {
        Self {
            temperature: 0.1,
            intrinsic_weight: 1.5,
            intrinsic_coef: 5e-3,
            ema: 0.05,
            batch: 64,
            prototypes: 64,
            latent: 32,
            predictor_hidden: 64,
            conv_channels: vec![16, 16],
            conv_strides: vec![2, 2],
            pretrain_updates: 2000,
            finetune_updates: 500,
            lr: 1e-4,
            shift_pad: 2,
            sinkhorn_epsilon: sinkhorn::DEFAULT_EPSILON,
            sinkhorn_iterations: sinkhorn::DEFAULT_ITERATIONS,
            renormalize_targets: true,
            coverage_every: 100,
            coverage_k: 3,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch: 512,
            prototypes: 512,
            latent: 128,
            predictor_hidden: 1024,
            conv_channels: vec![32; 4],
            conv_strides: vec![2, 1, 1, 1],
            pretrain_updates: 50_000,
            finetune_updates: 5_000,
            shift_pad: 4,
            coverage_every: 1000,
            ..Self::desk()
        }
    }

    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.temperature > 0.0) {
            bad.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.intrinsic_weight > 1.0) {
            bad.push(format!("intrinsic weight must exceed 1, got {}", self.intrinsic_weight));
        }
        if !(self.intrinsic_coef >= 0.0) {
            bad.push(format!("intrinsic coefficient must be non-negative, got {}", self.intrinsic_coef));
        }
        if !(self.ema > 0.0 && self.ema <= 1.0) {
            bad.push(format!("target EMA momentum must lie in (0, 1], got {}", self.ema));
        }
        if self.batch == 0 {
            bad.push("batch size must be positive".into());
        }
        if self.prototypes < 2 {
            bad.push(format!("need at least 2 prototypes, got {}", self.prototypes));
        }
        if self.latent == 0 || self.predictor_hidden == 0 {
            bad.push("latent and predictor widths must be positive".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            bad.push("conv channels and strides must be non-empty and of equal length".into());
        }
        if !(self.lr > 0.0) {
            bad.push(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.sinkhorn_epsilon > 0.0) {
            bad.push(format!("sinkhorn epsilon must be positive, got {}", self.sinkhorn_epsilon));
        }
        if self.coverage_k == 0 || self.coverage_k >= self.prototypes {
            bad.push(format!(
                "coverage k must lie in 1..{}, got {}",
                self.prototypes, self.coverage_k
            ));
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(bad))
        }
    }

    pub fn tower(&self, in_channels: usize, input_size: usize) -> ConvTower {
        ConvTower {
            in_channels,
            input_size,
            channels: self.conv_channels.clone(),
            strides: self.conv_strides.clone(),
            kernel: 3,
        }
    }
}

/// Edge-pad every image by `pad` and crop back at a random offset in
/// `[0, 2 * pad]²`; one offset per image, shared by its channels.
pub fn augment_shift<T: Scalar>(batch: &Tensor<T>, pad: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected [B, C, H, W], got {shape:?}")));
    }
    let size = shape[2].min(shape[3]);
    if pad >= size {
        return Err(Error::PadTooLarge { pad, size });
    }
    let shifts: Vec<(usize, usize)> = (0..shape[0])
        .map(|_| (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad)))
        .collect();
    Ok(shift_with(batch, pad, &shifts))
}

/// Shift image `b` so that output `(y, x)` reads padded source
/// `(y + dy, x + dx)`, i.e. original `(y + dy - pad, x + dx - pad)` clamped.
pub fn shift_with<T: Scalar>(batch: &Tensor<T>, pad: usize, shifts: &[(usize, usize)]) -> Tensor<T> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut out = batch.clone();
    if pad == 0 {
        return out;
    }
    let src = batch.data();
    exec::for_each_chunk(out.data_mut(), per, |b, img| {
        let (dy, dx) = shifts[b];
        let base = &src[b * per..(b + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + dy).saturating_sub(pad).min(h - 1);
                for x in 0..w {
                    let sx = (x + dx).saturating_sub(pad).min(w - 1);
                    img[(ch * h + y) * w + x] = base[(ch * h + sy) * w + sx];
                }
            }
        }
    });
    out
}

/// `M` trainable latent vectors; only their normalized view is used.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    pub params: ParamSet<T>,
}

pub const PROTOTYPES: &str = "protos";

impl<T: Scalar> PrototypeBank<T> {
    pub fn random(count: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if count < 2 {
            return Err(Error::TooFewPrototypes { k: 1, m: count });
        }
        let mut params = ParamSet::new();
        params.insert(PROTOTYPES, layers::normal_tensor(&[count, dim], 1.0, rng))?;
        Ok(Self { params })
    }

    pub fn from_raw(raw: Tensor<T>) -> Result<Self> {
        if raw.shape().len() != 2 || raw.rows() < 2 {
            return Err(Error::TooFewPrototypes { k: 1, m: raw.rows() });
        }
        let mut params = ParamSet::new();
        params.insert(PROTOTYPES, raw)?;
        Ok(Self { params })
    }

    pub fn raw(&self) -> &Tensor<T> {
        self.params.value(PROTOTYPES).expect("bank always holds its tensor")
    }

    pub fn len(&self) -> usize {
        self.raw().rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.raw().row_len()
    }

    pub fn normalized(&self) -> Result<Tensor<T>> {
        l2_normalize_rows(self.raw())
    }
}

/// Online encoder/projector, predictor, and their EMA target copies.
///
/// Parameter names: `enc/conv{i}.{w,b}` and `proj.{w,b}` in `online` and
/// `target`; `pred0.{w,b}`, `pred1.{w,b}` in `predictor`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack<T> {
    pub tower: ConvTower,
    pub latent: usize,
    pub predictor_hidden: usize,
    pub online: ParamSet<T>,
    pub predictor: ParamSet<T>,
    pub target: ParamSet<T>,
}

const ENC: &str = "enc/";
const PROJ: &str = "proj";

/// Offset subtracted from pixel intensities before the first convolution.
const PIXEL_SHIFT: f64 = 0.0;

/// Rows per forward chunk when encoding large sample sets.
const ENCODE_CHUNK: usize = 256;

impl<T: Scalar> EncoderStack<T> {
    pub fn new(tower: ConvTower, latent: usize, predictor_hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut online = ParamSet::new();
        tower.init(ENC, &mut online, rng)?;
        layers::init_linear(PROJ, tower.output_dim(), latent, &mut online, rng)?;
        let mut predictor = ParamSet::new();
        layers::init_linear("pred0", latent, predictor_hidden, &mut predictor, rng)?;
        layers::init_linear("pred1", predictor_hidden, latent, &mut predictor, rng)?;
        let target = online.clone();
        Ok(Self {
            tower,
            latent,
            predictor_hidden,
            online,
            predictor,
            target,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.tower.output_dim()
    }

    fn check_frames(&self, frames: &Tensor<T>) -> Result<()> {
        let s = frames.shape();
        let t = &self.tower;
        if s.len() != 4 || s[1] != t.in_channels || s[2] != t.input_size || s[3] != t.input_size {
            return Err(Error::shape(format!(
                "frames {s:?} do not match encoder input [B, {}, {}, {}]",
                t.in_channels, t.input_size, t.input_size
            )));
        }
        Ok(())
    }

    /// `f(frames)` on the graph; `bound` must hold an online-layout set.
    pub fn encode_on(&self, g: &mut Graph<T>, bound: &Bound, frames: Var) -> Result<Var> {
        let x = g.offset(frames, PIXEL_SHIFT);
        self.tower.forward(g, bound, ENC, x)
    }

    pub fn project_on(&self, g: &mut Graph<T>, bound: &Bound, features: Var) -> Result<Var> {
        layers::linear(g, bound, PROJ, features)
    }

    pub fn predict_on(&self, g: &mut Graph<T>, bound: &Bound, z: Var) -> Result<Var> {
        let h = layers::linear(g, bound, "pred0", z)?;
        let h = g.relu(h);
        layers::linear(g, bound, "pred1", h)
    }

    /// Evaluate `f` chunk by chunk without tracking gradients.
    fn chunked(
        &self,
        frames: &Tensor<T>,
        params: &ParamSet<T>,
        f: impl Fn(&mut Graph<T>, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        self.check_frames(frames)?;
        let n = frames.rows();
        let per = frames.row_len();
        let inner = &frames.shape()[1..];
        let mut outs = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + ENCODE_CHUNK).min(n);
            let mut shape = vec![end - start];
            shape.extend_from_slice(inner);
            let chunk = Tensor::new(&shape, frames.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let bound = bind(&mut g, params, false);
            let x = g.input(chunk);
            let y = f(&mut g, &bound, x)?;
            outs.push(g.value(y).clone());
            start = end;
        }
        let width = outs[0].row_len();
        let data = outs.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(&[n, width], data)
    }

    /// Online encoder output `y` (pre-projector features).
    pub fn features(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        self.chunked(frames, &self.online, |g, b, x| self.encode_on(g, b, x))
    }

    /// `z = g(f(frames))` with online parameters.
    pub fn project_online(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        self.chunked(frames, &self.online, |g, b, x| {
            let y = self.encode_on(g, b, x)?;
            self.project_on(g, b, y)
        })
    }

    /// `z` from already-encoded features.
    pub fn project_features(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = bind(&mut g, &self.online, false);
        let y = g.input(features.clone());
        let z = self.project_on(&mut g, &bound, y)?;
        Ok(g.value(z).clone())
    }

    pub fn predict(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.row_len() != self.latent {
            return Err(Error::shape(format!("latent width {} != {}", z.row_len(), self.latent)));
        }
        let mut g = Graph::new();
        let bound = bind(&mut g, &self.predictor, false);
        let zi = g.input(z.clone());
        let u = self.predict_on(&mut g, &bound, zi)?;
        Ok(g.value(u).clone())
    }

    /// `z` through the target encoder/projector.
    pub fn project_target(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        self.chunked(frames, &self.target, |g, b, x| {
            let y = self.encode_on(g, b, x)?;
            self.project_on(g, b, y)
        })
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        let t = &self.tower;
        let mut arch = vec![
            t.in_channels as f64,
            t.input_size as f64,
            t.kernel as f64,
            self.latent as f64,
            self.predictor_hidden as f64,
            t.channels.len() as f64,
        ];
        arch.extend(t.channels.iter().map(|&c| c as f64));
        arch.extend(t.strides.iter().map(|&s| s as f64));
        let n = arch.len();
        ckpt.push_tensor("meta/arch", &Tensor::new(&[n], arch).expect("non-empty"));
        ckpt.push_params("online/", &self.online);
        ckpt.push_params("predictor/", &self.predictor);
        ckpt.push_params("target/", &self.target);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = ckpt.tensor::<f64>("meta/arch")?.into_data();
        let bad = || Error::shape("malformed encoder architecture record");
        if arch.len() < 6 {
            return Err(bad());
        }
        let layers = arch[5] as usize;
        if arch.len() != 6 + 2 * layers {
            return Err(bad());
        }
        let tower = ConvTower {
            in_channels: arch[0] as usize,
            input_size: arch[1] as usize,
            kernel: arch[2] as usize,
            channels: arch[6..6 + layers].iter().map(|&c| c as usize).collect(),
            strides: arch[6 + layers..].iter().map(|&s| s as usize).collect(),
        };
        tower.validate()?;
        let stack = Self {
            tower,
            latent: arch[3] as usize,
            predictor_hidden: arch[4] as usize,
            online: ckpt.params("online/")?,
            predictor: ckpt.params("predictor/")?,
            target: ckpt.params("target/")?,
        };
        if !stack.online.same_layout(&stack.target) {
            return Err(Error::shape("target parameters do not mirror online parameters"));
        }
        Ok(stack)
    }
}

/// Softmax over `û · ĉ_j / τ` on the graph.
pub fn assign_probs_on<T: Scalar>(g: &mut Graph<T>, u: Var, protos: Var, temperature: f64) -> Result<Var> {
    let un = g.l2_normalize_rows(u)?;
    let cn = g.l2_normalize_rows(protos)?;
    let logits = g.matmul_t(un, cn)?;
    let logits = g.scale(logits, 1.0 / temperature);
    Ok(g.softmax_rows(logits))
}

/// `-(1/B) Σ_i q_i · log max(p_i, floor)`.
pub fn comparative_loss_on<T: Scalar>(g: &mut Graph<T>, p: Var, targets: &Tensor<T>) -> Result<Var> {
    let rows = g.value(p).rows() as f64;
    let q = g.input(targets.clone());
    let logp = g.log(p, LOG_FLOOR);
    let prod = g.mul(q, logp)?;
    let total = g.sum_all(prod);
    Ok(g.scale(total, -1.0 / rows))
}

/// `Σ_{j≠k} sg(ĉ_j)·ĉ_k / (sg(ĉ_j·ĉ_k) + w)`.
pub fn intrinsic_loss_on<T: Scalar>(g: &mut Graph<T>, protos: Var, weight: f64) -> Result<Var> {
    let cn = g.l2_normalize_rows(protos)?;
    let fixed = g.detach(cn);
    intrinsic_against(g, cn, fixed, weight)
}

/// The prototype-diffusion sum with the stop-gradient factor `fixed`
/// supplied by the caller (a detached copy of `cn` in training).
pub fn intrinsic_against<T: Scalar>(g: &mut Graph<T>, cn: Var, fixed: Var, weight: f64) -> Result<Var> {
    let sims = g.matmul_t(fixed, cn)?;
    let frozen = crate::ndmath::tensor::matmul_t(g.value(fixed), g.value(fixed))?;
    let m = frozen.rows();
    let mut coef = Vec::with_capacity(m * m);
    for j in 0..m {
        for k in 0..m {
            if j == k {
                coef.push(T::zero());
                continue;
            }
            let denom = frozen.at(j, k).as_f64() + weight;
            if denom < 1e-6 {
                return Err(Error::DegenerateDenominator(denom));
            }
            coef.push(T::lit(1.0 / denom));
        }
    }
    let coef = g.input(Tensor::new(&[m, m], coef)?);
    let terms = g.mul(sims, coef)?;
    Ok(g.sum_all(terms))
}

/// Probability rows for latent rows `u` (value only).
pub fn assign_probs<T: Scalar>(u: &Tensor<T>, bank: &PrototypeBank<T>, temperature: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let uv = g.input(u.clone());
    let c = g.input(bank.raw().clone());
    let p = assign_probs_on(&mut g, uv, c, temperature)?;
    Ok(g.value(p).clone())
}

pub fn comparative_loss<T: Scalar>(p: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    if p.shape() != targets.shape() {
        return Err(Error::shape(format!("p {:?} vs targets {:?}", p.shape(), targets.shape())));
    }
    let mut g = Graph::new();
    let pv = g.input(p.clone());
    let l = comparative_loss_on(&mut g, pv, targets)?;
    let v = g.scalar(l).as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("comparative loss".into()));
    }
    Ok(v)
}

pub fn intrinsic_loss<T: Scalar>(bank: &PrototypeBank<T>, weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.input(bank.raw().clone());
    let l = intrinsic_loss_on(&mut g, c, weight)?;
    Ok(g.scalar(l).as_f64())
}

pub fn ssl_loss(comparative: f64, intrinsic: f64, coef: f64) -> f64 {
    comparative + coef * intrinsic
}

/// Assignment targets for unit-norm target projections `zn` against
/// unit-norm prototypes `cn`.
pub fn targets_for<T: Scalar>(zn: &Tensor<T>, cn: &Tensor<T>, cfg: &SslConfig) -> Result<Tensor<T>> {
    let scores = sinkhorn::score_matrix(zn, cn)?;
    let mut t = sinkhorn::assignment_targets(&scores, cfg.sinkhorn_iterations, cfg.sinkhorn_epsilon)?;
    if cfg.renormalize_targets {
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    Ok(t.cast())
}

/// Buffer visited at update `step`.
pub fn choose_buffer(step: u64, buffers: usize) -> usize {
    (step % buffers.max(1) as u64) as usize
}

/// Graph of one SSL objective evaluation.
pub struct SslGraph<T> {
    pub graph: Graph<T>,
    pub online: Bound,
    pub predictor: Bound,
    pub target: Bound,
    pub protos: Var,
    pub probs: Var,
    pub targets: Tensor<T>,
    pub comparative: Var,
    pub intrinsic: Var,
    pub total: Var,
}

/// Build the full objective for frames `x` and next frames `x_next`
/// (already augmented). Target parameters enter as constants.
pub fn build_objective<T: Scalar>(
    stack: &EncoderStack<T>,
    bank: &PrototypeBank<T>,
    x: &Tensor<T>,
    x_next: &Tensor<T>,
    cfg: &SslConfig,
) -> Result<SslGraph<T>> {
    stack.check_frames(x)?;
    stack.check_frames(x_next)?;
    let mut g = Graph::new();
    let online = bind(&mut g, &stack.online, true);
    let predictor = bind(&mut g, &stack.predictor, true);
    let target = bind(&mut g, &stack.target, false);
    let protos = g.param(bank.raw().clone());

    let xn = g.input(x_next.clone());
    let yt = stack.encode_on(&mut g, &target, xn)?;
    let zt = stack.project_on(&mut g, &target, yt)?;
    let zt = g.l2_normalize_rows(zt)?;
    let cn = bank.normalized()?;
    let targets = targets_for(g.value(zt), &cn, cfg)?;

    let xi = g.input(x.clone());
    let y = stack.encode_on(&mut g, &online, xi)?;
    let z = stack.project_on(&mut g, &online, y)?;
    let u = stack.predict_on(&mut g, &predictor, z)?;
    let probs = assign_probs_on(&mut g, u, protos, cfg.temperature)?;
    let comparative = comparative_loss_on(&mut g, probs, &targets)?;
    let intrinsic = intrinsic_loss_on(&mut g, protos, cfg.intrinsic_weight)?;
    let total = if cfg.intrinsic_coef == 0.0 {
        comparative
    } else {
        let scaled = g.scale(intrinsic, cfg.intrinsic_coef);
        g.add(comparative, scaled)?
    };
    Ok(SslGraph {
        graph: g,
        online,
        predictor,
        target,
        protos,
        probs,
        targets,
        comparative,
        intrinsic,
        total,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub comparative: f64,
    pub intrinsic: f64,
    pub total: f64,
    pub coverage: Option<metrics::CoverageReport>,
    pub buffer: usize,
}

pub fn log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,l_comp,l_intr,l_ssl,ane,kne,buffer\n");
    for r in log {
        let (ane, kne) = match &r.coverage {
            Some(c) => (c.ane.to_string(), c.kne.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.comparative, r.intrinsic, r.total, ane, kne, r.buffer
        );
    }
    out
}

pub fn write_log_csv(log: &[StepLog], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, log_csv(log))?;
    Ok(())
}

/// Online optimization state for repeated SSL updates.
pub struct Trainer<T: Scalar> {
    pub stack: EncoderStack<T>,
    pub bank: PrototypeBank<T>,
    cfg: SslConfig,
    opt_online: Adam<T>,
    opt_predictor: Adam<T>,
    opt_bank: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(stack: EncoderStack<T>, bank: PrototypeBank<T>, cfg: &SslConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if bank.dim() != stack.latent {
            return Err(Error::shape(format!(
                "prototype width {} != latent width {}",
                bank.dim(),
                stack.latent
            )));
        }
        Ok(Self {
            opt_online: Adam::new(&stack.online, cfg.lr),
            opt_predictor: Adam::new(&stack.predictor, cfg.lr),
            opt_bank: Adam::new(&bank.params, cfg.lr),
            stack,
            bank,
            cfg: cfg.clone(),
            rng: seeds::stream(seed, "ssl/updates"),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update on the buffer chosen by the cyclic schedule.
    pub fn update(&mut self, buffers: &[&DomainBuffer]) -> Result<StepLog> {
        let o = choose_buffer(self.step, buffers.len());
        let buffer = buffers[o];
        let k = self.stack.tower.in_channels / buffer.channels().max(1);
        let idx = buffer.sample_pairs(self.cfg.batch, &mut self.rng)?;
        let x = augment_shift(&buffer.batch(&idx, 0, k), self.cfg.shift_pad, &mut self.rng)?;
        let xn = augment_shift(&buffer.batch(&idx, 1, k), self.cfg.shift_pad, &mut self.rng)?;

        let sg = build_objective(&self.stack, &self.bank, &x, &xn, &self.cfg)?;
        let grads = sg.graph.backward(sg.total)?;
        sg.online.accumulate(&grads, &mut self.stack.online)?;
        sg.predictor.accumulate(&grads, &mut self.stack.predictor)?;
        if let Some(gc) = grads.get(sg.protos) {
            self.bank.params.accumulate(PROTOTYPES, gc)?;
        }
        let comparative = sg.graph.scalar(sg.comparative).as_f64();
        let intrinsic = sg.graph.scalar(sg.intrinsic).as_f64();
        let total = sg.graph.scalar(sg.total).as_f64();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("SSL loss at update {}", self.step)));
        }
        drop(sg);

        self.opt_online.step(&mut self.stack.online)?;
        self.opt_predictor.step(&mut self.stack.predictor)?;
        self.opt_bank.step(&mut self.bank.params)?;
        ema_update(&mut self.stack.target, &self.stack.online, self.cfg.ema)?;

        self.step += 1;
        let coverage = if self.cfg.coverage_every > 0 && self.step % self.cfg.coverage_every as u64 == 0 {
            Some(metrics::coverage(&self.bank, self.cfg.coverage_k)?)
        } else {
            None
        };
        Ok(StepLog {
            step: self.step - 1,
            comparative,
            intrinsic,
            total,
            coverage,
            buffer: o,
        })
    }

    pub fn run(&mut self, buffers: &[&DomainBuffer], updates: usize) -> Result<Vec<StepLog>> {
        for b in buffers {
            if b.valid_pairs().is_empty() {
                return Err(Error::InsufficientData(format!(
                    "buffer `{}` has no temporal pairs",
                    b.domain()
                )));
            }
        }
        (0..updates).map(|_| self.update(buffers)).collect()
    }

    pub fn into_parts(self) -> (EncoderStack<T>, PrototypeBank<T>) {
        (self.stack, self.bank)
    }
}

/// Freshly initialized stack and bank for frames with `in_channels`
/// stacked channels of side `input_size`.
pub fn init_model<T: Scalar>(
    cfg: &SslConfig,
    in_channels: usize,
    input_size: usize,
    seed: u64,
) -> Result<(EncoderStack<T>, PrototypeBank<T>)> {
    cfg.validate()?;
    let mut rng = seeds::stream(seed, "ssl/init");
    let stack = EncoderStack::new(cfg.tower(in_channels, input_size), cfg.latent, cfg.predictor_hidden, &mut rng)?;
    let bank = PrototypeBank::random(cfg.prototypes, cfg.latent, &mut rng)?;
    Ok((stack, bank))
}

pub struct Pretrained<T> {
    pub stack: EncoderStack<T>,
    pub bank: PrototypeBank<T>,
    pub log: Vec<StepLog>,
}

/// Cross-domain pre-training for `cfg.pretrain_updates` updates.
pub fn pretrain<T: Scalar>(
    buffers: &[&DomainBuffer],
    cfg: &SslConfig,
    frame_stack: usize,
    seed: u64,
) -> Result<Pretrained<T>> {
    let first = buffers
        .first()
        .ok_or_else(|| Error::InsufficientData("no buffers to pre-train on".into()))?;
    for b in buffers {
        if b.frame_size() != first.frame_size() || b.channels() != first.channels() {
            return Err(Error::shape("all buffers must share frame geometry"));
        }
    }
    let (stack, bank) = init_model(cfg, first.channels() * frame_stack, first.frame_size(), seed)?;
    let mut trainer = Trainer::new(stack, bank, cfg, seed)?;
    let log = trainer.run(buffers, cfg.pretrain_updates)?;
    let (stack, bank) = trainer.into_parts();
    Ok(Pretrained { stack, bank, log })
}

/// Single-domain updates from a pre-trained model with fresh optimizer state.
pub fn finetune<T: Scalar>(
    stack: EncoderStack<T>,
    bank: PrototypeBank<T>,
    buffer: &DomainBuffer,
    cfg: &SslConfig,
    seed: u64,
) -> Result<Pretrained<T>> {
    let mut trainer = Trainer::new(stack, bank, cfg, seed)?;
    let log = trainer.run(&[buffer], cfg.finetune_updates)?;
    let (stack, bank) = trainer.into_parts();
    Ok(Pretrained { stack, bank, log })
}

pub fn save_model<T: Scalar>(stack: &EncoderStack<T>, bank: &PrototypeBank<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    stack.to_checkpoint(&mut ckpt);
    ckpt.push_params("bank/", &bank.params);
    ckpt.save(path)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(EncoderStack<T>, PrototypeBank<T>)> {
    let ckpt = Checkpoint::load(path)?;
    let stack = EncoderStack::from_checkpoint(&ckpt)?;
    let bank = PrototypeBank::from_raw(ckpt.tensor(&format!("bank/{PROTOTYPES}"))?)?;
    Ok((stack, bank))
}
