//! Reward-free uniform-random data collection, one buffer per domain.
//!
//! Collection sees only a [`DomainSpec`]; it has no access to any encoder.
//! Each agent step appends the newly rendered frame. Reset frames are not
//! stored, so the first frame of an episode is the one after its first
//! step. A pair `(t, t + 1)` is valid when `t + 1` does not start an episode.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::binio::{Reader, Writer};
use crate::envsuite::{uniform_action, DomainSpec, Environment};
use crate::error::{Error, Result};
use crate::exec;
use crate::ndmath::{Scalar, Tensor};
use crate::seeds;

pub const MAGIC: &str = "CRPTBUF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainBuffer {
    domain: String,
    capacity: usize,
    size: usize,
    channels: usize,
    /// Frames quantized to `round(pixel * 255)`, each `[C, H, W]`.
    pixels: Vec<u8>,
    /// Index of the first frame of every episode, ascending.
    episode_starts: Vec<usize>,
    seed: u64,
    /// First indices of valid temporal pairs.
    valid: Vec<usize>,
}

impl DomainBuffer {
    pub fn new(domain: &str, capacity: usize, size: usize, channels: usize, seed: u64) -> Self {
        Self {
            domain: domain.to_string(),
            capacity,
            size,
            channels,
            pixels: Vec::new(),
            episode_starts: Vec::new(),
            seed,
            valid: Vec::new(),
        }
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frame_size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn frame_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.frame_len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn episode_starts(&self) -> &[usize] {
        &self.episode_starts
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn push_frame(&mut self, frame: &[f32], episode_start: bool) -> Result<()> {
        if frame.len() != self.frame_len() {
            return Err(Error::shape(format!(
                "frame has {} pixels, buffer stores {}",
                frame.len(),
                self.frame_len()
            )));
        }
        if self.len() >= self.capacity {
            return Err(Error::CapacityExceeded {
                requested: self.len() + 1,
                capacity: self.capacity,
            });
        }
        let t = self.len();
        if episode_start || t == 0 {
            self.episode_starts.push(t);
        } else {
            self.valid.push(t - 1);
        }
        self.pixels
            .extend(frame.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        Ok(())
    }

    /// First indices of every valid `(t, t + 1)` pair.
    pub fn valid_pairs(&self) -> &[usize] {
        &self.valid
    }

    fn episode_start_of(&self, t: usize) -> usize {
        let k = self.episode_starts.partition_point(|&s| s <= t);
        self.episode_starts[k - 1]
    }

    /// Draw `count` pair indices uniformly with replacement.
    pub fn sample_pairs(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.valid.is_empty() {
            return Err(Error::InsufficientData(format!(
                "buffer `{}` has {} frames and no temporal pair",
                self.domain,
                self.len()
            )));
        }
        Ok((0..count)
            .map(|_| self.valid[rng.gen_range(0..self.valid.len())])
            .collect())
    }

    /// Stacked observation ending at frame `t`: the previous `k` frames of
    /// the same episode, oldest first, repeating the episode's first frame
    /// where history is missing. Returns `[k*C, H, W]` pixels in `[0, 1]`.
    pub fn stacked(&self, t: usize, k: usize, out: &mut Vec<f32>) {
        let start = self.episode_start_of(t);
        for back in (0..k).rev() {
            let src = t.saturating_sub(back).max(start);
            out.extend(self.frame(src).iter().map(|&b| b as f32 / 255.0));
        }
    }

    /// Batch of stacked observations ending at `indices[i] + offset`:
    /// `[B, k*C, H, W]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize], offset: usize, k: usize) -> Tensor<T> {
        let mut buf = Vec::with_capacity(indices.len() * k * self.frame_len());
        for &t in indices {
            self.stacked(t + offset, k, &mut buf);
        }
        let data = buf.into_iter().map(|p| T::lit(p as f64)).collect();
        Tensor::new(&[indices.len(), k * self.channels, self.size, self.size], data)
            .expect("batch extents match the buffer")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC.as_bytes());
        w.u32(VERSION);
        w.str(&self.domain);
        w.u32(self.size as u32);
        w.u32(self.size as u32);
        w.u32(self.channels as u32);
        w.u64(self.len() as u64);
        w.u64(self.episode_starts.len() as u64);
        for &s in &self.episode_starts {
            w.u64(s as u64);
        }
        w.bytes(&self.pixels);
        w.u64(self.capacity as u64);
        w.u64(self.seed);
        w.buf
    }

    /// Decode a buffer file. A file that ends early or carries trailing
    /// bytes is reported as a bad magic: it is not a complete buffer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes).map_err(|e| match e {
            Error::Truncated(_) | Error::ShapeMismatch(_) => Error::BadMagic { expected: MAGIC },
            other => other,
        })
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let domain = r.str("domain name")?;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let channels = r.u32("channels")? as usize;
        if h != w {
            return Err(Error::shape(format!("frames must be square, got {h}x{w}")));
        }
        let count = r.u64("frame count")? as usize;
        let n_starts = r.u64("boundary count")? as usize;
        let mut episode_starts = Vec::with_capacity(n_starts.min(1 << 20));
        for _ in 0..n_starts {
            episode_starts.push(r.u64("boundary")? as usize);
        }
        let total = count
            .checked_mul(h * w * channels)
            .ok_or_else(|| Error::Truncated("frame block overflows".into()))?;
        let pixels = r.take(total, "frames")?.to_vec();
        let capacity = r.u64("capacity")? as usize;
        let seed = r.u64("seed")?;
        r.finish()?;
        let ordered = episode_starts.windows(2).all(|p| p[0] < p[1]);
        let anchored = episode_starts.first() == if count == 0 { None } else { Some(&0) };
        if !ordered || !anchored || episode_starts.last().is_some_and(|&s| s >= count) {
            return Err(Error::shape("episode boundaries are inconsistent"));
        }
        let valid = (0..count.saturating_sub(1))
            .filter(|t| episode_starts.binary_search(&(t + 1)).is_err())
            .collect();
        Ok(Self {
            domain,
            capacity,
            size: h,
            channels,
            pixels,
            episode_starts,
            seed,
            valid,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Ground-truth physical state recorded alongside every stored frame.
/// Used only by diagnostics.
pub type StateLog = Vec<Vec<f64>>;

fn run_collection(
    spec: &DomainSpec,
    steps: usize,
    capacity: usize,
    seed: u64,
    mut log: Option<&mut StateLog>,
) -> Result<DomainBuffer> {
    if steps > capacity {
        return Err(Error::CapacityExceeded {
            requested: steps,
            capacity,
        });
    }
    let mut env = Environment::new(spec.clone())?;
    let mut buffer = DomainBuffer::new(&spec.name, capacity, spec.render_size, spec.channels, seed);
    let mut actions = seeds::stream(seed, "actions");
    let mut episode = 0u64;
    let mut fresh = true;
    env.reset(seeds::derive(seed, &format!("episode/{episode}")));
    while buffer.len() < steps {
        if env.episode_done() {
            episode += 1;
            env.reset(seeds::derive(seed, &format!("episode/{episode}")));
            fresh = true;
        }
        let action = uniform_action(spec.action_dim, &mut actions);
        let tr = env.step(&action)?;
        buffer.push_frame(tr.next_state.latest(), fresh)?;
        if let Some(log) = log.as_deref_mut() {
            log.push(env.ground_truth_state()?);
        }
        fresh = false;
    }
    Ok(buffer)
}

/// Fill a buffer of `capacity` frames with `steps` uniform-random steps.
pub fn collect_random(spec: &DomainSpec, steps: usize, capacity: usize, seed: u64) -> Result<DomainBuffer> {
    run_collection(spec, steps, capacity, seed, None)
}

/// Like [`collect_random`], also returning the ground-truth state of each frame.
pub fn collect_labeled(
    spec: &DomainSpec,
    steps: usize,
    capacity: usize,
    seed: u64,
) -> Result<(DomainBuffer, StateLog)> {
    let mut log = StateLog::with_capacity(steps);
    let buffer = run_collection(spec, steps, capacity, seed, Some(&mut log))?;
    Ok((buffer, log))
}

/// Collect every domain with its own derived seed, in parallel when enabled.
pub fn collect_all(specs: &[DomainSpec], steps: usize, capacity: usize, seed: u64) -> Result<Vec<DomainBuffer>> {
    exec::map_range(specs.len(), |i| {
        collect_random(&specs[i], steps, capacity, seeds::derive(seed, &specs[i].name))
    })
    .into_iter()
    .collect()
}
