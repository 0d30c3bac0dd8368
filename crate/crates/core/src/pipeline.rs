//! Reproducible runs: collect, pretrain, finetune, train and metrics phases
//! driven by one [`RunConfig`], recorded in a manifest.
//!
//! All outputs live under `out_dir/<config hash prefix>/`. The manifest
//! embeds the full canonical configuration, the derived phase seeds and a
//! content hash of every artifact, so a run can be repeated from the
//! manifest alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::collect::{collect_random, DomainBuffer};
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::ndmath::{Scalar, Tensor};
use crate::protolearn::{self, EncoderStack, PrototypeBank};
use crate::rlagent;
use crate::seeds;

pub const MANIFEST: &str = "manifest.txt";

/// Hex SHA-256 over `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the run directory.
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn count(&self, kind: &str) -> usize {
        self.artifacts.iter().filter(|a| a.kind == kind).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("config_hash = {}\n\n[seeds]\n", self.config_hash);
        for (name, v) in &self.seeds {
            let _ = writeln!(s, "{name} = {v}");
        }
        s.push_str("\n[artifacts]\n");
        for a in &self.artifacts {
            let _ = writeln!(s, "{} {} {}", a.kind, a.path, a.hash);
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config.to_text());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::ConfigInvalid(vec![format!("manifest: {m}")]);
        let mut section = "";
        let mut config_hash = None;
        let mut seeds = Vec::new();
        let mut artifacts = Vec::new();
        let mut config_text = String::new();
        for line in text.lines() {
            let t = line.trim();
            if t.starts_with('[') && t.ends_with(']') {
                section = match t {
                    "[seeds]" => "seeds",
                    "[artifacts]" => "artifacts",
                    "[config]" => "config",
                    other => return Err(bad(format!("unknown section {other}"))),
                };
                continue;
            }
            if section == "config" {
                config_text.push_str(line);
                config_text.push('\n');
                continue;
            }
            if t.is_empty() {
                continue;
            }
            match section {
                "" => match t.split_once('=') {
                    Some((k, v)) if k.trim() == "config_hash" => config_hash = Some(v.trim().to_string()),
                    _ => return Err(bad(format!("unexpected line `{t}`"))),
                },
                "seeds" => {
                    let (k, v) = t.split_once('=').ok_or_else(|| bad(format!("bad seed line `{t}`")))?;
                    let v = v.trim().parse().map_err(|_| bad(format!("bad seed value `{t}`")))?;
                    seeds.push((k.trim().to_string(), v));
                }
                _ => {
                    let parts: Vec<&str> = t.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(bad(format!("bad artifact line `{t}`")));
                    }
                    artifacts.push(Artifact {
                        kind: parts[0].into(),
                        path: parts[1].into(),
                        hash: parts[2].into(),
                    });
                }
            }
        }
        let config = RunConfig::parse(&config_text)?;
        let config_hash = config_hash.ok_or_else(|| bad("missing config_hash".into()))?;
        if config_hash != config.hash() {
            return Err(bad("config_hash does not match the embedded configuration".into()));
        }
        Ok(Self {
            config,
            config_hash,
            seeds,
            artifacts,
        })
    }
}

/// Directory a configuration writes into.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(&cfg.hash()[..16])
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl Run<'_> {
    fn seed(&mut self, name: &str) -> u64 {
        let v = seeds::derive(self.cfg.seed, name);
        self.manifest.seeds.push((name.to_string(), v));
        v
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&mut self, kind: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.record(kind, rel, bytes);
        Ok(())
    }

    fn record(&mut self, kind: &str, rel: &str, bytes: &[u8]) {
        self.manifest.artifacts.push(Artifact {
            kind: kind.into(),
            path: rel.into(),
            hash: content_hash(bytes),
        });
    }

    /// Read an input produced earlier (possibly by a previous run).
    fn read_input(&mut self, kind: &str, rel: &str) -> Result<Vec<u8>> {
        let bytes = fs::read(self.path(rel))?;
        if !self.manifest.artifacts.iter().any(|a| a.path == rel) {
            self.record(kind, rel, &bytes);
        }
        Ok(bytes)
    }

    fn buffers(&mut self, domains: &[String]) -> Result<Vec<DomainBuffer>> {
        domains
            .iter()
            .map(|d| DomainBuffer::from_bytes(&self.read_input("buffer", &buffer_path(d))?))
            .collect()
    }

    fn model<T: Scalar>(&mut self, rel: &str) -> Result<(EncoderStack<T>, PrototypeBank<T>)> {
        self.read_input("encoder", rel)?;
        protolearn::load_model(self.path(rel))
    }
}

fn buffer_path(domain: &str) -> String {
    format!("buffers/{domain}.buf")
}

const ENCODER: &str = "checkpoints/encoder.ckpt";
const FINETUNED: &str = "checkpoints/finetuned.ckpt";

/// Execute the configured phases and write the manifest.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

/// Re-run the configuration embedded in a manifest file.
pub fn reproduce(manifest: impl AsRef<Path>) -> Result<Manifest> {
    let m = Manifest::parse(&fs::read_to_string(manifest)?)?;
    run_pipeline(&m.config)
}

fn run_typed<T: Scalar>(cfg: &RunConfig) -> Result<Manifest> {
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir)?;
    let mut run = Run {
        cfg,
        dir,
        manifest: Manifest {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            seeds: Vec::new(),
            artifacts: Vec::new(),
        },
    };
    if cfg.has_phase("collect") {
        collect_phase(&mut run).map_err(|e| e.in_phase("collect"))?;
    }
    if cfg.has_phase("pretrain") {
        pretrain_phase::<T>(&mut run).map_err(|e| e.in_phase("pretrain"))?;
    }
    if cfg.has_phase("finetune") {
        finetune_phase::<T>(&mut run).map_err(|e| e.in_phase("finetune"))?;
    }
    if cfg.has_phase("train") {
        train_phase::<T>(&mut run).map_err(|e| e.in_phase("train"))?;
    }
    if cfg.has_phase("metrics") {
        metrics_phase::<T>(&mut run).map_err(|e| e.in_phase("metrics"))?;
    }
    let text = run.manifest.to_text();
    fs::write(run.path(MANIFEST), text)?;
    Ok(run.manifest)
}

fn collect_phase(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let mut domains = cfg.domains.clone();
    if cfg.has_phase("finetune") && !domains.contains(&cfg.finetune_domain) {
        domains.push(cfg.finetune_domain.clone());
    }
    for d in &domains {
        let seed = run.seed(&format!("collect/{d}"));
        let spec = cfg.domain_spec(d)?;
        let buf = collect_random(&spec, cfg.collect_steps, cfg.buffer_capacity, seed)?;
        run.write("buffer", &buffer_path(d), &buf.to_bytes())?;
    }
    Ok(())
}

fn checkpoint_bytes<T: Scalar>(stack: &EncoderStack<T>, bank: &PrototypeBank<T>, path: &Path) -> Result<Vec<u8>> {
    protolearn::save_model(stack, bank, path)?;
    Ok(fs::read(path)?)
}

fn pretrain_phase<T: Scalar>(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let bufs = run.buffers(&cfg.domains)?;
    let refs: Vec<&DomainBuffer> = bufs.iter().collect();
    let seed = run.seed("ssl");
    let out = protolearn::pretrain::<T>(&refs, &cfg.ssl, cfg.frame_stack, seed)?;
    fs::create_dir_all(run.path("checkpoints"))?;
    let bytes = checkpoint_bytes(&out.stack, &out.bank, &run.path(ENCODER))?;
    run.record("encoder", ENCODER, &bytes);
    run.write("ssl_log", "logs/pretrain.csv", protolearn::log_csv(&out.log).as_bytes())
}

fn finetune_phase<T: Scalar>(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (stack, bank) = run.model::<T>(ENCODER)?;
    let buf = run.buffers(std::slice::from_ref(&cfg.finetune_domain))?.remove(0);
    let seed = run.seed("ssl/finetune");
    let out = protolearn::finetune(stack, bank, &buf, &cfg.ssl, seed)?;
    let bytes = checkpoint_bytes(&out.stack, &out.bank, &run.path(FINETUNED))?;
    run.record("finetuned_encoder", FINETUNED, &bytes);
    run.write("ssl_log", "logs/finetune.csv", protolearn::log_csv(&out.log).as_bytes())
}

fn train_phase<T: Scalar>(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (stack, bank) = run.model::<T>(ENCODER)?;
    for d in &cfg.train_domains {
        let seed = run.seed(&format!("rl/{d}"));
        let spec = cfg.domain_spec(d)?;
        let out = rlagent::train_downstream(&spec, &stack, &bank, &cfg.rl, seed)?;
        let rel = format!("policies/{d}.ckpt");
        fs::create_dir_all(run.path("policies"))?;
        out.agent.save(run.path(&rel))?;
        let bytes = fs::read(run.path(&rel))?;
        run.record("policy", &rel, &bytes);
        run.write("policy_log", &format!("logs/train_{d}.csv"), rlagent::eval_csv(&out.log).as_bytes())?;
    }
    Ok(())
}

/// Up to `count` evenly spaced frames per buffer.
pub fn frame_sample<T: Scalar>(buf: &DomainBuffer, count: usize, frame_stack: usize) -> Tensor<T> {
    let n = buf.len();
    let take = count.min(n);
    let idx: Vec<usize> = (0..take).map(|i| i * n / take.max(1)).collect();
    buf.batch(&idx, 0, frame_stack)
}

fn metrics_phase<T: Scalar>(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (stack, bank) = run.model::<T>(ENCODER)?;
    let cov = metrics::coverage(&bank, cfg.ssl.coverage_k)?;
    run.write("coverage", "metrics/coverage.csv", cov.csv().as_bytes())?;

    let bufs = run.buffers(&cfg.domains)?;
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for b in &bufs {
        let x = frame_sample::<T>(b, cfg.pca_samples, cfg.frame_stack);
        let y = stack.features(&x)?.cast::<f64>();
        tags.extend(std::iter::repeat_n(b.domain().to_string(), y.rows()));
        rows.extend(y.to_rows_f64());
    }
    let p = metrics::pca(&Tensor::from_rows(&rows)?, cfg.pca_components)?;
    run.write("pca", "metrics/pca.csv", metrics::pca_csv(&p, &tags).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::desk();
        c.out_dir = dir.to_path_buf();
        c.precision = Precision::F64;
        c.collect_steps = 300;
        c.buffer_capacity = 300;
        c.pca_samples = 50;
        c.ssl.batch = 8;
        c.ssl.prototypes = 8;
        c.ssl.latent = 8;
        c.ssl.predictor_hidden = 8;
        c.ssl.conv_channels = vec![4];
        c.ssl.conv_strides = vec![2];
        c.ssl.pretrain_updates = 4;
        c.ssl.finetune_updates = 2;
        c.ssl.coverage_every = 2;
        c.rl.env_steps = 60;
        c.rl.seed_steps = 20;
        c.rl.batch = 8;
        c.rl.hidden = 8;
        c.rl.eval_episodes = 1;
        c.rl.eval_every = 0;
        c
    }

    #[test]
    fn empty_phase_list_has_no_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = tiny(tmp.path());
        c.phases.clear();
        let m = run_pipeline(&c).unwrap();
        assert!(m.artifacts.is_empty());
        assert!(run_dir(&c).join(MANIFEST).exists());
    }

    #[test]
    fn full_pipeline_counts_and_manifest_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let c = tiny(tmp.path());
        let m = run_pipeline(&c).unwrap();
        assert_eq!(m.count("buffer"), 2);
        assert_eq!(m.count("encoder"), 1);
        assert_eq!(m.count("policy_log"), 2);
        assert_eq!(m.count("coverage"), 1);
        let text = fs::read_to_string(run_dir(&c).join(MANIFEST)).unwrap();
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        for a in &m.artifacts {
            let bytes = fs::read(run_dir(&c).join(&a.path)).unwrap();
            assert_eq!(content_hash(&bytes), a.hash, "{}", a.path);
        }
    }

    #[test]
    fn phase_errors_carry_the_phase() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = tiny(tmp.path());
        c.phases = vec!["pretrain".into()];
        match run_pipeline(&c) {
            Err(Error::Phase { phase, .. }) => assert_eq!(phase, "pretrain"),
            other => panic!("expected phase error, got {other:?}"),
        }
    }

    #[test]
    fn git_style_hash() {
        // `git hash-object` framing, hashed with SHA-256.
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
