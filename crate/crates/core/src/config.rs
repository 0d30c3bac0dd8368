//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. The optional `preset`
//! key (`desk` or `paper`) selects the defaults every other key
//! overrides, wherever it appears in the file. Unknown keys, malformed
//! values and violated constraints are all reported together.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::envsuite::DomainSpec;
use crate::error::{Error, Result};
use crate::protolearn::SslConfig;
use crate::rlagent::RlConfig;

pub const PHASES: [&str; 5] = ["collect", "pretrain", "finetune", "train", "metrics"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    /// Subset of [`PHASES`], executed in canonical order.
    pub phases: Vec<String>,
    /// Pre-training domains.
    pub domains: Vec<String>,
    /// Downstream RL domains.
    pub train_domains: Vec<String>,
    pub finetune_domain: String,
    pub collect_steps: usize,
    pub buffer_capacity: usize,
    pub render_size: usize,
    pub channels: usize,
    pub episode_length: usize,
    pub action_repeat: usize,
    pub frame_stack: usize,
    pub pca_components: usize,
    /// Frames per domain fed to PCA.
    pub pca_samples: usize,
    pub ssl: SslConfig,
    pub rl: RlConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        let env = DomainSpec::desk("pendulum").expect("known domain");
        Self {
            preset: "desk".into(),
            seed: 0,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs"),
            phases: PHASES.iter().filter(|&&p| p != "finetune").map(|p| p.to_string()).collect(),
            domains: vec!["pendulum".into(), "point_mass".into()],
            train_domains: vec!["pendulum".into(), "point_mass".into()],
            finetune_domain: "cartpole".into(),
            collect_steps: 10_000,
            buffer_capacity: 10_000,
            render_size: env.render_size,
            channels: env.channels,
            episode_length: env.episode_length,
            action_repeat: env.action_repeat,
            frame_stack: env.frame_stack,
            pca_components: 4,
            pca_samples: 500,
            ssl: SslConfig::desk(),
            rl: RlConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        let env = DomainSpec::paper("pendulum").expect("known domain");
        Self {
            preset: "paper".into(),
            collect_steps: 100_000,
            buffer_capacity: 100_000,
            render_size: env.render_size,
            channels: env.channels,
            episode_length: env.episode_length,
            pca_samples: 2_000,
            ssl: SslConfig::paper(),
            rl: RlConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::ConfigInvalid(vec![format!(
                "preset: expected `desk` or `paper`, got `{other}`"
            )])),
        }
    }

    pub fn domain_spec(&self, name: &str) -> Result<DomainSpec> {
        Ok(DomainSpec {
            render_size: self.render_size,
            channels: self.channels,
            episode_length: self.episode_length,
            action_repeat: self.action_repeat,
            frame_stack: self.frame_stack,
            ..DomainSpec::desk(name)?
        })
    }

    pub fn has_phase(&self, phase: &str) -> bool {
        self.phases.iter().any(|p| p == phase)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for p in &self.phases {
            if !PHASES.contains(&p.as_str()) {
                bad.push(format!("phases: unknown phase `{p}`"));
            }
        }
        if self.domains.is_empty() && self.has_phase("pretrain") {
            bad.push("domains: pre-training needs at least one domain".into());
        }
        let named = self
            .domains
            .iter()
            .map(|d| ("domains", d))
            .chain(self.train_domains.iter().map(|d| ("train_domains", d)))
            .chain(std::iter::once(("finetune_domain", &self.finetune_domain)));
        for (key, d) in named {
            match self.domain_spec(d).and_then(|s| s.validate().map(|_| s)) {
                Ok(_) => {}
                Err(Error::ConfigInvalid(list)) => bad.extend(list.into_iter().map(|m| format!("{key}: {m}"))),
                Err(e) => bad.push(format!("{key}: {e}")),
            }
        }
        if self.collect_steps == 0 || self.collect_steps > self.buffer_capacity {
            bad.push(format!(
                "collect_steps: must lie in 1..={} (buffer_capacity), got {}",
                self.buffer_capacity, self.collect_steps
            ));
        }
        if self.pca_components == 0 || self.pca_samples <= self.pca_components {
            bad.push("pca: need 0 < components < samples".into());
        }
        if self.ssl.shift_pad >= self.render_size || self.rl.shift_pad >= self.render_size {
            bad.push(format!("shift pad must be smaller than render size {}", self.render_size));
        }
        bad.extend(self.ssl.problems().into_iter().map(|m| format!("ssl: {m}")));
        bad.extend(self.rl.problems().into_iter().map(|m| format!("rl: {m}")));
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

    /// Canonical text: every key, in table order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in FIELDS {
            let _ = writeln!(s, "{} = {}", f.key, (f.get)(self));
        }
        s
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Parse and validate; every problem is reported.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((n + 1, k.trim().to_string(), v.trim().to_string())),
                None => errors.push(format!("line {}: expected `key = value`, got `{line}`", n + 1)),
            }
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(_, k, _)| k == "preset")
            .map(|(_, _, v)| v.as_str())
            .unwrap_or("desk");
        let mut cfg = match Self::preset(preset) {
            Ok(c) => c,
            Err(Error::ConfigInvalid(list)) => {
                errors.extend(list);
                Self::desk()
            }
            Err(e) => return Err(e),
        };
        for (n, key, value) in &pairs {
            match FIELDS.iter().find(|f| f.key == key) {
                Some(f) => {
                    if let Err(m) = (f.set)(&mut cfg, value) {
                        errors.push(format!("line {n}: {key}: {m}"));
                    }
                }
                None => errors.push(format!("line {n}: unknown key `{key}`")),
            }
        }
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::ConfigInvalid(errors))
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(num).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// `{:?}` keeps floats round-trippable.
fn real(x: f64) -> String {
    format!("{x:?}")
}

macro_rules! field {
    ($key:literal, $($path:ident).+, real) => {
        Field { key: $key, get: |c| real(c.$($path).+), set: |c, v| { c.$($path).+ = num(v)?; Ok(()) } }
    };
    ($key:literal, $($path:ident).+, int) => {
        Field { key: $key, get: |c| c.$($path).+.to_string(), set: |c, v| { c.$($path).+ = num(v)?; Ok(()) } }
    };
    ($key:literal, $($path:ident).+, flag) => {
        Field { key: $key, get: |c| c.$($path).+.to_string(), set: |c, v| { c.$($path).+ = flag(v)?; Ok(()) } }
    };
    ($key:literal, $($path:ident).+, list) => {
        Field { key: $key, get: |c| join(&c.$($path).+), set: |c, v| { c.$($path).+ = list(v)?; Ok(()) } }
    };
}

const FIELDS: &[Field] = &[
    Field {
        key: "preset",
        get: |c| c.preset.clone(),
        set: |c, v| {
            c.preset = v.to_string();
            Ok(())
        },
    },
    field!("seed", seed, int),
    Field {
        key: "precision",
        get: |c| match c.precision {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        },
        set: |c, v| {
            c.precision = match v {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return Err(format!("expected f32 or f64, got `{v}`")),
            };
            Ok(())
        },
    },
    Field {
        key: "out_dir",
        get: |c| c.out_dir.display().to_string(),
        set: |c, v| {
            c.out_dir = PathBuf::from(v);
            Ok(())
        },
    },
    field!("phases", phases, list),
    field!("domains", domains, list),
    field!("train_domains", train_domains, list),
    Field {
        key: "finetune_domain",
        get: |c| c.finetune_domain.clone(),
        set: |c, v| {
            c.finetune_domain = v.to_string();
            Ok(())
        },
    },
    field!("collect_steps", collect_steps, int),
    field!("buffer_capacity", buffer_capacity, int),
    field!("env.render_size", render_size, int),
    field!("env.channels", channels, int),
    field!("env.episode_length", episode_length, int),
    field!("env.action_repeat", action_repeat, int),
    field!("env.frame_stack", frame_stack, int),
    field!("pca.components", pca_components, int),
    field!("pca.samples", pca_samples, int),
    field!("ssl.temperature", ssl.temperature, real),
    field!("ssl.intrinsic_weight", ssl.intrinsic_weight, real),
    field!("ssl.intrinsic_coef", ssl.intrinsic_coef, real),
    field!("ssl.ema", ssl.ema, real),
    field!("ssl.batch", ssl.batch, int),
    field!("ssl.prototypes", ssl.prototypes, int),
    field!("ssl.latent", ssl.latent, int),
    field!("ssl.predictor_hidden", ssl.predictor_hidden, int),
    field!("ssl.conv_channels", ssl.conv_channels, list),
    field!("ssl.conv_strides", ssl.conv_strides, list),
    field!("ssl.pretrain_updates", ssl.pretrain_updates, int),
    field!("ssl.finetune_updates", ssl.finetune_updates, int),
    field!("ssl.lr", ssl.lr, real),
    field!("ssl.shift_pad", ssl.shift_pad, int),
    field!("ssl.sinkhorn_epsilon", ssl.sinkhorn_epsilon, real),
    field!("ssl.sinkhorn_iterations", ssl.sinkhorn_iterations, int),
    field!("ssl.renormalize_targets", ssl.renormalize_targets, flag),
    field!("ssl.coverage_every", ssl.coverage_every, int),
    field!("ssl.coverage_k", ssl.coverage_k, int),
    field!("rl.discount", rl.discount, real),
    field!("rl.replay_capacity", rl.replay_capacity, int),
    field!("rl.batch", rl.batch, int),
    field!("rl.init_temperature", rl.init_temperature, real),
    field!("rl.actor_lr", rl.actor_lr, real),
    field!("rl.critic_lr", rl.critic_lr, real),
    field!("rl.temperature_lr", rl.temperature_lr, real),
    field!("rl.actor_update_every", rl.actor_update_every, int),
    field!("rl.critic_target_every", rl.critic_target_every, int),
    field!("rl.critic_target_ema", rl.critic_target_ema, real),
    field!("rl.env_steps", rl.env_steps, int),
    field!("rl.seed_steps", rl.seed_steps, int),
    field!("rl.beta", rl.beta, real),
    field!("rl.knn_k", rl.knn_k, int),
    field!("rl.q_capacity", rl.q_capacity, int),
    field!("rl.feature_dim", rl.feature_dim, int),
    field!("rl.hidden", rl.hidden, int),
    field!("rl.log_std_min", rl.log_std_min, real),
    field!("rl.log_std_max", rl.log_std_max, real),
    field!("rl.shift_pad", rl.shift_pad, int),
    field!("rl.eval_every", rl.eval_every, int),
    field!("rl.eval_episodes", rl.eval_episodes, int),
];

/// Every recognised key, in canonical order.
pub fn keys() -> impl Iterator<Item = &'static str> {
    FIELDS.iter().map(|f| f.key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn errors(text: &str) -> Vec<String> {
        match RunConfig::parse(text) {
            Err(Error::ConfigInvalid(list)) => list,
            other => panic!("expected ConfigInvalid, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_is_the_desk_preset() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::desk());
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::desk());
    }

    #[test]
    fn weight_at_one_is_rejected() {
        let e = errors("ssl.intrinsic_weight = 1.0");
        assert!(e.iter().any(|m| m.contains("intrinsic weight must exceed 1")), "{e:?}");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_all_reported() {
        let e = errors("foo = 1\nrl.discount = 1.5\nssl.temperature = -1\nseed = x\nnot a pair");
        assert!(e.iter().any(|m| m.contains("unknown key `foo`")));
        assert!(e.iter().any(|m| m.contains("discount")));
        assert!(e.iter().any(|m| m.contains("temperature must be positive")));
        assert!(e.iter().any(|m| m.contains("seed")));
        assert!(e.iter().any(|m| m.contains("line 5")));
        assert!(e.len() >= 5);
    }

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::parse("preset = paper").unwrap();
        assert_eq!(c.ssl.prototypes, 512);
        assert_eq!(c.ssl.latent, 128);
        assert_eq!(c.ssl.temperature, 0.1);
        assert_eq!(c.ssl.intrinsic_weight, 1.5);
        assert_eq!(c.ssl.intrinsic_coef, 5e-3);
        assert_eq!(c.ssl.shift_pad, 4);
        assert_eq!(c.ssl.lr, 1e-4);
        assert_eq!(c.ssl.ema, 0.05);
        assert_eq!(c.buffer_capacity, 100_000);
        assert_eq!(c.rl.beta, 0.2);
        assert_eq!(c.rl.knn_k, 3);
        assert_eq!(c.rl.discount, 0.99);
        assert_eq!(c.rl.q_capacity, 2048);
        assert_eq!(c.rl.replay_capacity, 40_000);
        assert_eq!(c.rl.init_temperature, 0.1);
        assert_eq!(c.rl.critic_target_ema, 0.01);
        assert_eq!((c.rl.actor_update_every, c.rl.critic_target_every), (2, 2));
        assert_eq!((c.rl.log_std_min, c.rl.log_std_max), (-10.0, 2.0));
        assert_eq!((c.rl.feature_dim, c.rl.hidden), (50, 1024));
        assert_eq!(c.rl.actor_lr, 1e-4);
        assert_eq!(c.ssl.tower(9, 84).output_dim(), 39_200);
    }

    #[test]
    fn preset_applies_before_overrides_wherever_it_appears() {
        let c = RunConfig::parse("ssl.prototypes = 64\npreset = paper").unwrap();
        assert_eq!(c.ssl.prototypes, 64);
        assert_eq!(c.ssl.latent, 128);
    }

    #[test]
    fn canonical_text_round_trips() {
        for c in [RunConfig::desk(), RunConfig::paper()] {
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
        assert_eq!(keys().count(), FIELDS.len());
    }

    proptest! {
        #[test]
        fn round_trip_with_overrides(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            w in 1.0001f64..10.0,
            gamma in 0.01f64..0.999,
            beta in 0.0f64..2.0,
            f64_precision in any::<bool>(),
        ) {
            let text = format!(
                "seed = {seed}\nssl.lr = {lr:?}\nssl.intrinsic_weight = {w:?}\nrl.discount = {gamma:?}\nrl.beta = {beta:?}\nprecision = {}\n",
                if f64_precision { "f64" } else { "f32" }
            );
            let c = RunConfig::parse(&text).unwrap();
            let again = RunConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(&again, &c);
            prop_assert_eq!(again.hash(), c.hash());
        }
    }
}
