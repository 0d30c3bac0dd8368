//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `CRPT_ACCEPT=1,3,5 cargo test --test acceptance` runs a subset.
//! The process exits non-zero if any selected criterion fails.

use std::cell::OnceCell;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crpt_core::collect::{collect_labeled, collect_random, DomainBuffer, StateLog};
use crpt_core::config::RunConfig;
use crpt_core::envsuite::DomainSpec;
use crpt_core::intrinsic::{knn_reward, ProjectionSet};
use crpt_core::metrics::{self, linear_probe, ProbeOptions};
use crpt_core::ndmath::layers::{bind, uniform_tensor};
use crpt_core::ndmath::{grad_check, l2_normalize_rows, Graph, ParamSet, Tensor};
use crpt_core::protolearn::{self, *};
use crpt_core::rlagent::{self, random_policy_returns, RlConfig};
use crpt_core::sinkhorn::{self, assignment_targets, score_matrix, DEFAULT_EPSILON, DEFAULT_ITERATIONS};
use crpt_core::{pipeline, seeds, Result};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SSL_DOMAINS: [&str; 2] = ["pendulum", "point_mass"];
const UNSEEN: &str = "cartpole";
/// Pre-training length behind the probe, policy and finetuning criteria.
const PRETRAIN_UPDATES: usize = 8000;
const PROBE_FRAMES: usize = 2000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let raw = Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut *rng));
    l2_normalize_rows(&raw).unwrap()
}

// ---------------------------------------------------------------- 1

/// Plain nested loops: exp, then alternate row and column scaling.
fn straight_line_targets(c: &[Vec<f64>], iters: usize, eps: f64) -> Vec<Vec<f64>> {
    let m = c.len();
    let mut t = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            t[i][j] = (c[i][j] / eps).exp();
        }
    }
    for _ in 0..iters {
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                s += t[i][j];
            }
            for j in 0..m {
                t[i][j] = t[i][j] / s / m as f64;
            }
        }
        for j in 0..m {
            let mut s = 0.0;
            for i in 0..m {
                s += t[i][j];
            }
            for i in 0..m {
                t[i][j] = t[i][j] / s / m as f64;
            }
        }
    }
    t
}

fn sinkhorn_suite() -> Result<Verdict> {
    let mut rng = seeds::rng(11);
    let (mut col, mut total, mut reference, mut row, mut mild_row) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for n in 0..1000 {
        let m = [2, 4, 8, 16][n % 4];
        let c = score_matrix(&unit_rows(m, 32, &mut rng), &unit_rows(m, 32, &mut rng))?;
        let t = assignment_targets(&c, DEFAULT_ITERATIONS, DEFAULT_EPSILON)?;
        let want = straight_line_targets(&c.to_rows_f64(), DEFAULT_ITERATIONS, DEFAULT_EPSILON);
        let share = 1.0 / m as f64;
        for s in sinkhorn::col_sums(&t) {
            col = col.max((s - share).abs());
        }
        for s in sinkhorn::row_sums(&t) {
            row = row.max((s - share).abs());
        }
        total = total.max((t.sum() - 1.0).abs());
        for i in 0..m {
            for j in 0..m {
                reference = reference.max((t.at(i, j) - want[i][j]).abs());
            }
        }
        let mild = assignment_targets(&c, DEFAULT_ITERATIONS, 1.0)?;
        for s in sinkhorn::row_sums(&mild) {
            mild_row = mild_row.max((s - share).abs());
        }
    }
    let pass = col <= 1e-9 && total <= 1e-9 && reference <= 1e-12 && row <= 1e-3;
    verdict(
        pass,
        format!(
            "worst |col-1/M| {col:.1e}, |mass-1| {total:.1e}, |T-ref| {reference:.1e}, |row-1/M| {row:.1e} \
             (bound 1e-3; at eps=1: {mild_row:.1e})"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn comparative_check(seed: u64) -> Result<f64> {
    let mut rng = seeds::rng(seed);
    let (b, m, d) = (rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(2..6));
    let tau = rng.gen_range(0.1..1.0);
    let mut ps = ParamSet::new();
    ps.insert("u", uniform_tensor::<f64>(&[b, d], 1.0, &mut rng))?;
    ps.insert("c", uniform_tensor::<f64>(&[m, d], 1.0, &mut rng))?;
    let mut targets = Tensor::from_fn(&[b, m], |_| rng.gen_range(0.01..1.0));
    for i in 0..b {
        let s: f64 = targets.row(i).iter().sum();
        targets.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    grad_check(&ps, 1e-6, |ps, want| {
        let mut g = Graph::new();
        let u = g.param(ps.value("u")?.clone());
        let c = g.param(ps.value("c")?.clone());
        let p = assign_probs_on(&mut g, u, c, tau)?;
        let l = comparative_loss_on(&mut g, p, &targets)?;
        if want {
            let grads = g.backward(l)?;
            ps.accumulate("u", grads.get(u).unwrap())?;
            ps.accumulate("c", grads.get(c).unwrap())?;
        }
        Ok(g.scalar(l))
    })
}

/// The analytic side runs the shipped loss (stop-gradient inside); the
/// difference side holds the stop-gradient factor at the base point.
fn intrinsic_check(seed: u64) -> Result<f64> {
    let mut rng = seeds::rng(seed);
    let (m, d) = (rng.gen_range(2..9), rng.gen_range(2..6));
    let mut ps = ParamSet::new();
    ps.insert("c", uniform_tensor::<f64>(&[m, d], 1.0, &mut rng).map(|v| v + 0.05))?;
    let frozen = l2_normalize_rows(ps.value("c")?)?;
    grad_check(&ps, 1e-6, |ps, want| {
        let mut g = Graph::new();
        let c = g.param(ps.value("c")?.clone());
        if want {
            let l = intrinsic_loss_on(&mut g, c, 1.5)?;
            let grads = g.backward(l)?;
            ps.accumulate("c", grads.get(c).unwrap())?;
            return Ok(g.scalar(l));
        }
        let cn = g.l2_normalize_rows(c)?;
        let fixed = g.input(frozen.clone());
        let l = intrinsic_against(&mut g, cn, fixed, 1.5)?;
        Ok(g.scalar(l))
    })
}

fn tiny_ssl(rng: &mut impl Rng) -> SslConfig {
    SslConfig {
        batch: rng.gen_range(2..5),
        prototypes: rng.gen_range(2..6),
        latent: rng.gen_range(2..5),
        predictor_hidden: rng.gen_range(2..5),
        conv_channels: vec![2],
        conv_strides: vec![2],
        intrinsic_coef: rng.gen_range(0.01..1.0),
        temperature: rng.gen_range(0.1..1.0),
        ..SslConfig::desk()
    }
}

fn set_all(stack: &mut EncoderStack<f64>, ps: &ParamSet<f64>) -> Result<()> {
    for p in stack.online.iter_mut() {
        p.value = ps.value(&format!("online/{}", p.name))?.clone();
    }
    for p in stack.predictor.iter_mut() {
        p.value = ps.value(&format!("pred/{}", p.name))?.clone();
    }
    Ok(())
}

/// Full objective through the conv encoder. Analytic gradients come from
/// `build_objective`; differences hold targets and stop-gradient factors.
fn ssl_check(seed: u64) -> Result<f64> {
    let mut rng = seeds::rng(seed);
    let cfg = tiny_ssl(&mut rng);
    let stack = EncoderStack::<f64>::new(cfg.tower(2, 6), cfg.latent, cfg.predictor_hidden, &mut rng)?;
    let bank = PrototypeBank::<f64>::random(cfg.prototypes, cfg.latent, &mut rng)?;
    let x = uniform_tensor::<f64>(&[cfg.batch, 2, 6, 6], 1.0, &mut rng).map(f64::abs);
    let xn = uniform_tensor::<f64>(&[cfg.batch, 2, 6, 6], 1.0, &mut rng).map(f64::abs);
    let mut ps = ParamSet::new();
    for p in stack.online.iter() {
        ps.insert(format!("online/{}", p.name), p.value.clone())?;
    }
    for p in stack.predictor.iter() {
        ps.insert(format!("pred/{}", p.name), p.value.clone())?;
    }
    ps.insert("protos", bank.raw().clone())?;
    let targets = build_objective(&stack, &bank, &x, &xn, &cfg)?.targets;
    let frozen = bank.normalized()?;
    grad_check(&ps, 1e-6, |ps, want| {
        let mut st = stack.clone();
        set_all(&mut st, ps)?;
        let bk = PrototypeBank::from_raw(ps.value("protos")?.clone())?;
        if want {
            let sg = build_objective(&st, &bk, &x, &xn, &cfg)?;
            let grads = sg.graph.backward(sg.total)?;
            for p in st.online.iter() {
                if let Some(gr) = grads.get(sg.online.var(&p.name)?) {
                    ps.accumulate(&format!("online/{}", p.name), gr)?;
                }
            }
            for p in st.predictor.iter() {
                if let Some(gr) = grads.get(sg.predictor.var(&p.name)?) {
                    ps.accumulate(&format!("pred/{}", p.name), gr)?;
                }
            }
            ps.accumulate("protos", grads.get(sg.protos).unwrap())?;
            return Ok(sg.graph.scalar(sg.total));
        }
        let mut g = Graph::new();
        let online = bind(&mut g, &st.online, true);
        let pred = bind(&mut g, &st.predictor, true);
        let c = g.param(bk.raw().clone());
        let xi = g.input(x.clone());
        let y = st.encode_on(&mut g, &online, xi)?;
        let z = st.project_on(&mut g, &online, y)?;
        let u = st.predict_on(&mut g, &pred, z)?;
        let p = assign_probs_on(&mut g, u, c, cfg.temperature)?;
        let lc = comparative_loss_on(&mut g, p, &targets)?;
        let cn = g.l2_normalize_rows(c)?;
        let fixed = g.input(frozen.clone());
        let li = intrinsic_against(&mut g, cn, fixed, cfg.intrinsic_weight)?;
        let li = g.scale(li, cfg.intrinsic_coef);
        let total = g.add(lc, li)?;
        Ok(g.scalar(total))
    })
}

/// Gradient of the diffusion sum when only the second factor of each
/// term is differentiated, written out by hand.
fn hand_intrinsic_grad(c: &Tensor<f64>, w: f64) -> Vec<Vec<f64>> {
    let m = c.rows();
    let d = c.row_len();
    let norms: Vec<f64> = (0..m).map(|i| c.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let unit: Vec<Vec<f64>> = (0..m).map(|i| c.row(i).iter().map(|v| v / norms[i]).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..m)
        .map(|k| {
            let mut gu = vec![0.0; d];
            for j in 0..m {
                if j != k {
                    let s = dot(&unit[j], &unit[k]) + w;
                    for e in 0..d {
                        gu[e] += unit[j][e] / s;
                    }
                }
            }
            let along = dot(&gu, &unit[k]);
            (0..d).map(|e| (gu[e] - along * unit[k][e]) / norms[k]).collect()
        })
        .collect()
}

fn detach_contract() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut exact = true;
    for seed in 0..100 {
        let mut rng = seeds::rng(5000 + seed);
        let m = rng.gen_range(2..9);
        let c0 = uniform_tensor::<f64>(&[m, 4], 1.0, &mut rng).map(|v| v + 0.05);
        let mut g = Graph::new();
        let c = g.param(c0.clone());
        let cn = g.l2_normalize_rows(c)?;
        let fixed = g.detach(cn);
        let l = intrinsic_against(&mut g, cn, fixed, 1.5)?;
        let grads = g.backward(l)?;
        exact &= grads.get(fixed).is_none();
        let got = grads.get(c).unwrap();
        for (k, row) in hand_intrinsic_grad(&c0, 1.5).iter().enumerate() {
            for (e, &h) in row.iter().enumerate() {
                worst = worst.max((got.at(k, e) - h).abs() / h.abs().max(1.0));
            }
        }
    }

    // Target parameters and assignment targets are constants of the objective.
    let mut rng = seeds::rng(77);
    let cfg = SslConfig { batch: 5, prototypes: 6, latent: 4, predictor_hidden: 5, conv_channels: vec![3], conv_strides: vec![2], ..SslConfig::desk() };
    let stack = EncoderStack::<f64>::new(cfg.tower(2, 8), cfg.latent, cfg.predictor_hidden, &mut rng)?;
    let bank = PrototypeBank::<f64>::random(cfg.prototypes, cfg.latent, &mut rng)?;
    let x = uniform_tensor::<f64>(&[5, 2, 8, 8], 1.0, &mut rng).map(f64::abs);
    let xn = uniform_tensor::<f64>(&[5, 2, 8, 8], 1.0, &mut rng).map(f64::abs);
    let sg = build_objective(&stack, &bank, &x, &xn, &cfg)?;
    let grads = sg.graph.backward(sg.total)?;
    for name in stack.target.names() {
        exact &= grads.get(sg.target.var(name)?).is_none();
    }
    // Same graph with the targets entered by hand as a leaf.
    let mut g = Graph::new();
    let online = bind(&mut g, &stack.online, true);
    let pred = bind(&mut g, &stack.predictor, true);
    let target = bind(&mut g, &stack.target, false);
    let c = g.param(bank.raw().clone());
    let xnv = g.input(xn.clone());
    let yt = stack.encode_on(&mut g, &target, xnv)?;
    let zt = stack.project_on(&mut g, &target, yt)?;
    let _zt = g.l2_normalize_rows(zt)?;
    let xi = g.input(x.clone());
    let y = stack.encode_on(&mut g, &online, xi)?;
    let z = stack.project_on(&mut g, &online, y)?;
    let u = stack.predict_on(&mut g, &pred, z)?;
    let p = assign_probs_on(&mut g, u, c, cfg.temperature)?;
    let tq = g.input(sg.targets.clone());
    let logp = g.log(p, LOG_FLOOR);
    let prod = g.mul(tq, logp)?;
    let s = g.sum_all(prod);
    let lc = g.scale(s, -1.0 / 5.0);
    let li = intrinsic_loss_on(&mut g, c, cfg.intrinsic_weight)?;
    let li = g.scale(li, cfg.intrinsic_coef);
    let total = g.add(lc, li)?;
    let hand = g.backward(total)?;
    exact &= hand.get(tq).is_none();
    exact &= hand.get(c) == grads.get(sg.protos);
    for name in stack.online.names() {
        exact &= hand.get(online.var(name)?) == grads.get(sg.online.var(name)?);
    }
    Ok((exact && worst < 1e-12, format!("hand-derived diffusion gradient within {worst:.1e}")))
}

fn gradient_suite() -> Result<Verdict> {
    let (mut comp, mut intr, mut ssl) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        comp = comp.max(comparative_check(seed)?);
        intr = intr.max(intrinsic_check(1000 + seed)?);
        ssl = ssl.max(ssl_check(2000 + seed)?);
    }
    let (detach_ok, detach) = detach_contract()?;
    let pass = comp < 1e-4 && intr < 1e-4 && ssl < 1e-4 && detach_ok;
    verdict(
        pass,
        format!(
            "100 configs each, worst relative error comp {comp:.1e}, intr {intr:.1e}, ssl {ssl:.1e}; \
             detach contract {} ({detach})",
            if detach_ok { "exact" } else { "violated" }
        ),
    )
}

// ---------------------------------------------------------------- 3

fn hand_values() -> Result<Verdict> {
    let loss = |rows: &[Vec<f64>]| intrinsic_loss(&PrototypeBank::from_raw(Tensor::from_rows(rows)?)?, 1.5);
    let anti = loss(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
    let same = loss(&[vec![1.0, 0.0], vec![1.0, 0.0]])?;
    let orth = loss(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    verdict(
        anti == -4.0 && same == 0.8 && orth == 0.0,
        format!("antipodal {anti}, coincident {same}, orthogonal {orth}"),
    )
}

// ---------------------------------------------------------------- shared data

fn desk_spec(domain: &str) -> DomainSpec {
    DomainSpec::desk(domain).unwrap()
}

fn ssl_buffers(seed: u64) -> Result<Vec<DomainBuffer>> {
    let run = RunConfig::desk();
    let specs: Vec<DomainSpec> = SSL_DOMAINS.iter().map(|d| desk_spec(d)).collect();
    crpt_core::collect::collect_all(&specs, run.collect_steps, run.buffer_capacity, seeds::derive(seed, "data"))
}

fn pretrained(seed: u64, updates: usize, intrinsic_coef: f64) -> Result<(EncoderStack<f32>, PrototypeBank<f32>)> {
    let bufs = ssl_buffers(seed)?;
    let refs: Vec<&DomainBuffer> = bufs.iter().collect();
    let cfg = SslConfig { pretrain_updates: updates, intrinsic_coef, coverage_every: 0, ..SslConfig::desk() };
    let p = protolearn::pretrain::<f32>(&refs, &cfg, RunConfig::desk().frame_stack, seed)?;
    Ok((p.stack, p.bank))
}

fn random_model(seed: u64) -> Result<(EncoderStack<f32>, PrototypeBank<f32>)> {
    let spec = desk_spec("pendulum");
    init_model::<f32>(&SslConfig::desk(), spec.stacked_channels(), spec.render_size, seed)
}

struct Models {
    trained: Vec<(EncoderStack<f32>, PrototypeBank<f32>)>,
    random: Vec<(EncoderStack<f32>, PrototypeBank<f32>)>,
}

fn models(cell: &OnceCell<Models>) -> &Models {
    cell.get_or_init(|| {
        let t = Instant::now();
        let m = Models {
            trained: SEEDS.iter().map(|&s| pretrained(s, PRETRAIN_UPDATES, 5e-3).unwrap()).collect(),
            random: SEEDS.iter().map(|&s| random_model(s).unwrap()).collect(),
        };
        println!("  (pre-trained {} encoders for {PRETRAIN_UPDATES} updates in {:.0}s)", SEEDS.len(), t.elapsed().as_secs_f64());
        m
    })
}

fn probe_set(domain: &str, seed: u64) -> Result<(DomainBuffer, StateLog)> {
    collect_labeled(&desk_spec(domain), PROBE_FRAMES, PROBE_FRAMES, seeds::derive(seed, &format!("probe/{domain}")))
}

fn probe_mse(stack: &EncoderStack<f32>, set: &(DomainBuffer, StateLog)) -> Result<f64> {
    let (buf, labels) = set;
    let idx: Vec<usize> = (0..buf.len()).collect();
    let x = buf.batch::<f32>(&idx, 0, RunConfig::desk().frame_stack);
    let y = stack.features(&x)?.cast::<f64>();
    linear_probe(&y, labels, &ProbeOptions::default())
}

// ---------------------------------------------------------------- 4

fn diffusion_direction() -> Result<Verdict> {
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for &seed in &SEEDS {
        for (alpha, out) in [(5e-3, &mut on), (0.0, &mut off)] {
            let (_, bank) = pretrained(seed, 2000, alpha)?;
            out.push(metrics::coverage(&bank, 3)?);
        }
    }
    let med = |v: &[metrics::CoverageReport], f: fn(&metrics::CoverageReport) -> f64| median(&v.iter().map(f).collect::<Vec<_>>());
    let (ane_on, ane_off) = (med(&on, |c| c.ane), med(&off, |c| c.ane));
    let (kne_on, kne_off) = (med(&on, |c| c.kne), med(&off, |c| c.kne));
    verdict(
        ane_on < ane_off && kne_on < kne_off,
        format!("median ANE {ane_on:.4} vs {ane_off:.4}, KNE {kne_on:.4} vs {kne_off:.4} (with vs without)"),
    )
}

// ---------------------------------------------------------------- 5

fn knn_oracle() -> Result<Verdict> {
    let mut rng = seeds::rng(404);
    let mut mismatches = 0;
    for case in 0..10_000u64 {
        let n = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=5);
        let mut q = ProjectionSet::new(64);
        let mut points = Vec::new();
        for id in 0..n as u64 {
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            points.push((id, p.clone()));
            q.push(id, p)?;
        }
        let exclude = if case % 3 == 0 { Some(rng.gen_range(0..n as u64)) } else { None };
        let z: Vec<f64> = match exclude {
            Some(id) => points[id as usize].1.clone(),
            None => (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let mut all: Vec<f64> = points
            .iter()
            .filter(|(id, _)| Some(*id) != exclude)
            .map(|(_, p)| {
                let mut s = 0.0;
                for i in 0..d {
                    s += (z[i] - p[i]) * (z[i] - p[i]);
                }
                s
            })
            .collect();
        all.sort_by(f64::total_cmp);
        let got = knn_reward(&z, &q, k, exclude);
        let ok = match (all.len() >= k, got) {
            (true, Ok(r)) => r == all[k - 1].sqrt(),
            (false, Err(_)) => true,
            _ => false,
        };
        mismatches += usize::from(!ok);
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches in 10000 cases"))
}

// ---------------------------------------------------------------- 6

fn probe_quality(cell: &OnceCell<Models>) -> Result<Verdict> {
    let ms = models(cell);
    let mut pass = true;
    let mut parts = Vec::new();
    for domain in SSL_DOMAINS {
        let mut ratios = Vec::new();
        let (mut tr, mut rd) = (Vec::new(), Vec::new());
        for (i, &seed) in SEEDS.iter().enumerate() {
            let set = probe_set(domain, seed)?;
            let a = probe_mse(&ms.trained[i].0, &set)?;
            let b = probe_mse(&ms.random[i].0, &set)?;
            ratios.push(a / b);
            tr.push(a);
            rd.push(b);
        }
        let r = median(&ratios);
        pass &= r <= 0.5;
        parts.push(format!("{domain} ratio {r:.3} (MSE {:.4} vs random {:.4})", median(&tr), median(&rd)));
    }
    verdict(pass, parts.join(", "))
}

// ---------------------------------------------------------------- 7

fn downstream_policy(cell: &OnceCell<Models>) -> Result<Verdict> {
    let ms = models(cell);
    let spec = desk_spec("pendulum");
    let (rand_mean, rand_std) = rlagent::mean_std(&random_policy_returns(&spec, 100, 7)?);
    let cfg = RlConfig { beta: 0.2, env_steps: 30_000, ..RlConfig::desk() };
    let final_return = |model: &(EncoderStack<f32>, PrototypeBank<f32>), seed: u64| -> Result<f64> {
        let run = rlagent::train_downstream(&spec, &model.0, &model.1, &cfg, seed)?;
        Ok(run.log.last().map(|r| r.mean_return).unwrap_or(f64::NAN))
    };
    let mut trained = Vec::new();
    let mut random = Vec::new();
    for (i, &seed) in SEEDS.iter().enumerate() {
        trained.push(final_return(&ms.trained[i], seed)?);
        random.push(final_return(&ms.random[i], seed)?);
    }
    let mean = trained.iter().sum::<f64>() / trained.len() as f64;
    let bar = rand_mean + 3.0 * rand_std;
    let (mt, mr) = (median(&trained), median(&random));
    verdict(
        mean > bar && mr < mt,
        format!(
            "pre-trained mean {mean:.1} vs random-policy bar {bar:.1}; median {mt:.1} vs random encoder {mr:.1}; \
             per seed {trained:.0?} / {random:.0?}"
        ),
    )
}

// ---------------------------------------------------------------- 8

const TINY_RUN: &str = "\
precision = f64
collect_steps = 200
buffer_capacity = 200
pca.samples = 40
ssl.batch = 8
ssl.prototypes = 8
ssl.latent = 8
ssl.predictor_hidden = 8
ssl.conv_channels = 4
ssl.conv_strides = 2
ssl.pretrain_updates = 5
ssl.finetune_updates = 3
rl.env_steps = 40
rl.seed_steps = 20
rl.batch = 4
rl.hidden = 8
rl.eval_episodes = 1
phases = collect,pretrain,finetune,train,metrics
";

fn run_bytes(cfg: &RunConfig) -> Result<(String, Vec<Vec<u8>>)> {
    let m = pipeline::run_pipeline(cfg)?;
    let dir = pipeline::run_dir(cfg);
    let text = fs::read_to_string(dir.join(pipeline::MANIFEST))?;
    let files = m
        .artifacts
        .iter()
        .map(|a| fs::read(dir.join(&a.path)))
        .collect::<std::io::Result<Vec<_>>>()?;
    fs::remove_dir_all(&dir)?;
    Ok((text, files))
}

fn scheduling_and_determinism() -> Result<Verdict> {
    let mut cyclic = true;
    for n in 1..=8usize {
        for start in 0..50u64 {
            let mut seen: Vec<usize> = (start..start + n as u64).map(|s| choose_buffer(s, n)).collect();
            seen.sort_unstable();
            cyclic &= seen == (0..n).collect::<Vec<_>>();
        }
    }
    let specs: Vec<DomainSpec> = ["pendulum", "point_mass", "cartpole"].iter().map(|d| desk_spec(d)).collect();
    let bufs: Vec<DomainBuffer> = specs.iter().map(|s| collect_random(s, 60, 60, 3)).collect::<Result<_>>()?;
    let refs: Vec<&DomainBuffer> = bufs.iter().collect();
    let cfg = SslConfig { batch: 4, prototypes: 4, latent: 4, predictor_hidden: 4, conv_channels: vec![2], conv_strides: vec![2], pretrain_updates: 12, ..SslConfig::desk() };
    let log = protolearn::pretrain::<f64>(&refs, &cfg, 3, 0)?.log;
    cyclic &= log.iter().enumerate().all(|(i, r)| r.buffer == i % 3);

    let tmp = tempfile::tempdir()?;
    let mut run = RunConfig::parse(&format!("{TINY_RUN}out_dir = {}\n", tmp.path().display()))?;
    let first = run_bytes(&run)?;
    let second = run_bytes(&run)?;
    let same = first == second;
    run.seed += 1;
    let other = run_bytes(&run)?;
    let differs = other.1 != first.1;
    verdict(
        cyclic && same && differs,
        format!(
            "cyclic schedule {}; {} artifacts, repeat run {}; new seed {}",
            if cyclic { "exact" } else { "broken" },
            first.1.len(),
            if same { "bitwise identical" } else { "differs" },
            if differs { "changes artifacts" } else { "reproduces them" }
        ),
    )
}

// ---------------------------------------------------------------- 9

fn finetune_direction(cell: &OnceCell<Models>) -> Result<Verdict> {
    let ms = models(cell);
    let spec = desk_spec(UNSEEN);
    let run = RunConfig::desk();
    let cfg = SslConfig { finetune_updates: 500, coverage_every: 0, ..SslConfig::desk() };
    let (mut frozen, mut tuned) = (Vec::new(), Vec::new());
    for (i, &seed) in SEEDS.iter().enumerate() {
        let buf = collect_random(&spec, run.collect_steps, run.buffer_capacity, seeds::derive(seed, UNSEEN))?;
        let set = probe_set(UNSEEN, seed)?;
        let (stack, bank) = ms.trained[i].clone();
        frozen.push(probe_mse(&stack, &set)?);
        let ft = protolearn::finetune(stack, bank, &buf, &cfg, seed)?;
        tuned.push(probe_mse(&ft.stack, &set)?);
    }
    let (f, t) = (median(&frozen), median(&tuned));
    verdict(t < f, format!("{UNSEEN} probe MSE median {t:.4} after 500 updates vs {f:.4} frozen"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("CRPT_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let cell = OnceCell::new();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Result<Verdict> + '_>)> = vec![
        (1, "sinkhorn targets", Box::new(sinkhorn_suite)),
        (2, "loss gradients", Box::new(gradient_suite)),
        (3, "diffusion hand values", Box::new(hand_values)),
        (4, "diffusion spreads prototypes", Box::new(diffusion_direction)),
        (5, "kNN reward oracle", Box::new(knn_oracle)),
        (6, "linear-probe quality", Box::new(|| probe_quality(&cell))),
        (7, "downstream policy", Box::new(|| downstream_policy(&cell))),
        (8, "schedule and determinism", Box::new(scheduling_and_determinism)),
        (9, "finetuning on an unseen domain", Box::new(|| finetune_direction(&cell))),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(n)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match run() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {n}: {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
