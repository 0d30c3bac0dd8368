//! Diagnostics: prototype coverage, PCA of embeddings, linear state probes.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::ndmath::{Scalar, Tensor};
use crate::protolearn::PrototypeBank;
use crate::seeds;

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    /// Mean cosine similarity over ordered prototype pairs.
    pub ane: f64,
    /// Mean over prototypes of the k-th largest similarity to another prototype.
    pub kne: f64,
    pub k: usize,
}

impl CoverageReport {
    pub fn csv(&self) -> String {
        format!("ane,kne,k\n{},{},{}\n", self.ane, self.kne, self.k)
    }
}

pub fn coverage<T: Scalar>(bank: &PrototypeBank<T>, k: usize) -> Result<CoverageReport> {
    let m = bank.len();
    if k == 0 || m <= k {
        return Err(Error::TooFewPrototypes { k, m });
    }
    let cn = bank.normalized()?.cast::<f64>();
    let d = cn.row_len();
    let mut total = 0.0;
    let mut kth = 0.0;
    let mut sims = Vec::with_capacity(m - 1);
    for j in 0..m {
        sims.clear();
        for l in (0..m).filter(|&l| l != j) {
            let s: f64 = (0..d).map(|c| cn.at(j, c) * cn.at(l, c)).sum();
            sims.push(s);
            total += s;
        }
        sims.sort_by(|a, b| b.total_cmp(a));
        kth += sims[k - 1];
    }
    Ok(CoverageReport {
        ane: total / (m * (m - 1)) as f64,
        kne: kth / m as f64,
        k,
    })
}

#[derive(Clone, Debug)]
pub struct Pca {
    /// `[n, components]` coordinates of the centred samples.
    pub coords: Tensor<f64>,
    /// Leading covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues divided by total variance.
    pub ratios: Vec<f64>,
}

/// Principal components of the rows of `samples` (sample covariance,
/// `n - 1` normalization).
pub fn pca(samples: &Tensor<f64>, components: usize) -> Result<Pca> {
    let (n, d) = (samples.rows(), samples.row_len());
    if components == 0 || n <= components {
        return Err(Error::InsufficientData(format!(
            "{n} samples cannot support {components} components"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, samples.data());
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lead = eig.eigenvalues[order[0]].max(0.0);
    let tol = lead * 1e-10 + 1e-300;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if lead <= 0.0 || rank < components {
        return Err(Error::RankDeficient { rank, components });
    }
    let trace: f64 = (0..d).map(|i| eig.eigenvalues[i].max(0.0)).sum();
    let picked = &order[..components];
    let basis = DMatrix::from_fn(d, components, |r, c| eig.eigenvectors[(r, picked[c])]);
    let proj = centred * basis;
    let coords = Tensor::from_fn(&[n, components], |idx| proj[(idx / components, idx % components)]);
    let eigenvalues: Vec<f64> = picked.iter().map(|&i| eig.eigenvalues[i]).collect();
    let ratios = eigenvalues.iter().map(|e| e / trace).collect();
    Ok(Pca {
        coords,
        eigenvalues,
        ratios,
    })
}

/// PCA table: one row per sample tagged with its group, then a row of
/// explained-variance ratios.
pub fn pca_csv(p: &Pca, tags: &[String]) -> String {
    let k = p.ratios.len();
    let mut out = String::from("domain");
    for c in 0..k {
        let _ = write!(out, ",pc{}", c + 1);
    }
    out.push('\n');
    for (i, tag) in tags.iter().enumerate() {
        out.push_str(tag);
        for c in 0..k {
            let _ = write!(out, ",{}", p.coords.at(i, c));
        }
        out.push('\n');
    }
    out.push_str("explained_variance_ratio");
    for r in &p.ratios {
        let _ = write!(out, ",{r}");
    }
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    /// Ridge strength relative to the mean feature variance.
    pub ridge: f64,
    pub train_fraction: f64,
    /// Scale every target dimension to unit training variance.
    pub standardize: bool,
    pub split_seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            train_fraction: 0.8,
            standardize: true,
            split_seed: 0,
        }
    }
}

pub const MIN_PROBE_SAMPLES: usize = 200;

/// Held-out mean squared error of a ridge regression (with intercept)
/// from `features` rows to `targets` rows.
pub fn linear_probe(features: &Tensor<f64>, targets: &[Vec<f64>], opts: &ProbeOptions) -> Result<f64> {
    let n = features.rows();
    if n != targets.len() {
        return Err(Error::shape(format!("{n} feature rows vs {} targets", targets.len())));
    }
    if n < MIN_PROBE_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "linear probe needs {MIN_PROBE_SAMPLES} labelled samples, got {n}"
        )));
    }
    let d = features.row_len();
    let s = targets[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::stream(opts.split_seed, "probe/split"));
    let n_train = ((n as f64 * opts.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let fmean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|&i| features.at(i, j)).sum::<f64>() / n_train as f64)
        .collect();
    let tmean: Vec<f64> = (0..s)
        .map(|j| train.iter().map(|&i| targets[i][j]).sum::<f64>() / n_train as f64)
        .collect();
    let tscale: Vec<f64> = (0..s)
        .map(|j| {
            if !opts.standardize {
                return 1.0;
            }
            let v = train.iter().map(|&i| (targets[i][j] - tmean[j]).powi(2)).sum::<f64>() / n_train as f64;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let x = DMatrix::from_fn(n_train, d, |r, c| features.at(train[r], c) - fmean[c]);
    let y = DMatrix::from_fn(n_train, s, |r, c| (targets[train[r]][c] - tmean[c]) / tscale[c]);
    let mut gram = x.transpose() * &x;
    let mean_var = gram.trace() / (d as f64 * n_train as f64);
    let lambda = opts.ridge * mean_var.max(1e-12) * n_train as f64;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = x.transpose() * y;
    let weights = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::RankDeficient { rank: 0, components: d })?,
    };

    let mut sq = 0.0;
    for &i in test {
        for c in 0..s {
            let pred: f64 = (0..d).map(|j| (features.at(i, j) - fmean[j]) * weights[(j, c)]).sum();
            let truth = (targets[i][c] - tmean[c]) / tscale[c];
            sq += (pred - truth).powi(2);
        }
    }
    Ok(sq / (test.len() * s) as f64)
}
