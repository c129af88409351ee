//! Mixed-membership hypergraph embedding fit by Poisson maximum likelihood.
//!
//! Each node carries a simplex membership vector theta (softmax of free logits)
//! and a positive salience scalar r (exp of a free scalar). The expected count
//! of a node combination h is
//!
//!   lambda_h = (sum_d prod_{i in h} theta_id) * prod_{i in h} r_i
//!
//! and the training objective is the Poisson log likelihood over observed
//! combinations plus the -lambda penalty on sampled negatives (count! constants
//! omitted throughout).

use crate::config::FitConfig;
use crate::error::{Error, Result};
use crate::hypergraph::{Channel, HypergraphSnapshot, NegativeSampleSet, NodeVocab};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

const LOG_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, Default)]
pub struct FitDiag {
    pub final_ll: f64,
    pub epochs: usize,
    pub tol_achieved: f64,
    /// Objective value after every accepted epoch.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub year: i32,
    pub channel: Channel,
    pub dim: usize,
    pub vocab: Arc<NodeVocab>,
    /// Free parameters: theta = softmax(logits) row-wise, r = exp(log_r).
    pub logits: Array2<f64>,
    pub log_r: Array1<f64>,
    theta: Array2<f64>,
    ln_theta: Array2<f64>,
    pub fit_diag: FitDiag,
}

fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = logits.dim();
    let mut theta = Array2::zeros((n, d));
    let mut ln_theta = Array2::zeros((n, d));
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..d {
            z += (row[j] - m).exp();
        }
        let ln_z = z.ln();
        for j in 0..d {
            let ln_t = (row[j] - m - ln_z).max(LOG_FLOOR);
            ln_theta[[i, j]] = ln_t;
            theta[[i, j]] = ln_t.exp();
        }
    }
    (theta, ln_theta)
}

impl EmbeddingModel {
    pub fn new(
        year: i32,
        channel: Channel,
        vocab: Arc<NodeVocab>,
        logits: Array2<f64>,
        log_r: Array1<f64>,
    ) -> Self {
        let dim = logits.ncols();
        let (theta, ln_theta) = softmax_rows(&logits);
        EmbeddingModel {
            year,
            channel,
            dim,
            vocab,
            logits,
            log_r,
            theta,
            ln_theta,
            fit_diag: FitDiag::default(),
        }
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn r(&self, node: u32) -> f64 {
        self.log_r[node as usize].exp()
    }

    fn check_nodes(&self, nodes: &[u32]) -> Result<()> {
        if nodes.is_empty() {
            return Err(Error::validation("empty node set".to_string()));
        }
        for &i in nodes {
            if i as usize >= self.vocab.len() {
                return Err(Error::validation(format!("unknown node index {i}")));
            }
        }
        Ok(())
    }

    /// log of sum_d prod_{i in nodes} theta_id, evaluated in canonical node order.
    pub fn log_coherence(&self, nodes: &[u32]) -> Result<f64> {
        self.check_nodes(nodes)?;
        let mut sorted: Vec<u32> = nodes.to_vec();
        sorted.sort_unstable();
        let mut s = vec![0.0f64; self.dim];
        for &i in &sorted {
            for d in 0..self.dim {
                s[d] += self.ln_theta[[i as usize, d]];
            }
        }
        Ok(log_sum_exp(&s).min(0.0))
    }

    /// Probability that all nodes load on one shared latent dimension; in [0, 1].
    pub fn coherence(&self, nodes: &[u32]) -> Result<f64> {
        Ok(self.log_coherence(nodes)?.exp())
    }

    /// coherence(nodes) * prod r_i.
    pub fn propensity(&self, nodes: &[u32]) -> Result<f64> {
        let ln_c = self.log_coherence(nodes)?;
        let ln_r: f64 = nodes.iter().map(|&i| self.log_r[i as usize]).sum();
        Ok((ln_c + ln_r).exp())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_vocab(model: &EmbeddingModel, snapshot: &HypergraphSnapshot) -> Result<()> {
    if model.vocab.len() != snapshot.vocab.len()
        || (!Arc::ptr_eq(&model.vocab, &snapshot.vocab) && model.vocab.hash() != snapshot.vocab.hash())
    {
        return Err(Error::validation(
            "model vocabulary does not match snapshot".to_string(),
        ));
    }
    Ok(())
}

struct Workspace {
    /// per-dimension log products, reused across combinations
    s: Vec<f64>,
}

fn eval_terms<'a>(
    theta: &Array2<f64>,
    ln_theta: &Array2<f64>,
    log_r: &Array1<f64>,
    combos: impl Iterator<Item = (&'a [u32], f64)>,
    mut grad: Option<(&mut Array2<f64>, &mut Array1<f64>)>,
    ws: &mut Workspace,
) -> f64 {
    let dim = theta.ncols();
    let mut obj = 0.0;
    for (nodes, count) in combos {
        let s = &mut ws.s;
        s.clear();
        s.resize(dim, 0.0);
        let mut ln_r_sum = 0.0;
        for &i in nodes {
            let i = i as usize;
            ln_r_sum += log_r[i];
            for d in 0..dim {
                s[d] += ln_theta[[i, d]];
            }
        }
        let ln_c = log_sum_exp(s);
        let ln_lambda = ln_c + ln_r_sum;
        let lambda = ln_lambda.exp();
        obj += if count > 0.0 {
            count * ln_lambda - lambda
        } else {
            -lambda
        };
        if let Some((g_logits, g_log_r)) = grad.as_mut() {
            // dL/dlambda = count/lambda - 1; through the softmax the per-node
            // logit gradient reduces to w * (a_d - theta_id) with
            // w = count - lambda and a = softmax over dimensions of s.
            let w = count - lambda;
            for &i in nodes {
                let i = i as usize;
                g_log_r[i] += w;
                for d in 0..dim {
                    let a_d = (s[d] - ln_c).exp();
                    g_logits[[i, d]] += w * (a_d - theta[[i, d]]);
                }
            }
        }
    }
    obj
}

fn objective_and_grad(
    logits: &Array2<f64>,
    log_r: &Array1<f64>,
    snapshot: &HypergraphSnapshot,
    negatives: &NegativeSampleSet,
    want_grad: bool,
) -> (f64, Option<(Array2<f64>, Array1<f64>)>) {
    let (theta, ln_theta) = softmax_rows(logits);
    let mut ws = Workspace { s: Vec::new() };
    let mut g = if want_grad {
        Some((
            Array2::zeros(logits.dim()),
            Array1::zeros(log_r.len()),
        ))
    } else {
        None
    };
    let pos = snapshot
        .edge_counts
        .iter()
        .map(|(set, c)| (set.as_slice(), *c as f64));
    let neg = negatives.samples.iter().map(|s| (s.as_slice(), 0.0));
    let mut obj = eval_terms(
        &theta,
        &ln_theta,
        log_r,
        pos,
        g.as_mut().map(|(a, b)| (&mut *a, &mut *b)),
        &mut ws,
    );
    obj += eval_terms(
        &theta,
        &ln_theta,
        log_r,
        neg,
        g.as_mut().map(|(a, b)| (&mut *a, &mut *b)),
        &mut ws,
    );
    (obj, g)
}

/// The exact training objective for a model on a snapshot plus negatives.
pub fn log_likelihood(
    model: &EmbeddingModel,
    snapshot: &HypergraphSnapshot,
    negatives: &NegativeSampleSet,
) -> Result<f64> {
    check_vocab(model, snapshot)?;
    let (obj, _) = objective_and_grad(&model.logits, &model.log_r, snapshot, negatives, false);
    Ok(obj)
}

/// Analytic gradient of the training objective w.r.t. the free logits and log-r.
pub fn gradient(
    model: &EmbeddingModel,
    snapshot: &HypergraphSnapshot,
    negatives: &NegativeSampleSet,
) -> Result<(Array2<f64>, Array1<f64>)> {
    check_vocab(model, snapshot)?;
    let (_, g) = objective_and_grad(&model.logits, &model.log_r, snapshot, negatives, true);
    Ok(g.unwrap())
}

/// Full-batch gradient ascent with backtracking line search.
///
/// The accepted objective is non-decreasing by construction; fitting stops when
/// the relative improvement drops below `tolerance` or no uphill step exists.
pub fn fit(
    snapshot: &HypergraphSnapshot,
    negatives: &NegativeSampleSet,
    config: &FitConfig,
    warm_start: Option<&EmbeddingModel>,
) -> Result<EmbeddingModel> {
    if snapshot.edge_counts.is_empty() {
        return Err(Error::validation("cannot fit an empty snapshot".to_string()));
    }
    let n = snapshot.vocab.len();
    let dim = config.dim;

    let (mut logits, mut log_r) = match warm_start {
        Some(prev) => {
            if prev.dim != dim {
                return Err(Error::validation(format!(
                    "warm start dimension {} != configured {}",
                    prev.dim, dim
                )));
            }
            if prev.vocab.len() != n
                || (!Arc::ptr_eq(&prev.vocab, &snapshot.vocab)
                    && prev.vocab.hash() != snapshot.vocab.hash())
            {
                return Err(Error::validation(
                    "warm start vocabulary does not match snapshot".to_string(),
                ));
            }
            (prev.logits.clone(), prev.log_r.clone())
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Numeric(e.to_string()))?;
            let logits = Array2::from_shape_fn((n, dim), |_| normal.sample(&mut rng));
            // salience starts at each node's mean per-edge frequency
            let mut occ = vec![0.0f64; n];
            let mut n_edges = 0.0f64;
            for (set, c) in &snapshot.edge_counts {
                n_edges += *c as f64;
                for &i in set {
                    occ[i as usize] += *c as f64;
                }
            }
            let log_r = Array1::from_iter(
                occ.iter()
                    .map(|&o| ((o / n_edges.max(1.0)).max(1e-4)).ln()),
            );
            (logits, log_r)
        }
    };

    let (mut obj, _) = objective_and_grad(&logits, &log_r, snapshot, negatives, false);
    if !obj.is_finite() {
        return Err(Error::Numeric(
            "objective not finite at initialization (epoch 0)".to_string(),
        ));
    }

    let mut diag = FitDiag {
        final_ll: obj,
        epochs: 0,
        tol_achieved: f64::INFINITY,
        objective_trace: vec![obj],
    };
    let mut eta = 1e-3;
    for epoch in 1..=config.max_epochs {
        let (_, g) = objective_and_grad(&logits, &log_r, snapshot, negatives, true);
        let (g_logits, g_log_r) = g.unwrap();
        if g_logits.iter().chain(g_log_r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient diverged (NaN/Inf) at epoch {epoch}"
            )));
        }
        let mut step = eta;
        let mut accepted = false;
        for _ in 0..60 {
            let trial_logits = &logits + &(step * &g_logits);
            let trial_log_r = &log_r + &(step * &g_log_r);
            let (trial_obj, _) =
                objective_and_grad(&trial_logits, &trial_log_r, snapshot, negatives, false);
            if trial_obj.is_finite() && trial_obj >= obj {
                let improvement = (trial_obj - obj) / obj.abs().max(1.0);
                logits = trial_logits;
                log_r = trial_log_r;
                obj = trial_obj;
                diag.epochs = epoch;
                diag.objective_trace.push(obj);
                diag.tol_achieved = improvement;
                accepted = true;
                eta = step * 2.0;
                if improvement < config.tolerance {
                    diag.final_ll = obj;
                    let mut model =
                        EmbeddingModel::new(snapshot.year, snapshot.channel, Arc::clone(&snapshot.vocab), logits, log_r);
                    model.fit_diag = diag;
                    return Ok(model);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no uphill step at any scale: converged
            diag.tol_achieved = 0.0;
            break;
        }
    }
    diag.final_ll = obj;
    let mut model = EmbeddingModel::new(
        snapshot.year,
        snapshot.channel,
        Arc::clone(&snapshot.vocab),
        logits,
        log_r,
    );
    model.fit_diag = diag;
    Ok(model)
}

/// Rank-based AUC (average ranks on ties) of positive vs negative scores.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // 1-based average rank of the tie block
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

// --- versioned model checkpoint ---

const MODEL_MAGIC: &[u8; 4] = b"NVEM";
const MODEL_VERSION: u32 = 1;

pub fn write_model(path: &Path, model: &EmbeddingModel) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        out.write_all(&model.year.to_le_bytes())?;
        out.write_all(&[match model.channel {
            Channel::Content => 0u8,
            Channel::Context => 1u8,
        }])?;
        out.write_all(&(model.dim as u64).to_le_bytes())?;
        out.write_all(&(model.vocab.len() as u64).to_le_bytes())?;
        out.write_all(&model.vocab.hash())?;
        for v in model.logits.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in model.log_r.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    })()
    .map_err(io)
}

pub fn read_model(path: &Path, vocab: Arc<NodeVocab>) -> Result<EmbeddingModel> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut inp = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic).map_err(io)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::validation(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    inp.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(Error::StaleCache(format!(
            "{}: model version {version}, expected {MODEL_VERSION}",
            path.display()
        )));
    }
    inp.read_exact(&mut b4).map_err(io)?;
    let year = i32::from_le_bytes(b4);
    let mut ch = [0u8; 1];
    inp.read_exact(&mut ch).map_err(io)?;
    let channel = if ch[0] == 0 { Channel::Content } else { Channel::Context };
    let mut b8 = [0u8; 8];
    inp.read_exact(&mut b8).map_err(io)?;
    let dim = u64::from_le_bytes(b8) as usize;
    inp.read_exact(&mut b8).map_err(io)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut vhash = [0u8; 32];
    inp.read_exact(&mut vhash).map_err(io)?;
    if n != vocab.len() || vhash != vocab.hash() {
        return Err(Error::StaleCache(format!(
            "{}: checkpoint vocabulary hash does not match the provided vocabulary",
            path.display()
        )));
    }
    let mut read_f64s = |count: usize| -> std::io::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            inp.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    };
    let logits = Array2::from_shape_vec((n, dim), read_f64s(n * dim).map_err(io)?)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let log_r = Array1::from_vec(read_f64s(n).map_err(io)?);
    Ok(EmbeddingModel::new(year, channel, vocab, logits, log_r))
}

/// Plain-text export for inspection: one node per line with id, r, then theta.
pub fn export_text(path: &Path, model: &EmbeddingModel) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        for i in 0..model.vocab.len() {
            write!(out, "{}\t{:.12e}", model.vocab.id_of(i as u32), model.log_r[i].exp())?;
            for d in 0..model.dim {
                write!(out, "\t{:.12e}", model.theta[[i, d]])?;
            }
            writeln!(out)?;
        }
        out.flush()
    })()
    .map_err(io)
}
