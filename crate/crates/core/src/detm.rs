//! Simplified dynamic embedded topic model.
//!
//! Topic embeddings alpha[k][t] drift across windows under a Gaussian
//! random walk; topic-word distributions arise by projecting them onto a
//! fixed word-embedding space (beta[k][t] = softmax_v rho[v] . alpha[k][t]);
//! document-topic proportions are logistic-normal with an amortized
//! feed-forward encoder. The variational family is mean-field Gaussian per
//! (k, t) for alpha and per t for eta, with hand-derived gradients and a
//! reparameterized sample for theta.
//!
//! The per-word "empirical distribution over topics" exposed by
//! [`DetmState::word_topic_curve`] is the token-level responsibility
//! average: r_dk proportional to theta_dk * beta[k][t][w], weighted by the
//! word's count in each subdoc. Normalizing beta columns instead is a
//! defensible alternative reading; this choice is deliberate and
//! responsibility-based.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Vocabulary, WindowedCorpus};
use crate::embeddings::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum DetmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite ELBO in component {component}")]
    NonFinite { component: &'static str },
    #[error("training diverged at epoch {epoch}: non-finite parameters")]
    Diverged { epoch: usize },
    #[error("empty subdoc")]
    EmptySubdoc,
    #[error("empty batch")]
    EmptyBatch,
    #[error("word {0:?} not in vocabulary")]
    OutOfVocabulary(String),
    #[error("corpus must span at least 2 windows, got {0}")]
    TooFewWindows(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint file {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetmConfig {
    pub topics: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Random-walk variance of the topic embeddings.
    pub sigma2_alpha: f64,
    /// Random-walk variance of the per-window proportion prior.
    pub sigma2_eta: f64,
    /// Prior variance of document proportion logits around eta.
    pub a2: f64,
    pub hidden: usize,
    pub patience: usize,
    pub lr_decay: f64,
    /// Fraction of epochs over which the KL weight ramps 0 -> 1.
    pub kl_anneal_frac: f64,
    /// Update rho during fitting instead of keeping it frozen.
    pub train_rho: bool,
    pub seed: u64,
}

impl Default for DetmConfig {
    fn default() -> Self {
        Self {
            topics: 50,
            epochs: 1000,
            batch_size: 2000,
            learning_rate: 0.016,
            sigma2_alpha: 0.005 * 0.005,
            sigma2_eta: 0.005 * 0.005,
            a2: 1.0,
            hidden: 400,
            patience: 10,
            lr_decay: 0.5,
            kl_anneal_frac: 0.1,
            train_rho: false,
            seed: 0,
        }
    }
}

impl DetmConfig {
    fn validate(&self) -> Result<(), DetmError> {
        if self.topics < 2 {
            return Err(DetmError::InvalidConfig(format!(
                "topics={} but at least 2 are required",
                self.topics
            )));
        }
        if self.sigma2_alpha <= 0.0 || self.sigma2_eta <= 0.0 || self.a2 <= 0.0 {
            return Err(DetmError::InvalidConfig(
                "prior variances must be strictly positive".into(),
            ));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.learning_rate <= 0.0 {
            return Err(DetmError::InvalidConfig(
                "batch_size, hidden and learning_rate must be positive".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(DetmError::InvalidConfig("lr_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// All trainable tensors. Shapes: rho (V, L); m/s_alpha (K, T, L);
/// m/s_eta (T, K); encoder (hidden H over input V + T).
#[derive(Debug, Clone)]
pub struct DetmParams {
    pub rho: Array2<f64>,
    pub m_alpha: Array3<f64>,
    pub s_alpha: Array3<f64>,
    pub m_eta: Array2<f64>,
    pub s_eta: Array2<f64>,
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array1<f64>,
    pub enc_w_mu: Array2<f64>,
    pub enc_b_mu: Array1<f64>,
    pub enc_w_s: Array2<f64>,
    pub enc_b_s: Array1<f64>,
}

impl DetmParams {
    fn zeros_like(&self) -> Self {
        Self {
            rho: Array2::zeros(self.rho.raw_dim()),
            m_alpha: Array3::zeros(self.m_alpha.raw_dim()),
            s_alpha: Array3::zeros(self.s_alpha.raw_dim()),
            m_eta: Array2::zeros(self.m_eta.raw_dim()),
            s_eta: Array2::zeros(self.s_eta.raw_dim()),
            enc_w1: Array2::zeros(self.enc_w1.raw_dim()),
            enc_b1: Array1::zeros(self.enc_b1.raw_dim()),
            enc_w_mu: Array2::zeros(self.enc_w_mu.raw_dim()),
            enc_b_mu: Array1::zeros(self.enc_b_mu.raw_dim()),
            enc_w_s: Array2::zeros(self.enc_w_s.raw_dim()),
            enc_b_s: Array1::zeros(self.enc_b_s.raw_dim()),
        }
    }

    /// Flat views of every tensor, in a fixed order (rho first). Used by
    /// the optimizer and by finite-difference checks.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.rho.as_slice_mut().unwrap(),
            self.m_alpha.as_slice_mut().unwrap(),
            self.s_alpha.as_slice_mut().unwrap(),
            self.m_eta.as_slice_mut().unwrap(),
            self.s_eta.as_slice_mut().unwrap(),
            self.enc_w1.as_slice_mut().unwrap(),
            self.enc_b1.as_slice_mut().unwrap(),
            self.enc_w_mu.as_slice_mut().unwrap(),
            self.enc_b_mu.as_slice_mut().unwrap(),
            self.enc_w_s.as_slice_mut().unwrap(),
            self.enc_b_s.as_slice_mut().unwrap(),
        ]
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.rho.as_slice().unwrap(),
            self.m_alpha.as_slice().unwrap(),
            self.s_alpha.as_slice().unwrap(),
            self.m_eta.as_slice().unwrap(),
            self.s_eta.as_slice().unwrap(),
            self.enc_w1.as_slice().unwrap(),
            self.enc_b1.as_slice().unwrap(),
            self.enc_w_mu.as_slice().unwrap(),
            self.enc_b_mu.as_slice().unwrap(),
            self.enc_w_s.as_slice().unwrap(),
            self.enc_b_s.as_slice().unwrap(),
        ]
    }

    fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|sl| sl.iter().all(|x| x.is_finite()))
    }
}

/// K x T x V tensor of topic-word probabilities, row-stochastic over V.
#[derive(Debug, Clone)]
pub struct TopicWordDist {
    pub beta: Array3<f64>,
}

impl TopicWordDist {
    pub fn row(&self, k: usize, t: usize) -> ndarray::ArrayView1<'_, f64> {
        self.beta.slice(s![k, t, ..])
    }

    /// Top-n words of topic `k` in window `t` by probability.
    pub fn top_words(&self, k: usize, t: usize, n: usize) -> Vec<(usize, f64)> {
        let row = self.row(k, t);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        idx.into_iter().take(n).map(|v| (v, row[v])).collect()
    }
}

/// Per-window empirical distribution of one word over topics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordTopicCurve {
    pub word: String,
    /// T rows; rows with support 0 hold zeros and are flagged by support.
    pub phi: Vec<Vec<f64>>,
    /// Occurrence count of the word per window.
    pub support: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_elbo: f64,
    pub dev_perplexity: f64,
    pub learning_rate: f64,
}

/// A document as the model sees it: sparse counts and a window index.
#[derive(Debug, Clone, Copy)]
pub struct BatchDoc<'a> {
    pub counts: &'a [(u32, u32)],
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct DetmState {
    pub config: DetmConfig,
    pub t_count: usize,
    pub params: DetmParams,
    pub vocab_hash: [u8; 32],
}

pub fn vocab_hash(vocab: &Vocabulary) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for w in vocab.words() {
        hasher.update(w.as_bytes());
        hasher.update(b"\n");
    }
    hasher.finalize().into()
}

fn softmax_into(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in logits.iter_mut() {
        *x /= sum;
    }
}

/// KL(N(mu, sig2) || N(mu0, c)) for diagonal Gaussians, summed over
/// dimensions. `s` holds log-variances.
fn gauss_kl(mu: &[f64], s: &[f64], mu0: &[f64], c: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..mu.len() {
        let sig2 = s[i].exp();
        let d = mu[i] - mu0[i];
        total += 0.5 * ((sig2 + d * d) / c - 1.0 - s[i] + c.ln());
    }
    total
}

impl DetmState {
    /// Initialize from fixed word embeddings. Topic embedding means are
    /// drawn once per topic and shared across windows (the walk starts
    /// flat); log-variances start at the prior variance.
    pub fn init(
        rho: &EmbeddingMatrix,
        t_count: usize,
        config: DetmConfig,
    ) -> Result<Self, DetmError> {
        config.validate()?;
        if t_count < 2 {
            return Err(DetmError::TooFewWindows(t_count));
        }
        let v = rho.vocab_size();
        let l = rho.dim;
        if v == 0 || l == 0 {
            return Err(DetmError::DimensionMismatch(format!(
                "embedding matrix is {v} x {l}"
            )));
        }
        let k = config.topics;
        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let rho_arr = Array2::from_shape_fn((v, l), |(i, j)| rho.row(i)[j] as f64);

        let mut m_alpha = Array3::zeros((k, t_count, l));
        for ki in 0..k {
            let base: Vec<f64> = (0..l).map(|_| 0.02 * (rng.gen::<f64>() - 0.5)).collect();
            for t in 0..t_count {
                for (j, &b) in base.iter().enumerate() {
                    m_alpha[[ki, t, j]] = b;
                }
            }
        }
        let s_alpha = Array3::from_elem((k, t_count, l), config.sigma2_alpha.ln());
        let m_eta = Array2::zeros((t_count, k));
        let s_eta = Array2::from_elem((t_count, k), config.sigma2_eta.ln());

        let in_dim = v + t_count;
        let xavier = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            bound * (2.0 * rng.gen::<f64>() - 1.0)
        };
        let enc_w1 = Array2::from_shape_fn((h, in_dim), |_| xavier(&mut rng, in_dim, h));
        let enc_b1 = Array1::zeros(h);
        let enc_w_mu = Array2::from_shape_fn((k, h), |_| xavier(&mut rng, h, k));
        let enc_b_mu = Array1::zeros(k);
        let enc_w_s = Array2::from_shape_fn((k, h), |_| xavier(&mut rng, h, k));
        let enc_b_s = Array1::zeros(k);

        Ok(Self {
            config,
            t_count,
            params: DetmParams {
                rho: rho_arr,
                m_alpha,
                s_alpha,
                m_eta,
                s_eta,
                enc_w1,
                enc_b1,
                enc_w_mu,
                enc_b_mu,
                enc_w_s,
                enc_b_s,
            },
            vocab_hash: {
                let mut hasher = Sha256::new();
                for w in &rho.words {
                    hasher.update(w.as_bytes());
                    hasher.update(b"\n");
                }
                hasher.finalize().into()
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.rho.nrows()
    }

    pub fn topic_count(&self) -> usize {
        self.config.topics
    }

    pub fn embed_dim(&self) -> usize {
        self.params.rho.ncols()
    }

    /// beta[k][t] = softmax over the vocabulary of rho . m_alpha[k][t],
    /// evaluated at the variational means.
    pub fn beta(&self) -> TopicWordDist {
        let k = self.topic_count();
        let t_count = self.t_count;
        let v = self.vocab_size();
        let mut beta = Array3::zeros((k, t_count, v));
        for ki in 0..k {
            for t in 0..t_count {
                let alpha = self.params.m_alpha.slice(s![ki, t, ..]);
                let mut logits: Vec<f64> = self.params.rho.dot(&alpha).to_vec();
                softmax_into(&mut logits);
                for (vi, &p) in logits.iter().enumerate() {
                    beta[[ki, t, vi]] = p;
                }
            }
        }
        TopicWordDist { beta }
    }

    /// Encoder forward pass at the variational mean (no sampling).
    /// Input: normalized bag-of-words concatenated with a window one-hot.
    fn encode(&self, counts: &[(u32, u32)], window: usize) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let p = &self.params;
        let total: u32 = counts.iter().map(|&(_, c)| c).sum();
        let mut a1 = p.enc_b1.clone();
        for &(vi, c) in counts {
            let x = c as f64 / total as f64;
            a1 += &(&p.enc_w1.column(vi as usize) * x);
        }
        a1 += &p.enc_w1.column(self.vocab_size() + window);
        let h = a1.mapv(f64::tanh);
        let mu = p.enc_w_mu.dot(&h) + &p.enc_b_mu;
        let s = p.enc_w_s.dot(&h) + &p.enc_b_s;
        (h, mu, s)
    }

    /// Deterministic document-topic proportions: softmax of the encoder
    /// mean.
    pub fn infer_theta(&self, counts: &[(u32, u32)], window: usize) -> Result<Vec<f64>, DetmError> {
        if counts.is_empty() {
            return Err(DetmError::EmptySubdoc);
        }
        if window >= self.t_count {
            return Err(DetmError::DimensionMismatch(format!(
                "window {window} out of range (T = {})",
                self.t_count
            )));
        }
        let (_, mu, _) = self.encode(counts, window);
        let mut theta = mu.to_vec();
        softmax_into(&mut theta);
        Ok(theta)
    }

    /// ELBO and its gradients on a minibatch, sampling reparameterization
    /// noise from `rng`. The reconstruction and per-document KL terms are
    /// rescaled by `scale` (total training subdocs / batch size).
    pub fn elbo(
        &self,
        batch: &[BatchDoc<'_>],
        kl_weight: f64,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, DetmParams), DetmError> {
        let k = self.topic_count();
        let eps = Array2::from_shape_fn((batch.len(), k), |_| sample_standard_normal(rng));
        self.elbo_with_noise(batch, kl_weight, scale, &eps)
    }

    /// ELBO with explicit reparameterization noise (one row per batch
    /// document), for gradient checking and deterministic replay.
    pub fn elbo_with_noise(
        &self,
        batch: &[BatchDoc<'_>],
        kl_weight: f64,
        scale: f64,
        eps: &Array2<f64>,
    ) -> Result<(f64, DetmParams), DetmError> {
        if batch.is_empty() {
            return Err(DetmError::EmptyBatch);
        }
        let k = self.topic_count();
        let v = self.vocab_size();
        let t_count = self.t_count;
        let p = &self.params;
        if eps.nrows() != batch.len() || eps.ncols() != k {
            return Err(DetmError::DimensionMismatch(format!(
                "noise is {} x {}, expected {} x {}",
                eps.nrows(),
                eps.ncols(),
                batch.len(),
                k
            )));
        }

        let dist = self.beta();
        let beta = &dist.beta;
        let mut grads = p.zeros_like();
        // gradient of ELBO w.r.t. beta entries, accumulated over the batch
        let mut g_beta = Array3::<f64>::zeros((k, t_count, v));

        let mut elbo = 0.0;

        for (d, doc) in batch.iter().enumerate() {
            if doc.counts.is_empty() {
                return Err(DetmError::EmptySubdoc);
            }
            let t = doc.window;
            if t >= t_count {
                return Err(DetmError::DimensionMismatch(format!(
                    "window {t} out of range (T = {t_count})"
                )));
            }
            let (h, mu, s_log) = self.encode(doc.counts, t);
            let eps_d = eps.row(d);
            let std = s_log.mapv(|x| (0.5 * x).exp());
            let z = &mu + &(&std * &eps_d);
            let mut theta = z.to_vec();
            softmax_into(&mut theta);

            // reconstruction
            let mut recon = 0.0;
            let mut g_theta = vec![0.0; k];
            for &(vi, c) in doc.counts {
                let vi = vi as usize;
                let n = c as f64;
                let mut pv = 0.0;
                for ki in 0..k {
                    pv += theta[ki] * beta[[ki, t, vi]];
                }
                let pv = pv.max(1e-300);
                recon += n * pv.ln();
                for ki in 0..k {
                    g_theta[ki] += n * beta[[ki, t, vi]] / pv;
                    g_beta[[ki, t, vi]] += scale * n * theta[ki] / pv;
                }
            }
            if !recon.is_finite() {
                return Err(DetmError::NonFinite {
                    component: "reconstruction",
                });
            }

            // KL(q(theta logits) || N(m_eta[t], a2 I))
            let eta_t = p.m_eta.row(t);
            let kl_theta = gauss_kl(
                mu.as_slice().unwrap(),
                s_log.as_slice().unwrap(),
                eta_t.as_slice().unwrap(),
                self.config.a2,
            );
            if !kl_theta.is_finite() {
                return Err(DetmError::NonFinite {
                    component: "kl_theta",
                });
            }
            elbo += scale * (recon - kl_weight * kl_theta);

            // backprop through theta = softmax(z)
            let dot: f64 = (0..k).map(|ki| theta[ki] * g_theta[ki]).sum();
            let mut g_z = vec![0.0; k];
            for ki in 0..k {
                g_z[ki] = theta[ki] * (g_theta[ki] - dot);
            }
            // z = mu + exp(s/2) * eps
            let mut g_mu = vec![0.0; k];
            let mut g_s = vec![0.0; k];
            for ki in 0..k {
                g_mu[ki] = scale * g_z[ki];
                g_s[ki] = scale * g_z[ki] * eps_d[ki] * std[ki] * 0.5;
            }
            // KL terms: dKL/dmu = (mu - eta)/a2, dKL/ds = (exp(s)/a2 - 1)/2
            let w = scale * kl_weight;
            for ki in 0..k {
                let diff = (mu[ki] - eta_t[ki]) / self.config.a2;
                g_mu[ki] -= w * diff;
                g_s[ki] -= w * 0.5 * (s_log[ki].exp() / self.config.a2 - 1.0);
                grads.m_eta[[t, ki]] += w * diff;
            }

            // encoder backprop
            let g_mu = Array1::from(g_mu);
            let g_s = Array1::from(g_s);
            let mut g_h = p.enc_w_mu.t().dot(&g_mu);
            g_h += &p.enc_w_s.t().dot(&g_s);
            for ki in 0..k {
                for hi in 0..h.len() {
                    grads.enc_w_mu[[ki, hi]] += g_mu[ki] * h[hi];
                    grads.enc_w_s[[ki, hi]] += g_s[ki] * h[hi];
                }
                grads.enc_b_mu[ki] += g_mu[ki];
                grads.enc_b_s[ki] += g_s[ki];
            }
            let g_a1 = &g_h * &h.mapv(|x| 1.0 - x * x);
            let total: u32 = doc.counts.iter().map(|&(_, c)| c).sum();
            for &(vi, c) in doc.counts {
                let x = c as f64 / total as f64;
                for hi in 0..g_a1.len() {
                    grads.enc_w1[[hi, vi as usize]] += g_a1[hi] * x;
                }
            }
            for hi in 0..g_a1.len() {
                grads.enc_w1[[hi, v + t]] += g_a1[hi];
                grads.enc_b1[hi] += g_a1[hi];
            }
        }

        // beta -> alpha (and optionally rho) through the softmax over V
        for ki in 0..k {
            for t in 0..t_count {
                let beta_row = beta.slice(s![ki, t, ..]);
                let g_row = g_beta.slice(s![ki, t, ..]);
                let dot: f64 = beta_row.iter().zip(g_row.iter()).map(|(&b, &g)| b * g).sum();
                if dot == 0.0 && g_row.iter().all(|&g| g == 0.0) {
                    continue;
                }
                // gradient w.r.t. the logits rho[v] . m_alpha[k][t]
                let g_logits: Vec<f64> = beta_row
                    .iter()
                    .zip(g_row.iter())
                    .map(|(&b, &g)| b * (g - dot))
                    .collect();
                let alpha = p.m_alpha.slice(s![ki, t, ..]);
                for (vi, &gl) in g_logits.iter().enumerate() {
                    if gl == 0.0 {
                        continue;
                    }
                    let rho_v = p.rho.row(vi);
                    for j in 0..alpha.len() {
                        grads.m_alpha[[ki, t, j]] += gl * rho_v[j];
                        grads.rho[[vi, j]] += gl * alpha[j];
                    }
                }
            }
        }

        // Gaussian random-walk KL for alpha
        let c_a = self.config.sigma2_alpha;
        let zeros_l = vec![0.0; self.embed_dim()];
        let mut kl_alpha = 0.0;
        for ki in 0..k {
            for t in 0..t_count {
                let mu_t = p.m_alpha.slice(s![ki, t, ..]);
                let s_t = p.s_alpha.slice(s![ki, t, ..]);
                let prior: Vec<f64> = if t == 0 {
                    zeros_l.clone()
                } else {
                    p.m_alpha.slice(s![ki, t - 1, ..]).to_vec()
                };
                kl_alpha += gauss_kl(
                    mu_t.as_slice().unwrap(),
                    s_t.as_slice().unwrap(),
                    &prior,
                    c_a,
                );
                for j in 0..mu_t.len() {
                    let diff = (mu_t[j] - prior[j]) / c_a;
                    grads.m_alpha[[ki, t, j]] -= kl_weight * diff;
                    if t > 0 {
                        grads.m_alpha[[ki, t - 1, j]] += kl_weight * diff;
                    }
                    grads.s_alpha[[ki, t, j]] -=
                        kl_weight * 0.5 * (s_t[j].exp() / c_a - 1.0);
                }
            }
        }
        if !kl_alpha.is_finite() {
            return Err(DetmError::NonFinite {
                component: "kl_alpha",
            });
        }

        // Gaussian random-walk KL for eta
        let c_e = self.config.sigma2_eta;
        let zeros_k = vec![0.0; k];
        let mut kl_eta = 0.0;
        for t in 0..t_count {
            let mu_t = p.m_eta.row(t);
            let s_t = p.s_eta.row(t);
            let prior: Vec<f64> = if t == 0 {
                zeros_k.clone()
            } else {
                p.m_eta.row(t - 1).to_vec()
            };
            kl_eta += gauss_kl(
                mu_t.as_slice().unwrap(),
                s_t.as_slice().unwrap(),
                &prior,
                c_e,
            );
            for ki in 0..k {
                let diff = (mu_t[ki] - prior[ki]) / c_e;
                grads.m_eta[[t, ki]] -= kl_weight * diff;
                if t > 0 {
                    grads.m_eta[[t - 1, ki]] += kl_weight * diff;
                }
                grads.s_eta[[t, ki]] -= kl_weight * 0.5 * (s_t[ki].exp() / c_e - 1.0);
            }
        }
        if !kl_eta.is_finite() {
            return Err(DetmError::NonFinite { component: "kl_eta" });
        }

        elbo -= kl_weight * (kl_alpha + kl_eta);
        if !elbo.is_finite() {
            return Err(DetmError::NonFinite { component: "elbo" });
        }
        Ok((elbo, grads))
    }

    /// Reconstruction log-likelihood at the variational means (theta from
    /// the encoder mean, beta from alpha means), plus the token count.
    fn recon_at_means(
        &self,
        corpus: &WindowedCorpus,
        indices: &[usize],
        beta: &TopicWordDist,
    ) -> Result<(f64, u64), DetmError> {
        let mut ll = 0.0;
        let mut tokens = 0u64;
        for &i in indices {
            let sd = &corpus.subdocs[i];
            let theta = self.infer_theta(&sd.counts, sd.window)?;
            for &(vi, c) in &sd.counts {
                let vi = vi as usize;
                let mut pv = 0.0;
                for (ki, &th) in theta.iter().enumerate() {
                    pv += th * beta.beta[[ki, sd.window, vi]];
                }
                ll += c as f64 * pv.max(1e-300).ln();
                tokens += c as u64;
            }
        }
        Ok((ll, tokens))
    }

    /// Dev-set perplexity at the variational means.
    pub fn perplexity(
        &self,
        corpus: &WindowedCorpus,
        indices: &[usize],
    ) -> Result<f64, DetmError> {
        let beta = self.beta();
        let (ll, tokens) = self.recon_at_means(corpus, indices, &beta)?;
        Ok((-ll / tokens.max(1) as f64).exp())
    }

    /// Fit by minibatch gradient ascent with Adam, monitoring dev
    /// perplexity for learning-rate decay and early stopping. Returns the
    /// best-dev state and the per-epoch training log.
    pub fn fit(
        mut self,
        corpus: &WindowedCorpus,
    ) -> Result<(DetmState, Vec<TrainLogEntry>), DetmError> {
        if self.t_count < 2 {
            return Err(DetmError::TooFewWindows(self.t_count));
        }
        let train_idx = corpus.train_indices();
        let dev_idx = {
            let d = corpus.dev_indices();
            if d.is_empty() {
                train_idx.clone()
            } else {
                d
            }
        };
        if train_idx.is_empty() {
            return Err(DetmError::EmptyBatch);
        }

        let n_train = train_idx.len();
        let batch_size = self.config.batch_size.min(n_train);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        let mut adam = Adam::new(&self.params);
        let mut lr = self.config.learning_rate;
        let anneal_epochs =
            ((self.config.epochs as f64) * self.config.kl_anneal_frac).ceil().max(1.0);

        let mut best_ppl = f64::INFINITY;
        let mut best_params: Option<DetmParams> = None;
        let mut non_improve = 0usize;
        let mut log = Vec::new();
        let mut order: Vec<usize> = train_idx.clone();

        for epoch in 1..=self.config.epochs {
            let kl_weight = ((epoch as f64) / anneal_epochs).min(1.0);
            // Fisher-Yates with the training rng keeps runs reproducible
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut epoch_elbo = 0.0;
            let mut n_batches = 0usize;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<BatchDoc<'_>> = chunk
                    .iter()
                    .map(|&i| BatchDoc {
                        counts: &corpus.subdocs[i].counts,
                        window: corpus.subdocs[i].window,
                    })
                    .collect();
                let scale = n_train as f64 / batch.len() as f64;
                let (elbo, grads) = self.elbo(&batch, kl_weight, scale, &mut rng)?;
                epoch_elbo += elbo;
                n_batches += 1;
                adam.step(&mut self.params, &grads, lr, self.config.train_rho);
                if !self.params.all_finite() {
                    return Err(DetmError::Diverged { epoch });
                }
            }
            let train_elbo = epoch_elbo / n_batches.max(1) as f64;

            let ppl = self.perplexity(corpus, &dev_idx)?;
            log.push(TrainLogEntry {
                epoch,
                train_elbo,
                dev_perplexity: ppl,
                learning_rate: lr,
            });
            if ppl < best_ppl {
                best_ppl = ppl;
                best_params = Some(self.params.clone());
                non_improve = 0;
            } else {
                non_improve += 1;
                lr *= self.config.lr_decay;
                if non_improve > self.config.patience {
                    break;
                }
            }
        }
        if let Some(p) = best_params {
            self.params = p;
        }
        Ok((self, log))
    }

    /// Empirical topic distribution of `word` per window: token-level
    /// responsibilities r_dk (proportional to theta_dk * beta[k][t][w]),
    /// averaged over the word's occurrences in each window.
    pub fn word_topic_curve(
        &self,
        corpus: &WindowedCorpus,
        word: &str,
    ) -> Result<WordTopicCurve, DetmError> {
        let wi = corpus
            .vocabulary
            .get(word)
            .ok_or_else(|| DetmError::OutOfVocabulary(word.to_string()))? as usize;
        let k = self.topic_count();
        let beta = self.beta();
        let mut phi = vec![vec![0.0; k]; self.t_count];
        let mut support = vec![0.0; self.t_count];
        for sd in &corpus.subdocs {
            let Some(&(_, c)) = sd.counts.iter().find(|&&(v, _)| v as usize == wi) else {
                continue;
            };
            let n = c as f64;
            let theta = self.infer_theta(&sd.counts, sd.window)?;
            let mut r: Vec<f64> = (0..k)
                .map(|ki| theta[ki] * beta.beta[[ki, sd.window, wi]])
                .collect();
            let rsum: f64 = r.iter().sum();
            if rsum > 0.0 {
                for x in r.iter_mut() {
                    *x /= rsum;
                }
            } else {
                for x in r.iter_mut() {
                    *x = 1.0 / k as f64;
                }
            }
            for ki in 0..k {
                phi[sd.window][ki] += n * r[ki];
            }
            support[sd.window] += n;
        }
        for t in 0..self.t_count {
            if support[t] > 0.0 {
                for x in phi[t].iter_mut() {
                    *x /= support[t];
                }
            }
        }
        Ok(WordTopicCurve {
            word: word.to_string(),
            phi,
            support,
        })
    }

    /// Topic curves for every vocabulary word in one pass over the
    /// subdocs (theta is inferred once per subdoc instead of once per
    /// word). Holds a V x T x K accumulator in memory.
    pub fn all_word_topic_curves(
        &self,
        corpus: &WindowedCorpus,
    ) -> Result<Vec<WordTopicCurve>, DetmError> {
        let k = self.topic_count();
        let v = corpus.vocabulary.len();
        if v != self.vocab_size() {
            return Err(DetmError::DimensionMismatch(format!(
                "corpus vocabulary {v} vs model vocabulary {}",
                self.vocab_size()
            )));
        }
        let beta = self.beta();
        let mut phi = vec![vec![vec![0.0f64; k]; self.t_count]; v];
        let mut support = vec![vec![0.0f64; self.t_count]; v];
        let mut r = vec![0.0f64; k];
        for sd in &corpus.subdocs {
            let theta = self.infer_theta(&sd.counts, sd.window)?;
            let t = sd.window;
            for &(vi, c) in &sd.counts {
                let vi = vi as usize;
                let n = c as f64;
                let mut rsum = 0.0;
                for ki in 0..k {
                    r[ki] = theta[ki] * beta.beta[[ki, t, vi]];
                    rsum += r[ki];
                }
                if rsum > 0.0 {
                    for x in r.iter_mut() {
                        *x /= rsum;
                    }
                } else {
                    r.fill(1.0 / k as f64);
                }
                for ki in 0..k {
                    phi[vi][t][ki] += n * r[ki];
                }
                support[vi][t] += n;
            }
        }
        Ok((0..v)
            .map(|vi| {
                let mut rows = std::mem::take(&mut phi[vi]);
                for t in 0..self.t_count {
                    if support[vi][t] > 0.0 {
                        for x in rows[t].iter_mut() {
                            *x /= support[vi][t];
                        }
                    }
                }
                WordTopicCurve {
                    word: corpus.vocabulary.word(vi as u32).to_string(),
                    phi: rows,
                    support: std::mem::take(&mut support[vi]),
                }
            })
            .collect())
    }

    /// Versioned binary checkpoint: config, vocabulary hash, and all
    /// parameter tensors.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), DetmError> {
        let io_err = |source| DetmError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        w.write_all(b"DETM").map_err(io_err)?;
        w.write_u32::<LittleEndian>(1).map_err(io_err)?;
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_u32::<LittleEndian>(cfg.len() as u32).map_err(io_err)?;
        w.write_all(&cfg).map_err(io_err)?;
        w.write_all(&self.vocab_hash).map_err(io_err)?;
        let dims = [
            self.vocab_size() as u64,
            self.embed_dim() as u64,
            self.topic_count() as u64,
            self.t_count as u64,
            self.config.hidden as u64,
        ];
        for d in dims {
            w.write_u64::<LittleEndian>(d).map_err(io_err)?;
        }
        for sl in self.params.slices() {
            for &x in sl {
                w.write_f64::<LittleEndian>(x).map_err(io_err)?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, DetmError> {
        let io_err = |source| DetmError::Io {
            path: path.display().to_string(),
            source,
        };
        let bad = |reason: &str| DetmError::BadCheckpoint {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"DETM" {
            return Err(bad("wrong magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != 1 {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let cfg_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_buf).map_err(io_err)?;
        let config: DetmConfig =
            serde_json::from_slice(&cfg_buf).map_err(|e| bad(&format!("bad config: {e}")))?;
        let mut vocab_hash = [0u8; 32];
        r.read_exact(&mut vocab_hash).map_err(io_err)?;
        let mut dims = [0u64; 5];
        for d in dims.iter_mut() {
            *d = r.read_u64::<LittleEndian>().map_err(io_err)?;
        }
        let (v, l, k, t_count, h) = (
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
            dims[4] as usize,
        );
        if k != config.topics || h != config.hidden {
            return Err(bad("dims disagree with config"));
        }
        let mut read_tensor = |len: usize| -> Result<Vec<f64>, DetmError> {
            let mut buf = vec![0.0f64; len];
            for x in buf.iter_mut() {
                *x = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
            Ok(buf)
        };
        let in_dim = v + t_count;
        let params = DetmParams {
            rho: Array2::from_shape_vec((v, l), read_tensor(v * l)?).unwrap(),
            m_alpha: Array3::from_shape_vec((k, t_count, l), read_tensor(k * t_count * l)?)
                .unwrap(),
            s_alpha: Array3::from_shape_vec((k, t_count, l), read_tensor(k * t_count * l)?)
                .unwrap(),
            m_eta: Array2::from_shape_vec((t_count, k), read_tensor(t_count * k)?).unwrap(),
            s_eta: Array2::from_shape_vec((t_count, k), read_tensor(t_count * k)?).unwrap(),
            enc_w1: Array2::from_shape_vec((h, in_dim), read_tensor(h * in_dim)?).unwrap(),
            enc_b1: Array1::from_vec(read_tensor(h)?),
            enc_w_mu: Array2::from_shape_vec((k, h), read_tensor(k * h)?).unwrap(),
            enc_b_mu: Array1::from_vec(read_tensor(k)?),
            enc_w_s: Array2::from_shape_vec((k, h), read_tensor(k * h)?).unwrap(),
            enc_b_s: Array1::from_vec(read_tensor(k)?),
        };
        Ok(Self {
            config,
            t_count,
            params,
            vocab_hash,
        })
    }
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Adam {
    m: DetmParams,
    v: DetmParams,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &DetmParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Ascent step (params += update). `rho` is skipped unless
    /// `train_rho`.
    fn step(&mut self, params: &mut DetmParams, grads: &DetmParams, lr: f64, train_rho: bool) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let p_slices = params.slices_mut();
        let g_slices = grads.slices();
        let m_slices = self.m.slices_mut();
        let v_slices = self.v.slices_mut();
        for (idx, (((p, g), m), v)) in p_slices
            .into_iter()
            .zip(g_slices)
            .zip(m_slices)
            .zip(v_slices)
            .enumerate()
        {
            // tensor 0 is rho
            if idx == 0 && !train_rho {
                continue;
            }
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] += lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}
