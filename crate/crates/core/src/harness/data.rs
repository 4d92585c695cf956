use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::DatasetSpec;
use crate::model::Batch;
use crate::rng::Rng;

/// One token per byte, vocabulary 256.
pub fn tokenize_bytes(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Config(format!("{} is empty", path.display())));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

/// Hidden Markov chain with Zipf-tilted per-state emissions.
///
/// Transition rows are `softmax(g/τ)` of standard normal scores `g`; state
/// `i` emits the token of rank `r` in its own random ordering with weight
/// `(r+1)^(−zipf/τ)`. At `τ = 0` both become the argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Hmm {
    pub states: usize,
    pub vocab: usize,
    /// Row-major `states×states`.
    pub trans: Vec<f64>,
    /// Row-major `states×vocab`.
    pub emit: Vec<f64>,
}

fn tempered(scores: &[f64], temperature: f64) -> Vec<f64> {
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
    for (i, &s) in scores.iter().enumerate() {
        if s > best {
            best = s;
            arg = i;
        }
    }
    if temperature == 0.0 {
        let mut p = vec![0.0; scores.len()];
        p[arg] = 1.0;
        return p;
    }
    let mut p: Vec<f64> = scores.iter().map(|s| ((s - best) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

impl Hmm {
    pub fn new(states: usize, vocab: usize, temperature: f64, zipf: f64, rng: &mut Rng) -> Result<Self> {
        if states == 0 || vocab < 2 {
            return Err(Error::Config(format!("hmm needs states ≥ 1 and vocab ≥ 2, got {states}, {vocab}")));
        }
        let mut trans = Vec::with_capacity(states * states);
        for _ in 0..states {
            let g: Vec<f64> = (0..states).map(|_| rng.normal()).collect();
            trans.extend(tempered(&g, temperature));
        }
        let mut emit = vec![0.0; states * vocab];
        for i in 0..states {
            let mut order: Vec<usize> = (0..vocab).collect();
            for k in (1..vocab).rev() {
                order.swap(k, rng.below(k + 1));
            }
            // log-weight of rank r is −zipf·ln(r+1); tempering divides by τ.
            let scores: Vec<f64> = (0..vocab).map(|r| -zipf * ((r + 1) as f64).ln()).collect();
            let p = if zipf == 0.0 {
                vec![1.0 / vocab as f64; vocab]
            } else {
                tempered(&scores, temperature)
            };
            for (r, &tok) in order.iter().enumerate() {
                emit[i * vocab + tok] = p[r];
            }
        }
        Ok(Self {
            states,
            vocab,
            trans,
            emit,
        })
    }

    /// Sample `length` tokens starting from state 0.
    pub fn sample(&self, rng: &mut Rng, length: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(length);
        let mut s = 0;
        for _ in 0..length {
            out.push(rng.categorical(&self.emit[s * self.vocab..(s + 1) * self.vocab]));
            s = rng.categorical(&self.trans[s * self.states..(s + 1) * self.states]);
        }
        out
    }

    /// Mean `−ln p(x_t | x_<t)` under the true chain (forward algorithm).
    pub fn oracle_cross_entropy(&self, tokens: &[usize]) -> f64 {
        let (s, v) = (self.states, self.vocab);
        let mut prior = vec![0.0; s];
        prior[0] = 1.0;
        let mut total = 0.0;
        for &x in tokens {
            let mut post: Vec<f64> = (0..s).map(|i| prior[i] * self.emit[i * v + x]).collect();
            let p: f64 = post.iter().sum();
            total -= p.ln();
            post.iter_mut().for_each(|q| *q /= p);
            prior = vec![0.0; s];
            for (i, &q) in post.iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                for j in 0..s {
                    prior[j] += q * self.trans[i * s + j];
                }
            }
        }
        total / tokens.len().max(1) as f64
    }
}

/// Chain structure then `length` tokens, both drawn from `rng`.
pub fn synth_corpus(spec: &DatasetSpec, rng: &mut Rng, length: usize) -> Result<Vec<usize>> {
    match *spec {
        DatasetSpec::SyntheticMarkov {
            states,
            temperature,
            vocab,
            zipf,
            ..
        } => Ok(Hmm::new(states, vocab, temperature, zipf, rng)?.sample(rng, length)),
        DatasetSpec::FileBytes { .. } => Err(Error::Config("synth_corpus needs a synthetic-markov spec".into())),
    }
}

/// A token stream split into training and held-out parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Corpus {
    /// Tokens of `spec` (synthetic streams are fully determined by
    /// `data_seed`); the last tenth is held out.
    pub fn load(spec: &DatasetSpec, data_seed: u64, seq: usize) -> Result<Self> {
        let tokens = match spec {
            DatasetSpec::FileBytes { path } => tokenize_bytes(path)?,
            DatasetSpec::SyntheticMarkov { length, .. } => synth_corpus(spec, &mut Rng::new(data_seed, 0), *length)?,
        };
        let held = (tokens.len() / 10).max(seq + 1);
        if tokens.len() < held + seq + 1 {
            return Err(Error::Config(format!(
                "corpus of {} tokens too short for sequences of {seq}",
                tokens.len()
            )));
        }
        let split = tokens.len() - held;
        Ok(Self {
            train: tokens[..split].to_vec(),
            eval: tokens[split..].to_vec(),
        })
    }
}

/// `count` batches of random length-`seq` windows from `tokens`, targets
/// shifted by one.
pub fn sample_windows(tokens: &[usize], count: usize, batch: usize, seq: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if tokens.len() < seq + 1 {
        return Err(Error::Contract(format!(
            "token stream of length {} too short for windows of {seq}",
            tokens.len()
        )));
    }
    let span = tokens.len() - seq;
    (0..count)
        .map(|_| {
            let mut x = Vec::with_capacity(batch * seq);
            let mut y = Vec::with_capacity(batch * seq);
            for _ in 0..batch {
                let s = rng.below(span);
                x.extend_from_slice(&tokens[s..s + seq]);
                y.extend_from_slice(&tokens[s + 1..s + seq + 1]);
            }
            Batch::new(x, y, batch, seq)
        })
        .collect()
}
