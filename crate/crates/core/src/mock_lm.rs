//! Deterministic logit providers for desk-scale experiments: an add-one
//! smoothed n-gram model, a seeded noise wrapper that degrades it, and a
//! newline-delimited-JSON client for plugging in external models.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{LogitProvider, ProviderError};
use crate::masking::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrainError {
    #[error("n-gram order {order} needs a context of {} tokens, longer than every training sequence", order - 1)]
    OrderTooLarge { order: usize },
}

#[derive(Debug, Default, Clone)]
struct ContextCounts {
    by_token: HashMap<TokenId, u64>,
    total: u64,
}

/// Add-one smoothed n-gram model. Logits are
/// `ln((count + 1) / (context_total + vocab_size))` over the last
/// `order - 1` context tokens; unseen contexts give a uniform vector.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    vocab_size: usize,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

/// Count all n-grams of the corpus. An empty corpus trains to the pure
/// smoothing (uniform) model.
pub fn train_ngram(
    corpus: &[Vec<TokenId>],
    order: usize,
    vocab_size: usize,
) -> Result<NGramModel, TrainError> {
    assert!(order >= 1, "n-gram order must be at least 1");
    if !corpus.is_empty() && corpus.iter().all(|seq| order - 1 > seq.len()) {
        return Err(TrainError::OrderTooLarge { order });
    }
    let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
    for seq in corpus {
        for window in seq.windows(order) {
            let (context, target) = window.split_at(order - 1);
            debug_assert!((target[0] as usize) < vocab_size);
            let entry = counts.entry(context.to_vec()).or_default();
            *entry.by_token.entry(target[0]).or_insert(0) += 1;
            entry.total += 1;
        }
    }
    Ok(NGramModel {
        order,
        vocab_size,
        counts,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn next_logits(&self, context: &[TokenId]) -> Vec<f64> {
        let ctx_len = self.order - 1;
        let key = if context.len() >= ctx_len {
            &context[context.len() - ctx_len..]
        } else {
            context
        };
        let entry = self.counts.get(key);
        let total = entry.map(|e| e.total).unwrap_or(0);
        let denom = (total + self.vocab_size as u64) as f64;
        (0..self.vocab_size as TokenId)
            .map(|t| {
                let count = entry.and_then(|e| e.by_token.get(&t)).copied().unwrap_or(0);
                ((count + 1) as f64 / denom).ln()
            })
            .collect()
    }
}

impl LogitProvider for NGramModel {
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        Ok(NGramModel::next_logits(self, context))
    }
}

impl LogitProvider for Arc<NGramModel> {
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        Ok(NGramModel::next_logits(self, context))
    }
}

/// Adds seeded Gaussian perturbation to an inner provider's logits. The
/// noise is a pure function of (seed, context) — ChaCha8 seeded by an
/// FNV-1a hash of both, shaped by the Box-Muller transform — so repeated
/// calls at the same context perturb identically.
#[derive(Debug, Clone)]
pub struct NoiseWrapper<P> {
    inner: P,
    seed: u64,
    scale: f64,
}

impl<P> NoiseWrapper<P> {
    pub fn new(inner: P, seed: u64, scale: f64) -> Self {
        assert!(scale >= 0.0, "noise scale must be nonnegative");
        NoiseWrapper { inner, seed, scale }
    }
}

impl<P: LogitProvider> LogitProvider for NoiseWrapper<P> {
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        let mut logits = self.inner.next_logits(context)?;
        if self.scale > 0.0 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(fnv1a(self.seed, context));
            for logit in logits.iter_mut() {
                *logit += self.scale * standard_normal(&mut rng);
            }
        }
        Ok(logits)
    }
}

fn fnv1a(seed: u64, context: &[TokenId]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |byte: u8| {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in seed.to_le_bytes() {
        eat(b);
    }
    for id in context {
        for b in id.to_le_bytes() {
            eat(b);
        }
    }
    hash
}

fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let scale = 1.0 / (1u64 << 53) as f64;
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - (rng.next_u64() >> 11) as f64 * scale;
    let u2 = (rng.next_u64() >> 11) as f64 * scale;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Wire request of the external provider protocol: one JSON object per
/// line, one outstanding request at a time.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub id: u64,
    pub context: Vec<TokenId>,
}

/// Wire response: must echo the request id and carry exactly one logit
/// per vocabulary entry.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub id: u64,
    pub logits: Vec<f64>,
}

/// Client for an external logit provider speaking newline-delimited JSON
/// over a local socket.
pub struct ExternalProvider {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    vocab_size: usize,
    next_id: u64,
}

impl ExternalProvider {
    pub fn connect(addr: &str, vocab_size: usize) -> Result<Self, ProviderError> {
        let writer = TcpStream::connect(addr)?;
        let reader = BufReader::new(writer.try_clone()?);
        Ok(ExternalProvider {
            reader,
            writer,
            vocab_size,
            next_id: 0,
        })
    }
}

impl LogitProvider for ExternalProvider {
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        let id = self.next_id;
        self.next_id += 1;
        let request = ProviderRequest {
            id,
            context: context.to_vec(),
        };
        let mut line = serde_json::to_string(&request)
            .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;

        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply)?;
        if n == 0 {
            return Err(ProviderError::Protocol(
                "provider closed the connection".into(),
            ));
        }
        let response: ProviderResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| ProviderError::Protocol(format!("malformed response: {e}")))?;
        if response.id != id {
            return Err(ProviderError::Protocol(format!(
                "response id {} does not match request id {}",
                response.id, id
            )));
        }
        if response.logits.len() != self.vocab_size {
            return Err(ProviderError::Protocol(format!(
                "expected {} logits, got {}",
                self.vocab_size,
                response.logits.len()
            )));
        }
        Ok(response.logits)
    }
}
