//! Label-correlation adjacency for the GCN.
//!
//! The text-prior graph is built in three stages: pairwise cosine similarity
//! of the class prior embeddings, a re-balancing step that fixes the
//! self-connection mass to `1 − s` and spreads `s` over the neighbours, and a
//! row-wise softmax at temperature `τ′`. The conditional-probability variant
//! replaces the first stage with binarised co-occurrence statistics.

use serde::{Deserialize, Serialize};

use crate::data::Labels;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Off-diagonal mass below which a row keeps only its self-connection.
pub const DEGENERATE_MASS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSource {
    TextPrior,
    ConditionalProb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    pub source: CorrelationSource,
    pub s: f64,
    pub tau_prime: f64,
    /// Binarisation threshold for the conditional-probability variant.
    pub threshold: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            source: CorrelationSource::TextPrior,
            s: 0.3,
            tau_prime: 0.3,
            threshold: 0.4,
        }
    }
}

impl CorrelationConfig {
    pub fn validate(&self) -> Result<()> {
        check_s(self.s)?;
        check_tau(self.tau_prime)?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("correlation threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationGraph {
    /// Row-stochastic `C × C` adjacency `A*`.
    pub adjacency: Tensor,
    pub s: f64,
    pub tau_prime: f64,
    pub source: CorrelationSource,
}

/// Output of [`rebalance`]: `A′` plus the rows that fell back to pure
/// self-connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Rebalanced {
    pub matrix: Tensor,
    pub guarded: Vec<bool>,
    pub s: f64,
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::param(format!("s must lie in [0, 1], got {s}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("tau_prime must be positive, got {tau}")));
    }
    Ok(())
}

/// `A = sim(Zᵀ, Z)` for column embeddings `Z` (`d × C`).
pub fn build_raw(z: &Tensor) -> Result<Tensor> {
    z.cosine_similarity_matrix()
}

pub fn rebalance(a: &Tensor, s: f64) -> Result<Rebalanced> {
    check_s(s)?;
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(Error::dim("rebalance", a.shape(), &[a.rows(), a.rows()]));
    }
    let c = a.rows();
    let mut out = Tensor::zeros(&[c, c]);
    let mut guarded = vec![false; c];
    for i in 0..c {
        let row = a.row(i);
        let (mut mass, mut total) = (0.0, 0.0);
        for (j, &v) in row.iter().enumerate() {
            if j != i {
                mass += v.abs();
                total += v;
            }
        }
        let o = &mut out.data_mut()[i * c..(i + 1) * c];
        o[i] = 1.0 - s;
        if mass < DEGENERATE_MASS || total.abs() < DEGENERATE_MASS {
            guarded[i] = true;
            continue;
        }
        for (j, &v) in row.iter().enumerate() {
            if j != i {
                o[j] = s / total * v;
            }
        }
    }
    Ok(Rebalanced { matrix: out, guarded, s })
}

/// Row softmax of `A′/τ′`; guarded rows become exact one-hot self-loops.
pub fn normalize(a_prime: &Rebalanced, tau_prime: f64, source: CorrelationSource) -> Result<CorrelationGraph> {
    check_tau(tau_prime)?;
    let mut adjacency = a_prime.matrix.row_softmax(tau_prime)?;
    let c = adjacency.rows();
    for (i, &g) in a_prime.guarded.iter().enumerate() {
        if g {
            let row = &mut adjacency.data_mut()[i * c..(i + 1) * c];
            row.iter_mut().for_each(|v| *v = 0.0);
            row[i] = 1.0;
        }
    }
    Ok(CorrelationGraph {
        adjacency,
        s: a_prime.s,
        tau_prime,
        source,
    })
}

/// Text-prior adjacency from `d × C` class embeddings.
pub fn build_text_prior(z: &Tensor, s: f64, tau_prime: f64) -> Result<CorrelationGraph> {
    normalize(&rebalance(&build_raw(z)?, s)?, tau_prime, CorrelationSource::TextPrior)
}

/// `P[i][j] = count(i ∧ j) / count(j)`, zero where class `j` never occurs.
pub fn conditional_probabilities(labels: &Labels) -> Tensor {
    let c = labels.classes();
    let mut joint = vec![0usize; c * c];
    for r in 0..labels.samples() {
        let row = labels.row(r);
        for i in 0..c {
            if row[i] == 0 {
                continue;
            }
            for j in 0..c {
                if row[j] == 1 {
                    joint[i * c + j] += 1;
                }
            }
        }
    }
    let mut p = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in 0..c {
            let cj = joint[j * c + j];
            if cj > 0 {
                p.data_mut()[i * c + j] = joint[i * c + j] as f64 / cj as f64;
            }
        }
    }
    p
}

pub fn build_conditional(labels: &Labels, threshold: f64, s: f64, tau_prime: f64) -> Result<CorrelationGraph> {
    let binary = conditional_probabilities(labels).map(|v| if v >= threshold { 1.0 } else { 0.0 });
    normalize(&rebalance(&binary, s)?, tau_prime, CorrelationSource::ConditionalProb)
}

/// Serialized form of an adjacency matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyExport {
    pub s: f64,
    pub tau_prime: f64,
    pub matrix: Vec<Vec<f64>>,
}

impl From<&CorrelationGraph> for AdjacencyExport {
    fn from(g: &CorrelationGraph) -> Self {
        Self {
            s: g.s,
            tau_prime: g.tau_prime,
            matrix: (0..g.adjacency.rows()).map(|i| g.adjacency.row(i).to_vec()).collect(),
        }
    }
}
