//! Cosine prediction head and the re-balanced distribution-balanced focal loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 5e-3;
pub const TAU_MAX: f64 = 1.0;
pub const LOG_CLAMP: f64 = 1e-12;
pub const BIAS_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyper {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub zeta: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
            theta: 0.1,
            gamma: 2.0,
            kappa: 0.05,
            zeta: 2.0,
        }
    }
}

impl LossHyper {
    /// Settings under which the loss is plain binary cross-entropy.
    pub fn bce() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.0,
            theta: 0.0,
            gamma: 0.0,
            kappa: 0.0,
            zeta: 1.0,
        }
    }

    /// Plain focal loss with modulation `γ`.
    pub fn focal(gamma: f64) -> Self {
        Self { gamma, ..Self::bce() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0) {
            return Err(Error::Config(format!("loss.zeta must be positive, got {}", self.zeta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss.gamma must be non-negative, got {}", self.gamma)));
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("theta", self.theta), ("kappa", self.kappa)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("loss.{k} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub hyper: LossHyper,
    pub class_counts: Vec<usize>,
    pub total: usize,
}

impl LossConfig {
    pub fn new(hyper: LossHyper, class_counts: Vec<usize>, total: usize) -> Result<Self> {
        hyper.validate()?;
        if let Some(&n) = class_counts.iter().find(|&&n| n > total) {
            return Err(Error::param(format!("class count {n} exceeds N = {total}")));
        }
        Ok(Self {
            hyper,
            class_counts,
            total,
        })
    }

    fn count(&self, c: usize) -> Result<f64> {
        match self.class_counts.get(c) {
            Some(0) => Err(Error::Frequency { class: c }),
            Some(&n) => Ok(n as f64),
            None => Err(Error::dim("class index", &[c], &[self.class_counts.len()])),
        }
    }

    /// `r_c = α + σ(β·(N/n_c − θ))`
    pub fn rebalanced_weight(&self, c: usize) -> Result<f64> {
        let h = &self.hyper;
        Ok(h.alpha + sigmoid(h.beta * (self.total as f64 / self.count(c)? - h.theta)))
    }

    /// `v_c = κ·log(max(N/n_c − 1, 1e-6))`
    pub fn class_bias(&self, c: usize) -> Result<f64> {
        let ratio = self.total as f64 / self.count(c)? - 1.0;
        Ok(self.hyper.kappa * ratio.max(BIAS_CLAMP).ln())
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        (0..self.class_counts.len()).map(|c| self.rebalanced_weight(c)).collect()
    }

    pub fn biases(&self) -> Result<Vec<f64>> {
        (0..self.class_counts.len()).map(|c| self.class_bias(c)).collect()
    }
}

/// Learnable similarity temperature `τ`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub tau: ParamId,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore) -> Self {
        Self {
            tau: store.add("head.tau", Tensor::scalar(TAU_INIT), true, ParamGroup::Backbone),
        }
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.value(self.tau).data()[0]
    }

    /// Projects `τ` back into `[5e-3, 1]`.
    pub fn clamp(&self, store: &mut ParamStore) {
        let t = self.tau(store).clamp(TAU_MIN, TAU_MAX);
        store.get_mut(self.tau).value.data_mut()[0] = t;
    }

    /// `z = cos(v, f*)/τ`, `B × C`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, v: Var, text: Var) -> Result<Var> {
        let sim = cosine_logits(tape, v, text)?;
        let tau = tape.param(store, self.tau);
        tape.div_scalar_var(sim, tau)
    }
}

/// `cos(v_b, f_c)` for `B × d` and `C × d` inputs.
pub fn cosine_logits(tape: &mut Tape, v: Var, text: Var) -> Result<Var> {
    let (bv, tv) = (tape.value(v), tape.value(text));
    if bv.cols() != tv.cols() {
        return Err(Error::dim("predict_probs", bv.shape(), tv.shape()));
    }
    let vn = tape.row_l2_normalize(v)?;
    let tn = tape.row_l2_normalize(text)?;
    let tt = tape.transpose(tn)?;
    tape.matmul(vn, tt)
}

/// `p = σ(cos(v, f*)/τ)`; entries are independent per class.
pub fn predict_probs(v: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    if !(TAU_MIN..=TAU_MAX).contains(&tau) {
        return Err(Error::param(format!("tau {tau} outside [{TAU_MIN}, {TAU_MAX}]")));
    }
    if v.cols() != text.cols() {
        return Err(Error::dim("predict_probs", v.shape(), text.shape()));
    }
    let sim = v.row_l2_normalize()?.matmul(&text.row_l2_normalize()?.transpose()?)?;
    Ok(sim.map(|s| sigmoid(s / tau)))
}

fn check_labels(z: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<()> {
    if z.shape() != y.shape() || !z.is_matrix() {
        return Err(Error::dim("db_focal_loss", z.shape(), y.shape()));
    }
    if z.cols() != cfg.class_counts.len() {
        return Err(Error::dim("db_focal_loss", z.shape(), &[z.rows(), cfg.class_counts.len()]));
    }
    for (i, &v) in y.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Label {
                row: i / y.cols(),
                col: i % y.cols(),
                value: v,
            });
        }
    }
    Ok(())
}

fn tile(values: &[f64], rows: usize) -> Tensor {
    let data = (0..rows).flat_map(|_| values.iter().copied()).collect();
    Tensor::new(vec![rows, values.len()], data).expect("tile shape")
}

/// Mean over the batch of the per-sample sum over classes of
/// positive: `−r·(1−q)^γ·log q` with `q = σ(z − v)`,
/// negative: `−(r/ζ)·q^γ·log(1−q)` with `q = σ(ζ(z − v))`.
pub fn db_focal_loss(tape: &mut Tape, z: Var, labels: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_labels(tape.value(z), labels, cfg)?;
    let (b, _) = (labels.rows(), labels.cols());
    let h = &cfg.hyper;
    let bias = tape.constant(tile(&cfg.biases()?, b));
    let weight = tape.constant(tile(&cfg.weights()?, b));
    let pos_mask = tape.constant(labels.clone());
    let neg_mask = tape.constant(labels.map(|y| 1.0 - y));

    // logs are clamped at ln(LOG_CLAMP), i.e. q is floored at LOG_CLAMP
    let log_floor = LOG_CLAMP.ln();
    let u = tape.sub(z, bias)?;
    let log_qp = tape.log_sigmoid(u);
    let log_qp = tape.clamp_min(log_qp, log_floor);
    let neg_u = tape.scale(u, -1.0);
    let one_minus = tape.sigmoid(neg_u);
    let mod_p = tape.pow(one_minus, h.gamma);
    let pos = tape.mul(mod_p, log_qp)?;
    let pos = tape.mul(pos, pos_mask)?;

    let un = tape.scale(u, h.zeta);
    let qn = tape.sigmoid(un);
    let neg_un = tape.scale(un, -1.0);
    let log_comp = tape.log_sigmoid(neg_un);
    let log_comp = tape.clamp_min(log_comp, log_floor);
    let mod_n = tape.pow(qn, h.gamma);
    let neg = tape.mul(mod_n, log_comp)?;
    let neg = tape.scale(neg, 1.0 / h.zeta);
    let neg = tape.mul(neg, neg_mask)?;

    let both = tape.add(pos, neg)?;
    let weighted = tape.mul(both, weight)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Scalar loss value without gradient bookkeeping.
pub fn db_focal_loss_value(z: &Tensor, labels: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let zv = tape.constant(z.clone());
    let l = db_focal_loss(&mut tape, zv, labels, cfg)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hyper: LossHyper, counts: Vec<usize>, n: usize) -> LossConfig {
        LossConfig::new(hyper, counts, n).unwrap()
    }

    #[test]
    fn rebalanced_weight_cases() {
        let c = cfg(LossHyper::default(), vec![1000, 10], 1000);
        assert!((c.rebalanced_weight(0).unwrap() - 0.60225).abs() < 1e-5);
        let want = 0.1 + 1.0 / (1.0 + (-0.999f64).exp());
        assert!((c.rebalanced_weight(1).unwrap() - want).abs() < 1e-15);
        // the rounded reference 0.83089 is off in the fifth decimal
        assert!((want - 0.83089).abs() < 5e-5);
        let flat = cfg(LossHyper { beta: 0.0, ..LossHyper::default() }, vec![1, 500, 1000], 1000);
        for k in 0..3 {
            assert!((flat.rebalanced_weight(k).unwrap() - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_count_is_frequency_error() {
        let c = cfg(LossHyper::default(), vec![0, 4], 4);
        assert!(matches!(c.rebalanced_weight(0), Err(Error::Frequency { class: 0 })));
        assert!(matches!(c.class_bias(0), Err(Error::Frequency { class: 0 })));
    }

    #[test]
    fn class_bias_cases() {
        let c = cfg(LossHyper::default(), vec![50, 10, 100], 100);
        assert_eq!(c.class_bias(0).unwrap(), 0.0);
        assert!((c.class_bias(1).unwrap() - 0.05 * 9f64.ln()).abs() < 1e-15);
        assert!((c.class_bias(1).unwrap() - 0.10986).abs() < 1e-5);
        let clamped = c.class_bias(2).unwrap();
        assert!(clamped.is_finite());
        assert!((clamped - 0.05 * 1e-6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn predict_probs_cases() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let f = Tensor::from_rows(&[vec![0.0, 3.0], vec![2.0, 0.0]]).unwrap();
        let p = predict_probs(&v, &f, 0.07).unwrap();
        assert_eq!(p.get(0, 0), 0.5);
        assert!((p.get(0, 1) - 0.99999938).abs() < 1e-8);

        let f2 = Tensor::from_rows(&[vec![1.0, 0.1], vec![1.0, -0.1]]).unwrap();
        let p2 = predict_probs(&v, &f2, 0.07).unwrap();
        assert!(p2.get(0, 0) > 0.5 && p2.get(0, 1) > 0.5);
        assert!(p2.row(0).iter().sum::<f64>() > 1.0);

        let zero = Tensor::zeros(&[1, 2]);
        assert!(matches!(predict_probs(&zero, &f, 0.07), Err(Error::DegenerateEmbedding { index: 0 })));
    }

    #[test]
    fn predict_probs_scale_invariant() {
        let v = Tensor::from_rows(&[vec![0.3, -1.2, 0.5]]).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 0.2, 0.0], vec![-0.4, 0.9, 2.0]]).unwrap();
        let a = predict_probs(&v, &f, 0.1).unwrap();
        let b = predict_probs(&v.map(|x| 7.5 * x), &f, 0.1).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn bce_hand_case() {
        let z = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = cfg(LossHyper::bce(), vec![1, 1], 2);
        let sp = |x: f64| (1.0 + x.exp()).ln();
        // −log σ(z) = softplus(−z), −log(1−σ(z)) = softplus(z)
        let want = (sp(-0.5) + sp(-1.0) + sp(2.0) + sp(-0.0)) / 2.0;
        let got = db_focal_loss_value(&z, &y, &c).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn single_positive_at_bias() {
        let c = cfg(LossHyper::default(), vec![1, 10], 100);
        let v = c.class_bias(0).unwrap();
        let r = c.rebalanced_weight(0).unwrap();
        let z = Tensor::from_rows(&[vec![v]]).unwrap();
        let c1 = cfg(LossHyper::default(), vec![1], 100);
        let l = db_focal_loss_value(&z, &Tensor::ones(&[1, 1]), &c1).unwrap();
        assert!((l - r * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((0.25 * 2f64.ln() - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn finite_over_extreme_logits() {
        let c = cfg(LossHyper::default(), vec![3, 40, 90], 100);
        for k in -50..=50 {
            let z = Tensor::full(&[2, 3], k as f64);
            let y = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
            assert!(db_focal_loss_value(&z, &y, &c).unwrap().is_finite());
        }
    }

    #[test]
    fn label_values_checked() {
        let c = cfg(LossHyper::default(), vec![1, 1], 2);
        let y = Tensor::from_rows(&[vec![1.0, 0.3]]).unwrap();
        assert!(matches!(
            db_focal_loss_value(&Tensor::zeros(&[1, 2]), &y, &c),
            Err(Error::Label { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn tau_clamped() {
        let mut store = ParamStore::new();
        let head = PredictionHead::new(&mut store);
        assert_eq!(head.tau(&store), TAU_INIT);
        store.get_mut(head.tau).value.data_mut()[0] = -3.0;
        head.clamp(&mut store);
        assert_eq!(head.tau(&store), TAU_MIN);
        store.get_mut(head.tau).value.data_mut()[0] = 4.0;
        head.clamp(&mut store);
        assert_eq!(head.tau(&store), TAU_MAX);
    }

    #[test]
    fn invalid_hyper_rejected() {
        assert!(LossHyper { zeta: 0.0, ..LossHyper::default() }.validate().is_err());
        assert!(LossHyper { gamma: -1.0, ..LossHyper::default() }.validate().is_err());
    }
}
