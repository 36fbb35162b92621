//! Three-layer GCN over the class text features, plus residual fusion.

use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const GCN_LAYERS: usize = 3;
pub const NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct GcnStack {
    pub weights: [ParamId; GCN_LAYERS],
    pub negative_slope: f64,
    pub dim: usize,
}

impl GcnStack {
    /// Glorot-uniform `d × d` weights, trained at the GCN learning rate.
    pub fn new(store: &mut ParamStore, dim: usize, seed: u64) -> Self {
        let weights = std::array::from_fn(|l| {
            let w = rng::glorot(&mut rng::stream(seed, "gcn.weight", l as u64), dim, dim);
            store.add(format!("gcn.w{l}"), w, true, ParamGroup::Gcn)
        });
        Self {
            weights,
            negative_slope: NEGATIVE_SLOPE,
            dim,
        }
    }

    /// `H₃` for `H₀ = F_t`; the last layer is linear.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adjacency: Var, features: Var) -> Result<Var> {
        let a = tape.value(adjacency);
        let f = tape.value(features);
        if !a.is_matrix() || a.rows() != a.cols() || a.rows() != f.rows() {
            return Err(Error::dim("gcn_forward", a.shape(), f.shape()));
        }
        if f.cols() != self.dim {
            return Err(Error::dim("gcn_forward", f.shape(), &[f.rows(), self.dim]));
        }
        let mut h = features;
        for (l, &id) in self.weights.iter().enumerate() {
            let w = tape.param(store, id);
            let ah = tape.matmul(adjacency, h)?;
            h = tape.matmul(ah, w)?;
            if l + 1 < GCN_LAYERS {
                h = tape.leaky_relu(h, self.negative_slope);
            }
        }
        Ok(h)
    }
}

/// Plain-tensor GCN forward with explicit weights.
pub fn gcn_forward(features: &Tensor, adjacency: &Tensor, weights: &[Tensor; GCN_LAYERS], slope: f64) -> Result<Tensor> {
    if !adjacency.is_matrix() || adjacency.rows() != adjacency.cols() || adjacency.rows() != features.rows() {
        return Err(Error::dim("gcn_forward", adjacency.shape(), features.shape()));
    }
    let mut h = features.clone();
    for (l, w) in weights.iter().enumerate() {
        h = adjacency.matmul(&h)?.matmul(w)?;
        if l + 1 < GCN_LAYERS {
            h = h.map(|x| if x > 0.0 { x } else { slope * x });
        }
    }
    Ok(h)
}

/// `F_t* = F_t + H_L`
pub fn residual_fuse(tape: &mut Tape, text: Var, gcn_out: Var) -> Result<Var> {
    tape.add(text, gcn_out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn eye_weights(d: usize) -> [Tensor; 3] {
        std::array::from_fn(|_| Tensor::eye(d))
    }

    #[test]
    fn identity_propagation() {
        let f = Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.0], vec![0.1, 0.3]]).unwrap();
        assert_eq!(gcn_forward(&f, &Tensor::eye(3), &eye_weights(2), 0.2).unwrap(), f);
    }

    #[test]
    fn zero_weights_give_zero() {
        let f = Tensor::ones(&[3, 2]);
        let w: [Tensor; 3] = std::array::from_fn(|_| Tensor::zeros(&[2, 2]));
        assert!(gcn_forward(&f, &Tensor::eye(3), &w, 0.2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let f = Tensor::ones(&[3, 2]);
        assert!(matches!(gcn_forward(&f, &Tensor::eye(4), &eye_weights(2), 0.2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tape_matches_plain_forward() {
        let mut store = ParamStore::new();
        let stack = GcnStack::new(&mut store, 4, 7);
        let f = rng::normal(&mut rng::stream(1, "t", 0), &[5, 4], 1.0);
        let a = Tensor::full(&[5, 5], 0.2);
        let w = stack.weights.map(|id| store.value(id).clone());
        let want = gcn_forward(&f, &a, &w, NEGATIVE_SLOPE).unwrap();
        let mut tape = Tape::new();
        let (av, fv) = (tape.constant(a), tape.constant(f));
        let out = stack.forward(&mut tape, &store, av, fv).unwrap();
        assert_eq!(tape.value(out), &want);
    }

    #[test]
    fn residual_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0]]).unwrap());
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let s = residual_fuse(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 33.0, 44.0]);
        let s0 = residual_fuse(&mut tape, a, z).unwrap();
        assert_eq!(tape.value(s0), tape.value(a));
        let s1 = residual_fuse(&mut tape, z, b).unwrap();
        assert_eq!(tape.value(s1), tape.value(b));
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(residual_fuse(&mut tape, a, bad).is_err());
    }

    #[test]
    fn uniform_adjacency_oversmooths() {
        let c = 6;
        let f = rng::normal(&mut rng::stream(3, "t", 0), &[c, 4], 1.0);
        let w = rng::glorot(&mut rng::stream(3, "w", 0), 4, 4);
        let out = Tensor::full(&[c, c], 1.0 / c as f64).matmul(&f).unwrap().matmul(&w).unwrap();
        for i in 1..c {
            for (a, b) in out.row(0).iter().zip(out.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn permute_rows(t: &Tensor, p: &[usize]) -> Tensor {
        Tensor::from_rows(&p.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in 0u64..1000, p in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let f = rng::normal(&mut rng::stream(seed, "f", 0), &[5, 3], 1.0);
            let a = rng::uniform(&mut rng::stream(seed, "a", 0), &[5, 5], 1.0).row_softmax(0.5).unwrap();
            let w: [Tensor; 3] = std::array::from_fn(|l| rng::glorot(&mut rng::stream(seed, "w", l as u64), 3, 3));
            let base = gcn_forward(&f, &a, &w, 0.2).unwrap();
            let pa = Tensor::from_rows(&p.iter().map(|&i| p.iter().map(|&j| a.get(i, j)).collect()).collect::<Vec<_>>()).unwrap();
            let out = gcn_forward(&permute_rows(&f, &p), &pa, &w, 0.2).unwrap();
            let want = permute_rows(&base, &p);
            for (x, y) in out.data().iter().zip(want.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
