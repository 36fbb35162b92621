//! Reverse-mode gradients on a small expression, checked against central
//! differences.

use capn::diffcore::{Tape, Tensor};

fn f(tape: &mut Tape, w: capn::diffcore::Var, x: capn::diffcore::Var) -> capn::Result<capn::diffcore::Var> {
    let h = tape.matmul(x, w)?;
    let h = tape.tanh(h);
    let p = tape.row_softmax(h, 0.5)?;
    let wt = tape.transpose(w)?;
    let q = tape.matmul(p, wt)?;
    Ok(tape.sum(q))
}

fn main() -> capn::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.5]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.4], vec![0.7, 0.1], vec![-0.3, 0.5]])?;

    let mut tape = Tape::new();
    let wv = tape.variable(w.clone());
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, wv, xv)?;
    tape.backward(out)?;
    let grad = tape.grad(wv).cloned().expect("w requires grad");

    let h = 1e-5;
    let eval = |w: Tensor| -> capn::Result<f64> {
        let mut t = Tape::no_grad();
        let (wv, xv) = (t.constant(w), t.constant(x.clone()));
        let o = f(&mut t, wv, xv)?;
        Ok(t.value(o).data()[0])
    };
    for i in 0..w.numel() {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        println!("dL/dw[{i}]  tape {:+.9}  fd {:+.9}", grad.data()[i], fd);
    }
    Ok(())
}
