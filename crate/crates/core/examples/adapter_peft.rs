//! Parallel bottleneck adapter: trainable-parameter counts across `d̂` and
//! the degenerate cases that reduce the block to the frozen MLP path.

use capn::diffcore::{ParamStore, Tape, Tensor};
use capn::encoder::{TinyVit, TuneMode, VitConfig};
use capn::rng;

fn main() -> capn::Result<()> {
    for dhat in [2, 4, 16, 32, 64] {
        let cfg = VitConfig {
            width: 128,
            heads: 4,
            adapter_dim: dhat,
            ..VitConfig::default()
        };
        let mut store = ParamStore::new();
        let vit = TinyVit::new(&mut store, cfg, 64, 0)?;
        let full = vit.apply_peft(&mut store, TuneMode::Full)?.trainable_count(&store);
        let peft = vit.apply_peft(&mut store, TuneMode::Peft)?.trainable_count(&store);
        println!(
            "d̂ = {dhat:>2}: full {full:>7} trainable, peft {peft:>6} ({:.2}%)",
            100.0 * peft as f64 / full as f64
        );
    }

    let cfg = VitConfig {
        image_size: 16,
        width: 32,
        heads: 2,
        adapter_dim: 8,
        ..VitConfig::default()
    };
    let mut store = ParamStore::new();
    let vit = TinyVit::new(&mut store, cfg, 16, 1)?;
    let h = rng::normal(&mut rng::stream(1, "h", 0), &[5, 32], 1.0);
    let block = &vit.blocks[0];
    store.set_value(block.adapter.up, rng::normal(&mut rng::stream(1, "up", 0), &[8, 32], 0.5))?;
    let run = |store: &ParamStore, enabled: bool| -> capn::Result<Tensor> {
        let mut b = block.clone();
        b.adapter.enabled = enabled;
        let mut tape = Tape::no_grad();
        let hv = tape.constant(h.clone());
        let out = vit.adaptmlp_forward(&mut tape, store, hv, &b)?;
        Ok(tape.value(out).clone())
    };
    let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let plain = run(&store, false)?;
    println!("adapter active: max |Δ| = {:.3e}", diff(&run(&store, true)?, &plain));
    store.set_value(block.adapter.scale, Tensor::scalar(0.0))?;
    println!("s = 0:          max |Δ| = {:.3e}", diff(&run(&store, true)?, &plain));
    Ok(())
}
