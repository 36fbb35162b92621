//! Soft prompts through the frozen stand-in text encoder.

use capn::diffcore::{ParamStore, Tape};
use capn::prompts::{encode_classes, init_prompts, prior_embeddings, PromptInit, TextEncoder};

fn main() -> capn::Result<()> {
    let (classes, length, token_dim, dim) = (5, 4, 16, 32);
    for init in [PromptInit::Template, PromptInit::Random] {
        let mut store = ParamStore::new();
        let bank = init_prompts(&mut store, classes, length, token_dim, init, 0)?;
        let enc = TextEncoder::toy(&mut store, token_dim, dim, 7);
        let mut tape = Tape::no_grad();
        let ft = encode_classes(&mut tape, &store, &bank, &enc)?;
        let ft = tape.value(ft).clone();
        let prior = prior_embeddings(&store, &bank, &enc)?;
        println!("{init:?}: F_t is {:?}, prior Z is {:?}", ft.shape(), prior.shape());
        // similarity is taken between columns
        let sim = ft.transpose()?.cosine_similarity_matrix()?;
        for r in 0..classes {
            let row: Vec<String> = sim.row(r).iter().map(|v| format!("{v:+.2}")).collect();
            println!("  {}", row.join(" "));
        }
        println!(
            "  trainable {} frozen {}",
            store.trainable_count(),
            store.frozen_count()
        );
    }
    Ok(())
}
