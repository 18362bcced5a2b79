//! Entropy and self-BLEU of corpus text against uniform noise and a
//! collapsed sampler.
//!
//!     cargo run --release --example eval_metrics

use flowlm::corpus::CorpusSpec;
use flowlm::eval::{self_bleu, unigram_entropy};
use flowlm::lang_repr::TokenSequence;
use flowlm::numerics::SeededRng;

fn main() -> flowlm::Result<()> {
    let spec = CorpusSpec::MarkovGrammar { vocab_size: 32, seq_len: 24, branching: 3, seed: 2 };
    let corpus = spec.generate(&mut SeededRng::new(0), 200)?.sequences;
    let mut rng = SeededRng::new(1);
    let noise: Vec<TokenSequence> = (0..200).map(|_| TokenSequence((0..24).map(|_| rng.below(32)).collect())).collect();
    let collapsed = vec![corpus[0].clone(); 200];
    for (name, samples) in [("markov corpus", &corpus), ("uniform noise", &noise), ("collapsed", &collapsed)] {
        let b = self_bleu(samples, 4)?;
        println!("{name:<14} entropy {:.3}  self-BLEU-{} {:.3}", unigram_entropy(samples)?, b.order, b.value);
    }
    Ok(())
}
