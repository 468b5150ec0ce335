use dp_pretrain::data::{apply_masking, Corpus, CorpusSpec};
use dp_pretrain::model::*;
use dp_pretrain::rng::{Purpose, RngStream};
use std::time::Instant;

fn bench(label: &str, cfg: &ModelConfig) {
    let spec = CorpusSpec {
        num_examples: 64, seq_len: cfg.seq_len, vocab_size: cfg.vocab_size,
        seed: 1, concentration: 8.0,
    };
    let corpus = Corpus::generate(&spec).unwrap();
    let stream = RngStream::new(2);
    let exs: Vec<_> = (0..64)
        .map(|i| apply_masking(corpus.sequence(i), 0.15, stream.key(0, i as u64, Purpose::Mask)).unwrap())
        .collect();
    let params = init_parameters::<f32>(cfg, 3).unwrap();
    // warmup
    for ex in exs.iter().take(8) { per_example_gradient(&params, cfg, ex).unwrap(); }
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 2.0 {
        per_example_gradient(&params, cfg, &exs[n % 64]).unwrap();
        n += 1;
    }
    let grad_us = t0.elapsed().as_secs_f64() / n as f64 * 1e6;
    let t1 = Instant::now();
    let mut m = 0;
    while t1.elapsed().as_secs_f64() < 1.0 {
        forward_loss(&params, cfg, &exs[m % 64]).unwrap();
        m += 1;
    }
    let fwd_us = t1.elapsed().as_secs_f64() / m as f64 * 1e6;
    println!("{label}: grad {grad_us:.0} us/ex, fwd {fwd_us:.0} us/ex");
}

fn main() {
    bench("default V=512 L=32 d=64 b=2 ff=256", &ModelConfig::default());
    bench("small   V=128 L=16 d=32 b=1 ff=128", &ModelConfig {
        vocab_size: 128, seq_len: 16, width: 32, blocks: 1, heads: 4,
        ff_width: 128, ln_eps: 1e-12, init_std: 0.02,
    });
    bench("mid     V=512 L=24 d=48 b=1 ff=192", &ModelConfig {
        vocab_size: 512, seq_len: 24, width: 48, blocks: 1, heads: 4,
        ff_width: 192, ln_eps: 1e-12, init_std: 0.02,
    });
}
