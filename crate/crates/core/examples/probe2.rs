// Noise-sensitivity probe across architectures. Not part of the deliverable.

use collapse_core::corpus;
use collapse_core::gateway::{apply_delta, ModelBackend};
use collapse_core::harness;
use collapse_core::ppl::{corpus_perplexity, PplOptions};
use collapse_core::synthtext::{World, WorldConfig};
use collapse_core::tinylm::{train, TrainConfig};

fn main() {
    let world = World::generate(WorldConfig::default());
    let sentences = world.training_sentences();
    let dir = tempfile::tempdir().unwrap();
    world.write_standard_sources(dir.path(), 1.3).unwrap();
    let specs = corpus::standard_sources(dir.path());
    let (c50, _) = corpus::build_corpus(&specs, corpus::Tier::Fifty, 7).unwrap();

    let configs = [
        ("d48-f192-b2-s2500", TrainConfig { dim: 48, hidden: 192, blocks: 2, steps: 2500, ..TrainConfig::default() }),
        ("d48-f192-b2-s8000", TrainConfig { dim: 48, hidden: 192, blocks: 2, steps: 8000, ..TrainConfig::default() }),
        ("d64-f256-b4-s4000", TrainConfig { dim: 64, hidden: 256, blocks: 4, steps: 4000, ..TrainConfig::default() }),
    ];
    for (name, tc) in configs {
        let t0 = std::time::Instant::now();
        let model = train(name, &sentences, &tc).unwrap();
        let base = corpus_perplexity(&model, &c50, None, PplOptions::default()).unwrap();
        print!("{name}: trained {:?} base {:.2} | noise:", t0.elapsed(), base.aggregate);
        let layer = model.default_edit_layer();
        for mult in [3.0, 10.0, 30.0] {
            let mut noisy = model.clone();
            let delta = harness::gaussian_noise_delta(&noisy, &layer, mult, 123).unwrap();
            apply_delta(&mut noisy, &delta).unwrap();
            let p = corpus_perplexity(&noisy, &c50, None, PplOptions::default()).unwrap();
            print!(" {mult}x->{:.1}", p.aggregate);
        }
        // Also probe the last block's down_proj at 3x.
        let last = format!("blocks.{}.mlp.down_proj", tc.blocks - 1);
        let mut noisy = model.clone();
        let delta = harness::gaussian_noise_delta(&noisy, &last, 3.0, 123).unwrap();
        apply_delta(&mut noisy, &delta).unwrap();
        let p = corpus_perplexity(&noisy, &c50, None, PplOptions::default()).unwrap();
        println!(" | last-block 3x->{:.1}", p.aggregate);
    }
}
