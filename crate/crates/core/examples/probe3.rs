// Fact-load vs noise-sensitivity probe. Not part of the deliverable.

use collapse_core::corpus;
use collapse_core::gateway::{apply_delta, ModelBackend};
use collapse_core::harness::{self, layer_rms};
use collapse_core::ppl::{corpus_perplexity, PplOptions};
use collapse_core::synthtext::{World, WorldConfig};
use collapse_core::tinylm::{train, TrainConfig};

fn main() {
    let combos = [(240usize, 8000usize), (240, 16000)];
    for (entities, steps) in combos {
        let world = World::generate(WorldConfig {
            entities,
            ..WorldConfig::default()
        });
        let sentences = world.training_sentences();
        let dir = tempfile::tempdir().unwrap();
        world.write_standard_sources(dir.path(), 1.3).unwrap();
        let specs = corpus::standard_sources(dir.path());
        let (c50, _) = corpus::build_corpus(&specs, corpus::Tier::Fifty, 7).unwrap();

        let tc = TrainConfig {
            steps,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let model = train("probe3", &sentences, &tc).unwrap();
        let base = corpus_perplexity(&model, &c50, None, PplOptions::default()).unwrap();
        let layer = "blocks.0.mlp.up_proj".to_string();
        let rms = layer_rms(&model.layer_matrix(&layer).unwrap());
        print!(
            "entities={entities} facts={} steps={steps} vocab={} train={:?} rms={rms:.4} base={:.2} |",
            world.facts.len(),
            model.vocab().len(),
            t0.elapsed(),
            base.aggregate
        );
        for mult in [1.0, 3.0] {
            let mut noisy = model.clone();
            let delta = harness::gaussian_noise_delta(&noisy, &layer, mult, 123).unwrap();
            apply_delta(&mut noisy, &delta).unwrap();
            let p = corpus_perplexity(&noisy, &c50, None, PplOptions::default()).unwrap();
            print!(" {mult}x->{:.1}", p.aggregate);
        }
        println!();
    }
}
