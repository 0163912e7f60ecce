// Training-config grid for the 3x-noise collapse cliff. Not a deliverable.

use collapse_core::corpus;
use collapse_core::gateway::{apply_delta, ModelBackend};
use collapse_core::harness::{self, layer_rms};
use collapse_core::ppl::{corpus_perplexity, PplOptions};
use collapse_core::synthtext::{World, WorldConfig};
use collapse_core::tinylm::{train, TrainConfig};

fn main() {
    let grid = [
        ("cliff-e50 s26k", 10, 18, 3e-3, 26000, true),
        ("cliff-e50 s30k", 10, 18, 3e-3, 30000, true),
    ];
    for (name, rmin, rmax, lr, steps, final_ln) in grid {
        let world = World::generate(WorldConfig {
            min_fact_repeats: rmin,
            max_fact_repeats: rmax,
            ..WorldConfig::default()
        });
        let sentences = world.training_sentences();
        let dir = tempfile::tempdir().unwrap();
        world.write_standard_sources(dir.path(), 1.3).unwrap();
        let specs = corpus::standard_sources(dir.path());
        let (c50, _) = corpus::build_corpus(&specs, corpus::Tier::Fifty, 7).unwrap();

        let tc = TrainConfig {
            steps,
            lr,
            final_ln,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let model = train("p4", &sentences, &tc).unwrap();
        let base = corpus_perplexity(&model, &c50, None, PplOptions::default()).unwrap();
        let layer = model.default_edit_layer();
        let rms = layer_rms(&model.layer_matrix(&layer).unwrap());
        print!(
            "{name}: train={:?} rms={rms:.3} base={:.2} |",
            t0.elapsed(),
            base.aggregate
        );
        for mult in [3.0] {
            for seed in [123u64, 7, 99, 2024, 5] {
                let mut noisy = model.clone();
                let delta = harness::gaussian_noise_delta(&noisy, &layer, mult, seed).unwrap();
                apply_delta(&mut noisy, &delta).unwrap();
                let p = corpus_perplexity(&noisy, &c50, None, PplOptions::default()).unwrap();
                print!(" {mult}x/{seed}->{:.0}", p.aggregate);
            }
        }
        println!();
    }
}
