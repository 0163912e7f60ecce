// Scratch probe for desk-scale behavior. Not part of the deliverable.

use collapse_core::corpus;
use collapse_core::dataset::EditDataset;
use collapse_core::editors::{check_edit_success, EditorConfig};
use collapse_core::gateway::{apply_delta, ModelBackend};
use collapse_core::harness::{self, RunOptions};
use collapse_core::ppl::{corpus_perplexity, PplOptions};
use collapse_core::surrogate::tasks::{evaluate_task, BinaryChoiceTask, ClozeTask};
use collapse_core::synthtext::{World, WorldConfig};
use collapse_core::tinylm::{train, TrainConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let world = World::generate(WorldConfig::default());
    let sentences = world.training_sentences();
    println!("training sentences: {}", sentences.len());
    let tc = TrainConfig {
        steps: 26000,
        ..TrainConfig::default()
    };
    let model = train("probe-lm", &sentences, &tc).unwrap();
    println!("trained in {:?} (vocab {})", t0.elapsed(), model.vocab().len());

    // Corpus.
    let dir = tempfile::tempdir().unwrap();
    world.write_standard_sources(dir.path(), 1.3).unwrap();
    let specs = corpus::standard_sources(dir.path());
    let (c50, m50) = corpus::build_corpus(&specs, corpus::Tier::Fifty, 7).unwrap();

    let base = corpus_perplexity(&model, &c50, Some(&m50), PplOptions::default()).unwrap();
    println!("baseline tier-50 ppl: {:.3} ({})", base.aggregate, base.verdict);

    // Fact recall.
    let dataset: EditDataset = world.edit_cases();
    let mut recalled = 0;
    for request in dataset.requests.iter().take(100) {
        let truth = collapse_core::dataset::EditRequest {
            target_new: request.ground_truth.clone(),
            ground_truth: request.target_new.clone(),
            ..request.clone()
        };
        if check_edit_success(&model, &truth).unwrap() {
            recalled += 1;
        }
    }
    println!("fact recall on 100 prompts: {recalled}");

    // Noise collapse.
    let mut noisy = model.clone();
    let layer = model.default_edit_layer();
    let delta = harness::gaussian_noise_delta(&noisy, &layer, 3.0, 123).unwrap();
    apply_delta(&mut noisy, &delta).unwrap();
    let noised = corpus_perplexity(&noisy, &c50, Some(&m50), PplOptions::default()).unwrap();
    println!("3x-rms noise ppl: {:.3} ({})", noised.aggregate, noised.verdict);

    // Tasks on base model.
    let cloze = ClozeTask::new(world.cloze_items(60));
    let binary = BinaryChoiceTask::new(world.binary_items(60));
    println!(
        "base cloze: {:.3}, binary: {:.3}",
        evaluate_task(&model, &cloze).unwrap().value,
        evaluate_task(&model, &binary).unwrap().value
    );
    println!(
        "noisy cloze: {:.3}, binary: {:.3}",
        evaluate_task(&noisy, &cloze).unwrap().value,
        evaluate_task(&noisy, &binary).unwrap().value
    );

    // Sweep.
    let t1 = std::time::Instant::now();
    let config = EditorConfig::rank_one(240, 1.0);
    let mut work = model.clone();
    let report = harness::single_edit_sweep(
        &dataset,
        &config,
        &mut work,
        &c50,
        Some(&m50),
        None,
        RunOptions::default(),
    )
    .unwrap();
    let mut ppls: Vec<f64> = report.cases.iter().filter_map(|c| c.aggregate).collect();
    ppls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ppls[ppls.len() / 2];
    let max = *ppls.last().unwrap();
    let successes = report.cases.iter().filter(|c| c.success).count();
    println!(
        "sweep: {} cases in {:?}, successes {successes}, hard {}, median {median:.2}, max {max:.2}, max/median {:.1}",
        report.cases.len(),
        t1.elapsed(),
        report.hard_cases.len(),
        max / median
    );
    let q90 = ppls[ppls.len() * 9 / 10];
    let q99 = ppls[ppls.len() * 99 / 100];
    println!("p50 {median:.2} p90 {q90:.2} p99 {q99:.2}");
    let mut fros: Vec<f64> = report
        .cases
        .iter()
        .filter_map(|c| c.deltas.first().map(|d| d.frobenius))
        .collect();
    fros.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "delta fro: p50 {:.2} p90 {:.2} max {:.2}",
        fros[fros.len() / 2],
        fros[fros.len() * 9 / 10],
        fros.last().unwrap()
    );
}
