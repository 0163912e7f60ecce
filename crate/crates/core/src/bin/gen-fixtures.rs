//! Generates a complete demo fixture set: raw text sources, tiered corpora,
//! a trained model artifact, edit datasets in both record formats, task
//! fixtures, and a replayable chat fixture for offline hard-case generation.
//!
//! Usage: gen-fixtures [--out DIR] [--seed N] [--steps N]

use std::path::PathBuf;

use collapse_core::corpus;
use collapse_core::synthtext::{save_rewrite_style, World, WorldConfig};
use collapse_core::tinylm::{train, TrainConfig};

fn main() {
    let mut out = PathBuf::from("fixtures-out");
    let mut seed = 0u64;
    let mut steps = 2500usize;
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--out" => out = PathBuf::from(args.next().expect("--out needs a value")),
            "--seed" => seed = args.next().expect("--seed needs a value").parse().unwrap(),
            "--steps" => steps = args.next().expect("--steps needs a value").parse().unwrap(),
            other => {
                eprintln!("unknown argument {other:?}");
                std::process::exit(2);
            }
        }
    }
    std::fs::create_dir_all(&out).expect("create output directory");

    let world = World::generate(WorldConfig {
        seed,
        ..WorldConfig::default()
    });

    // Raw sources + a sources manifest for build-corpus.
    let sources_dir = out.join("sources");
    world
        .write_standard_sources(&sources_dir, 1.3)
        .expect("write sources");
    let specs = corpus::standard_sources(&sources_dir);
    std::fs::write(
        out.join("sources.json"),
        serde_json::to_string_pretty(&specs).unwrap(),
    )
    .expect("write sources manifest");

    // Prebuilt 50 and 1k tier corpora.
    for (tier, name) in [(corpus::Tier::Fifty, "corpus_50"), (corpus::Tier::OneK, "corpus_1k")] {
        let (built, manifest) = corpus::build_corpus(&specs, tier, seed).expect("build corpus");
        corpus::save_corpus(&built, &manifest, &out.join(format!("{name}.jsonl")))
            .expect("save corpus");
    }

    // Edit datasets in both record formats.
    let dataset = world.edit_cases();
    collapse_core::dataset::save_dataset(&dataset, &out.join("cases.json")).expect("save cases");
    save_rewrite_style(&dataset, &out.join("cases_rewrite.json")).expect("save rewrite cases");

    // Task fixtures.
    std::fs::write(
        out.join("cloze.json"),
        serde_json::to_string_pretty(&world.cloze_items(60)).unwrap(),
    )
    .unwrap();
    std::fs::write(
        out.join("binary.json"),
        serde_json::to_string_pretty(&world.binary_items(60)).unwrap(),
    )
    .unwrap();

    // Replay fixture for generate-hard: one response of ten candidates built
    // from held-back facts, wrapped in a code fence like a real reply.
    let replay_candidates: Vec<serde_json::Value> = dataset
        .requests
        .iter()
        .rev()
        .take(10)
        .map(|r| {
            serde_json::json!({
                "prompt": r.prompt,
                "target_new": r.target_new,
                "subject": r.subject,
                "ground_truth": r.ground_truth,
            })
        })
        .collect();
    let response = format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(&replay_candidates).unwrap()
    );
    std::fs::write(
        out.join("chat_replay.json"),
        serde_json::to_string_pretty(&vec![response]).unwrap(),
    )
    .unwrap();

    // Train the demo model on the world's text.
    eprintln!("training demo model ({steps} steps)...");
    let sentences = world.training_sentences();
    let train_config = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let model = train("tinylm-demo", &sentences, &train_config).expect("training");
    model.save(&out.join("model.json")).expect("save model");

    println!("fixtures written to {}", out.display());
    println!("  sources/           raw per-source text files");
    println!("  sources.json       source manifest for build-corpus");
    println!("  corpus_50.jsonl    prebuilt 50-sentence tier");
    println!("  corpus_1k.jsonl    prebuilt 1000-sentence tier");
    println!("  cases.json         edit cases (flat records)");
    println!("  cases_rewrite.json edit cases (rewrite-style records)");
    println!("  cloze.json         cloze task fixture");
    println!("  binary.json        binary-choice task fixture");
    println!("  chat_replay.json   offline chat fixture for generate-hard");
    println!("  model.json         trained model artifact (tinylm:<path>)");
}
