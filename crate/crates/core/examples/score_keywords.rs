//! Cosine scoring, batch aggregation and the threshold gate.

use promptloop::backends::{BackendError, Scorer};
use promptloop::scoring::{cosine, evaluate};
use promptloop::{Aggregation, Embedding, ImageRef, KeywordSet, RunConfig};

fn e(v: &[f64]) -> Embedding {
    Embedding::new(v.to_vec()).unwrap()
}

/// Toy text encoder over three axes: castle, snow, dragon.
struct Axes;

impl Scorer for Axes {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        Ok(texts
            .iter()
            .map(|t| {
                let has = |w: &str| if t.to_lowercase().contains(w) { 1.0 } else { 0.0 };
                e(&[has("castle"), has("snow"), has("dragon"), 0.05])
            })
            .collect())
    }

    fn embed_image(&self, _: &[ImageRef]) -> Result<Vec<Embedding>, BackendError> {
        unimplemented!("images arrive pre-embedded here")
    }
}

fn main() {
    println!("cos([1,2,3],[4,5,6]) = {:.9}", cosine(&e(&[1., 2., 3.]), &e(&[4., 5., 6.])).unwrap().value());

    // Two images: a castle in snow, and a snowfield.
    let images = [e(&[0.9, 0.4, 0.0, 0.1]), e(&[0.0, 1.0, 0.1, 0.1])];
    let keywords = KeywordSet::from_phrases(["castle", "snow", "dragon"]).unwrap();
    let prompt = "A castle in the snow. A dragon circles overhead.";
    let sentences = promptloop::scoring::split_sentences(prompt);

    for aggregation in [Aggregation::MaxOverBatch, Aggregation::MeanOverBatch] {
        let config = RunConfig { aggregation, ..Default::default() };
        let report = evaluate(&images, &keywords, &sentences, prompt, &Axes, &config).unwrap();
        println!("\n{aggregation:?} (threshold {}):", config.threshold);
        for k in &report.keyword_results {
            let scores: Vec<String> = k.per_image_scores.iter().map(|s| format!("{:.3}", s.value())).collect();
            println!("  {:8} {:?} -> {:.4} {}", k.phrase, scores, k.aggregated.value(), if k.passed { "pass" } else { "FAIL" });
        }
        for s in &report.sentence_results {
            println!("  sentence {:?}: {:.4}", s.sentence, s.aggregated.value());
        }
        println!("  overall {:.4}, all passed: {}", report.overall.value(), report.all_passed);
    }
}
