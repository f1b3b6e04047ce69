//! The full loop on the simulated backends: a keyword the generator can
//! never draw is re-weighted, then generalized into something it can.
//!
//! The extractor is swapped for one that returns a canned completion, the
//! way a chat model would answer, so keywords are phrases rather than tokens.

use std::collections::BTreeSet;

use promptloop::adapters::chat::parse_keyword_completion;
use promptloop::backends::{BackendError, Backends, Extractor, SimBackends, SimWorldConfig};
use promptloop::pipeline;
use promptloop::{KeywordSet, PolicyAction, Prompt, RunConfig};

struct Canned(&'static str);

impl Extractor for Canned {
    fn extract_keywords(&self, _: &Prompt) -> Result<KeywordSet, BackendError> {
        parse_keyword_completion(self.0)
    }
}

fn main() {
    let sims = SimBackends::new(SimWorldConfig {
        excluded_tokens: BTreeSet::from(["unicorn".to_string()]),
        ..Default::default()
    })
    .unwrap();
    let extractor = Canned("Old castle, Falling snow, Unicorn horn");
    let backends = Backends { extractor: &extractor, ..sims.backends() };
    let prompt = Prompt::new("An old castle on a hill. Snow falls; a unicorn horn glints.").unwrap();
    let config = RunConfig { batch_size: 8, seed: 3, ..Default::default() };

    let trace = pipeline::run(&prompt, &config, backends).unwrap();
    for r in &trace.records {
        println!("iteration {} (seed {}): {}", r.iteration, r.seed, r.rendered_prompt);
        for k in &r.report.keyword_results {
            println!("    {:14} {:.4}{}", k.phrase, k.aggregated.value(), if k.passed { "" } else { " *" });
        }
        match &r.policy_action {
            PolicyAction::None => {}
            PolicyAction::Reweight { phrases } => println!("  -> reweight {phrases:?}"),
            PolicyAction::Generalize { replacements, reweighted } => {
                for rep in replacements {
                    println!("  -> generalize {:?} to {:?}", rep.from, rep.to);
                }
                if !reweighted.is_empty() {
                    println!("  -> reweight {reweighted:?}");
                }
            }
        }
    }
    println!(
        "outcome={} iters={} max_sim={:.4}",
        trace.outcome.short_name(),
        trace.records.len(),
        trace.final_max_similarity.value()
    );
}
