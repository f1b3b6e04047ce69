//! Keyword extraction and generalization without any model: the token
//! extractor used by the simulated world, the parser for chat-model
//! completions, and the refiner's fallback rule.

use promptloop::adapters::chat::{parse_generalization, parse_keyword_completion};
use promptloop::backends::{is_stop_word, Extractor, SimExtractor, SimRefiner};
use promptloop::scoring::split_sentences;
use promptloop::Prompt;

fn main() {
    let text = "A cozy cabin sits in the snowy forest. Smoke curls from the chimney at twilight.";
    let prompt = Prompt::new(text).unwrap();

    println!("sentences:");
    for s in split_sentences(text) {
        println!("  {s}");
    }

    let tokens = SimExtractor.extract_keywords(&prompt).unwrap();
    println!("token keywords: {}", tokens.phrases().join(", "));
    for word in ["the", "at", "cabin"] {
        println!("  stop word {word:?}: {}", is_stop_word(word));
    }

    let completion = "Keywords:\n1. Cozy cabin\n2. Snowy forest\n3. Chimney smoke\n4. cozy cabin\n5. Twilight";
    let phrases = parse_keyword_completion(completion).unwrap();
    println!("from a chat completion: {}", phrases.phrases().join(" | "));

    let refiner = SimRefiner::default();
    for phrase in ["unicorn horn", "snow-laden branches", "fox"] {
        println!("generalize {phrase:?} -> {:?}", refiner.generalize(phrase));
    }
    println!(
        "chat answer parsed: {:?}",
        parse_generalization("\"glowing lantern\"\n", "glowing brass lantern").unwrap()
    );
}
