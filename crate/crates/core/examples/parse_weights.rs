//! Attention-weight syntax: parse, normalize, render, and compose prompts
//! from weighted keywords.

use promptloop::dsl::{self, ParseError};
use promptloop::KeywordSet;

fn main() {
    for text in ["(cars:1.1), neon", "[snowy] ((forest)), castle", "a \\(literal\\) paren"] {
        let ast = dsl::parse(text).expect("valid prompt");
        println!("{text}");
        println!("  tree:       {ast}");
        println!("  normalized: {}", dsl::render(&ast));
        for (phrase, w) in ast.phrase_weights() {
            println!("  {phrase} = {}", dsl::format_weight(w));
        }
    }

    for bad in ["((a)", "(a:0)", "a)"] {
        let err: ParseError = dsl::parse(bad).unwrap_err();
        println!("{bad:8} -> {err}");
    }

    let keywords = KeywordSet::from_phrases(["street vendors", "cars", "advertisements"]).unwrap();
    let keywords = dsl::set_weight(&keywords, "Cars", 1.1, 1.5).unwrap();
    println!("composed: {}", dsl::compose_prompt(&keywords));
    println!("over cap: {}", dsl::set_weight(&keywords, "cars", 1.6, 1.5).unwrap_err());
}
