//! Persist two runs of the same scene, read them back, and compare them in
//! all three report formats.

use promptloop::backends::{SimBackends, SimWorldConfig};
use promptloop::pipeline;
use promptloop::report::{build_report, render_csv, render_markdown, render_terminal, RunColumn};
use promptloop::trace::{load_trace, persist_trace, read_trace_lines};
use promptloop::{Aggregation, Prompt, RunConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = Prompt::new(
        "A cozy cabin in a snowy forest. Smoke rises from the chimney. Pine trees line the path.",
    )
    .unwrap();
    let world = SimWorldConfig { noise_sigma: 0.05, ..Default::default() };

    let mut columns = Vec::new();
    for (label, max_iterations) in [("baseline", 1), ("refined", 6)] {
        let sims = SimBackends::new(world.clone()).unwrap();
        let config = RunConfig {
            batch_size: 4,
            max_iterations,
            aggregation: Aggregation::MeanOverBatch,
            ..Default::default()
        };
        let trace = pipeline::run(&prompt, &config, sims.backends()).unwrap();
        let out = dir.path().join(label);
        persist_trace(&trace, &out).unwrap();

        let back = load_trace(&out).unwrap();
        println!("{label}: {} iterations, outcome {:?}", back.records.len(), back.outcome);
        columns.push(RunColumn::from_trace(label, &read_trace_lines(&out).unwrap()).unwrap());
    }

    let tables = build_report(&columns);
    println!("\n{}", render_terminal(&tables, false));
    println!("{}", render_markdown(&tables));
    print!("{}", render_csv(&tables));
}
