use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use promptloop::backends::{Generator, GenerationRequest, SimBackends, SimWorldConfig};
use promptloop::cli::SimLatentsFile;
use promptloop::ImagePayload;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptloop"))
        .args(args)
        .current_dir(cwd)
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_golden_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(
        &["run", "--backend", "sim", "--prompt", "castle snow waterfall", "--seed", "7", "--out", "out"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "outcome=Converged iters=1 max_sim=1.0000\n");

    let mut names: Vec<String> = fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["config.json", "iter00", "sim_world.json", "summary.json", "trace.jsonl"]);
    // Nothing else appears in the working directory.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn run_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["run", "--backend", "sim"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no prompt"));

    let o = bin(&["run", "--prompt", "castle", "--threshold", "1.5", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("threshold"));

    let o = bin(&["run", "--prompt", "castle", "--batch", "0", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = bin(&["run", "--prompt", "castle", "--backend", "dalle"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "prompt = \"castle\"\nbatchsize = 4\n").unwrap();
    let o = bin(&["run", "--config", "bad.toml", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));

    // http backend without any endpoint block
    let o = bin(&["run", "--prompt", "castle", "--backend", "http", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn run_runtime_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["run", "--prompt", "the of and", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no keywords"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "prompt = \"castle snow\"\nbatch_size = 2\nmax_iterations = 3\nout_dir = \"from-config\"\n",
    )
    .unwrap();
    let o = bin(&["run", "--config", "c.toml", "--batch", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("from-config/trace.jsonl")).unwrap();
    assert!(trace.contains("\"iter00/img02.png\"") && !trace.contains("img03"));
    let config = fs::read_to_string(dir.path().join("from-config/config.json")).unwrap();
    assert!(config.contains("\"batch_size\": 3") && config.contains("\"max_iterations\": 3"));
}

#[test]
fn parse_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["parse", "(cars:1.1), neon"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "normalized: (cars:1.1), neon\nast: [Weighted([Text(\"cars\")], 1.1), Text(\", neon\")]\ncars=1.1\nneon=1.0\n"
    );

    let o = bin(&["parse", "castle"], dir.path());
    assert!(stdout(&o).ends_with("\ncastle=1.0\n"));

    let o = bin(&["parse", "[snowy] ((forest))"], dir.path());
    assert!(stdout(&o).contains("snowy=0.9091\nforest=1.21\n"), "{}", stdout(&o));

    let o = bin(&["parse", "((a)"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o), "error: UnbalancedDelimiter at byte 4\n  ((a)\n      ^\n");

    let o = bin(&["parse", "(a:1.2.3)"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

fn write_latents(dir: &Path) -> std::path::PathBuf {
    let sims = SimBackends::new(SimWorldConfig::default()).unwrap();
    let images = sims
        .generator
        .generate(&GenerationRequest {
            prompt: "(castle:1.1), (snow:1.1), waterfall, (forest:1.1)".into(),
            negative_prompt: String::new(),
            batch_size: 3,
            seed: 1,
            iteration: 0,
        })
        .unwrap();
    // Register every keyword the score command will see.
    sims.world.direction("waterfall castle snow forest dragon").unwrap();
    let file = SimLatentsFile {
        world: Some(sims.world.state()),
        latents: images
            .into_iter()
            .map(|i| match i.payload {
                ImagePayload::Latent(l) => l,
                other => panic!("unexpected payload {other:?}"),
            })
            .collect(),
    };
    let path = dir.join("latents.json");
    fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    path
}

#[test]
fn score_latents_file() {
    let dir = tempfile::tempdir().unwrap();
    write_latents(dir.path());
    fs::write(dir.path().join("kw.txt"), "castle\nsnow\n\nforest\ndragon\n").unwrap();
    let o = bin(
        &["score", "--images", "latents.json", "--keywords", "kw.txt", "--threshold", "0.2", "--format", "csv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = promptloop::report::parse_csv(&stdout(&o)).unwrap();
    let keyword_rows: Vec<_> = rows.iter().filter(|r| r.passed.is_some()).collect();
    assert_eq!(keyword_rows.len(), 4);
    // castle, snow and forest are in every image; dragon never is.
    let dragon = keyword_rows.iter().find(|r| r.keyword == "dragon").unwrap();
    assert_eq!((dragon.aggregated, dragon.passed), (0.0, Some(false)));
    assert!(keyword_rows.iter().filter(|r| r.keyword != "dragon").all(|r| r.passed == Some(true)));
}

#[test]
fn score_threshold_marks_failing_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_latents(dir.path());
    fs::write(dir.path().join("kw.txt"), "castle\ndragon\n").unwrap();
    let o = bin(&["score", "--images", "latents.json", "--keywords", "kw.txt"], dir.path());
    let md = stdout(&o);
    assert!(md.contains("| dragon | 0.0000* |"), "{md}");
    assert!(md.contains("| castle | 0.5") && !md.contains("| castle | 0.5000*"), "{md}");
}

#[test]
fn score_empty_keywords_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_latents(dir.path());
    fs::write(dir.path().join("kw.txt"), "\n  \n").unwrap();
    let o = bin(&["score", "--images", "latents.json", "--keywords", "kw.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn score_rescores_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["run", "--prompt", "castle snow waterfall", "--seed", "7", "--out", "run"], dir.path());
    assert!(o.status.success());
    fs::write(dir.path().join("kw.txt"), "castle\nsnow\nwaterfall\n").unwrap();
    let o = bin(
        &["score", "--images", "run/iter00", "--keywords", "kw.txt", "--format", "csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let scored = promptloop::report::parse_csv(&stdout(&o)).unwrap();
    let traced = promptloop::trace::read_trace_lines(&dir.path().join("run")).unwrap();
    for kr in &traced[0].keyword_scores {
        let row = scored.iter().find(|r| r.keyword == kr.phrase).unwrap();
        assert_eq!(row.aggregated, promptloop::report::round4(kr.aggregated.value()));
    }
}

#[test]
fn report_golden() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cabin");
    let o = bin(
        &["report", "baseline=baseline", "refined=refined", "--format", "term"],
        &fixtures,
    );
    assert!(o.status.success());
    let expected = "\
Keyword              baseline   refined
Cozy, rustic cabin     0.1483*    0.3716
Snowy forest           0.3934     0.4124
Twilight               0.2260     0.2153
Chimney                0.0959*    0.2378
Glowing windows        0.1930*    0.2868
Snow-covered path      0.4002     0.3494
Tall pine trees        0.3796     0.3798
Snow-laden branches    0.2834     0.3487

Sentence 1             0.4103     0.4972
Sentence 2             0.1644     0.3608
Sentence 3             0.3870     0.4157
Sentence 4             0.4415     0.3375
Overall                0.3820     0.4894
";
    assert_eq!(stdout(&o), expected);

    let o = bin(&["report", "missing-dir"], &fixtures);
    assert_eq!(o.status.code(), Some(1));
}
