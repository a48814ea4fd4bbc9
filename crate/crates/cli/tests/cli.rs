#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, Stdio};

use hexplain::engine::load_builtin;
use hexplain::kgstate::Plurality;
use hexplain::policy::Policy;
use hexplain::temporal::parse_json_lines;
use hexplain::temporal::parse_report;
use hexplain::trajstore::{deserialize, serialize, validate};
use hexplain_cli::config::{Manifest, RunConfig, SeedSource};
use hexplain_cli::{run, Io};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: [&str; 8] = ["--set", "d_text=8", "--set", "d_emb=6", "--set", "d_sub=4", "--set", "heads=2"];

struct Output {
    code: i32,
    out: String,
    err: String,
}

/// Runs the CLI in-process.
fn cli(args: &[&str], env_seed: Option<&str>, stdin: &str) -> Output {
    let mut input = stdin.as_bytes();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut io = Io {
        input: &mut input,
        out: &mut out,
        err: &mut err,
    };
    let argv = std::iter::once("hexplain").chain(args.iter().copied());
    let code = run(argv, env_seed, &mut io);
    Output {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_small(dir: &Path, game: &str, steps: &str, seed: &str) -> Output {
    let mut args = vec!["train", "--game", game, "--steps", steps, "--seed", seed, "--out", p(dir)];
    args.extend(SMALL);
    cli(&args, None, "")
}

#[test]
fn zero_steps_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let r = train_small(dir.path(), "eggtree", "0", "5");
    assert_eq!(r.code, 0, "{}", r.err);
    let bytes = std::fs::read(dir.path().join("checkpoint.ckpt")).unwrap();
    let (policy, extra) = Policy::from_checkpoint(&bytes).unwrap();
    let m = Manifest::read(&dir.path().join("manifest.json")).unwrap();
    let init = Policy::new(&load_builtin("eggtree").unwrap(), m.config.train.policy.clone(), 5);
    assert_eq!(policy.store, init.store);
    assert_eq!(extra["seed"], 5);
    assert_eq!(extra["game"]["id"], "eggtree");
    assert_eq!(std::fs::read_to_string(dir.path().join("curve.csv")).unwrap().lines().count(), 1);
}

#[test]
fn manifests_reproduce_runs_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let r = train_small(&a, "eggtree", "1500", "7");
    assert_eq!(r.code, 0, "{}", r.err);
    let m = Manifest::read(&a.join("manifest.json")).unwrap();
    assert_eq!((m.seed, m.seed_source, m.config.train.seed), (7, SeedSource::Flag, 7));
    assert_eq!(m.config.train.total_steps, 1500);
    assert_eq!(m.config.train.policy.d_text, 8);
    assert_eq!(m.game.as_ref().unwrap().id, "eggtree");

    let r = cli(&["train", "--manifest", p(&a.join("manifest.json")), "--out", p(&b)], None, "");
    assert_eq!(r.code, 0, "{}", r.err);
    let curve_a = std::fs::read(a.join("curve.csv")).unwrap();
    assert!(String::from_utf8_lossy(&curve_a).lines().count() > 1);
    assert_eq!(curve_a, std::fs::read(b.join("curve.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(b.join("checkpoint.ckpt")).unwrap()
    );
    let m2 = Manifest::read(&b.join("manifest.json")).unwrap();
    assert_eq!(m2.config, m.config);
    assert_eq!(m2.outputs["curve_sha256"], m.outputs["curve_sha256"]);
    assert_eq!(m2.seed_source, SeedSource::Manifest);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--game", "eggtree", "--steps", "200", "--out", p(dir.path())];
    args.extend(SMALL);
    args.extend(["--set", "checkpoint_every=100"]);
    let r = cli(&args, None, "");
    assert_eq!(r.code, 0, "{}", r.err);
    for step in ["00000100", "00000200"] {
        let path = dir.path().join("checkpoints").join(format!("step-{step}.ckpt"));
        assert!(Policy::from_checkpoint(&std::fs::read(&path).unwrap()).is_ok(), "{path:?}");
    }
}

#[test]
fn config_files_and_overrides_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "[train]\ngamma = 0.8\nd_text = 8\n[explain]\np = 0.6\n").unwrap();
    let out = dir.path().join("r");
    let args = [
        "train", "--game", "eggtree", "--steps", "0", "--config", p(&cfg), "--set", "gamma=0.7", "--out", p(&out),
    ];
    let r = cli(&args, Some("21"), "");
    assert_eq!(r.code, 0, "{}", r.err);
    let m = Manifest::read(&out.join("manifest.json")).unwrap();
    let mut expected = RunConfig {
        seed: 21,
        ..RunConfig::default()
    };
    expected.train.seed = 21;
    expected.train.gamma = 0.7;
    expected.train.total_steps = 0;
    expected.train.policy.d_text = 8;
    expected.explain.p = 0.6;
    assert_eq!(m.config, expected);
    assert_eq!(m.seed_source, SeedSource::Env);
    assert_eq!(m.argv[0], "train");

    for bad in [["--set", "warp=9"], ["--set", "gamma=2"], ["--set", "gamma"]] {
        let mut args = vec!["train", "--game", "eggtree", "--steps", "0", "--out", p(&out)];
        args.extend(bad);
        let r = cli(&args, None, "");
        assert_eq!(r.code, 2, "{bad:?}");
    }
    assert_eq!(cli(&["train", "--game", "eggtree", "--out", p(&out)], Some("x"), "").code, 2);
}

#[test]
fn missing_inputs_exit_2_naming_the_path() {
    let r = cli(&["train", "--game", "no/such.game"], None, "");
    assert_eq!(r.code, 2);
    assert!(r.err.contains("no/such.game"), "{}", r.err);
    let r = cli(&["rollout", "--checkpoint", "no/such.ckpt"], None, "");
    assert_eq!(r.code, 2);
    assert!(r.err.contains("no/such.ckpt"));
    let r = cli(&["eval", "--checkpoint", "no/such.ckpt"], None, "");
    assert_eq!(r.code, 2);
    let r = cli(&["explain", "--corpus", "no/such.traj"], None, "");
    assert_eq!(r.code, 2);
    let r = cli(&["train", "--config", "no/such.cfg", "--game", "eggtree"], None, "");
    assert_eq!(r.code, 2);
    assert!(r.err.contains("no/such.cfg"));
    assert_eq!(cli(&["frobnicate"], None, "").code, 2);
    assert_eq!(cli(&["train"], None, "").code, 2);
}

#[test]
fn divergence_exits_3_with_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--game", "eggtree", "--steps", "200", "--out", p(dir.path())];
    args.extend(SMALL);
    args.extend(["--set", "learning_rate=1e300"]);
    let r = cli(&args, None, "");
    assert_eq!(r.code, 3, "{}", r.err);
    assert!(r.err.contains("diverged"));
    let report = std::fs::read_to_string(dir.path().join("divergence.json")).unwrap();
    assert!(serde_json::from_str::<serde_json::Value>(&report).is_ok());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn rollouts_are_reproducible_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    assert_eq!(train_small(&run_dir, "lanternquest", "0", "1").code, 0);
    let ckpt = run_dir.join("checkpoint.ckpt");
    let (a, b) = (dir.path().join("a.traj"), dir.path().join("b.traj"));
    for out in [&a, &b] {
        let r = cli(&["rollout", "--checkpoint", p(&ckpt), "--n", "1", "--seed", "0", "--out", p(out)], None, "");
        assert_eq!(r.code, 0, "{}", r.err);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // Default corpus size, kept quick with short episodes.
    let c = dir.path().join("c.traj");
    let r = cli(&["rollout", "--checkpoint", p(&ckpt), "--set", "max_steps=4", "--out", p(&c)], Some("3"), "");
    assert_eq!(r.code, 0, "{}", r.err);
    let corpus = deserialize(&std::fs::read_to_string(&c).unwrap()).unwrap();
    assert_eq!(corpus.len(), 300);
    assert_eq!(corpus[0].seed, 3);
    let spec = load_builtin("lanternquest").unwrap();
    let plurality = Plurality::for_game(&spec);
    for t in &corpus {
        validate(t, &spec.grammar, &plurality).unwrap();
        assert!(t.steps.len() <= 4);
    }
    let m = Manifest::read(&dir.path().join("c.traj.manifest.json")).unwrap();
    assert_eq!(m.command, "rollout");
    assert_eq!(m.config.rollout.n, 300);
}

fn eggtree_corpus_file(dir: &Path) -> std::path::PathBuf {
    let spec = load_builtin("eggtree").unwrap();
    let mut corpus = common::eggtree_corpus(&spec, 30, &mut ChaCha8Rng::seed_from_u64(0));
    let take = corpus[0].steps.iter().position(|s| s.action == "take egg").unwrap();
    corpus[0].steps[take].immediate_explanation = vec!["egg is interactable".into(), "egg is interactable".into()];
    let path = dir.join("egg.traj");
    std::fs::write(&path, serialize(&corpus)).unwrap();
    path
}

#[test]
fn explain_reports_on_the_eggtree_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = eggtree_corpus_file(dir.path());
    let c = p(&corpus);
    let r = cli(&["explain", "--corpus", c, "--trajectory", "0", "--goal-action", "open egg"], None, "");
    assert_eq!(r.code, 0, "{}", r.err);
    let e = parse_report(&r.out).unwrap();
    assert!(e.selected_actions().contains(&"take egg"), "{}", r.out);
    assert_eq!(e.goal_action, "open egg");
    assert_eq!(e.trajectory, Some(0));
    assert_eq!(e.params.unwrap().p, 0.5);

    let r = cli(&["explain", "--corpus", c, "--p", "1.01"], None, "");
    assert_eq!(r.code, 0);
    let e = parse_report(&r.out).unwrap();
    assert!(e.steps.is_empty());
    assert_eq!(r.out.lines().filter(|l| !l.starts_with('#') && *l != "---").count(), 1);

    let out = dir.path().join("report.jsonl");
    let r = cli(&["explain", "--corpus", c, "--format", "json-lines", "--k", "none", "--out", p(&out)], None, "");
    assert_eq!(r.code, 0, "{}", r.err);
    let e = parse_json_lines(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(e.params.unwrap().k, None);
    assert!(dir.path().join("report.jsonl.manifest.json").exists());

    let take = deserialize(&std::fs::read_to_string(&corpus).unwrap()).unwrap()[0]
        .steps
        .iter()
        .position(|s| s.action == "take egg")
        .unwrap()
        .to_string();
    let r = cli(&["explain", "--corpus", c, "--immediate-only", "--step", &take], None, "");
    assert_eq!(r.code, 0);
    let lines: Vec<&str> = r.out.lines().map(str::trim).collect();
    assert_eq!(lines, [format!("Step {take} (treetop): take egg").as_str(), "egg is interactable"]);
    let r = cli(&["explain", "--corpus", c, "--immediate-only"], None, "");
    assert!(r.out.lines().filter(|l| l.starts_with("Step ")).count() >= 5);
}

#[test]
fn explain_rejects_bad_ids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = eggtree_corpus_file(dir.path());
    let c = p(&corpus);
    for args in [
        vec!["--trajectory", "30"],
        vec!["--step", "99"],
        vec!["--step", "last"],
        vec!["--goal-action", "dance"],
        vec!["--format", "xml"],
    ] {
        let mut full = vec!["explain", "--corpus", c];
        full.extend(args.iter().copied());
        assert_eq!(cli(&full, None, "").code, 2, "{args:?}");
    }
    // An explicit step needs no reward.
    assert_eq!(cli(&["explain", "--corpus", c, "--step", "2"], None, "").code, 0);
}

#[test]
fn eval_reports_bounded_reproducible_scores() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_small(dir.path(), "eggtree", "0", "2").code, 0);
    let ckpt = dir.path().join("checkpoint.ckpt");
    let args = ["eval", "--checkpoint", p(&ckpt), "--episodes", "4", "--set", "max_steps=20"];
    let a = cli(&args, None, "");
    assert_eq!(a.code, 0, "{}", a.err);
    assert_eq!(cli(&args, None, "").out, a.out);
    let line = |key: &str| -> f64 {
        let l = a.out.lines().find(|l| l.starts_with(key)).unwrap();
        l.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!((0.0..=15.0).contains(&line("Eps.")));
    assert!((0.0..=15.0).contains(&line("Max")));
    assert!(a.out.contains("episodes 4"));
    assert_eq!(RunConfig::default().eval.episodes, 100);
}

#[test]
fn play_follows_the_walkthrough() {
    let spec = load_builtin("lanternquest").unwrap();
    let input = spec.walkthrough.join("\n") + "\n";
    let r = cli(&["play", "--game", "lanternquest"], None, &input);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("Final score 30/30."), "{}", r.out);

    let r = cli(&["play", "--game", "eggtree", "--show-kg"], None, "xyzzy plugh\nlook\nquit\nclimb tree\n");
    assert_eq!(r.code, 0);
    assert!(r.out.contains("I don't understand that."));
    assert!(r.out.contains("You look around."));
    assert!(r.out.contains("tree\tin\tforest\tobj"));
    assert!(!r.out.contains("You climb the tree."));
}

/// The installed binary: real exit codes, the seed variable and stdin.
#[test]
fn binary_contract() {
    let bin = env!("CARGO_BIN_EXE_hexplain");
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(bin)
        .args(["train", "--game", "eggtree", "--steps", "0", "--out"])
        .arg(dir.path())
        .env("HEXPLAIN_SEED", "13")
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let m = Manifest::read(&dir.path().join("manifest.json")).unwrap();
    assert_eq!((m.seed, m.seed_source), (13, SeedSource::Env));

    let out = Command::new(bin).args(["train", "--game", "missing.game"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.game"));

    let mut child = Command::new(bin)
        .args(["play", "--game", "eggtree"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(b"look\nquit\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("You look around."));
}
