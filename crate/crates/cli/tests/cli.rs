use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use treecoder::checkpoint;
use treecoder::{TreeCoderModel, TreeConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_treecoder"));
    c.env("TREECODER_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value_after(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no {key:?} in {text}"));
    line[key.len()..].trim().parse().unwrap()
}

fn corpus(lines: usize, salt: usize) -> String {
    let words = ["tree", "node", "leaf", "root", "path", "branch", "layer", "token"];
    (0..lines)
        .map(|i| (0..6).map(|j| words[(i * 7 + j * 3 + salt) % words.len()]).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), corpus(60, 0)).unwrap();
        fs::write(dir.path().join("valid.txt"), corpus(12, 1)).unwrap();
        fs::write(dir.path().join("test.txt"), corpus(12, 2)).unwrap();
        let ws = Self { dir };
        let o = run(&["tokenizer-train", "--corpus", ws.s("train.txt"), "--vocab-size", "300", "--out", ws.s("vocab.json")]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> &str {
        // Leaked so arguments can borrow it for the whole test.
        Box::leak(self.path(name).to_string_lossy().into_owned().into_boxed_str())
    }

    fn config(&self, name: &str, out: &str, extra: &str) -> &str {
        let text = format!(
            r#"{{"name": "tiny", "out_dir": "{out}", "vocab": "vocab.json", "train_data": ["train.txt"],
                "valid_data": ["valid.txt"], "test_data": ["test.txt"], "k": 2, "h": 1, "dec": 1,
                "d_model": 16, "n_heads": 2, "context_len": 16, "selector_hidden_mult": 2,
                "base_lr": 0.003, "warmup_steps": 5, "batch_size": 8, "epochs": 2, "max_steps": 12{extra}}}"#
        );
        fs::write(self.path(name), text).unwrap();
        self.s(name)
    }
}

#[test]
fn tokenizer_train_outputs() {
    let ws = Workspace::new();
    let text = fs::read_to_string(ws.path("vocab.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["pieces"].as_object().unwrap().len(), v["vocab_size"].as_u64().unwrap() as usize);
    assert!(v["vocab_size"].as_u64().unwrap() > 259);
    assert_eq!(v["specials"]["bos"], 1);

    let o = run(&["tokenizer-train", "--corpus", ws.s("train.txt"), "--vocab-size", "300", "--out", ws.s("again.json")]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("256 bytes"));
    assert_eq!(fs::read(ws.path("vocab.json")).unwrap(), fs::read(ws.path("again.json")).unwrap());

    let o = run(&["tokenizer-train", "--corpus", ws.s("train.txt"), "--vocab-size", "100", "--out", ws.s("small.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!ws.path("small.json").exists());
    let o = run(&["tokenizer-train", "--corpus", ws.s("nope.txt"), "--out", ws.s("x.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&o.stderr).trim().lines().count(), 1);
}

#[test]
fn inspect_reports_tree_arithmetic() {
    let o = stdout(&run(&["inspect", "--k", "2", "--h", "4"]));
    assert!(o.contains("nodes 31\n") && o.contains("active 16.1%"), "{o}");
    let o = stdout(&run(&["inspect", "--k", "3", "--h", "2"]));
    assert!(o.contains("nodes 13\n"));
    let o = stdout(&run(&["inspect", "--h", "1", "--dec", "3"]));
    assert!(o.contains("path length 6\n"));
    assert!(o.contains("group 6: (0,6),(1,3),(2,2),(5,1)\n"), "{o}");

    let dir = tempfile::tempdir().unwrap();
    let o = run(&["inspect", "--k", "2", "--h", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let tree = fs::read_to_string(dir.path().join("tables/tree.csv")).unwrap();
    assert!(tree.contains("4,5,1365,"));
    assert!(run(&["inspect", "--k", "0"]).status.code() == Some(1));
}

fn train(config: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config];
    args.extend(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn train_is_reproducible_and_writes_outputs() {
    let ws = Workspace::new();
    let a = train(ws.config("a.json", "run-a", ""), &["--seed", "42"]);
    let b = train(ws.config("b.json", "run-b", ""), &["--seed", "42"]);
    let (ma, mb) = (fs::read(ws.path("run-a/metrics.jsonl")).unwrap(), fs::read(ws.path("run-b/metrics.jsonl")).unwrap());
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
    assert_eq!(value_after(&stdout(&a), "test perplexity"), value_after(&stdout(&b), "test perplexity"));
    for f in ["tables/eval.csv", "tables/routes.csv", "tables/params.csv", "config.json"] {
        assert!(ws.path("run-a").join(f).is_file(), "{f}");
    }
    train(ws.config("c.json", "run-c", ""), &["--seed", "7"]);
    assert_ne!(fs::read(ws.path("run-c/metrics.jsonl")).unwrap(), ma);

    // Reusing an output directory with checkpoints is refused.
    assert_eq!(run(&["train", "--config", ws.s("a.json")]).status.code(), Some(1));
}

fn latest_checkpoint(dir: &Path) -> PathBuf {
    let mut all: Vec<PathBuf> = fs::read_dir(dir.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    all.sort();
    all.pop().unwrap()
}

#[test]
fn random_routing_keeps_selectors_at_init() {
    let ws = Workspace::new();
    train(ws.config("r.json", "run-r", ""), &["--routing", "random", "--seed", "5"]);
    let saved = checkpoint::load(&latest_checkpoint(&ws.path("run-r"))).unwrap().model;
    let resolved: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("run-r/config.json")).unwrap()).unwrap();
    let config: TreeConfig = serde_json::from_value(resolved["model"].clone()).unwrap();
    assert_eq!(config.routing, treecoder::RoutingMode::Random);
    let init = TreeCoderModel::<f32>::build(config, 5).unwrap();
    for id in saved.selector_param_ids(0) {
        assert_eq!(saved.params.get(id).value, init.params.get(id).value);
    }
    assert_ne!(saved.params.get(saved.node_param_ids(0)[0]).value, init.params.get(init.node_param_ids(0)[0]).value);
}

#[test]
fn bad_configs_fail_without_outputs() {
    let ws = Workspace::new();
    let cfg = ws.config("bad.json", "run-bad", r#", "learning_rate": 1, "layers": 4"#);
    let o = run(&["train", "--config", cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("layers") && err.contains("learning_rate"), "{err}");
    assert!(!ws.path("run-bad").exists());

    fs::write(ws.path("broken.json"), "{ not json").unwrap();
    assert_eq!(run(&["train", "--config", ws.s("broken.json")]).status.code(), Some(1));
    let cfg = ws.config("heads.json", "run-heads", r#", "n_heads": 3"#);
    assert_eq!(run(&["train", "--config", cfg]).status.code(), Some(1));
    assert!(!ws.path("run-heads").exists());
    assert_eq!(run(&["train", "--config", ws.s("missing.json")]).status.code(), Some(1));
}

#[test]
fn eval_and_generate_from_checkpoints() {
    let ws = Workspace::new();
    let t = train(ws.config("e.json", "run-e", ""), &[]);
    let ckpt = latest_checkpoint(&ws.path("run-e"));
    let ckpt = ckpt.to_str().unwrap();
    let e1 = run(&["eval", "--checkpoint", ckpt, "--data", ws.s("valid.txt")]);
    let e2 = run(&["eval", "--checkpoint", ckpt, "--data", ws.s("valid.txt"), "--batch-size", "3"]);
    assert!(e1.status.success());
    let (p1, p2) = (value_after(&stdout(&e1), "perplexity"), value_after(&stdout(&e2), "perplexity"));
    assert!((p1 - p2).abs() <= 1e-5 * p1);
    assert_eq!(stdout(&e1), stdout(&run(&["eval", "--checkpoint", ckpt, "--data", ws.s("valid.txt")])));
    let trained = value_after(&stdout(&t), "valid perplexity");
    assert!((p1 - trained).abs() <= 1e-5 * trained);
    assert_eq!(run(&["eval", "--checkpoint", ws.s("none.ckpt"), "--data", ws.s("valid.txt")]).status.code(), Some(1));

    let g = |extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", ckpt, "--prompt", "tree node"];
        args.extend(extra);
        let o = run(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let greedy = g(&["--max-tokens", "8"]);
    assert_eq!(greedy, g(&["--max-tokens", "8"]));
    assert!(greedy.starts_with("tree node"));
    assert!(greedy.contains("step 0 token") && greedy.contains("route [0, "));
    assert_eq!(g(&["--max-tokens", "0"]), "tree node\n");
    assert_eq!(g(&["--max-tokens", "8", "--temperature", "1", "--seed", "3"]), g(&["--max-tokens", "8", "--temperature", "1", "--seed", "3"]));
}
