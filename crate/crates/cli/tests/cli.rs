use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfvt::checkpoint;
use dfvt::config::RunConfig;
use dfvt_core::data::load_manifest;
use dfvt_core::eval::MetricsReport;
use dfvt_core::learn::{train, AnchorSnapshot};
use dfvt_core::Model;
use tempfile::TempDir;

const TINY: &str = "\
model.preset = desk_patch
model.d_model = 8
model.n_heads = 2
model.n_blocks = 1
model.seed = 5
data.frames = 1
data.n = 12
train.epochs = 2
train.learning_rate = 0.03
train.batch_size = 4
train.seed = 9
";

fn dfvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfvt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(f.path("run.cfg"), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cfg(&self) -> PathBuf {
        self.path("run.cfg")
    }

    fn gen(&self, name: &str, task: &str, seed: u64) -> PathBuf {
        let out = self.path(name);
        let o = dfvt(&[
            "gen-data", "--config", s(&self.cfg()), "--task", task, "--seed", &seed.to_string(), "--out", s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn train(&self, cfg: &Path, data: &Path, out: &str) -> PathBuf {
        let out = self.path(out);
        let o = dfvt(&["train", "--config", s(cfg), "--data", s(data), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out.join("model.dfvt")
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 8);
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let f = Fixture::new();
    let a = f.gen("a", "stream", 3);
    let b = f.gen("b", "stream", 3);
    let c = f.gen("c", "stream", 4);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    let ds = load_manifest(&a.join("manifest.tsv")).unwrap();
    assert_eq!(ds.len(), 12);
}

#[test]
fn gen_data_with_zero_videos_writes_an_empty_manifest() {
    let f = Fixture::new();
    let out = f.path("empty");
    let o = dfvt(&["gen-data", "--task", "flicker", "--n", "0", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(load_manifest(&out.join("manifest.tsv")).unwrap().is_empty());
}

#[test]
fn zero_epochs_saves_the_seeded_initialization() {
    let f = Fixture::new();
    let data = f.gen("d", "spatial", 1);
    let trained = f.train(&f.cfg(), &data, "t");
    let o = dfvt(&["train", "--config", s(&f.cfg()), "--set", "train.epochs=0", "--data", s(&data), "--out", s(&f.path("z"))]);
    assert!(o.status.success());
    let saved = checkpoint::load(&f.path("z/model.dfvt")).unwrap();
    let run = RunConfig::load(&f.cfg()).unwrap();
    let init = Model::<f32>::init(&run.model, run.model_seed).unwrap();
    assert!(saved.params().bit_eq(init.params()));
    assert!(!checkpoint::load(&trained).unwrap().params().bit_eq(init.params()));
}

#[test]
fn training_is_reproducible_and_leaves_inputs_untouched() {
    let f = Fixture::new();
    let data = f.gen("d", "spatial", 1);
    let before = tree(&data);
    let a = f.train(&f.cfg(), &data, "a");
    let b = f.train(&f.cfg(), &data.join("manifest.tsv"), "b");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(tree(&data), before);
    let history = fs::read_to_string(f.path("a/history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch\tmean_loss\ttrain_accuracy"));
}

#[test]
fn finetune_with_zero_lambda_is_plain_training_from_the_anchor() {
    let f = Fixture::new();
    let a_data = f.gen("a_data", "spatial", 1);
    let b_data = f.gen("b_data", "stream", 2);
    let anchor = f.train(&f.cfg(), &a_data, "anchor");
    let out = f.path("ft");
    let o = dfvt(&[
        "finetune", "--config", s(&f.cfg()), "--data", s(&b_data), "--anchor", s(&anchor), "--lambda", "0", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tuned = checkpoint::load(&out.join("model.dfvt")).unwrap();

    let run = RunConfig::load(&f.cfg()).unwrap();
    let mut reference = checkpoint::load(&anchor).unwrap();
    train(&mut reference, &load_manifest(&b_data.join("manifest.tsv")).unwrap(), &run.train).unwrap();
    assert!(tuned.params().bit_eq(reference.params()));
}

#[test]
fn finetune_with_huge_lambda_stays_at_the_anchor() {
    let f = Fixture::new();
    let a_data = f.gen("a_data", "spatial", 1);
    let b_data = f.gen("b_data", "stream", 2);
    let anchor = f.train(&f.cfg(), &a_data, "anchor");
    let out = f.path("ft");
    // lr · 2λ must stay below 2 for the penalty step to contract
    let o = dfvt(&[
        "finetune", "--config", s(&f.cfg()), "--set", "train.learning_rate=1e-5", "--set", "train.epochs=5",
        "--data", s(&b_data), "--anchor", s(&anchor), "--lambda", "1e4", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tuned = checkpoint::load(&out.join("model.dfvt")).unwrap();
    let anchor = checkpoint::load(&anchor).unwrap();
    assert!(tuned.params().max_abs_diff(anchor.params()).unwrap() < 1e-3);
    let snap = AnchorSnapshot::capture(anchor.params());
    assert!(snap.squared_distance(tuned.params()).unwrap() > 0.0);
}

#[test]
fn finetune_rejects_an_incompatible_anchor() {
    let f = Fixture::new();
    let data = f.gen("d", "spatial", 1);
    let anchor = f.train(&f.cfg(), &data, "anchor");
    let o = dfvt(&[
        "finetune", "--config", s(&f.cfg()), "--set", "model.d_model=16", "--data", s(&data), "--anchor", s(&anchor), "--out",
        s(&f.path("ft")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different model configuration"));
}

#[test]
fn eval_with_frozen_weights_matches_training_accuracy() {
    // steps of 1e-12 are below f32 resolution, so the weights never move and
    // the accuracy seen during the epoch is exactly the evaluation accuracy
    let f = Fixture::new();
    let data = f.gen("d", "spatial", 1);
    let o = dfvt(&[
        "train", "--config", s(&f.cfg()), "--set", "train.learning_rate=1e-12", "--set", "train.epochs=1", "--data", s(&data),
        "--out", s(&f.path("m")),
    ]);
    assert!(o.status.success());
    let history = fs::read_to_string(f.path("m/history.tsv")).unwrap();
    let train_acc: f64 = history.lines().nth(1).unwrap().split('\t').nth(2).unwrap().parse().unwrap();
    let report = f.path("report.tsv");
    let o = dfvt(&["eval", "--ckpt", s(&f.path("m/model.dfvt")), "--data", s(&data), "--report", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let m = MetricsReport::parse_lines(&text, "window.").unwrap();
    assert!((m.accuracy - train_acc).abs() < 1e-9, "{} vs {train_acc}", m.accuracy);
    assert_eq!(m.n, 12);
}

#[test]
fn report_round_trips_and_labels_both_levels() {
    let f = Fixture::new();
    let data = f.gen("d", "spatial", 1);
    let ckpt = f.train(&f.cfg(), &data, "m");
    let report = f.path("r.tsv");
    assert!(dfvt(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]).status.success());
    let text = fs::read_to_string(&report).unwrap();
    for prefix in ["window.", "video."] {
        let m = MetricsReport::parse_lines(&text, prefix).unwrap();
        let mut again = String::new();
        m.write_lines(prefix, &mut again);
        let original: Vec<&str> = text.lines().filter(|l| l.starts_with(prefix)).collect();
        assert_eq!(again.lines().collect::<Vec<_>>(), original);
    }
}

#[test]
fn fusing_a_checkpoint_with_itself_reproduces_eval() {
    let f = Fixture::new();
    let data = f.gen("d", "spatial", 1);
    let a = f.train(&f.cfg(), &data, "a");
    let other = f.path("other.cfg");
    fs::write(&other, TINY.replace("model.seed = 5", "model.seed = 6")).unwrap();
    let b = f.train(&other, &data, "b");

    let eval = f.path("eval.tsv");
    assert!(dfvt(&["eval", "--ckpt", s(&a), "--data", s(&data), "--report", s(&eval)]).status.success());
    let self_fused = f.path("self.tsv");
    let o = dfvt(&["fuse", "--ckpt-a", s(&a), "--ckpt-b", s(&a), "--data", s(&data), "--report", s(&self_fused)]);
    assert!(o.status.success());
    assert_eq!(fs::read(&eval).unwrap(), fs::read(&self_fused).unwrap());

    let ab = f.path("ab.tsv");
    let ba = f.path("ba.tsv");
    assert!(dfvt(&["fuse", "--ckpt-a", s(&a), "--ckpt-b", s(&b), "--data", s(&data), "--report", s(&ab)]).status.success());
    assert!(dfvt(&["fuse", "--ckpt-a", s(&b), "--ckpt-b", s(&a), "--data", s(&data), "--report", s(&ba)]).status.success());
    assert_eq!(fs::read(&ab).unwrap(), fs::read(&ba).unwrap());
}

#[test]
fn exit_codes_follow_the_contract() {
    let f = Fixture::new();
    let data = f.gen("d", "spatial", 1);
    let ckpt = f.train(&f.cfg(), &data, "m");

    assert_eq!(dfvt(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(dfvt(&[]).status.code(), Some(1));
    assert_eq!(dfvt(&["--help"]).status.code(), Some(0));
    let bad = f.path("bad.cfg");
    fs::write(&bad, "train.epocs = 3\n").unwrap();
    let o = dfvt(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epocs"));

    let missing = f.path("nope/manifest.tsv");
    let o = dfvt(&["train", "--config", s(&f.cfg()), "--data", s(&missing), "--out", s(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(2));

    let empty = f.path("empty");
    assert!(dfvt(&["gen-data", "--n", "0", "--out", s(&empty)]).status.success());
    let o = dfvt(&["eval", "--ckpt", s(&ckpt), "--data", s(&empty), "--report", s(&f.path("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));

    // a single-frame model scores 9-frame windows by averaging frames, a
    // 2-frame model cannot
    let video = f.path("video");
    assert!(dfvt(&["gen-data", "--task", "flicker", "--n", "4", "--out", s(&video)]).status.success());
    let o = dfvt(&["eval", "--ckpt", s(&ckpt), "--data", s(&video), "--window", "9", "--report", s(&f.path("r"))]);
    assert!(o.status.success());
    let o = dfvt(&[
        "train", "--config", s(&f.cfg()), "--set", "model.frames=2", "--set", "model.n_tokens=64", "--data", s(&video),
        "--out", s(&f.path("two")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = dfvt(&["eval", "--ckpt", s(&f.path("two/model.dfvt")), "--data", s(&video), "--window", "9", "--report", s(&f.path("r"))]);
    assert_eq!(o.status.code(), Some(2));

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let corrupt = f.path("corrupt.dfvt");
    fs::write(&corrupt, bytes).unwrap();
    let o = dfvt(&["eval", "--ckpt", s(&corrupt), "--data", s(&data), "--report", s(&f.path("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn gradcheck_is_repeatable_and_catches_a_corrupted_rule() {
    let a = dfvt(&["gradcheck", "--seed", "3"]);
    let b = dfvt(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let table = String::from_utf8_lossy(&a.stdout);
    for name in dfvt_core::verify::check_names() {
        assert!(table.contains(&name), "{name} missing from table");
    }

    let o = dfvt(&["gradcheck", "--seed", "3", "--corrupt-op", "softmax"]);
    assert_eq!(o.status.code(), Some(3));
    let out = String::from_utf8_lossy(&o.stdout);
    let line = out.lines().find(|l| l.starts_with("softmax ")).unwrap();
    assert!(line.ends_with("FAIL"), "{line}");
    assert!(out.contains("softmax: worst at"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("softmax"));
}
