use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_kfatt");

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Run {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().display().to_string();
        let text = format!(
            r#"seed = 5

[datagen]
seed = 3
users = 150

[model]
kernel = "kfatt_freq"
d_model = 8
d_k = 4
d_v = 4
mlp_hidden = 8
head_hidden = 4

[train]
epochs = 1
batch_size = 32

[eval]
bench_kernels = ["transformer", "transformer_full"]
bench_lengths = [25, 50]

[paths]
data_dir = "{root}/data"
checkpoint = "{root}/model.ckpt"
loss_log = "{root}/loss.log"
metrics = "{root}/metrics.txt"
bench_report = "{root}/bench.txt"
"#
        );
        fs::write(dir.path().join("run.toml"), text).unwrap();
        Run { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, sub: &str, extra: &[&str]) -> Command {
        let mut c = Command::new(BIN);
        c.arg(sub).arg("--config").arg(self.config()).args(extra);
        for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("KFATT__")) {
            c.env_remove(k);
        }
        c
    }

    fn run(&self, sub: &str, extra: &[&str]) -> Output {
        self.cmd(sub, extra).output().unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn pipeline_writes_all_artifacts() {
    let r = Run::new();
    ok(r.run("generate", &[]));
    ok(r.run("train", &[]));
    ok(r.run("evaluate", &[]));
    let log = read(&r.path("loss.log"));
    assert!(log.starts_with("# config_digest="));
    assert!(log.lines().nth(1).unwrap().starts_with("epoch=1 loss="));
    let metrics = read(&r.path("metrics.txt"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("# config_digest=") && lines[0].contains(" datagen_digest="));
    assert_eq!(lines.len(), 4);
    for (line, subset) in lines[1..].iter().zip(["all", "new", "infreq"]) {
        assert!(line.starts_with(&format!("name=kfatt_freq subset={subset} auc=")), "{line}");
    }
}

#[test]
fn verify_passes_on_a_small_certificate() {
    let r = Run::new();
    let o = ok(r.run("verify", &["--instances", "5"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("total failures: 0"));
}

#[test]
fn unknown_kernel_is_a_config_error() {
    let r = Run::new();
    let o = r.run("generate", &["--set", "model.kernel=din"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.kernel"), "{}", stderr(&o));
}

#[test]
fn invalid_values_are_config_errors() {
    let r = Run::new();
    let o = r.run("generate", &["--set", "datagen.new_query_prob=1.5", "--set", "train.lr=-1"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("datagen.new_query_prob") && err.contains("train.lr"), "{err}");
    let o = Command::new(BIN).args(["generate", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn digest_mismatch_stops_unless_forced() {
    let r = Run::new();
    ok(r.run("generate", &[]));
    let o = r.run("train", &["--set", "datagen.seed=4"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!r.path("model.ckpt").exists());
    ok(r.run("train", &["--set", "datagen.seed=4", "--force"]));
    assert!(r.path("model.ckpt").exists());

    // A checkpoint trained under other settings is refused at evaluation.
    let o = r.run("evaluate", &["--set", "train.lr=0.01"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn set_beats_environment_beats_file() {
    let r = Run::new();
    let o = r.cmd("generate", &[]).env("KFATT__MODEL__KERNEL", "bogus").output().unwrap();
    assert_eq!(code(&o), 2);
    ok(r
        .cmd("generate", &["--set", "model.kernel=vanilla"])
        .env("KFATT__MODEL__KERNEL", "bogus")
        .output()
        .unwrap());

    ok(r.cmd("generate", &[]).env("KFATT__DATAGEN__USERS", "40").output().unwrap());
    let header = read(&r.path("data/data.header.json"));
    ok(r.run("generate", &["--set", "datagen.users=40"]));
    assert_eq!(header, read(&r.path("data/data.header.json")));
    ok(r.run("generate", &[]));
    assert_ne!(header, read(&r.path("data/data.header.json")));
}

#[test]
fn bench_reports_percentiles_and_macs() {
    let r = Run::new();
    ok(r.run("bench", &[]));
    let report = read(&r.path("bench.txt"));
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let field = |k: &str| -> f64 {
            row.split(' ')
                .find_map(|kv| kv.strip_prefix(&format!("{k}=")))
                .unwrap()
                .parse()
                .unwrap()
        };
        assert!(field("p99_us") >= field("p50_us"), "{row}");
        assert!(field("macs") > 0.0);
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = kfatt::config::RunConfig::load(&path, &[], std::iter::empty());
        assert!(cfg.is_ok(), "{}: {:?}", path.display(), cfg.err());
    }
}
