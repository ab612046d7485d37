use std::path::{Path, PathBuf};
use std::process::Command;

use loraloop_cli::commands::{self, PreviewManifest};
use tempfile::TempDir;

const TINY: &str = "
seeds = 7
suite.n_tasks = 2
suite.classes_per_task = 3
suite.base_classes = 4
suite.train_per_class = 6
suite.test_per_class = 4
suite.corpus_per_class = 4
pretrain.vlm_steps = 30
pretrain.vlm_batch = 16
pretrain.gen_epochs = 2
pretrain.gen_batch = 16
lora.epochs = 3
loop.steps_per_task = 6
loop.batch = 8
loop.m_pre = 2
";

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_defaults.conf")
}

fn write_conf(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!("extends = {}\n{TINY}{extra}", desk().canonicalize().unwrap().display());
    std::fs::write(&path, text).unwrap();
    path
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_loraloop"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn only_run(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let unknown = write_conf(tmp.path(), "u.conf", "loop.bogus = 1\n");
    let o = bin(&["run", "--config", s(&unknown), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("u.conf:18") && err.contains("loop.bogus"), "{err}");

    let partial = tmp.path().join("p.conf");
    std::fs::write(&partial, "seeds = 1\nmethod = lora_loop\n").unwrap();
    let o = bin(&["run", "--config", s(&partial), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing required key `suite.n_tasks`"));

    let bad = write_conf(tmp.path(), "b.conf", "loop.k = 5\n");
    let o = bin(&["run", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_outputs_is_deterministic_and_append_only() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path(), "tiny.conf", "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = bin(&["run", "--config", s(&conf), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ra, rb) = (only_run(&a), only_run(&b));
    assert_eq!(ra.file_name(), rb.file_name());
    assert!(ra.file_name().unwrap().to_str().unwrap().ends_with("-seed7"));
    let metrics = |d: &Path| std::fs::read(d.join("metrics.json")).unwrap();
    assert_eq!(metrics(&ra), metrics(&rb));
    for f in [
        "matrix.csv",
        "metrics.json",
        "run_manifest.json",
        "losses.csv",
        "config.conf",
        "checkpoints/vlm_f0.llcp",
        "checkpoints/vlm_final.llcp",
        "checkpoints/generator_base.llcp",
        "adapters/registry.json",
        "adapters/adapter_task1.llcp",
        "adapters/adapter_task2.llcp",
        "replay/manifest.json",
    ] {
        assert!(ra.join(f).exists(), "{f}");
    }
    let matrix = std::fs::read_to_string(ra.join("matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 4);

    // A second run into the same directory refuses and leaves it intact.
    let before = metrics(&ra);
    let o = bin(&["run", "--config", s(&conf), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing"));
    assert_eq!(metrics(&ra), before);

    // Stored metrics round-trip losslessly.
    let rec = commands::load_run(&ra).unwrap();
    let again = serde_json::to_vec_pretty(&rec.metrics).unwrap();
    assert_eq!(again, before);

    // eval reproduces the final matrix row.
    let o = bin(&["eval", s(&ra)]);
    assert!(o.status.success());
    let row = commands::cmd_eval(&ra, "vlm_final").unwrap();
    let last: Vec<f64> = matrix
        .lines()
        .last()
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row, last);

    // Self-report has zero deltas.
    let o = bin(&["report", s(&ra), "--reference", s(&ra), "--format", "csv"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((fields[4], fields[6], fields[8]), ("0", "0", "0"));

    // Preview: empty for count 0, confidences are cosines otherwise.
    let empty = commands::cmd_gen_preview(&ra, "unknown-class", 0, &tmp.path().join("x"));
    assert!(empty.is_err());
    let cfg = rec.config.run_config(7);
    let suite = loraloop::taskgen::make_suite(&loraloop::taskgen::SuiteConfig { seed: 7, ..cfg.suite }).unwrap();
    let class = suite.tasks[1].classes[0].name.clone();
    let o = bin(&["gen-preview", s(&ra), "--class", &class, "--count", "0", "--out", s(&tmp.path().join("p0"))]);
    assert!(o.status.success());
    let m: PreviewManifest =
        serde_json::from_slice(&std::fs::read(tmp.path().join("p0/manifest.json")).unwrap()).unwrap();
    assert!(m.entries.is_empty());
    let m = commands::cmd_gen_preview(&ra, &class, 3, &tmp.path().join("p3")).unwrap();
    assert_eq!(m.entries.len(), 6);
    assert_eq!(m.adapter_task, Some(2));
    assert!(m.entries.iter().all(|e| (-1.0..=1.0).contains(&e.confidence)));
    assert!(tmp.path().join("p3/adapted_002.pgm").exists());
}

#[test]
fn zero_shot_run_keeps_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path(), "zs.conf", "method = zero_shot\n");
    let out = tmp.path().join("o");
    let o = bin(&["run", "--config", s(&conf), "--out", s(&out)]);
    assert!(o.status.success());
    let run = only_run(&out);
    let ckpts: Vec<String> = std::fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".llcp"))
        .collect();
    assert_eq!(ckpts, ["vlm_f0.llcp"]);
}

#[test]
fn ablate_cells_match_single_runs() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path(), "t.conf", "method = continual_finetune\n");
    let cfg = loraloop_cli::ExperimentConfig::load(&conf).unwrap();
    let axis: commands::Axis = "loop.filter_policy=top,bottom".parse().unwrap();
    let res = commands::cmd_ablate(&cfg, &[axis], &tmp.path().join("grid")).unwrap();
    assert_eq!(res.len(), 2);
    assert!(res.iter().all(|r| r.error.is_none()));

    let single = commands::cmd_run(&cfg, &tmp.path().join("single")).unwrap();
    let one = commands::cmd_ablate(&cfg, &[], &tmp.path().join("one")).unwrap();
    assert_eq!(one.len(), 1);
    let stats = one[0].stats.unwrap();
    assert_eq!(stats[2].0, single[0].report.last.unwrap());
    assert_eq!(stats[1].0, single[0].report.avg.unwrap());

    // A bad cell is recorded and the grid goes on.
    let axis: commands::Axis = "loop.k=1,99".parse().unwrap();
    let res = commands::cmd_ablate(&cfg, &[axis], &tmp.path().join("bad")).unwrap();
    assert!(res[0].error.is_none() && res[1].error.is_some());
    let csv = commands::ablation_csv(&res);
    assert_eq!(csv.lines().count(), 3);
    for p in ["components", "rank", "l", "lora_policy", "filter_policy", "m_pre"] {
        assert!(commands::preset(p).is_ok());
    }
    assert_eq!(commands::preset("rank").unwrap()[0].values.len(), 4);
    assert_eq!(commands::preset("components").unwrap().len(), 3);
}

#[test]
fn taskgen_dump_writes_manifest() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path(), "t.conf", "");
    let out = tmp.path().join("dump");
    let o = bin(&["taskgen", "dump", "--config", s(&conf), "--seed", "3", "--out", s(&out), "--per-class", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tasks: Vec<commands::DumpTask> =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(tasks.len(), 3);
    // 2 per class and split.
    assert_eq!(tasks[0].files.len(), 4 * 2 * 2);
    assert!(out.join("task1").join(&tasks[1].files[0].file).exists());
}

#[test]
fn worker_cap_from_environment() {
    std::env::set_var(commands::WORKERS_ENV, "2");
    assert_eq!(commands::capped_workers(8), 2);
    assert_eq!(commands::capped_workers(1), 1);
    std::env::set_var(commands::WORKERS_ENV, "0");
    assert_eq!(commands::capped_workers(3), 3);
    std::env::remove_var(commands::WORKERS_ENV);
}
