//! End-to-end tests of the command-line surface: exit codes, output
//! artifacts, and reproducibility.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn depthcl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_depthcl"))
}

fn run(args: &[&str]) -> Output {
    depthcl().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path, files);
            } else {
                files.push(path);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            let bytes = std::fs::read(&p).unwrap();
            (rel, bytes)
        })
        .collect()
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[train]\nepochs = 2\nbatch_size = 8\ncrop_size = 16\nseed = 11\n\n\
         [encoder]\nstages = [[8,3,2],[16,3,2]]\n\n\
         [projector]\nhidden_sizes = [16,8]\noutput_dim = 4\n\n\
         [classifier]\nhidden = 16\n",
    )
    .unwrap();
    path
}

fn gen_tiny_dataset(dir: &Path) {
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--scale",
        "0.12",
        "--image-size",
        "20",
        "--seed",
        "5",
    ]);
    assert_ok(&out);
}

#[test]
fn gen_data_is_reproducible_and_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = run(&[
            "gen-data",
            "--out",
            dir.to_str().unwrap(),
            "--scale",
            "0.1",
            "--seed",
            "7",
        ]);
        assert_ok(&out);
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        assert!(text.contains("Cylindrical\t5"), "{text}");
        assert!(text.contains("Ore1\t86"), "{text}");
    }
    assert_eq!(read_tree(&a), read_tree(&b), "identical seeds, identical trees");
}

#[test]
fn gen_data_rejects_zero_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--scale",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2), "config errors exit with 2");
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        tmp.path().join("nonexistent").to_str().unwrap(),
        "--out",
        tmp.path().join("ckpt.dckp").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "I/O errors exit with 3");
}

#[test]
fn malformed_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbogus_key = 1\n").unwrap();
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("ckpt.dckp").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_key"), "message names the key: {stderr}");
}

#[test]
fn pretrain_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = write_tiny_config(tmp.path());

    let run_once = |name: &str| -> (Vec<u8>, Vec<u8>) {
        let ckpt = tmp.path().join(format!("{name}.dckp"));
        let record = tmp.path().join(format!("{name}.run.tsv"));
        let out = run(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--record",
            record.to_str().unwrap(),
        ]);
        assert_ok(&out);
        (std::fs::read(&ckpt).unwrap(), std::fs::read(&record).unwrap())
    };
    let (ckpt_a, rec_a) = run_once("a");
    let (ckpt_b, rec_b) = run_once("b");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints must be bitwise identical");
    assert_eq!(rec_a, rec_b, "run records must be bitwise identical");
}

#[test]
fn paper_preset_is_echoed_in_artifacts() {
    // The full paper preset (batch 256) cannot run on a tiny dataset; batch
    // size is overridden while the rest of the preset must surface in the
    // record echo.
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = tmp.path().join("paper.toml");
    std::fs::write(
        &cfg,
        "preset = \"paper\"\n\n\
         [train]\nepochs = 1\nbatch_size = 8\ncrop_size = 16\nseed = 3\n\n\
         [encoder]\nstages = [[8,3,2],[16,3,2]]\n\n\
         [projector]\nhidden_sizes = [16,8]\noutput_dim = 4\n\n\
         [classifier]\nhidden = 16\n",
    )
    .unwrap();
    let ckpt = tmp.path().join("paper.dckp");
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let record = std::fs::read_to_string(tmp.path().join("paper.run.tsv")).unwrap();
    assert!(record.contains("temperature = 0.1"), "{record}");
    assert!(record.contains("learning_rate = 5e-5"), "{record}");
    assert!(record.contains("preset = paper") || record.contains("# preset = paper"));
}

#[test]
fn finetune_random_baseline_and_semi_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("ft");
    let out = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--init",
        "random",
        "--out",
        out_dir.to_str().unwrap(),
        "--semi",
    ]);
    assert_ok(&out);
    let record = std::fs::read_to_string(out_dir.join("run.tsv")).unwrap();
    // 361 samples: ten percent quotas on the 10/10/20 protocol.
    assert!(
        record.contains("splits = train 36 / val 36 / test 73"),
        "{record}"
    );
    let metrics = std::fs::read_to_string(out_dir.join("test_metrics.tsv")).unwrap();
    for class in [
        "Mixed1",
        "Mixed2",
        "Ore1",
        "Ore2",
        "Ore3",
        "Agglomerated",
        "Cylindrical",
    ] {
        assert!(metrics.contains(class), "per-class table misses {class}");
    }
    assert!(metrics.contains("macro_f1"));
}

#[test]
fn finetune_from_checkpoint_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = write_tiny_config(tmp.path());
    let ckpt = tmp.path().join("pre.dckp");
    assert_ok(&run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]));
    let out_dir = tmp.path().join("ft");
    let out = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--init",
        ckpt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(out_dir.join("model.dckp").exists());
}

#[test]
fn linear_eval_reports_freeze_check() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("le");
    let out = run(&[
        "linear-eval",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--init",
        "random",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("encoder_freeze_check = ok"), "{stdout}");
}

#[test]
fn width_mismatch_between_run_and_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = write_tiny_config(tmp.path());
    let ckpt = tmp.path().join("pre64.dckp");
    assert_ok(&run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]));
    let out = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--width",
        "32",
        "--data",
        data.to_str().unwrap(),
        "--init",
        ckpt.to_str().unwrap(),
        "--out",
        tmp.path().join("ft32").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn width_32_mode_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = write_tiny_config(tmp.path());
    let ckpt = tmp.path().join("pre32.dckp");
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--width",
        "32",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let record = std::fs::read_to_string(tmp.path().join("pre32.run.tsv")).unwrap();
    assert!(record.contains("width = 32"));
}

#[test]
fn protocol_emits_two_arms_of_five_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = tmp.path().join("proto.toml");
    std::fs::write(
        &cfg,
        "[train]\nepochs = 1\nbatch_size = 8\ncrop_size = 16\nseed = 11\n\n\
         [encoder]\nstages = [[8,3,2],[16,3,2]]\n\n\
         [projector]\nhidden_sizes = [16,8]\noutput_dim = 4\n\n\
         [classifier]\nhidden = 16\n\n\
         [protocol]\ndownstream_epochs = 1\ndownstream_batch_size = 8\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("proto");
    let out = run(&[
        "protocol",
        "--name",
        "FT-semi",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ordering: pretrained mean macro F1"), "{stdout}");
    let report = std::fs::read_to_string(out_dir.join("protocol_FT-semi.tsv")).unwrap();
    let pretrained_rows = report
        .lines()
        .filter(|l| l.starts_with("FT-semi\tpretrained"))
        .count();
    let random_rows = report
        .lines()
        .filter(|l| l.starts_with("FT-semi\trandom-init"))
        .count();
    assert_eq!(pretrained_rows, 5);
    assert_eq!(random_rows, 5);
    assert!(report.contains("10/10/20"));
    assert!(report.contains("raw-reflectance-raw"));
}

#[test]
fn unknown_protocol_name_lists_valid_names() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let out = run(&[
        "protocol",
        "--name",
        "FT-bogus",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("FT-full") && stderr.contains("LE-semi"), "{stderr}");
}

#[test]
fn gradcheck_passes_and_corrupt_hook_fails() {
    let out = run(&["gradcheck"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradcheck: PASS"), "{stdout}");
    assert!(stdout.contains("max_rel_err"), "per-parameter table expected");

    let out = run(&["gradcheck", "--corrupt"]);
    assert_eq!(out.status.code(), Some(5), "tolerance breach exits with 5");
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck: FAIL"));
}

#[test]
fn data_dir_env_variable_is_honoured() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_tiny_dataset(&data);
    let cfg = write_tiny_config(tmp.path());
    let ckpt = tmp.path().join("env.dckp");
    let out = depthcl()
        .env("DEPTHCL_DATA", data.to_str().unwrap())
        .args([
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_ok(&out);
}

#[test]
fn paper_preset_carries_the_stated_batch_size() {
    // Resolution-level pin: the preset itself carries batch 256 even though
    // the tiny end-to-end runs override it.
    use depthcl_core::pipeline::TrainConfig;
    let cfg = TrainConfig::paper_pretrain(0);
    assert_eq!(cfg.batch_size, 256);
    assert_eq!(cfg.learning_rate, 5e-5);
    assert_eq!(cfg.temperature, 0.1);
    let down = TrainConfig::paper_downstream(depthcl_core::pipeline::TrainMode::Finetune, 0);
    assert_eq!(down.learning_rate, 1e-5);
    assert_eq!(down.batch_size, 16);
    assert_eq!(down.dropout_rate, 0.3);
}
