//! End-to-end checks of the `m3att` binary: exit codes and the full
//! gen-data → train → eval → dump-attn → ablate pipeline on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn m3att(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3att"))
        .args(args)
        .output()
        .expect("failed to spawn m3att")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        stdout_of(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_code(&m3att(&[]), 2);
    assert_code(&m3att(&["gen-data", "--n", "4"]), 2); // missing --out
    assert_code(&m3att(&["no-such-command"]), 2);
    assert_code(&m3att(&["train", "--out", "x"]), 2); // missing --config
}

#[test]
fn runtime_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    assert_code(
        &m3att(&["gen-data", "--n", "6", "--out", data_s]),
        0,
    );
    // Same directory again without --force.
    let out = m3att(&["gen-data", "--n", "6", "--out", data_s]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // Corrupt checkpoint.
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = m3att(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", data_s]);
    assert_code(&out, 1);

    // Unknown suite name is a runtime (not usage) error.
    let out = m3att(&[
        "ablate", "--suite", "table9", "--data", data_s, "--out",
        dir.path().join("a").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}

#[test]
fn full_pipeline_runs_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap().to_string();

    let out = m3att(&["gen-data", "--n", "12", "--size", "32", "--seed", "1", "--out", &data_s]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("manifest.tsv"));
    assert!(data.join("manifest.tsv").is_file());

    // Small model so the whole pipeline stays fast.
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "c=8\nd=4\nn_enc=1\nn_dec=2\nheads=2\n\
             epochs=1\nbatch=4\nlr=0.005\nschedule=constant\ndata_dir={data_s}\n"
        ),
    )
    .unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap().to_string();
    let out = m3att(&["train", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", &run_s]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("epoch=1"), "{text}");
    assert!(text.contains("mean_iou="), "{text}");
    for artifact in ["final.ckpt", "metrics.txt", "results.tsv"] {
        assert!(run.join(artifact).is_file(), "{artifact} missing");
    }
    let ledger = fs::read_to_string(run.join("results.tsv")).unwrap();
    assert!(ledger.starts_with("suite\tconfig\tseed\t"), "{ledger}");
    assert!(ledger.contains("\ntrain\trun\t5\t"), "{ledger}");

    let ckpt = run.join("final.ckpt");
    let ckpt_s = ckpt.to_str().unwrap().to_string();
    for split in ["val", "train"] {
        let out = m3att(&["eval", "--checkpoint", &ckpt_s, "--data", &data_s, "--split", split]);
        assert_code(&out, 0);
        assert!(stdout_of(&out).contains("mean_iou="));
    }
    let ledger = fs::read_to_string(run.join("results.tsv")).unwrap();
    assert!(ledger.contains("eval\tfinal:val\t5\t"), "{ledger}");
    assert!(ledger.contains("eval\tfinal:train\t5\t"), "{ledger}");

    let dumps = dir.path().join("dumps");
    let sample = data.join("00000");
    let out = m3att(&[
        "dump-attn",
        "--checkpoint", &ckpt_s,
        "--sample", sample.to_str().unwrap(),
        "--out", dumps.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("expression: "));
    for f in ["layer1_mutual.pgm", "layer1_lav.pgm", "layer2_val.pgm", "mask.pgm", "tensors.bin"] {
        assert!(dumps.join(f).is_file(), "{f} missing");
    }

    // Missing sample id.
    let out = m3att(&[
        "dump-attn",
        "--checkpoint", &ckpt_s,
        "--sample", data.join("99999").to_str().unwrap(),
        "--out", dumps.to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}

#[test]
fn degenerate_ablation_completes_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap().to_string();
    assert_code(&m3att(&["gen-data", "--n", "12", "--size", "32", "--out", &data_s]), 0);

    let abl = dir.path().join("abl");
    let out = m3att(&[
        "ablate",
        "--suite", "table2",
        "--seeds", "1",
        "--epochs", "0",
        "--data", &data_s,
        "--out", abl.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    for row in ["generic_lav", "m3att", "m3att+imi", "m3att+imi_star", "full"] {
        assert!(text.contains(row), "missing row {row} in:\n{text}");
        assert!(abl.join(format!("{row}_s1")).join("final.ckpt").is_file());
    }
    assert!(abl.join("summary.txt").is_file());
    let ledger = fs::read_to_string(abl.join("results.tsv")).unwrap();
    assert_eq!(ledger.lines().count(), 1 + 5, "{ledger}");
    assert!(Path::new(&abl).join("full_s1").join("metrics.txt").is_file());
}
