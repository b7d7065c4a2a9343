use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str =
    "pooling_factors=2,4\nwidth=16\nrnn_dim=16\nblocks_per_stage=1\nconv_groups=4\ngate_blocks=2\n\
                    batch_size=2\nepochs=2\nwarmup_steps=2\nseed=3\n";

fn hrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no `{key}=` in {}", stdout(o)))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset of 6 short sine-mix sequences plus the tiny config.
fn setup(dir: &Path) -> (String, String) {
    let data = dir.join("d.hrnn");
    let o = hrnn(&[
        "dataset",
        "--synth",
        "sine-mix",
        "--count",
        "6",
        "--seq-len",
        "64",
        "--seed",
        "2",
        "--out",
        path(&data),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (path(&data).to_string(), path(&cfg).to_string())
}

#[test]
fn selftest_passes_every_check() {
    let o = hrnn(&["selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|l| l.contains("status=pass")), "{lines:?}");
}

#[test]
fn synthetic_dataset_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.hrnn");
    let o = hrnn(&[
        "dataset",
        "--synth",
        "sine-mix",
        "--seq-len",
        "1600",
        "--count",
        "32",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(&o, "sequences"), "32");
    assert_eq!(field(&o, "tokens"), "51200");
    assert!(out.exists());
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        hrnn(&["dataset", "--synth", "sine-mix", "--seq-len", "8"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(hrnn(&["frobnicate"]).status.code(), Some(2));
    let (data, _) = setup(dir.path());
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "width=16\nbogus=1\n").unwrap();
    let o = hrnn(&[
        "train",
        "--config",
        path(&bad),
        "--data",
        &data,
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = hrnn(&[
        "dataset",
        "--synth",
        "sine-mix",
        "--seq-len",
        "8",
        "--encoding",
        "alaw",
        "--out",
        path(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_sample_bench_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let run = dir.path().join("run");
    let o = hrnn(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &data,
        "--out",
        path(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&o, "final_step"), "6");
    let ckpt = field(&o, "checkpoint");
    assert!(Path::new(&ckpt).exists());
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(
        manifest.contains("command=train") && manifest.contains("seed=3"),
        "{manifest}"
    );
    assert_eq!(
        fs::read_to_string(run.join("metrics.log"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let o = hrnn(&["eval", "--checkpoint", &ckpt, "--data", &data]);
    assert!(o.status.success());
    let raw: f64 = field(&o, "nll_bits").parse().unwrap();
    let ema: f64 = field(&o, "nll_bits_ema").parse().unwrap();
    assert!(raw > 0.0 && raw < 8.0 && ema > 0.0, "{raw} {ema}");
    assert_eq!(
        stdout(&hrnn(&["eval", "--checkpoint", &ckpt, "--data", &data])),
        stdout(&o)
    );

    let samples = dir.path().join("samples");
    let o = hrnn(&[
        "sample",
        "--checkpoint",
        &ckpt,
        "--num",
        "2",
        "--len",
        "100",
        "--seed",
        "5",
        "--out",
        path(&samples),
        "--data",
        &data,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&o, "written"), "2");
    for i in 0..2 {
        let wav = fs::read(samples.join(format!("sample_{i:03}.wav"))).unwrap();
        assert_eq!(&wav[..4], b"RIFF");
        assert_eq!(wav.len(), 44 + 200);
    }
    let first = fs::read(samples.join("sample_000.wav")).unwrap();
    hrnn(&[
        "sample",
        "--checkpoint",
        &ckpt,
        "--num",
        "1",
        "--len",
        "100",
        "--seed",
        "5",
        "--out",
        path(&samples),
        "--data",
        &data,
    ]);
    assert_eq!(fs::read(samples.join("sample_000.wav")).unwrap(), first);

    let o = hrnn(&[
        "bench",
        "--checkpoint",
        &ckpt,
        "--len",
        "64",
        "--batch",
        "2",
        "--compare-unpooled",
    ]);
    assert!(o.status.success());
    assert_eq!(field(&o, "tokens"), "128");
    assert!(field(&o, "ktok_per_s").parse::<f64>().unwrap() > 0.0);
    assert!(field(&o, "pooled_over_unpooled").parse::<f64>().unwrap() > 0.0);

    // two more epochs on top of the finished run
    let longer = dir.path().join("longer.cfg");
    fs::write(&longer, TINY.replace("epochs=2", "epochs=3")).unwrap();
    let o = hrnn(&[
        "train",
        "--config",
        path(&longer),
        "--data",
        &data,
        "--out",
        path(&run),
        "--resume",
        &ckpt,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&o, "final_step"), "9");
    let steps: Vec<String> = fs::read_to_string(run.join("metrics.log"))
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(
        steps,
        (1..=9).map(|s| format!("step={s}")).collect::<Vec<_>>()
    );
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let bad = dir.path().join("bad.hrck");
    fs::write(&bad, b"definitely not a checkpoint").unwrap();
    let o = hrnn(&["eval", "--checkpoint", path(&bad), "--data", &data]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
