use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mailpp() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mailpp"));
    c.env_remove("MAIL_SEED");
    c
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn unknown_command_exits_with_usage_error() {
    let out = mailpp().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn count_params_on_the_full_size_config() {
    let out = mailpp()
        .args(["count-params", "--config"])
        .arg(config_dir().join("clip_b16.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("3831296"));
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn check_passes_on_the_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("checks.csv");
    let out = mailpp()
        .args(["check", "--trials", "20", "--config"])
        .arg(config_dir().join("toy.json"))
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    assert!(!stdout(&out).contains("FAIL"));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() > 1);
}

#[test]
fn seed_from_environment_matches_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"training": {"steps": 3}}"#);
    let run = |name: &str, flag: Option<&str>, env: Option<&str>| {
        let data = dir.path().join(format!("{name}-data"));
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        for args in [
            vec!["gen-data", "--out", data.to_str().unwrap()],
            vec![
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                ckpt.to_str().unwrap(),
            ],
        ] {
            let mut c = mailpp();
            c.args(&args).arg("--config").arg(&cfg);
            if let Some(s) = flag {
                c.args(["--seed", s]);
            }
            if let Some(s) = env {
                c.env("MAIL_SEED", s);
            }
            let out = c.output().unwrap();
            assert!(out.status.success(), "{}", stderr(&out));
        }
        (
            std::fs::read(data.join("dataset.mail")).unwrap(),
            std::fs::read(&ckpt).unwrap(),
        )
    };
    let by_flag = run("flag", Some("11"), None);
    let by_env = run("env", None, Some("11"));
    let flag_wins = run("both", Some("11"), Some("12"));
    let other = run("other", Some("12"), None);
    assert!(by_flag == by_env);
    assert!(by_flag == flag_wins);
    assert!(by_flag.1 != other.1);
}

#[test]
fn bad_magic_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"NOTACKPT\x01\0\0\0\0\0\0\0").unwrap();
    let out = mailpp()
        .args(["fuse", "--ckpt"])
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path().join("out.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad magic"), "{}", stderr(&out));
    assert!(!dir.path().join("out.ckpt").exists());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (body, key) in [
        (r#"{"coupling": {"mode": "bidirectional", "d_m": -1}}"#, "coupling.d_m"),
        (r#"{"coupling": {"mode": "bidirectional", "d_m": 0}}"#, "d_m"),
        (r#"{"training": {"stepz": 3}}"#, "stepz"),
        (r#"{"seed": 1, "seed": 2}"#, "seed"),
    ] {
        let cfg = write_config(dir.path(), body);
        let out = mailpp().args(["count-params", "--config"]).arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{body}");
        assert!(stderr(&out).contains(key), "{body}: {}", stderr(&out));
    }
}

#[test]
fn trained_and_fused_checkpoints_evaluate_alike() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"training": {"steps": 20, "lr": 0.01}}"#);
    let data = dir.path().join("data");
    let ckpt = dir.path().join("run.ckpt");
    let fused = dir.path().join("fused.ckpt");
    let norms = dir.path().join("norms.csv");
    let steps: Vec<Vec<&std::ffi::OsStr>> = vec![
        vec![
            "gen-data".as_ref(),
            "--config".as_ref(),
            cfg.as_ref(),
            "--out".as_ref(),
            data.as_ref(),
        ],
        vec![
            "train".as_ref(),
            "--config".as_ref(),
            cfg.as_ref(),
            "--data".as_ref(),
            data.as_ref(),
            "--out".as_ref(),
            ckpt.as_ref(),
        ],
        vec![
            "fuse".as_ref(),
            "--ckpt".as_ref(),
            ckpt.as_ref(),
            "--out".as_ref(),
            fused.as_ref(),
        ],
        vec![
            "report-norms".as_ref(),
            "--ckpt".as_ref(),
            ckpt.as_ref(),
            "--out".as_ref(),
            norms.as_ref(),
        ],
    ];
    for args in steps {
        let out = mailpp().args(&args).output().unwrap();
        assert!(out.status.success(), "{:?}: {}", args[0], stderr(&out));
    }
    let log = std::fs::read_to_string(dir.path().join("run.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,L_ce,L_reg_v,L_reg_t,L,acc"));
    assert_eq!(log.lines().count(), 21);
    assert!(std::fs::read_to_string(&norms)
        .unwrap()
        .starts_with("block,position,side,norm"));

    let eval = |c: &Path, split: &str| {
        let out = mailpp()
            .args(["eval", "--split", split, "--ckpt"])
            .arg(c)
            .arg("--data")
            .arg(&data)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        stdout(&out)
    };
    for split in ["base", "novel"] {
        let a = eval(&ckpt, split);
        assert!(a.starts_with(&format!("{split} accuracy ")), "{a}");
        assert_eq!(a, eval(&fused, split));
    }
}
