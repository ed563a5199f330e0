use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hve(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hve"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn run_dir(o: &Output) -> PathBuf {
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_is_cached_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "gen.json", r#"{"n_trajectories": 8, "horizon": 15}"#);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    let first = run_dir(&hve(&out_a, &["gen", "--config", &cfg, "--seed", "4"]));
    let again = hve(&out_a, &["gen", "--config", &cfg, "--seed", "4"]);
    assert_eq!(run_dir(&again), first);
    assert!(String::from_utf8_lossy(&again.stderr).contains("cache hit"));

    let single = run_dir(&hve(&out_b, &["gen", "--config", &cfg, "--seed", "4", "--jobs", "1"]));
    assert_eq!(first.file_name(), single.file_name());
    for name in ["mdp.json", "behavior.json", "dataset.jsonl", "manifest.json"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(single.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");

    let bad = write_config(tmp.path(), "bad.json", r#"{"n_trajectories": 8, "colour": 1}"#);
    assert_eq!(hve(&out, &["gen", "--config", &bad]).status.code(), Some(2));

    let missing = write_config(tmp.path(), "missing.json", r#"{"data": {"run": "/nonexistent/run"}}"#);
    assert_eq!(hve(&out, &["fit", "--config", &missing]).status.code(), Some(3));

    let gen_a = write_config(tmp.path(), "a.json", r#"{"n_trajectories": 8, "horizon": 15}"#);
    let gen_b = write_config(
        tmp.path(),
        "b.json",
        r#"{"env": {"kind": "random", "n_states": 8, "n_actions": 2, "gamma": 0.9, "seed": 3},
            "behavior": {"kind": "uniform"}, "n_trajectories": 8, "horizon": 15}"#,
    );
    let data_a = run_dir(&hve(&out, &["gen", "--config", &gen_a]));
    let data_b = run_dir(&hve(&out, &["gen", "--config", &gen_b]));
    let fit_b = write_config(tmp.path(), "fit.json", &format!(r#"{{"data": {{"run": {:?}}}}}"#, data_b));
    let model_b = run_dir(&hve(&out, &["fit", "--config", &fit_b]));
    let ope = write_config(
        tmp.path(),
        "ope.json",
        &format!(r#"{{"data": {{"run": {:?}}}, "model": {{"run": {:?}}}}}"#, data_a, model_b),
    );
    assert_eq!(hve(&out, &["ope", "--config", &ope]).status.code(), Some(4));

    let verify = write_config(tmp.path(), "verify.json", r#"{"criteria": [5]}"#);
    assert_eq!(hve(&out, &["verify", "--config", &verify]).status.code(), Some(5));
    // a cached failing verification still fails
    assert_eq!(hve(&out, &["verify", "--config", &verify]).status.code(), Some(5));
}
