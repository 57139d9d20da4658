use std::fs;
use std::path::Path;
use std::process::Command;

fn homcorr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_homcorr"))
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

const SMALL: &str = "side = 8\nsamples = 6\n[quadrature]\nnodes = 2\nsamples = 6\n[analysis]\nbootstrap = 50\n";

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, SMALL).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = homcorr()
            .args(["correlation-map", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success());
        for name in ["manifest.json", "summary.json"] {
            assert!(out.join(name).exists(), "{name}");
        }
        outputs.push(csv_bytes(&out));
    }
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "side = 8\n[quadrature]\nnodez = 3\n").unwrap();
    let out = homcorr().args(["estimate-ah", "--config"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("quadrature"), "{stderr}");
    assert!(stderr.contains("nodez"), "{stderr}");
}

#[test]
fn conv_bounds_pass_and_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv");
    let run = homcorr().arg("conv-bounds").arg("--out").arg(&out).output().unwrap();
    assert!(run.status.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], serde_json::Value::Bool(true));
    assert_eq!(summary["criteria"].as_array().unwrap().len(), 3);
}
