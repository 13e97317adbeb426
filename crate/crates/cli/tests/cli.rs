use std::path::{Path, PathBuf};

use assert_cmd::Command;
use rlsparse_core::checkpoint::{write_safetensors, Dtype, TensorData};
use rlsparse_core::mask::{write_mask, Bitset, MaskTensorSchema, SubnetMask};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::cargo_bin("rlsparse").unwrap();
    c.env_remove("RLSPARSE_THREADS");
    c
}

fn write_ckpt(dir: &Path, name: &str, tensors: &[(&str, Vec<usize>, Vec<f32>)]) -> PathBuf {
    let p = dir.join(name);
    let data: Vec<TensorData> = tensors
        .iter()
        .map(|(n, s, v)| TensorData::new(*n, Dtype::F32, s.clone(), v.clone()))
        .collect();
    write_safetensors(&p, &data, None).unwrap();
    p
}

fn model(values: &[f32]) -> Vec<(&'static str, Vec<usize>, Vec<f32>)> {
    vec![
        ("model.layers.0.self_attn.q_proj.weight", vec![2, 4], values[..8].to_vec()),
        ("model.layers.1.mlp.up_proj.weight", vec![2, 4], values[8..16].to_vec()),
        ("model.norm.weight", vec![4], values[16..20].to_vec()),
    ]
}

fn base() -> Vec<f32> {
    (0..20).map(|i| i as f32 * 0.25 - 2.0).collect()
}

fn json(out: &[u8]) -> Value {
    serde_json::from_slice(out).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identical_checkpoints_are_fully_sparse() {
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    let b = write_ckpt(dir.path(), "b.safetensors", &model(&base()));
    let out = bin()
        .args(["sparsity", "--init", s(&a), "--tuned", s(&b), "--tol", "1e-5"])
        .assert()
        .success()
        .get_output()
        .stdout
        .clone();
    let v = json(&out);
    assert_eq!(v["schema_version"], "1.0");
    assert_eq!(v["manifest"]["command"], "sparsity");
    assert_eq!(v["manifest"]["inputs"].as_array().unwrap().len(), 2);
    let global = &v["report"]["global"];
    assert_eq!(global.as_array().unwrap().len(), 1);
    assert_eq!(global[0]["sparsity"], 1.0);
    assert_eq!(global[0]["changed"], 0);
    assert_eq!(global[0]["total"], 20);
}

#[test]
fn perturbed_layer_shows_in_report_and_csv() {
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    let mut t = base();
    for v in &mut t[..8] {
        *v += 1e-3;
    }
    let b = write_ckpt(dir.path(), "b.safetensors", &model(&t));
    let v = json(
        &bin()
            .args(["sparsity", "--init", s(&a), "--tuned", s(&b)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    let global = v["report"]["global"].as_array().unwrap();
    assert_eq!(global.len(), 4);
    for g in global {
        assert_eq!(g["changed"], 8);
        assert_eq!(g["sparsity"], 0.6);
    }
    assert_eq!(v["report"]["per_layer"]["0"][3]["sparsity"], 0.0);
    assert_eq!(v["report"]["per_layer"]["1"][3]["sparsity"], 1.0);

    let out = bin()
        .args(["layers", "--init", s(&a), "--tuned", s(&b), "--tol", "1e-5", "--format", "csv"])
        .assert()
        .success()
        .get_output()
        .stdout
        .clone();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# {"));
    assert_eq!(lines.next().unwrap(), "layer_index,kind,tolerance,changed,total,sparsity");
    let rows: Vec<&str> = lines.collect();
    assert!(rows.contains(&"0,Average Sparsity,0.00001,8,8,0"));
    assert!(rows.contains(&"1,Average Sparsity,0.00001,0,8,1"));
}

#[test]
fn schema_mismatch_exits_2_and_names_offenders() {
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    let mut other = model(&base());
    other[2].0 = "model.final_norm.weight";
    let b = write_ckpt(dir.path(), "b.safetensors", &other);
    let out = bin()
        .args(["sparsity", "--init", s(&a), "--tuned", s(&b)])
        .assert()
        .code(2)
        .get_output()
        .clone();
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("model.norm.weight"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn exit_codes_for_usage_and_io() {
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    bin().args(["sparsity", "--init", s(&a)]).assert().code(1);
    bin()
        .args(["sparsity", "--init", s(&a), "--tuned", s(&a), "--tol", "-1"])
        .assert()
        .code(1);
    bin()
        .args(["rank", "--init", s(&a), "--tuned", s(&a), "--policy", "median:3"])
        .assert()
        .code(1);
    let missing = dir.path().join("nope.safetensors");
    bin()
        .args(["sparsity", "--init", s(&a), "--tuned", s(&missing)])
        .assert()
        .code(3);
    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    bin()
        .args(["sparsity", "--init", s(&a), "--tuned", s(&junk)])
        .assert()
        .code(2);
    bin().args(["--help"]).assert().code(0);
}

fn strip_timestamps(mut v: Value) -> Value {
    let m = v["manifest"].as_object_mut().unwrap();
    m.remove("started");
    m.remove("finished");
    v
}

#[test]
fn reruns_are_identical_apart_from_timestamps_and_threads() {
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    let mut t = base();
    t[3] += 0.5;
    t[17] -= 1e-6;
    let b = write_ckpt(dir.path(), "b.safetensors", &model(&t));
    let run = |threads: &str| {
        let out = bin()
            .env("RLSPARSE_THREADS", threads)
            .args(["sparsity", "--init", s(&a), "--tuned", s(&b), "--chunk-elems", "3"])
            .assert()
            .success()
            .get_output()
            .stdout
            .clone();
        let mut v = strip_timestamps(json(&out));
        v["manifest"]["parameters"].as_object_mut().unwrap().remove("threads");
        serde_json::to_string(&v).unwrap()
    };
    let one = run("1");
    assert_eq!(one, run("1"));
    assert_eq!(one, run("4"));
}

#[test]
fn manifest_digests_match_inputs() {
    use sha2::{Digest, Sha256};
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    let v = json(
        &bin()
            .args(["sparsity", "--init", s(&a), "--tuned", s(&a)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    let inputs = v["manifest"]["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 1);
    let expect: String = Sha256::digest(std::fs::read(&a).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(inputs[0]["sha256"], expect);
    assert_eq!(v["manifest"]["version"], env!("CARGO_PKG_VERSION"));
}

fn mask_file(dir: &Path, name: &str, bits: &[bool]) -> PathBuf {
    let schema = [MaskTensorSchema::new("w", vec![bits.len()])];
    let mut m = SubnetMask::empty(&schema, 1e-5, name);
    let mut b = Bitset::zeros(bits.len());
    for (i, &x) in bits.iter().enumerate() {
        b.set(i, x);
    }
    m.tensors[0].bits = b;
    let p = dir.join(name);
    write_mask(&m, &p).unwrap();
    p
}

#[test]
fn disjoint_masks_have_zero_overlap() {
    let dir = TempDir::new().unwrap();
    let m1 = mask_file(dir.path(), "m1.snmk", &[true, true, false, false, false, false, false, false]);
    let m2 = mask_file(dir.path(), "m2.snmk", &[false, false, true, false, true, false, true, false]);
    let v = json(
        &bin()
            .args(["mask", "overlap", "--a", s(&m1), "--b", s(&m2)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    let r = &v["report"];
    assert_eq!(r["o1"], 0.0);
    assert_eq!(r["o2"], 0.0);
    assert_eq!(r["o1_random"], 0.375);
    assert_eq!(r["o2_random"], 0.25);

    let out = dir.path().join("u.snmk");
    let v = json(
        &bin()
            .args(["mask", "intersect", "--a", s(&m1), "--b", s(&m2), "--op", "union", "--mask-out", s(&out)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    assert_eq!(v["report"]["updated"], 5);
    let v = json(
        &bin()
            .args(["mask", "intersect", "--a", s(&m1), "--b", s(&m2), "--mask-out", s(&out)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    assert_eq!(v["report"]["updated"], 0);
}

#[test]
fn mask_schema_mismatch_exits_2() {
    let dir = TempDir::new().unwrap();
    let m1 = mask_file(dir.path(), "m1.snmk", &[true; 8]);
    let m2 = mask_file(dir.path(), "m2.snmk", &[true; 9]);
    bin().args(["mask", "overlap", "--a", s(&m1), "--b", s(&m2)]).assert().code(2);
}

#[test]
fn extract_then_random_like() {
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    let mut t = base();
    t[0] += 1.0;
    t[19] += 1.0;
    let b = write_ckpt(dir.path(), "b.safetensors", &model(&t));
    let m = dir.path().join("m.snmk");
    let v = json(
        &bin()
            .args(["mask", "extract", "--init", s(&a), "--tuned", s(&b), "--mask-out", s(&m)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    assert_eq!(v["report"]["updated"], 2);
    assert_eq!(v["report"]["total"], 20);
    assert_eq!(v["report"]["sha256"].as_str().unwrap().len(), 64);

    let r = dir.path().join("r.snmk");
    for like in [&m, &a] {
        let v = json(
            &bin()
                .args(["mask", "random", "--like", s(like), "--density", "0.5", "--seed", "7", "--mask-out", s(&r)])
                .assert()
                .success()
                .get_output()
                .stdout,
        );
        assert_eq!(v["report"]["total"], 20);
    }
    bin()
        .args(["mask", "overlap", "--a", s(&m), "--b", s(&r), "--by-layer"])
        .assert()
        .success();
    bin()
        .args(["mask", "random", "--like", s(&m), "--density", "1.5", "--mask-out", s(&r)])
        .assert()
        .code(1);
}

#[test]
fn rank_reports_each_matrix() {
    let dir = TempDir::new().unwrap();
    let a = write_ckpt(dir.path(), "a.safetensors", &model(&base()));
    let mut t = base();
    // Rank-one update of the first matrix: outer product of (1, 2) and (1, 0, -1, 0.5).
    let (u, w) = ([1.0f32, 2.0], [1.0f32, 0.0, -1.0, 0.5]);
    for r in 0..2 {
        for c in 0..4 {
            t[r * 4 + c] += u[r] * w[c];
        }
    }
    let b = write_ckpt(dir.path(), "b.safetensors", &model(&t));
    let v = json(
        &bin()
            .args(["rank", "--init", s(&a), "--tuned", s(&b)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    let per = v["report"]["per_matrix"].as_array().unwrap();
    assert_eq!(per.len(), 2);
    let q = per.iter().find(|m| m["name"] == "model.layers.0.self_attn.q_proj.weight").unwrap();
    assert_eq!(q["rank"], 1);
    let up = per.iter().find(|m| m["name"] == "model.layers.1.mlp.up_proj.weight").unwrap();
    assert_eq!(up["rank"], 0);
    assert_eq!(v["manifest"]["parameters"]["policy"], "rel:1.1920928955078125e-7");
}

#[test]
fn dynamics_and_classify() {
    let dir = TempDir::new().unwrap();
    let init = base();
    let mut mid = init.clone();
    mid[0] += 1.0;
    mid[1] += 1.0;
    let mut fin = init.clone();
    fin[1] += 1.0;
    fin[2] += 1.0;
    let i = write_ckpt(dir.path(), "i.safetensors", &model(&init));
    let m = write_ckpt(dir.path(), "m.safetensors", &model(&mid));
    let f = write_ckpt(dir.path(), "f.safetensors", &model(&fin));
    let v = json(
        &bin()
            .args(["dynamics", "--init", s(&i), "--ckpt", s(&m), "--final", s(&f)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    let r = &v["report"];
    assert_eq!(r["sparsity_vs_init"], serde_json::json!([0.9, 0.9]));
    assert_eq!(r["sparsity_consecutive"], serde_json::json!([0.9]));
    assert_eq!(r["outside_final_frac"][0], 0.05);
    assert_eq!(r["outside_final_frac"][1], 0.0);

    let v = json(
        &bin()
            .args(["classify", "--init", s(&i), "--ckpt", s(&m), "--final", s(&f)])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    assert_eq!(v["report"]["untouched"], 17);
    assert_eq!(v["report"]["canceled"], 1);
    assert_eq!(v["report"]["subnetwork"], 2);
    bin()
        .args(["classify", "--init", s(&i), "--final", s(&f)])
        .assert()
        .code(2);
}

#[test]
fn help_documents_defaults() {
    let help = |args: &[&str]| {
        String::from_utf8(bin().args(args).arg("--help").assert().success().get_output().stdout.clone()).unwrap()
    };
    let h = help(&["sparsity"]);
    assert!(h.contains("[default: 1e-8 1e-7 1e-6 1e-5]"), "{h}");
    assert!(h.contains("[default: 4194304]"));
    assert!(help(&["rank"]).contains("[default: rel:1.1920928955078125e-7]"));
    assert!(help(&["mask", "extract"]).contains("[default: 1e-5]"));
    assert!(help(&["toy", "run"]).contains("[default: 2000]"));
}

#[test]
fn toy_run_dir_feeds_the_checkpoint_pipeline() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let v = json(
        &bin()
            .args([
                "toy", "run", "--steps", "30", "--hidden-dim", "8", "--input-dim", "4", "--num-actions", "3",
                "--objective", "SFT_OOD", "--lr", "0.05", "--seed", "3", "--snapshot-every", "10", "--run-dir",
                s(&run),
            ])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    let final_sparsity = v["report"]["final_sparsity"].as_f64().unwrap();
    assert!(final_sparsity < 1.0);
    for f in ["init.safetensors", "final.safetensors", "mask.snmk", "log.csv", "config.json", "step_000020.safetensors"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let d = json(
        &bin()
            .args([
                "sparsity",
                "--init",
                s(&run.join("init.safetensors")),
                "--tuned",
                s(&run.join("final.safetensors")),
                "--tol",
                "0",
            ])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    assert_eq!(d["report"]["global"][0]["sparsity"].as_f64().unwrap(), final_sparsity);
    bin()
        .args([
            "dynamics",
            "--init",
            s(&run.join("init.safetensors")),
            "--ckpt",
            s(&run.join("step_000010.safetensors")),
            "--ckpt",
            s(&run.join("step_000020.safetensors")),
            "--final",
            s(&run.join("final.safetensors")),
            "--tol",
            "0",
        ])
        .assert()
        .success();

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "steps = 5\ninput_dim = 4\nhidden_dim = 8\nnum_actions = 3\n").unwrap();
    let v = json(
        &bin()
            .args(["toy", "sweep", "--config", s(&cfg), "--seeds", "1,2"])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    assert_eq!(v["report"]["entries"].as_array().unwrap().len(), 4);
    let v = json(
        &bin()
            .args(["toy", "replay", "--config", s(&cfg), "--lr", "0", "--seeds", "1"])
            .assert()
            .success()
            .get_output()
            .stdout,
    );
    assert_eq!(v["report"]["runs"][0]["agreement_1e4"], 1.0);
    bin().args(["toy", "run", "--config", s(&cfg), "--objective", "PPO"]).assert().code(1);
}
