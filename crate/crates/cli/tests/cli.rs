use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const INTRO: &str = r#"{"sentence": "The service is good and the food is wonderful", "quads": [{"at": "Service", "ot": "good", "ac": "service#general", "sp": "positive"}, {"at": "food", "ot": "wonderful", "ac": "food#quality", "sp": "positive"}]}
"#;

fn uaul(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uaul"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = uaul(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn encode_produces_paraphrase_target() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("intro.jsonl"), INTRO).unwrap();
    ok(dir.path(), &["encode", "--input", "intro.jsonl", "--output", "enc.jsonl", "--template", "paraphrase"]);
    let enc = fs::read_to_string(dir.path().join("enc.jsonl")).unwrap();
    assert!(enc.contains("service general is great because Service is good [SSEP] food quality is great because food is wonderful"));
}

#[test]
fn encode_decode_is_identity_for_every_template() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "4", "gen-data", "--out", "data", "--train", "40", "--dev", "5", "--test", "5"]);
    let original = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    for t in ["paraphrase", "gas", "special", "special:sp,ac,ot,at"] {
        ok(dir.path(), &["encode", "--input", "data/train.jsonl", "--output", "enc.jsonl", "--template", t]);
        ok(dir.path(), &["decode", "--input", "enc.jsonl", "--output", "dec.jsonl", "--template", t]);
        assert_eq!(fs::read_to_string(dir.path().join("dec.jsonl")).unwrap(), original, "{t}");
    }
}

#[test]
fn score_of_gold_against_itself_is_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("intro.jsonl"), INTRO).unwrap();
    let out = ok(dir.path(), &["score", "--pred", "intro.jsonl", "--gold", "intro.jsonl"]);
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["f1"], 1.0);
    assert_eq!(report["matched"], 2);
}

#[test]
fn errors_have_distinct_messages_and_codes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--out", "data", "--train", "10", "--dev", "2", "--test", "2"]);

    let unknown = uaul(dir.path(), &["train", "--data", "data", "--checkpoint", "m.json", "--beam", "4"]);
    let missing = uaul(dir.path(), &["train", "--data", "nowhere", "--checkpoint", "m.json"]);
    let invalid = uaul(dir.path(), &["train", "--data", "data", "--checkpoint", "m.json", "--negatives", "topk:3"]);
    let codes: Vec<_> = [&unknown, &missing, &invalid].iter().map(|o| o.status.code().unwrap()).collect();
    assert_eq!(codes, [2, 4, 3]);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("--beam"));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("use_mc = false"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--out", "data", "--train", "12", "--dev", "2", "--test", "2"]);
    fs::write(dir.path().join("c.conf"), "epochs = 5\nd_model = 8\nd_ff = 8\nn_layers = 1\n").unwrap();
    let out = ok(dir.path(), &["train", "--data", "data", "--checkpoint", "m.json", "--config", "c.conf", "--epochs", "2"]);
    let epochs = out.lines().filter(|l| l.contains("\"epoch\"")).count();
    assert_eq!(epochs, 2);
    let ck = fs::read_to_string(dir.path().join("m.json")).unwrap();
    assert!(ck.contains("epochs = 2") && ck.contains("d_model = 8"));
}

#[test]
fn eval_reloads_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--out", "data", "--train", "12", "--dev", "2", "--test", "3"]);
    ok(dir.path(), &["train", "--data", "data", "--checkpoint", "m.json", "--epochs", "1", "--d-model", "8", "--d-ff", "8"]);
    let out = ok(dir.path(), &["eval", "--checkpoint", "m.json", "--input", "data/test.jsonl", "--output", "pred.jsonl"]);
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["examples"].as_array().unwrap().len(), 3);
    assert_eq!(fs::read_to_string(dir.path().join("pred.jsonl")).unwrap().lines().count(), 3);
}
