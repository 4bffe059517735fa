use std::path::PathBuf;
use std::process::{Command, Output};

use nais_core::dataio::load_ncf_prefix;
use nais_core::model::ModelParams;
use nais_core::store::{load_model, save_model};
use tempfile::TempDir;

/// Runs the binary with a whitespace-separated argument line.
fn nais(args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nais"))
        .args(args.split_whitespace())
        .output()
        .expect("run nais")
}

fn ok(args: &str) -> String {
    let out = nais(args);
    assert!(
        out.status.success(),
        "nais {args} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(args: &str) -> Option<i32> {
    nais(args).status.code()
}

/// Value of a tab-separated `key\tvalue` line.
fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} line in\n{text}"))
}

/// Attention shares printed by `explain`, in output order.
fn shares(explained: &str) -> Vec<f64> {
    explained
        .lines()
        .skip_while(|l| !l.starts_with("user"))
        .skip(1)
        .take_while(|l| !l.starts_with("probability"))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect()
}

struct Workspace {
    dir: TempDir,
    data: String,
    fism: String,
    nais: String,
}

impl Workspace {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }
}

fn workspace(users: usize, items: usize) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, fism, nais) = (path("synth"), path("fism.model"), path("nais.model"));
    ok(&format!(
        "synth --out {data} --users {users} --items {items} --topics 10 --seed 3"
    ));
    ok(&format!(
        "train --data {data} --model fism --k 8 --epochs 3 --out {fism}"
    ));
    ok(&format!(
        "train --data {data} --model nais-prod --k 8 --attention-factor 4 --epochs 2 --pretrain {fism} --out {nais}"
    ));
    Workspace { dir, data, fism, nais }
}

#[test]
fn train_eval_explain_stats_pipeline() {
    let ws = workspace(60, 250);
    let (data, model) = (&ws.data, &ws.nais);
    let ds = load_ncf_prefix(data).unwrap();
    assert_eq!(ds.num_users, 60);
    assert!(matches!(load_model(model).unwrap(), ModelParams::Nais(_)));

    let log = ok(&format!(
        "train --data {data} --model fism --k 4 --epochs 2 --out {}",
        ws.path("small.model")
    ));
    let init_seed = format!("# init_seed={}", 1u64 ^ 0x1b87_3593_cc9e_2d51);
    assert!(log.lines().any(|l| l == init_seed), "{log}");
    let epochs: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(epochs.len(), 3, "{log}");
    assert!(epochs[0].starts_with("0\t\t"));

    let report = ok(&format!("eval --data {data} --model {model}"));
    assert_eq!(field(&report, "users"), "60");
    let ndcg: f64 = field(&report, "ndcg@10").parse().unwrap();
    assert!((0.0..=1.0).contains(&ndcg));
    let pop = ok(&format!("eval --data {data} --baseline pop --topk 5"));
    assert!(pop.contains("hr@5\t"));
    ok(&format!("eval --data {data} --baseline itemknn --neighbors 20"));

    let explained = ok(&format!("explain --data {data} --model {model} --user 4"));
    assert!(explained.contains(&format!("target\t{}", ds.test_pairs[4].1)));
    assert!((shares(&explained).iter().sum::<f64>() - 1.0).abs() < 1e-4);

    let csv = ws.path("attention.csv");
    ok(&format!("stats --data {data} --model {model} --out {csv}"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("user,item,mean,variance"));
    assert_eq!(lines.count(), 60);
}

#[test]
fn uniform_attention_explains_as_even_shares() {
    let ws = workspace(30, 200);
    let ModelParams::Nais(mut params) = load_model(&ws.nais).unwrap() else {
        panic!("not NAIS")
    };
    params.net.h.iter_mut().for_each(|h| *h = 0.0);
    let flat = PathBuf::from(ws.path("flat.model"));
    save_model(&ModelParams::Nais(params), &flat).unwrap();

    let ds = load_ncf_prefix(&ws.data).unwrap();
    let (user, target) = ds.test_pairs[2];
    let n = ds.history(user).iter().filter(|&&j| j != target).count();
    for model in [flat.to_str().unwrap(), &ws.fism] {
        let w = shares(&ok(&format!("explain --data {} --model {model} --user 2", ws.data)));
        assert_eq!(w.len(), n);
        assert!(w.iter().all(|x| (x - 1.0 / n as f64).abs() < 1e-6), "{w:?}");
    }
}

#[test]
fn refresh_demo_matches_recomputation() {
    let ws = workspace(20, 1500);
    let out = ok(&format!(
        "refresh-demo --data {} --model {} --user 0 --item 7 --num-events 1000 --check-every 100",
        ws.data, ws.nais
    ));
    assert_eq!(field(&out, "refreshes"), "1000");
    assert_eq!(field(&out, "checks"), "10");
    assert_eq!(field(&out, "failures"), "0");
    assert_eq!(field(&out, "logits_per_refresh"), "1");
}

#[test]
fn bad_input_maps_to_exit_codes() {
    let ws = workspace(20, 200);
    let (data, fism, model) = (&ws.data, &ws.fism, &ws.nais);
    let out = ws.path("x.model");

    let beta = nais(&format!("train --data {data} --beta 1.5 --out {out}"));
    assert_eq!(beta.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&beta.stderr).contains("outside [0, 1]"));
    assert_eq!(
        exit_code(&format!("train --data {data} --model svd --out {out}")),
        Some(2)
    );
    // A FISM file with a different embedding size cannot seed NAIS.
    assert_eq!(
        exit_code(&format!(
            "train --data {data} --k 5 --epochs 1 --pretrain {fism} --out {out}"
        )),
        Some(2)
    );

    assert_eq!(
        exit_code(&format!("explain --data {data} --model {model} --user 999")),
        Some(4)
    );
    assert_eq!(
        exit_code(&format!("explain --data {data} --model {model} --user 1 --item 5000")),
        Some(4)
    );
    assert_eq!(exit_code(&format!("stats --data {data} --model {fism}")), Some(2));
    assert_eq!(exit_code(&format!("eval --data {data} --model {out}")), Some(1));
}
