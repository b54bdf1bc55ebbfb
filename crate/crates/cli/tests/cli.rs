use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relcirc_core::synopsis::{AttnGeometry, AttnLayout, PromptMasks};
use relcirc_core::tensor_io::{read_tensor, write_tensor, DType};
use serde_json::Value;
use tempfile::TempDir;

fn relcirc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relcirc"))
        .args(args)
        .env_remove("RUST_LOG")
        .env_remove("RELCIRC_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = relcirc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = relcirc(&["gen-dataset", "--out", "x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = relcirc(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = relcirc(&["--workers", "0", "plan", "--in", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_1_with_module_tag() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = relcirc(&["evaluate", "--labels", s(&missing), "--out", s(&dir.path().join("r.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[scene-gen]") || err.contains("error[io]"), "{err}");

    let out = relcirc(&[
        "plan", "--layers", "4", "--heads", "2", "--text-tokens", "8", "--image-tokens", "16", "--mask-head", "L9H0:1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[embed-edit]"));

    let bad = dir.path().join("bad.atns");
    fs::write(&bad, b"NOPE0000").unwrap();
    let labels = dir.path().join("f.csv");
    fs::write(&labels, "a\nx\ny\n").unwrap();
    let out = relcirc(&["varpart", "--emb", s(&bad), "--labels", s(&labels)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[tensor-io]"));
}

#[test]
fn generated_dataset_evaluates_cleanly() {
    let dir = TempDir::new().unwrap();
    let ds = dir.path().join("ds");
    let summary: Value = serde_json::from_str(&ok(&[
        "gen-dataset", "--out", s(&ds), "--n", "40", "--seed", "7", "--occlusion", "reject",
    ]))
    .unwrap();
    assert_eq!(summary["samples"], 40);
    let labels = ds.join("labels.jsonl");
    assert_eq!(fs::read_to_string(&labels).unwrap().lines().count(), 40);
    assert_eq!(fs::read_dir(ds.join("images")).unwrap().count(), 40);
    assert_eq!(json(&ds.join("config.json"))["seed"], 7);

    let results = dir.path().join("results.jsonl");
    let sum_path = dir.path().join("summary.json");
    ok(&["evaluate", "--labels", s(&labels), "--out", s(&results), "--summary", s(&sum_path)]);
    let sum = json(&sum_path);
    assert_eq!(sum["evaluated"], 40);
    let m = &sum["metrics"];
    for key in ["shape", "color", "unique_binding"] {
        assert_eq!(m[key], 1.0, "{key}");
    }
    assert!(m["overall"].as_f64().unwrap() >= 0.95);
    assert_eq!(fs::read_to_string(&results).unwrap().lines().count(), 40);

    let table = ok(&["report", "metrics", "--entry", &format!("DiT-B,rnd,{}", s(&sum_path))]);
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "model name,template,shape,color,bind,sp rel,sp rel+,Dx,Dy");
    assert!(lines.next().unwrap().starts_with("DiT-B,rnd,1.000,1.000,1.000,"));
}

#[test]
fn occluding_samples_are_skipped_by_evaluate() {
    let dir = TempDir::new().unwrap();
    let ds = dir.path().join("ds");
    let gen: Value = serde_json::from_str(&ok(&[
        "gen-dataset", "--out", s(&ds), "--n", "60", "--seed", "3", "--occlusion", "allow",
    ]))
    .unwrap();
    let sum_path = dir.path().join("summary.json");
    ok(&[
        "evaluate", "--labels", s(&ds.join("labels.jsonl")), "--out", s(&dir.path().join("r.jsonl")),
        "--summary", s(&sum_path),
    ]);
    let sum = json(&sum_path);
    assert_eq!(sum["skipped_occluding"], gen["occluding"]);
    assert_eq!(
        sum["evaluated"].as_u64().unwrap() + sum["skipped_occluding"].as_u64().unwrap(),
        60
    );
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) {
    let ds = root.join("ds");
    ok(&["gen-dataset", "--out", s(&ds), "--n", "24", "--seed", "11"]);
    let labels = ds.join("labels.jsonl");
    ok(&["evaluate", "--labels", s(&labels), "--out", s(&root.join("r.jsonl")), "--summary", s(&root.join("s.json"))]);
    ok(&[
        "encode", "--labels", s(&labels), "--kind", "rte-pos", "--dim", "32", "--seed", "5", "--out",
        s(&root.join("enc.atns")), "--dict-out", s(&root.join("dict.atns")),
    ]);
    let rows: Vec<Value> = fs::read_to_string(&labels)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut csv = String::from("shape1,relation\n");
    for r in &rows {
        csv.push_str(&format!("{},{}\n", r["shape1"].as_str().unwrap(), r["spatial_relationship"].as_str().unwrap()));
    }
    fs::write(root.join("f.csv"), csv).unwrap();
    ok(&[
        "varpart", "--emb", s(&root.join("enc.atns")), "--token", "3", "--labels", s(&root.join("f.csv")), "--perm",
        "30", "--seed", "1", "--out", s(&root.join("vp.csv")), "--json", s(&root.join("vp.json")),
    ]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let ta = tree_bytes(a.path());
    let tb = tree_bytes(b.path());
    assert!(ta.len() > 24);
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between runs", pa.display());
    }
}

#[test]
fn varpart_report_has_table_columns() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    // two factors with planted effects on a 6-dimensional representation
    let n = 36;
    let mut data = Vec::new();
    let mut csv = String::from("colour,size\n");
    for i in 0..n {
        let c = i % 3;
        let z = (i / 3) % 2;
        csv.push_str(&format!("c{c},s{z}\n"));
        for j in 0..6 {
            let noise = (((i * 7 + j * 13) % 17) as f32 - 8.0) * 0.01;
            let v = if j == c { 2.0 } else { 0.0 } + if j == 3 + z { 1.0 } else { 0.0 } + noise;
            data.push(v);
        }
    }
    let emb = root.join("x.atns");
    write_tensor(&emb, &[n, 6], DType::F32, &data).unwrap();
    fs::write(root.join("f.csv"), csv).unwrap();
    let out = ok(&["varpart", "--emb", s(&emb), "--labels", s(&root.join("f.csv")), "--perm", "100", "--seed", "1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "Feature,Levels,df_eff,df_res,SS_tot,SSR_marg,R²_marg,SSR_part,R²_part,η²_p,p_perm");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("colour,3,2,32,"));
    assert!(lines[2].starts_with("size,2,1,32,"));
    for l in &lines[1..] {
        assert!(l.ends_with(",0.0099"), "{l}");
    }

    // squared distances go through classical scaling to the same partition
    let mut d = vec![0f32; n * n];
    for i in 0..n {
        for k in 0..n {
            let (a, b) = (&data[i * 6..i * 6 + 6], &data[k * 6..k * 6 + 6]);
            d[i * n + k] = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
        }
    }
    let dist = root.join("d.atns");
    write_tensor(&dist, &[n, n], DType::F32, &d).unwrap();
    let json_path = root.join("vp.json");
    let out_mds = ok(&[
        "varpart", "--distances", s(&dist), "--labels", s(&root.join("f.csv")), "--perm", "0", "--json", s(&json_path),
    ]);
    let col = |text: &str, row: usize, c: usize| -> f64 {
        text.lines().nth(row).unwrap().split(',').nth(c).unwrap().parse().unwrap()
    };
    for row in 1..=2 {
        for c in [6, 8, 9] {
            assert!((col(&out, row, c) - col(&out_mds, row, c)).abs() <= 2e-4);
        }
    }
    let r2 = json(&json_path)["r2_total"].as_f64().unwrap();
    assert!(r2 > 0.99);
    let rendered = ok(&["report", "varpart", "--json", s(&json_path)]);
    assert_eq!(rendered, out_mds);
}

#[test]
fn effects_and_inverse_edit_round_trip() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let n = 24;
    let dim = 8;
    let mut data = Vec::new();
    let mut csv = String::from("relation\n");
    for i in 0..n {
        let r = i % 2;
        csv.push_str(if r == 0 { "above\n" } else { "below\n" });
        for j in 0..dim {
            let sign = if r == 0 { 1.0 } else { -1.0 };
            data.push(sign * (j as f32 + 1.0) * 0.5 + ((i * 5 + j) % 7) as f32 * 0.01);
        }
    }
    let emb = root.join("x.atns");
    write_tensor(&emb, &[n, dim], DType::F32, &data).unwrap();
    fs::write(root.join("f.csv"), csv).unwrap();
    let eff = root.join("eff.atns");
    let summary: Value = serde_json::from_str(&ok(&[
        "effects", "--emb", s(&emb), "--labels", s(&root.join("f.csv")), "--out", s(&eff), "--pca", "2", "--pca-out",
        s(&root.join("pca.csv")),
    ]))
    .unwrap();
    assert_eq!(summary["factors"]["relation"], serde_json::json!(["above", "below"]));
    assert!(summary["pca_explained_ratio"][0].as_f64().unwrap() > 0.95);
    assert!(root.join("eff.index.json").exists());
    let pca = fs::read_to_string(root.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().next().unwrap(), "relation,pc1,pc2");
    assert_eq!(pca.lines().count(), n + 1);

    let prompt = root.join("p.atns");
    let p: Vec<f32> = (0..4 * dim).map(|k| (k as f32 * 0.37).sin()).collect();
    write_tensor(&prompt, &[1, 4, dim], DType::F32, &p).unwrap();
    let fwd = root.join("fwd.atns");
    let back = root.join("back.atns");
    ok(&[
        "edit-embedding", "--emb", s(&prompt), "--effects", s(&eff), "--token-index", "2", "--remove", "relation=above",
        "--add", "relation=below", "--alpha", "1", "--out", s(&fwd),
    ]);
    let plan = root.join("plan.json");
    fs::write(
        &plan,
        r#"{"token_index": 2, "remove": {"factor": "relation", "level": "below"}, "add": {"factor": "relation", "level": "above"}, "alpha": 1.0}"#,
    )
    .unwrap();
    ok(&["edit-embedding", "--emb", s(&fwd), "--effects", s(&eff), "--plan", s(&plan), "--out", s(&back)]);
    let (t0, t1, t2) = (read_tensor(&prompt).unwrap(), read_tensor(&fwd).unwrap(), read_tensor(&back).unwrap());
    assert_eq!(t1.dims, vec![1, 4, dim]);
    for (k, ((a, b), c)) in t0.data.iter().zip(&t1.data).zip(&t2.data).enumerate() {
        if k / dim == 2 {
            assert!((a - b).abs() > 0.1);
        } else {
            assert_eq!(a, b);
        }
        assert!((a - c).abs() < 1e-5);
    }
    let out = relcirc(&[
        "edit-embedding", "--emb", s(&prompt), "--effects", s(&eff), "--token-index", "2", "--remove", "relation=left",
        "--add", "relation=below", "--out", s(&fwd),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

const L: usize = 3;
const T: usize = 2;
const N: usize = 2;
const H: usize = 4;
const S: usize = 4;
const W: usize = 5;

/// Uniform rows except at `hot` (layer, head), where image tokens 0..2 of
/// conditional samples attend only to text token 1.
fn planted_attention(path: &Path, hot: (usize, usize)) {
    let g = AttnGeometry {
        layers: L,
        steps: T,
        samples: N,
        heads: H,
        image_tokens: S,
        text_tokens: W,
        layout: AttnLayout::LayerLeading,
    };
    let mut data = Vec::with_capacity(L * T * 2 * N * H * S * W);
    for l in 0..L {
        for _t in 0..T {
            for n in 0..2 * N {
                for h in 0..H {
                    for s in 0..S {
                        for w in 0..W {
                            let planted = (l, h) == hot && n >= N && s < 2;
                            data.push(if planted { (w == 1) as u8 as f32 } else { 1.0 / W as f32 });
                        }
                    }
                }
            }
        }
    }
    write_tensor(path, &g.dims(), DType::F32, &data).unwrap();
    g.axis_meta().save(path).unwrap();
}

fn masks(prompt: &str, empty_target: bool) -> PromptMasks {
    let obj = vec![vec![0.5, 0.5, 0.0, 0.0]; N];
    let bg = if empty_target { vec![vec![0.0; S]; N] } else { vec![vec![0.0, 0.0, 0.5, 0.5]; N] };
    PromptMasks {
        prompt: prompt.to_string(),
        image_tokens: S,
        image: [("circle".to_string(), obj), ("background".to_string(), bg)].into(),
        text: [
            ("circle".to_string(), vec![0.0, 1.0, 0.0, 0.0, 0.0]),
            ("relation".to_string(), vec![0.0, 0.0, 1.0, 1.0, 0.0]),
        ]
        .into(),
    }
}

#[test]
fn sweep_over_synthetic_prompts() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let attn = root.join("attn");
    let mdir = root.join("masks");
    fs::create_dir_all(&attn).unwrap();
    fs::create_dir_all(&mdir).unwrap();
    let hot = [(2, 1), (0, 3), (1, 0)];
    let ids = ["p00", "p01", "p02"];
    for (k, id) in ids.iter().enumerate() {
        planted_attention(&attn.join(format!("{id}.atns")), hot[k]);
        let m = masks(&format!("prompt {k}"), k == 2);
        fs::write(mdir.join(format!("{id}.masks.json")), serde_json::to_string(&m).unwrap()).unwrap();
    }
    let out = root.join("out");
    let run = relcirc(&[
        "--workers", "2", "sweep", "--attn-dir", s(&attn), "--masks", s(&mdir), "--k", "2", "--expect", "3",
        "--out-dir", s(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let logs = String::from_utf8_lossy(&run.stderr);
    let done: Vec<Value> = logs
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).expect("log lines are JSON"))
        .filter(|v| v["fields"]["message"] == "prompt done")
        .collect();
    assert_eq!(done.len(), 3);

    for (k, id) in ids.iter().enumerate() {
        let f = json(&out.join(format!("{id}.synopsis.json")));
        assert_eq!(f["prompt"], format!("prompt {k}"));
        let pair = f["pairs"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["image"] == "circle" && p["text"] == "circle")
            .unwrap();
        assert_eq!(pair["topk_cond"][0]["layer"], hot[k].0);
        assert_eq!(pair["topk_cond"][0]["head"], hot[k].1);
        assert!((pair["topk_cond"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-9);
        assert!((pair["topk_cond"][1]["score"].as_f64().unwrap() - 0.2).abs() < 1e-6);
        let skipped = f["skipped"].as_array().unwrap();
        assert_eq!(skipped.len(), if k == 2 { 2 } else { 0 });
    }
    let csv = fs::read_to_string(out.join("topk_summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "prompt,image,text,branch,rank,layer,head,label,score");
    // 4 pairs for two prompts, 2 for the one with an empty target; 2 branches × k = 2
    assert_eq!(lines.count(), (4 + 4 + 2) * 2 * 2);
    assert!(csv.contains("p00,circle,circle,cond,1,2,1,L2H1,1.000000"));

    // single-prompt runs agree with the sweep byte for byte
    let single = ok(&[
        "synopsis", "--attn", s(&attn.join("p01.atns")), "--masks", s(&mdir.join("p01.masks.json")), "--k", "2",
    ]);
    assert_eq!(single, fs::read_to_string(out.join("p01.synopsis.json")).unwrap());

    let heat = ok(&[
        "report", "heatmap", "--synopsis", s(&out.join("p00.synopsis.json")), "--pair", "circle:circle",
    ]);
    let rows: Vec<&str> = heat.lines().collect();
    assert_eq!(rows[0], "layer,h0,h1,h2,h3");
    assert_eq!(rows.len(), L + 1);
    assert_eq!(rows[3].split(',').nth(2).unwrap(), "1");

    let wrong = relcirc(&[
        "sweep", "--attn-dir", s(&attn), "--masks", s(&mdir), "--expect", "168", "--out-dir", s(&root.join("o2")),
    ]);
    assert_eq!(wrong.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("error[sweep]"));

    let manifest = root.join("manifest.txt");
    fs::write(&manifest, "# subset\np02\np00\n").unwrap();
    let map: std::collections::BTreeMap<String, PromptMasks> =
        [("p00".to_string(), masks("prompt 0", false)), ("p02".to_string(), masks("prompt 2", true))].into();
    let map_path = root.join("all_masks.json");
    fs::write(&map_path, serde_json::to_string(&map).unwrap()).unwrap();
    let sub = root.join("sub");
    ok(&[
        "sweep", "--attn-dir", s(&attn), "--masks", s(&map_path), "--manifest", s(&manifest), "--pair",
        "circle:circle", "--mode", "max-step-select", "--out-dir", s(&sub),
    ]);
    assert!(!sub.join("p01.synopsis.json").exists());
    let f = json(&sub.join("p00.synopsis.json"));
    assert_eq!(f["pairs"].as_array().unwrap().len(), 1);
    assert!(f["pairs"][0]["synopsis"]["argmax_step_cond"].is_array());
}

#[test]
fn plan_round_trips_through_canonical_json() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("plan.json");
    ok(&[
        "plan", "--layers", "12", "--heads", "12", "--text-tokens", "20", "--image-tokens", "256", "--mask-head",
        "L2H8:3,4", "--mask-token", "L0:5", "--inject", "L1H2>L5:3", "--out", s(&first),
    ]);
    let second = dir.path().join("again.json");
    ok(&["plan", "--in", s(&first), "--out", s(&second)]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    let v = json(&first);
    assert_eq!(v["interventions"][0]["kind"], "mask_attention_to_tokens");
    assert_eq!(v["interventions"][2]["destination"], "image_token_positional_embeddings");
    assert_eq!(ok(&["plan", "--in", s(&first), "--check"]), "ok\n");

    let bad = dir.path().join("bad.json");
    let text = fs::read_to_string(&first).unwrap().replace("\"layer\": 5", "\"layer\": 0");
    fs::write(&bad, text).unwrap();
    let out = relcirc(&["plan", "--in", s(&bad), "--check"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("must precede"));
}

#[test]
fn help_lists_defaults() {
    let cases: [(&[&str], &[&str]); 7] = [
        (&["gen-dataset"], &["[default: 100]", "[default: 16]", "[default: 128]", "[default: 0.5]", "[default: 5]", "[default: 0.05]"]),
        (&["evaluate"], &["[default: 180]", "[default: 100]", "[default: 25]", "[default: 0.04]", "[default: 5]", "[default: 8]"]),
        (&["encode"], &["[default: 4096]", "[default: 7.5]", "[default: 20]", "[default: 0.16666667]"]),
        (&["synopsis"], &["[default: mean-time]", "[default: validate]", "[default: 5]"]),
        (&["varpart"], &["[default: 100]", "[default: 1]", "[default: 0.0000000001]"]),
        (&["edit-embedding"], &["[default: 2]"]),
        (&["plan"], &["[default: image_token_positional_embeddings]"]),
    ];
    for (cmd, wants) in cases {
        let mut args = cmd.to_vec();
        args.push("--help");
        let help = ok(&args);
        for w in wants {
            assert!(help.contains(w), "{cmd:?} help lacks {w}:\n{help}");
        }
    }
}
