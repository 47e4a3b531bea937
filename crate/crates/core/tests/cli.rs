use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use tagkit::archdsl::{builtin, expand_layers, Geometry};
use tagkit::complexity::count_complexity;
use tagkit::calibsvc::ScoreIndex;
use tagkit::network::{build_from_arch, load_checkpoint, HeadConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tagkit"));
    c.env("RUST_LOG", "warn").env_remove("TAGKIT_CORPUS");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, data: &str, classes: usize, epochs: usize) -> PathBuf {
    let text = format!(
        r#"arch = "yfnet_d_desk"
input = "64x64x3"
base = 68
init_seed = 4

[head]
spp_levels = [2, 1]
hidden_fc_widths = [16]
dropout_rate = 0.0
num_classes = {classes}

[train]
batch_size = 8
base_lr = 0.01
lr_decay_factor = 10.0
lr_decay_every = 10
total_epochs = {epochs}
momentum = 0.9
weight_decay = 0.0005
seed = 6

[data]
{data}
"#
    );
    let path = dir.join("train.toml");
    fs::write(&path, text).unwrap();
    path
}

const SHAPES: &str = "kind = \"shapes\"\ntrain_count = 24\ntest_count = 8\ncorpus_seed = 2";

#[test]
fn arch_parse_then_render_reproduces_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(root().join("architectures")).unwrap() {
        let path = entry.unwrap().path();
        let parsed = run(&["--out", s(tmp.path()), "arch", "parse", s(&path)]);
        let json = tmp.path().join("parsed.json");
        fs::write(&json, &parsed.stdout).unwrap();
        let rendered = run(&["--out", s(tmp.path()), "arch", "render", s(&json)]);
        assert_eq!(String::from_utf8(rendered.stdout).unwrap(), fs::read_to_string(&path).unwrap());
    }
}

#[test]
fn complexity_reports_csv_and_ranking() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["--out", s(tmp.path()), "complexity", "--arch", "yfnet-a", "--report", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("layer,kind,ops,params\n"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("complexity.json")).unwrap()).unwrap();
    let plan = expand_layers(&builtin("yfnet_a").unwrap(), Geometry::new(221, 221, 3), &HeadConfig::imagenet(1000)).unwrap();
    let expected = count_complexity(&plan);
    assert_eq!(report["total_ops"], expected.total_ops);
    assert_eq!(report["total_params"], expected.total_params);
    assert_eq!(text.lines().count(), expected.per_layer.len() + 1);
    let ranking = String::from_utf8(run(&["--out", s(tmp.path()), "complexity", "--all", "--report", "csv"]).stdout).unwrap();
    assert_eq!(ranking.lines().count(), 7);
}

#[test]
fn tag_commands_are_deterministic() {
    let fixtures = root().join("tests/fixtures");
    let outputs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            let out = s(tmp.path()).to_string();
            let meta = s(&fixtures.join("metadata_1000.tsv")).to_string();
            run(&["--out", &out, "tags", "select", "--metadata", &meta, "--rules", s(&fixtures.join("rules")), "--n", "30"]);
            run(&["--out", &out, "tags", "build", "--metadata", &meta, "--vocab", &format!("{out}/vocab.txt"), "--k", "40"]);
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(tmp.path())
                .unwrap()
                .map(|e| e.unwrap().path())
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
                .collect();
            files.sort();
            // the manifest records the per-run output path
            files.retain(|(name, _)| name != "manifest.json");
            files
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"training_set.tsv") && names.contains(&"vocab.txt"), "{names:?}");
}

#[test]
fn relative_metadata_resolves_against_the_corpus_root() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .env("TAGKIT_CORPUS", root().join("tests/fixtures"))
        .args(["--out", s(tmp.path()), "tags", "rank", "--metadata", "metadata_1000.tsv", "--n", "3"])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(String::from_utf8(status.stdout).unwrap().lines().next().unwrap().split('\t').nth(1), Some("sunset"));
}

#[test]
fn training_is_reproducible_and_zero_epochs_is_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), SHAPES, 8, 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&["--out", s(&a), "train", "--config", s(&cfg)]);
    run(&["--out", s(&b), "train", "--config", s(&cfg)]);
    for f in ["final.ckpt", "metrics.jsonl", "validation.json", "checkpoints/epoch-0002.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let z = tmp.path().join("z");
    run(&["--out", s(&z), "train", "--config", s(&cfg), "--epochs", "0"]);
    let (net, _) = load_checkpoint(&z.join("final.ckpt")).unwrap();
    let head = HeadConfig { spp_levels: vec![2, 1], hidden_fc_widths: vec![16], dropout_rate: 0.0, num_classes: 8 };
    let fresh = build_from_arch(&builtin("yfnet_d_desk").unwrap(), Geometry::new(64, 64, 3), &head, 4).unwrap();
    assert_eq!(net.epoch, 0);
    assert_eq!(net.params(), fresh.params());

    // resuming the epoch-1 checkpoint reproduces the uninterrupted run
    let r = tmp.path().join("r");
    run(&["--out", s(&r), "train", "--config", s(&cfg), "--resume", s(&a.join("checkpoints/epoch-0001.ckpt"))]);
    assert_eq!(fs::read(r.join("final.ckpt")).unwrap(), fs::read(a.join("final.ckpt")).unwrap());

    let seeded = tmp.path().join("s");
    run(&["--out", s(&seeded), "--seed", "99", "train", "--config", s(&cfg), "--epochs", "1"]);
    assert_ne!(fs::read(seeded.join("final.ckpt")).unwrap(), fs::read(a.join("checkpoints/epoch-0001.ckpt")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(seeded.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["config"]["train"]["seed"], 99);
}

#[test]
fn eval_map_over_files() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.tsv");
    let truth = tmp.path().join("truth.tsv");
    let tags = tmp.path().join("tags.txt");
    fs::write(&pred, "a\tdog\t0.9\nb\tdog\t0.5\nc\tdog\t0.1\na\tcat\t0.2\nb\tcat\t0.8\n").unwrap();
    fs::write(&truth, "a\tdog\nc\tdog\nb\tcat\n").unwrap();
    fs::write(&tags, "dog\n").unwrap();
    let out = String::from_utf8(run(&["--out", s(tmp.path()), "eval", "map", "--pred", s(&pred), "--truth", s(&truth)]).stdout).unwrap();
    // dog: (1 + 2/3) / 2, cat: 1
    assert_eq!(out.trim(), format!("mAP {:.6} over 2 tags", ((1.0 + 2.0 / 3.0) / 2.0 + 1.0) / 2.0));
    let out = String::from_utf8(run(&["--out", s(tmp.path()), "eval", "map", "--pred", s(&pred), "--truth", s(&truth), "--tags", s(&tags)]).stdout).unwrap();
    assert_eq!(out.trim(), format!("mAP {:.6} over 1 tags", (1.0 + 2.0 / 3.0) / 2.0));
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["complexity", "--arch", "no_such_arch"],
        vec!["tags", "stats", "--metadata", "/nonexistent/meta.tsv"],
        vec!["complexity", "--arch", "yfnet_a", "--input", "4x4x3"],
    ] {
        let out = bin().arg("--out").arg(tmp.path()).args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "));
    }
}

fn write_images(dir: &Path) -> Vec<String> {
    fs::create_dir_all(dir).unwrap();
    let mut ids = Vec::new();
    for i in 0..12u8 {
        let id = format!("{}", 1000 + i as u32);
        let red = i % 2 == 0;
        let img = image::RgbImage::from_fn(70, 70, |x, y| {
            let v = ((x * 3 + y * 5) % 40) as u8;
            if red { image::Rgb([200 + v, v, v]) } else { image::Rgb([v, v, 200 + v]) }
        });
        img.save(dir.join(format!("{id}.png"))).unwrap();
        ids.push(id);
    }
    ids
}

/// Kills the server even when an assertion fails first.
struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http_get(addr: &str, path: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let text = String::from_utf8_lossy(&raw);
    let status = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = text.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    (status, body)
}

#[test]
fn images_train_score_and_serve() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let ids = write_images(&corpus.join("images"));
    fs::write(corpus.join("vocab.txt"), "red\nblue\n").unwrap();
    let labels: String = ids.iter().enumerate().map(|(i, id)| format!("{id}\t{}\n", if i % 2 == 0 { "red" } else { "blue" })).collect();
    fs::write(corpus.join("labels.tsv"), labels).unwrap();
    let data = "kind = \"images\"\nimages = \"images\"\nlabels = \"labels.tsv\"\nvocab = \"vocab.txt\"";
    let cfg = tiny_config(tmp.path(), data, 2, 1);
    let run_dir = tmp.path().join("run");
    let out = bin().env("TAGKIT_CORPUS", &corpus).args(["--out", s(&run_dir), "train", "--config", s(&cfg)]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let score_dir = tmp.path().join("score");
    let out = bin()
        .env("TAGKIT_CORPUS", &corpus)
        .args(["--out", s(&score_dir), "score", "--checkpoint", s(&run_dir.join("final.ckpt")), "--vocab", s(&corpus.join("vocab.txt")), "--base", "68"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let index = ScoreIndex::load(&score_dir.join("index.tsv")).unwrap();
    assert_eq!(index.tags().collect::<Vec<_>>(), ["blue", "red"]);
    assert_eq!(index.list("red").unwrap().len(), ids.len());

    let mut server = Server(bin()
        .env("RUST_LOG", "info")
        .args([
            "--out",
            s(&tmp.path().join("serve")),
            "calibrate",
            "serve",
            "--index",
            s(&score_dir.join("index.tsv")),
            "--table",
            s(&tmp.path().join("table.tsv")),
            "--journal",
            s(&tmp.path().join("journal.jsonl")),
            "--photos",
            s(&corpus.join("images")),
            "--addr",
            "127.0.0.1:0",
        ])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap());
    let mut lines = BufReader::new(server.0.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(rest) = line.split("serving on ").nth(1) {
            break rest.trim().to_string();
        }
    };
    let (status, body) = http_get(&addr, "/classes");
    let (top_status, top) = http_get(&addr, "/classes/red/top?n=3");
    let (photo_status, _) = http_get(&addr, &format!("/photos/{}", ids[0]));
    let (missing, _) = http_get(&addr, "/classes/green/top");
    drop(server);
    assert_eq!(status, 200);
    let classes: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(classes.as_array().unwrap().len(), 2);
    assert_eq!(top_status, 200);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&top).unwrap().as_array().unwrap().len(), 3);
    assert_eq!(photo_status, 200);
    assert_eq!(missing, 404);
}
