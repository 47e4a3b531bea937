use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tagkit::calibsvc::*;
use tagkit::multilabel::posterior;
use tagkit::synth::calibrated_judgments;
use tower::ServiceExt;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/calibration")).join(name)
}

fn index(tags: &[&str], photos: usize) -> ScoreIndex {
    let tags: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
    let rows: Vec<(String, Vec<f64>)> = (0..photos)
        .map(|i| {
            let s = -3.0 + 10.0 * i as f64 / (photos - 1) as f64;
            (format!("p{i:04}"), tags.iter().enumerate().map(|(k, _)| s - k as f64).collect())
        })
        .collect();
    ScoreIndex::from_rows(&tags, &rows).unwrap()
}

#[test]
fn recovers_bias_from_calibrated_judgments() {
    let s_star = 1.0;
    let b_true = 9f64.ln() - s_star;
    let judged = calibrated_judgments(10_000, -3.0, 7.0, b_true);
    let s = suggest_bias(&judged, 0.9, 0.05).unwrap();
    assert!(!s.unconstrained);
    assert!((s.bias - b_true).abs() < 0.05, "bias {} vs {}", s.bias, b_true);
    assert!((s.window_precision - 0.9).abs() <= 0.02, "precision {}", s.window_precision);
    assert!((posterior(s_star, s.bias) - 0.9).abs() < 0.01);
}

#[test]
fn duplicate_judgment_leaves_suggestion_unchanged() {
    let svc = CalibrationService::new(index(&["dog"], 400), CalibrationTable::default(), ServiceConfig::default());
    let list: Vec<(String, f64)> = svc.top("dog", Some(400)).unwrap().into_iter().map(|p| (p.photo_id, p.logit)).collect();
    let judged = calibrated_judgments(list.len(), list[list.len() - 1].1, list[0].1, 0.5);
    for ((id, _), (_, v)) in list.iter().rev().zip(&judged) {
        svc.judge("dog", id, *v).unwrap();
    }
    let before = svc.suggest("dog", 0.9).unwrap();
    let (id, _) = &list[10];
    let current = judged[list.len() - 1 - 10].1;
    svc.judge("dog", id, current).unwrap();
    assert_eq!(svc.suggest("dog", 0.9).unwrap(), before);
    assert!((before.bias - 0.5).abs() < 0.3);
}

#[test]
fn older_table_versions_load_with_identical_biases() {
    let v1 = CalibrationTable::load(&fixture("table_v1.tsv")).unwrap();
    let v2 = CalibrationTable::load(&fixture("table_v2.tsv")).unwrap();
    for (tag, e) in &v1.entries {
        assert_eq!(e.bias.to_bits(), v2.entries[tag].bias.to_bits());
        assert_eq!(e.enabled, v2.entries[tag].enabled);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tsv");
    v1.persist(&path).unwrap();
    assert_eq!(CalibrationTable::load(&path).unwrap(), v1);
    v2.persist(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), std::fs::read_to_string(fixture("table_v2.tsv")).unwrap());
}

#[test]
fn concurrent_bias_updates_on_distinct_tags_both_apply() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(
        CalibrationService::open(
            index(&["a", "b"], 20),
            &dir.path().join("table.tsv"),
            &dir.path().join("journal.jsonl"),
            ServiceConfig::default(),
        )
        .unwrap(),
    );
    let handles: Vec<_> = ["a", "b"]
        .into_iter()
        .enumerate()
        .map(|(k, tag)| {
            let svc = svc.clone();
            std::thread::spawn(move || {
                for i in 0..50 {
                    svc.set_bias(tag, (k * 100 + i) as f64 * 0.01).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let t = CalibrationTable::load(&dir.path().join("table.tsv")).unwrap();
    assert_eq!(t.entries["a"].bias, 0.49);
    assert_eq!(t.entries["b"].bias, 1.49);
    assert_eq!(Journal::replay(&dir.path().join("journal.jsonl")).unwrap().len(), 100);
}

proptest! {
    #[test]
    fn around_matches_exhaustive_sort(
        logits in prop::collection::vec(-6.0f64..6.0, 1..60),
        ties in prop::collection::vec(0usize..60, 0..10),
        bias in -3.0f64..3.0,
        p in 0.01f64..0.99,
        n in 1usize..20,
    ) {
        let mut logits = logits;
        for t in ties {
            if t + 1 < logits.len() {
                logits[t + 1] = logits[t];
            }
        }
        let tags = vec!["t".to_string()];
        let rows: Vec<(String, Vec<f64>)> = logits.iter().enumerate().map(|(i, s)| (format!("p{i:02}"), vec![*s])).collect();
        let idx = ScoreIndex::from_rows(&tags, &rows).unwrap();
        let list = idx.list("t").unwrap();
        let got: Vec<String> = around_posterior(list, bias, p, n).into_iter().map(|x| x.0).collect();
        let mut order: Vec<usize> = (0..list.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (posterior(list[a].1, bias) - p).abs();
            let db = (posterior(list[b].1, bias) - p).abs();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        let expect: Vec<String> = order.into_iter().take(n).map(|i| list[i].0.clone()).collect();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn bias_shifts_never_reorder(logits in prop::collection::vec(-8.0f64..8.0, 2..40), b1 in -4.0f64..4.0, b2 in -4.0f64..4.0) {
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for w in sorted.windows(2) {
            prop_assert!(posterior(w[0], b1) >= posterior(w[1], b1));
            prop_assert!(posterior(w[0], b2) >= posterior(w[1], b2));
        }
    }

    #[test]
    fn identical_logit_and_bias_give_identical_posterior(s in -20.0f64..20.0, b in -5.0f64..5.0) {
        let tags = vec!["x".to_string(), "y".to_string()];
        let idx = ScoreIndex::from_rows(&tags, &[("p".to_string(), vec![s, s])]).unwrap();
        let mut table = CalibrationTable::for_tags(["x", "y"]);
        table.entries.get_mut("x").unwrap().bias = b;
        table.entries.get_mut("y").unwrap().bias = b;
        let svc = CalibrationService::new(idx, table, ServiceConfig::default());
        let px = svc.top("x", Some(1)).unwrap()[0].posterior;
        let py = svc.top("y", Some(1)).unwrap()[0].posterior;
        prop_assert_eq!(px.to_bits(), py.to_bits());
    }

    #[test]
    fn suggestion_is_order_invariant(
        logits in prop::collection::vec(-4.0f64..6.0, 10..80),
        verdicts in prop::collection::vec(any::<bool>(), 80),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let judged: Vec<(f64, Verdict)> = logits
            .iter()
            .zip(&verdicts)
            .map(|(s, ok)| (*s, if *ok { Verdict::Correct } else { Verdict::Incorrect }))
            .collect();
        let mut shuffled = judged.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = suggest_bias(&judged, 0.9, 0.05).unwrap();
        let b = suggest_bias(&shuffled, 0.9, 0.05).unwrap();
        prop_assert_eq!(a.bias.to_bits(), b.bias.to_bits());
    }

    #[test]
    fn table_text_round_trips_bitwise(biases in prop::collection::vec(-1e6f64..1e6, 1..10)) {
        let mut t = CalibrationTable::default();
        for (i, b) in biases.iter().enumerate() {
            t.entries.insert(format!("tag{i}"), TableEntry { bias: *b, enabled: i % 2 == 0, modified: i as u64 });
        }
        let back = CalibrationTable::parse(&t.render(), "t").unwrap();
        for (k, e) in &t.entries {
            prop_assert_eq!(e.bias.to_bits(), back.entries[k].bias.to_bits());
        }
        prop_assert_eq!(back, t);
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn http_workflow() {
    let dir = tempfile::tempdir().unwrap();
    image::RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3])).save(dir.path().join("p0000.png")).unwrap();
    let svc = CalibrationService::open(
        index(&["dog", "cat"], 200),
        &dir.path().join("table.tsv"),
        &dir.path().join("journal.jsonl"),
        ServiceConfig::default(),
    )
    .unwrap()
    .with_photo_root(Some(dir.path().to_path_buf()));
    let app = http::router(Arc::new(svc));

    let (status, classes) = call(&app, "GET", "/classes", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(classes.as_array().unwrap().len(), 2);
    assert_eq!(classes[0]["tag"], "cat");

    let (status, top) = call(&app, "GET", "/classes/dog/top?n=3", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(top[0]["photo_id"], "p0199");
    assert_eq!(top.as_array().unwrap().len(), 3);

    let (_, around) = call(&app, "GET", "/classes/dog/around?p=0.5&n=1", None).await;
    assert!(around[0]["logit"].as_f64().unwrap().abs() < 0.03);

    let (status, reply) = call(&app, "POST", "/classes/dog/bias", Some(json!({"bias": 1.5}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply["bias"], 1.5);
    let (_, around) = call(&app, "GET", "/classes/dog/around?p=0.5&n=1", None).await;
    assert!((around[0]["logit"].as_f64().unwrap() + 1.5).abs() < 0.03);
    assert!((around[0]["posterior"].as_f64().unwrap() - 0.5).abs() < 0.01);

    let (status, _) = call(&app, "GET", "/classes/dog/suggest?p=0.9", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    for (i, item) in top.as_array().unwrap().iter().enumerate() {
        let verdict = if i == 0 { "incorrect" } else { "correct" };
        let (status, _) =
            call(&app, "POST", "/classes/dog/judgments", Some(json!({"photo_id": item["photo_id"], "verdict": verdict}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, _) = call(&app, "POST", "/classes/dog/judgments", Some(json!({"photo_id": "nope", "verdict": "correct"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(&app, "POST", "/classes/cat/enabled", Some(json!({"flag": false}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "GET", "/classes/cat/top", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "GET", "/classes/owl/top", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/classes/dog/around?p=1.5", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let resp = app.clone().oneshot(Request::get("/photos/p0000").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let (status, _) = call(&app, "GET", "/photos/..%2Ftable", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let table = CalibrationTable::load(&dir.path().join("table.tsv")).unwrap();
    assert_eq!(table.entries["dog"].bias, 1.5);
    assert!(!table.entries["cat"].enabled);
}
