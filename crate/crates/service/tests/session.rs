use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use datapath_core::attacks::{successful_pairs, AttackConfig};
use datapath_core::fixture::{build_fixture, generate_dataset, FixtureConfig};
use datapath_core::nnet::io::{encode_examples, model_to_bundle};
use datapath_core::nnet::ModelGraph;
use datapath_service::{router, AppState, Config};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Client {
    app: Router,
}

impl Client {
    fn new(cache: &std::path::Path) -> Self {
        let config = Config {
            cache_dir: cache.to_path_buf(),
            ..Config::default()
        };
        Client {
            app: router(AppState::new(config)),
        }
    }

    async fn raw(&self, method: Method, uri: &str, body: Body, json_body: bool) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if json_body {
            req = req.header("content-type", "application/json");
        }
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
    }

    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes) = match body {
            Some(v) => self.raw(method, uri, Body::from(v.to_string()), true).await,
            None => self.raw(method, uri, Body::empty(), false).await,
        };
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    async fn upload(&self, uri: &str, bytes: Vec<u8>) -> (StatusCode, Value) {
        let (status, body) = self.raw(Method::PUT, uri, Body::from(bytes), false).await;
        (status, serde_json::from_slice(&body).unwrap())
    }

    async fn get_ok(&self, uri: &str) -> Value {
        let (status, v) = self.call(Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {v}");
        v
    }

    async fn wait(&self, job: &Value) -> Value {
        let id = job["job"].as_u64().expect("job id");
        for _ in 0..6000 {
            let v = self.get_ok(&format!("/jobs/{id}")).await;
            match v["state"].as_str().unwrap() {
                "done" => return v["result"].clone(),
                "failed" => panic!("job {id} failed: {v}"),
                _ => tokio::time::sleep(Duration::from_millis(20)).await,
            }
        }
        panic!("job {id} did not finish");
    }
}

fn small_fixture() -> (ModelGraph, Vec<datapath_core::nnet::Example>, Vec<datapath_core::nnet::Example>) {
    let cfg = FixtureConfig {
        train_size: 320,
        epochs: 4,
        ..FixtureConfig::default()
    };
    let f = build_fixture(&cfg).unwrap();
    let pool: Vec<_> = f.test.iter().chain(&f.train).take(200).cloned().collect();
    let (mut normal, mut adv) = successful_pairs(&f.model, &pool, 0, &AttackConfig::untargeted(0.1)).unwrap();
    normal.truncate(12);
    adv.truncate(12);
    assert!(normal.len() >= 4, "too few successful attacks: {}", normal.len());
    (f.model, normal, adv)
}

fn assert_rect(r: &Value) {
    for k in ["x", "y", "w", "h"] {
        assert!(r[k].is_number(), "rect field {k}: {r}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_session() {
    let cache = tempfile::tempdir().unwrap();
    let (model, normal, adv) = small_fixture();
    let c = Client::new(cache.path());

    // nothing loaded yet
    let (status, v) = c.call(Method::GET, "/layout/layers", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "no_model");

    let (status, v) = c.upload("/model", model_to_bundle(&model)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["model_hash"].as_str().unwrap().len(), 64);

    let (status, v) = c.upload("/model", b"garbage".to_vec()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"]["kind"].is_string());

    for (name, set) in [("normal", &normal), ("adversarial", &adv)] {
        let (status, v) = c.upload(&format!("/groups/{name}"), encode_examples(set).unwrap()).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["count"].as_u64().unwrap() as usize, set.len());
        let ranking = v["ranking"].as_array().unwrap();
        assert_eq!(ranking.len(), set.len());
        let u: Vec<f64> = ranking.iter().map(|r| r["uncertainty"].as_f64().unwrap()).collect();
        assert!(u.windows(2).all(|w| w[0] >= w[1]));
        assert!(u.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    // extraction, then the same request again hits the cache
    let req = json!({ "groups": ["normal", "adversarial"] });
    let (status, job) = c.call(Method::POST, "/extract", Some(req.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let first = c.wait(&job).await;
    let (_, job) = c.call(Method::POST, "/extract", Some(req)).await;
    let second = c.wait(&job).await;
    for (a, b) in first["datapaths"].as_array().unwrap().iter().zip(second["datapaths"].as_array().unwrap()) {
        assert_eq!(a["cached"], false);
        assert_eq!(b["cached"], true);
        assert_eq!(a["datapath"], b["datapath"]);
    }
    let id = first["datapaths"][0]["datapath"].as_str().unwrap().to_string();
    let dp = c.get_ok(&format!("/datapaths/{id}")).await;
    assert!(!dp["layers"].as_array().unwrap().is_empty());
    let layer = dp["layers"].as_array().unwrap().last().unwrap()["layer"].as_str().unwrap().to_string();

    // layer-level view is a pure function of session state
    let uri = "/layout/layers?stat=activation_similarity";
    let (_, bytes_a) = c.raw(Method::GET, uri, Body::empty(), false).await;
    let (_, bytes_b) = c.raw(Method::GET, uri, Body::empty(), false).await;
    assert_eq!(bytes_a, bytes_b);
    let view = c.get_ok(uri).await;
    let visible = view["layout"]["visible"].as_array().unwrap().clone();
    assert!(!visible.is_empty());
    for v in &visible {
        for d in v["dots"].as_array().unwrap() {
            assert!((0.0..=1.0).contains(&d["x"].as_f64().unwrap()));
        }
    }
    let placed: usize = view["layout"]["segments"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().len())
        .sum();
    assert_eq!(placed, visible.len());

    let stats = c.get_ok("/stats").await;
    assert!(!stats["statistics"].as_array().unwrap().is_empty());

    // expanding a leaf changes nothing
    let leaf = visible.iter().find(|v| v["is_group"] == false).unwrap()["path"].clone();
    let (status, after_leaf) = c
        .call(Method::POST, "/layout/layers/expand", Some(json!({ "node": leaf })))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after_leaf["layout"], view["layout"]);

    // expand the visible group with the highest DOI, then collapse it again
    let diverging = visible
        .iter()
        .filter(|v| v["is_group"] == true)
        .max_by(|a, b| a["doi"].as_f64().unwrap().total_cmp(&b["doi"].as_f64().unwrap()));
    if let Some(group) = diverging {
        let path = group["path"].clone();
        let (_, expanded) = c
            .call(Method::POST, "/layout/layers/expand", Some(json!({ "node": path })))
            .await;
        assert!(expanded["layout"]["visible"].as_array().unwrap().len() > visible.len());
        let (_, collapsed) = c
            .call(
                Method::POST,
                "/layout/layers/expand",
                Some(json!({ "node": path, "collapse": true })),
            )
            .await;
        assert_eq!(collapsed["layout"], view["layout"]);
    }
    let (status, v) = c
        .call(Method::POST, "/layout/layers/expand", Some(json!({ "node": "no/such" })))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "unknown_node");

    // feature-map level
    for color in ["importance", "activation", "activation_difference"] {
        let fm = c.get_ok(&format!("/layout/featuremaps/{layer}?color={color}")).await;
        let cells = fm["layout"]["cells"].as_array().unwrap();
        assert_eq!(fm["colors"].as_array().unwrap().len(), cells.len());
        for cell in cells {
            assert_rect(&cell["rect"]);
            for cl in cell["clusters"].as_array().unwrap() {
                assert_rect(&cl["rect"]);
                assert!(cl["glyphs"].as_u64().unwrap() >= 1);
            }
        }
    }
    let (status, v) = c.call(Method::GET, &format!("/layout/featuremaps/{layer}?color=blue"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "unknown_color");
    let (status, _) = c.call(Method::GET, "/layout/featuremaps/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // neuron level
    let n = c.get_ok(&format!("/neurons/{layer}/0?image=0&group=adversarial")).await;
    let hm = &n["heatmap"];
    let cells = hm["height"].as_u64().unwrap() * hm["width"].as_u64().unwrap();
    assert_eq!(hm["grid"].as_array().unwrap().len() as u64, cells);
    let (status, _) = c.call(Method::GET, &format!("/neurons/{layer}/0?image=999"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, job) = c
        .call(
            Method::POST,
            "/discrepancy",
            Some(json!({ "group": "adversarial", "image": 0, "layer": "stem_relu", "feature_map": 0, "neuron": [8, 8] })),
        )
        .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let d = c.wait(&job).await;
    let map = &d["map"];
    assert_eq!(map["patch_size"], 2);
    let patches = map["rows"].as_u64().unwrap() * map["cols"].as_u64().unwrap();
    assert_eq!(map["important"].as_array().unwrap().len() as u64, patches);
    assert_eq!(map["preview"].as_array().unwrap().len(), 256);

    // error shapes
    let (status, v) = c.call(Method::GET, "/jobs/424242", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "unknown_job");
    let (status, v) = c.call(Method::GET, "/layout/layers?stat=bogus", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "unknown_statistic");
    let five: Vec<String> = (0..5).map(|_| "normal".to_string()).collect();
    let (status, v) = c.call(Method::PUT, "/comparison", Some(json!({ "groups": five }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "comparison_size");
    let (status, _) = c
        .call(Method::POST, "/extract", Some(json!({ "groups": ["normal"], "config": { "threshold": 3.0 } })))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // a fresh service over the same cache directory reuses the stored datapaths
    let fresh = Client::new(cache.path());
    fresh.upload("/model", model_to_bundle(&model)).await;
    fresh.upload("/groups/normal", encode_examples(&normal).unwrap()).await;
    let (_, job) = fresh.call(Method::POST, "/extract", Some(json!({ "groups": ["normal"] }))).await;
    let r = fresh.wait(&job).await;
    assert_eq!(r["datapaths"][0]["cached"], true);
    assert_eq!(r["datapaths"][0]["datapath"], first["datapaths"][0]["datapath"]);
}

#[tokio::test]
async fn group_upload_checks_shapes() {
    let cache = tempfile::tempdir().unwrap();
    let c = Client::new(cache.path());
    let mut b = datapath_core::nnet::ModelBuilder::new("input", datapath_core::nnet::Shape::new(1, 4, 4));
    b.global_avg_pool("gap", "input");
    b.dense("fc", "gap", 2);
    b.softmax("prob", "fc");
    let m = b.build().unwrap();
    let (status, _) = c.upload("/groups/x", encode_examples(&generate_dataset(2, 0)).unwrap()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    c.upload("/model", model_to_bundle(&m)).await;
    let (status, v) = c.upload("/groups/x", encode_examples(&generate_dataset(2, 0)).unwrap()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "shape_mismatch");
}
