mod common;

use common::{random_example, random_net};
use datapath_core::fixture::{distractor_fixture, generate_dataset};
use datapath_core::nnet::io::{model_from_bundle, model_to_bundle, read_examples, read_model, write_examples, write_model};

#[test]
fn model_files_round_trip_through_f32() {
    let dir = tempfile::tempdir().unwrap();
    let f = distractor_fixture(1).unwrap();
    let path = dir.path().join("m.json");
    write_model(&f.model, &path).unwrap();
    assert!(dir.path().join("m.bin").exists());
    let back = read_model(&path).unwrap();
    // f32 storage: hashes match once the original is itself f32-representable
    let again = dir.path().join("again.json");
    write_model(&back, &again).unwrap();
    assert_eq!(read_model(&again).unwrap().hash(), back.hash());
    let e = &f.examples.examples[0];
    let p0 = f.model.forward(e, None).unwrap().p;
    let p1 = back.forward(e, None).unwrap().p;
    assert!((p0 - p1).abs() < 1e-5);
}

#[test]
fn bundle_round_trip() {
    let m = random_net(3);
    let back = model_from_bundle(&model_to_bundle(&m)).unwrap();
    assert_eq!(model_to_bundle(&back), model_to_bundle(&m));
    let e = random_example(&m, 0);
    assert!((m.forward(&e, None).unwrap().p - back.forward(&e, None).unwrap().p).abs() < 1e-5);
    assert!(model_from_bundle(b"not a bundle").is_err());
}

#[test]
fn examples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(6, 2);
    let path = dir.path().join("x.examples");
    write_examples(&path, &data).unwrap();
    let back = read_examples(&path).unwrap();
    assert_eq!(back.len(), 6);
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.group_tag, b.group_tag);
        for (x, y) in a.pixels.data.iter().zip(&b.pixels.data) {
            assert!((x - y).abs() < 1e-7);
        }
    }
}
