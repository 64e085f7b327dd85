use timba::checkpoint::{load, save};
use timba::model::ConditioningBundle;

mod common;

#[test]
fn save_load_gives_bit_identical_noise_estimates() {
    let model = common::tiny_model(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, &model).unwrap();
    let back = load(&path).unwrap();
    let (b, n, l) = (2, 3, 6);
    let bundle = ConditioningBundle {
        interpolated: common::randn(&[b, n, l], 1),
        cond_mask: (0..b * n * l).map(|i| i % 3 != 0).collect(),
        a_hat: common::graph(n).normalized,
        steps: vec![1, 8],
    };
    let noisy = common::randn(&[b, n, l], 2);
    let e1 = model.predict(&noisy, &bundle).unwrap();
    let e2 = back.predict(&noisy, &bundle).unwrap();
    assert!(e1.data().iter().zip(e2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(load(std::path::Path::new("/nonexistent/m.ckpt")), Err(timba::Error::Io(_))));
}
