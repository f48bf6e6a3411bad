//! Composite gradient certification in f64.

use spa_core::certify::{run_suite, INSTANCES};

fn certify(name: &str) {
    let r = run_suite(name, INSTANCES).unwrap();
    assert!(r.reports.len() as u64 >= INSTANCES);
    for f in r.failures() {
        panic!("{name}: {f:?}");
    }
}

#[test]
fn encoder_path() {
    certify("encoder");
}

#[test]
fn volume_path() {
    certify("volume");
}

#[test]
fn render_path_and_every_loss_term() {
    certify("render");
}

#[test]
fn unknown_suite_is_rejected() {
    assert!(run_suite("nope", 1).is_err());
}
