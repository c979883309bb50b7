//! Alternating a sweep with a fresh draw of the data given the parameters
//! must leave the prior invariant.

mod common;

#[test]
fn sweep_preserves_the_prior() {
    let lines = common::geweke(2_000, 300_000, 30, 11);
    let mut failures = vec![];
    for l in &lines {
        eprintln!("{:>12}: mean {:+.4} prior {:+.4} se {:.4} z {:+.2}", l.name, l.mean, l.prior_mean, l.se, l.z());
        if l.z().abs() > 4.0 {
            failures.push(l.name);
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
