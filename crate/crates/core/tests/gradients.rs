use fmfnet::gradsuite::{full_loss_check, op_suite};

#[test]
fn every_op_matches_finite_differences() {
    let entries = op_suite().unwrap();
    assert!(entries.len() >= 25);
    for e in &entries {
        println!("{}", e.line());
    }
    let failed: Vec<_> = entries.iter().filter(|e| !e.passed()).map(|e| e.line()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn full_loss_matches_finite_differences() {
    let e = full_loss_check(12).unwrap();
    println!("{}", e.line());
    assert!(e.passed(), "{}", e.line());
    assert!(e.checked > 300);
}
