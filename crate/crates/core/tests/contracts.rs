mod common;

#[test]
fn grid_search_contract_on_stubs() {
    let failures = common::grid_contract_failures().unwrap();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn metrics_match_brute_force_oracles() {
    let worst = common::metric_oracle_worst(500, 3).unwrap();
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
}
