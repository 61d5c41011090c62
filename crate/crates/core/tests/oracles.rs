//! Library results against brute-force oracles on random instances.

mod common;

#[test]
fn every_oracle_agrees_on_1000_instances() {
    for (name, mismatches) in common::oracle_suite(1000, 7) {
        println!("{name}: {mismatches} mismatches");
        assert_eq!(mismatches, 0, "{name}");
    }
}
