//! Optimised kernels against straightforward loop implementations.

mod common;

use common::oracle_checks as o;

#[test]
fn conv2d_matches_loops() {
    o::conv2d_matches_loops().unwrap();
}

#[test]
fn separable_matches_loops() {
    o::separable_matches_loops().unwrap();
}

#[test]
fn maxpool_matches_loops() {
    o::maxpool_matches_loops().unwrap();
}

#[test]
fn global_average_pool_matches_loops() {
    o::global_average_pool_matches_loops().unwrap();
}

#[test]
fn dense_matches_loops() {
    o::dense_matches_loops().unwrap();
}

#[test]
fn median_matches_sort_exactly() {
    o::median_matches_sort_exactly().unwrap();
}

#[test]
fn resize_matches_exactly() {
    o::resize_matches_exactly().unwrap();
}

#[test]
fn clahe_matches_reference_exactly() {
    o::clahe_matches_reference_exactly().unwrap();
}
