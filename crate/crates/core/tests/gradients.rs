//! Central finite-difference checks of every training loss at double precision.

mod common;

use common::gradients::*;

#[test]
fn cross_entropy() {
    assert!(cross_entropy_gradients() < TOL);
}

#[test]
fn reverse_homo() {
    assert!(reverse_homo_gradients() < TOL);
}

#[test]
fn reverse_hete() {
    assert!(reverse_hete_gradients() < TOL);
}

#[test]
fn forward_output() {
    assert!(forward_output_gradients() < TOL);
}

#[test]
fn forward_hidden() {
    assert!(forward_hidden_gradients() < TOL);
}

#[test]
fn forward_combined() {
    assert!(combined_forward_gradients() < TOL);
}
