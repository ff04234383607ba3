//! Analytic gradients against central finite differences.

mod common;

use common::gradcheck;

#[test]
fn elementwise_ops() {
    gradcheck::elementwise_ops();
}

#[test]
fn row_and_column_ops() {
    gradcheck::row_and_column_ops();
}

#[test]
fn convolution_and_linear() {
    gradcheck::convolution_and_linear();
}

#[test]
fn pooling_and_reshaping() {
    gradcheck::pooling_and_reshaping();
}

#[test]
fn losses_and_normalization() {
    gradcheck::losses_and_normalization();
}

#[test]
fn total_loss_alpha_gradient() {
    gradcheck::total_loss_alpha_gradient();
}
