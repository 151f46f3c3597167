mod support;

use support::grad;

#[test]
fn elementwise_ops() {
    grad::elementwise_ops().assert_pass();
}

#[test]
fn linear_algebra_ops() {
    grad::linear_algebra_ops().assert_pass();
}

#[test]
fn reduction_shape_and_ctc_ops() {
    grad::reduction_and_shape_ops().assert_pass();
}

#[test]
fn dense_layers() {
    grad::dense_layers().assert_pass();
}

#[test]
fn conv1d_layers() {
    grad::conv1d_layers().assert_pass();
}

#[test]
fn lstm_layer() {
    grad::lstm_layer().assert_pass();
}

#[test]
fn two_block_encoder() {
    grad::two_block_encoder().assert_pass();
}

#[test]
fn two_step_rollout_with_halt_head() {
    grad::two_step_rollout().assert_pass();
}

#[test]
fn paragraph_loss_on_two_lines() {
    grad::paragraph_loss().assert_pass();
}
