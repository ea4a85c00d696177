#![allow(dead_code)]

pub mod grads;

use coordfill::gradcheck::GradReport;

/// Every gradient check, labelled.
pub fn all_grad_checks() -> Vec<(String, GradReport)> {
    [
        grads::conv2d_grads,
        grads::conv_transpose2d_grads,
        grads::linear_and_elementwise_grads,
        grads::activation_grads,
        grads::concat_narrow_resample_grads,
        grads::fft_grads,
        grads::norm_grads,
        grads::reduction_and_loss_grads,
        grads::query_decode_grads,
        grads::end_to_end_generator_query_loss,
        grads::end_to_end_discriminator_losses,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
