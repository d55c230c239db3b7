//! Trainable models, CTC, and the optimizer.

mod alphabet;
mod approximator;
mod checkpoint;
mod ctc;
pub mod ops;
mod optim;
mod preprocessor;

pub use alphabet::{Alphabet, BLANK};
pub use approximator::{ApproximatorArch, ApproximatorModel, ApproximatorTape};
pub use checkpoint::{Checkpoint, ModelState, RngState};
pub use ctc::{ctc_loss, ctc_loss_indices, greedy_decode, greedy_decode_indices, min_timesteps, LogitsSequence};
pub use optim::{AdamConfig, OptimizerState, ParamLayout};
pub use preprocessor::{PreprocessorArch, PreprocessorModel, PreprocessorTape};

use crate::error::Result;
use crate::imaging::Image;

/// Mean over pixels of `(g(x) - 1)^2` and its gradient w.r.t. the output.
/// A zero `beta` yields an exactly zero gradient.
pub fn whiteness_mse(output: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let n = output.len().max(1) as f64;
    let loss = output.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / n;
    let grad = if beta == 0.0 {
        vec![0.0; output.len()]
    } else {
        output.iter().map(|v| beta * 2.0 * (v - 1.0) / n).collect()
    };
    (beta * loss, grad)
}

/// Loss of the preprocessor on one strip: `CTC(f(g(x)), y) + beta * MSE(g(x), 1)`,
/// with its gradient accumulated into `grad_theta` (the approximator is frozen).
/// Returns the loss and the approximator's output on `g(x)`.
pub fn preprocessor_loss(
    g: &PreprocessorModel,
    f: &ApproximatorModel,
    image: &Image,
    label: &str,
    alphabet: &Alphabet,
    beta: f64,
    grad_theta: Option<&mut [f64]>,
) -> Result<(f64, LogitsSequence)> {
    let g_tape = g.forward(image)?;
    let target = alphabet.encode(label)?;
    bypass_loss(g, &g_tape, f, image.height(), image.width(), &target, beta, grad_theta)
}

/// [`preprocessor_loss`] on an existing forward tape of `g`, with the label
/// already encoded.
#[allow(clippy::too_many_arguments)]
pub fn bypass_loss(
    g: &PreprocessorModel,
    g_tape: &PreprocessorTape,
    f: &ApproximatorModel,
    height: usize,
    width: usize,
    target: &[usize],
    beta: f64,
    grad_theta: Option<&mut [f64]>,
) -> Result<(f64, LogitsSequence)> {
    let cleaned = Image::from_vec(height, width, g_tape.output().to_vec())?;
    let f_tape = f.forward(&cleaned)?;
    let (ctc, grad_lp) = ctc_loss_indices(f_tape.logits(), target)?;
    let (mse, grad_mse) = whiteness_mse(g_tape.output(), beta);
    if let Some(grad_theta) = grad_theta {
        let mut grad_out = f.backward(&f_tape, &grad_lp, None);
        for (a, b) in grad_out.iter_mut().zip(&grad_mse) {
            *a += b;
        }
        g.backward(g_tape, &grad_out, Some(grad_theta));
    }
    Ok((ctc + mse, f_tape.logits().clone()))
}
