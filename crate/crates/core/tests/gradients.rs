//! Finite-difference checks of every hand-written backward pass, in f64.

mod common;

use common::*;
use docclean::imaging::Image;
use docclean::neural::{
    ctc_loss_indices, preprocessor_loss, whiteness_mse, Alphabet, ApproximatorArch, ApproximatorModel,
    LogitsSequence, PreprocessorArch, PreprocessorModel,
};
use rand::seq::index::sample;
use rand::Rng;

fn tiny_pre(seed: u64) -> PreprocessorModel {
    let mut m = PreprocessorModel::new(
        PreprocessorArch {
            levels: 2,
            base_channels: 2,
            skip_gain: 2.0,
        },
        seed,
    )
    .unwrap();
    // give the zero-initialized head some weight so every block carries gradient
    let mut r = rng(seed + 100);
    let n = m.params().len();
    for p in &mut m.params_mut()[n - 3..] {
        *p = r.gen_range(-0.5..0.5);
    }
    m
}

fn tiny_approx(classes: usize, seed: u64) -> ApproximatorModel {
    ApproximatorModel::new(
        ApproximatorArch {
            conv1_channels: 3,
            conv2_channels: 4,
            hidden: 5,
            input_height: 8,
            classes,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = r.gen_range(1..=6);
        let k = r.gen_range(2..=4);
        let seq = random_log_probs(t, k, &mut r);
        let label = loop {
            let len = r.gen_range(0..=t.min(3));
            let l: Vec<usize> = (0..len).map(|_| r.gen_range(1..k)).collect();
            if docclean::neural::min_timesteps(&l) <= t {
                break l;
            }
        };
        let (_, grad) = ctc_loss_indices(&seq, &label).unwrap();
        let mut values = seq.values.clone();
        for i in 0..values.len() {
            let num = central_diff(&mut values, i, 1e-6, |v| {
                ctc_loss_indices(&LogitsSequence::new(t, k, v.to_vec()).unwrap(), &label)
                    .unwrap()
                    .0
            });
            worst = worst.max(rel_err(grad[i], num, 1e-6));
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn preprocessor_gradient_matches_finite_differences() {
    let m = tiny_pre(3);
    let mut r = rng(4);
    let img = random_image(16, 32, &mut r);
    let tape = m.forward(&img).unwrap();
    let n_out = tape.output().len();
    let upstream = vec![1.0 / n_out as f64; n_out];
    let mut grad = vec![0.0; m.parameter_count()];
    let grad_in = m.backward(&tape, &upstream, Some(&mut grad));

    let mut params = m.params().to_vec();
    let arch = *m.arch();
    let mean_out = |p: &[f64], x: &Image| {
        PreprocessorModel::from_parts(arch, p.to_vec()).unwrap().preprocess(x).unwrap().mean()
    };
    let mut worst: f64 = 0.0;
    for i in sample(&mut r, params.len(), 60).into_iter() {
        let num = central_diff(&mut params, i, 1e-6, |p| mean_out(p, &img));
        worst = worst.max(rel_err(grad[i], num, 1e-7));
    }
    assert!(worst <= 1e-4, "parameter gradient worst relative error {worst}");

    let mut pixels = img.data().to_vec();
    let mut worst_in: f64 = 0.0;
    for i in sample(&mut r, pixels.len(), 40).into_iter() {
        let num = central_diff(&mut pixels, i, 1e-6, |px| {
            mean_out(&params, &Image::from_vec(16, 32, px.to_vec()).unwrap())
        });
        worst_in = worst_in.max(rel_err(grad_in[i], num, 1e-7));
    }
    assert!(worst_in <= 1e-4, "input gradient worst relative error {worst_in}");
}

#[test]
fn approximator_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for inst in 0..5 {
        let m = tiny_approx(4, 10 + inst);
        let img = random_image(8, 16, &mut r);
        let tape = m.forward(&img).unwrap();
        let label: Vec<usize> = (0..2).map(|_| r.gen_range(1..4)).collect();
        let (_, g_lp) = ctc_loss_indices(tape.logits(), &label).unwrap();
        let mut grad = vec![0.0; m.parameter_count()];
        let grad_in = m.backward(&tape, &g_lp, Some(&mut grad));
        let arch = *m.arch();
        let loss = |p: &[f64], x: &Image| {
            let seq = ApproximatorModel::from_parts(arch, p.to_vec()).unwrap().approximate(x).unwrap();
            ctc_loss_indices(&seq, &label).unwrap().0
        };
        let mut params = m.params().to_vec();
        for i in sample(&mut r, params.len(), 40).into_iter() {
            let num = central_diff(&mut params, i, 1e-6, |p| loss(p, &img));
            worst = worst.max(rel_err(grad[i], num, 1e-6));
        }
        let mut px = img.data().to_vec();
        for i in sample(&mut r, px.len(), 20).into_iter() {
            let num = central_diff(&mut px, i, 1e-6, |v| loss(&params, &Image::from_vec(8, 16, v.to_vec()).unwrap()));
            worst = worst.max(rel_err(grad_in[i], num, 1e-6));
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn bypass_chain_gradient_matches_finite_differences() {
    let alphabet = Alphabet::new(['a', 'b', 'c']).unwrap();
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for inst in 0..4 {
        let g = tiny_pre(20 + inst);
        let f = ApproximatorModel::new(
            ApproximatorArch {
                conv1_channels: 3,
                conv2_channels: 4,
                hidden: 5,
                input_height: 8,
                classes: 4,
            },
            30 + inst,
        )
        .unwrap();
        let img = random_image(8, 16, &mut r);
        let label = ["ab", "c", "ca", "bb"][inst as usize];
        let beta = 1.0;
        let mut grad = vec![0.0; g.parameter_count()];
        preprocessor_loss(&g, &f, &img, label, &alphabet, beta, Some(&mut grad)).unwrap();
        let arch = *g.arch();
        let mut params = g.params().to_vec();
        for i in sample(&mut r, params.len(), 40).into_iter() {
            let num = central_diff(&mut params, i, 1e-6, |p| {
                let gm = PreprocessorModel::from_parts(arch, p.to_vec()).unwrap();
                preprocessor_loss(&gm, &f, &img, label, &alphabet, beta, None).unwrap().0
            });
            worst = worst.max(rel_err(grad[i], num, 1e-6));
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn zero_beta_contributes_no_gradient() {
    let (loss, grad) = whiteness_mse(&[0.2, 0.7, 1.0], 0.0);
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
    let (loss, grad) = whiteness_mse(&[0.0, 1.0], 1.0);
    assert!((loss - 0.5).abs() < 1e-15);
    assert_eq!(grad, vec![-1.0, 0.0]);
}
