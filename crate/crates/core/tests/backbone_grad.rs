use lqa_core::backbone::{ModelConfig, Seq2SeqModel};
use lqa_core::nn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        max_positions: 16,
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for trial in 0..3u64 {
        let mut model = Seq2SeqModel::<f64>::new(tiny(), 100 + trial).unwrap();
        let prompt = Matrix::from_vec(3, 8, (0..24).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let input = [rng.gen_range(3..16), rng.gen_range(3..16)];
        let target = [rng.gen_range(3..16), 1];

        model.zero_grad();
        let out = model.forward_loss(&prompt, &input, &target, 1.0).unwrap();
        let direct = model.loss(&prompt, &input, &target).unwrap();
        assert!((out.value - direct).abs() < 1e-12);

        let h = 1e-5;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| p.grad.clone()).collect();
        for (pi, name) in names.iter().enumerate() {
            let len = analytic[pi].len();
            let mut numeric = vec![0.0; len];
            for k in 0..len {
                let orig = model.params_mut()[pi].value[k];
                model.params_mut()[pi].value[k] = orig + h;
                let lp = model.loss(&prompt, &input, &target).unwrap();
                model.params_mut()[pi].value[k] = orig - h;
                let lm = model.loss(&prompt, &input, &target).unwrap();
                model.params_mut()[pi].value[k] = orig;
                numeric[k] = (lp - lm) / (2.0 * h);
            }
            let e = rel_err(&analytic[pi], &numeric);
            assert!(e < 1e-3, "{name}: relative error {e}");
            worst = worst.max(e);
        }

        let mut numeric = vec![0.0; prompt.data.len()];
        for k in 0..prompt.data.len() {
            let mut p = prompt.clone();
            p.data[k] += h;
            let lp = model.loss(&p, &input, &target).unwrap();
            p.data[k] -= 2.0 * h;
            let lm = model.loss(&p, &input, &target).unwrap();
            numeric[k] = (lp - lm) / (2.0 * h);
        }
        let e = rel_err(&out.prompt_grad.data, &numeric);
        assert!(e < 1e-3, "prompt: relative error {e}");
        worst = worst.max(e);
    }
    eprintln!("worst relative error {worst:.3e}");
}

#[test]
fn gradient_scales_with_weight() {
    let mut model = Seq2SeqModel::<f64>::new(tiny(), 9).unwrap();
    let prompt = Matrix::from_vec(2, 8, vec![0.1; 16]);
    let a = model.forward_loss(&prompt, &[4, 5], &[6, 1], 1.0).unwrap();
    let g1: Vec<f64> = model.params()[0].1.grad.clone();
    model.zero_grad();
    let b = model.forward_loss(&prompt, &[4, 5], &[6, 1], 0.25).unwrap();
    let g2: Vec<f64> = model.params()[0].1.grad.clone();
    for (x, y) in g1.iter().zip(&g2) {
        assert!((x * 0.25 - y).abs() < 1e-12);
    }
    for (x, y) in a.prompt_grad.data.iter().zip(&b.prompt_grad.data) {
        assert!((x * 0.25 - y).abs() < 1e-12);
    }
}
