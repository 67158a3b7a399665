use super::*;
use crate::gradcheck::{gradient_check, GradCheckOptions};
use crate::optim::AdamState;

fn tiny(likelihood: Likelihood, color: ColorMode) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        color,
        chroma_factor: 2,
        latent_dim: 4,
        width: 4,
        levels: 2,
        hidden: 16,
        likelihood,
        ..Default::default()
    }
}

fn images(n: usize, factor: usize, seed: u64) -> Vec<YccImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut plane = |s: usize| {
                Plane::new(s, s, (0..s * s).map(|_| rng.gen_range(40.0..220.0)).collect()).unwrap()
            };
            let y = plane(8);
            let cb = plane(8 / factor);
            let cr = plane(8 / factor);
            YccImage::new(y, cb, cr, factor).unwrap()
        })
        .collect()
}

fn batch(config: &ModelConfig, n: usize) -> Batch {
    let imgs = images(n, config.chroma_factor, 3);
    let refs: Vec<&YccImage> = imgs.iter().collect();
    Batch::new(&refs, config).unwrap()
}

#[test]
fn tape_and_value_likelihoods_agree() {
    for lik in [Likelihood::Spherical, Likelihood::Diagonal, Likelihood::Structured] {
        for color in [ColorMode::Gray, ColorMode::YCbCr] {
            let config = tiny(lik, color);
            let model = Model::new(config.clone()).unwrap();
            let params = model.init_params(5).unwrap();
            let imgs = images(3, 2, 9);
            let refs: Vec<&YccImage> = imgs.iter().collect();
            let b = Batch::new(&refs, &config).unwrap();

            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let zs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let outs = model.decode_latents(&params, &zs, lik).unwrap();

            let mut tape = Tape::new();
            let p = params.bind(&mut tape, &|_| false).unwrap();
            let z = tape.constant(Tensor::new(vec![3, 4], zs.concat()).unwrap()).unwrap();
            let dec = model.decode(&mut tape, &p, z, lik).unwrap();
            let ll = model.log_likelihood(&mut tape, &p, &dec, &b, lik).unwrap();
            for i in 0..3 {
                let v = likelihood_term(&outs[i], &imgs[i]).unwrap();
                let t = tape.value(ll).data()[i];
                assert!((v - t).abs() < 1e-8 * v.abs().max(1.0), "{lik} {color}: {v} vs {t}");
            }
        }
    }
}

#[test]
fn initial_covariance_matches_spherical_scale_on_the_diagonal() {
    let model = Model::new(tiny(Likelihood::Structured, ColorMode::Gray)).unwrap();
    let params = model.init_params(2).unwrap();
    assert_eq!(params.value("cov.conv2.b").unwrap().data()[0], -INIT_LOG_SIGMA);
}

#[test]
fn kl_on_tape_matches_closed_form() {
    let config = tiny(Likelihood::Spherical, ColorMode::Gray);
    let model = Model::new(config.clone()).unwrap();
    let params = model.init_params(4).unwrap();
    let b = batch(&config, 2);
    let qs = model.encode_images(&params, &b).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, &|_| false).unwrap();
    let q = model.encode(&mut tape, &p, &b).unwrap();
    let kl = model.kl(&mut tape, &q).unwrap();
    for (i, qi) in qs.iter().enumerate() {
        assert!((kl_divergence(qi) - tape.value(kl).data()[i]).abs() < 1e-10);
    }
}

#[test]
fn kl_is_zero_only_at_the_prior() {
    let prior = LatentGaussian { rho: vec![0.0; 3], omega: vec![1.0; 3] };
    assert_eq!(kl_divergence(&prior), 0.0);
    // one unit shift of the mean costs 1/2
    let shifted = LatentGaussian { rho: vec![1.0, 0.0, 0.0], omega: vec![1.0; 3] };
    assert!((kl_divergence(&shifted) - 0.5).abs() < 1e-15);
    let narrow = LatentGaussian { rho: vec![0.0], omega: vec![0.5] };
    assert!(kl_divergence(&narrow) > 0.0);
}

#[test]
fn covariance_branch_accounts_for_parameter_difference() {
    for (lik, nb) in [(Likelihood::Diagonal, 0), (Likelihood::Structured, 0), (Likelihood::Structured, 2)] {
        let config = ModelConfig { num_basis: nb, ..tiny(lik, ColorMode::YCbCr) };
        let model = Model::new(config.clone()).unwrap();
        let base = Model::new(ModelConfig { likelihood: Likelihood::Spherical, ..config }).unwrap();
        let full = model.init_params(0).unwrap().scalar_count();
        let sph = base.init_params(0).unwrap().scalar_count();
        assert_eq!(full - sph, model.covariance_branch_size());
    }
    let w = 4;
    let m = 5;
    let model = Model::new(tiny(Likelihood::Structured, ColorMode::Gray)).unwrap();
    assert_eq!(model.covariance_branch_size(), w * w * 9 + w + m * w * 9 + m);
}

#[test]
fn mode_mismatch_is_a_config_error() {
    let config = tiny(Likelihood::Diagonal, ColorMode::Gray);
    let model = Model::new(config).unwrap();
    let params = model.init_params(0).unwrap();
    let err = model.decode_latents(&params, &[vec![0.0; 4]], Likelihood::Structured).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    // the spherical head is always available
    model.decode_latents(&params, &[vec![0.0; 4]], Likelihood::Spherical).unwrap();
}

#[test]
fn structured_loss_gradients_match_finite_differences() {
    for nb in [0, 3] {
        let config = ModelConfig { num_basis: nb, ..tiny(Likelihood::Structured, ColorMode::YCbCr) };
        let model = Model::new(config.clone()).unwrap();
        let mut params = model.init_params(8).unwrap();
        // move the off-diagonal slots away from zero so their gradients matter
        for v in params.get_mut("cov.conv2.b").unwrap().value.data_mut().iter_mut().skip(1) {
            *v = 0.3;
        }
        let b = batch(&config, 2);
        let noise = latent_noise(2, 4, &mut ChaCha8Rng::seed_from_u64(6));
        let f = |tape: &mut Tape, p: &Bound| {
            Ok(model.loss(tape, p, &b, &noise, Likelihood::Structured)?.total)
        };
        let opts = GradCheckOptions { max_entries: Some(12), ..Default::default() };
        let report = gradient_check(&f, &params, &|_| true, &opts).unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn training_steps_reduce_the_loss() {
    let config = tiny(Likelihood::Structured, ColorMode::YCbCr);
    let model = Model::new(config.clone()).unwrap();
    let mut params = model.init_params(1).unwrap();
    let b = batch(&config, 4);
    let noise = Tensor::zeros(&[4, 4]);
    let mut adam = AdamState::new(0.002);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, &|_| true).unwrap();
        let out = model.loss(&mut tape, &p, &b, &noise, Likelihood::Structured).unwrap();
        losses.push(tape.value(out.total).item().unwrap());
        tape.backward(out.total).unwrap();
        params.accumulate_grads(&tape, &p);
        adam.step(&mut params, &|_| true).unwrap();
    }
    assert!(losses[49] < losses[0] - 1.0, "{} -> {}", losses[0], losses[49]);
}

#[test]
fn loss_breakdown_reconstructs_total() {
    let config = tiny(Likelihood::Structured, ColorMode::YCbCr);
    let model = Model::new(config.clone()).unwrap();
    let params = model.init_params(3).unwrap();
    let b = batch(&config, 3);
    let noise = latent_noise(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, &|_| true).unwrap();
    let out = model.loss(&mut tape, &p, &b, &noise, Likelihood::Structured).unwrap();
    let total = tape.value(out.total).item().unwrap();
    let rebuilt = out.nll_mean + config.beta * out.kl_mean + out.alpha_term + out.gamma_term;
    assert!((total - rebuilt).abs() < 1e-9 * total.abs());
    assert!(out.gamma_term > 0.0);
}

#[test]
fn batch_repeat_copies_one_image() {
    let config = tiny(Likelihood::Spherical, ColorMode::YCbCr);
    let b = batch(&config, 3);
    let r = b.repeat(1, 4).unwrap();
    assert_eq!(r.len, 4);
    assert_eq!(r.y.shape(), &[4, 1, 8, 8]);
    assert_eq!(&r.y.data()[64 * 3..], &b.y.data()[64..128]);
    assert!(b.repeat(3, 1).is_err());
}
