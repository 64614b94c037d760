use super::*;
use crate::adapter::{AdapterConfig, Vocab};
use crate::dsp::DspConfig;
use crate::numerics::gradcheck;
use crate::numerics::nn::randomize;

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        latent: [2, 4, 4],
        c1: 3,
        c2: 4,
        style_dim: 4,
        t_dim: 4,
        mod_hidden: 5,
    }
}

fn tiny_adapter() -> AdapterConfig {
    AdapterConfig {
        d: 4,
        heads: 2,
        d_r: 3,
        r_len: 2,
        enc_channels: vec![2],
        fc_hidden: 3,
        clip_samples: 2624,
    }
}

struct Setup {
    store: ParamStore,
    adapter: Adapter,
    denoiser: Denoiser,
}

fn setup(dcfg: &DenoiserConfig) -> Setup {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(2);
    let vocab = Vocab::from_captions(["a dog barks"]);
    let adapter = Adapter::new(&mut store, &tiny_adapter(), &DspConfig::default(), vocab, &mut rng).unwrap();
    let denoiser = Denoiser::new(&mut store, dcfg, &mut rng).unwrap();
    Setup { store, adapter, denoiser }
}

fn ref_mel(s: &Setup, seed: u64) -> Tensor {
    let clip: Vec<f64> = SeededRng::new(seed).normals(2624).iter().map(|v| 0.3 * v).collect();
    s.adapter.encoder().clip_mel(&clip).unwrap()
}

#[test]
fn fresh_blocks_are_identity_and_output_is_zero() {
    let s = setup(&tiny_denoiser());
    let mut rng = SeededRng::new(5);
    let mut g = Graph::inference(&s.store);
    let style = g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
    for (bi, block) in s.denoiser.blocks().into_iter().enumerate() {
        let c = if bi == 1 { 4 } else { 3 };
        let x = g.constant(Tensor::randn(&[c, 4, 4], 2.0, &mut rng));
        let cond = s.denoiser.condition(&mut g, StyleCondition::Present(style), 7).unwrap();
        let y = block.forward(&mut g, x, cond).unwrap();
        assert!(g.value(x).data().iter().zip(g.value(y).data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let z = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
    let out = s.denoiser.predict(&s.store, &z, 3, Some(g.value(style))).unwrap();
    assert_eq!(out.shape(), &[2, 4, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
    let out = s.denoiser.predict(&s.store, &z, 3, None).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn unit_gate_gives_plain_residual() {
    let mut s = setup(&tiny_denoiser());
    let block = s.denoiser.blocks()[0].clone();
    // bias of the zero-initialized head: γ = 0, β = 0, gate = 1
    let head = block.modulation_head();
    let b = s.store.value_mut(head.b);
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        *v = if i >= 6 { 1.0 } else { 0.0 };
    }
    let mut rng = SeededRng::new(6);
    let mut g = Graph::inference(&s.store);
    let x = g.constant(Tensor::randn(&[3, 4, 4], 1.0, &mut rng));
    let cond = s.denoiser.condition(&mut g, StyleCondition::Absent, 2).unwrap();
    let y = block.forward(&mut g, x, cond).unwrap();
    let n = channel_norm(&mut g, x).unwrap();
    let (w1, b1, w2, b2) = {
        let names = |p: &str| s.store.id(&format!("denoiser.res1.{p}")).unwrap();
        (names("conv1.w"), names("conv1.b"), names("conv2.w"), names("conv2.b"))
    };
    let (w1, b1, w2, b2) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
    let h = g.conv2d(n, w1, 1, 1).unwrap();
    let h = g.add_col_vec(h, b1).unwrap();
    let h = g.silu(h);
    let h = g.conv2d(h, w2, 1, 1).unwrap();
    let h = g.add_col_vec(h, b2).unwrap();
    let want = g.add(x, h).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(want)) < 1e-12);
}

#[test]
fn absent_and_present_styles_differ_once_trained() {
    let mut s = setup(&tiny_denoiser());
    randomize(&mut s.store, 0.5, &mut SeededRng::new(9));
    let mut rng = SeededRng::new(10);
    for _ in 0..5 {
        let z = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let style = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let a = s.denoiser.predict(&s.store, &z, 1, Some(&style)).unwrap();
        let b = s.denoiser.predict(&s.store, &z, 1, None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }
}

#[test]
fn wrong_latent_shape_rejected() {
    let s = setup(&tiny_denoiser());
    assert!(matches!(
        s.denoiser.predict(&s.store, &Tensor::zeros(&[2, 4, 2]), 1, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let mut s = setup(&tiny_denoiser());
    randomize(&mut s.store, 0.4, &mut SeededRng::new(11));
    let sched = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
    let mel = ref_mel(&s, 3);
    let z0 = Tensor::randn(&[2, 4, 4], 1.0, &mut SeededRng::new(12));
    let eps = Tensor::randn(&[2, 4, 4], 1.0, &mut SeededRng::new(13));
    let zn = forward_diffuse(&z0, 2, &sched, &eps).unwrap();
    let (adapter, denoiser) = (s.adapter.clone(), s.denoiser.clone());
    let report = gradcheck::check(&mut s.store, None, 1e-5, 1, |g| {
        let style = adapter.style_from_mel(g, "a dog barks", &mel)?;
        let z = g.constant(zn.clone());
        let pred = denoiser.forward(g, z, 2, StyleCondition::Present(style))?;
        let t = g.constant(eps.clone());
        g.mse(pred, t)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn null_condition_receives_gradient_only_when_dropped() {
    let mut s = setup(&tiny_denoiser());
    randomize(&mut s.store, 0.4, &mut SeededRng::new(14));
    let sched = NoiseSchedule::linear(4, 0.01, 0.2).unwrap();
    let mel = ref_mel(&s, 4);
    let z0 = Tensor::randn(&[2, 4, 4], 1.0, &mut SeededRng::new(15));
    let batch = [DiffusionExample {
        z0: &z0,
        caption: "a dog barks",
        ref_mel: &mel,
    }];
    let null = s.store.id("denoiser.null_style").unwrap();
    let stats = training_step(&mut s.store, &s.adapter, &s.denoiser, &sched, &batch, 0.0, &mut SeededRng::new(1)).unwrap();
    assert_eq!(stats.dropped, 0);
    assert_eq!(s.store.grad(null).norm(), 0.0);
    s.store.zero_grad();
    let stats = training_step(&mut s.store, &s.adapter, &s.denoiser, &sched, &batch, 1.0, &mut SeededRng::new(1)).unwrap();
    assert_eq!(stats.dropped, 1);
    assert!(s.store.grad(null).norm() > 0.0);
}

#[test]
fn full_dropout_drops_every_example() {
    let mut s = setup(&tiny_denoiser());
    let sched = NoiseSchedule::linear(4, 0.01, 0.2).unwrap();
    let mel = ref_mel(&s, 5);
    let z0 = Tensor::zeros(&[2, 4, 4]);
    let batch: Vec<DiffusionExample> = (0..16)
        .map(|_| DiffusionExample {
            z0: &z0,
            caption: "a dog barks",
            ref_mel: &mel,
        })
        .collect();
    let stats = training_step(&mut s.store, &s.adapter, &s.denoiser, &sched, &batch, 1.0, &mut SeededRng::new(2)).unwrap();
    assert_eq!(stats.dropped, 16);
}

#[test]
fn fresh_loss_is_unit_noise_energy() {
    let dcfg = DenoiserConfig {
        latent: [4, 8, 8],
        ..tiny_denoiser()
    };
    let mut s = setup(&dcfg);
    let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
    let mel = ref_mel(&s, 6);
    let z0 = Tensor::randn(&[4, 8, 8], 1.0, &mut SeededRng::new(16));
    let batch = [DiffusionExample {
        z0: &z0,
        caption: "a dog barks",
        ref_mel: &mel,
    }];
    let stats = training_step(&mut s.store, &s.adapter, &s.denoiser, &sched, &batch, 0.1, &mut SeededRng::new(3)).unwrap();
    assert!((stats.loss - 1.0).abs() < 0.2, "{}", stats.loss);
}

#[test]
fn guidance_identities() {
    let mut rng = SeededRng::new(17);
    let c = Tensor::randn(&[10], 1.0, &mut rng);
    let u = Tensor::randn(&[10], 1.0, &mut rng);
    assert_eq!(guidance_combine(&c, &u, 1.0).unwrap(), c);
    assert_eq!(guidance_combine(&c, &u, 0.0).unwrap(), u);
    let probe = guidance_combine(&Tensor::vector(vec![2.0]), &Tensor::vector(vec![1.0]), 3.0).unwrap();
    assert_eq!(probe.data(), &[4.0]);
    let e = |w| guidance_combine(&c, &u, w).unwrap();
    let (a, b, m) = (e(-1.0), e(5.0), e(2.0));
    for i in 0..10 {
        let mid = a.data()[i] + (b.data()[i] - a.data()[i]) * 0.5;
        assert!((m.data()[i] - mid).abs() < 1e-12);
    }
}

#[test]
fn zero_estimator_sampling_matches_hand_recursion() {
    let sched = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    let z = sample_with(&[3], &sched, &mut SeededRng::new(4), |z, _| Ok(Tensor::zeros(z.shape()))).unwrap();
    let mut rng = SeededRng::new(4);
    let z2 = rng.normals(3);
    let xi = rng.normals(3);
    let sigma2 = (0.2 * (1.0 - 0.9) / (1.0 - 0.72) as f64).sqrt();
    for i in 0..3 {
        let z1 = z2[i] / 0.8f64.sqrt() + sigma2 * xi[i];
        let z0 = z1 / 0.9f64.sqrt();
        assert!((z.data()[i] - z0).abs() < 1e-12);
    }
}

#[test]
fn guided_sampling_is_deterministic() {
    let mut s = setup(&tiny_denoiser());
    randomize(&mut s.store, 0.3, &mut SeededRng::new(18));
    let sched = NoiseSchedule::linear(5, 0.01, 0.2).unwrap();
    let style = Tensor::randn(&[1, 4], 1.0, &mut SeededRng::new(19));
    let a = sample(&s.store, &s.denoiser, &sched, &style, 2.0, &mut SeededRng::new(20)).unwrap();
    let b = sample(&s.store, &s.denoiser, &sched, &style, 2.0, &mut SeededRng::new(20)).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = sample(&s.store, &s.denoiser, &sched, &style, 2.0, &mut SeededRng::new(21)).unwrap();
    assert!(a.max_abs_diff(&c) > 1e-6);
}
