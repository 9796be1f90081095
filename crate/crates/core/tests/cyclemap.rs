use reidapt::cyclemap::*;
use reidapt::synthgen::{generate_domain, Dataset, DomainSpec, DomainTag, Image};
use reidapt::ReidError;
use reidapt_autodiff::Tape;

fn small(domain: DomainTag, seed: u64) -> Dataset {
    let spec = match domain {
        DomainTag::Target => DomainSpec::default_target(),
        _ => DomainSpec::default_source(),
    };
    generate_domain(&DomainSpec { num_identities: 3, instances_per_camera: 2, ..spec }, domain, seed).unwrap()
}

fn zeroed(g: &mut Generator) {
    g.params_mut().tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
}

fn mean_abs_to(images: &[&Image], v: f64) -> f64 {
    images.iter().map(|i| i.data().iter().map(|x| (x - v).abs()).sum::<f64>() / i.data().len() as f64).sum::<f64>()
        / images.len() as f64
}

#[test]
fn zeroed_generators_output_mid_grey() {
    let (s, t) = (small(DomainTag::Source, 1), small(DomainTag::Target, 2));
    let mut pair = GeneratorPair {
        g: Generator::new(GeneratorConfig::default(), 1).unwrap(),
        f: Generator::new(GeneratorConfig::default(), 2).unwrap(),
    };
    zeroed(&mut pair.g);
    zeroed(&mut pair.f);
    let out = pair.g.translate(&s.images()).unwrap();
    assert!(out.iter().all(|i| i.data().iter().all(|&v| v == 0.5)));
    let (bs, bt) = (s.images(), t.images());
    let expected = mean_abs_to(&bs, 0.5) + mean_abs_to(&bt, 0.5);
    assert!((cycle_loss(&pair, &bs, &bt).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn cycle_loss_equals_translation_loop() {
    let (s, t) = (small(DomainTag::Source, 3), small(DomainTag::Target, 4));
    let pair = GeneratorPair {
        g: Generator::new(GeneratorConfig::default(), 5).unwrap(),
        f: Generator::new(GeneratorConfig::default(), 6).unwrap(),
    };
    let (bs, bt): (Vec<&Image>, Vec<&Image>) = (s.images()[..4].to_vec(), t.images()[..4].to_vec());
    let loop_err = |a: &Generator, b: &Generator, xs: &[&Image]| {
        let mid = a.translate(xs).unwrap();
        let back = b.translate(&mid.iter().collect::<Vec<_>>()).unwrap();
        back.iter().zip(xs).map(|(r, x)| r.mean_abs_diff(x)).sum::<f64>() / xs.len() as f64
    };
    let oracle = loop_err(&pair.g, &pair.f, &bs) + loop_err(&pair.f, &pair.g, &bt);
    let got = cycle_loss(&pair, &bs, &bt).unwrap();
    assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
}

#[test]
fn least_squares_reference_values() {
    assert_eq!(lsgan_losses(&[0.5; 4], &[0.5; 4]), (0.25, 0.25));
    assert_eq!(lsgan_losses(&[1.0; 3], &[0.0; 3]), (0.0, 1.0));
}

#[test]
fn tape_terms_match_reference() {
    let real = [0.3, -1.2, 2.0, 0.9];
    let fake = [0.1, 0.7, -0.4, 1.5];
    let mut tape = Tape::new();
    let r = tape.constant([4], real.to_vec()).unwrap();
    let f = tape.constant([4], fake.to_vec()).unwrap();
    let (d, g) = tape_gan_terms(&mut tape, Some(r), f, GanObjective::LeastSquares).unwrap();
    let (dv, gv) = lsgan_losses(&real, &fake);
    assert!((tape.scalar(d.unwrap()) - dv).abs() < 1e-14);
    assert!((tape.scalar(g) - gv).abs() < 1e-14);

    let z = tape.constant([2], vec![0.0, 0.0]).unwrap();
    let (d, g) = tape_gan_terms(&mut tape, Some(z), z, GanObjective::CrossEntropy).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((tape.scalar(d.unwrap()) - ln2).abs() < 1e-14 && (tape.scalar(g) - ln2).abs() < 1e-14);
}

fn short(seed: u64, steps: usize) -> CycleGanConfig {
    CycleGanConfig { steps, seed, ..CycleGanConfig::default() }
}

#[test]
fn training_is_reproducible() {
    let (s, t) = (small(DomainTag::Source, 7), small(DomainTag::Target, 8));
    let a = train_cyclegan(&s, &t, &short(1, 3)).unwrap();
    let b = train_cyclegan(&s, &t, &short(1, 3)).unwrap();
    let c = train_cyclegan(&s, &t, &short(2, 3)).unwrap();
    assert_eq!(a.pair.g.params(), b.pair.g.params());
    assert_eq!(a.trace, b.trace);
    assert_ne!(a.pair.g.params(), c.pair.g.params());
}

#[test]
fn lambda_weights_only_the_cycle_term() {
    let (s, t) = (small(DomainTag::Source, 9), small(DomainTag::Target, 10));
    let out = train_cyclegan(&s, &t, &CycleGanConfig { lambda: 0.0, ..short(3, 2) }).unwrap();
    for step in &out.trace {
        let l = step.losses;
        assert_eq!(l.total, l.gan_s_to_t + l.gan_t_to_s);
        assert!(l.cycle > 0.0);
    }
    let err = train_cyclegan(&s, &t, &CycleGanConfig { lambda: -1.0, ..short(3, 1) }).unwrap_err();
    assert!(matches!(err, ReidError::InvalidArgument(_)));
    let err = train_cyclegan(&s, &t, &CycleGanConfig { batch_size: 0, ..short(3, 1) }).unwrap_err();
    assert!(matches!(err, ReidError::InvalidArgument(_)));
}

#[test]
fn cycle_error_falls_with_training() {
    let (s, t) = (small(DomainTag::Source, 11), small(DomainTag::Target, 12));
    let cfg = CycleGanConfig { steps: 150, lr: 1e-3, ..short(4, 150) };
    let out = train_cyclegan(&s, &t, &cfg).unwrap();
    let mean = |xs: &[CycleStep]| xs.iter().map(|x| x.losses.cycle).sum::<f64>() / xs.len() as f64;
    let (first, last) = (mean(&out.trace[..20]), mean(&out.trace[130..]));
    assert!(last < 0.5 * first, "cycle error {first} -> {last}");
}

#[test]
fn translated_dataset_keeps_identity_and_camera() {
    let s = small(DomainTag::Source, 13);
    let g = Generator::new(GeneratorConfig::default(), 1).unwrap();
    let da = translate_dataset(&g, &s).unwrap();
    assert_eq!(da.len(), s.len());
    assert_eq!(da.training_labels().unwrap(), s.training_labels().unwrap());
    assert_eq!(da.camera_ids(), s.camera_ids());
    for (a, b) in da.samples().iter().zip(s.samples()) {
        assert_eq!((a.sample_id, a.domain), (b.sample_id, DomainTag::Adapted));
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn target_input_is_refused() {
    let t = small(DomainTag::Target, 14);
    let g = Generator::new(GeneratorConfig::default(), 1).unwrap();
    assert!(matches!(translate_dataset(&g, &t), Err(ReidError::HiddenLabels(_))));
    assert_eq!(t.audit().training_reads(), 0);
}

#[test]
fn generator_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    let g = Generator::new(GeneratorConfig { base_channels: 4, res_blocks: 1 }, 9).unwrap();
    g.save(&path, Default::default()).unwrap();
    let (back, meta) = Generator::load(&path).unwrap();
    assert_eq!(meta.kind, "generator");
    let s = small(DomainTag::Source, 15);
    assert_eq!(g.translate(&s.images()).unwrap(), back.translate(&s.images()).unwrap());
}
