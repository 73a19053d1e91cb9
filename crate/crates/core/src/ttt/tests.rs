use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::Tensor;
use crate::net::PromptMode;

fn tiny_model(mode: PromptMode) -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        mlp_ratio: 2,
        prompt_len: 3,
        prompt_mode: mode,
        width: 8,
        height: 8,
    }
}

fn images(model: &ModelConfig, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Tensor::randn([model.num_pixels() * 3], 0.3, &mut rng)
                .into_data()
                .into_iter()
                .map(|v| (v + 0.5).clamp(0.0, 1.0))
                .collect()
        })
        .collect()
}

fn setup(model: &ModelConfig, seed: u64) -> (Weights, PromptSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::init(model, &mut rng).unwrap();
    for (_, t) in w.iter_mut() {
        if t.ndim() == 2 {
            *t = Tensor::randn(t.shape().to_vec(), 0.2, &mut rng);
        }
    }
    let p = PromptSet::init(model, &mut rng);
    (w, p)
}

#[test]
fn small_scenes_enumerate_every_ordered_triplet() {
    let t = enumerate_triplets(2, 165, 0);
    assert_eq!(t.len(), 8);
    let set: BTreeSet<_> = t.iter().map(|t| (t.reference, t.src1, t.src2)).collect();
    assert_eq!(set.len(), 8);
    assert_eq!(enumerate_triplets(5, 165, 0).len(), 125);
    assert_eq!(
        enumerate_triplets(1, 165, 0),
        vec![Triplet {
            reference: 0,
            src1: 0,
            src2: 0
        }]
    );
}

#[test]
fn large_scenes_sample_the_cap_without_replacement() {
    let t = enumerate_triplets(6, 165, 3);
    assert_eq!(t.len(), 165);
    let set: BTreeSet<_> = t.iter().copied().collect();
    assert_eq!(set.len(), 165);
    assert!(t.iter().all(|t| t.reference < 6 && t.src1 < 6 && t.src2 < 6));
    assert_eq!(t, enumerate_triplets(6, 165, 3));
    assert_ne!(t, enumerate_triplets(6, 165, 4));
}

fn pointmap_var<'t>(tape: &'t Tape, pts: &[[f64; 3]]) -> Var<'t> {
    tape.constant(Tensor::new([pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap())
}

#[test]
fn consistency_loss_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<[f64; 3]> = Tensor::randn([10, 3], 1.0, &mut rng)
        .data()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let shifted: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
    let x1 = pointmap_var(&tape, &a);
    assert_eq!(consistency_loss(x1, x1, NormMode::MeanL2).unwrap().value().item(), 0.0);
    let x2 = pointmap_var(&tape, &shifted);
    let mean = consistency_loss(x1, x2, NormMode::MeanL2).unwrap().value().item();
    assert!((mean - 1.0).abs() < 1e-15);
    let sum = consistency_loss(x1, x2, NormMode::SumL2).unwrap().value().item();
    assert!((sum - 10.0).abs() < 1e-13);
    let short = pointmap_var(&tape, &a[..1]);
    assert!(consistency_loss(x1, short, NormMode::MeanL2).is_err());
}

#[test]
fn consistency_loss_matches_scalar_loop() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::randn([17, 3], 1.5, &mut rng);
    let b = Tensor::randn([17, 3], 1.5, &mut rng);
    let mut want = 0.0;
    for i in 0..17 {
        let mut s = 0.0;
        for k in 0..3 {
            s += (a.data()[i * 3 + k] - b.data()[i * 3 + k]).powi(2);
        }
        want += s.sqrt();
    }
    want /= 17.0;
    let got = consistency_loss(tape.constant(a), tape.constant(b), NormMode::MeanL2)
        .unwrap()
        .value()
        .item();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn prompt_gradients_match_finite_differences() {
    for mode in [PromptMode::PerLayer, PromptMode::FirstLayerOnly] {
        let model = tiny_model(mode);
        let (w, p) = setup(&model, 3);
        let imgs = images(&model, 3, 4);
        let t = Triplet {
            reference: 0,
            src1: 1,
            src2: 2,
        };
        let entries: Vec<(usize, usize)> = (0..p.tokens.len())
            .flat_map(|g| (0..5).map(move |k| (g, (k * 11 + g) % 48)))
            .collect();
        let report = check_gradients(&p.tokens, 1e-5, Some(&entries), |tape, v| {
            let bw = BoundWeights::bind(tape, &w, false);
            let bp = BoundPrompts { tokens: v.to_vec() };
            triplet_loss(&model, &bw, &bp, &imgs, t, NormMode::MeanL2).map_err(|e| match e {
                Error::Autodiff(a) => a,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(report.passes(1e-4, 1e-8), "{mode:?}: {report:?}");
    }
}

#[test]
fn single_view_adaptation_leaves_prompts_untouched() {
    let model = tiny_model(PromptMode::PerLayer);
    let (w, p) = setup(&model, 5);
    let imgs = images(&model, 1, 6);
    let report = adapt(&model, &w, p.clone(), &imgs, &TttConfig::default(), |_| {}).unwrap();
    assert_eq!(report.trace.len(), 1);
    assert_eq!(report.trace[0].loss, 0.0);
    assert_eq!(report.prompts, p);

    // the identical-pair forward really does agree with itself
    let tape = Tape::new();
    let bw = BoundWeights::bind(&tape, &w, false);
    let bp = BoundPrompts::bind(&tape, &p, true);
    let t = Triplet {
        reference: 0,
        src1: 0,
        src2: 0,
    };
    let loss = triplet_loss(&model, &bw, &bp, &imgs, t, NormMode::MeanL2).unwrap();
    assert_eq!(loss.value().item(), 0.0);
    tape.backward(loss).unwrap();
    assert!(bp.tokens.iter().all(|v| v.grad().unwrap().max_abs() == 0.0));
}

#[test]
fn adaptation_changes_only_prompts_and_is_deterministic() {
    let model = tiny_model(PromptMode::PerLayer);
    let (w, p) = setup(&model, 7);
    let before = w.clone();
    let imgs = images(&model, 3, 8);
    let cfg = TttConfig {
        lr: 1e-3,
        ..TttConfig::default()
    };
    let a = adapt(&model, &w, p.clone(), &imgs, &cfg, |_| {}).unwrap();
    let b = adapt(&model, &w, p.clone(), &imgs, &cfg, |_| {}).unwrap();
    assert!(w.bit_identical(&before));
    assert_eq!(a.prompts, b.prompts);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), 27);
    assert!(a.prompts.tokens.iter().zip(&p.tokens).all(|(x, y)| x != y));
    assert!(a.trace.iter().all(|r| r.loss >= 0.0));
}

#[test]
fn epochs_repeat_the_schedule() {
    let model = tiny_model(PromptMode::FirstLayerOnly);
    let (w, p) = setup(&model, 9);
    let imgs = images(&model, 2, 10);
    let cfg = TttConfig {
        epochs: 2,
        ..TttConfig::default()
    };
    let r = adapt(&model, &w, p, &imgs, &cfg, |_| {}).unwrap();
    assert_eq!(r.trace.len(), 16);
    assert_eq!(r.trace[8].epoch, 1);
    assert_eq!(r.trace[8].step, 0);
}

#[test]
fn bad_inputs_are_rejected() {
    let model = tiny_model(PromptMode::PerLayer);
    let (w, p) = setup(&model, 11);
    assert!(adapt(&model, &w, p.clone(), &[], &TttConfig::default(), |_| {}).is_err());
    assert!(adapt(&model, &w, p.clone(), &[vec![0.0; 3]], &TttConfig::default(), |_| {}).is_err());
    let cfg = TttConfig {
        epochs: 0,
        ..TttConfig::default()
    };
    assert!(adapt(&model, &w, p, &images(&model, 2, 0), &cfg, |_| {}).is_err());
}

#[test]
fn trace_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let row = TraceRow {
        epoch: 0,
        step: 3,
        reference: 1,
        src1: 2,
        src2: 0,
        loss: 0.25,
    };
    write_trace_csv(&path, &[row]).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "epoch,step,ref,src1,src2,loss\n0,3,1,2,0,0.25\n"
    );
}
