//! Mixture-of-experts pipeline: gate, fusion arms, joint objective and training.

mod common;

use common::*;
use erclab::attention::AttentionConfig;
use erclab::autograd::{Graph, Var};
use erclab::context::ContextConfig;
use erclab::gradcheck::max_relative_error;
use erclab::losses::{focal_loss, ClassWeights, LossConfig};
use erclab::metrics::SelectionMetric;
use erclab::mister::{
    gate_fuse, mister_objective, mister_predict, mister_train, preset_attention, preset_context, preset_loss_weights,
    BatchOutputs, ConversationVars, Gate, MisterArch, MisterConfig, MisterModel, MisterPreset, MisterSetup,
};
use erclab::nn::layer_norm_rows;
use erclab::optim::{OptimizerConfig, OptimizerKind};
use erclab::params::{GradStore, ParamStore};
use erclab::runner::synth::{generate_synthetic_corpus, SynthKind, SynthSizes, MODALITIES};
use erclab::tensor::Matrix;
use erclab::training::load_split;
use proptest::prelude::*;
use rand::Rng;

fn loss_cfg(lambda: f64, alpha: f64) -> LossConfig {
    LossConfig {
        gamma_focal: 2.0,
        gamma_vs: 0.0,
        tau_vs: 0.0,
        tau_con: 0.5,
        lambda_con: lambda,
        alpha_kl: alpha,
        beta_hcam: None,
        lambda_care: 0.0,
        class_weights: None,
    }
}

fn toy_setup(input_dim: usize, num_classes: usize, epochs: usize) -> MisterSetup {
    MisterSetup {
        mister: MisterConfig {
            fusion_layers: 1,
            fusion_dim: 4,
            monolithic: false,
        },
        context: ContextConfig {
            hidden_dim: 3,
            gru_layers: 1,
            dropout: 0.0,
            inception_kernels: vec![1, 3],
        },
        attention: AttentionConfig::new(4, 2, 0.0).unwrap(),
        loss: loss_cfg(1.0, 0.1),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adamw,
            learning_rate: 5e-3,
            batch_size: 4,
            epochs,
            grad_clip_norm: Some(1.0),
            weight_decay: 0.0,
        },
        selection: SelectionMetric::WeightedF1,
        modalities: MODALITIES.iter().map(|m| m.to_string()).collect(),
        input_dims: vec![input_dim; 2],
        num_classes,
        seed: 5,
    }
}

// ---------------------------------------------------------------- gate

fn gate(c: usize) -> (ParamStore, Gate) {
    let mut store = ParamStore::new();
    let g = Gate::new(&mut store, "gate", c, &mut rng(0));
    (store, g)
}

#[test]
fn saturated_gate_selects_the_speech_expert() {
    let (mut store, g) = gate(4);
    store.set(g.affine.weight, Matrix::zeros(12, 3));
    store.set(g.affine.bias, Matrix::row_vector(&[30.0, -30.0, -30.0]));
    let mut r = rng(1);
    for _ in 0..100 {
        let e: Vec<Matrix> = (0..3).map(|_| normal(&mut r, 5, 4).scale(5.0)).collect();
        let (beta, fused) = gate_fuse(&store, &g, [&e[0], &e[1], &e[2]]).unwrap();
        for i in 0..5 {
            assert!((beta[(i, 0)] - 1.0).abs() < 1e-6);
        }
        assert!(fused.zip_map(&e[0], |a, b| (a - b).abs()).max_abs() < 1e-6);
    }
}

#[test]
fn zero_gate_averages_the_experts() {
    let (mut store, g) = gate(2);
    g.affine.set(&mut store, Matrix::zeros(6, 3));
    let e = [
        Matrix::row_vector(&[1.0, 0.0]),
        Matrix::row_vector(&[0.0, 1.0]),
        Matrix::row_vector(&[0.5, 0.5]),
    ];
    let (beta, fused) = gate_fuse(&store, &g, [&e[0], &e[1], &e[2]]).unwrap();
    for k in 0..3 {
        assert!((beta[(0, k)] - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((fused[(0, 0)] - 0.5).abs() < 1e-15 && (fused[(0, 1)] - 0.5).abs() < 1e-15);
}

#[test]
fn gate_rejects_mismatched_experts() {
    let (store, g) = gate(3);
    let a = Matrix::zeros(2, 3);
    assert!(gate_fuse(&store, &g, [&a, &Matrix::zeros(3, 3), &a]).is_err());
    assert!(gate_fuse(&store, &g, [&Matrix::zeros(2, 2), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2)]).is_err());
}

// ---------------------------------------------------------------- fusion

fn zero_values(store: &mut ParamStore, arch: &MisterArch, include_self: bool) {
    for layer in &arch.fusion.layers {
        let mut blocks = vec![&layer.cross_speech, &layer.cross_text];
        if include_self {
            blocks.extend([&layer.self_speech, &layer.self_text]);
        }
        for b in blocks {
            let (r, c) = store.get(b.value.weight).shape();
            b.value.set(store, Matrix::zeros(r, c));
        }
    }
}

#[test]
fn zero_value_projections_leave_the_normalized_residual() {
    let mut s = toy_setup(3, 3, 1);
    s.mister.monolithic = true;
    let mut store = ParamStore::new();
    let arch = MisterArch::new(&mut store, &s, &mut rng(2)).unwrap();
    zero_values(&mut store, &arch, false);
    let mut r = rng(3);
    let (es, et) = (normal(&mut r, 5, 3), normal(&mut r, 5, 3));
    let mut g = Graph::new(&store);
    let (sv, tv) = (g.input(es.clone()), g.input(et.clone()));
    let fs = arch.fusion.input_speech.forward(&mut g, sv);
    let ft = arch.fusion.input_text.forward(&mut g, tv);
    let layer = &arch.fusion.layers[0];
    let m_s = layer.cross_speech.forward(&mut g, fs, ft, ft, None).unwrap();
    let m_t = layer.cross_text.forward(&mut g, ft, fs, fs, None).unwrap();
    let diff_s = g.value(m_s).zip_map(&layer_norm_rows(g.value(fs)), |a, b| (a - b).abs()).max_abs();
    let diff_t = g.value(m_t).zip_map(&layer_norm_rows(g.value(ft)), |a, b| (a - b).abs()).max_abs();
    assert!(diff_s < 1e-12 && diff_t < 1e-12, "{diff_s} {diff_t}");

    // with the self-attention values zeroed too, each stream is LN(LN(FC(E)))
    zero_values(&mut store, &arch, true);
    let mut g = Graph::new(&store);
    let (sv, tv) = (g.input(es.clone()), g.input(et));
    let fs = arch.fusion.input_speech.forward(&mut g, sv);
    let out = arch.fusion.forward(&mut g, sv, tv).unwrap();
    let expected = layer_norm_rows(&layer_norm_rows(g.value(fs)));
    assert!(g.value(out.speech).zip_map(&expected, |a, b| (a - b).abs()).max_abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn fusion_logits_have_one_row_per_utterance(n in 1usize..10, c in 2usize..5, seed in any::<u64>()) {
        let s = toy_setup(3, c, 1);
        let mut store = ParamStore::new();
        let arch = MisterArch::new(&mut store, &s, &mut rng(seed)).unwrap();
        let mut r = rng(seed ^ 9);
        let mut g = Graph::new(&store);
        let sv = g.input(normal(&mut r, n, 3));
        let tv = g.input(normal(&mut r, n, 3));
        let v = arch.forward(&mut g, sv, tv).unwrap();
        prop_assert_eq!(g.value(v.fused).shape(), (n, c));
        prop_assert_eq!(g.value(v.multimodal).shape(), (n, c));
        prop_assert_eq!(g.value(v.gate.unwrap()).shape(), (n, 3));
        let bad = g.input(normal(&mut r, n + 1, 3));
        prop_assert!(arch.fusion.forward(&mut g, sv, bad).is_err());
    }
}

// ---------------------------------------------------------------- objective

fn random_outputs(r: &mut rand_chacha::ChaCha8Rng, n: usize, c: usize) -> BatchOutputs {
    BatchOutputs {
        speech: normal(r, n, c),
        text: normal(r, n, c),
        multimodal: normal(r, n, c),
        fused: normal(r, n, c),
        m_speech: normal(r, n, 4),
        m_text: normal(r, n, 4),
    }
}

fn summed_focal(z: &Matrix, y: &[usize]) -> f64 {
    focal_loss(z, y, 2.0, &ClassWeights::uniform(z.cols())).unwrap().value * y.len() as f64
}

#[test]
fn objective_endpoints_drop_their_terms() {
    let mut r = rng(4);
    for _ in 0..20 {
        let out = random_outputs(&mut r, 6, 3);
        let y = [vec![0, 0], labels(&mut r, 4, 3)].concat();
        let focal = summed_focal(&out.speech, &y)
            + summed_focal(&out.text, &y)
            + summed_focal(&out.fused, &y)
            + summed_focal(&out.multimodal, &y);
        let emb = Matrix::concat_rows(&[&out.m_speech, &out.m_text]);
        let doubled: Vec<usize> = y.iter().chain(&y).copied().collect();
        let con = oracle_supcon(&emb, &doubled, 0.5, false).unwrap();

        let both_off = mister_objective(&out, &y, &loss_cfg(0.0, 0.0)).unwrap();
        assert!((both_off.value - focal).abs() < 1e-10);
        assert!(both_off.grads[4].max_abs() == 0.0 && both_off.grads[5].max_abs() == 0.0);

        let alpha_off = mister_objective(&out, &y, &loss_cfg(2.0, 0.0)).unwrap();
        assert!((alpha_off.value - (focal + 2.0 * con)).abs() < 1e-10);
        assert_eq!(alpha_off.parts.kl, 0.0);

        let lambda_off = mister_objective(&out, &y, &loss_cfg(0.0, 0.1)).unwrap();
        assert!((lambda_off.value - (focal + 0.1 * lambda_off.parts.kl)).abs() < 1e-10);
        assert!(lambda_off.parts.kl > 0.0);
    }
}

#[test]
fn presets_record_the_published_hyper_parameters() {
    assert_eq!(preset_loss_weights(MisterPreset::Iemocap), (2.0, 0.1, 1.0));
    assert_eq!(preset_loss_weights(MisterPreset::Mosi), (1.0, 0.1, 1.0));
    assert_eq!(preset_loss_weights(MisterPreset::Meld), (1.0, 1e-3, 0.05));
    let fusion = MisterConfig::default();
    assert_eq!((fusion.fusion_layers, fusion.fusion_dim), (4, 120));
    let attn = preset_attention();
    assert_eq!((attn.model_dim, attn.heads, attn.dropout_rate), (120, 4, 0.5));
    for (p, layers) in [(MisterPreset::Iemocap, 3), (MisterPreset::Mosi, 3), (MisterPreset::Meld, 2)] {
        let ctx = preset_context(p);
        assert_eq!((ctx.hidden_dim, ctx.gru_layers, ctx.dropout), (512, layers, 0.2));
    }
}

/// Full objective over a batch of conversations and its parameter gradient.
fn batch_objective(arch: &MisterArch, store: &ParamStore, batch: &[[Matrix; 2]], y: &[usize], cfg: &LossConfig) -> (f64, GradStore) {
    let mut g = Graph::new(store);
    let outs: Vec<ConversationVars> = batch
        .iter()
        .map(|x| {
            let s = g.input(x[0].clone());
            let t = g.input(x[1].clone());
            arch.forward(&mut g, s, t).unwrap()
        })
        .collect();
    let mut cat = |f: &dyn Fn(&ConversationVars) -> Var| {
        let vs: Vec<Var> = outs.iter().map(f).collect();
        g.concat_rows(&vs)
    };
    let vars = [
        cat(&|o| o.speech.unwrap()),
        cat(&|o| o.text.unwrap()),
        cat(&|o| o.multimodal),
        cat(&|o| o.fused),
        cat(&|o| o.m_speech),
        cat(&|o| o.m_text),
    ];
    let values = BatchOutputs {
        speech: g.value(vars[0]).clone(),
        text: g.value(vars[1]).clone(),
        multimodal: g.value(vars[2]).clone(),
        fused: g.value(vars[3]).clone(),
        m_speech: g.value(vars[4]).clone(),
        m_text: g.value(vars[5]).clone(),
    };
    let l = mister_objective(&values, y, cfg).unwrap();
    let loss = g.custom_scalar(l.value, vars.into_iter().zip(l.grads).collect());
    let back = g.backward(loss);
    let mut grads = GradStore::zeros_like(store);
    g.accumulate_param_grads(&back, &mut grads);
    (l.value, grads)
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let s = toy_setup(3, 3, 1);
    let mut r = rng(6);
    for trial in 0..3 {
        let mut store = ParamStore::new();
        let arch = MisterArch::new(&mut store, &s, &mut r).unwrap();
        let batch = vec![[normal(&mut r, 3, 3), normal(&mut r, 3, 3)], [normal(&mut r, 4, 3), normal(&mut r, 4, 3)]];
        let y = [vec![0, 0, 1], vec![1, 2, 2, 0]].concat();
        let cfg = loss_cfg(1.0, 0.1);
        let (_, grads) = batch_objective(&arch, &store, &batch, &y, &cfg);
        let total = store.num_scalars();
        let indices: Vec<usize> = (0..32).map(|_| r.gen_range(0..total)).collect();
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &indices {
            let x = store.flat_get(i);
            let mut plus = store.clone();
            plus.flat_set(i, x + h);
            let mut minus = store.clone();
            minus.flat_set(i, x - h);
            let fp = batch_objective(&arch, &plus, &batch, &y, &cfg).0;
            let fm = batch_objective(&arch, &minus, &batch, &y, &cfg).0;
            analytic.push(grads.flat_get(i));
            numeric.push((fp - fm) / (2.0 * h));
        }
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-3, "trial {trial}: relative error {err}");
    }
}

// ---------------------------------------------------------------- training

#[test]
fn training_is_deterministic_and_gates_stay_on_the_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let sizes = SynthSizes {
        conversations: [8, 4, 4],
        utterances: 5,
        dim: 6,
        speech_frames: 1,
    };
    let ds = generate_synthetic_corpus(SynthKind::ModalityImbalanced, 1, &sizes, dir.path()).unwrap();
    let mods: Vec<String> = MODALITIES.iter().map(|m| m.to_string()).collect();
    let train = load_split(&ds, "train", &mods).unwrap();
    let val = load_split(&ds, "val", &mods).unwrap();
    let s = toy_setup(6, ds.num_classes(), 3);
    let run = || {
        let mut model = MisterModel::init(&s).unwrap();
        let fit = mister_train(&mut model, &train, &val).unwrap();
        (fit, model)
    };
    let (fit_a, model_a) = run();
    let (fit_b, model_b) = run();
    assert_eq!(fit_a.history, fit_b.history);
    assert_eq!(fit_a.best_report, fit_b.best_report);
    assert_eq!(model_a.store.checksum(), model_b.store.checksum());
    let preds = mister_predict(&model_a, &val).unwrap();
    assert_eq!(preds, mister_predict(&model_b, &val).unwrap());
    for p in &preds {
        assert_eq!(p.labels.len(), p.utt_ids.len());
        for i in 0..p.gate.rows() {
            assert!((p.gate.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let mut unlabeled = train.clone();
    unlabeled[0].labels[0] = None;
    assert!(mister_train(&mut MisterModel::init(&s).unwrap(), &unlabeled, &val).is_err());
    let mut no_text = train.clone();
    no_text[1].features.remove("text");
    assert!(mister_train(&mut MisterModel::init(&s).unwrap(), &no_text, &val).is_err());
}
