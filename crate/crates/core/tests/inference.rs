use oryx_core::block::{MixerMode, MixerPair};
use oryx_core::infer::{forward_with_plan, InferenceSession, ModePlan, Sampler};
use oryx_core::model::{init_params, ModelConfig, ModelParams};
use oryx_core::train::{train_step, Example, OptimizerState, TrainConfig};
use oryx_core::{SeededRng, Tensor};

fn config(pair: MixerPair) -> ModelConfig {
    ModelConfig { vocab_size: 12, d_model: 32, n_layers: 2, d_head: 8, chunk: 4, ..ModelConfig::small(pair) }
}

/// Repeating pattern the model can fit in a few dozen steps.
fn pattern(len: usize, offset: usize) -> Vec<usize> {
    (0..len).map(|i| 1 + (i + offset) % 5).collect()
}

fn trained(pair: MixerPair) -> (ModelConfig, ModelParams<Tensor<f32>>, Vec<f64>) {
    let cfg = config(pair);
    let mut rng = SeededRng::new(8);
    let mut params = init_params::<f32>(&cfg, &mut rng).unwrap();
    let train = TrainConfig::new(40, 1e-2, 4);
    let mut opt = OptimizerState::for_model(&params);
    let mut losses = Vec::new();
    for step in 0..train.steps {
        let batch: Vec<Example> = (0..4).map(|i| Example::language_model(&pattern(17, i + step as usize))).collect();
        losses.push(train_step(&batch, &mut params, &mut opt, &cfg, &train, step, &mut rng).unwrap().loss);
    }
    (cfg, params, losses)
}

#[test]
fn trained_model_decodes_like_the_batched_forward() {
    for pair in [MixerPair::Tm, MixerPair::Tg] {
        let (cfg, params, losses) = trained(pair);
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.5 * head, "{pair:?}: {head} -> {tail}");

        let toks = pattern(19, 2);
        let plan = ModePlan::from_switches(19, MixerMode::Attention, &[6, 11]).unwrap();
        let batched = forward_with_plan(&toks, &plan, &params, &cfg).unwrap();
        let mut session = InferenceSession::new(&cfg, &params).unwrap();
        let stepped = session.prefill(&toks, &plan).unwrap();
        assert!(stepped.max_abs_diff(&batched) < 1e-4, "{pair:?}: {:e}", stepped.max_abs_diff(&batched));

        // the fitted pattern continues under either mode
        for mode in [MixerMode::Attention, MixerMode::Linear] {
            let mut s = session.clone();
            let out = s.generate(5, mode, Sampler::Greedy).unwrap();
            assert_eq!(out, pattern(24, 2)[19..], "{pair:?} {mode:?}");
        }
    }
}

#[test]
fn first_layer_state_ignores_modes_but_deeper_layers_do_not() {
    let (cfg, params, _) = trained(MixerPair::Tg);
    let toks = pattern(16, 0);
    let run = |plan: ModePlan| {
        let mut s = InferenceSession::new(&cfg, &params).unwrap();
        s.prefill(&toks, &plan).unwrap();
        s.states().to_vec()
    };
    let a = run(ModePlan::uniform(16, MixerMode::Attention));
    let l = run(ModePlan::uniform(16, MixerMode::Linear));
    let m = run(ModePlan::from_switches(16, MixerMode::Linear, &[7]).unwrap());
    assert_eq!(a[0], l[0]);
    assert_eq!(a[0], m[0]);
    assert_ne!(a[1], l[1]);
}

#[test]
fn memory_grows_only_with_the_kv_cache() {
    let cfg = config(MixerPair::Tm);
    let params = init_params::<f32>(&cfg, &mut SeededRng::new(1)).unwrap();
    let mut s = InferenceSession::new(&cfg, &params).unwrap();
    s.prefill(&pattern(4, 0), &ModePlan::uniform(4, MixerMode::Linear)).unwrap();
    let m4 = s.memory();
    s.prefill(&pattern(4, 4), &ModePlan::uniform(8, MixerMode::Linear)).unwrap();
    let m8 = s.memory();
    assert_eq!(m8.kv_bytes, 2 * m4.kv_bytes);
    assert_eq!(m8.recurrent_bytes, m4.recurrent_bytes);
    // two layers, four heads, 8 x 8 f32 states
    assert_eq!(m4.recurrent_bytes, 2 * 4 * 64 * 4);
}
