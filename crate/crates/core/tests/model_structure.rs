use hrnn::model::{count_params, forward_logits, ModelConfig, ParamSet, VOCAB};
use hrnn::selftest::jittered_params;
use hrnn::tensor::{Tape, Tensor};

fn groups(g: usize) -> usize {
    count_params(&ModelConfig {
        conv_groups: g,
        ..ModelConfig::default()
    })
    .total
}

#[test]
fn default_architecture_counts() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.num_blocks(), 36);
    assert_eq!(cfg.total_pooling(), 160);
    let params = ParamSet::<f32>::build(&cfg, 0).unwrap();
    let blocks = params
        .names()
        .filter(|n| n.ends_with(".norm1.gain"))
        .count();
    assert_eq!(blocks, 36);
}

#[test]
fn group_deltas_are_exact() {
    // Per pooling layer, groups g hold 128·(128/g)·p weights; 8 layers with
    // factors 2, 4, 4, 5 sum p to 30.
    let weights = |g: usize| 128 * (128 / g) * 30;
    assert_eq!(weights(1) - weights(128), 487_680);
    assert_eq!(weights(4) - weights(128), 119_040);
    assert_eq!(groups(1) - groups(128), 487_680);
    assert_eq!(groups(4) - groups(128), 119_040);
}

#[test]
fn default_total_is_near_reported_size() {
    let total = groups(128);
    let rel = (total as f64 - 7.3e6).abs() / 7.3e6;
    assert!(rel < 0.15, "total {total} is {:.1}% away", rel * 100.0);
    // rounded to 0.1M the three group settings stay ordered
    assert!(groups(1) > groups(4) && groups(4) > groups(128));
}

#[test]
fn count_matches_allocation_for_each_group_setting() {
    for g in [1, 4, 128] {
        let cfg = ModelConfig {
            conv_groups: g,
            ..ModelConfig::default()
        };
        assert_eq!(
            ParamSet::<f32>::build(&cfg, 1).unwrap().num_scalars(),
            count_params(&cfg).total
        );
    }
}

fn logits(params: &ParamSet, cfg: &ModelConfig, codes: &[u8]) -> Tensor<f32> {
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    forward_logits(&vars, cfg, codes, 1, codes.len(), None)
        .unwrap()
        .value()
        .as_ref()
        .clone()
}

#[test]
fn causal_at_every_position() {
    let cfg = ModelConfig::toy();
    assert_eq!(cfg.pooling_factors, [2, 4]);
    let params = jittered_params(&cfg, 31, 0.2);
    let codes: Vec<u8> = (0..160).map(|i| (i * 97 + 13) as u8).collect();
    let base = logits(&params, &cfg, &codes);
    for t in 0..codes.len() {
        let mut changed = codes.clone();
        changed[t] = changed[t].wrapping_add(128);
        let other = logits(&params, &cfg, &changed);
        let cut = (t + 1) * VOCAB;
        assert!(
            base.data()[..cut] == other.data()[..cut],
            "perturbing code {t} changed logits at or before {t}"
        );
        if t + 1 < codes.len() {
            assert!(
                base.data()[cut..cut + VOCAB] != other.data()[cut..cut + VOCAB],
                "code {t} does not reach the next logit"
            );
        }
    }
}
