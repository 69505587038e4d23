use ctrl_cnn::data::Batch;
use ctrl_cnn::layers::{DoubleEmbedding, Group, GroupSet};
use ctrl_cnn::seed;
use ctrl_cnn::{Execution, Mode, Model, ModelConfig, Variant};
use rand::Rng;

fn full(variant: Variant) -> Model {
    Model::build(&ModelConfig {
        variant,
        vocab_size: 10,
        ..Default::default()
    })
    .unwrap()
}

fn small(variant: Variant, seed: u64) -> Model {
    let cfg = ModelConfig {
        variant,
        vocab_size: 40,
        general_dim: 6,
        domain_dim: 4,
        narrow_filters: 8,
        wide_filters: 8,
        channels: 16,
        bottleneck: 6,
        seed,
        ..Default::default()
    };
    Model::with_embedding(&cfg, DoubleEmbedding::random(40, 6, 4, 1.0, 99)).unwrap()
}

fn random_ids(rng: &mut impl Rng, vocab: usize) -> Vec<usize> {
    let len = rng.gen_range(1..=20);
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

#[test]
fn control_parameter_count_matches_shapes() {
    // embedding control: square map over the 400-wide embedding plus bias
    let emb = 400 * 400 + 400;
    // one bottleneck control per CNN slot: 256 -> 128 -> 256 with biases
    let per_slot = (128 * 256 + 128) + (256 * 128 + 256);
    let oracle = emb + 3 * per_slot;
    assert_eq!(oracle, 358_160);
    assert_eq!(full(Variant::Ctrl).group_size(Group::Ctrl), oracle);
}

#[test]
fn cnn_and_output_counts() {
    let m = full(Variant::DeCnn);
    let cnn = (128 * 400 * 3 + 128) + (128 * 400 * 5 + 128) + 3 * (256 * 256 * 5 + 256);
    assert_eq!(m.group_size(Group::Cnn), cnn);
    assert_eq!(m.group_size(Group::Fc), 256 * 3 + 3);
    assert_eq!(m.group_size(Group::Ctrl), 0);
    assert_eq!(m.group_size(Group::Emb), 10 * 300 + 10 * 100);
}

#[test]
fn tensor_counts_per_group() {
    let groups = full(Variant::Ctrl).param_groups();
    let count = |g| groups.get(&g).map_or(0, Vec::len);
    assert_eq!(count(Group::Emb), 2);
    assert_eq!(count(Group::Cnn), 10);
    assert_eq!(count(Group::Ctrl), 14);
    assert_eq!(count(Group::Fc), 2);
    // the linear family has one square map and bias per slot
    let dan = full(Variant::Dan).param_groups();
    assert_eq!(dan[&Group::Ctrl].len(), 8);
}

#[test]
fn dan_control_count() {
    let oracle = (400 * 400 + 400) + 3 * (256 * 256 + 256);
    assert_eq!(full(Variant::Dan).group_size(Group::Ctrl), oracle);
}

#[test]
fn frozen_variants_mark_cnn_untrainable() {
    for v in Variant::ALL {
        let m = full(v);
        let frozen = m.params().iter().filter(|p| p.group == Group::Cnn).all(|p| !p.trainable);
        assert_eq!(frozen, v.frozen_cnn(), "{v}");
        assert!(m.params().iter().filter(|p| p.group == Group::Emb).all(|p| !p.trainable));
    }
}

#[test]
fn controlled_variants_start_as_plain_cnn() {
    let base = small(Variant::DeCnn, 5);
    let mut rng = seed::rng(1);
    let sentences: Vec<Vec<usize>> = (0..100).map(|_| random_ids(&mut rng, 40)).collect();
    for v in [Variant::Ctrl, Variant::CtrlMinus, Variant::Dan, Variant::DanMinusMinus] {
        let m = small(v, 5);
        for ids in &sentences {
            let (a, _) = base.forward_sentence(ids, Mode::Eval, &mut seed::rng(0)).unwrap();
            let (b, _) = m.forward_sentence(ids, Mode::Eval, &mut seed::rng(0)).unwrap();
            let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst <= 1e-9, "{v}: {worst}");
        }
    }
}

#[test]
fn padding_does_not_leak_between_rows() {
    let m = small(Variant::Ctrl, 2);
    let short = vec![3, 4];
    let long = vec![5, 6, 7, 8, 9, 10, 11];
    let batch = Batch::from_encoded(&[(short.clone(), vec![2; 2]), (long.clone(), vec![2; 7])]);
    let out = m.forward(&batch, Mode::Eval, 0, Execution::Sequential).unwrap();
    let (alone, _) = m.forward_sentence(&short, Mode::Eval, &mut seed::rng(0)).unwrap();
    let labels = 3;
    let row0 = &out.data()[..2 * labels];
    assert_eq!(row0, alone.data());
    // padded tail of the short row is zero
    assert!(out.data()[2 * labels..7 * labels].iter().all(|&v| v == 0.0));
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let m = small(Variant::Ctrl, 3);
    let mut rng = seed::rng(2);
    let rows: Vec<(Vec<usize>, Vec<usize>)> = (0..9)
        .map(|_| {
            let ids = random_ids(&mut rng, 40);
            let labels = ids.iter().map(|i| i % 3).collect();
            (ids, labels)
        })
        .collect();
    let batch = Batch::from_encoded(&rows);
    let all = GroupSet::of(&[Group::Cnn, Group::Ctrl, Group::Fc]);
    let (ls, gs) = m.batch_loss(&batch, Mode::Train, 4, Some(all), Execution::Sequential).unwrap();
    let (lp, gp) = m.batch_loss(&batch, Mode::Train, 4, Some(all), Execution::Parallel).unwrap();
    assert_eq!(ls.to_bits(), lp.to_bits());
    assert_eq!(gs, gp);
}

#[test]
fn construction_is_deterministic() {
    assert_eq!(small(Variant::Ctrl, 8), small(Variant::Ctrl, 8));
    assert_ne!(small(Variant::Ctrl, 8), small(Variant::Ctrl, 9));
}

#[test]
fn out_of_range_token_is_rejected() {
    let m = small(Variant::Ctrl, 1);
    assert!(m.forward_sentence(&[1, 40], Mode::Eval, &mut seed::rng(0)).is_err());
}

#[test]
fn default_hyperparameters() {
    let c = ModelConfig::default();
    assert_eq!((c.general_dim, c.domain_dim), (300, 100));
    assert_eq!((c.narrow_filters, c.narrow_kernel, c.wide_filters, c.wide_kernel), (128, 3, 128, 5));
    assert_eq!((c.channels, c.kernel, c.upper_layers, c.bottleneck, c.labels), (256, 5, 3, 128, 3));
    assert_eq!(c.dropout, 0.55);
    let t = ctrl_cnn::TrainConfig::default();
    assert_eq!((t.lr_step1, t.lr_step2), (0.00005, 0.0001));
}
