mod common;

use common::{randomize_all, random_tensor, rng, A4};
use gmenet::kernels::ConvSpec;
use gmenet::network::{Ablation, FusionOrder, Network, NetworkConfig};
use gmenet::nn::{Conv2d, Graph, Mode, ParamStore};
use gmenet::{Error, Tensor};

fn mini(ablation: Ablation) -> NetworkConfig {
    NetworkConfig {
        initial_channels: 8,
        stage_widths: vec![8, 16],
        blocks_per_stage: vec![1, 2],
        num_classes: 7,
        reduction_ratio: 4,
        input_size: [10, 10],
        ablation,
        ..NetworkConfig::default()
    }
}

fn ablation(use_dbam: bool, use_cbam: bool, use_global_branch: bool) -> Ablation {
    Ablation {
        use_dbam,
        use_cbam,
        use_global_branch,
    }
}

#[test]
fn same_seed_builds_identical_parameters() {
    let cfg = mini(Ablation::default());
    let a = Network::<f64>::new(&cfg, 11).unwrap();
    let b = Network::<f64>::new(&cfg, 11).unwrap();
    let c = Network::<f64>::new(&cfg, 12).unwrap();
    assert_eq!(a.signature(), b.signature());
    for (p, q) in a.store().params().iter().zip(b.store().params()) {
        assert_eq!(p.tensor.data(), q.tensor.data(), "{}", p.name);
    }
    assert_eq!(a.store().fingerprint(), b.store().fingerprint());
    assert_ne!(a.store().fingerprint(), c.store().fingerprint());
}

#[test]
fn global_branch_off_has_no_mcb_units() {
    let net = Network::<f32>::new(&mini(ablation(true, false, false)), 1).unwrap();
    assert!(net.stages().iter().all(|s| s.mcbs.is_empty() && s.projection.is_none()));
    assert!(net.signature().iter().all(|(n, _)| !n.contains(".mcb.") && !n.contains(".proj.")));
    let net = Network::<f32>::new(&mini(Ablation::default()), 1).unwrap();
    let per_stage: Vec<usize> = net.stages().iter().map(|s| s.mcbs.len()).collect();
    assert_eq!(per_stage, vec![1, 2]);
}

#[test]
fn forward_shape_contract_at_full_resolution() {
    let net = Network::<f32>::new(&NetworkConfig::default(), 3).unwrap();
    let x = random_tensor(&[4, 3, 112, 112], 4, -1.0, 1.0).cast::<f32>();
    let out = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(out.logits.shape(), &[4, 7]);
    assert!(out.logits.all_finite());
    assert_eq!(out.attention_maps.len(), 3 + 4 + 6 + 3);
    let last = out.attention_maps.last().unwrap();
    assert_eq!(last.channel.shape(), &[4, 256, 1, 1]);
    assert_eq!(last.spatial.shape(), &[4, 1, 7, 7]);
}

#[test]
fn logits_match_end_to_end_oracle() {
    for ab in [Ablation::default(), ablation(false, true, true), ablation(false, false, false)] {
        let mut net = Network::<f64>::new(&mini(ab), 5).unwrap();
        randomize_all(net.store_mut(), 6, 0.3);
        let x = random_tensor(&[1, 3, 10, 10], 7, -1.0, 1.0);
        let out = net.forward(&x, Mode::Eval).unwrap();
        let oracle = common::network_logits(&net, &A4::from_tensor(&x));
        assert!(common::max_abs_diff(out.logits.data(), &oracle[0]) < 1e-4, "{ab:?}");
    }
}

#[test]
fn zero_global_branch_leaves_local_path_unchanged() {
    let local = Network::<f64>::new(&mini(ablation(true, false, false)), 8).unwrap();
    let mut full = Network::<f64>::new(&mini(Ablation::default()), 9).unwrap();
    for p in local.store().params() {
        full.store_mut().by_name_mut(&p.name).unwrap().data_mut().copy_from_slice(p.tensor.data());
    }
    let global: Vec<String> = full
        .store()
        .params()
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.contains(".mcb.") || n.contains(".proj."))
        .collect();
    for name in &global {
        full.store_mut().zero_prefix(name);
    }
    let x = random_tensor(&[2, 3, 10, 10], 10, -1.0, 1.0);
    let a = local.forward(&x, Mode::Eval).unwrap();
    let b = full.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn fusion_order_does_not_matter() {
    let mut net = Network::<f64>::new(&mini(Ablation::default()), 12).unwrap();
    randomize_all(net.store_mut(), 13, 0.3);
    let x = random_tensor(&[2, 3, 10, 10], 14, -1.0, 1.0);
    let run = |order| {
        let mut g = Graph::new(net.store(), Mode::Eval, false);
        let v = g.input(x.clone());
        let out = net.forward_graph_ordered(&mut g, v, order).unwrap();
        g.tape.value(out.logits).clone()
    };
    assert_eq!(run(FusionOrder::LocalFirst), run(FusionOrder::GlobalFirst));
}

#[test]
fn forward_is_deterministic() {
    let net = Network::<f64>::new(&mini(Ablation::default()), 15).unwrap();
    let x = random_tensor(&[3, 3, 10, 10], 16, -1.0, 1.0);
    for mode in [Mode::Eval, Mode::Train] {
        let a = net.forward(&x, mode).unwrap();
        let b = net.forward(&x, mode).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.attention_maps, b.attention_maps);
    }
}

#[test]
fn ablations_strictly_reduce_parameters() {
    let count = |ab| Network::<f32>::new(&mini(ab), 1).unwrap().count_parameters();
    let full = count(ablation(true, false, true));
    let no_global = count(ablation(true, false, false));
    let cbam = count(ablation(false, true, false));
    let plain = count(ablation(false, false, false));
    assert!(full > no_global, "{full} vs {no_global}");
    assert!(no_global > cbam && cbam > plain, "{no_global} {cbam} {plain}");
    let net = Network::<f32>::new(&mini(Ablation::default()), 1).unwrap();
    let by_store: usize = net.store().params().iter().map(|p| p.tensor.len()).sum();
    assert_eq!(net.count_parameters(), by_store);
}

#[test]
fn lone_convolution_counts() {
    let mut store = ParamStore::<f32>::new();
    let conv = Conv2d::new(&mut store, &mut rng(1), "c", 32, 32, 3, ConvSpec::same(3), false);
    assert_eq!(conv.param_count(), 9216);
    assert_eq!(store.num_params(), 9216);
    assert_eq!(conv.macs(14, 14), 1_806_336);
}

#[test]
fn stageless_network_counts_stem_and_head_only() {
    let cfg = NetworkConfig {
        stage_widths: vec![],
        blocks_per_stage: vec![],
        input_size: [14, 14],
        ..NetworkConfig::default()
    };
    let net = Network::<f32>::new(&cfg, 1).unwrap();
    let stem = 32 * 14 * 14 * 3 * 9;
    let head = 32 * 7;
    assert_eq!(net.count_multiply_accumulates([14, 14]), (stem + head) as u64);
    assert_eq!(net.count_parameters(), 3 * 32 * 9 + 2 * 32 + head + 7);
}

#[test]
fn wrong_input_size_names_the_expected_shape() {
    let net = Network::<f32>::new(&mini(Ablation::default()), 1).unwrap();
    let err = net.forward(&Tensor::zeros(&[1, 3, 12, 12]), Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("10, 10"), "{err}");
}

#[test]
fn invalid_widths_name_the_stage() {
    let cfg = NetworkConfig {
        stage_widths: vec![32, 62],
        blocks_per_stage: vec![1, 1],
        ..NetworkConfig::default()
    };
    let err = Network::<f32>::new(&cfg, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("stage 1"), "{err}");
    let cfg = NetworkConfig {
        stage_widths: vec![32, 64],
        blocks_per_stage: vec![1],
        ..NetworkConfig::default()
    };
    assert!(matches!(Network::<f32>::new(&cfg, 1), Err(Error::Config(_))));
}

#[test]
fn miniature_network_gradients_match_finite_differences() {
    let cfg = NetworkConfig {
        initial_channels: 8,
        stage_widths: vec![8, 8],
        blocks_per_stage: vec![1, 1],
        reduction_ratio: 4,
        input_size: [6, 6],
        ..NetworkConfig::default()
    };
    let mut net = Network::<f64>::new(&cfg, 20).unwrap();
    randomize_all(net.store_mut(), 21, 0.4);
    common::away_from_zero(net.store_mut(), 0.1);
    let x = random_tensor(&[2, 3, 6, 6], 22, -1.0, 1.0);
    let labels = [1usize, 4];
    let model = net.clone();
    let report = common::gradient_check(net.store_mut(), Mode::Train, &x, 6, &|g, x| {
        let out = model.forward_graph(g, x)?;
        g.tape.cross_entropy(out.logits, &labels)
    });
    assert!(report.passes(1e-3), "{report}");
}
