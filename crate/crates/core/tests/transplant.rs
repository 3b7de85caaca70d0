mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use skinseg::network::forward_chw;
use skinseg::surgery::{apply_transplant, plan_transplant, Action, TransplantMode};
use skinseg::weights::WeightBundle;
use skinseg::zoo::{build_classifier, build_graph_with, LayerKind, ModelGraph, Variant, Widths};

fn tiny(v: Variant, classes: usize) -> ModelGraph {
    build_graph_with(v, classes, Widths::tiny(v.backbone())).unwrap()
}

fn random_weights(g: &ModelGraph, seed: u64) -> WeightBundle {
    let mut w = WeightBundle::init(g, seed).unwrap();
    common::randomize(&mut w, seed);
    w
}

fn names_where(g: &ModelGraph, f: impl Fn(&LayerKind) -> bool) -> BTreeSet<String> {
    g.learnable_layers().filter(|l| f(&l.kind)).map(|l| l.name.clone()).collect()
}

fn with_action(plan: &skinseg::surgery::TransplantPlan, a: Action) -> BTreeSet<String> {
    plan.layer_matches.iter().filter(|m| m.action == a).map(|m| m.target.clone()).collect()
}

#[test]
fn partial_copies_convolutions_and_reinitializes_heads() {
    for src_variant in Variant::ALL {
        for dst_variant in Variant::ALL.into_iter().filter(|d| d.backbone() == src_variant.backbone()) {
            let src = tiny(src_variant, 21);
            let dst = tiny(dst_variant, 4);
            let plan = plan_transplant(&src, &random_weights(&src, 1), &dst, TransplantMode::Partial).unwrap();
            let convs = names_where(&dst, |k| matches!(k, LayerKind::Conv { .. }));
            let heads = names_where(&dst, |k| matches!(k, LayerKind::ScoreConv { .. } | LayerKind::TransposedConv { .. }));
            assert_eq!(with_action(&plan, Action::Copy), convs, "{src_variant} -> {dst_variant}");
            assert_eq!(with_action(&plan, Action::Reinitialize), heads, "{src_variant} -> {dst_variant}");
        }
    }
}

#[test]
fn partial_from_classifier_reshapes_dense_layers() {
    for v in Variant::ALL {
        let src = build_classifier(v.backbone(), 10, Widths::tiny(v.backbone())).unwrap();
        let dst = tiny(v, 4);
        let plan = plan_transplant(&src, &random_weights(&src, 2), &dst, TransplantMode::Partial).unwrap();
        let expected: BTreeSet<String> = ["fc6", "fc7"].map(String::from).into();
        assert_eq!(with_action(&plan, Action::ReshapeCopy), expected, "{v}");
        assert!(with_action(&plan, Action::Reinitialize).iter().all(|n| n.starts_with("score") || n.starts_with("upscore")));
    }
}

#[test]
fn full_transplant_between_identical_heads_preserves_outputs() {
    let mut rng = common::rng(9);
    for v in Variant::ALL {
        let g = tiny(v, 4);
        let src = random_weights(&g, 3);
        let plan = plan_transplant(&g, &src, &g, TransplantMode::Full).unwrap();
        assert!(plan.layer_matches.iter().all(|m| m.action == Action::Copy));
        let dst = apply_transplant(&plan, &src, 77).unwrap();
        let x = common::random_array3(&mut rng, (3, 20, 24), 1.0);
        let a = forward_chw(&g, &src, &x).unwrap();
        let b = forward_chw(&g, &dst, &x).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()), "{v}");
    }
}

#[test]
fn full_transplant_adapts_head_width() {
    for v in Variant::ALL {
        let src_g = tiny(v, 21);
        let dst_g = tiny(v, 4);
        let src = random_weights(&src_g, 4);
        let plan = plan_transplant(&src_g, &src, &dst_g, TransplantMode::Full).unwrap();
        let dst = apply_transplant(&plan, &src, 0).unwrap();
        for layer in dst_g.learnable_layers() {
            let p = dst.param(&layer.name).unwrap();
            match layer.kind {
                LayerKind::ScoreConv { .. } => {
                    assert_eq!(p.weight.shape()[0], 4, "{v} {}", layer.name);
                    assert!(p.weight.iter().all(|&w| w == 0.0));
                    assert!(p.bias.as_ref().unwrap().iter().all(|&b| b == 0.0));
                }
                LayerKind::TransposedConv { .. } => {
                    assert_eq!(&p.weight.shape()[..2], &[4, 4]);
                }
                _ => assert_eq!(p, src.param(&layer.name).unwrap()),
            }
        }
    }
}

#[test]
fn cross_backbone_is_rejected() {
    let src = tiny(Variant::FcnAlexNet, 4);
    let dst = tiny(Variant::Fcn8s, 4);
    assert!(plan_transplant(&src, &random_weights(&src, 0), &dst, TransplantMode::Partial).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn application_is_deterministic(src_seed in 0u64..1000, init_seed in any::<u64>(), full in any::<bool>()) {
        let src_g = tiny(Variant::Fcn16s, 21);
        let dst_g = tiny(Variant::Fcn8s, 4);
        let src = random_weights(&src_g, src_seed);
        let mode = if full { TransplantMode::Full } else { TransplantMode::Partial };
        let plan = plan_transplant(&src_g, &src, &dst_g, mode).unwrap();
        let a = apply_transplant(&plan, &src, init_seed).unwrap();
        let b = apply_transplant(&plan, &src, init_seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn every_learnable_layer_is_planned_once(src_idx in 0usize..3, dst_idx in 0usize..3, full in any::<bool>()) {
        let vgg = [Variant::Fcn32s, Variant::Fcn16s, Variant::Fcn8s];
        let src_g = tiny(vgg[src_idx], 21);
        let dst_g = tiny(vgg[dst_idx], 4);
        let mode = if full { TransplantMode::Full } else { TransplantMode::Partial };
        let plan = plan_transplant(&src_g, &random_weights(&src_g, 0), &dst_g, mode).unwrap();
        let planned: Vec<&str> = plan.layer_matches.iter().map(|m| m.target.as_str()).collect();
        let learnable: Vec<&str> = dst_g.learnable_layers().map(|l| l.name.as_str()).collect();
        prop_assert_eq!(planned, learnable);
        let r = plan.report();
        prop_assert_eq!(r.copied + r.reshape_copied + r.reinitialized, plan.layer_matches.len());
    }
}
