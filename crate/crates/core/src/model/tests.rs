use super::*;
use crate::genotype::{BlockSpec, CellGenotype, CellType};
use crate::nn::ALL_OPERATIONS;

use OperationId::*;

fn geno(normal: &[(usize, OperationId)], reduction: &[(usize, OperationId)]) -> Genotype {
    let mk = |ct, specs: &[(usize, OperationId)]| {
        CellGenotype::new(
            ct,
            specs
                .iter()
                .map(|&(input_index, op)| BlockSpec { input_index, op })
                .collect(),
        )
    };
    Genotype::new(mk(CellType::Normal, normal), mk(CellType::Reduction, reduction)).unwrap()
}

fn batch32(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = DetRng::new(seed, 9);
    Tensor::new(
        vec![n, 3, 32, 32],
        (0..n * 3 * 32 * 32)
            .map(|_| rng.normal(0.0, 1.0) as f32)
            .collect(),
    )
    .unwrap()
}

#[test]
fn supernet_registry_enumeration() {
    let cfg = ModelConfig::desk(3, 1, 8, 10);
    let mut rng = DetRng::new(1, 0);
    let net: Model<f32> = Model::supernet(cfg.clone(), &mut rng).unwrap();

    // parameterized op groups per (layer, block): sep3, sep5, conv1 in
    // normal layers; those plus identity (factorized reduction) in the two
    // reduction layers
    let mut groups = std::collections::BTreeSet::new();
    for (_, slot) in net.registry.iter() {
        if let Some(rest) = slot.name.strip_prefix("layer") {
            let parts: Vec<&str> = rest.split('/').collect();
            if parts.len() >= 3 && parts[1].starts_with("block") {
                groups.insert((parts[0].to_string(), parts[1].to_string(), parts[2].to_string()));
            }
        }
    }
    let n = cfg.cells_per_stage;
    let expected = 3 * n * cfg.blocks * 3 + 2 * cfg.blocks * 4;
    assert_eq!(groups.len(), expected);

    // every group maps to at least one parameter and no key collides
    assert!(net.registry.len() > 0);
}

#[test]
fn same_seed_builds_identical_weights() {
    let cfg = ModelConfig::desk(2, 1, 8, 4);
    let a: Model<f64> = Model::supernet(cfg.clone(), &mut DetRng::new(7, 0)).unwrap();
    let b: Model<f64> = Model::supernet(cfg, &mut DetRng::new(7, 0)).unwrap();
    assert_eq!(a.registry.len(), b.registry.len());
    for ((_, sa), (_, sb)) in a.registry.iter().zip(b.registry.iter()) {
        assert_eq!(sa.name, sb.name);
        assert_eq!(sa.value, sb.value, "{}", sa.name);
    }
    assert_eq!(a.describe(), b.describe());
}

#[test]
fn logits_shape_matches_head_contract() {
    for (b, n, f, classes) in [(1, 1, 8, 2), (3, 1, 8, 10), (2, 2, 12, 5)] {
        let cfg = ModelConfig::desk(b, n, f, classes);
        let mut rng = DetRng::new(3, 0);
        let mut net: Model<f32> = Model::supernet(cfg, &mut rng).unwrap();
        let g = Genotype::random(&mut rng, b);
        let mut tape = Tape::inference();
        let x = batch32(2, 5);
        let logits = net.forward_genotype(&mut tape, &g, &x, false, None).unwrap();
        assert_eq!(logits.shape(), &[2, classes]);
        assert!(logits.all_finite());
    }
}

#[test]
fn all_identity_chain_equals_embedded_single_identity() {
    // [(0,ID),(1,ID),(2,ID)] is embed([(0,ID)], 3) and has loose end {3}:
    // the cell acts as the identity on its half, so both genotypes run the
    // same function over shared weights.
    let cfg = ModelConfig::desk(3, 1, 8, 10);
    let mut rng = DetRng::new(11, 0);
    let mut net: Model<f32> = Model::supernet(cfg, &mut rng).unwrap();
    let reduction = [(0, Sep3), (0, MaxPool3), (1, Conv1)];
    let chain = geno(&[(0, Identity), (1, Identity), (2, Identity)], &reduction);
    let single = Genotype::new(
        CellGenotype::new(
            CellType::Normal,
            vec![BlockSpec {
                input_index: 0,
                op: Identity,
            }],
        ),
        CellGenotype::new(
            CellType::Reduction,
            reduction
                .iter()
                .map(|&(input_index, op)| BlockSpec { input_index, op })
                .collect(),
        ),
    )
    .unwrap();
    // single has mismatched cell sizes (1 vs 3) so build it via embed of the
    // normal cell only
    assert_eq!(single.normal.embed(3).unwrap(), chain.normal);

    let x = batch32(2, 21);
    let mut t1 = Tape::inference();
    let a = net.forward_genotype(&mut t1, &chain, &x, false, None).unwrap();
    let mut t2 = Tape::inference();
    // embed the whole genotype: reduction cell already has 3 blocks
    let b = net.forward_genotype(&mut t2, &single.embed(3).unwrap(), &x, false, None).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
}

#[test]
fn embed_equivalence_on_shared_weights() {
    let cfg = ModelConfig::desk(5, 1, 8, 10);
    let mut rng = DetRng::new(13, 0);
    let mut net: Model<f32> = Model::supernet(cfg, &mut rng).unwrap();
    let x = batch32(2, 31);
    for seed in 0..5 {
        let mut grng = DetRng::new(100 + seed, 0);
        let g = Genotype::random(&mut grng, 3);
        let e = g.embed(5).unwrap();
        let mut t1 = Tape::inference();
        let small = net.forward_genotype(&mut t1, &g, &x, false, None).unwrap();
        let mut t2 = Tape::inference();
        let padded = net.forward_genotype(&mut t2, &e, &x, false, None).unwrap();
        let diff = small.max_abs_diff(&padded).unwrap();
        assert!(diff <= 1e-6, "seed {seed}: diff {diff}");
    }
}

#[test]
fn fixed_model_allocates_subset_and_same_shapes() {
    let cfg = ModelConfig::desk(3, 1, 8, 10);
    let mut rng = DetRng::new(17, 0);
    let supernet: Model<f32> = Model::supernet(cfg.clone(), &mut rng).unwrap();
    let g = geno(
        &[(0, Sep3), (1, Identity), (1, Conv1)],
        &[(0, MaxPool3), (0, Identity), (2, Sep5)],
    );
    let mut rng2 = DetRng::new(18, 0);
    let mut fixed: Model<f32> = Model::fixed(cfg, g, &mut rng2).unwrap();
    assert!(fixed.param_count() < supernet.param_count());

    let x = batch32(2, 41);
    let mut tape = Tape::inference();
    let logits = fixed.forward(&mut tape, &x, false, None).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
}

#[test]
fn fixed_model_keys_are_a_subset_of_supernet_keys() {
    let cfg = ModelConfig::desk(3, 1, 8, 10);
    let g = geno(
        &[(0, Sep5), (0, Conv1), (2, Sep3)],
        &[(0, Identity), (1, Sep3), (1, MinPool3)],
    );
    let supernet: Model<f32> = Model::supernet(cfg.clone(), &mut DetRng::new(1, 0)).unwrap();
    let fixed: Model<f32> = Model::fixed(cfg, g, &mut DetRng::new(2, 0)).unwrap();
    let names: std::collections::BTreeSet<String> =
        supernet.registry.iter().map(|(_, s)| s.name.clone()).collect();
    for (_, slot) in fixed.registry.iter() {
        assert!(names.contains(&slot.name), "missing {}", slot.name);
        let sid = supernet.registry.lookup(&slot.name).unwrap();
        assert_eq!(supernet.registry.slot(sid).shape, slot.shape, "{}", slot.name);
    }
}

#[test]
fn weight_sharing_is_visible_across_genotypes() {
    // one manual gradient step through g1's sub-graph changes exactly the
    // parameter groups g1 touches; an overlapping selection of g2 sees the
    // update, non-overlapping op groups stay bit-identical
    let cfg = ModelConfig::desk(2, 1, 8, 10);
    let mut rng = DetRng::new(23, 0);
    let mut net: Model<f64> = Model::supernet(cfg, &mut rng).unwrap();
    // g1 and g2 share (layer *, block 1, SEP3) through different inputs is
    // not possible at block 1; share block-2 op with different input index
    let g1 = geno(&[(0, Sep3), (0, Sep5)], &[(0, Sep3), (1, Sep5)]);
    let g2 = geno(&[(0, Sep3), (1, Sep5)], &[(0, Sep3), (0, Sep5)]);
    let g_other = geno(&[(0, Conv1), (1, Conv1)], &[(0, Conv1), (1, Conv1)]);

    let before: Vec<(String, Vec<f64>)> = net
        .registry
        .iter()
        .map(|(_, s)| (s.name.clone(), s.value.clone()))
        .collect();

    let x = {
        let mut r = DetRng::new(5, 0);
        Tensor::new(
            vec![2, 3, 32, 32],
            (0..2 * 3 * 1024).map(|_| r.normal(0.0, 1.0)).collect(),
        )
        .unwrap()
    };
    let mut tape = Tape::new();
    let logits = net.forward_genotype(&mut tape, &g1, &x, true, Some(&mut DetRng::new(6, 0))).unwrap();
    let loss = tape.softmax_cross_entropy(&logits, &[1, 7]).unwrap();
    let grads = tape.backward(&loss).unwrap();
    net.registry.zero_grads();
    let touched = tape.accumulate_leases(&grads, &mut net.registry);
    for id in &touched {
        let slot = net.registry.slot_mut(*id);
        let grad = slot.grad.clone();
        for (v, g) in slot.value.iter_mut().zip(&grad) {
            *v -= 0.05 * g;
        }
    }

    let after: std::collections::HashMap<String, Vec<f64>> = net
        .registry
        .iter()
        .map(|(_, s)| (s.name.clone(), s.value.clone()))
        .collect();

    let changed = |prefix: &str| -> bool {
        before
            .iter()
            .filter(|(n, _)| n.starts_with(prefix) && !n.contains("/bn/mean") && !n.contains("/bn/var"))
            .any(|(n, v)| after[n] != *v)
    };

    // overlap: g2 selects sep3 at block 1 and sep5 at block 2 of normal
    // cells, both trained by g1 (input indices differ, weights shared)
    assert!(changed("layer00/block1/sep3/"));
    assert!(changed("layer00/block2/sep5/"));
    // g_other's conv1 groups were never touched
    assert!(!changed("layer00/block1/conv1/"));
    assert!(!changed("layer02/block2/conv1/"));

    // the shared update is visible through g2's forward: run g2 before and
    // after on a fresh equal-weight copy
    let mut fresh: Model<f64> = Model::supernet(
        ModelConfig::desk(2, 1, 8, 10),
        &mut DetRng::new(23, 0),
    )
    .unwrap();
    let mut t_old = Tape::inference();
    let old_logits = fresh.forward_genotype(&mut t_old, &g2, &x, false, None).unwrap();
    let mut t_new = Tape::inference();
    let new_logits = net.forward_genotype(&mut t_new, &g2, &x, false, None).unwrap();
    assert!(old_logits.max_abs_diff(&new_logits).unwrap() > 0.0);

    // and invisible through a disjoint genotype (op weights identical,
    // though stem/head/bn buffers did move)
    let g_other_keys = |m: &Model<f64>| -> Vec<Vec<f64>> {
        m.registry
            .iter()
            .filter(|(_, s)| s.name.contains("/conv1/") && s.trainable)
            .map(|(_, s)| s.value.clone())
            .collect()
    };
    assert_eq!(g_other_keys(&fresh), g_other_keys(&net));
    let _ = g_other;
}

#[test]
fn merge_and_bypass_variants_run() {
    let base = ModelConfig::desk(3, 1, 8, 10);
    let mut variants = Vec::new();
    for merge in [MergeMode::Sum, MergeMode::Concat1x1] {
        for bypass in [BypassMode::Factorized, BypassMode::Sep3x3, BypassMode::ReductionCell] {
            for cell_bn in [false, true] {
                let mut cfg = base.clone();
                cfg.merge_mode = merge;
                cfg.bypass_mode = bypass;
                cfg.cell_bn = cell_bn;
                variants.push(cfg);
            }
        }
    }
    let x = batch32(2, 3);
    for cfg in variants {
        let mut rng = DetRng::new(29, 0);
        let mut net: Model<f32> = Model::supernet(cfg.clone(), &mut rng).unwrap();
        let g = Genotype::random(&mut rng, 3);
        let mut tape = Tape::inference();
        let logits = net.forward_genotype(&mut tape, &g, &x, false, None).unwrap();
        assert_eq!(logits.shape(), &[2, 10], "{cfg:?}");
        assert!(logits.all_finite(), "{cfg:?}");
    }
}

#[test]
fn training_forward_with_drop_path_runs_all_ops() {
    let mut cfg = ModelConfig::desk(3, 1, 8, 10);
    cfg.drop_path_keep = 0.7;
    let mut rng = DetRng::new(31, 0);
    let mut net: Model<f32> = Model::supernet(cfg, &mut rng).unwrap();
    let x = batch32(4, 77);
    for seed in 0..3 {
        let mut grng = DetRng::new(seed, 0);
        let g = Genotype::random(&mut grng, 3);
        // make sure every op appears somewhere across seeds
        let mut tape = Tape::new();
        let mut dp = DetRng::new(seed, 1);
        let logits = net.forward_genotype(&mut tape, &g, &x, true, Some(&mut dp)).unwrap();
        let loss = tape.softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!(loss.item().is_finite());
        let grads = tape.backward(&loss).unwrap();
        net.registry.zero_grads();
        let touched = tape.accumulate_leases(&grads, &mut net.registry);
        assert!(!touched.is_empty());
    }
    let _ = ALL_OPERATIONS;
}

#[test]
fn bad_inputs_rejected() {
    let cfg = ModelConfig::desk(3, 1, 8, 10);
    let mut rng = DetRng::new(37, 0);
    let mut net: Model<f32> = Model::supernet(cfg, &mut rng).unwrap();
    let g4 = Genotype::random(&mut rng, 4);
    let x = batch32(1, 1);
    let mut tape = Tape::inference();
    // genotype larger than the supernet
    assert!(net.forward_genotype(&mut tape, &g4, &x, false, None).is_err());
    // wrong input shape
    let bad = Tensor::<f32>::zeros(vec![1, 3, 16, 16]);
    let g = Genotype::random(&mut rng, 3);
    assert!(net.forward_genotype(&mut tape, &g, &bad, false, None).is_err());
}
