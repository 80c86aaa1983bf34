use std::collections::{BTreeMap, BTreeSet};

use msfnet::autograd::{grad_check_with, GradCheckOptions};
use msfnet::model::{BranchFusion, CbsOutputSize, KernelMode};
use msfnet::{build_model, BnMode, BoundaryMode, Error, Model, ModelConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

fn separable(cin: usize, cout: usize) -> usize {
    conv(cin, cin, 3, cin, false) + conv(cin, cout, 1, 1, false) + 2 * cout
}

/// Per-stage pooling count and the retained (stage, resolution) pairs.
fn retained_slots(cfg: &ModelConfig) -> Vec<(usize, usize, usize)> {
    let m = &cfg.encoder.stage_strides;
    let last = *m.last().unwrap();
    let floor = if cfg.sap.exclude_quarter_resolution { 8 } else { m[0] };
    let mut out = Vec::new();
    for (i, &mi) in m.iter().enumerate() {
        let j_max = cfg.sap.pool_count
            + if cfg.sap.to_end {
                (last / mi).ilog2() as usize
            } else {
                0
            };
        for j in 0..=j_max {
            if mi << j >= floor {
                out.push((i, j, mi << j));
            }
        }
    }
    out
}

/// Layer-by-layer parameter formula.
fn expected_params(cfg: &ModelConfig) -> (usize, usize) {
    let e = &cfg.encoder;
    let c = &e.stage_channels;
    let mut encoder = conv(e.input_channels, c[0], 7, 1, false) + 2 * c[0];
    let mut cin = c[0];
    for (i, &co) in c.iter().enumerate() {
        let stride = if i == 0 {
            1
        } else {
            e.stage_strides[i] / e.stage_strides[i - 1]
        };
        for b in 0..e.blocks_per_stage[i] {
            let input = if b == 0 { cin } else { co };
            encoder += conv(input, co, 3, 1, false) + 2 * co + conv(co, co, 3, 1, false) + 2 * co;
            if b == 0 && (stride != 1 || input != co) {
                encoder += conv(input, co, 1, 1, false) + 2 * co;
            }
        }
        cin = co;
    }
    let slots = retained_slots(cfg);
    let mut total = encoder;
    if cfg.sap.kernel_mode == KernelMode::DilatedConv3x3 {
        total += slots.iter().filter(|s| s.1 > 0).map(|s| 9 * c[s.0]).sum::<usize>();
    }
    let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
    for &(i, _, r) in &slots {
        *groups.entry(r).or_default() += c[i];
    }
    let fw = cfg.fusion_width;
    total += groups.values().map(|&cin| separable(cin, fw)).sum::<usize>();
    let deepest = *groups.keys().last().unwrap();
    let floor = *groups.keys().next().unwrap();
    let ladder = (deepest / floor).ilog2() as usize;
    total += cfg.branch_count * ladder * separable(2 * fw, fw);
    if cfg.branch_fusion == BranchFusion::Concat {
        total += separable(cfg.branch_count * fw, fw);
    }
    total += conv(fw, cfg.num_classes, 1, 1, true);
    total += match cfg.boundary_mode {
        Some(BoundaryMode::ClassBoundary) => conv(fw, cfg.num_classes + 1, 1, 1, true),
        Some(BoundaryMode::ZeroOneBoundary) => conv(fw, 2, 1, 1, true),
        None => 0,
    };
    (total, encoder)
}

fn tiny_at(pool_count: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.sap.pool_count = pool_count;
    cfg
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn default_model_parameter_count() {
    let cfg = ModelConfig::default();
    let model = build_model::<f32>(&cfg, 0).unwrap();
    let (total, encoder) = expected_params(&cfg);
    assert_eq!(model.count_params(), total);
    assert_eq!(model.count_encoder_params(), encoder);
    assert!(total > 11_000_000, "{total}");
}

#[test]
fn tiny_model_parameter_count() {
    let cfg = ModelConfig::tiny();
    let model = build_model::<f32>(&cfg, 0).unwrap();
    assert_eq!(model.count_params(), expected_params(&cfg).0);
    assert!(model.count_params() < 200_000, "{}", model.count_params());
}

#[test]
fn parameter_count_formula_across_variants() {
    for kernel_mode in [KernelMode::KernelEqualsStride, KernelMode::DilatedConv3x3] {
        for (branches, fusion) in [
            (1, BranchFusion::None),
            (1, BranchFusion::Concat),
            (2, BranchFusion::None),
        ] {
            for boundary in [None, Some(BoundaryMode::ZeroOneBoundary)] {
                let mut cfg = ModelConfig::micro();
                cfg.sap.kernel_mode = kernel_mode;
                cfg.sap.to_end = branches == 2;
                cfg.sap.exclude_quarter_resolution = boundary.is_some();
                cfg.branch_count = branches;
                cfg.branch_fusion = fusion;
                cfg.boundary_mode = boundary;
                let model = build_model::<f32>(&cfg, 1).unwrap();
                assert_eq!(model.count_params(), expected_params(&cfg).0, "{cfg:?}");
            }
        }
    }
}

#[test]
fn parameter_count_monotone_and_encoder_independent_of_classes() {
    let base = ModelConfig::tiny();
    let wide = ModelConfig {
        fusion_width: 2 * base.fusion_width,
        ..base.clone()
    };
    let many = ModelConfig {
        num_classes: 19,
        ..base.clone()
    };
    let count = |c: &ModelConfig| build_model::<f32>(c, 0).unwrap();
    assert!(count(&wide).count_params() > count(&base).count_params());
    assert_eq!(count(&many).count_encoder_params(), count(&base).count_encoder_params());
}

#[test]
fn same_seed_is_bitwise_identical() {
    let a = build_model::<f32>(&ModelConfig::tiny(), 5).unwrap();
    let b = build_model::<f32>(&ModelConfig::tiny(), 5).unwrap();
    let c = build_model::<f32>(&ModelConfig::tiny(), 6).unwrap();
    let bits = |m: &Model<f32>| -> Vec<u32> {
        m.params()
            .iter()
            .flat_map(|p| p.value().data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::tiny();
    cfg.fusion_width = 0;
    assert!(build_model::<f32>(&cfg, 0).is_err());
    let mut cfg = ModelConfig::tiny();
    cfg.encoder.stage_strides = vec![4, 8, 8, 32];
    assert!(build_model::<f32>(&cfg, 0).is_err());
    let mut cfg = ModelConfig::tiny();
    cfg.branch_count = 3;
    assert!(build_model::<f32>(&cfg, 0).is_err());
}

#[test]
fn encoder_stage_shapes_at_default_strides() {
    let model = build_model::<f32>(&tiny_at(3), 0).unwrap();
    let mut tape = Tape::inference();
    let mut bound = model.bind(&mut tape, BnMode::Eval);
    let x = bound.tape().leaf(random_input(&[1, 3, 256, 256], 1));
    let stages = bound.encoder_forward(x).unwrap();
    drop(bound);
    let shapes: Vec<_> = stages.iter().map(|v| tape.shape(*v).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![1, 8, 64, 64],
            vec![1, 16, 32, 32],
            vec![1, 32, 16, 16],
            vec![1, 64, 8, 8]
        ]
    );
}

#[test]
fn indivisible_input_names_required_multiple() {
    let model = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
    let err = model.predict(&Tensor::zeros(&[1, 3, 250, 250])).unwrap_err();
    assert!(matches!(err, Error::Divisibility { multiple: 1024, .. }));
    assert!(err.to_string().contains("1024"), "{err}");
}

#[test]
fn zero_final_gammas_give_finite_outputs() {
    let mut model = build_model::<f32>(&tiny_at(3), 0).unwrap();
    let names: Vec<usize> = (0..model.params().len())
        .filter(|&i| model.params()[i].name.ends_with("conv2.bn.gamma"))
        .collect();
    assert!(!names.is_empty());
    for i in names {
        model.param_mut(i).data_mut().fill(0.0);
    }
    let pred = model.predict(&Tensor::full(&[1, 3, 256, 256], 0.5)).unwrap();
    assert!(pred.seg_logits.is_finite());
}

/// Feeds synthetic stage outputs straight into SAP.
fn sap_shapes(cfg: &ModelConfig, h: usize, fill: f32) -> Vec<(usize, usize, Vec<usize>, Vec<f32>)> {
    let model = build_model::<f32>(cfg, 0).unwrap();
    let mut tape = Tape::inference();
    let mut bound = model.bind(&mut tape, BnMode::Eval);
    let stages: Vec<_> = cfg
        .encoder
        .stage_channels
        .iter()
        .zip(&cfg.encoder.stage_strides)
        .map(|(&c, &m)| bound.tape().leaf(Tensor::full(&[1, c, h / m, h / m], fill)))
        .collect();
    let outs = bound.sap_expand(&stages).unwrap();
    for o in &outs {
        if o.slot.j == 0 {
            assert_eq!(o.value, stages[o.slot.stage]);
        }
    }
    drop(bound);
    outs.iter()
        .map(|o| {
            (
                o.slot.stage,
                o.slot.j,
                tape.shape(o.value).to_vec(),
                tape.value(o.value).data().to_vec(),
            )
        })
        .collect()
}

#[test]
fn sap_extent_follows_stride_law() {
    let cfg = ModelConfig::tiny();
    let mut cfg = cfg;
    cfg.sap.pool_count = 5;
    let outs = sap_shapes(&cfg, 1024, 1.0);
    let second_stage_first_pool = outs.iter().find(|o| o.0 == 1 && o.1 == 1).unwrap();
    assert_eq!(second_stage_first_pool.2, vec![1, 16, 64, 64]);
}

#[test]
fn average_pooling_preserves_constants() {
    for mode in [KernelMode::KernelTwoSPlusOne, KernelMode::KernelEqualsStride] {
        let mut cfg = tiny_at(3);
        cfg.sap.kernel_mode = mode;
        for (_, _, _, data) in sap_shapes(&cfg, 256, 0.75) {
            assert!(data.iter().all(|&v| (v - 0.75).abs() < 1e-6));
        }
    }
}

#[test]
fn fused_group_widths_follow_the_pyramid() {
    let model = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
    let shape_of = |name: &str| {
        let i = model.param_index(name).unwrap_or_else(|| panic!("{name}"));
        model.params()[i].value().shape().to_vec()
    };
    assert_eq!(shape_of("mfm.r16.dw.weight"), vec![448, 1, 3, 3]);
    assert_eq!(shape_of("mfm.r16.pw.weight"), vec![128, 448, 1, 1]);
    assert!(model.param_index("mfm.r4.dw.weight").is_none());
    assert_eq!(
        model.config().pyramid_resolutions(),
        vec![8, 16, 32, 64, 128, 256, 512, 1024]
    );
    let ladder = (0..7)
        .filter(|k| model.param_index(&format!("branch0.r{}.dw.weight", 8 << k)).is_some())
        .count();
    assert_eq!(ladder, 7);
}

#[test]
fn output_shapes_per_head_mode() {
    let x = random_input(&[1, 3, 256, 256], 2);
    let mut cfg = tiny_at(3);
    let pred = build_model::<f32>(&cfg, 0).unwrap().predict(&x).unwrap();
    assert_eq!(pred.seg_logits.shape(), &[1, 3, 256, 256]);
    assert_eq!(pred.boundary_logits.unwrap().shape(), &[1, 4, 32, 32]);

    cfg.boundary_mode = Some(BoundaryMode::ZeroOneBoundary);
    cfg.cbs_output_size = CbsOutputSize::FullScale;
    let pred = build_model::<f32>(&cfg, 0).unwrap().predict(&x).unwrap();
    assert_eq!(pred.boundary_logits.unwrap().shape(), &[1, 2, 256, 256]);

    cfg.boundary_mode = None;
    let pred = build_model::<f32>(&cfg, 0).unwrap().predict(&x).unwrap();
    assert!(pred.boundary_logits.is_none());
}

#[test]
fn single_branch_feeds_both_heads() {
    let mut cfg = ModelConfig::micro();
    cfg.branch_count = 1;
    cfg.branch_fusion = BranchFusion::None;
    let model = build_model::<f32>(&cfg, 0).unwrap();
    let mut tape = Tape::inference();
    let mut bound = model.bind(&mut tape, BnMode::Eval);
    let x = bound.tape().leaf(random_input(&[1, 3, 64, 64], 3));
    let stages = bound.encoder_forward(x).unwrap();
    let sap = bound.sap_expand(&stages).unwrap();
    let pyramid = bound.mfm_fuse(&sap).unwrap();
    let dec = bound.decoder_forward(&pyramid).unwrap();
    assert_eq!(dec.boundary_features, Some(dec.seg_features));
    assert_eq!(dec.branches.len(), 1);
}

fn decode(model: &Model<f32>, x: &Tensor<f32>) -> (Vec<Tensor<f32>>, Tensor<f32>) {
    let mut tape = Tape::inference();
    let mut bound = model.bind(&mut tape, BnMode::Eval);
    let xv = bound.tape().leaf(x.clone());
    let stages = bound.encoder_forward(xv).unwrap();
    let sap = bound.sap_expand(&stages).unwrap();
    let pyramid = bound.mfm_fuse(&sap).unwrap();
    let dec = bound.decoder_forward(&pyramid).unwrap();
    drop(bound);
    (
        dec.branches.iter().map(|v| tape.value(*v).clone()).collect(),
        tape.value(dec.seg_features).clone(),
    )
}

fn perturb_prefix(model: &mut Model<f32>, prefix: &str, f: impl Fn(f32) -> f32) -> usize {
    let targets: Vec<usize> = (0..model.params().len())
        .filter(|&i| model.params()[i].name.starts_with(prefix))
        .collect();
    for &i in &targets {
        model.param_mut(i).data_mut().iter_mut().for_each(|v| *v = f(*v));
    }
    targets.len()
}

#[test]
fn branches_are_independent() {
    let x = random_input(&[1, 3, 64, 64], 4);
    let mut model = build_model::<f32>(&ModelConfig::micro(), 0).unwrap();
    let (before, _) = decode(&model, &x);
    assert!(perturb_prefix(&mut model, "branch1.", |v| v * 1.5 + 0.1) > 0);
    let (after, _) = decode(&model, &x);
    assert_eq!(before[0], after[0]);
    assert!(before[1].max_abs_diff(&after[1]) > 0.0);
}

#[test]
fn zeroed_second_branch_reduces_concat_to_first_branch_mixing() {
    let x = random_input(&[1, 3, 64, 64], 5);
    let mut with_concat = build_model::<f32>(&ModelConfig::micro(), 9).unwrap();
    let plain = build_model::<f32>(
        &ModelConfig {
            branch_fusion: BranchFusion::None,
            ..ModelConfig::micro()
        },
        9,
    )
    .unwrap();
    perturb_prefix(&mut with_concat, "branch1.", |_| 0.0);
    let (branches, seg) = decode(&with_concat, &x);
    let (plain_branches, plain_seg) = decode(&plain, &x);
    assert_eq!(plain_seg, plain_branches[0]);
    assert_eq!(branches[0], plain_seg);
    assert!(branches[1].data().iter().all(|&v| v == 0.0));

    // The merge restricted to the first branch's input channels.
    let fw = with_concat.config().fusion_width;
    let get = |name: &str| {
        with_concat.params()[with_concat.param_index(name).unwrap()]
            .value()
            .clone()
    };
    let dw = get("merge.dw.weight");
    let pw = get("merge.pw.weight");
    let dw_a = Tensor::new(&[fw, 1, 3, 3], dw.data()[..fw * 9].to_vec()).unwrap();
    let pw_a = Tensor::from_fn(&[fw, fw, 1, 1], |i| pw.data()[(i / fw) * 2 * fw + i % fw]);
    let site = with_concat.bn_sites().iter().find(|s| s.name == "merge.bn").unwrap();
    let mut tape = Tape::<f32>::inference();
    let a = tape.leaf(plain_seg.clone());
    let dwv = tape.leaf(dw_a);
    let pwv = tape.leaf(pw_a);
    let gamma = tape.leaf(with_concat.params()[site.gamma_index()].value().clone());
    let beta = tape.leaf(with_concat.params()[site.beta_index()].value().clone());
    let y = tape.depthwise_separable_conv(a, dwv, pwv, None, 3, 1, 1).unwrap();
    let y = tape
        .batch_norm_eval(y, gamma, beta, &site.state, msfnet::autograd::BN_EPS)
        .unwrap();
    let y = tape.relu(y).unwrap();
    assert!(tape.value(y).max_abs_diff(&seg) < 1e-5);
}

#[test]
fn eval_forward_is_bitwise_reproducible() {
    let model = build_model::<f32>(&ModelConfig::micro(), 3).unwrap();
    let x = random_input(&[2, 3, 64, 64], 6);
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a.seg_logits, b.seg_logits);
    assert_eq!(a.boundary_logits, b.boundary_logits);
}

#[test]
fn folding_matches_unfolded_forward() {
    let mut model = build_model::<f32>(&ModelConfig::micro(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for site in model.bn_sites_mut() {
        for v in site.state.running_mean.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in site.state.running_var.iter_mut() {
            *v = rng.gen_range(0.5..2.0);
        }
    }
    let sites = model.bn_sites().len();
    let mut folded = model.clone();
    assert_eq!(folded.fold_batch_norms().unwrap(), sites);
    assert!(folded.is_folded());
    assert!(folded.count_params() < model.count_params());
    for seed in 0..10 {
        let x = random_input(&[1, 3, 64, 64], 100 + seed);
        let a = model.predict(&x).unwrap();
        let b = folded.predict(&x).unwrap();
        assert!(a.seg_logits.max_abs_diff(&b.seg_logits) < 1e-4);
    }
}

#[test]
fn full_model_gradient_check() {
    let cfg = ModelConfig::gradient_micro();
    let model = build_model::<f64>(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let image = Tensor::<f64>::randn(&[2, cfg.encoder.input_channels, 16, 16], 1.0, &mut rng);
    let seg_targets: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.gen_range(0..3)).collect();
    let boundary_targets: Vec<u8> = (0..2 * 2 * 2).map(|_| rng.gen_range(0..4)).collect();
    let mut inputs = vec![image];
    inputs.extend(model.params().iter().map(|p| p.value().clone()));
    let report = grad_check_with(
        |tape, vars| {
            let mut bound = model.bind_with(tape, BnMode::Train, vars[1..].to_vec())?;
            let out = bound.forward(vars[0])?;
            drop(bound);
            let (seg, _) = tape.softmax_cross_entropy(out.seg_logits, &seg_targets, 255)?;
            let (b, _) = tape.softmax_cross_entropy(out.boundary_logits.unwrap(), &boundary_targets, 255)?;
            tape.add(seg, b)
        },
        &inputs,
        GradCheckOptions {
            tolerance: 1e-3,
            max_per_input: Some(8),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 300);
}

fn config_strategy() -> impl Strategy<Value = (ModelConfig, usize, usize)> {
    (
        prop::sample::select(vec![vec![4usize, 8, 16, 32], vec![2, 4, 8, 16], vec![1, 2, 4, 8]]),
        prop::collection::vec(1usize..5, 4),
        0usize..3,
        any::<bool>(),
        prop::sample::select(vec![
            KernelMode::KernelTwoSPlusOne,
            KernelMode::KernelEqualsStride,
            KernelMode::DilatedConv3x3,
        ]),
        any::<bool>(),
        (1usize..3, any::<bool>(), 1usize..5),
        (1usize..3, 1usize..3),
    )
        .prop_map(
            |(strides, channels, j, to_end, kernel_mode, exclude, (branches, concat, fw), (a, b))| {
                let mut cfg = ModelConfig::tiny();
                cfg.encoder.stage_strides = strides;
                cfg.encoder.stage_channels = channels;
                cfg.encoder.blocks_per_stage = vec![1; 4];
                cfg.sap.pool_count = j;
                cfg.sap.to_end = to_end;
                cfg.sap.kernel_mode = kernel_mode;
                cfg.sap.exclude_quarter_resolution = exclude;
                cfg.branch_count = branches;
                cfg.branch_fusion = if concat {
                    BranchFusion::Concat
                } else {
                    BranchFusion::None
                };
                cfg.fusion_width = fw;
                let m = cfg.required_multiple();
                (cfg, m * a, m * b)
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_intermediate_matches_the_stride_law((cfg, h, w) in config_strategy()) {
        let model = build_model::<f32>(&cfg, 0).unwrap();
        let mut tape = Tape::inference();
        let mut bound = model.bind(&mut tape, BnMode::Eval);
        let x = bound.tape().leaf(random_input(&[1, cfg.encoder.input_channels, h, w], 0));
        let stages = bound.encoder_forward(x).unwrap();
        let sap = bound.sap_expand(&stages).unwrap();
        let pyramid = bound.mfm_fuse(&sap).unwrap();
        let dec = bound.decoder_forward(&pyramid).unwrap();
        let out = bound.heads(&dec, h, w).unwrap();
        drop(bound);
        let c = &cfg.encoder.stage_channels;
        for (i, v) in stages.iter().enumerate() {
            let m = cfg.encoder.stage_strides[i];
            prop_assert_eq!(tape.shape(*v), &[1, c[i], h / m, w / m][..]);
        }
        let expected: BTreeSet<(usize, usize, usize)> = retained_slots(&cfg).into_iter().collect();
        let got: BTreeSet<(usize, usize, usize)> =
            sap.iter().map(|o| (o.slot.stage, o.slot.j, o.slot.resolution)).collect();
        prop_assert_eq!(&got, &expected);
        for o in &sap {
            let r = o.slot.resolution;
            prop_assert_eq!(tape.shape(o.value), &[1, c[o.slot.stage], h / r, w / r][..]);
        }
        let levels: BTreeSet<usize> = expected.iter().map(|s| s.2).collect();
        prop_assert_eq!(pyramid.levels.keys().copied().collect::<BTreeSet<_>>(), levels.clone());
        for (&r, v) in &pyramid.levels {
            prop_assert_eq!(tape.shape(*v), &[1, cfg.fusion_width, h / r, w / r][..]);
        }
        let os = *levels.iter().next().unwrap();
        for v in &dec.branches {
            prop_assert_eq!(tape.shape(*v), &[1, cfg.fusion_width, h / os, w / os][..]);
        }
        prop_assert_eq!(tape.shape(out.seg_logits), &[1, cfg.num_classes, h, w][..]);
        prop_assert_eq!(tape.shape(out.boundary_logits.unwrap()), &[1, cfg.num_classes + 1, h / os, w / os][..]);
    }
}
