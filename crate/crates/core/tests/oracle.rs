mod common;

use std::collections::BTreeSet;
use std::rc::Rc;

use common::*;
use sbp_core::autograd::Tape;
use sbp_core::models::{
    frame_dropout_step, stt_forward, stt_sbp_step, train_step, transformer_block_forward,
    transformer_block_grads, GradMode, StepOptions, SttModel, TransformerBlock, VideoModel,
    LN_EPS,
};
use sbp_core::sbp::{
    apply_sbp_to_model, sample_uniform, ExecPlan, LayerExec, LayeredModel, SamplerKind, SbpConfig,
    StepSampler,
};
use sbp_core::{Rng, SampleMask};

fn logits_under<M: VideoModel<f64>>(model: &M, video: &T64, plan: &ExecPlan) -> T64 {
    let mut tape = Tape::new();
    let params: Vec<_> = model.params().shared().into_iter().map(|p| tape.param_rc(p)).collect();
    let nodes = tape.input(model.nodes(video).unwrap(), false);
    let rec = model.record(&mut tape, &params, nodes, plan, None).unwrap();
    tape.value(rec.logits).clone()
}

#[test]
fn transformer_sbp_gradients_equal_masked_oracle() {
    let mut rng = Rng::new(2024);
    for case in 0..20 {
        let layers = 1 + rng.below(6);
        let heads = 1 + rng.below(4);
        let head_dim = 1 + rng.below(8);
        let frames = 2 + rng.below(7);
        let grid = (1 + rng.below(2), 1 + rng.below(2));
        assert!(frames * grid.0 * grid.1 <= 32);
        let model = transformer(frames, grid, heads, head_dim, layers, case);
        let boundary = 1 + rng.below(layers);
        let r = [0.125, 0.25, 0.5, 0.75][rng.below(4)];
        let retain = rng.below(2) == 0;
        let data = clips(&model.config.video, 2, 100 + case);
        let batch = as_batch(&data);
        let cfg = SbpConfig::new(r, SamplerKind::UniformRandom, boundary, case).unwrap();
        let mut sampler = StepSampler::new(cfg).unwrap();
        let plan = apply_sbp_to_model::<_, f64>(&model, &mut sampler, None, !retain).unwrap();
        let sbp = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&plan))).unwrap();
        let mask = plan.shared_mask().unwrap().clone();
        let layers_set: BTreeSet<usize> = plan.wrapped().into_iter().collect();
        let oracle = train_step(
            &model,
            &batch,
            StepOptions::new(GradMode::Oracle {
                mask: &mask,
                layers: &layers_set,
            }),
        )
        .unwrap();
        let e = max_rel(&sbp.grads, &oracle.grads);
        assert!(e < 1e-9, "case {case}: relative error {e}");
        assert!((sbp.loss - oracle.loss).abs() < 1e-12);
    }
}

#[test]
fn all_blocks_share_one_mask_object() {
    let model = transformer(8, (1, 1), 2, 4, 5, 1);
    let cfg = SbpConfig::new(0.25, SamplerKind::UniformRandom, 4, 9).unwrap();
    let mut sampler = StepSampler::new(cfg).unwrap();
    let plan = apply_sbp_to_model::<_, f64>(&model, &mut sampler, None, false).unwrap();
    let masks: Vec<&Rc<SampleMask>> = plan
        .layers
        .iter()
        .filter_map(|e| match e {
            LayerExec::Sbp { mask, .. } => Some(mask),
            _ => None,
        })
        .collect();
    assert_eq!(masks.len(), 5);
    assert!(masks.iter().all(|m| Rc::ptr_eq(m, masks[0])));
    assert_eq!(plan.layers[5], LayerExec::Dense);
    let next = apply_sbp_to_model::<_, f64>(&model, &mut sampler, None, false).unwrap();
    assert!(!Rc::ptr_eq(next.shared_mask().unwrap(), masks[0]));
}

#[test]
fn top_blocks_exact_with_default_boundary() {
    let model = transformer(8, (1, 1), 2, 4, 5, 3);
    let boundary = model.config.default_boundary();
    assert_eq!(model.wrapped_slots(boundary).unwrap(), vec![0, 1, 2]);
    let data = clips(&model.config.video, 2, 5);
    let batch = as_batch(&data);
    let cfg = SbpConfig::new(0.25, SamplerKind::UniformRandom, boundary, 4).unwrap();
    let plan = apply_sbp_to_model::<_, f64>(&model, &mut StepSampler::new(cfg).unwrap(), None, false).unwrap();
    let sbp = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&plan))).unwrap();
    let mask = plan.shared_mask().unwrap().clone();
    let below: BTreeSet<usize> = (0..=boundary).collect();
    let oracle = train_step(&model, &batch, StepOptions::new(GradMode::Oracle { mask: &mask, layers: &below })).unwrap();
    let dense = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&ExecPlan::dense(6)))).unwrap();
    for (i, p) in model.params().iter().enumerate() {
        if p.slot > boundary {
            assert!(common::rel_err(&sbp.grads[i], &oracle.grads[i]) < 1e-9, "{}", p.name);
        }
        if p.slot > boundary + 3 {
            // the head sees the exact forward, so its gradient is dense
            assert!(common::rel_err(&sbp.grads[i], &dense.grads[i]) < 1e-12, "{}", p.name);
        }
    }
}

#[test]
fn full_mask_equals_end_to_end() {
    let model = transformer(4, (2, 1), 2, 3, 3, 8);
    let data = clips(&model.config.video, 3, 1);
    let batch = as_batch(&data);
    let e2e = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&ExecPlan::dense(4)))).unwrap();
    for retain in [true, false] {
        let full = Rc::new(SampleMask::full(8));
        let plan = ExecPlan {
            layers: vec![LayerExec::Sbp { mask: full, retain }; 4],
        };
        let sbp = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&plan))).unwrap();
        assert!(max_abs(&sbp.grads, &e2e.grads) < 1e-12);
    }
    let stt = stt(8, 2, 4);
    let data = clips(&stt.config.video, 2, 2);
    let batch = as_batch(&data);
    let e2e = train_step(&stt, &batch, StepOptions::new(GradMode::Plan(&ExecPlan::dense(2)))).unwrap();
    let sbp = stt_sbp_step(&stt, &batch, &SampleMask::full(4), true).unwrap();
    assert!(max_abs(&sbp.grads, &e2e.grads) < 1e-12);
    let fd = frame_dropout_step(&stt, &batch, 1.0, &mut Rng::new(0)).unwrap();
    assert!(max_abs(&fd.grads, &e2e.grads) < 1e-12);
}

#[test]
fn forward_is_invariant_under_sbp() {
    let model = transformer(6, (1, 2), 2, 4, 4, 11);
    let data = clips(&model.config.video, 1, 3);
    let mask = Rc::new(sample_uniform(6, 0.25, &mut Rng::new(1)).unwrap().expand(2));
    let dense = logits_under(&model, &data[0].0, &ExecPlan::dense(5));
    for exec in [
        LayerExec::Sbp { mask: mask.clone(), retain: true },
        LayerExec::Sbp { mask: mask.clone(), retain: false },
        LayerExec::Checkpoint,
    ] {
        let plan = ExecPlan { layers: vec![exec; 5] };
        let y = logits_under(&model, &data[0].0, &plan);
        assert!(y.max_abs_diff(&dense).unwrap() < 1e-12);
    }
    let stt = stt(8, 2, 2);
    let data = clips(&stt.config.video, 1, 3);
    let plan = ExecPlan {
        layers: vec![
            LayerExec::Sbp { mask: Rc::new(SampleMask::temporal(vec![2], 4).unwrap()), retain: true },
            LayerExec::Dense,
        ],
    };
    let y = logits_under(&stt, &data[0].0, &plan);
    assert!(y.max_abs_diff(&stt_forward(&data[0].0, &stt).unwrap()).unwrap() < 1e-12);
}

#[test]
fn checkpoint_composition_keeps_gradients_and_saves_memory() {
    let model = transformer(8, (1, 1), 2, 4, 4, 21);
    let data = clips(&model.config.video, 2, 9);
    let batch = as_batch(&data);
    let cfg = SbpConfig::new(0.25, SamplerKind::UniformRandom, 4, 5).unwrap();
    let plan = apply_sbp_to_model::<_, f64>(&model, &mut StepSampler::new(cfg.clone()).unwrap(), None, false).unwrap();
    let plan_ck = apply_sbp_to_model::<_, f64>(&model, &mut StepSampler::new(cfg).unwrap(), None, true).unwrap();
    let sbp = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&plan))).unwrap();
    let ck = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&plan_ck))).unwrap();
    let e2e = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&ExecPlan::dense(5)))).unwrap();
    assert!(max_abs(&sbp.grads, &ck.grads) < 1e-12);
    let (m_ck, m_sbp, m_e2e) = (
        ck.memory.cached_elements_total,
        sbp.memory.cached_elements_total,
        e2e.memory.cached_elements_total,
    );
    assert!(m_ck < m_sbp && m_sbp < m_e2e, "{m_ck} {m_sbp} {m_e2e}");
    assert_eq!(sbp.ops, ck.ops);
}

#[test]
fn stt_tree_exactness() {
    let model = stt(8, 2, 17);
    let data = clips(&model.config.video, 1, 6);
    let batch = as_batch(&data);
    let video = &data[0].0;
    let chunks = model.nodes(video).unwrap();

    // Dense gradient reaching each chunk feature.
    let mut tape = Tape::new();
    let params: Vec<_> = model.params().shared().into_iter().map(|p| tape.param_rc(p)).collect();
    let nodes = tape.input(chunks.clone(), false);
    let rec = model.record(&mut tape, &params, nodes, &ExecPlan::dense(2), None).unwrap();
    let loss = tape.cross_entropy(rec.logits, &[data[0].1]).unwrap();
    let g = tape.backward_retaining(loss, &[rec.slot_outputs[0]]).unwrap();
    let dh = g.wrt(rec.slot_outputs[0]).unwrap().clone();

    let masks = [vec![0, 2], vec![2, 3], vec![1, 2, 3], vec![2]];
    let mut chunk2_input_grad: Option<T64> = None;
    for kept in masks {
        let mask = SampleMask::temporal(kept.clone(), 4).unwrap();
        let plan = ExecPlan {
            layers: vec![LayerExec::Sbp { mask: Rc::new(mask), retain: true }, LayerExec::Dense],
        };
        let opts = StepOptions {
            input_grad: true,
            ..StepOptions::new(GradMode::Plan(&plan))
        };
        let out = train_step(&model, &batch, opts).unwrap();
        let dx = &out.input_grads[0];
        for i in 0..4 {
            if !kept.contains(&i) {
                assert!(dx.row(i).iter().all(|&v| v == 0.0));
            }
        }
        let row2 = T64::new(vec![1, dx.cols()], dx.row(2).to_vec()).unwrap();
        match &chunk2_input_grad {
            None => chunk2_input_grad = Some(row2),
            Some(prev) => assert!(prev.max_abs_diff(&row2).unwrap() < 1e-12),
        }
        let mut expected: Vec<T64> = (0..6)
            .map(|i| T64::zeros(model.params().get(i).value.shape().to_vec()))
            .collect();
        for &i in &kept {
            let x = T64::new(vec![1, chunks.cols()], chunks.row(i).to_vec()).unwrap();
            let d = T64::new(vec![1, dh.cols()], dh.row(i).to_vec()).unwrap();
            for (acc, g) in expected.iter_mut().zip(model.chunk_param_grads(&x, &d).unwrap()) {
                acc.add_assign(&g).unwrap();
            }
        }
        assert!(max_abs(&out.grads[..6], &expected) < 1e-12);
    }
}

#[test]
fn stt_chunking_contract() {
    let model = stt(8, 2, 1);
    assert_eq!(model.config.chunks(), 4);
    let single = stt(4, 4, 1);
    let v = clips(&single.config.video, 1, 0);
    assert_eq!(single.nodes(&v[0].0).unwrap().rows(), 1);
    assert_eq!(stt_forward(&v[0].0, &single).unwrap().shape(), &[1, 3]);
    let mut cfg = model.config.clone();
    cfg.chunk = 3;
    assert!(matches!(
        SttModel::<f64>::new(cfg, &mut Rng::new(0)),
        Err(sbp_core::Error::Shape { .. })
    ));
    // identical chunks give identical features
    let frame = T64::randn(vec![2, 2, 3, 3], 1.0, &mut Rng::new(4));
    let mut video = vec![0.0; 2 * 8 * 9];
    for c in 0..2 {
        for t in 0..8 {
            let src = (c * 2 + t % 2) * 9;
            video[(c * 8 + t) * 9..(c * 8 + t + 1) * 9].copy_from_slice(&frame.data()[src..src + 9]);
        }
    }
    let video = T64::new(vec![2, 8, 3, 3], video).unwrap();
    let h = model.spatial_features(&video).unwrap();
    for i in 1..4 {
        let d: f64 = h.row(0).iter().zip(h.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12);
    }
}

#[test]
fn frame_dropout_is_cheaper_than_sbp() {
    let model = stt(8, 1, 3);
    let data = clips(&model.config.video, 2, 8);
    let batch = as_batch(&data);
    let mut rng = Rng::new(1);
    let mask = sample_uniform(8, 0.25, &mut rng).unwrap();
    let sbp = stt_sbp_step(&model, &batch, &mask, true).unwrap();
    let fd = frame_dropout_step(&model, &batch, 0.25, &mut rng).unwrap();
    assert!(fd.memory.cached_elements_total < sbp.memory.cached_elements_total);
    let tr = transformer(8, (1, 1), 2, 4, 3, 2);
    let data = clips(&tr.config.video, 2, 8);
    let batch = as_batch(&data);
    let cfg = SbpConfig::new(0.25, SamplerKind::UniformRandom, 3, 5).unwrap();
    let plan = apply_sbp_to_model::<_, f64>(&tr, &mut StepSampler::new(cfg).unwrap(), None, false).unwrap();
    let sbp = train_step(&tr, &batch, StepOptions::new(GradMode::Plan(&plan))).unwrap();
    let fd = frame_dropout_step(&tr, &batch, 0.25, &mut rng).unwrap();
    assert!(fd.memory.cached_elements_total < sbp.memory.cached_elements_total);
}

fn permute_rows(x: &T64, perm: &[usize]) -> T64 {
    x.gather_rows(perm).unwrap()
}

#[test]
fn block_contracts() {
    let mut rng = Rng::new(12);
    let block = TransformerBlock::<f64>::new(2, 3, &mut rng).unwrap();
    // one token: softmax over one key is 1, so attention returns V
    let x = T64::randn(vec![1, 6], 1.0, &mut rng);
    let p = &block.params;
    let a = x.layer_norm(&p[0], &p[1], LN_EPS).unwrap();
    let x1 = x.add(&a.matmul(&p[4]).unwrap()).unwrap();
    let b = x1.layer_norm(&p[5], &p[6], LN_EPS).unwrap();
    let g = b.matmul(&p[7]).unwrap().add_row(&p[8]).unwrap().gelu().unwrap();
    let expected = x1.add(&g.matmul(&p[9]).unwrap().add_row(&p[10]).unwrap()).unwrap();
    let y = transformer_block_forward(&x, &block).unwrap();
    assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);

    let x = T64::randn(vec![5, 6], 1.0, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let y = transformer_block_forward(&x, &block).unwrap();
    let yp = transformer_block_forward(&permute_rows(&x, &perm), &block).unwrap();
    assert!(yp.max_abs_diff(&permute_rows(&y, &perm)).unwrap() < 1e-12);

    let bad = T64::randn(vec![5, 5], 1.0, &mut rng);
    assert!(matches!(transformer_block_forward(&bad, &block), Err(sbp_core::Error::Shape { .. })));
}

#[test]
fn block_sbp_backward_equals_oracle() {
    let mut rng = Rng::new(31);
    for _ in 0..5 {
        let block = TransformerBlock::<f64>::new(2, 4, &mut rng).unwrap();
        let x = T64::randn(vec![10, 8], 1.0, &mut rng);
        let dy = T64::randn(vec![10, 8], 1.0, &mut rng);
        let mask = sample_uniform(10, 0.3, &mut rng).unwrap();
        let exec = LayerExec::Sbp { mask: Rc::new(mask.clone()), retain: true };
        let sbp = transformer_block_grads(&x, &block, &exec, &dy, None).unwrap();
        let oracle = transformer_block_grads(&x, &block, &LayerExec::Dense, &dy, Some(&mask)).unwrap();
        assert!(max_rel(&sbp, &oracle) < 1e-9);
    }
}
