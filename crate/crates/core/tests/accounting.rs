mod common;

use std::rc::Rc;

use common::*;
use sbp_core::analysis::{
    measure_ratios, predict_space_ratio_stt, predict_space_ratio_transformer, predict_time_ratio,
    relative_deviation, RunStats,
};
use sbp_core::models::{
    stt_sbp_step, train_step, transformer_block_run, GradMode, StepOptions, SttConfig, SttModel,
    TransformerBlock, VideoShape,
};
use sbp_core::sbp::{apply_sbp_to_model, sample_uniform, ExecPlan, LayerExec, SamplerKind, SbpConfig, StepSampler};
use sbp_core::{keep_count, Rng};

#[test]
fn block_space_ratio_matches_formula() {
    let (d, n) = (32, 392);
    let mut rng = Rng::new(3);
    let block = TransformerBlock::<f64>::new(1, d, &mut rng).unwrap();
    let x = T64::randn(vec![n, d], 1.0, &mut rng);
    let full = transformer_block_run(&x, &block, &LayerExec::Dense).unwrap();
    assert_eq!(full.memory.cached_elements_total, block.full_charge(n));
    for (r, expected) in [(0.125, 0.2136), (0.25, 0.3260), (0.5, 0.5506)] {
        let mask = sample_uniform(n, r, &mut rng).unwrap();
        let exec = LayerExec::Sbp { mask: Rc::new(mask), retain: true };
        let run = transformer_block_run(&x, &block, &exec).unwrap();
        assert_eq!(run.memory.cached_elements_total, block.sbp_charge(n, keep_count(n, r)));
        let measured = run.memory.cached_elements_total as f64 / full.memory.cached_elements_total as f64;
        let predicted = predict_space_ratio_transformer(d, n, r).unwrap();
        assert!((predicted - expected).abs() < 1e-3, "{predicted}");
        assert!(relative_deviation(measured, predicted) < 0.10, "r={r}: {measured} vs {predicted}");
    }
    let all = LayerExec::Sbp { mask: Rc::new(sbp_core::SampleMask::full(n)), retain: true };
    let run = transformer_block_run(&x, &block, &all).unwrap();
    assert_eq!(run.memory.cached_elements_total, full.memory.cached_elements_total);
}

#[test]
fn stt_space_ratio_matches_formula() {
    let cfg = SttConfig {
        video: VideoShape {
            channels: 3,
            frames: 16,
            height: 16,
            width: 16,
        },
        chunk: 2,
        hidden: 128,
        heads: 2,
        head_dim: 8,
        classes: 3,
    };
    let model = SttModel::<f64>::new(cfg, &mut Rng::new(2)).unwrap();
    let data = clips(&model.config.video, 2, 1);
    let batch = as_batch(&data);
    let e2e = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&ExecPlan::dense(2)))).unwrap();
    let m_s = e2e.memory.layer(Some(0)) as f64;
    let m_c = e2e.memory.cached_elements_total as f64 - m_s;
    assert!(m_s > 8.0 * m_c, "{m_s} {m_c}");
    for r in [0.125, 0.25, 0.5] {
        let mask = sample_uniform(8, r, &mut Rng::new(4)).unwrap();
        let sbp = stt_sbp_step(&model, &batch, &mask, true).unwrap();
        let measured = sbp.memory.cached_elements_total as f64 / e2e.memory.cached_elements_total as f64;
        let predicted = predict_space_ratio_stt(m_s, m_c, r).unwrap();
        assert!(relative_deviation(measured, predicted) < 0.10, "r={r}: {measured} vs {predicted}");
    }
}

#[test]
fn time_ratio_matches_formula_when_phases_balance() {
    let model = transformer(8, (4, 8), 2, 8, 2, 6);
    let data = clips(&model.config.video, 1, 2);
    let batch = as_batch(&data);
    let e2e = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&ExecPlan::dense(3)))).unwrap();
    let full = RunStats {
        fingerprint: "t".into(),
        memory: e2e.memory.clone(),
        ops: e2e.ops.clone(),
    };
    for r in [0.125, 0.25, 0.5] {
        let cfg = SbpConfig::new(r, SamplerKind::UniformRandom, 2, 1).unwrap();
        let plan = apply_sbp_to_model::<_, f64>(&model, &mut StepSampler::new(cfg).unwrap(), None, false).unwrap();
        let sbp = train_step(&model, &batch, StepOptions::new(GradMode::Plan(&plan))).unwrap();
        let run = RunStats {
            fingerprint: "t".into(),
            memory: sbp.memory,
            ops: sbp.ops,
        };
        let m = measure_ratios(&full, &run).unwrap();
        let predicted = predict_time_ratio(r).unwrap();
        assert!(relative_deviation(m.time, predicted) < 0.10, "r={r}: {m:?} vs {predicted}");
    }
}
