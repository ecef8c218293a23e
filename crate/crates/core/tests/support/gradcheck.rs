use std::rc::Rc;

use sbp_core::autograd::{finite_difference_grad, Region, RowSelect, Tape};
use sbp_core::models::{BlockRegion, EmbedRegion, SpatialRegion};
use sbp_core::tensor::Tensor;
use sbp_core::{Op, OpKind, Rng, Var};

pub const EPS: f64 = 1e-3;
pub const REGION_EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const TRIALS: u64 = 10;

type T64 = Tensor<f64>;

fn rel_err(a: &T64, b: &T64) -> f64 {
    let diff = a.sub(b).unwrap().norm();
    diff / a.norm().max(b.norm()).max(1e-8)
}

/// Builds the recorded output from leaves; `loss = sum(out * proj)`.
type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> sbp_core::Result<Var>;

fn check(name: &str, eps: f64, inputs: Vec<T64>, differentiable: &[usize], build: &Build, rng: &mut Rng) {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &leaves).unwrap();
    let proj = T64::randn(tape.value(out).shape().to_vec(), 1.0, rng);
    let loss_of = |xs: &[T64]| -> sbp_core::Result<f64> {
        let mut t = Tape::no_grad();
        let l: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let o = build(&mut t, &l)?;
        Ok(t.value(o).mul(&proj)?.sum())
    };
    let p = tape.constant(proj.clone());
    let weighted = tape.mul(out, p).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let grads = tape.backward(loss).unwrap();
    for &i in differentiable {
        let numeric = finite_difference_grad(
            |xi: &T64| {
                let mut xs = inputs.clone();
                xs[i] = xi.clone();
                loss_of(&xs)
            },
            &inputs[i],
            eps,
        )
        .unwrap();
        let analytic = grads.wrt(leaves[i]).unwrap();
        let e = rel_err(analytic, &numeric);
        assert!(e < TOL, "{name} input {i}: relative error {e}");
    }
}

/// Values bounded away from zero so that relu's kink is not crossed.
fn away_from_zero(shape: Vec<usize>, rng: &mut Rng) -> T64 {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.uniform_in(0.05, 2.0);
            if rng.below(2) == 0 {
                v
            } else {
                -v
            }
        })
        .collect();
    T64::new(shape, data).unwrap()
}

fn prim(op: Op<f64>) -> Box<Build> {
    Box::new(move |t: &mut Tape<f64>, l: &[Var]| t.record(op.clone(), l, sbp_core::CachePolicy::Full))
}

/// Every primitive op against central differences, `TRIALS` random draws
/// each.
pub fn primitives() {
    let mut covered = Vec::new();
    for trial in 0..TRIALS {
        let mut rng = Rng::new(1000 + trial);
        let r = &mut rng;
        let (m, k, p) = (2 + r.below(3), 2 + r.below(3), 2 + r.below(3));
        let mut cases: Vec<(OpKind, Vec<T64>, Vec<usize>, Box<Build>)> = vec![
            (OpKind::MatMul, vec![T64::randn(vec![m, k], 1.0, r), T64::randn(vec![k, p], 1.0, r)], vec![0, 1], prim(Op::MatMul)),
            (OpKind::Add, vec![T64::randn(vec![m, k], 1.0, r), T64::randn(vec![m, k], 1.0, r)], vec![0, 1], prim(Op::Add)),
            (OpKind::Sub, vec![T64::randn(vec![m, k], 1.0, r), T64::randn(vec![m, k], 1.0, r)], vec![0, 1], prim(Op::Sub)),
            (OpKind::Mul, vec![T64::randn(vec![m, k], 1.0, r), T64::randn(vec![m, k], 1.0, r)], vec![0, 1], prim(Op::Mul)),
            (OpKind::Scale, vec![T64::randn(vec![m, k], 1.0, r)], vec![0], prim(Op::Scale(-1.7))),
            (OpKind::Square, vec![T64::randn(vec![m, k], 1.0, r)], vec![0], prim(Op::Square)),
            (OpKind::Relu, vec![away_from_zero(vec![m, k], r)], vec![0], prim(Op::Relu)),
            (OpKind::Gelu, vec![T64::randn(vec![m, k], 1.5, r)], vec![0], prim(Op::Gelu)),
            (OpKind::AddBias, vec![T64::randn(vec![m, k], 1.0, r), T64::randn(vec![k], 1.0, r)], vec![0, 1], prim(Op::AddBias)),
            (OpKind::SoftmaxRows, vec![T64::randn(vec![m, k], 2.0, r)], vec![0], prim(Op::SoftmaxRows)),
            (
                OpKind::LayerNorm,
                vec![T64::randn(vec![m, k + 1], 1.0, r), T64::randn(vec![k + 1], 1.0, r), T64::randn(vec![k + 1], 1.0, r)],
                vec![0, 1, 2],
                prim(Op::LayerNorm { eps: 1e-5 }),
            ),
            (
                OpKind::AttnScores,
                vec![T64::randn(vec![m, 4], 1.0, r), T64::randn(vec![k, 4], 1.0, r)],
                vec![0, 1],
                prim(Op::AttnScores { heads: 2 }),
            ),
            (
                OpKind::AttnApply,
                vec![T64::rand_uniform(vec![2, m, k], 0.0, 1.0, r), T64::randn(vec![k, 4], 1.0, r)],
                vec![0, 1],
                prim(Op::AttnApply),
            ),
            (
                OpKind::GatherRows,
                vec![T64::randn(vec![m + 2, k], 1.0, r)],
                vec![0],
                prim(Op::GatherRows(Rc::from(vec![m + 1, 0, m + 1]))),
            ),
            (OpKind::Sum, vec![T64::randn(vec![m, k], 1.0, r)], vec![0], prim(Op::Sum)),
            (OpKind::MeanRows, vec![T64::randn(vec![m, k], 1.0, r)], vec![0], prim(Op::MeanRows)),
            (
                OpKind::CrossEntropy,
                vec![T64::randn(vec![m, k], 1.0, r)],
                vec![0],
                prim(Op::CrossEntropy(Rc::from((0..m).map(|i| i % k).collect::<Vec<_>>()))),
            ),
            (OpKind::Gate, vec![T64::randn(vec![m, k], 1.0, r)], vec![0], prim(Op::Gate(3))),
        ];
        for (kind, inputs, diff, build) in cases.drain(..) {
            check(kind.name(), EPS, inputs, &diff, build.as_ref(), r);
            if trial == 0 {
                covered.push(kind);
            }
        }
    }
    assert_eq!(covered.len(), OpKind::ALL.len(), "every op kind is checked");
}

fn region_build(region: Rc<dyn Region<f64>>, rows: &'static [usize], select: u8) -> Box<Build> {
    Box::new(move |t: &mut Tape<f64>, l: &[Var]| {
        let sel = match select {
            0 => RowSelect::All,
            1 => RowSelect::Gathered(rows),
            _ => RowSelect::Query(rows),
        };
        region.record(t, l, sel)
    })
}

/// The composite layer regions against central differences.
pub fn regions() {
    for trial in 0..TRIALS {
        let mut rng = Rng::new(77 + trial);
        let r = &mut rng;
        let (n, c) = (4, 4);
        let mut block = vec![T64::randn(vec![n, c], 1.0, r)];
        block.push(T64::rand_uniform(vec![c], 0.5, 1.5, r));
        block.push(T64::randn(vec![c], 0.1, r));
        for _ in 0..3 {
            block.push(T64::randn(vec![c, c], 0.5, r));
        }
        block.push(T64::rand_uniform(vec![c], 0.5, 1.5, r));
        block.push(T64::randn(vec![c], 0.1, r));
        block.push(T64::randn(vec![c, 4 * c], 0.5, r));
        block.push(T64::randn(vec![4 * c], 0.1, r));
        block.push(T64::randn(vec![4 * c, c], 0.3, r));
        block.push(T64::randn(vec![c], 0.1, r));
        let all: Vec<usize> = (0..block.len()).collect();
        for select in [0u8, 2] {
            check(
                "block",
                REGION_EPS,
                block.clone(),
                &all,
                region_build(Rc::new(BlockRegion { heads: 2 }), &[0, 3], select).as_ref(),
                r,
            );
        }
        let embed = vec![
            T64::randn(vec![n, 3], 1.0, r),
            T64::randn(vec![3, c], 1.0, r),
            T64::randn(vec![c], 1.0, r),
            T64::randn(vec![n, c], 1.0, r),
        ];
        check("embed", REGION_EPS, embed, &[0, 1, 2, 3], region_build(Rc::new(EmbedRegion), &[1, 2], 2).as_ref(), r);
        let spatial = vec![
            T64::randn(vec![n, 5], 1.0, r),
            T64::rand_uniform(vec![5], 0.5, 1.5, r),
            T64::randn(vec![5], 0.1, r),
            T64::randn(vec![5, 6], 0.5, r),
            T64::randn(vec![6], 0.1, r),
            T64::randn(vec![6, c], 0.5, r),
            T64::randn(vec![c], 0.1, r),
        ];
        check("spatial", REGION_EPS, spatial, &[0, 1, 2, 3, 4, 5, 6], region_build(Rc::new(SpatialRegion), &[], 0).as_ref(), r);
    }
}
