use uanet::gradcheck::suite::{run_case, Case, Instance, Precision, SuiteOptions};
use uanet::gradcheck::{finite_diff_check, CheckOptions};
use uanet::model::{FusionCase, FusionLevel, UraFormula};
use uanet::params::ParamStore;
use uanet::{Graph, Tensor};

const TOL: f64 = 1e-4;

fn assert_case(case: Case, seeds: usize) {
    let r = run_case(case, seeds, &SuiteOptions::default()).unwrap();
    assert!(r.report.passes(TOL), "{case}: {}", r.report);
    assert!(r.report.checked > 0, "{case}: nothing checked");
}

macro_rules! op_checks {
    ($($name:ident => $case:expr),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                assert_case($case, 10);
            }
        )*
    };
}

op_checks! {
    matmul => Case::MatMul,
    conv2d => Case::Conv2d,
    maxpool => Case::MaxPool,
    relu => Case::Relu,
    sigmoid => Case::Sigmoid,
    softmax => Case::Softmax,
    add => Case::Add,
    sub => Case::Sub,
    mul => Case::Mul,
    scale => Case::Scale,
    mean => Case::Mean,
    reshape => Case::Reshape,
    transpose => Case::Transpose,
    concat => Case::Concat,
    split => Case::Split,
    upsample_nearest => Case::UpsampleNearest,
    upsample_bilinear => Case::UpsampleBilinear,
    bce => Case::Bce,
    pigm => Case::Pigm,
    uafm_concat => Case::Uafm(FusionCase::Concat),
    uafm_sigmoid => Case::Uafm(FusionCase::Sigmoid),
    uafm_foreground => Case::Uafm(FusionCase::ForegroundOnly),
    uafm_full => Case::Uafm(FusionCase::Full),
    dilation_block => Case::DilationBlock,
}

#[test]
fn encoder() {
    assert_case(Case::Encoder, 3);
}

#[test]
fn fpn() {
    assert_case(Case::Fpn, 3);
}

#[test]
fn full_network() {
    assert_case(Case::UaNet, 2);
}

#[test]
fn instances_are_reproducible() {
    for case in Case::all() {
        let a = Instance::new(case, 4).unwrap();
        let b = Instance::new(case, 4).unwrap();
        assert_eq!(a.inputs, b.inputs, "{case}");
    }
}

#[test]
fn single_precision_gradients_track_double() {
    let opts = SuiteOptions {
        precision: Precision::F32,
        ..SuiteOptions::default()
    };
    for case in [Case::Conv2d, Case::Softmax, Case::Pigm, Case::Uafm(FusionCase::Full)] {
        let r = run_case(case, 3, &opts).unwrap();
        assert!(r.report.passes(Precision::F32.tolerance()), "{case}: {}", r.report);
    }
}

#[test]
fn rank_weighting_is_flat() {
    // Rank maps are constant within a bucket: the numeric derivative with
    // respect to M is exactly zero wherever no bucket changes.
    let mut store = ParamStore::<f64>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let level = FusionLevel::new("u", FusionCase::Full, 2, 2, &mut store, &mut rng).unwrap();
    let values: Vec<Tensor<f64>> = store.values().to_vec();
    let g_in = Tensor::from_fn(&[2, 2, 2], |i| (i as f64 * 0.7).sin());
    let f_in = Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.3).cos());
    // logits well inside buckets
    let m_in = Tensor::from_f64(&[1, 2, 2], &[-3.0, 0.3, 1.1, 4.0]).unwrap();
    let mut inputs = vec![m_in];
    inputs.extend(values);
    let report = finite_diff_check(
        |g, v| {
            let p = uanet::params::Bound::new(v[1..].to_vec());
            let gi = g.constant(g_in.clone());
            let fi = g.constant(f_in.clone());
            let (_, m) = level.fuse(g, &p, gi, fi, v[0], UraFormula::Prose)?;
            Ok(g.sum(m))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.passes(TOL), "{report}");
    let g = Graph::<f64>::new();
    let m = g.param(inputs[0].clone());
    let p = store.bind(&g);
    let gi = g.constant(g_in.clone());
    let fi = g.constant(f_in.clone());
    let (_, out) = level.fuse(&g, &p, gi, fi, m, UraFormula::Prose).unwrap();
    let s = g.sum(out);
    g.backward(s).unwrap();
    assert!(g.grad(m).is_none());
}

#[test]
fn prior_map_still_learns_from_its_own_loss() {
    // M feeds both a rank weighting (no gradient) and its own BCE term.
    let mut store = ParamStore::<f64>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let level = FusionLevel::new("u", FusionCase::Full, 2, 2, &mut store, &mut rng).unwrap();
    let g = Graph::<f64>::new();
    let p = store.bind(&g);
    let m = g.param(Tensor::from_f64(&[1, 2, 2], &[-1.0, 0.2, 0.7, 2.0]).unwrap());
    let gi = g.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64 * 0.1));
    let fi = g.constant(Tensor::from_fn(&[2, 4, 4], |i| i as f64 * -0.05));
    let (_, out) = level.fuse(&g, &p, gi, fi, m, UraFormula::Prose).unwrap();
    let t = g.constant(Tensor::from_f64(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap());
    let own = g.bce_with_logits(m, t).unwrap();
    let fused = g.mean(out);
    let total = g.add(own, fused).unwrap();
    g.backward(total).unwrap();
    let grad = g.grad(m).unwrap();
    // exactly the BCE gradient (sigmoid(m) - t) / n
    let expect = [-1.0f64, 0.2, 0.7, 2.0]
        .iter()
        .zip([0.0, 1.0, 1.0, 0.0])
        .map(|(&x, t)| (1.0 / (1.0 + (-x).exp()) - t) / 4.0);
    for (a, e) in grad.data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn sampled_coordinates() {
    let inst = Instance::new(Case::Conv2d, 1).unwrap();
    let opts = CheckOptions {
        max_coords_per_input: Some(3),
        ..CheckOptions::default()
    };
    let r = inst.check(&opts).unwrap();
    assert!(r.checked + r.skipped <= 9);
    assert!(r.passes(TOL), "{r}");
}
