//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segpool::IdMap;
use segpool::losses::{cross_entropy, invariance_loss, real_loss, segment_pool, variance_loss};
use segpool::model::{forward_on_tape, ModelConfig, ModelParams};
use segpool::numerics::gradcheck::{check_tape_function, GradCheck};
use segpool::numerics::{Shape, Tape, Tensor, Var};
use segpool::segmask::{MaskSet, SegmentMask};
use segpool::Result;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let data = (0..shape.numel()).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

fn assert_all_pass(what: &str, seed: u64, reports: &[GradCheck]) {
    for (i, r) in reports.iter().enumerate() {
        assert!(r.passes(TOL), "{what} seed {seed} input {i}: {r:?}");
    }
}

fn check(what: &str, seed: u64, build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) {
    let reports = check_tape_function(build, inputs, STEP, &[]).unwrap();
    assert_all_pass(what, seed, &reports);
}

/// Random rectangles over a w×h grid, resampled until some pixel is shared.
fn overlapping_masks(rng: &mut ChaCha8Rng, w: usize, h: usize, count: usize) -> MaskSet {
    loop {
        let masks: Vec<SegmentMask> = (0..count)
            .map(|_| {
                let (y0, x0) = (rng.random_range(0..h - 1), rng.random_range(0..w - 1));
                let (y1, x1) = (rng.random_range(y0 + 1..=h), rng.random_range(x0 + 1..=w));
                let bitmap: Vec<bool> = (0..w * h)
                    .map(|p| (y0..y1).contains(&(p / w)) && (x0..x1).contains(&(p % w)))
                    .collect();
                SegmentMask::encode(w, h, &bitmap).unwrap()
            })
            .collect();
        let set = MaskSet::new(w, h, masks).unwrap();
        if set.stats().overlap_pixels > 0 {
            return set;
        }
    }
}

#[test]
fn conv2d_all_geometries() {
    // (in, out, kernel, stride, padding, height, width)
    let geometries = [
        (3, 4, 3, 1, 1, 7, 6),
        (2, 3, 3, 1, 0, 6, 6),
        (2, 3, 5, 1, 2, 5, 7),
        (3, 2, 3, 2, 1, 8, 7),
        (4, 3, 1, 1, 0, 5, 5),
        (2, 2, 1, 2, 0, 6, 5),
    ];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(cin, cout, k, s, p, h, w) in &geometries {
            let inputs = [
                random_tensor(&mut rng, &[cin, h, w], 1.0),
                random_tensor(&mut rng, &[cout, cin, k, k], 0.7),
                random_tensor(&mut rng, &[cout], 0.5),
            ];
            let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let y = t.conv2d(v[0], v[1], v[2], s, p)?;
                let y = t.gelu(y);
                Ok(t.sum_scaled(y, 0.5))
            };
            check(&format!("conv2d k{k} s{s} p{p}"), seed, &build, &inputs);
        }
    }
}

#[test]
fn gelu_upsample_add_concat_scale() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random_tensor(&mut rng, &[2, 3, 4], 3.0);
        check(
            "gelu",
            seed,
            &|t, v| {
                let y = t.gelu(v[0]);
                let y = t.gelu(y);
                Ok(t.sum_scaled(y, 1.0))
            },
            &[x.clone()],
        );
        check(
            "upsample",
            seed,
            &|t, v| {
                let y = t.upsample_bilinear_2x(v[0])?;
                let y = t.gelu(y);
                Ok(t.sum_scaled(y, 1.0))
            },
            &[x.clone()],
        );
        let other = random_tensor(&mut rng, &[2, 3, 4], 1.0);
        check(
            "add",
            seed,
            &|t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.gelu(y);
                Ok(t.sum_scaled(y, 1.0))
            },
            &[x.clone(), other],
        );
        let third = random_tensor(&mut rng, &[1, 3, 4], 1.0);
        check(
            "concat",
            seed,
            &|t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                let y = t.gelu(y);
                Ok(t.sum_scaled(y, 1.0))
            },
            &[x.clone(), third],
        );
        check(
            "scale",
            seed,
            &|t, v| {
                let y = t.scale(v[0], -1.7);
                let y = t.gelu(y);
                Ok(t.sum_scaled(y, 0.3))
            },
            &[x],
        );
    }
}

#[test]
fn cross_entropy_wrt_logits() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let logits = random_tensor(&mut rng, &[5, 4, 3], 4.0);
        let labels = IdMap::new(3, 4, (0..12).map(|_| rng.random_range(0..5u8)).collect()).unwrap();
        check("cross entropy", seed, &|t, v| cross_entropy(t, v[0], &labels), &[logits]);
    }
}

#[test]
fn pooling_losses_wrt_features() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let dense = random_tensor(&mut rng, &[3, 8, 8], 0.6);
        let masks = overlapping_masks(&mut rng, 8, 8, 4);
        check(
            "invariance",
            seed,
            &|t, v| {
                let pooled = segment_pool(t, v[0], &masks)?;
                Ok(invariance_loss(t, &pooled))
            },
            &[dense.clone()],
        );
        check(
            "variance",
            seed,
            &|t, v| {
                let pooled = segment_pool(t, v[0], &masks)?;
                variance_loss(t, &pooled, 0.5)
            },
            &[dense.clone()],
        );
        check(
            "real loss",
            seed,
            &|t, v| Ok(real_loss(t, v[0], &masks, 0.05, 0.5)?.total),
            &[dense],
        );
    }
}

#[test]
fn supervised_loss_through_the_whole_model() {
    let config = ModelConfig::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let params = ModelParams::init(config, seed).unwrap();
        let image = random_tensor(&mut rng, &[3, 8, 8], 1.0).map(|v| 0.5 + 0.5 * v);
        let labels = IdMap::new(8, 8, (0..64).map(|_| rng.random_range(0..5u8)).collect()).unwrap();
        let indices: Vec<Option<Vec<usize>>> = params
            .tensors()
            .iter()
            .map(|t| Some((0..6).map(|_| rng.random_range(0..t.numel())).collect()))
            .collect();
        let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let x = t.constant(image.clone());
            let out = forward_on_tape(t, v, x)?;
            cross_entropy(t, out.logits, &labels)
        };
        let reports = check_tape_function(&build, params.tensors(), STEP, &indices).unwrap();
        assert_all_pass("model supervised", seed, &reports);
    }
}

#[test]
fn real_loss_through_the_whole_model() {
    let config = ModelConfig::default();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let params = ModelParams::init(config, 77 + seed).unwrap();
        let image = random_tensor(&mut rng, &[3, 8, 8], 1.0).map(|v| 0.5 + 0.5 * v);
        let masks = overlapping_masks(&mut rng, 8, 8, 4);
        let indices: Vec<Option<Vec<usize>>> = params
            .tensors()
            .iter()
            .map(|t| Some((0..4).map(|_| rng.random_range(0..t.numel())).collect()))
            .collect();
        let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let x = t.constant(image.clone());
            let out = forward_on_tape(t, v, x)?;
            Ok(real_loss(t, out.dense, &masks, 0.05, 0.5)?.total)
        };
        let reports = check_tape_function(&build, params.tensors(), STEP, &indices).unwrap();
        assert_all_pass("model real", seed, &reports);
    }
}
