//! Central finite-difference checks of every differentiable op and of a
//! small CNN end to end, in f64.

use super::*;
use rdx_core::models::{build_custom_cnn_with, CustomCnnConfig, Model};
use rdx_core::tensor::{Mode, Padding, RngState, Tensor};

pub const ALL: &[(&str, fn() -> Check)] = &[
    ("conv2d_gradients", conv2d_gradients),
    ("depthwise_and_separable_gradients", depthwise_and_separable_gradients),
    ("maxpool_gradients", maxpool_gradients),
    ("dense_gradients", dense_gradients),
    ("activation_gradients", activation_gradients),
    ("pooling_norm_and_structural_gradients", pooling_norm_and_structural_gradients),
    ("small_cnn_end_to_end", small_cnn_end_to_end),
];

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;

fn each_seed(name: &str, mut f: impl FnMut(u64, &mut RngState) -> f64) -> Check {
    for seed in 0..SEEDS {
        let mut rng = RngState::new(seed);
        let err = f(seed, &mut rng);
        ensure!(err < OP_TOL, "{name} seed {seed}: relative error {err:.3e}");
    }
    Ok(())
}

pub fn conv2d_gradients() -> Check {
    each_seed("conv2d", |seed, rng| {
        let same = seed % 2 == 0;
        let stride = 1 + (seed as usize / 2) % 2;
        let inputs = [random_tensor(&[2, 5, 6, 2], rng), random_tensor(&[3, 3, 2, 3], rng), random_tensor(&[3], rng)];
        let pad = if same { Padding::Same } else { Padding::Valid };
        check_op(&inputs, seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), pad, stride))
    })?;
    Ok(())
}

pub fn depthwise_and_separable_gradients() -> Check {
    each_seed("depthwise", |seed, rng| {
        let inputs = [random_tensor(&[1, 5, 5, 3], rng), random_tensor(&[3, 3, 3, 1], rng)];
        check_op(&inputs, seed, |t, v| t.depthwise_conv2d(v[0], v[1], Padding::Same, 1 + seed as usize % 2))
    })?;
    each_seed("separable", |seed, rng| {
        let inputs = [
            random_tensor(&[2, 6, 5, 2], rng),
            random_tensor(&[3, 3, 2, 1], rng),
            random_tensor(&[1, 1, 2, 4], rng),
            random_tensor(&[4], rng),
        ];
        check_op(&inputs, seed, |t, v| t.separable_conv2d(v[0], v[1], v[2], Some(v[3]), Padding::Same, 1))
    })?;
    Ok(())
}

pub fn maxpool_gradients() -> Check {
    each_seed("maxpool 2/2 valid", |seed, rng| {
        check_op(&[distinct_tensor(&[2, 6, 5, 2], rng)], seed, |t, v| t.maxpool(v[0], 2, 2, Padding::Valid))
    })?;
    each_seed("maxpool 3/2 same", |seed, rng| {
        check_op(&[distinct_tensor(&[1, 7, 6, 2], rng)], seed, |t, v| t.maxpool(v[0], 3, 2, Padding::Same))
    })?;
    Ok(())
}

pub fn dense_gradients() -> Check {
    each_seed("dense", |seed, rng| {
        let inputs = [random_tensor(&[3, 5], rng), random_tensor(&[5, 4], rng), random_tensor(&[4], rng)];
        check_op(&inputs, seed, |t, v| t.dense(v[0], v[1], Some(v[2])))
    })?;
    Ok(())
}

pub fn activation_gradients() -> Check {
    each_seed("relu", |seed, rng| check_op(&[away_from_zero(&[3, 7], rng)], seed, |t, v| Ok(t.relu(v[0]))))?;
    each_seed("softmax", |seed, rng| check_op(&[random_tensor(&[3, 4], rng)], seed, |t, v| t.softmax(v[0])))?;
    each_seed("dropout", |seed, rng| {
        check_op(&[random_tensor(&[4, 6], rng)], seed, |t, v| {
            t.dropout(v[0], 0.3, Mode::Train, &mut RngState::new(seed + 1000))
        })
    })?;
    Ok(())
}

pub fn pooling_norm_and_structural_gradients() -> Check {
    each_seed("global_avg_pool", |seed, rng| {
        check_op(&[random_tensor(&[2, 3, 4, 3], rng)], seed, |t, v| t.global_avg_pool(v[0]))
    })?;
    each_seed("batch_norm", |seed, rng| {
        let mean = random_tensor(&[3], rng);
        let var = Tensor::from_fn(&[3], |_| rng.uniform(0.5, 2.0));
        let inputs = [random_tensor(&[2, 3, 3, 3], rng), random_tensor(&[3], rng), random_tensor(&[3], rng)];
        check_op(&inputs, seed, move |t, v| {
            let m = t.leaf(mean.clone(), false);
            let s = t.leaf(var.clone(), false);
            t.batch_norm(v[0], v[1], v[2], m, s, 1e-3)
        })
    })?;
    each_seed("add", |seed, rng| {
        check_op(&[random_tensor(&[2, 5], rng), random_tensor(&[2, 5], rng)], seed, |t, v| t.add(v[0], v[1]))
    })?;
    each_seed("flatten", |seed, rng| check_op(&[random_tensor(&[2, 2, 3, 2], rng)], seed, |t, v| t.flatten(v[0])))?;
    each_seed("softmax + scce", |seed, rng| {
        check_op(&[random_tensor(&[4, 4], rng)], seed, |t, v| {
            let p = t.softmax(v[0])?;
            t.scce(p, &[0, 3, 1, 1])
        })
    })?;
    Ok(())
}

pub fn small_cnn_end_to_end() -> Check {
    let spec = build_custom_cnn_with(&CustomCnnConfig {
        input: [12, 12, 1],
        filters: vec![2, 3],
        dense_units: 5,
        dropout: 0.3,
        ..CustomCnnConfig::default()
    })
    .unwrap();
    for seed in 0..SEEDS {
        let mut model = Model::<f64>::new(spec.clone(), seed).unwrap();
        let mut rng = RngState::new(50 + seed);
        // Zero-initialised biases put a unit whose inputs were all dropped
        // exactly on the ReLU kink, where no derivative exists.
        let biases: Vec<String> = model.params().iter().filter(|p| p.name.ends_with("/bias")).map(|p| p.name.clone()).collect();
        for name in biases {
            for b in model.param_mut(&name).unwrap().value.data_mut() {
                *b = rng.uniform(-0.5, 0.5);
            }
        }
        let x = random_tensor(&[3, 12, 12, 1], &mut rng);
        let labels = [0, 2, 3];
        let err = check_model(&mut model, &x, &labels, seed);
        ensure!(err < MODEL_TOL, "seed {seed}: relative error {err:.3e}");
    }
    Ok(())
}
