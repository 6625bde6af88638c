//! Optimised kernels against straightforward loop implementations.

use super::*;
use rdx_core::preprocess::{clahe, median_filter, resize_nearest, ClaheParams, FloatImage};
use rdx_core::tensor::{
    conv2d, dense, global_average_pool, maxpool_forward, separable_conv, Geometry, LayerParams, Padding, RngState,
};

const TOL: f64 = 1e-10;
const INSTANCES: u64 = 20;

pub const ALL: &[(&str, fn() -> Check)] = &[
    ("conv2d_matches_loops", conv2d_matches_loops),
    ("separable_matches_loops", separable_matches_loops),
    ("maxpool_matches_loops", maxpool_matches_loops),
    ("global_average_pool_matches_loops", global_average_pool_matches_loops),
    ("dense_matches_loops", dense_matches_loops),
    ("median_matches_sort_exactly", median_matches_sort_exactly),
    ("resize_matches_exactly", resize_matches_exactly),
    ("clahe_matches_reference_exactly", clahe_matches_reference_exactly),
];

fn padding(same: bool) -> Padding {
    if same {
        Padding::Same
    } else {
        Padding::Valid
    }
}

pub fn conv2d_matches_loops() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(seed);
        let (n, h, w, c, o) = (1 + rng.below(2), 4 + rng.below(5), 4 + rng.below(5), 1 + rng.below(3), 1 + rng.below(4));
        let k = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let same = rng.below(2) == 1;
        let x = random_tensor(&[n, h, w, c], &mut rng);
        let kern = random_tensor(&[k, k, c, o], &mut rng);
        let bias = random_tensor(&[o], &mut rng);
        let got = conv2d(&x, &LayerParams::conv(kern.clone(), Some(bias.clone())), padding(same), stride).unwrap();
        let want = conv2d_naive(&x, &kern, Some(&bias), stride, same);
        ensure!(max_abs_diff(&got, &want) < TOL, "seed {seed}");
    }
    Ok(())
}

pub fn separable_matches_loops() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(100 + seed);
        let (h, w, c, o) = (4 + rng.below(5), 4 + rng.below(5), 1 + rng.below(4), 1 + rng.below(4));
        let stride = 1 + rng.below(2);
        let same = rng.below(2) == 1;
        let x = random_tensor(&[2, h, w, c], &mut rng);
        let dw = random_tensor(&[3, 3, c, 1], &mut rng);
        let pw = random_tensor(&[1, 1, c, o], &mut rng);
        let b = random_tensor(&[o], &mut rng);
        let got = separable_conv(&x, &LayerParams::separable(dw.clone(), pw.clone(), Some(b.clone())), padding(same), stride).unwrap();
        let want = separable_naive(&x, &dw, &pw, Some(&b), stride, same);
        ensure!(max_abs_diff(&got, &want) < TOL, "seed {seed}");
    }
    Ok(())
}

pub fn maxpool_matches_loops() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(200 + seed);
        let (h, w) = (3 + rng.below(6), 3 + rng.below(6));
        let (window, stride) = if rng.below(2) == 0 { (2, 2) } else { (3, 2) };
        let same = window == 3 || rng.below(2) == 1;
        let x = random_tensor(&[2, h, w, 3], &mut rng);
        let g = Geometry::new("maxpool", h, w, window, window, stride, padding(same)).unwrap();
        let got = maxpool_forward(&x, &g).unwrap().0;
        ensure!(max_abs_diff(&got, &maxpool_naive(&x, window, stride, same)) < TOL, "seed {seed}");
    }
    Ok(())
}

pub fn global_average_pool_matches_loops() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(300 + seed);
        let x = random_tensor(&[1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(5)], &mut rng);
        ensure!(max_abs_diff(&global_average_pool(&x).unwrap(), &gap_naive(&x)) < TOL, "seed {seed}");
    }
    Ok(())
}

pub fn dense_matches_loops() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(400 + seed);
        let (n, d, u) = (1 + rng.below(4), 1 + rng.below(10), 1 + rng.below(6));
        let x = random_tensor(&[n, d], &mut rng);
        let wt = random_tensor(&[d, u], &mut rng);
        let b = random_tensor(&[u], &mut rng);
        let got = dense(&x, &LayerParams::dense(wt.clone(), b.clone())).unwrap();
        ensure!(max_abs_diff(&got, &dense_naive(&x, &wt, &b)) < TOL, "seed {seed}");
    }
    Ok(())
}

pub fn median_matches_sort_exactly() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(500 + seed);
        let img = random_gray(1 + rng.below(30), 1 + rng.below(30), &mut rng);
        for k in [3, 5] {
            ensure_eq!(median_filter(&img, k).unwrap(), median_naive(&img, k), "seed {seed} k {k}");
        }
    }
    Ok(())
}

pub fn resize_matches_exactly() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(600 + seed);
        let (w, h) = (1 + rng.below(40), 1 + rng.below(40));
        let px = (0..w * h).map(|_| rng.next_f64() as f32).collect();
        let img = FloatImage::new(w, h, px).unwrap();
        let (ow, oh) = (1 + rng.below(50), 1 + rng.below(50));
        ensure_eq!(resize_nearest(&img, ow, oh).unwrap(), resize_naive(&img, ow, oh), "seed {seed}");
    }
    Ok(())
}

pub fn clahe_matches_reference_exactly() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = RngState::new(700 + seed);
        let (w, h) = (3 + rng.below(60), 3 + rng.below(60));
        let img = random_gray(w, h, &mut rng);
        let p = ClaheParams {
            clip_limit: [0.0, 1.0, 2.0, 4.0][rng.below(4)],
            tiles_x: 1 + rng.below(3),
            tiles_y: 1 + rng.below(3),
        };
        ensure_eq!(clahe(&img, &p).unwrap(), clahe_naive(&img, &p), "seed {seed} {p:?}");
    }
    // the reference settings on a panoramic-shaped frame
    let mut rng = RngState::new(7);
    let img = random_gray(512, 256, &mut rng);
    let p = ClaheParams::default();
    ensure_eq!(clahe(&img, &p).unwrap(), clahe_naive(&img, &p));
    Ok(())
}
