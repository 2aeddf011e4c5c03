use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use star_core::params::{ParamStore, Rng};
use star_core::registry;
use star_core::ssm::encoder::{
    encode_input, Encoder, EncoderConfig, EncoderInput, ExtraTokensValue, PathReduce, TokenSource,
};
use star_core::ssm::paths::ScanMode;
use star_core::{Matrix, StarError};

const PATCH_DIM: usize = 6;

/// Row-major grid input with an optional class token at `class_at`.
fn grid_input(h: usize, w: usize, class_at: Option<usize>, patches: Matrix<f32>) -> EncoderInput {
    let mut sources: Vec<TokenSource> = (0..h * w).map(TokenSource::Pixel).collect();
    let mut grid: Vec<Option<(usize, usize)>> = (0..h * w).map(|k| Some((k / w, k % w))).collect();
    if let Some(at) = class_at {
        sources.insert(at, TokenSource::ClassToken);
        grid.insert(at, None);
    }
    EncoderInput {
        patches,
        separator_rows: None,
        position_ids: vec![None; sources.len()],
        sources,
        grid,
        grid_shape: (h, w),
        images: 1,
    }
}

fn random_patches(n: usize, rng: &mut Rng) -> Matrix<f32> {
    Matrix::from_fn(n, PATCH_DIM, |_, _| rng.random_range(-1.0..1.0))
}

/// Visit orders written out as plain loops.
fn expected_orders(h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); 4];
    for r in 0..h {
        for c in 0..w {
            out[0].push((r, c));
        }
        for c in (0..w).rev() {
            out[1].push((r, c));
        }
    }
    for c in 0..w {
        for r in (0..h).rev() {
            out[2].push((r, c));
        }
    }
    for c in (0..w).rev() {
        for r in (0..h).rev() {
            out[3].push((r, c));
        }
    }
    out
}

fn is_permutation(path: &[usize]) -> bool {
    let mut seen = vec![false; path.len()];
    path.iter()
        .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

proptest! {
    #[test]
    fn four_scan_matches_loop_oracle(h in 1usize..6, w in 1usize..6, class in proptest::option::of(0usize..40)) {
        let class_at = class.map(|c| c % (h * w + 1));
        let input = grid_input(h, w, class_at, Matrix::zeros(h * w, PATCH_DIM));
        let paths = registry::scan_mode("four-scan").unwrap().paths(&input).unwrap();
        prop_assert_eq!(paths.len(), 4);
        for (path, order) in paths.iter().zip(expected_orders(h, w)) {
            prop_assert!(is_permutation(path));
            if let Some(at) = class_at {
                prop_assert_eq!(path[at], at);
            }
            let visited: Vec<(usize, usize)> = path.iter().filter_map(|&k| input.grid[k]).collect();
            prop_assert_eq!(visited, order);
        }
    }

    #[test]
    fn one_scan_is_identity(n in 1usize..30) {
        let input = grid_input(1, n, None, Matrix::zeros(n, PATCH_DIM));
        let paths = registry::scan_mode("one-scan").unwrap().paths(&input).unwrap();
        prop_assert_eq!(paths, vec![(0..n).collect::<Vec<_>>()]);
    }
}

#[test]
fn four_scan_rejects_multi_image_input() {
    let mut input = grid_input(2, 2, None, Matrix::zeros(4, PATCH_DIM));
    input.images = 2;
    let err = registry::scan_mode("four-scan")
        .unwrap()
        .paths(&input)
        .unwrap_err();
    assert!(matches!(err, StarError::FourScanPacked));
}

fn encoder(
    scan: Arc<dyn ScanMode>,
    reduce: PathReduce,
    store: &mut ParamStore<f64>,
    rng: &mut Rng,
) -> Encoder {
    let config = EncoderConfig {
        depth: 2,
        width: 8,
        state_dim: 4,
        mlp_ratio: 2,
        patch_dim: PATCH_DIM,
        positions: 16,
        use_positional: false,
        scan_mode: scan,
        path_reduce: reduce,
    };
    Encoder::register(store, config, rng)
}

/// Largest deviation between features of an image and features of its
/// mirror image read back at the mirrored positions.
fn flip_deviation(scan: &str, reduce: PathReduce) -> f64 {
    let (h, w) = (3, 4);
    let mut rng = Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let enc = encoder(
        registry::scan_mode(scan).unwrap(),
        reduce,
        &mut store,
        &mut rng,
    );
    let patches = random_patches(h * w, &mut rng);
    let mirror = |k: usize| (k / w) * w + (w - 1 - k % w);
    let flipped = Matrix::from_fn(h * w, PATCH_DIM, |k, j| patches.get(mirror(k), j));
    let a = encode_input(
        &enc,
        &store,
        &grid_input(h, w, None, patches),
        ExtraTokensValue::default(),
    )
    .unwrap();
    let b = encode_input(
        &enc,
        &store,
        &grid_input(h, w, None, flipped),
        ExtraTokensValue::default(),
    )
    .unwrap();
    (0..h * w)
        .flat_map(|k| (0..a.cols()).map(move |j| (k, j)))
        .map(|(k, j)| (a.get(k, j) - b.get(mirror(k), j)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn four_scan_features_follow_a_horizontal_flip() {
    for reduce in [PathReduce::Sum, PathReduce::Mean] {
        let dev = flip_deviation("four-scan", reduce);
        assert!(dev < 1e-10, "{reduce:?}: {dev:e}");
    }
}

#[test]
fn one_scan_features_do_not_follow_a_flip() {
    assert!(flip_deviation("one-scan", PathReduce::Sum) > 1e-3);
}
