//! Shared fixtures for the benchmarks.

use layerstat::synthetic::{circle_centres, gaussian_blobs};
use layerstat::toynet::{export_representations, train_toy, Activation, ToyNetwork, TrainConfig};
use layerstat::{LayerDataset, Matrix};

/// Gaussian points in `dim` dimensions with a seeded generator.
pub fn random_points(n: usize, dim: usize, seed: u64) -> Matrix {
    let centres = vec![vec![0.0; dim]];
    gaussian_blobs(&centres, n, 1.0, seed).expect("valid blobs").0
}

/// A trained three-class toy network and calibration and test
/// representations from it.
pub fn toy_fixture(calibration_per_class: usize, test_per_class: usize) -> (ToyNetwork, LayerDataset, LayerDataset) {
    let centres = circle_centres(3, 4.0);
    let (x, y) = gaussian_blobs(&centres, 200, 1.0, 1).expect("valid blobs");
    let mut net = ToyNetwork::random(&[2, 32, 32, 3], Activation::Relu, vec![(-20.0, 20.0); 2], 2).expect("valid sizes");
    train_toy(&mut net, &x, &y, &TrainConfig::default()).expect("training runs");
    let (xc, yc) = gaussian_blobs(&centres, calibration_per_class, 1.0, 3).expect("valid blobs");
    let (xt, yt) = gaussian_blobs(&centres, test_per_class, 1.0, 4).expect("valid blobs");
    let calibration = export_representations(&net, &xc, &yc).expect("export");
    let test = export_representations(&net, &xt, &yt).expect("export");
    (net, calibration, test)
}
