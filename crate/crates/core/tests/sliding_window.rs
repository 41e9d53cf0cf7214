mod common;

use common::{random_tensor, rng};
use geoseg::inference::{sliding_window_infer, sliding_window_map};
use geoseg::network::{Network, NetworkConfig};
use geoseg::tensor::{Parameter, Tensor};

fn net(rank: usize) -> Network {
    Network::build(NetworkConfig {
        spatial_rank: rank,
        width: 4,
        depth: 2,
        seed: 3,
        ..NetworkConfig::default()
    })
    .unwrap()
}

/// Replaces every parameter whose name starts with `prefix` by fresh random values.
fn scramble(network: &Network, prefix: &str, seed: u64) -> Network {
    let mut r = rng(seed);
    let params = network
        .parameters()
        .iter()
        .map(|p| {
            if p.name.starts_with(prefix) {
                Parameter::new(p.name.clone(), random_tensor(p.value().shape(), &mut r, -1.0, 1.0))
            } else {
                p.clone()
            }
        })
        .collect();
    Network::from_parameters(network.config().clone(), params).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn whole_volume_window_equals_forward_pass() {
    for (rank, shape) in [(2, vec![16, 24]), (3, vec![8, 12, 8])] {
        let network = net(rank);
        let image = random_tensor(&shape, &mut rng(1), 0.0, 1.0);
        let mut full = vec![1, 1];
        full.extend(&shape);
        let direct = network.predict(&image.clone().reshape(full).unwrap()).unwrap();
        let tiled = sliding_window_infer(&network, image.data(), &shape, &shape, &shape).unwrap();
        assert!(max_diff(&tiled, direct.seg[0].data()) <= 1e-6);
        let larger: Vec<usize> = shape.iter().map(|s| s + 8).collect();
        // padded windows see zeros beyond the edge, so only the shape contract is exact here
        assert_eq!(sliding_window_infer(&network, image.data(), &shape, &larger, &larger).unwrap().len(), image.numel());
    }
}

#[test]
fn final_map_comes_from_first_decoder() {
    let base = net(2);
    let shape = [16, 16];
    let image = random_tensor(&shape, &mut rng(2), 0.0, 1.0);
    let window = [8, 8];
    let stride = [4, 4];
    let reference = sliding_window_infer(&base, image.data(), &shape, &window, &stride).unwrap();

    let second_changed = scramble(&base, "dec2.", 10);
    let pred = second_changed.predict(&image.clone().reshape(vec![1, 1, 16, 16]).unwrap()).unwrap();
    assert!(max_diff(pred.seg[1].data(), base.predict(&image.clone().reshape(vec![1, 1, 16, 16]).unwrap()).unwrap().seg[1].data()) > 1e-3);
    let after = sliding_window_infer(&second_changed, image.data(), &shape, &window, &stride).unwrap();
    assert_eq!(after, reference);

    let first_changed = scramble(&base, "dec1.", 11);
    let after = sliding_window_infer(&first_changed, image.data(), &shape, &window, &stride).unwrap();
    assert!(max_diff(&after, &reference) > 1e-3);
}

#[test]
fn stride_does_not_matter_for_pointwise_maps() {
    let shape = [13, 17];
    let image = random_tensor(&shape, &mut rng(3), -1.0, 1.0);
    let f = |t: &Tensor| Ok(t.map(|v| v.tanh()));
    let a = sliding_window_map(image.data(), &shape, &[8, 8], &[8, 8], f).unwrap();
    for stride in [[1, 1], [3, 5], [4, 8]] {
        let b = sliding_window_map(image.data(), &shape, &[8, 8], &stride, f).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
    }
}

#[test]
fn invalid_windows_are_rejected() {
    let network = net(2);
    let image = vec![0.0; 64];
    assert!(sliding_window_infer(&network, &image, &[8, 8], &[6, 6], &[3, 3]).is_err());
    assert!(sliding_window_infer(&network, &image, &[8, 8], &[8, 8], &[0, 4]).is_err());
    assert!(sliding_window_infer(&network, &image, &[8, 8], &[8, 8], &[16, 16]).is_err());
    assert!(sliding_window_infer(&network, &image[..60], &[8, 8], &[8, 8], &[4, 4]).is_err());
}
