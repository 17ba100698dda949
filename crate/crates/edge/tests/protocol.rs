use edgeloc_core::capsnet::{forward_values, predict_grid, CapsNetConfig, CapsNetParams};
use edgeloc_core::fingerprint::{difference_matrix, GridMap, Site};
use edgeloc_edge::blob::{self, BlobError};
use edgeloc_edge::{BundleInputs, Locator, ModelBundle, RawSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn roster(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("AP{k}")).collect()
}

fn bundle(config: &CapsNetConfig, seed: u64, version: u64) -> ModelBundle {
    let params = CapsNetParams::init(config, seed).unwrap();
    let grid = GridMap::build(Site { width: 12.8, height: 6.4 }, 1.6).unwrap();
    ModelBundle::build(
        BundleInputs {
            params: &params,
            config,
            grid: &grid,
            ap_roster: &roster(config.n_aps),
            min_rss: -95.0,
        },
        version,
        "2026-01-01T00:00:00Z".into(),
    )
    .unwrap()
}

fn reference_config() -> CapsNetConfig {
    CapsNetConfig::new(6, 32, 64, 8, 16)
}

#[test]
fn full_model_round_trips_exactly_at_single_precision() {
    let config = reference_config();
    let params = CapsNetParams::init(&config, 11).unwrap();
    let b = bundle(&config, 11, 1);
    let back = ModelBundle::from_bytes(&b.to_bytes()).unwrap();
    let restored = back.params().unwrap();
    for ((_, want), (_, got)) in params.named().zip(restored.named()) {
        assert_eq!(want.shape(), got.shape());
        for (w, g) in want.data().iter().zip(got.data()) {
            assert_eq!((*w as f32).to_bits(), (*g as f32).to_bits());
            assert_eq!(*g, *w as f32 as f64);
        }
    }
    // re-encoding the decoded tensors reproduces the blob byte for byte
    assert_eq!(blob::encode(back.weights()).unwrap(), b.blob());
}

#[test]
fn thousand_single_bit_flips_are_rejected() {
    let b = bundle(&CapsNetConfig::new(6, 32, 8, 4, 4), 5, 1);
    let good = b.blob().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut kinds = [0usize; 4];
    for _ in 0..1000 {
        let mut bad = good.clone();
        let at = rng.random_range(0..bad.len());
        bad[at] ^= 1 << rng.random_range(0..8);
        match blob::decode(&bad) {
            Ok(_) => panic!("flip at byte {at} accepted"),
            Err(BlobError::BadMagic(_)) => kinds[0] += 1,
            Err(BlobError::UnsupportedVersion(_)) => kinds[1] += 1,
            Err(BlobError::ChecksumMismatch) => kinds[2] += 1,
            Err(_) => kinds[3] += 1,
        }
        assert!(ModelBundle::from_parts(b.manifest().clone(), bad).is_err());
    }
    assert!(kinds[2] > 900, "{kinds:?}");
}

#[test]
fn every_truncation_is_rejected() {
    let good = bundle(&CapsNetConfig::new(6, 32, 4, 2, 4), 1, 1).blob().to_vec();
    for len in 0..good.len() {
        assert!(blob::decode(&good[..len]).is_err(), "prefix of {len} bytes accepted");
    }
}

fn random_sample(rng: &mut ChaCha8Rng, n: usize) -> RawSample {
    let mut s = RawSample::default();
    for ap in roster(n) {
        let v = if rng.random_bool(0.15) {
            None
        } else {
            Some(rng.random_range(-95.0..-30.0))
        };
        s.readings.insert(ap, v);
    }
    s
}

#[test]
fn device_locate_matches_double_precision_forward() {
    let config = reference_config();
    let b = bundle(&config, 8, 1);
    let params = b.params().unwrap();
    let locator = Locator::new(b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let sample = random_sample(&mut rng, config.n_aps);
        let got = locator.locate(&sample).unwrap();
        let r: Vec<f64> = roster(config.n_aps)
            .iter()
            .map(|ap| sample.readings[ap].map_or(0.0, |rss| 0.1 * (rss + 95.0)))
            .collect();
        let x = difference_matrix(&r).unwrap().into_values();
        let want = forward_values(&x, &params, &config).unwrap();
        assert_eq!(got.grid_index, predict_grid(&want));
        for (g, w) in got.lengths.iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs());
        }
        assert!(got.elapsed_ms >= 0.0);
    }
    assert!(worst < 1e-6, "max length deviation {worst}");
}

#[test]
fn unknown_aps_are_ignored_and_missing_aps_are_not_detected() {
    let config = CapsNetConfig::new(6, 32, 8, 2, 4);
    let locator = Locator::new(bundle(&config, 2, 1)).unwrap();
    let mut s = RawSample::default();
    s.readings.insert("AP1".into(), Some(-60.0));
    s.readings.insert("AP4".into(), Some(-70.0));
    let base = locator.locate(&s).unwrap();
    assert!(base.ignored_aps.is_empty());
    s.readings.insert("ROGUE".into(), Some(-40.0));
    s.readings.insert("AP2".into(), None);
    let with_extra = locator.locate(&s).unwrap();
    assert_eq!(with_extra.ignored_aps, vec!["ROGUE".to_string()]);
    assert_eq!(with_extra.lengths, base.lengths);
    let grid = locator.bundle().manifest().grid;
    assert_eq!(with_extra.cell_center, grid.cell_center(with_extra.grid_index).unwrap());
}

#[test]
fn readings_below_min_rss_clamp_to_the_floor() {
    let config = CapsNetConfig::new(6, 32, 8, 2, 4);
    let locator = Locator::new(bundle(&config, 2, 1)).unwrap();
    let mut a = RawSample::default();
    a.readings.insert("AP0".into(), Some(-120.0));
    a.readings.insert("AP3".into(), Some(-50.0));
    let mut b = a.clone();
    b.readings.insert("AP0".into(), Some(-95.0));
    assert_eq!(locator.features(&a).0, locator.features(&b).0);
}
