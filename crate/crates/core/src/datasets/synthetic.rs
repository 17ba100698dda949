use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, Result};
use crate::fingerprint::{FingerprintDataset, Point, RssSample, Site, DEFAULT_CELL_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub id: String,
    pub position: Point,
}

/// Log-distance path loss with Gaussian shadowing over a regular RP lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSiteConfig {
    pub site: Site,
    pub access_points: Vec<AccessPoint>,
    /// Path-loss exponent gamma.
    pub path_loss_exponent: f64,
    /// Loss at the 1 m reference distance, dB.
    pub reference_loss_db: f64,
    pub shadowing_std_db: f64,
    pub tx_power_dbm: f64,
    /// Readings below this become not-detected.
    pub detection_floor_dbm: f64,
    pub rp_spacing: f64,
    pub samples_per_rp: usize,
    pub cell_size: f64,
    pub seed: u64,
}

impl SyntheticSiteConfig {
    /// 12.8 m x 6.4 m (32 cells of 1.6 m), six perimeter APs, RPs every
    /// 0.8 m, 100 draws per RP.
    pub fn desk() -> Self {
        let positions = [(0.0, 0.0), (6.4, 0.0), (12.8, 0.0), (0.0, 6.4), (6.4, 6.4), (12.8, 6.4)];
        Self {
            site: Site { width: 12.8, height: 6.4 },
            access_points: positions
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| AccessPoint {
                    id: format!("AP{}", i + 1),
                    position: Point::new(x, y),
                })
                .collect(),
            path_loss_exponent: 2.5,
            reference_loss_db: 40.0,
            shadowing_std_db: 2.0,
            tx_power_dbm: 0.0,
            detection_floor_dbm: -100.0,
            rp_spacing: 0.8,
            samples_per_rp: 100,
            cell_size: DEFAULT_CELL_SIZE,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.access_points.len() < 2 {
            return bad("at least 2 access points required");
        }
        if !(self.shadowing_std_db >= 0.0) {
            return bad("shadowing std must be >= 0");
        }
        if !(self.path_loss_exponent > 0.0) {
            return bad("path-loss exponent must be > 0");
        }
        if !(self.rp_spacing > 0.0) {
            return bad("RP spacing must be > 0");
        }
        if self.samples_per_rp == 0 {
            return bad("samples per RP must be > 0");
        }
        if !(self.site.width > 0.0 && self.site.height > 0.0) {
            return bad("site must have positive extent");
        }
        for ap in &self.access_points {
            if !self.site.contains(&ap.position) {
                return Err(DatasetError::InvalidConfig(format!(
                    "access point {} at ({}, {}) lies outside the site",
                    ap.id, ap.position.x, ap.position.y
                )));
            }
        }
        Ok(())
    }

    /// RPs at `spacing/2 + k*spacing` along each axis, row-major.
    pub fn reference_points(&self) -> Vec<Point> {
        let axis = |extent: f64| {
            let mut v = Vec::new();
            let mut k = 0usize;
            loop {
                let c = self.rp_spacing / 2.0 + k as f64 * self.rp_spacing;
                if c >= extent {
                    break v;
                }
                v.push(c);
                k += 1;
            }
        };
        let xs = axis(self.site.width);
        let ys = axis(self.site.height);
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| Point::new(x, y))).collect()
    }
}

/// Noiseless received power at `distance` meters; distances under the 1 m
/// reference are held at the reference loss.
pub fn path_loss_rss(cfg: &SyntheticSiteConfig, distance: f64) -> f64 {
    let d = distance.max(1.0);
    cfg.tx_power_dbm - (cfg.reference_loss_db + 10.0 * cfg.path_loss_exponent * d.log10())
}

/// Draws `samples_per_rp` fingerprints at every RP. Each RP has its own
/// ChaCha stream derived from the seed, so output depends only on the config.
pub fn generate_synthetic(cfg: &SyntheticSiteConfig) -> Result<FingerprintDataset> {
    cfg.validate()?;
    let rps = cfg.reference_points();
    let noise = (cfg.shadowing_std_db > 0.0)
        .then(|| Normal::new(0.0, cfg.shadowing_std_db).expect("validated std"));
    let mut samples = Vec::with_capacity(rps.len() * cfg.samples_per_rp);
    for (k, rp) in rps.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let means: Vec<f64> = cfg
            .access_points
            .iter()
            .map(|ap| path_loss_rss(cfg, rp.distance(&ap.position)))
            .collect();
        for _ in 0..cfg.samples_per_rp {
            let readings = means
                .iter()
                .map(|&m| {
                    let shadow = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                    let rss = (m + shadow).min(cfg.tx_power_dbm);
                    (rss >= cfg.detection_floor_dbm).then_some(rss)
                })
                .collect();
            samples.push(RssSample {
                readings,
                location: *rp,
                floor: None,
                building: None,
            });
        }
    }
    let ds = FingerprintDataset {
        ap_roster: cfg.access_points.iter().map(|ap| ap.id.clone()).collect(),
        samples,
        site: cfg.site,
        grid_cell_size: cfg.cell_size,
    };
    ds.validate()?;
    Ok(ds)
}
