//! Synthetic magnetogram-like datasets with known flare-producing regions.
//!
//! Every image is a solar disk of mid-gray noise on an exactly mid-gray
//! background. Observations followed by a flare of at least M1.0 carry one
//! to three bipolar pairs of adjacent bright and dark Gaussians; the first
//! pair sits at the flare's heliographic position.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::catalog::{flux_to_class, Catalog, FlareEvent};
use super::image::save_gray;
use super::labeling::{label_samples, save_manifest, LabeledSample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Hours between consecutive observations. One more than the prediction
/// window, so each event falls in exactly one observation's window.
pub const SYNTH_STEP_HOURS: i64 = 25;

pub const CATALOG_FILE: &str = "catalog.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const BLOBS_FILE: &str = "blobs.csv";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_samples: usize,
    /// Probability that an observation is followed by an M/X flare.
    pub flare_rate: f64,
    pub seed: u64,
    pub image_size: usize,
    /// Standard deviation of on-disk noise, in 8-bit levels.
    pub noise_levels: f64,
    /// Fraction of flares that are X class.
    pub x_fraction: f64,
    /// Probability that a quiet observation still has a sub-M event.
    pub minor_event_rate: f64,
    pub start: DateTime<Utc>,
}

impl SynthOptions {
    pub fn new(n_samples: usize, flare_rate: f64, seed: u64) -> Self {
        SynthOptions {
            n_samples,
            flare_rate,
            seed,
            image_size: 64,
            noise_levels: 8.0,
            x_fraction: 0.1,
            minor_event_rate: 0.3,
            start: Utc.with_ymd_and_hms(2010, 5, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BlobBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Row-major mask of pixels inside any of `boxes`.
pub fn blob_mask(boxes: &[BlobBox], size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| boxes.iter().any(|b| b.contains(i % size, i / size)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub timestamp: DateTime<Utc>,
    /// 8-bit pixels, row-major, `image_size` squared.
    pub pixels: Vec<u8>,
    pub blobs: Vec<BlobBox>,
    /// Heliographic longitude of the flaring region, when there is one.
    pub longitude: Option<f64>,
}

impl SynthSample {
    pub fn tensor(&self, size: usize) -> Tensor {
        Tensor::new(
            vec![1, size, size],
            self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )
        .expect("pixel count matches size")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub image_size: usize,
    pub samples: Vec<SynthSample>,
    pub events: Vec<FlareEvent>,
}

pub fn synth_dataset(n_samples: usize, flare_rate: f64, seed: u64) -> Result<SynthDataset> {
    synth_with(&SynthOptions::new(n_samples, flare_rate, seed))
}

pub fn synth_with(opts: &SynthOptions) -> Result<SynthDataset> {
    if !(opts.flare_rate > 0.0 && opts.flare_rate < 1.0) {
        return Err(Error::Data(format!(
            "flare rate {} outside (0, 1)",
            opts.flare_rate
        )));
    }
    if opts.image_size < 16 {
        return Err(Error::Data(format!(
            "image size {} below 16",
            opts.image_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = Normal::new(0.0, opts.noise_levels)
        .map_err(|e| Error::Data(format!("noise level {}: {e}", opts.noise_levels)))?;
    let disk = Disk::new(opts.image_size);
    let mut samples = Vec::with_capacity(opts.n_samples);
    let mut events = Vec::new();
    for i in 0..opts.n_samples {
        let t = opts.start + Duration::hours(SYNTH_STEP_HOURS * i as i64);
        let mut field: Vec<f64> = (0..disk.size * disk.size)
            .map(|_| noise.sample(&mut rng))
            .collect();
        let mut blobs = Vec::new();
        let mut longitude = None;
        if rng.random_bool(opts.flare_rate) {
            let log_flux = if rng.random_bool(opts.x_fraction) {
                rng.random_range(-4.0..-3.3)
            } else {
                rng.random_range(-5.0..-4.0)
            };
            let lon: f64 = rng.random_range(-85.0..85.0);
            let lat: f64 = rng.random_range(-35.0..35.0);
            events.push(event_at(&mut rng, t, 10f64.powf(log_flux), lon, lat)?);
            longitude = Some(lon);
            blobs.push(disk.add_pair(&mut field, &mut rng, lon, lat));
            for _ in 0..rng.random_range(0..=2) {
                let (lon, lat) = (rng.random_range(-80.0..80.0), rng.random_range(-35.0..35.0));
                blobs.push(disk.add_pair(&mut field, &mut rng, lon, lat));
            }
        } else if rng.random_bool(opts.minor_event_rate) {
            let (lon, lat) = (rng.random_range(-85.0..85.0), rng.random_range(-35.0..35.0));
            let flux = 10f64.powf(rng.random_range(-7.0..-5.0));
            events.push(event_at(&mut rng, t, flux, lon, lat)?);
        }
        samples.push(SynthSample {
            timestamp: t,
            pixels: disk.render(&field),
            blobs,
            longitude,
        });
    }
    Ok(SynthDataset {
        image_size: opts.image_size,
        samples,
        events,
    })
}

fn event_at(
    rng: &mut ChaCha8Rng,
    t: DateTime<Utc>,
    flux: f64,
    lon: f64,
    lat: f64,
) -> Result<FlareEvent> {
    let peak = t + Duration::minutes(rng.random_range(1..=24 * 60));
    Ok(FlareEvent {
        start_time: peak - Duration::minutes(rng.random_range(5..30)),
        peak_time: peak,
        end_time: peak + Duration::minutes(rng.random_range(10..60)),
        peak_flux: flux,
        class: flux_to_class(flux)?,
        longitude: lon,
        latitude: lat,
        noaa_ar: Some(11000 + rng.random_range(0..3000)),
    })
}

struct Disk {
    size: usize,
    center: f64,
    radius: f64,
}

impl Disk {
    fn new(size: usize) -> Disk {
        Disk {
            size,
            center: (size as f64 - 1.0) / 2.0,
            radius: 0.45 * size as f64,
        }
    }

    fn inside(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 - self.center, y as f64 - self.center);
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// Field in 8-bit levels relative to mid-gray, masked to the disk.
    fn render(&self, field: &[f64]) -> Vec<u8> {
        field
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if self.inside(i % self.size, i / self.size) {
                    (128.0 + v).round().clamp(0.0, 255.0) as u8
                } else {
                    128
                }
            })
            .collect()
    }

    /// Adds one bipolar pair centered at heliographic `(lon, lat)` and
    /// returns its bounding box.
    fn add_pair(&self, field: &mut [f64], rng: &mut ChaCha8Rng, lon: f64, lat: f64) -> BlobBox {
        let scale = self.size as f64 / 64.0;
        let (lon_r, lat_r) = (lon.to_radians(), lat.to_radians());
        let cx = self.center + self.radius * lon_r.sin() * lat_r.cos();
        let cy = self.center - self.radius * lat_r.sin();
        let sigma = rng.random_range(1.8..3.0) * scale;
        // limb foreshortening squeezes the east-west extent
        let sx = sigma * lon_r.cos().max(0.35);
        let amplitude = rng.random_range(70.0..110.0);
        let tilt: f64 = rng.random_range(-30.0f64..30.0).to_radians();
        let half = 1.25 * sigma;
        let (ox, oy) = (half * tilt.cos() * lon_r.cos().max(0.35), half * tilt.sin());
        let poles = [
            (cx - ox, cy - oy, amplitude),
            (cx + ox, cy + oy, -amplitude),
        ];
        let reach = 2.5;
        let mut bbox = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for &(px, py, a) in &poles {
            bbox[0] = bbox[0].min(px - reach * sx);
            bbox[1] = bbox[1].min(py - reach * sigma);
            bbox[2] = bbox[2].max(px + reach * sx);
            bbox[3] = bbox[3].max(py + reach * sigma);
            for y in 0..self.size {
                let dy = (y as f64 - py) / sigma;
                if dy.abs() > 4.0 {
                    continue;
                }
                for x in 0..self.size {
                    let dx = (x as f64 - px) / sx;
                    if dx.abs() <= 4.0 {
                        field[y * self.size + x] += a * (-0.5 * (dx * dx + dy * dy)).exp();
                    }
                }
            }
        }
        let clip = |v: f64| v.clamp(0.0, self.size as f64) as usize;
        BlobBox {
            x0: clip(bbox[0].floor()),
            y0: clip(bbox[1].floor()),
            x1: clip(bbox[2].ceil() + 1.0),
            y1: clip(bbox[3].ceil() + 1.0),
        }
    }
}

pub fn image_file_name(t: &DateTime<Utc>) -> String {
    format!("synth_{}.png", t.format("%Y%m%dT%H%M%SZ"))
}

impl SynthDataset {
    /// Labels the observations against the synthetic catalog.
    pub fn labeled(&self, image_dir: &Path) -> Result<Vec<LabeledSample>> {
        let ts: Vec<_> = self.samples.iter().map(|s| s.timestamp).collect();
        label_samples(&ts, &self.events, |t| image_dir.join(image_file_name(t)))
    }

    /// Writes `images/`, `catalog.csv`, `manifest.csv` and `blobs.csv` under
    /// `dir` and returns the labeled samples.
    pub fn write(&self, dir: &Path) -> Result<Vec<LabeledSample>> {
        let images = dir.join(IMAGE_DIR);
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.samples {
            save_gray(
                &images.join(image_file_name(&s.timestamp)),
                self.image_size,
                s.pixels.clone(),
            )?;
        }
        Catalog::save(&self.events, &dir.join(CATALOG_FILE))?;
        let labeled = self.labeled(Path::new(IMAGE_DIR))?;
        save_manifest(&labeled, &dir.join(MANIFEST_FILE))?;
        self.save_blobs(&dir.join(BLOBS_FILE))?;
        Ok(labeled
            .into_iter()
            .map(|mut s| {
                s.image_path = dir.join(&s.image_path);
                s
            })
            .collect())
    }

    fn save_blobs(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["timestamp", "pair", "x0", "y0", "x1", "y1"])
            .map_err(err)?;
        for s in &self.samples {
            for (k, b) in s.blobs.iter().enumerate() {
                w.write_record([
                    super::catalog::format_utc(&s.timestamp),
                    k.to_string(),
                    b.x0.to_string(),
                    b.y0.to_string(),
                    b.x1.to_string(),
                    b.y1.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads `blobs.csv` back as `(timestamp, box)` rows.
pub fn load_blobs(path: &Path) -> Result<Vec<(DateTime<Utc>, BlobBox)>> {
    let bad = |reason: String| Error::Format {
        format: "blobs",
        path: PathBuf::from(path),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let n = |i: usize| {
            rec[i]
                .parse::<usize>()
                .map_err(|e| bad(format!("{:?}: {e}", &rec[i])))
        };
        let t = super::catalog::parse_utc(&rec[0]).map_err(|e| bad(e.to_string()))?;
        out.push((
            t,
            BlobBox {
                x0: n(2)?,
                y0: n(3)?,
                x1: n(4)?,
                y1: n(5)?,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::labeling::Label;

    #[test]
    fn flare_count_is_binomial() {
        let d = synth_dataset(7000, 1.0 / 7.0, 7).unwrap();
        let labeled = d.labeled(Path::new("img")).unwrap();
        let fl = labeled.iter().filter(|s| s.label == Label::FL).count() as f64;
        let sigma = (7000.0f64 * (1.0 / 7.0) * (6.0 / 7.0)).sqrt();
        assert!((fl - 1000.0).abs() <= 3.0 * sigma, "{fl}");
    }

    #[test]
    fn background_is_exactly_neutral() {
        let d = synth_dataset(40, 0.5, 3).unwrap();
        let disk = Disk::new(d.image_size);
        for s in &d.samples {
            for (i, &p) in s.pixels.iter().enumerate() {
                if !disk.inside(i % d.image_size, i / d.image_size) {
                    assert_eq!(p, 128);
                }
            }
        }
    }

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(
            synth_dataset(30, 0.3, 11).unwrap(),
            synth_dataset(30, 0.3, 11).unwrap()
        );
        assert_ne!(
            synth_dataset(30, 0.3, 11).unwrap(),
            synth_dataset(30, 0.3, 12).unwrap()
        );
    }

    #[test]
    fn blobs_exactly_on_flaring_samples() {
        let d = synth_dataset(300, 0.3, 5).unwrap();
        let labeled = d.labeled(Path::new("img")).unwrap();
        for (s, l) in d.samples.iter().zip(&labeled) {
            assert_eq!(!s.blobs.is_empty(), l.label == Label::FL);
            assert!(s.blobs.len() <= 3);
            assert_eq!(s.longitude.is_some(), l.label == Label::FL);
            if let Some(lon) = s.longitude {
                let e = l.defining_event(&d.events).unwrap();
                assert_eq!(e.longitude, lon);
                assert!(e.is_flare());
            }
        }
    }

    #[test]
    fn blob_boxes_hold_the_strong_field() {
        let d = synth_dataset(200, 0.5, 9).unwrap();
        for s in d.samples.iter().filter(|s| !s.blobs.is_empty()) {
            let mask = blob_mask(&s.blobs, d.image_size);
            for (i, &p) in s.pixels.iter().enumerate() {
                // 8 sigma of noise never reaches 70 levels off mid-gray
                if (p as i32 - 128).abs() > 70 {
                    assert!(mask[i], "strong pixel {i} outside boxes");
                }
            }
        }
    }

    #[test]
    fn written_dataset_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_dataset(12, 0.4, 2).unwrap();
        let samples = d.write(dir.path()).unwrap();
        let manifest =
            crate::data::labeling::load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest, samples);
        let catalog = Catalog::load(&dir.path().join(CATALOG_FILE)).unwrap();
        assert_eq!(catalog.events.len(), d.events.len());
        let img = crate::data::image::load_image(&samples[0].image_path, 64).unwrap();
        assert_eq!(img, d.samples[0].tensor(64));
        let blobs = load_blobs(&dir.path().join(BLOBS_FILE)).unwrap();
        assert_eq!(
            blobs.len(),
            d.samples.iter().map(|s| s.blobs.len()).sum::<usize>()
        );
    }

    #[test]
    fn rejects_degenerate_rates() {
        assert!(synth_dataset(10, 0.0, 1).is_err());
        assert!(synth_dataset(10, 1.0, 1).is_err());
    }
}
