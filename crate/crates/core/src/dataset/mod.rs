//! Synthetic correlated multi-task image benchmark.
//!
//! Each sample is a small RGB "tissue" image with three ordinal labels
//! (steatosis 0–3, ballooning 0–2, inflammation 0–3). Labels are drawn
//! from a Gaussian copula so their pairwise correlation can be dialed
//! in, then the image is rendered to *show* what the labels say: white
//! vacuole disks for steatosis, large pale blobs for ballooning, dark
//! cell clusters for inflammation, all on a textured pink background.
//!
//! Discretizing a latent Gaussian attenuates correlation, so the latent
//! correlation is pre-amplified per pair (first-order polyserial
//! correction) to make the *label* correlation land on the target.

pub mod augment;
pub mod corr;
mod io;

pub use augment::{augment_8fold, dihedral, random_flip};
pub use corr::{correlation_matrix, CorrKind};
pub use io::{load, save};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::task::Task;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// All images are RGB.
pub const CHANNELS: usize = 3;

/// The three ordinal grades of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub steatosis: u8,
    pub ballooning: u8,
    pub inflammation: u8,
}

impl Labels {
    pub fn new(steatosis: u8, ballooning: u8, inflammation: u8) -> Result<Self> {
        let l = Labels {
            steatosis,
            ballooning,
            inflammation,
        };
        for task in Task::ALL {
            if l.get(task) >= task.class_count() {
                return Err(Error::input(format!(
                    "{task} grade {} out of range 0..{}",
                    l.get(task),
                    task.class_count()
                )));
            }
        }
        Ok(l)
    }

    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Steatosis => self.steatosis as usize,
            Task::Ballooning => self.ballooning as usize,
            Task::Inflammation => self.inflammation as usize,
        }
    }

    pub fn as_array(&self) -> [u8; 3] {
        [self.steatosis, self.ballooning, self.inflammation]
    }

    pub fn from_array(a: [u8; 3]) -> Result<Self> {
        Labels::new(a[0], a[1], a[2])
    }
}

/// One image with its labels and the latent severity that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskSample {
    /// Row-major `size x size x 3`, values in `[0,1]`.
    pub image: Vec<f32>,
    pub labels: Labels,
    /// Overall disease progression in `[0,1]`; kept for analysis only.
    pub severity: f64,
}

/// Generator parameters; serializable so a dataset records its origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub image_size: usize,
    /// Target Pearson correlation of the *labels*, unit diagonal.
    pub target_corr: [[f64; 3]; 3],
    /// Class priors per task, in task order; each sums to 1.
    pub class_priors: [Vec<f64>; 3],
    /// Background texture amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_samples: 3000,
            image_size: 32,
            target_corr: equicorrelated(0.6),
            class_priors: [
                vec![0.35, 0.30, 0.20, 0.15],
                vec![0.50, 0.30, 0.20],
                vec![0.40, 0.30, 0.20, 0.10],
            ],
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Correlation matrix with a constant off-diagonal value.
pub fn equicorrelated(rho: f64) -> [[f64; 3]; 3] {
    let mut m = [[rho; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size must be at least 8"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config(format!(
                "noise {} outside [0, 0.5]",
                self.noise
            )));
        }
        for (t, priors) in Task::ALL.iter().zip(&self.class_priors) {
            if priors.len() != t.class_count() {
                return Err(Error::config(format!(
                    "{t} needs {} class priors, got {}",
                    t.class_count(),
                    priors.len()
                )));
            }
            if priors.iter().any(|&p| p < 0.0) {
                return Err(Error::config(format!(
                    "{t} priors contain a negative entry"
                )));
            }
            let sum: f64 = priors.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "{t} priors sum to {sum}, expected 1"
                )));
            }
        }
        for i in 0..3 {
            if (self.target_corr[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::config("target_corr diagonal must be 1"));
            }
            for j in 0..3 {
                let v = self.target_corr[i][j];
                if (v - self.target_corr[j][i]).abs() > 1e-12 {
                    return Err(Error::config("target_corr must be symmetric"));
                }
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::config(format!(
                        "target_corr entry {v} outside [-1,1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub samples: Vec<MultiTaskSample>,
    pub config: GeneratorConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Labels as per-task f64 columns, in task order.
    pub fn label_columns(&self) -> [Vec<f64>; 3] {
        let col = |task: Task| {
            self.samples
                .iter()
                .map(|s| s.labels.get(task) as f64)
                .collect::<Vec<f64>>()
        };
        [
            col(Task::Steatosis),
            col(Task::Ballooning),
            col(Task::Inflammation),
        ]
    }
}

// ── copula machinery ─────────────────────────────────────────────────

/// Per-task discretization derived from class priors.
struct TaskBins {
    /// Latent thresholds; grade = number of thresholds below the latent.
    thresholds: Vec<f64>,
    /// Cumulative priors including 0 and 1 at the ends.
    cum: Vec<f64>,
    /// Correlation attenuation factor of the discretization.
    atten: f64,
}

fn task_bins(priors: &[f64], norm: &Normal) -> TaskBins {
    let mut cum = vec![0.0];
    let mut acc = 0.0;
    for &p in priors {
        acc += p;
        cum.push(acc.min(1.0));
    }
    *cum.last_mut().unwrap() = 1.0;
    let thresholds: Vec<f64> = cum[1..cum.len() - 1]
        .iter()
        .map(|&c| {
            if c <= 0.0 {
                f64::NEG_INFINITY
            } else if c >= 1.0 {
                f64::INFINITY
            } else {
                norm.inverse_cdf(c)
            }
        })
        .collect();
    // E[grade] and Var[grade] under the priors
    let mean: f64 = priors.iter().enumerate().map(|(k, &p)| p * k as f64).sum();
    let var: f64 = priors
        .iter()
        .enumerate()
        .map(|(k, &p)| p * (k as f64 - mean).powi(2))
        .sum();
    // first-order: Corr(grade_i, grade_j) ~= rho * atten_i * atten_j
    let phi_sum: f64 = thresholds
        .iter()
        .filter(|t| t.is_finite())
        .map(|&t| norm.pdf(t))
        .sum();
    let atten = if var > 1e-12 {
        phi_sum / var.sqrt()
    } else {
        1.0
    };
    TaskBins {
        thresholds,
        cum,
        atten,
    }
}

impl TaskBins {
    fn grade(&self, g: f64) -> usize {
        self.thresholds.iter().filter(|&&t| g > t).count()
    }

    /// Position of the latent inside its grade's probability bin, in [0,1).
    fn bin_position(&self, g: f64, grade: usize, norm: &Normal) -> f64 {
        let u = norm.cdf(g);
        let lo = self.cum[grade];
        let hi = self.cum[grade + 1];
        if hi - lo <= 1e-12 {
            return 0.5;
        }
        ((u - lo) / (hi - lo)).clamp(0.0, 0.999_999)
    }
}

/// Draw the full benchmark. Deterministic given `cfg.seed`; each sample
/// uses its own derived RNG streams, so the result does not depend on
/// evaluation order.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let norm = Normal::new(0.0, 1.0).expect("standard normal");
    let bins: Vec<TaskBins> = cfg
        .class_priors
        .iter()
        .map(|p| task_bins(p, &norm))
        .collect();

    // compensate discretization attenuation, then factor
    let mut latent = [[0.0f64; 3]; 3];
    for i in 0..3 {
        latent[i][i] = 1.0;
        for j in 0..3 {
            if i == j {
                continue;
            }
            let denom = bins[i].atten * bins[j].atten;
            let target = cfg.target_corr[i][j];
            if target != 0.0 && denom <= 1e-9 {
                return Err(Error::config(format!(
                    "target correlation {target} between degenerate tasks {i} and {j} is infeasible"
                )));
            }
            let adj = if denom <= 1e-9 { 0.0 } else { target / denom };
            if adj.abs() > 0.999 {
                return Err(Error::config(format!(
                    "target correlation {target} needs latent correlation {adj:.3} after \
                     attenuation compensation; infeasible"
                )));
            }
            latent[i][j] = adj;
        }
    }
    let flat: Vec<f64> = latent.iter().flatten().copied().collect();
    let chol = corr::cholesky(3, &flat)
        .ok_or_else(|| Error::config("compensated correlation matrix is not positive definite"))?;
    let total_var: f64 = flat.iter().sum();

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for idx in 0..cfg.n_samples {
        let mut lat_rng = stream(cfg.seed, "latent", idx as u64);
        let u: [f64; 3] = std::array::from_fn(|_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut lat_rng)
        });
        let mut g = [0.0f64; 3];
        for i in 0..3 {
            for j in 0..=i {
                g[i] += chol[i * 3 + j] * u[j];
            }
        }
        let severity = norm.cdf(g.iter().sum::<f64>() / total_var.sqrt());

        let mut grades = [0usize; 3];
        let mut positions = [0.0f64; 3];
        for t in 0..3 {
            grades[t] = bins[t].grade(g[t]);
            positions[t] = bins[t].bin_position(g[t], grades[t], &norm);
        }
        let labels = Labels::new(grades[0] as u8, grades[1] as u8, grades[2] as u8)?;

        let counts = StructureCounts::from_grades(&labels, &positions);
        let mut render_rng = stream(cfg.seed, "render", idx as u64);
        let image = render(cfg.image_size, &counts, cfg.noise, &mut render_rng);
        samples.push(MultiTaskSample {
            image,
            labels,
            severity,
        });
    }

    Ok(Dataset {
        image_size: cfg.image_size,
        samples,
        config: cfg.clone(),
    })
}

// ── rendering ────────────────────────────────────────────────────────

/// How many of each structure to draw; derived from grade and the
/// latent's position within the grade bin so severity varies smoothly
/// inside a grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructureCounts {
    /// White vacuole disks. Grade cutoffs follow nominal (overlap-
    /// ignoring) area coverage of <5 / 5–33 / 34–66 / >66 %.
    pub disks: usize,
    /// Large pale ballooned-cell blobs: none / few / numerous.
    pub blobs: usize,
    /// Dark inflammatory foci: 0 / <2 / 2–4 / >4.
    pub foci: usize,
}

impl StructureCounts {
    pub fn from_grades(labels: &Labels, positions: &[f64; 3]) -> Self {
        let lerp = |lo: usize, hi: usize, pos: f64| -> usize {
            lo + ((hi - lo) as f64 * pos).round() as usize
        };
        let disks = match labels.steatosis {
            0 => lerp(0, 5, positions[0]),
            1 => lerp(7, 41, positions[0]),
            2 => lerp(43, 83, positions[0]),
            _ => lerp(85, 110, positions[0]),
        };
        let blobs = match labels.ballooning {
            0 => 0,
            1 => lerp(1, 2, positions[1]),
            _ => lerp(4, 7, positions[1]),
        };
        let foci = match labels.inflammation {
            0 => 0,
            1 => 1,
            2 => lerp(2, 4, positions[2]),
            _ => lerp(5, 8, positions[2]),
        };
        StructureCounts { disks, blobs, foci }
    }
}

fn blend(img: &mut [f32], size: usize, x: usize, y: usize, color: [f32; 3], alpha: f32) {
    let base = (y * size + x) * CHANNELS;
    for c in 0..CHANNELS {
        img[base + c] = img[base + c] * (1.0 - alpha) + color[c] * alpha;
    }
}

fn draw_disk(
    img: &mut [f32],
    size: usize,
    center: (f64, f64),
    radius: f64,
    color: [f32; 3],
    alpha: f32,
    soft: f64,
) {
    let (cx, cy) = center;
    let lo_x = (cx - radius - soft).floor().max(0.0) as usize;
    let hi_x = ((cx + radius + soft).ceil() as usize).min(size - 1);
    let lo_y = (cy - radius - soft).floor().max(0.0) as usize;
    let hi_y = ((cy + radius + soft).ceil() as usize).min(size - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let edge = if d <= radius - soft {
                1.0
            } else if d <= radius + soft {
                ((radius + soft - d) / (2.0 * soft)) as f32
            } else {
                continue;
            };
            blend(img, size, x, y, color, alpha * edge);
        }
    }
}

/// Paint one sample. Public so tests and tooling can render directly
/// from labels without going through the copula.
pub fn render<R: Rng + ?Sized>(
    size: usize,
    counts: &StructureCounts,
    noise: f64,
    rng: &mut R,
) -> Vec<f32> {
    let mut img = vec![0.0f32; size * size * CHANNELS];
    // textured H&E-ish background: base pink + grating + white noise
    let base = [0.84f32, 0.66, 0.76];
    let fx: f64 = rng.gen_range(0.5..2.0);
    let fy: f64 = rng.gen_range(0.5..2.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let grating = (std::f64::consts::TAU
                * (fx * x as f64 / size as f64 + fy * y as f64 / size as f64)
                + phase)
                .sin();
            let jitter: f64 = rng.gen_range(-1.0..1.0);
            let v = (noise * (0.6 * grating + jitter)) as f32;
            let p = (y * size + x) * CHANNELS;
            img[p] = base[0] + v;
            img[p + 1] = base[1] + 0.8 * v;
            img[p + 2] = base[2] + v;
        }
    }
    // pale ballooned cells under everything else
    for _ in 0..counts.blobs {
        let cx = rng.gen_range(3.0..size as f64 - 3.0);
        let cy = rng.gen_range(3.0..size as f64 - 3.0);
        let r = rng.gen_range(3.0..4.5);
        draw_disk(&mut img, size, (cx, cy), r, [0.93, 0.87, 0.91], 0.75, 1.0);
    }
    // white steatosis vacuoles
    for _ in 0..counts.disks {
        let cx = rng.gen_range(1.0..size as f64 - 1.0);
        let cy = rng.gen_range(1.0..size as f64 - 1.0);
        let r = rng.gen_range(1.2..2.0);
        draw_disk(&mut img, size, (cx, cy), r, [0.98, 0.97, 0.985], 0.95, 0.5);
    }
    // dark inflammatory cell clusters on top
    for _ in 0..counts.foci {
        let cx = rng.gen_range(2.5..size as f64 - 2.5);
        let cy = rng.gen_range(2.5..size as f64 - 2.5);
        let cells = rng.gen_range(3..6);
        for _ in 0..cells {
            let dx: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let dy: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let x = (cx + 1.2 * dx).clamp(0.0, size as f64 - 1.0);
            let y = (cy + 1.2 * dy).clamp(0.0, size as f64 - 1.0);
            let r = rng.gen_range(0.7..1.2);
            draw_disk(&mut img, size, (x, y), r, [0.30, 0.18, 0.42], 0.9, 0.5);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_priors_and_corr() {
        let mut cfg = GeneratorConfig::default();
        cfg.class_priors[1] = vec![0.5, 0.5]; // ballooning needs 3
        assert!(cfg.validate().is_err());

        let mut cfg = GeneratorConfig::default();
        cfg.class_priors[0] = vec![0.5, 0.5, 0.25, -0.25];
        assert!(cfg.validate().is_err());

        let mut cfg = GeneratorConfig::default();
        cfg.target_corr[0][1] = 0.3; // asymmetric
        assert!(cfg.validate().is_err());

        let mut cfg = GeneratorConfig::default();
        cfg.target_corr[2][2] = 0.9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn infeasible_target_correlation_is_rejected() {
        // 0.95 label correlation is unreachable once discretization
        // attenuation is compensated
        let cfg = GeneratorConfig {
            target_corr: equicorrelated(0.95),
            n_samples: 10,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig {
            n_samples: 20,
            ..GeneratorConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_respect_ranges_and_image_values_bounded() {
        let cfg = GeneratorConfig {
            n_samples: 200,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for s in &ds.samples {
            assert!(s.labels.steatosis <= 3);
            assert!(s.labels.ballooning <= 2);
            assert!(s.labels.inflammation <= 3);
            assert!((0.0..=1.0).contains(&s.severity));
            assert_eq!(s.image.len(), 32 * 32 * CHANNELS);
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_histograms_match_priors() {
        let cfg = GeneratorConfig {
            n_samples: 3000,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let n = ds.len() as f64;
        for (t, task) in Task::ALL.iter().enumerate() {
            let mut hist = vec![0usize; task.class_count()];
            for s in &ds.samples {
                hist[s.labels.get(*task)] += 1;
            }
            for (k, &count) in hist.iter().enumerate() {
                let p = cfg.class_priors[t][k];
                let sigma = (n * p * (1.0 - p)).sqrt();
                let diff = (count as f64 - n * p).abs();
                assert!(
                    diff <= 3.0 * sigma,
                    "{task} class {k}: {count} vs expected {:.0} (3 sigma {:.0})",
                    n * p,
                    3.0 * sigma
                );
            }
        }
    }

    #[test]
    fn empirical_label_correlation_hits_target() {
        let cfg = GeneratorConfig {
            n_samples: 3000,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let cols = ds.label_columns();
        let m = correlation_matrix(&cols, CorrKind::Pearson).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &got) in row.iter().enumerate() {
                let target = cfg.target_corr[i][j];
                assert!(
                    (got - target).abs() <= 0.1,
                    "corr[{i}][{j}] = {got:.3}, target {target}"
                );
            }
        }
    }

    #[test]
    fn zero_grades_render_near_empty_image() {
        // degenerate latent: an extremely negative latent is below every
        // threshold, so all grades are 0 and nothing is drawn
        let norm = Normal::new(0.0, 1.0).unwrap();
        let bins = task_bins(&[0.35, 0.30, 0.20, 0.15], &norm);
        assert_eq!(bins.grade(-20.0), 0);

        let labels = Labels::new(0, 0, 0).unwrap();
        let counts = StructureCounts::from_grades(&labels, &[0.0; 3]);
        assert_eq!(
            counts,
            StructureCounts {
                disks: 0,
                blobs: 0,
                foci: 0
            }
        );
        let mut rng = stream(0, "render", 0);
        let img = render(32, &counts, 0.05, &mut rng);
        // background only: every pixel stays near the base color
        let base = [0.84f32, 0.66, 0.76];
        for (i, &v) in img.iter().enumerate() {
            assert!((v - base[i % 3]).abs() < 0.12, "pixel {i} = {v}");
        }
    }

    #[test]
    fn severe_grades_change_the_image_substantially() {
        let labels = Labels::new(3, 2, 3).unwrap();
        let counts = StructureCounts::from_grades(&labels, &[0.5; 3]);
        let mut rng = stream(0, "render", 1);
        let heavy = render(32, &counts, 0.05, &mut rng);
        let mut rng = stream(0, "render", 1);
        let empty = render(
            32,
            &StructureCounts {
                disks: 0,
                blobs: 0,
                foci: 0,
            },
            0.05,
            &mut rng,
        );
        let diff: f32 = heavy
            .iter()
            .zip(&empty)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / heavy.len() as f32;
        assert!(diff > 0.05, "mean abs pixel diff {diff}");
    }

    #[test]
    fn structure_counts_are_monotone_in_grade() {
        let pos = [0.5; 3];
        let mut last = 0;
        for grade in 0..4u8 {
            let labels = Labels::new(grade, 0, 0).unwrap();
            let c = StructureCounts::from_grades(&labels, &pos);
            assert!(
                grade == 0 || c.disks > last,
                "grade {grade}: {} <= {last}",
                c.disks
            );
            last = c.disks;
        }
    }

    #[test]
    fn labels_reject_out_of_range() {
        assert!(Labels::new(4, 0, 0).is_err());
        assert!(Labels::new(0, 3, 0).is_err());
        assert!(Labels::new(0, 0, 4).is_err());
        assert!(Labels::new(3, 2, 3).is_ok());
    }

    #[test]
    fn zero_prior_classes_are_never_drawn() {
        let cfg = GeneratorConfig {
            n_samples: 500,
            class_priors: [
                vec![0.5, 0.0, 0.0, 0.5],
                vec![1.0, 0.0, 0.0],
                vec![0.7, 0.3, 0.0, 0.0],
            ],
            target_corr: equicorrelated(0.0),
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for s in &ds.samples {
            assert!(s.labels.steatosis == 0 || s.labels.steatosis == 3);
            assert_eq!(s.labels.ballooning, 0);
            assert!(s.labels.inflammation <= 1);
        }
    }
}
