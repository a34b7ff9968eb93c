//! Synthetic ordered-stage phantoms with exact ground-truth maps.
//!
//! Each subject gets a smooth random anatomy (a sum of anisotropic Gaussian
//! blobs) and a small rigid offset applied to every lesion site. A stage-`s`
//! scan is `anatomy + Σ_sites delta_site[s]·sphere_site + noise`, min-max
//! normalized per volume. The ground-truth map from stage `s` to stage `t`
//! is the difference of the noise-free lesion fields, `field(t) - field(s)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::settings::{self, SettingError, Settings};
use crate::volume::{normalize_with_affine, voxel_count, ClassLabel, Grid3, IntensityAffine, Shape3, Volume};

/// A spherical lesion with one additive intensity change per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionSite {
    pub center: [f64; 3],
    pub radius: f64,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub k: usize,
    pub lesion_sites: Vec<LesionSite>,
    pub anatomy_seed: u64,
    /// Standard deviation of additive Gaussian noise. Raw anatomy spans
    /// roughly two intensity units, so this is close to normalized units.
    pub noise_sigma: f64,
    pub subject_count: usize,
    pub scans_per_subject: usize,
    /// Maximum per-axis integer offset (voxels) of a subject's lesion sites.
    pub site_jitter: usize,
    pub blobs_per_subject: usize,
}

impl PhantomSpec {
    /// 24³ volumes, two stages, 100 subjects, one scan per stage, noise 0.05.
    pub fn desk_default() -> Self {
        PhantomSpec {
            shape: [24, 24, 24],
            k: 2,
            lesion_sites: vec![
                LesionSite {
                    center: [9.0, 10.0, 8.0],
                    radius: 3.0,
                    deltas: vec![-0.15, -0.6],
                },
                LesionSite {
                    center: [14.0, 13.0, 15.0],
                    radius: 2.5,
                    deltas: vec![-0.1, -0.5],
                },
            ],
            anatomy_seed: 7,
            noise_sigma: 0.05,
            subject_count: 100,
            scans_per_subject: 1,
            site_jitter: 3,
            blobs_per_subject: 5,
        }
    }

    /// Default lesion layout with stage deltas interpolated for `k` stages.
    pub fn with_stages(mut self, k: usize) -> Self {
        self.k = k;
        for site in &mut self.lesion_sites {
            let (Some(&first), Some(&last)) = (site.deltas.first(), site.deltas.last()) else {
                continue;
            };
            site.deltas = (0..k)
                .map(|s| if k == 1 { first } else { first + (last - first) * s as f64 / (k - 1) as f64 })
                .collect();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::DegenerateK(self.k));
        }
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidShape(self.shape, "every extent must be positive"));
        }
        if self.subject_count == 0 || self.scans_per_subject == 0 {
            return Err(Error::InvalidPhantomSpec("need at least one subject and scan".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidPhantomSpec(format!("noise_sigma {}", self.noise_sigma)));
        }
        for (i, site) in self.lesion_sites.iter().enumerate() {
            if site.deltas.len() != self.k {
                return Err(Error::InvalidPhantomSpec(format!(
                    "lesion {i} has {} deltas for K = {}",
                    site.deltas.len(),
                    self.k
                )));
            }
            if site.deltas.windows(2).any(|w| w[1].abs() < w[0].abs()) {
                return Err(Error::InvalidPhantomSpec(format!(
                    "lesion {i} deltas {:?} shrink in magnitude with stage",
                    site.deltas
                )));
            }
            let reach = site.radius + self.site_jitter as f64;
            let fits = (0..3).all(|a| site.center[a] - reach >= 0.0 && site.center[a] + reach <= (self.shape[a] - 1) as f64);
            if !(site.radius > 0.0) || !fits {
                return Err(Error::LesionOutOfBounds(i));
            }
        }
        Ok(())
    }
}

impl Settings for PhantomSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<(), SettingError> {
        match key {
            "shape" => {
                let v: Vec<usize> = settings::parse_list(key, value, "three integers")?;
                self.shape = v
                    .try_into()
                    .map_err(|_| SettingError::Type(format!("{key}: expected three integers, found {value:?}")))?;
            }
            // re-interpolates the current lesion deltas for the new stage count
            "k" => *self = self.clone().with_stages(settings::parse(key, value, "an integer")?),
            "lesions" => {
                self.lesion_sites = value
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        let v: Vec<f64> = settings::parse_list(key, s, "cx,cy,cz,radius,delta...")?;
                        if v.len() < 5 {
                            return Err(SettingError::Type(format!("{key}: lesion {s:?} needs center, radius and deltas")));
                        }
                        Ok(LesionSite {
                            center: [v[0], v[1], v[2]],
                            radius: v[3],
                            deltas: v[4..].to_vec(),
                        })
                    })
                    .collect::<Result<_, _>>()?;
            }
            "anatomy_seed" => self.anatomy_seed = settings::parse(key, value, "an integer")?,
            "noise_sigma" => self.noise_sigma = settings::parse(key, value, "a real")?,
            "subject_count" => self.subject_count = settings::parse(key, value, "an integer")?,
            "scans_per_subject" => self.scans_per_subject = settings::parse(key, value, "an integer")?,
            "site_jitter" => self.site_jitter = settings::parse(key, value, "an integer")?,
            "blobs" => self.blobs_per_subject = settings::parse(key, value, "an integer")?,
            _ => return Err(SettingError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let lesions = self
            .lesion_sites
            .iter()
            .map(|l| {
                let mut v = l.center.to_vec();
                v.push(l.radius);
                v.extend(&l.deltas);
                settings::join(&v)
            })
            .collect::<Vec<_>>()
            .join(";");
        [
            ("shape", settings::join(&self.shape)),
            ("k", self.k.to_string()),
            ("lesions", lesions),
            ("anatomy_seed", self.anatomy_seed.to_string()),
            ("noise_sigma", format!("{:?}", self.noise_sigma)),
            ("subject_count", self.subject_count.to_string()),
            ("scans_per_subject", self.scans_per_subject.to_string()),
            ("site_jitter", self.site_jitter.to_string()),
            ("blobs", self.blobs_per_subject.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One generated scan with its exact ground truth.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub volume: Volume,
    pub label: ClassLabel,
    pub subject_id: usize,
    pub scan: usize,
    /// Pre-normalization volume.
    pub raw: Grid3,
    /// Normalization applied to `raw`.
    pub affine: IntensityAffine,
    /// Lesion centers after the subject offset.
    pub site_centers: Vec<[f64; 3]>,
    site_radii: Vec<f64>,
    gt_raw: Vec<Grid3>,
}

impl PhantomSample {
    /// Raw ground-truth difference field toward stage `target`.
    pub fn gt_map_to(&self, target: usize) -> &Grid3 {
        &self.gt_raw[target]
    }

    /// Ground truth in this sample's normalized intensity units.
    pub fn gt_map_normalized(&self, target: usize) -> Grid3 {
        self.gt_raw[target].scaled(self.affine.scale)
    }

    /// Label volume with region `i + 1` for lesion site `i` (later sites win
    /// on overlap), 0 elsewhere.
    pub fn atlas(&self) -> Vec<u32> {
        let shape = self.raw.shape();
        let mut labels = vec![0u32; voxel_count(shape)];
        for (i, (c, r)) in self.site_centers.iter().zip(&self.site_radii).enumerate() {
            for_each_in_sphere(shape, *c, *r, |idx| labels[idx] = i as u32 + 1);
        }
        labels
    }
}

fn for_each_in_sphere(shape: Shape3, center: [f64; 3], radius: f64, mut f: impl FnMut(usize)) {
    let r2 = radius * radius;
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let dist2 = (d as f64 - center[0]).powi(2) + (h as f64 - center[1]).powi(2) + (w as f64 - center[2]).powi(2);
                if dist2 <= r2 {
                    f((d * shape[1] + h) * shape[2] + w);
                }
            }
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

struct Subject {
    anatomy: Grid3,
    centers: Vec<[f64; 3]>,
}

fn make_subject(spec: &PhantomSpec, subject: usize) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.anatomy_seed, &[1, subject as u64]));
    let shape = spec.shape;
    struct Blob {
        c: [f64; 3],
        inv2s2: [f64; 3],
        amp: f64,
    }
    let blobs: Vec<Blob> = (0..spec.blobs_per_subject)
        .map(|_| {
            let mut c = [0.0; 3];
            let mut inv2s2 = [0.0; 3];
            for a in 0..3 {
                let n = shape[a] as f64;
                c[a] = rng.gen_range(0.3..0.7) * (n - 1.0);
                let s = rng.gen_range(0.15..0.3) * n;
                inv2s2[a] = 1.0 / (2.0 * s * s);
            }
            Blob {
                c,
                inv2s2,
                amp: rng.gen_range(0.35..0.7),
            }
        })
        .collect();
    let anatomy = Grid3::from_fn(shape, |d, h, w| {
        let p = [d as f64, h as f64, w as f64];
        -1.0 + blobs
            .iter()
            .map(|b| {
                let e: f64 = (0..3).map(|a| (p[a] - b.c[a]).powi(2) * b.inv2s2[a]).sum();
                b.amp * (-e).exp()
            })
            .sum::<f64>()
    });
    let j = spec.site_jitter as i64;
    let offset: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-j..=j) as f64);
    let centers = spec
        .lesion_sites
        .iter()
        .map(|s| std::array::from_fn(|a| s.center[a] + offset[a]))
        .collect();
    Subject { anatomy, centers }
}

fn lesion_field(spec: &PhantomSpec, centers: &[[f64; 3]], stage: usize) -> Grid3 {
    let mut field = Grid3::zeros(spec.shape);
    for (site, c) in spec.lesion_sites.iter().zip(centers) {
        let delta = site.deltas[stage];
        let data = field.data_mut();
        for_each_in_sphere(spec.shape, *c, site.radius, |i| data[i] += delta);
    }
    field
}

/// Generates `subject_count × k × scans_per_subject` samples, ordered by
/// subject, then stage, then scan. Output depends only on `spec`.
pub fn generate_dataset(spec: &PhantomSpec) -> Result<Vec<PhantomSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.subject_count * spec.k * spec.scans_per_subject);
    for subject in 0..spec.subject_count {
        let subj = make_subject(spec, subject);
        let fields: Vec<Grid3> = (0..spec.k).map(|s| lesion_field(spec, &subj.centers, s)).collect();
        for stage in 0..spec.k {
            let gt_raw: Vec<Grid3> = (0..spec.k).map(|t| fields[t].sub(&fields[stage])).collect::<Result<_>>()?;
            let clean = subj.anatomy.add(&fields[stage])?;
            for scan in 0..spec.scans_per_subject {
                let mut raw = clean.clone();
                if spec.noise_sigma > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        spec.anatomy_seed,
                        &[2, subject as u64, stage as u64, scan as u64],
                    ));
                    let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
                    for v in raw.data_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
                let (volume, affine) = normalize_with_affine(&raw)?;
                out.push(PhantomSample {
                    volume,
                    label: ClassLabel::new(stage, spec.k)?,
                    subject_id: subject,
                    scan,
                    raw,
                    affine,
                    site_centers: subj.centers.clone(),
                    site_radii: spec.lesion_sites.iter().map(|s| s.radius).collect(),
                    gt_raw: gt_raw.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Index sets of a subject-disjoint split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions item indices by subject. Subject counts per split are
/// `round(f_train·n)`, `round(f_val·n)` and the remainder; subjects are
/// assigned after a seeded shuffle.
pub fn split_by_subject(subject_ids: &[usize], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(fractions));
    }
    let mut subjects: Vec<usize> = subject_ids.to_vec();
    subjects.sort_unstable();
    subjects.dedup();
    let n = subjects.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::TooFewSubjects { subjects: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    subjects.shuffle(&mut rng);
    let which = |s: usize| {
        let pos = subjects.iter().position(|&x| x == s).expect("known subject");
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, &s) in subject_ids.iter().enumerate() {
        match which(s) {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    Ok(split)
}
