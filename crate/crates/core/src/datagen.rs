//! Synthetic cohort generation and the on-disk dataset container.
//!
//! Cohorts are generated subject-first: each subject gets a class, a set of
//! class-conditioned prototypes, and one sample per timepoint with mild
//! longitudinal drift. Raw volumes/networks/stat pairs are pushed through the
//! full fusion pipeline so generated features follow the same contracts as
//! real inputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{
    fuse_sample, BrainTemplate, FusedMatrix, RoiNetwork, RoiStatPair, VoxelVolume,
};

const MAGIC: &[u8; 4] = b"DWDS";
const VERSION: u32 = 1;

/// Shape and signal parameters for a synthetic cohort.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub subjects: usize,
    pub classes: usize,
    /// Per-class share of subjects; must sum to 1.
    pub class_proportions: Vec<f64>,
    pub roi_count: usize,
    pub timepoints: usize,
    /// Number of connectivity networks per sample.
    pub networks: usize,
    /// Number of metric volumes per sample.
    pub volumes: usize,
    /// Strength of the class-conditioned shifts in all modalities.
    pub signal: f64,
    /// Standard deviation of the (clamped) Gaussian measurement noise.
    pub noise: f64,
    /// Mixing weight of the class prototype in the phenotype vector.
    pub phenotype_mix: f64,
    pub phenotype_dim: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            subjects: 39,
            classes: 3,
            // 8 : 3 : 2 per 13 subjects
            class_proportions: vec![8.0 / 13.0, 3.0 / 13.0, 2.0 / 13.0],
            roi_count: 16,
            timepoints: 3,
            networks: 3,
            volumes: 2,
            signal: 0.6,
            noise: 0.05,
            phenotype_mix: 0.8,
            phenotype_dim: 6,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.class_proportions.len() != self.classes {
            return Err(Error::Config(
                "class_proportions length must equal classes (>= 2)".into(),
            ));
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_proportions.iter().any(|p| *p <= 0.0) {
            return Err(Error::Config(
                "class_proportions must be positive and sum to 1".into(),
            ));
        }
        if self.subjects < self.classes {
            return Err(Error::Config("need at least one subject per class".into()));
        }
        if self.roi_count < 2 || self.timepoints == 0 || self.networks == 0 || self.volumes == 0 {
            return Err(Error::Config("degenerate cohort shape".into()));
        }
        if !(0.0..=1.0).contains(&self.signal)
            || !(0.0..=1.0).contains(&self.phenotype_mix)
            || self.noise < 0.0
        {
            return Err(Error::Config(
                "signal and phenotype_mix must lie in [0,1], noise must be >= 0".into(),
            ));
        }
        if self.phenotype_dim == 0 {
            return Err(Error::Config("phenotype_dim must be positive".into()));
        }
        Ok(())
    }

    /// Fused feature columns per ROI for this shape.
    pub fn feature_dim(&self) -> usize {
        1 + self.networks + 3 * self.volumes
    }

    /// Subject counts per class: largest-remainder split of `subjects`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = self
            .class_proportions
            .iter()
            .map(|p| (p * self.subjects as f64).floor() as usize)
            .collect();
        let mut rem: Vec<(usize, f64)> = self
            .class_proportions
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p * self.subjects as f64 - counts[i] as f64))
            .collect();
        rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut short = self.subjects - counts.iter().sum::<usize>();
        for (i, _) in rem {
            if short == 0 {
                break;
            }
            counts[i] += 1;
            short -= 1;
        }
        counts
    }
}

/// One fused sample with its grouping keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject: usize,
    pub timepoint: usize,
    pub label: usize,
    pub features: FusedMatrix,
    pub phenotype: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: CohortSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn phenotype_rows(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.phenotype.clone()).collect()
    }
}

/// Normal draw clamped to three standard deviations.
fn clamped_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    (z * std).clamp(-3.0 * std, 3.0 * std)
}

struct ClassPrototypes {
    /// Per class, per ROI: baseline voxel intensity offset in [0, 1].
    volume: Vec<Vec<f64>>,
    /// Per class, per ROI: surface-to-voxel ratio target in (0, 1).
    ratio: Vec<Vec<f64>>,
    /// Per class, per network: symmetric connectivity prototype.
    network: Vec<Vec<Vec<f64>>>,
    /// Per class: phenotype prototype.
    phenotype: Vec<Vec<f64>>,
}

fn draw_prototypes(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> ClassPrototypes {
    let r = spec.roi_count;
    let mut volume = Vec::with_capacity(spec.classes);
    let mut ratio = Vec::with_capacity(spec.classes);
    let mut network = Vec::with_capacity(spec.classes);
    let mut phenotype = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        volume.push((0..r).map(|_| rng.gen_range(0.0..1.0)).collect());
        ratio.push((0..r).map(|_| rng.gen_range(0.2..0.8)).collect());
        let mut nets = Vec::with_capacity(spec.networks);
        for _ in 0..spec.networks {
            let mut m = vec![0.0; r * r];
            for i in 0..r {
                for j in i..r {
                    let v = rng.gen_range(0.0..1.0);
                    m[i * r + j] = v;
                    m[j * r + i] = v;
                }
            }
            nets.push(m);
        }
        network.push(nets);
        phenotype.push((0..spec.phenotype_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    ClassPrototypes {
        volume,
        ratio,
        network,
        phenotype,
    }
}

/// Generate a full synthetic cohort deterministically from `seed`.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = draw_prototypes(spec, &mut rng);
    let counts = spec.class_counts();
    let r = spec.roi_count;

    // template: ROI r+1 occupies the x = r slab of an R x 3 x 3 grid
    let dims = (r, 3, 3);
    let mut labels = Vec::with_capacity(r * 9);
    for roi in 0..r {
        labels.extend(std::iter::repeat((roi + 1) as u32).take(9));
    }
    let tpl = BrainTemplate::new(dims, labels, r)?;

    let mut samples = Vec::with_capacity(spec.subjects * spec.timepoints);
    let mut subject = 0usize;
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            // subject-level deviations from the class prototypes
            let vol_dev: Vec<f64> = (0..r).map(|_| clamped_normal(&mut rng, spec.noise)).collect();
            let ratio_dev: Vec<f64> =
                (0..r).map(|_| clamped_normal(&mut rng, spec.noise)).collect();
            let phen: Vec<f64> = protos.phenotype[class]
                .iter()
                .map(|p| {
                    spec.phenotype_mix * p
                        + (1.0 - spec.phenotype_mix) * rng.gen_range(-1.0..1.0)
                })
                .collect();
            for t in 0..spec.timepoints {
                let drift = 0.02 * t as f64;
                let sig = spec.signal;

                let mut volumes = Vec::with_capacity(spec.volumes);
                for v in 0..spec.volumes {
                    let mut weights = Vec::with_capacity(r * 9);
                    for roi in 0..r {
                        let base = 0.3
                            + sig * protos.volume[class][roi]
                            + vol_dev[roi]
                            + drift * (v as f64 + 1.0) * 0.5;
                        for _ in 0..9 {
                            weights
                                .push((base + clamped_normal(&mut rng, spec.noise)).max(0.0));
                        }
                    }
                    volumes.push(VoxelVolume::new(dims, weights)?);
                }

                let mut surface = Vec::with_capacity(r);
                let mut voxel = Vec::with_capacity(r);
                for roi in 0..r {
                    let vx = 10.0 + 5.0 * protos.volume[class][roi]
                        + clamped_normal(&mut rng, spec.noise * 10.0).abs();
                    let frac = (0.5 + sig * (protos.ratio[class][roi] - 0.5)
                        + ratio_dev[roi]
                        + drift)
                        .clamp(0.05, 1.0);
                    voxel.push(vx);
                    surface.push(vx * frac);
                }
                let stats = RoiStatPair { surface, voxel };

                let mut networks = Vec::with_capacity(spec.networks);
                for n in 0..spec.networks {
                    let proto = &protos.network[class][n];
                    let mut m = vec![0.0; r * r];
                    for i in 0..r {
                        for j in i..r {
                            let noise = clamped_normal(&mut rng, spec.noise);
                            let v = (sig * proto[i * r + j]
                                + (1.0 - sig) * 0.5
                                + noise
                                + drift)
                                .max(0.0);
                            m[i * r + j] = v;
                            m[j * r + i] = v;
                        }
                    }
                    networks.push(RoiNetwork::new(r, m)?);
                }

                let features = fuse_sample(&stats, &networks, &volumes, &tpl)?;
                samples.push(Sample {
                    subject,
                    timepoint: t,
                    label: class,
                    features,
                    phenotype: phen.clone(),
                });
            }
            subject += 1;
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    spec: CohortSpec,
    seed: u64,
    samples: usize,
    rows: usize,
    cols: usize,
    phenotype_dim: usize,
    column_names: Vec<String>,
}

/// Serialize a dataset: magic, version, JSON manifest, then fixed-width
/// little-endian records. Round-trips bit-exactly.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::Data("refusing to write an empty dataset".into()))?;
    let manifest = Manifest {
        spec: ds.spec.clone(),
        seed: ds.seed,
        samples: ds.samples.len(),
        rows: first.features.rows,
        cols: first.features.cols,
        phenotype_dim: first.phenotype.len(),
        column_names: first.features.column_names.clone(),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(mjson.len() as u64).to_le_bytes())?;
    f.write_all(&mjson)?;
    for s in &ds.samples {
        if s.features.rows != manifest.rows
            || s.features.cols != manifest.cols
            || s.phenotype.len() != manifest.phenotype_dim
        {
            return Err(Error::Data("ragged sample shapes in dataset".into()));
        }
        f.write_all(&(s.subject as u64).to_le_bytes())?;
        f.write_all(&(s.timepoint as u64).to_le_bytes())?;
        f.write_all(&(s.label as u64).to_le_bytes())?;
        for v in &s.features.values {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in &s.phenotype {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_exact_named(f: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    f.read_exact(buf)
        .map_err(|e| Error::Data(format!("dataset truncated while reading {what}: {e}")))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_named(&mut f, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Data("not a dataset file (bad magic)".into()));
    }
    let mut u32b = [0u8; 4];
    read_exact_named(&mut f, &mut u32b, "version")?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset version {version}, expected {VERSION}"
        )));
    }
    let mut u64b = [0u8; 8];
    read_exact_named(&mut f, &mut u64b, "manifest length")?;
    let mlen = u64::from_le_bytes(u64b) as usize;
    let mut mjson = vec![0u8; mlen];
    read_exact_named(&mut f, &mut mjson, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&mjson)?;

    let mut samples = Vec::with_capacity(manifest.samples);
    let mut f64b = [0u8; 8];
    for i in 0..manifest.samples {
        let mut header = [0u64; 3];
        for (h, what) in header.iter_mut().zip(["subject", "timepoint", "label"]) {
            read_exact_named(&mut f, &mut u64b, &format!("sample {i} {what}"))?;
            *h = u64::from_le_bytes(u64b);
        }
        let mut values = Vec::with_capacity(manifest.rows * manifest.cols);
        for _ in 0..manifest.rows * manifest.cols {
            read_exact_named(&mut f, &mut f64b, &format!("sample {i} features"))?;
            values.push(f64::from_le_bytes(f64b));
        }
        let mut phenotype = Vec::with_capacity(manifest.phenotype_dim);
        for _ in 0..manifest.phenotype_dim {
            read_exact_named(&mut f, &mut f64b, &format!("sample {i} phenotype"))?;
            phenotype.push(f64::from_le_bytes(f64b));
        }
        samples.push(Sample {
            subject: header[0] as usize,
            timepoint: header[1] as usize,
            label: header[2] as usize,
            features: FusedMatrix {
                rows: manifest.rows,
                cols: manifest.cols,
                values,
                column_names: manifest.column_names.clone(),
            },
            phenotype,
        });
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Data(format!(
            "dataset has {} trailing bytes after the last sample",
            rest.len()
        )));
    }
    Ok(Dataset {
        spec: manifest.spec,
        seed: manifest.seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CohortSpec {
        CohortSpec {
            subjects: 13,
            roi_count: 6,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn class_counts_largest_remainder() {
        let spec = CohortSpec::default();
        assert_eq!(spec.class_counts(), vec![24, 9, 6]);
        let spec = small_spec();
        assert_eq!(spec.class_counts(), vec![8, 3, 2]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_cohort(&spec, 231).unwrap();
        let b = generate_cohort(&spec, 231).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x, y);
        }
        let c = generate_cohort(&spec, 232).unwrap();
        assert_ne!(a.samples[0].features.values, c.samples[0].features.values);
    }

    #[test]
    fn shapes_and_label_invariants() {
        let spec = small_spec();
        let ds = generate_cohort(&spec, 7).unwrap();
        assert_eq!(ds.samples.len(), 13 * 3);
        let f = spec.feature_dim();
        let mut label_of_subject = std::collections::HashMap::new();
        for s in &ds.samples {
            assert_eq!(s.features.rows, spec.roi_count);
            assert_eq!(s.features.cols, f);
            assert_eq!(s.phenotype.len(), spec.phenotype_dim);
            assert!(s.features.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let prev = label_of_subject.insert(s.subject, s.label);
            if let Some(l) = prev {
                assert_eq!(l, s.label, "label changed across timepoints");
            }
        }
        // class sizes over subjects
        let mut counts = vec![0usize; spec.classes];
        for (_, l) in label_of_subject {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![8, 3, 2]);
    }

    #[test]
    fn phenotypes_cluster_by_class() {
        let spec = small_spec();
        let ds = generate_cohort(&spec, 11).unwrap();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut within = (0.0, 0usize);
        let mut between = (0.0, 0usize);
        for i in 0..ds.samples.len() {
            for j in (i + 1)..ds.samples.len() {
                let d = dist(&ds.samples[i].phenotype, &ds.samples[j].phenotype);
                if ds.samples[i].label == ds.samples[j].label {
                    within = (within.0 + d, within.1 + 1);
                } else {
                    between = (between.0 + d, between.1 + 1);
                }
            }
        }
        assert!(within.0 / (within.1 as f64) < between.0 / (between.1 as f64));
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.dws");
        let ds = generate_cohort(&small_spec(), 231).unwrap();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.seed, ds.seed);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(back.samples.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_dataset_names_the_missing_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.dws");
        let ds = generate_cohort(&small_spec(), 231).unwrap();
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        let err = read_dataset(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.dws");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = CohortSpec::default();
        spec.class_proportions = vec![0.5, 0.5];
        assert!(spec.validate().is_err());

        let mut spec = CohortSpec::default();
        spec.signal = 1.5;
        assert!(spec.validate().is_err());

        let mut spec = CohortSpec::default();
        spec.subjects = 2;
        assert!(spec.validate().is_err());
    }
}
