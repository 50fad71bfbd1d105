//! Synthetic multi-domain benchmark.
//!
//! Anatomy is shared structure: nested smooth blobs in a 2.5-D volume (stacks
//! of correlated slices), labeled so class k+1 sits strictly inside class k.
//! A domain is an intensity rendering of that anatomy (gamma, contrast,
//! brightness, multiplicative bias field, noise). The benchmark materializes
//! one source domain with train/val/test splits and any number of test-only
//! target domains.
//!
//! Everything is derived from the manifest seed; regenerating with the same
//! config is byte-identical.

use crate::error::{Result, SdsegError};
use crate::seeding::derive_indexed_rng;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Intensity-rendering parameters of one domain.
///
/// `tissue_intensities[c]` is the mean intensity of label class c. The
/// identity style (gamma=1, contrast=1, zero bias/amplitude/noise) reproduces
/// the tissue template bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain_id: String,
    pub gamma: f64,
    pub contrast: f64,
    pub brightness_bias: f64,
    pub bias_field_amplitude: f64,
    pub noise_sigma: f64,
    pub tissue_intensities: Vec<f64>,
}

/// Default per-class template intensities: background dark, foreground
/// classes spread towards bright.
pub fn default_tissue_intensities(num_classes: usize) -> Vec<f64> {
    (0..num_classes)
        .map(|c| 0.2 + 0.65 * c as f64 / (num_classes - 1).max(1) as f64)
        .collect()
}

impl DomainStyle {
    pub fn identity(num_classes: usize) -> Self {
        DomainStyle {
            domain_id: "identity".into(),
            gamma: 1.0,
            contrast: 1.0,
            brightness_bias: 0.0,
            bias_field_amplitude: 0.0,
            noise_sigma: 0.0,
            tissue_intensities: default_tissue_intensities(num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 || self.contrast <= 0.0 {
            return Err(SdsegError::Config(format!(
                "style `{}`: gamma and contrast must be positive",
                self.domain_id
            )));
        }
        if self.bias_field_amplitude < 0.0 || self.bias_field_amplitude > 1.0 {
            return Err(SdsegError::Config(format!(
                "style `{}`: bias_field_amplitude must be in [0,1]",
                self.domain_id
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(SdsegError::Config(format!(
                "style `{}`: noise_sigma must be nonnegative",
                self.domain_id
            )));
        }
        if self
            .tissue_intensities
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(SdsegError::Config(format!(
                "style `{}`: tissue intensities must lie in [0,1]",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// Named style presets. "source" is mild; the others are shifted acquisition
/// conditions: "lowfield" has a strong bias field with elevated noise and
/// slight dimming, "bright" renders tissue hotter with overdriven gain that
/// saturates the top of the range, "lowcontrast" is washed out.
pub fn style_preset(name: &str, num_classes: usize) -> Result<DomainStyle> {
    let tissue = default_tissue_intensities(num_classes);
    let mk = |id: &str, gamma, contrast, brightness, amp, sigma| DomainStyle {
        domain_id: id.into(),
        gamma,
        contrast,
        brightness_bias: brightness,
        bias_field_amplitude: amp,
        noise_sigma: sigma,
        tissue_intensities: tissue.clone(),
    };
    match name {
        "source" => Ok(mk("source", 1.0, 1.0, 0.0, 0.05, 0.02)),
        "lowfield" => Ok(mk("lowfield", 1.0, 1.0, -0.04, 0.45, 0.07)),
        "bright" => Ok(mk("bright", 1.0, 1.65, 0.05, 0.10, 0.05)),
        "lowcontrast" => Ok(mk("lowcontrast", 1.02, 0.85, 0.0, 0.12, 0.05)),
        other => Err(SdsegError::Config(format!(
            "unknown style preset `{other}` (known: source, lowfield, bright, lowcontrast)"
        ))),
    }
}

/// One synthetic patient: label volume plus the unstyled tissue template.
#[derive(Debug, Clone, PartialEq)]
pub struct AnatomySample {
    pub volume: Array3<f64>,
    pub labels: Array3<u8>,
    pub sample_id: String,
}

/// Three adjacent slices as channels plus the center slice's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub window: Array3<f64>,
    pub center_label: Array2<u8>,
    pub source_sample: String,
    pub center_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub style: DomainStyle,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub paired_anatomy: bool,
    pub source: DomainEntry,
    pub targets: Vec<DomainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_source_samples: usize,
    pub num_target_samples: usize,
    pub source_style: DomainStyle,
    pub target_styles: Vec<DomainStyle>,
    /// When true, target domain i re-renders source anatomy i instead of a
    /// fresh patient (isolates the style shift for disentanglement checks).
    pub paired_anatomy: bool,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let k = 3;
        BenchmarkConfig {
            depth: 8,
            height: 32,
            width: 32,
            num_classes: k,
            num_source_samples: 20,
            num_target_samples: 10,
            source_style: style_preset("source", k).unwrap(),
            target_styles: vec![
                style_preset("lowfield", k).unwrap(),
                style_preset("bright", k).unwrap(),
                style_preset("lowcontrast", k).unwrap(),
            ],
            paired_anatomy: false,
            seed: 101,
        }
    }
}

struct Bump {
    cz: f64,
    cy: f64,
    cx: f64,
    sz: f64,
    su: f64,
    sv: f64,
    theta: f64,
    amp: f64,
}

const ANATOMY_MAX_RETRIES: usize = 32;
const FG_FRACTION_BOUNDS: (f64, f64) = (0.03, 0.40);

/// Random nested-blob anatomy. Labels come from thresholding a normalized sum
/// of anisotropic Gaussian bumps; each deeper class is eroded into its parent
/// so class k+1 never touches class k−1. The volume is the tissue template
/// (per-class default intensity), unstyled.
pub fn generate_anatomy(
    rng: &mut ChaCha12Rng,
    depth: usize,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<AnatomySample> {
    if height != width {
        return Err(SdsegError::InvalidArgument(format!(
            "generate_anatomy: height {height} != width {width}"
        )));
    }
    if num_classes < 2 {
        return Err(SdsegError::InvalidArgument(
            "generate_anatomy: need at least 2 classes".into(),
        ));
    }
    if depth < 3 {
        return Err(SdsegError::InvalidArgument(
            "generate_anatomy: need depth >= 3".into(),
        ));
    }

    for _ in 0..ANATOMY_MAX_RETRIES {
        let nb = rng.random_range(2..=3);
        let bumps: Vec<Bump> = (0..nb)
            .map(|_| Bump {
                cz: rng.random_range(0.25..0.75) * depth as f64,
                cy: rng.random_range(0.28..0.72) * height as f64,
                cx: rng.random_range(0.28..0.72) * width as f64,
                sz: rng.random_range(0.3..0.8) * depth as f64,
                su: rng.random_range(0.12..0.25) * height as f64,
                sv: rng.random_range(0.12..0.25) * width as f64,
                theta: rng.random_range(0.0..std::f64::consts::PI),
                amp: rng.random_range(0.6..1.0),
            })
            .collect();

        let mut field = Array3::<f64>::zeros((depth, height, width));
        for b in &bumps {
            let (sin_t, cos_t) = b.theta.sin_cos();
            for z in 0..depth {
                let dz = (z as f64 - b.cz) / b.sz;
                let az = (-0.5 * dz * dz).exp();
                for y in 0..height {
                    let dy = y as f64 - b.cy;
                    for x in 0..width {
                        let dx = x as f64 - b.cx;
                        let u = (cos_t * dy + sin_t * dx) / b.su;
                        let v = (-sin_t * dy + cos_t * dx) / b.sv;
                        field[[z, y, x]] += b.amp * az * (-0.5 * (u * u + v * v)).exp();
                    }
                }
            }
        }
        let max = field.iter().cloned().fold(0.0_f64, f64::max);
        if max <= 0.0 {
            continue;
        }
        field.mapv_inplace(|v| v / max);

        let labels = threshold_nested(&field, num_classes);
        let total = (depth * height * width) as f64;
        let fg = labels.iter().filter(|&&l| l >= 1).count() as f64 / total;
        if fg < FG_FRACTION_BOUNDS.0 || fg > FG_FRACTION_BOUNDS.1 {
            continue;
        }
        let mut class_present = vec![false; num_classes];
        for &l in labels.iter() {
            class_present[l as usize] = true;
        }
        if class_present.iter().any(|p| !p) {
            continue;
        }

        let tissue = default_tissue_intensities(num_classes);
        let volume = labels.mapv(|l| tissue[l as usize]);
        return Ok(AnatomySample {
            volume,
            labels,
            sample_id: String::new(),
        });
    }
    Err(SdsegError::Data(format!(
        "generate_anatomy: no valid geometry in {ANATOMY_MAX_RETRIES} attempts \
         (foreground fraction bounds {FG_FRACTION_BOUNDS:?})"
    )))
}

/// Class thresholds are evenly spread; each deeper level set is intersected
/// with the 8-neighborhood erosion of its parent, slice by slice.
fn threshold_nested(field: &Array3<f64>, num_classes: usize) -> Array3<u8> {
    let (d, h, w) = field.dim();
    let k = num_classes;
    let tau = |level: usize| 0.40 + 0.25 * (level - 1) as f64 / (k as f64 - 2.0).max(1.0);
    let mut labels = Array3::<u8>::zeros((d, h, w));
    for z in 0..d {
        let slice = field.index_axis(Axis(0), z);
        let mut parent = Array2::from_shape_fn((h, w), |(i, j)| slice[[i, j]] >= tau(1));
        for (l, mut row) in labels.index_axis_mut(Axis(0), z).outer_iter_mut().enumerate() {
            for j in 0..w {
                if parent[[l, j]] {
                    row[j] = 1;
                }
            }
        }
        for level in 2..k {
            let eroded = erode8(&parent);
            let cur = Array2::from_shape_fn((h, w), |(i, j)| {
                eroded[[i, j]] && slice[[i, j]] >= tau(level)
            });
            for i in 0..h {
                for j in 0..w {
                    if cur[[i, j]] {
                        labels[[z, i, j]] = level as u8;
                    }
                }
            }
            parent = cur;
        }
    }
    labels
}

/// True where the voxel and all 8 in-slice neighbors are inside the mask;
/// canvas border counts as outside.
fn erode8(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        if i == 0 || j == 0 || i + 1 == h || j + 1 == w {
            return false;
        }
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                if !mask[[(i as i64 + di) as usize, (j as i64 + dj) as usize]] {
                    return false;
                }
            }
        }
        true
    })
}

/// Renders anatomy under a style:
/// clamp(((tissue[label] · bias)^gamma − 0.5)·contrast + 0.5 + brightness + noise).
///
/// The bias field is a low-frequency cosine mixture normalized into
/// [1−A, 1+A]. Identity-style branches keep the identity render bit-exact
/// while consuming the same rng stream as any other style.
pub fn render_domain(
    anatomy: &AnatomySample,
    style: &DomainStyle,
    rng: &mut ChaCha12Rng,
) -> Result<Array3<f64>> {
    style.validate()?;
    let max_label = anatomy.labels.iter().cloned().max().unwrap_or(0) as usize;
    if max_label >= style.tissue_intensities.len() {
        return Err(SdsegError::Config(format!(
            "style `{}` has {} tissue intensities but labels reach class {max_label}",
            style.domain_id,
            style.tissue_intensities.len()
        )));
    }

    let (d, h, w) = anatomy.labels.dim();
    // Three cosine components; always drawn so different styles on the same
    // seed stay stream-aligned.
    struct Wave {
        c: f64,
        fy: f64,
        fx: f64,
        fz: f64,
        phase: f64,
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            c: rng.random_range(0.5..1.0),
            fy: rng.random_range(-1.5..1.5),
            fx: rng.random_range(-1.5..1.5),
            fz: rng.random_range(-0.5..0.5),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let norm: f64 = waves.iter().map(|wv| wv.c.abs()).sum();
    let amp = style.bias_field_amplitude;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut out = Array3::<f64>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let g: f64 = waves
                    .iter()
                    .map(|wv| {
                        (std::f64::consts::TAU
                            * (wv.fy * y as f64 / h as f64
                                + wv.fx * x as f64 / w as f64
                                + wv.fz * z as f64 / d as f64)
                            + wv.phase)
                            .cos()
                            * wv.c
                    })
                    .sum::<f64>()
                    / norm;
                let bias = 1.0 + amp * g;
                let tissue = style.tissue_intensities[anatomy.labels[[z, y, x]] as usize];
                let base = tissue * bias;
                let powed = if style.gamma == 1.0 { base } else { base.powf(style.gamma) };
                let contrasted = if style.contrast == 1.0 {
                    powed
                } else {
                    (powed - 0.5) * style.contrast + 0.5
                };
                let noise = style.noise_sigma * normal.sample(rng);
                out[[z, y, x]] =
                    (contrasted + style.brightness_bias + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// One window per slice, edge-replicated at volume boundaries.
pub fn sliding_windows(
    volume: &Array3<f64>,
    labels: &Array3<u8>,
    source_sample: &str,
) -> Vec<WindowSample> {
    let (d, h, w) = volume.dim();
    assert_eq!(labels.dim(), (d, h, w), "volume/labels shape mismatch");
    (0..d)
        .map(|center| {
            let mut window = Array3::<f64>::zeros((3, h, w));
            for (slot, offset) in (-1i64..=1).enumerate() {
                let src = (center as i64 + offset).clamp(0, d as i64 - 1) as usize;
                window
                    .index_axis_mut(Axis(0), slot)
                    .assign(&volume.index_axis(Axis(0), src));
            }
            WindowSample {
                window,
                center_label: labels.index_axis(Axis(0), center).to_owned(),
                source_sample: source_sample.to_string(),
                center_index: center,
            }
        })
        .collect()
}

const VOLUME_MAGIC: &[u8; 8] = b"SDSEGVOL";
const VOLUME_VERSION: u32 = 1;

pub fn save_volume(
    path: &Path,
    volume: &Array3<f64>,
    labels: &Array3<u8>,
    sample_id: &str,
) -> Result<()> {
    let (d, h, w) = volume.dim();
    assert_eq!(labels.dim(), (d, h, w));
    let file = std::fs::File::create(path).map_err(|e| SdsegError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| SdsegError::io(path.display().to_string(), e);
    out.write_all(VOLUME_MAGIC).map_err(werr)?;
    out.write_u32::<LittleEndian>(VOLUME_VERSION).map_err(werr)?;
    for dim in [d, h, w] {
        out.write_u32::<LittleEndian>(dim as u32).map_err(werr)?;
    }
    let id = sample_id.as_bytes();
    out.write_u32::<LittleEndian>(id.len() as u32).map_err(werr)?;
    out.write_all(id).map_err(werr)?;
    for v in volume.iter() {
        out.write_f64::<LittleEndian>(*v).map_err(werr)?;
    }
    let label_bytes: Vec<u8> = labels.iter().cloned().collect();
    out.write_all(&label_bytes).map_err(werr)?;
    out.flush().map_err(werr)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<(Array3<f64>, Array3<u8>, String)> {
    let file = std::fs::File::open(path).map_err(|e| SdsegError::io(path.display().to_string(), e))?;
    let mut inp = BufReader::new(file);
    let rerr = |e| SdsegError::io(path.display().to_string(), e);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic).map_err(rerr)?;
    if &magic != VOLUME_MAGIC {
        return Err(SdsegError::Data(format!(
            "{}: not a volume file (bad magic)",
            path.display()
        )));
    }
    let version = inp.read_u32::<LittleEndian>().map_err(rerr)?;
    if version != VOLUME_VERSION {
        return Err(SdsegError::Data(format!(
            "{}: unsupported volume version {version}",
            path.display()
        )));
    }
    let d = inp.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    let h = inp.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    let w = inp.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    let id_len = inp.read_u32::<LittleEndian>().map_err(rerr)? as usize;
    let mut id = vec![0u8; id_len];
    inp.read_exact(&mut id).map_err(rerr)?;
    let sample_id = String::from_utf8(id)
        .map_err(|_| SdsegError::Data(format!("{}: sample id is not utf-8", path.display())))?;
    let mut vol = vec![0.0; d * h * w];
    for v in vol.iter_mut() {
        *v = inp.read_f64::<LittleEndian>().map_err(rerr)?;
    }
    let mut lab = vec![0u8; d * h * w];
    inp.read_exact(&mut lab).map_err(rerr)?;
    let volume = Array3::from_shape_vec((d, h, w), vol).expect("shape from header");
    let labels = Array3::from_shape_vec((d, h, w), lab).expect("shape from header");
    Ok((volume, labels, sample_id))
}

pub fn volume_path(root: &Path, domain_id: &str, sample_id: &str) -> PathBuf {
    root.join(domain_id).join(format!("{sample_id}.vol"))
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.toml")
}

pub fn save_manifest(root: &Path, manifest: &BenchmarkManifest) -> Result<()> {
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| SdsegError::Data(format!("manifest serialization: {e}")))?;
    let path = manifest_path(root);
    std::fs::write(&path, text).map_err(|e| SdsegError::io(path.display().to_string(), e))
}

pub fn load_manifest(root: &Path) -> Result<BenchmarkManifest> {
    let path = manifest_path(root);
    let text =
        std::fs::read_to_string(&path).map_err(|e| SdsegError::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| SdsegError::Data(format!("manifest parse: {e}")))
}

/// Sample-level 70/10/20 split (rounded, remainder to test).
fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 10 {
        return Err(SdsegError::Config(format!(
            "need at least 10 source samples for a 70/10/20 split, got {n}"
        )));
    }
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    let test = n - train - val;
    Ok((train, val, test))
}

/// Generates, renders, and writes the whole benchmark under `root`.
///
/// Source anatomies are split by sample (never by window) so no slice of a
/// validation or test patient is seen in training. Target domains are
/// test-only; by default they are fresh patients, with `paired_anatomy`
/// re-rendering source anatomies instead.
pub fn make_benchmark(config: &BenchmarkConfig, root: &Path) -> Result<BenchmarkManifest> {
    config.source_style.validate()?;
    if config.target_styles.is_empty() {
        return Err(SdsegError::Config("need at least one target domain".into()));
    }
    for style in &config.target_styles {
        style.validate()?;
        if style.domain_id == config.source_style.domain_id {
            return Err(SdsegError::Config(format!(
                "target domain id `{}` collides with the source domain",
                style.domain_id
            )));
        }
    }
    if config.paired_anatomy && config.num_target_samples > config.num_source_samples {
        return Err(SdsegError::Config(
            "paired_anatomy requires num_target_samples <= num_source_samples".into(),
        ));
    }
    let (n_train, n_val, n_test) = split_counts(config.num_source_samples)?;

    let seed = config.seed;
    let gen_one = |tag: &str, index: u64, sample_id: &str| -> Result<AnatomySample> {
        let mut rng = derive_indexed_rng(seed, &["anatomy", tag], index);
        let mut anatomy = generate_anatomy(
            &mut rng,
            config.depth,
            config.height,
            config.width,
            config.num_classes,
        )?;
        anatomy.sample_id = sample_id.to_string();
        Ok(anatomy)
    };

    // Source domain.
    let src_dir = root.join(&config.source_style.domain_id);
    std::fs::create_dir_all(&src_dir).map_err(|e| SdsegError::io(src_dir.display().to_string(), e))?;
    let mut source_ids = Vec::new();
    for i in 0..config.num_source_samples {
        let sample_id = format!("src{i:03}");
        let anatomy = gen_one("source", i as u64, &sample_id)?;
        let mut rng = derive_indexed_rng(seed, &["render", &config.source_style.domain_id], i as u64);
        let rendered = render_domain(&anatomy, &config.source_style, &mut rng)?;
        save_volume(
            &volume_path(root, &config.source_style.domain_id, &sample_id),
            &rendered,
            &anatomy.labels,
            &sample_id,
        )?;
        source_ids.push(sample_id);
    }

    // Shuffle sample indices once, then cut.
    let mut order: Vec<usize> = (0..config.num_source_samples).collect();
    let mut split_rng = derive_indexed_rng(seed, &["split"], 0);
    for i in (1..order.len()).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let pick = |idx: &[usize]| -> Vec<String> {
        let mut ids: Vec<String> = idx.iter().map(|&i| source_ids[i].clone()).collect();
        ids.sort();
        ids
    };
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..n_train + n_val + n_test]);

    // Target domains.
    let mut targets = Vec::new();
    for style in &config.target_styles {
        let dir = root.join(&style.domain_id);
        std::fs::create_dir_all(&dir).map_err(|e| SdsegError::io(dir.display().to_string(), e))?;
        let mut ids = Vec::new();
        for i in 0..config.num_target_samples {
            let sample_id = format!("{}{i:03}", style.domain_id);
            let anatomy = if config.paired_anatomy {
                let mut a = gen_one("source", i as u64, &sample_id)?;
                a.sample_id = sample_id.clone();
                a
            } else {
                gen_one(&style.domain_id, i as u64, &sample_id)?
            };
            let mut rng = derive_indexed_rng(seed, &["render", &style.domain_id], i as u64);
            let rendered = render_domain(&anatomy, style, &mut rng)?;
            save_volume(
                &volume_path(root, &style.domain_id, &sample_id),
                &rendered,
                &anatomy.labels,
                &sample_id,
            )?;
            ids.push(sample_id);
        }
        targets.push(DomainEntry {
            style: style.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: ids,
        });
    }

    let manifest = BenchmarkManifest {
        seed,
        depth: config.depth,
        height: config.height,
        width: config.width,
        num_classes: config.num_classes,
        paired_anatomy: config.paired_anatomy,
        source: DomainEntry {
            style: config.source_style.clone(),
            train,
            val,
            test,
        },
        targets,
    };
    save_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Loads the rendered volumes for a list of sample ids in one domain.
pub fn load_domain_samples(
    root: &Path,
    domain_id: &str,
    ids: &[String],
) -> Result<Vec<(Array3<f64>, Array3<u8>, String)>> {
    ids.iter()
        .map(|id| {
            let path = volume_path(root, domain_id, id);
            if !path.exists() {
                return Err(SdsegError::Data(format!(
                    "sample `{id}` of domain `{domain_id}` missing at {}",
                    path.display()
                )));
            }
            load_volume(&path)
        })
        .collect()
}

/// All windows of the listed samples, concatenated in id order.
pub fn load_domain_windows(
    root: &Path,
    domain_id: &str,
    ids: &[String],
) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for (volume, labels, sample_id) in load_domain_samples(root, domain_id, ids)? {
        out.extend(sliding_windows(&volume, &labels, &sample_id));
    }
    Ok(out)
}
