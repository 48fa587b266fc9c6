//! Deterministic synthetic image corpus with planted findings.
//!
//! Every image is a smooth background plus class-dependent Gaussian blobs
//! plus pixel noise. The three classes mirror the clinical structure the
//! model targets without any clinical content: `normal` has no blobs,
//! `focal` has one prominent blob anywhere, `multifocal` has several smaller
//! blobs planted on both image halves, biased toward the periphery. Ten
//! binary finding labels are pure functions of the planted blob geometry, so
//! the pretraining stage has dense supervision and tests can reason about
//! ground truth exactly.
//!
//! External splits redraw the same classes under shifted noise, gamma, and
//! amplitude parameters to emulate data from other sites.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::{save_png, Image};
use crate::rng::RngStream;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "focal", "multifocal"];

pub const NUM_FINDINGS: usize = 10;
pub const FINDING_NAMES: [&str; NUM_FINDINGS] = [
    "no_finding",
    "focal_blob",
    "multifocal",
    "bilateral",
    "peripheral",
    "central",
    "upper_zone",
    "lower_zone",
    "large_blob",
    "high_intensity",
];

/// One planted Gaussian bump, in coordinates normalized to [0, 1] (so the
/// geometry survives any resize).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    /// Standard deviations of the bump.
    pub ry: f64,
    pub rx: f64,
    pub amplitude: f64,
}

impl Blob {
    /// Whether this blob's footprint (center plus 1.5 standard deviations)
    /// overlaps the given cell of an `grid_h` x `grid_w` partition of the
    /// unit square.
    pub fn covers_cell(&self, grid_h: usize, grid_w: usize, row: usize, col: usize) -> bool {
        let y0 = row as f64 / grid_h as f64;
        let y1 = (row + 1) as f64 / grid_h as f64;
        let x0 = col as f64 / grid_w as f64;
        let x1 = (col + 1) as f64 / grid_w as f64;
        let by0 = self.cy - 1.5 * self.ry;
        let by1 = self.cy + 1.5 * self.ry;
        let bx0 = self.cx - 1.5 * self.rx;
        let bx1 = self.cx + 1.5 * self.rx;
        by0 < y1 && by1 > y0 && bx0 < x1 && bx1 > x0
    }
}

/// Thresholds defining the derived finding labels.
const PERIPHERAL_MIN_OFFSET: f64 = 0.25;
const CENTRAL_MAX_OFFSET: f64 = 0.15;
const UPPER_MAX_CY: f64 = 0.33;
const LOWER_MIN_CY: f64 = 0.67;
const LARGE_MIN_RADIUS: f64 = 0.11;
const HIGH_MIN_AMPLITUDE: f64 = 0.45;

/// Derive the ten binary findings from planted blobs.
pub fn findings_of(blobs: &[Blob]) -> [bool; NUM_FINDINGS] {
    let offset = |b: &Blob| (b.cx - 0.5).abs().max((b.cy - 0.5).abs());
    [
        blobs.is_empty(),
        blobs.len() == 1,
        blobs.len() >= 2,
        blobs.iter().any(|b| b.cx < 0.5) && blobs.iter().any(|b| b.cx >= 0.5),
        blobs.iter().any(|b| offset(b) > PERIPHERAL_MIN_OFFSET),
        blobs.iter().any(|b| offset(b) <= CENTRAL_MAX_OFFSET),
        blobs.iter().any(|b| b.cy < UPPER_MAX_CY),
        blobs.iter().any(|b| b.cy > LOWER_MIN_CY),
        blobs.iter().any(|b| 0.5 * (b.ry + b.rx) > LARGE_MIN_RADIUS),
        blobs.iter().any(|b| b.amplitude > HIGH_MIN_AMPLITUDE),
    ]
}

/// Rendering parameters for one split, emulating site-specific acquisition
/// differences.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub name: String,
    /// Images per class, ordered as [`CLASS_NAMES`].
    pub counts: [usize; NUM_CLASSES],
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Power applied to the final intensity (1.0 = neutral).
    pub gamma: f64,
    /// Scales every blob amplitude.
    pub amplitude_scale: f64,
    /// Added to the background base level.
    pub background_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub splits: Vec<SplitSpec>,
}

impl SynthConfig {
    /// Desk-scale corpus: one training split and three distribution-shifted
    /// external splits. Class ratios loosely follow a heavily
    /// normal-dominated screening population.
    pub fn desk(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        SynthConfig {
            image_size: 144,
            seed,
            out_dir: out_dir.into(),
            splits: vec![
                SplitSpec {
                    name: "train".to_string(),
                    counts: [240, 40, 60],
                    noise: 0.02,
                    gamma: 1.0,
                    amplitude_scale: 1.0,
                    background_shift: 0.0,
                },
                SplitSpec {
                    name: "ext-noise".to_string(),
                    counts: [32, 10, 8],
                    noise: 0.035,
                    gamma: 1.0,
                    amplitude_scale: 0.95,
                    background_shift: 0.02,
                },
                SplitSpec {
                    name: "ext-gamma".to_string(),
                    counts: [30, 14, 8],
                    noise: 0.025,
                    gamma: 0.8,
                    amplitude_scale: 1.0,
                    background_shift: -0.03,
                },
                SplitSpec {
                    name: "ext-contrast".to_string(),
                    counts: [40, 30, 16],
                    noise: 0.02,
                    gamma: 1.15,
                    amplitude_scale: 0.85,
                    background_shift: 0.05,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid("synth_config", "image_size must be at least 16"));
        }
        if self.splits.is_empty() {
            return Err(Error::invalid("synth_config", "at least one split required"));
        }
        for s in &self.splits {
            if s.counts.contains(&0) {
                return Err(Error::invalid(
                    "synth_config",
                    format!("split {}: every class needs at least one image", s.name),
                ));
            }
            if s.noise < 0.0 || s.gamma <= 0.0 || s.amplitude_scale <= 0.0 {
                return Err(Error::invalid(
                    "synth_config",
                    format!("split {}: shift parameters out of range", s.name),
                ));
            }
            if s.name.contains(['\t', '\n', '/']) || s.name.is_empty() {
                return Err(Error::invalid(
                    "synth_config",
                    format!("split name {:?} must be a plain token", s.name),
                ));
            }
        }
        Ok(())
    }
}

/// Plant the blobs for one image of the given class.
fn plan_blobs(class: usize, rng: &mut RngStream) -> Vec<Blob> {
    match class {
        0 => Vec::new(),
        1 => {
            // one prominent blob, anywhere in the field
            vec![Blob {
                cy: rng.uniform_in(0.15, 0.85),
                cx: rng.uniform_in(0.15, 0.85),
                ry: rng.uniform_in(0.07, 0.16),
                rx: rng.uniform_in(0.07, 0.16),
                amplitude: rng.uniform_in(0.30, 0.60),
            }]
        }
        _ => {
            // several smaller peripheral blobs, at least one per half
            let extra = rng.range(3); // 3 to 5 blobs total
            let mut blobs = Vec::with_capacity(3 + extra);
            for i in 0..3 + extra {
                // alternate halves so the pattern is always bilateral
                let left = i % 2 == 0;
                let side_offset = rng.uniform_in(0.20, 0.42);
                let cx = if left { 0.5 - side_offset } else { 0.5 + side_offset };
                blobs.push(Blob {
                    cy: rng.uniform_in(0.12, 0.88),
                    cx,
                    ry: rng.uniform_in(0.04, 0.09),
                    rx: rng.uniform_in(0.04, 0.09),
                    amplitude: rng.uniform_in(0.28, 0.55),
                });
            }
            blobs
        }
    }
}

/// Render one image: smooth background, blobs, noise, gamma, clamp.
fn render(size: usize, blobs: &[Blob], spec: &SplitSpec, rng: &mut RngStream) -> Image {
    let base = rng.uniform_in(0.35, 0.48) + spec.background_shift;
    let slope_y = rng.uniform_in(-0.08, 0.08);
    let slope_x = rng.uniform_in(-0.08, 0.08);
    let wave_amp = rng.uniform_in(0.01, 0.04);
    let wave_fy = rng.uniform_in(0.5, 2.0);
    let wave_fx = rng.uniform_in(0.5, 2.0);
    let phase_y = rng.uniform_in(0.0, std::f64::consts::TAU);
    let phase_x = rng.uniform_in(0.0, std::f64::consts::TAU);

    let mut pixels = Vec::with_capacity(size * size);
    for yi in 0..size {
        let y = (yi as f64 + 0.5) / size as f64;
        for xi in 0..size {
            let x = (xi as f64 + 0.5) / size as f64;
            let mut v = base
                + slope_y * (y - 0.5)
                + slope_x * (x - 0.5)
                + wave_amp
                    * (std::f64::consts::TAU * wave_fy * y + phase_y).sin()
                    * (std::f64::consts::TAU * wave_fx * x + phase_x).sin();
            for b in blobs {
                let dy = (y - b.cy) / b.ry;
                let dx = (x - b.cx) / b.rx;
                v += spec.amplitude_scale * b.amplitude * (-0.5 * (dy * dy + dx * dx)).exp();
            }
            v += spec.noise * rng.normal();
            pixels.push(v.clamp(0.0, 1.0).powf(spec.gamma));
        }
    }
    Image::new(size, size, pixels).expect("rendered pixels are clamped")
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Image path, absolute after loading.
    pub path: PathBuf,
    pub split: String,
    pub class: usize,
    pub findings: [bool; NUM_FINDINGS],
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == name).collect()
    }

    pub fn split_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for s in &self.samples {
            if !names.contains(&s.split) {
                names.push(s.split.clone());
            }
        }
        names
    }

    pub fn class_counts(&self, split: &str) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in self.samples.iter().filter(|s| s.split == split) {
            counts[s.class] += 1;
        }
        counts
    }
}

fn findings_string(f: &[bool; NUM_FINDINGS]) -> String {
    f.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn blobs_string(blobs: &[Blob]) -> String {
    blobs
        .iter()
        .map(|b| {
            format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6}",
                b.cy, b.cx, b.ry, b.rx, b.amplitude
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "path\tsplit\tclass\tfindings\tblobs";

/// Generate the corpus under `cfg.out_dir`: one PNG per image plus a
/// tab-separated manifest. Returns the manifest path. Fully determined by
/// the config (including the seed); the per-image random stream is keyed by
/// split name and image index, so other splits' counts do not disturb it.
pub fn generate(cfg: &SynthConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let img_dir = cfg.out_dir.join("images");
    std::fs::create_dir_all(&img_dir)
        .map_err(|e| Error::io(format!("create {}", img_dir.display()), e))?;

    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for spec in &cfg.splits {
        let mut index = 0usize;
        for (class, &count) in spec.counts.iter().enumerate() {
            for _ in 0..count {
                let label = format!("synth-{}", spec.name);
                let mut rng = RngStream::new(cfg.seed, &label, index as u64);
                let blobs = plan_blobs(class, &mut rng);
                let img = render(cfg.image_size, &blobs, spec, &mut rng);
                let file = format!("{}_{:05}.png", spec.name, index);
                let path = img_dir.join(&file);
                save_png(&path, &img)?;
                manifest.push_str(&format!(
                    "images/{file}\t{}\t{}\t{}\t{}\n",
                    spec.name,
                    CLASS_NAMES[class],
                    findings_string(&findings_of(&blobs)),
                    blobs_string(&blobs),
                ));
                index += 1;
            }
        }
    }
    let manifest_path = cfg.out_dir.join(MANIFEST_NAME);
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(format!("write {}", manifest_path.display()), e))?;
    Ok(manifest_path)
}

fn parse_class(s: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == s)
}

/// Parse a manifest and verify every referenced image exists. Paths in the
/// file are relative to the manifest's directory; loaded samples carry the
/// joined path.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let err = |line: usize, msg: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(err(lineno, format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(lineno, format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let rel = fields[0];
        let split = fields[1].to_string();
        let class = parse_class(fields[2])
            .ok_or_else(|| err(lineno, format!("unknown class {:?}", fields[2])))?;
        let fstr = fields[3];
        if fstr.len() != NUM_FINDINGS || fstr.chars().any(|c| c != '0' && c != '1') {
            return Err(err(lineno, format!("findings must be {NUM_FINDINGS} binary digits, got {fstr:?}")));
        }
        let mut findings = [false; NUM_FINDINGS];
        for (k, c) in fstr.chars().enumerate() {
            findings[k] = c == '1';
        }
        let mut blobs = Vec::new();
        if !fields[4].is_empty() {
            for part in fields[4].split(';') {
                let nums: Vec<f64> = part
                    .split(',')
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(lineno, format!("malformed blob tuple {part:?}")))?;
                if nums.len() != 5 {
                    return Err(err(lineno, format!("blob tuple needs 5 numbers, got {}", nums.len())));
                }
                blobs.push(Blob {
                    cy: nums[0],
                    cx: nums[1],
                    ry: nums[2],
                    rx: nums[3],
                    amplitude: nums[4],
                });
            }
        }
        let full = root.join(rel);
        if !full.is_file() {
            return Err(Error::MissingFile { path: full });
        }
        samples.push(Sample {
            path: full,
            split,
            class,
            findings,
            blobs,
        });
    }
    Ok(Dataset { samples })
}
