//! Synthetic periodic "echo-like" videos with analytic ground truth.
//!
//! Each sample is a pulsating ellipse on a dark background. The ellipse area
//! follows `a(t) = base_area · (1 − m·(1 + sin(2πt/period + phase))/2)`, so
//! the largest-area frame plays the role of end-diastole and the smallest of
//! end-systole. Treating the area like a cross-section of a chamber, volume
//! is taken proportional to `a^{3/2}` and the ejection-fraction label is
//! `100·(1 − (a_min/a_max)^{3/2})` over the discrete frame grid.
//!
//! Videos are stored in a little-endian binary container (`EGNV`) plus a CSV
//! manifest, both trivially parseable from any language.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Background and foreground intensity of rendered frames.
pub const BG_LEVEL: f64 = 0.05;
pub const FG_LEVEL: f64 = 0.9;

/// Supersampling grid per pixel for area-accurate rasterization.
const SUBSAMPLES: usize = 4;

/// One raw video with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    /// T×H×W frame stack, pixel values in [0, 1].
    pub frames: Tensor,
    /// Ground-truth ejection fraction in percent.
    pub ef: f64,
    /// Frame index of minimum area (end-systole).
    pub es_index: usize,
    /// Frame index of maximum area (end-diastole).
    pub ed_index: usize,
    /// Reserved for multi-view input; fixed for synthetic data.
    pub view_tag: String,
}

pub const SYNTH_VIEW_TAG: &str = "AP4-synthetic";

impl Video {
    pub fn t_total(&self) -> usize {
        self.frames.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

/// Geometry and dynamics of one generated sample.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    /// Maximum ellipse area in pixels².
    pub base_area: f64,
    /// Pulsation depth m ∈ (0, 1); the minimum area is `base_area·(1−m)`.
    pub pulsation_depth: f64,
    /// Cardiac period in frames.
    pub period: f64,
    /// Phase offset in radians.
    pub phase: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_std: f64,
    /// Render the zoomed-in variant (1.4× scale, top-cropped).
    pub zoomed: bool,
    /// Ellipse center in pixel coordinates (x, y).
    pub heart_center: (f64, f64),
    /// Vertical elongation: ry = aspect·rx.
    pub aspect: f64,
    pub t_total: usize,
    pub height: usize,
    pub width: usize,
}

impl GeneratorParams {
    /// Continuous-time EF implied by the pulsation depth.
    pub fn analytic_ef(&self) -> f64 {
        100.0 * (1.0 - (1.0 - self.pulsation_depth).powf(1.5))
    }

    /// Pulsation depth required for a target EF percentage.
    pub fn depth_for_ef(ef: f64) -> f64 {
        1.0 - (1.0 - ef / 100.0).powf(2.0 / 3.0)
    }

    /// Ellipse area at frame t.
    pub fn area_at(&self, t: usize) -> f64 {
        let s = (2.0 * std::f64::consts::PI * t as f64 / self.period + self.phase).sin();
        self.base_area * (1.0 - self.pulsation_depth * (1.0 + s) / 2.0)
    }

    /// Axis scale and rendered center; the zoomed variant enlarges the
    /// ellipse 1.4× and shifts it up so the top edge crops it.
    fn render_geometry(&self) -> (f64, (f64, f64)) {
        if self.zoomed {
            let ry_max = self.aspect
                * (self.base_area / (std::f64::consts::PI * self.aspect)).sqrt()
                * 1.4;
            (
                1.4,
                (
                    self.heart_center.0,
                    (self.heart_center.1 - 0.6 * ry_max).max(0.0),
                ),
            )
        } else {
            (1.0, self.heart_center)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.period < 4.0 {
            return Err(Error::config("period must be at least 4 frames"));
        }
        if self.pulsation_depth <= 0.0 || self.pulsation_depth >= 1.0 {
            return Err(Error::config("pulsation depth must lie in (0, 1)"));
        }
        let ef = self.analytic_ef();
        if !(5.0..85.0).contains(&ef) {
            return Err(Error::config(format!(
                "pulsation depth {} implies EF {ef:.1} outside (5, 85)",
                self.pulsation_depth
            )));
        }
        if self.t_total == 0 {
            return Err(Error::config("t_total must be positive"));
        }
        // Largest ellipse must fit: horizontally and at the bottom always,
        // at the top only for the non-zoomed variant (zoom intentionally
        // crops the top edge).
        let (scale, (cx, cy)) = self.render_geometry();
        let rx = (self.base_area / (std::f64::consts::PI * self.aspect)).sqrt() * scale;
        let ry = self.aspect * rx;
        let fits_x = cx - rx >= 0.0 && cx + rx < self.width as f64;
        let fits_bottom = cy + ry < self.height as f64;
        let fits_top = self.zoomed || cy - ry >= 0.0;
        if !(fits_x && fits_bottom && fits_top) {
            return Err(Error::config(format!(
                "ellipse (rx={rx:.1}, ry={ry:.1}) at ({cx:.1}, {cy:.1}) exceeds {}x{} frame",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Renders one video; deterministic in (params, seed).
pub fn generate_video(params: &GeneratorParams, seed: u64) -> Result<Video> {
    params.validate()?;
    let (t_total, h, w) = (params.t_total, params.height, params.width);

    // Label pass: scan discrete frame areas for the extrema (first maximum
    // is ED, first minimum is ES).
    let areas: Vec<f64> = (0..t_total).map(|t| params.area_at(t)).collect();
    let mut ed_index = 0;
    let mut es_index = 0;
    for (t, &a) in areas.iter().enumerate() {
        if a > areas[ed_index] {
            ed_index = t;
        }
        if a < areas[es_index] {
            es_index = t;
        }
    }
    if es_index == ed_index {
        return Err(Error::config("degenerate pulsation: ES and ED coincide"));
    }
    let ratio = areas[es_index] / areas[ed_index];
    let ef = (100.0 * (1.0 - ratio.powf(1.5))) as f32 as f64;

    let (scale, (cx, cy)) = params.render_geometry();

    let mut rng = Rng::seed_from_u64(seed);
    let noise = if params.noise_std > 0.0 {
        Some(Normal::new(0.0, params.noise_std).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };

    let mut data = vec![0.0f64; t_total * h * w];
    let inv_ss = 1.0 / SUBSAMPLES as f64;
    for (t, area) in areas.iter().enumerate() {
        let rx = (area / (std::f64::consts::PI * params.aspect)).sqrt() * scale;
        let ry = params.aspect * rx;
        let frame = &mut data[t * h * w..(t + 1) * h * w];
        for py in 0..h {
            for px in 0..w {
                let mut inside = 0usize;
                for sy in 0..SUBSAMPLES {
                    let y = py as f64 + (sy as f64 + 0.5) * inv_ss;
                    let dy = (y - cy) / ry;
                    for sx in 0..SUBSAMPLES {
                        let x = px as f64 + (sx as f64 + 0.5) * inv_ss;
                        let dx = (x - cx) / rx;
                        if dx * dx + dy * dy <= 1.0 {
                            inside += 1;
                        }
                    }
                }
                let coverage = inside as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
                let mut v = BG_LEVEL + (FG_LEVEL - BG_LEVEL) * coverage;
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                frame[py * w + px] = (v.clamp(0.0, 1.0) as f32) as f64;
            }
        }
    }

    Ok(Video {
        frames: Tensor::new(vec![t_total, h, w], data)?,
        ef,
        es_index,
        ed_index,
        view_tag: SYNTH_VIEW_TAG.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Container I/O
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"EGNV";
const FORMAT_VERSION: u32 = 1;

pub fn write_video(path: &Path, video: &Video) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let (t, h, w) = (video.t_total(), video.height(), video.width());
    let mut buf = Vec::with_capacity(4 + 4 * 7 + 4 * t * h * w);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(video.ef as f32).to_le_bytes());
    buf.extend_from_slice(&(video.es_index as u32).to_le_bytes());
    buf.extend_from_slice(&(video.ed_index as u32).to_le_bytes());
    for &v in video.frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<Video> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 4 + 4 * 7];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &header[0..4]
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let (t, h, w) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let ef = f32::from_le_bytes(header[20..24].try_into().unwrap()) as f64;
    let es = u32_at(24) as usize;
    let ed = u32_at(28) as usize;
    let mut payload = vec![0u8; 4 * t * h * w];
    file.read_exact(&mut payload)
        .map_err(|_| Error::format(format!("{}: truncated payload", path.display())))?;
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(Error::format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Video {
        frames: Tensor::new(vec![t, h, w], data)?,
        ef,
        es_index: es,
        ed_index: ed,
        view_tag: SYNTH_VIEW_TAG.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format(format!("unknown split '{other}'"))),
        }
    }
}

/// Frame geometry shared by a dataset.
#[derive(Debug, Clone)]
pub struct GeometryProfile {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of video lengths.
    pub t_total: (usize, usize),
    /// Inclusive range of (even) cardiac periods in frames.
    pub period: (usize, usize),
    pub noise_std: f64,
    /// Maximum ellipse area as a fraction of the frame area.
    pub base_area_frac: f64,
    pub aspect: f64,
}

impl GeometryProfile {
    /// 32×32 CPU-friendly profile.
    pub fn desk() -> Self {
        GeometryProfile {
            height: 32,
            width: 32,
            t_total: (40, 120),
            period: (12, 16),
            noise_std: 0.03,
            base_area_frac: 0.20,
            aspect: 1.25,
        }
    }

    /// Native 112×112 profile; kept as a preset, not used in CPU runs.
    pub fn paper() -> Self {
        GeometryProfile {
            height: 112,
            width: 112,
            t_total: (40, 250),
            period: (12, 40),
            noise_std: 0.03,
            base_area_frac: 0.20,
            aspect: 1.25,
        }
    }
}

/// Counts per split plus stratum fractions.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of samples with EF below 40% (the under-represented group).
    pub below40_frac: f64,
    /// Fraction of zoomed-in variants.
    pub zoomed_frac: f64,
    pub geometry: GeometryProfile,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub path: String,
    pub split: Split,
    pub ef: f64,
    pub es_index: usize,
    pub ed_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_video(&self, dataset_dir: &Path, entry: &ManifestEntry) -> Result<Video> {
        read_video(&dataset_dir.join(&entry.path))
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::from("id,path,split,ef,es,ed\n");
    for e in &manifest.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.id,
            e.path,
            e.split.as_str(),
            e.ef,
            e.es_index,
            e.ed_index
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("id,path,split,ef,es,ed") => {}
        other => {
            return Err(Error::format(format!(
                "{}: bad manifest header {other:?}",
                path.display()
            )))
        }
    }
    let mut entries = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::format(format!(
                "{}: line {}: expected 6 columns",
                path.display(),
                ln + 2
            )));
        }
        let parse_err = |what: &str| Error::format(format!("{}: bad {what}", path.display()));
        entries.push(ManifestEntry {
            id: cols[0].parse().map_err(|_| parse_err("id"))?,
            path: cols[1].to_string(),
            split: Split::parse(cols[2])?,
            ef: cols[3].parse().map_err(|_| parse_err("ef"))?,
            es_index: cols[4].parse().map_err(|_| parse_err("es"))?,
            ed_index: cols[5].parse().map_err(|_| parse_err("ed"))?,
        });
    }
    Ok(Manifest { entries })
}

/// Stratum plan for one split: exact below-40 and zoomed counts, shuffled
/// deterministically.
fn plan_flags(n: usize, frac: f64, rng: &mut Rng) -> Vec<bool> {
    let k = (frac * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        flags.swap(i, j);
    }
    flags
}

/// Generates all samples and writes container files plus `manifest.csv`
/// under `out_dir`. Deterministic in the spec; `workers` only changes the
/// parallelism of file rendering, never the content.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path, workers: usize) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let plan = plan_dataset(spec)?;

    let workers = workers.max(1);
    if workers == 1 || plan.is_empty() {
        for job in &plan {
            render_job(spec, job, out_dir)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for chunk in plan.chunks(plan.len().div_ceil(workers)) {
                handles.push(scope.spawn(move || -> Result<()> {
                    for job in chunk {
                        render_job(spec, job, out_dir)?;
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("render worker panicked")?;
            }
            Ok(())
        })?;
    }

    let manifest = Manifest {
        entries: plan
            .iter()
            .map(|j| ManifestEntry {
                id: j.id,
                path: j.rel_path.clone(),
                split: j.split,
                ef: j.ef,
                es_index: j.es_index,
                ed_index: j.ed_index,
            })
            .collect(),
    };
    write_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

struct SampleJob {
    id: u64,
    split: Split,
    params: GeneratorParams,
    rel_path: String,
    ef: f64,
    es_index: usize,
    ed_index: usize,
}

/// Draws all per-sample parameters (deterministic) and computes labels.
fn plan_dataset(spec: &DatasetSpec) -> Result<Vec<SampleJob>> {
    let g = &spec.geometry;
    let mut jobs = Vec::with_capacity(spec.n_train + spec.n_val + spec.n_test);
    let mut id: u64 = 0;
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        // Split-level stratum plans; a distinct stream per split keeps the
        // plan independent of the other splits' sizes.
        let mut plan_rng = Rng::seed_from_u64(spec.seed ^ (0x5EED_0001 + split as u64));
        let below = plan_flags(n, spec.below40_frac, &mut plan_rng);
        let zoomed = plan_flags(n, spec.zoomed_frac, &mut plan_rng);
        for i in 0..n {
            let mut rng = Rng::seed_from_u64(spec.seed ^ id);
            let ef_target = if below[i] {
                rng.random_range(10.0..39.0)
            } else {
                rng.random_range(41.0..82.0)
            };
            let t_total = rng.random_range(g.t_total.0..=g.t_total.1);
            // even period so the discrete grid hits both extrema exactly
            let period = 2 * rng.random_range(g.period.0 / 2..=g.period.1 / 2);
            let t0 = rng.random_range(0..period);
            // sin(2πt/P + phase) = −1 at t = t0 → ED lands on frame t0
            let phase = -std::f64::consts::FRAC_PI_2
                - 2.0 * std::f64::consts::PI * t0 as f64 / period as f64;
            let frame_area = (g.height * g.width) as f64;
            let base_area = frame_area * g.base_area_frac * rng.random_range(0.85..1.15);
            let aspect = g.aspect * rng.random_range(0.92..1.08);
            let rx_max = (base_area / (std::f64::consts::PI * aspect)).sqrt();
            let ry_max = aspect * rx_max;
            let cx = g.width as f64 / 2.0 + rng.random_range(-1.5..1.5);
            let cy_lo = ry_max + 1.0;
            let cy_hi = g.height as f64 - ry_max - 1.0;
            let cy = if cy_lo < cy_hi {
                rng.random_range(cy_lo..cy_hi)
            } else {
                g.height as f64 / 2.0
            };
            let params = GeneratorParams {
                base_area,
                pulsation_depth: GeneratorParams::depth_for_ef(ef_target),
                period: period as f64,
                phase,
                noise_std: g.noise_std,
                zoomed: zoomed[i],
                heart_center: (cx, cy),
                aspect,
                t_total,
                height: g.height,
                width: g.width,
            };
            params.validate()?;
            // Labels are cheap (no rendering); compute here so the manifest
            // can be assembled without the frame data.
            let areas: Vec<f64> = (0..t_total).map(|t| params.area_at(t)).collect();
            let mut ed_index = 0;
            let mut es_index = 0;
            for (t, &a) in areas.iter().enumerate() {
                if a > areas[ed_index] {
                    ed_index = t;
                }
                if a < areas[es_index] {
                    es_index = t;
                }
            }
            let ef =
                (100.0 * (1.0 - (areas[es_index] / areas[ed_index]).powf(1.5))) as f32 as f64;
            jobs.push(SampleJob {
                id,
                split,
                params,
                rel_path: format!("videos/{id:05}.egnv"),
                ef,
                es_index,
                ed_index,
            });
            id += 1;
        }
    }
    Ok(jobs)
}

fn render_job(spec: &DatasetSpec, job: &SampleJob, out_dir: &Path) -> Result<()> {
    let video = generate_video(&job.params, spec.seed ^ job.id)?;
    debug_assert_eq!(video.es_index, job.es_index);
    debug_assert_eq!(video.ed_index, job.ed_index);
    write_video(&out_dir.join(&job.rel_path), &video)
}

pub fn manifest_path(dataset_dir: &Path) -> PathBuf {
    dataset_dir.join("manifest.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> GeneratorParams {
        GeneratorParams {
            base_area: 200.0,
            pulsation_depth: 0.5,
            period: 12.0,
            phase: -std::f64::consts::FRAC_PI_2,
            noise_std: 0.03,
            zoomed: false,
            heart_center: (16.0, 16.0),
            aspect: 1.25,
            t_total: 48,
            height: 32,
            width: 32,
        }
    }

    /// Intensity-sum area estimator over one frame; linear in intensity so
    /// zero-mean noise nearly cancels (no clamping, which would bias the
    /// background contribution upward).
    fn scan_area(frames: &Tensor, t: usize) -> f64 {
        let (h, w) = (frames.shape()[1], frames.shape()[2]);
        let frame = &frames.data()[t * h * w..(t + 1) * h * w];
        frame
            .iter()
            .map(|&v| (v - BG_LEVEL) / (FG_LEVEL - BG_LEVEL))
            .sum()
    }

    #[test]
    fn half_depth_ef_matches_closed_form() {
        // m=0.5, phase=−π/2 → ED at frame 0, EF = 100·(1−0.5^{1.5})
        let v = generate_video(&small_params(), 7).unwrap();
        assert_eq!(v.ed_index, 0);
        let want = 100.0 * (1.0 - 0.5f64.powf(1.5));
        assert!((v.ef - want).abs() < 1e-4, "ef {} vs {}", v.ef, want);
        assert_eq!(v.es_index, 6); // half a period later
    }

    #[test]
    fn zero_depth_limit_is_zero_ef() {
        // The generator rejects m→0 as degenerate; the formula itself
        // collapses to EF = 0 when the extreme areas agree.
        assert_eq!(100.0 * (1.0 - (1.0f64).powf(1.5)), 0.0);
        let mut p = small_params();
        p.pulsation_depth = 1e-9;
        assert!(matches!(generate_video(&p, 1), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_video(&small_params(), 42).unwrap();
        let b = generate_video(&small_params(), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_video(&small_params(), 43).unwrap();
        assert_ne!(a.frames.data(), c.frames.data());
    }

    #[test]
    fn oversized_geometry_is_config_error() {
        let mut p = small_params();
        p.base_area = 2000.0;
        assert!(matches!(generate_video(&p, 1), Err(Error::Config(_))));
    }

    #[test]
    fn labels_match_rendered_area_scan() {
        // Noiseless render: the per-frame area scan must identify exactly
        // the stored extrema frames.
        let mut p = small_params();
        p.noise_std = 0.0;
        p.phase = -std::f64::consts::FRAC_PI_2 - 2.0 * std::f64::consts::PI * 3.0 / p.period;
        let v = generate_video(&p, 11).unwrap();
        let areas: Vec<f64> = (0..v.t_total()).map(|t| scan_area(&v.frames, t)).collect();
        let ed = (0..areas.len()).fold(0, |b, t| if areas[t] > areas[b] { t } else { b });
        let es = (0..areas.len()).fold(0, |b, t| if areas[t] < areas[b] { t } else { b });
        assert_eq!(ed, v.ed_index);
        assert_eq!(es, v.es_index);
        // Area-derived EF within 1.0 EF point of the label.
        let ef_scan = 100.0 * (1.0 - (areas[es] / areas[ed]).powf(1.5));
        assert!(
            (ef_scan - v.ef).abs() < 1.0,
            "scan EF {ef_scan:.2} vs label {:.2}",
            v.ef
        );
    }

    #[test]
    fn noisy_labels_still_match_ef_within_tolerance() {
        // The video is periodic, so scanning all frames and averaging the
        // congruent ones suppresses both pixel noise and the selection bias
        // of taking a max over noisy values.
        let v = generate_video(&small_params(), 3).unwrap();
        let p = small_params().period as usize;
        let mut sums = vec![0.0; p];
        let mut counts = vec![0usize; p];
        for t in 0..v.t_total() {
            sums[t % p] += scan_area(&v.frames, t);
            counts[t % p] += 1;
        }
        let areas: Vec<f64> = sums
            .iter()
            .zip(counts.iter())
            .map(|(s, &c)| s / c as f64)
            .collect();
        let ed = (0..p).fold(0, |b, t| if areas[t] > areas[b] { t } else { b });
        let es = (0..p).fold(0, |b, t| if areas[t] < areas[b] { t } else { b });
        let ef_scan = 100.0 * (1.0 - (areas[es] / areas[ed]).powf(1.5));
        assert!(
            (ef_scan - v.ef).abs() < 1.0,
            "scan EF {ef_scan:.2} vs label {:.2}",
            v.ef
        );
        assert_eq!(ed, v.ed_index % p);
        assert_eq!(es, v.es_index % p);
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.egnv");
        let v = generate_video(&small_params(), 5).unwrap();
        write_video(&path, &v).unwrap();
        let r = read_video(&path).unwrap();
        assert_eq!(v, r);
        for (a, b) in v.frames.data().iter().zip(r.frames.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn two_frame_video_round_trips() {
        let mut p = small_params();
        p.t_total = 2; // minimum with distinct extrema
        p.period = 4.0;
        let v = generate_video(&p, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.egnv");
        write_video(&path, &v).unwrap();
        assert_eq!(read_video(&path).unwrap(), v);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.egnv");
        fs::write(&path, b"NOPE0000000000000000000000000000").unwrap();
        assert!(matches!(read_video(&path), Err(Error::Format(_))));

        let v = generate_video(&small_params(), 5).unwrap();
        let good = dir.path().join("good.egnv");
        write_video(&good, &v).unwrap();
        let bytes = fs::read(&good).unwrap();
        let cut = dir.path().join("cut.egnv");
        fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_video(&cut), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_realizes_strata_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_train: 55,
            n_val: 0,
            n_test: 0,
            below40_frac: 0.127,
            zoomed_frac: 0.1,
            geometry: GeometryProfile {
                t_total: (40, 48),
                ..GeometryProfile::desk()
            },
            seed: 99,
        };
        let m = generate_dataset(&spec, dir.path(), 1).unwrap();
        assert_eq!(m.entries.len(), 55);
        let below = m.entries.iter().filter(|e| e.ef < 40.0).count();
        let want = (0.127f64 * 55.0).round() as isize;
        assert!((below as isize - want).abs() <= 1, "below40 {below} vs {want}");

        // same spec, fresh directory → identical manifests and file bytes
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = generate_dataset(&spec, dir2.path(), 2).unwrap();
        assert_eq!(m, m2);
        let h1 = fs::read(manifest_path(dir.path())).unwrap();
        let h2 = fs::read(manifest_path(dir2.path())).unwrap();
        assert_eq!(h1, h2);
        let v1 = fs::read(dir.path().join(&m.entries[7].path)).unwrap();
        let v2 = fs::read(dir2.path().join(&m2.entries[7].path)).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn paper_fraction_example() {
        // 12.7% of 1000 → 127 below-40 samples.
        let mut rng = Rng::seed_from_u64(1);
        let flags = plan_flags(1000, 0.127, &mut rng);
        assert_eq!(flags.iter().filter(|&&b| b).count(), 127);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_train: 0,
            n_val: 0,
            n_test: 0,
            below40_frac: 0.127,
            zoomed_frac: 0.0,
            geometry: GeometryProfile::desk(),
            seed: 1,
        };
        let m = generate_dataset(&spec, dir.path(), 1).unwrap();
        assert!(m.entries.is_empty());
        assert_eq!(read_manifest(&manifest_path(dir.path())).unwrap(), m);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_train: 4,
            n_val: 2,
            n_test: 2,
            below40_frac: 0.25,
            zoomed_frac: 0.0,
            geometry: GeometryProfile {
                t_total: (40, 44),
                ..GeometryProfile::desk()
            },
            seed: 5,
        };
        let m = generate_dataset(&spec, dir.path(), 1).unwrap();
        let r = read_manifest(&manifest_path(dir.path())).unwrap();
        assert_eq!(m, r);
        assert_eq!(r.split(Split::Train).count(), 4);
        assert_eq!(r.split(Split::Val).count(), 2);
        assert_eq!(r.split(Split::Test).count(), 2);
        // splits are disjoint by id
        let ids: std::collections::HashSet<u64> = r.entries.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), 8);
        let v = r.load_video(dir.path(), &r.entries[0]).unwrap();
        assert_eq!(v.height(), 32);
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let spec = DatasetSpec {
            n_train: 6,
            n_val: 0,
            n_test: 0,
            below40_frac: 0.3,
            zoomed_frac: 0.2,
            geometry: GeometryProfile {
                t_total: (40, 42),
                ..GeometryProfile::desk()
            },
            seed: 17,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(&spec, d1.path(), 1).unwrap();
        let m2 = generate_dataset(&spec, d2.path(), 3).unwrap();
        assert_eq!(m1, m2);
        for e in &m1.entries {
            let b1 = fs::read(d1.path().join(&e.path)).unwrap();
            let b2 = fs::read(d2.path().join(&e.path)).unwrap();
            assert_eq!(b1, b2, "sample {}", e.id);
        }
    }
}
