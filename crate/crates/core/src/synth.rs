//! Synthetic latent videos of moving blobs.
//!
//! Each video renders a few raised-cosine blobs on a torus, all drifting in
//! the direction sector named by the video's condition id. Clean videos move
//! every blob at constant velocity (optionally with a sinusoidal wobble);
//! corrupted ones inject teleports, a transient duplicate, or a blob that
//! vanishes mid-clip. Corrupted videos are paired with a clean counterpart
//! whose speed is tuned so both carry the same mean frame-to-frame change.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{mix, SeededRng};
use crate::tensor::{tensor_write, Dims, LatentVideo};

const LAYOUT_STREAM: u64 = 0x6c61_796f;
const TELEPORT_STREAM: u64 = 0x7465_6c65;
const CONDITION_STREAM: u64 = 0x636f_6e64;
const CORRUPTION_STREAM: u64 = 0x636f_7272;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    /// Each frame, with this probability, every blob jumps to a uniform random position.
    Teleport(f64),
    /// A copy of the first blob is shown, offset by half the frame, for frames `start..end`.
    Duplicate { start: usize, end: usize },
    /// The first blob disappears from this frame on.
    Pop(usize),
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Teleport(p) => write!(f, "teleport:{p}"),
            Self::Duplicate { start, end } => write!(f, "duplicate:{start}-{end}"),
            Self::Pop(frame) => write!(f, "pop:{frame}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    Linear,
    /// Linear drift plus a sideways oscillation.
    Sinusoidal { amplitude: f64, period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoherenceLabel {
    Coherent,
    Incoherent,
}

impl fmt::Display for CoherenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Coherent => "COHERENT",
            Self::Incoherent => "INCOHERENT",
        })
    }
}

impl std::str::FromStr for CoherenceLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "COHERENT" => Ok(Self::Coherent),
            "INCOHERENT" => Ok(Self::Incoherent),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub blobs: usize,
    /// Blob radius in latent pixels.
    pub radius: f64,
    /// Upper end of per-blob speed in pixels per frame; each blob draws from `[speed/2, speed]`.
    pub speed: f64,
    pub trajectory: Trajectory,
    pub corruption: Corruption,
    /// Number of direction sectors, i.e. the condition vocabulary.
    pub directions: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            blobs: 2,
            radius: 3.0,
            speed: 1.0,
            trajectory: Trajectory::Linear,
            corruption: Corruption::None,
            directions: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    pub video: LatentVideo,
    pub label: CoherenceLabel,
    /// Direction-sector id the blobs move in.
    pub condition: u32,
    pub motion_magnitude: f64,
}

/// Direction-sector id implied by a scene seed.
pub fn condition_for_seed(seed: u64, directions: usize) -> u32 {
    (mix(seed, CONDITION_STREAM) % directions.max(1) as u64) as u32
}

fn validate(spec: &SceneSpec, dims: Dims) -> Result<()> {
    let infeasible = |msg: String| Err(Error::Domain(format!("infeasible scene: {msg}")));
    if spec.blobs == 0 {
        return infeasible("needs at least one blob".into());
    }
    if spec.directions == 0 {
        return infeasible("needs at least one direction sector".into());
    }
    let limit = dims.width.min(dims.height) as f64 / 2.0;
    if !(spec.radius > 0.0 && spec.radius < limit) {
        return infeasible(format!("radius {} must lie in (0, {limit})", spec.radius));
    }
    if !(spec.speed >= 0.0 && spec.speed.is_finite()) {
        return infeasible(format!("speed {} must be >= 0", spec.speed));
    }
    if let Trajectory::Sinusoidal { amplitude, period } = spec.trajectory {
        if !(amplitude.is_finite() && period > 0.0) {
            return infeasible("sinusoid needs a finite amplitude and positive period".into());
        }
    }
    match spec.corruption {
        Corruption::None => {}
        Corruption::Teleport(p) if (0.0..=1.0).contains(&p) => {}
        Corruption::Teleport(p) => return infeasible(format!("teleport probability {p} outside [0, 1]")),
        Corruption::Duplicate { start, end } if start < end && end <= dims.frames => {}
        Corruption::Duplicate { start, end } => {
            return infeasible(format!("duplicate span {start}..{end} outside 0..{}", dims.frames))
        }
        Corruption::Pop(frame) if frame < dims.frames => {}
        Corruption::Pop(frame) => return infeasible(format!("pop frame {frame} outside 0..{}", dims.frames)),
    }
    Ok(())
}

struct Blob {
    start: (f64, f64),
    /// Unit direction and speed fraction in `[0.5, 1]`.
    heading: (f64, f64),
    speed_fraction: f64,
    amplitude: Vec<f64>,
}

/// Raised cosine of the normalized distance, zero outside the radius.
fn bump(distance: f64, radius: f64) -> f64 {
    let r = distance / radius;
    if r >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * r).cos())
    }
}

fn torus_delta(a: f64, b: f64, n: f64) -> f64 {
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

/// Renders the scene. Every random quantity is drawn up front in a fixed
/// order, so changing the corruption or speed leaves the layout untouched.
pub fn generate(spec: &SceneSpec, dims: Dims) -> Result<GeneratedVideo> {
    validate(spec, dims)?;
    let (nw, nh) = (dims.width as f64, dims.height as f64);
    let condition = condition_for_seed(spec.seed, spec.directions);
    let sector = 2.0 * PI / spec.directions as f64;

    let mut layout = SeededRng::derived(spec.seed, LAYOUT_STREAM);
    let blobs: Vec<Blob> = (0..spec.blobs)
        .map(|_| {
            let start = (layout.uniform_range(0.0, nw), layout.uniform_range(0.0, nh));
            let angle = sector * (condition as f64 + layout.uniform_range(0.15, 0.85));
            let speed_fraction = layout.uniform_range(0.5, 1.0);
            let amplitude = vec![1.0; dims.channels];
            Blob {
                start,
                heading: (angle.cos(), angle.sin()),
                speed_fraction,
                amplitude,
            }
        })
        .collect();

    let mut jumps = SeededRng::derived(spec.seed, TELEPORT_STREAM);
    let teleports: Vec<(bool, Vec<(f64, f64)>)> = (0..dims.frames)
        .map(|_| {
            let draw = jumps.uniform();
            let targets = (0..spec.blobs)
                .map(|_| (jumps.uniform_range(0.0, nw), jumps.uniform_range(0.0, nh)))
                .collect();
            let fires = matches!(spec.corruption, Corruption::Teleport(p) if draw < p);
            (fires, targets)
        })
        .collect();

    let wobble = |f: usize| match spec.trajectory {
        Trajectory::Linear => 0.0,
        Trajectory::Sinusoidal { amplitude, period } => amplitude * (2.0 * PI * f as f64 / period).sin(),
    };

    // Positions per frame per blob.
    let mut positions = vec![Vec::with_capacity(spec.blobs); dims.frames];
    let mut anchors: Vec<(f64, f64)> = blobs.iter().map(|b| b.start).collect();
    for f in 0..dims.frames {
        let (fires, targets) = &teleports[f];
        for (b, blob) in blobs.iter().enumerate() {
            if f > 0 {
                let step = spec.speed * blob.speed_fraction;
                anchors[b].0 += step * blob.heading.0;
                anchors[b].1 += step * blob.heading.1;
                if *fires {
                    anchors[b] = targets[b];
                }
            }
            let side = wobble(f);
            positions[f].push((
                anchors[b].0 - side * blob.heading.1,
                anchors[b].1 + side * blob.heading.0,
            ));
        }
    }

    let mut video = LatentVideo::zeros(dims);
    for f in 0..dims.frames {
        let mut instances: Vec<((f64, f64), &[f64])> = Vec::with_capacity(spec.blobs + 1);
        for (b, blob) in blobs.iter().enumerate() {
            if b == 0 && matches!(spec.corruption, Corruption::Pop(at) if f >= at) {
                continue;
            }
            instances.push((positions[f][b], &blob.amplitude));
        }
        if let Corruption::Duplicate { start, end } = spec.corruption {
            if (start..end).contains(&f) {
                let (x, y) = positions[f][0];
                instances.push(((x + nw / 2.0, y + nh / 2.0), &blobs[0].amplitude));
            }
        }
        for w in 0..dims.width {
            for h in 0..dims.height {
                for c in 0..dims.channels {
                    let mut v = 0.0;
                    for &((x, y), amp) in &instances {
                        let dx = torus_delta(w as f64, x, nw);
                        let dy = torus_delta(h as f64, y, nh);
                        v += amp[c] * bump((dx * dx + dy * dy).sqrt(), spec.radius);
                    }
                    video.set(f, w, h, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }

    let label = if spec.corruption == Corruption::None {
        CoherenceLabel::Coherent
    } else {
        CoherenceLabel::Incoherent
    };
    let motion_magnitude = video.motion_magnitude();
    Ok(GeneratedVideo {
        video,
        label,
        condition,
        motion_magnitude,
    })
}

/// Clean video with the same layout as `spec` whose motion magnitude is
/// closest to `target`, found by scan plus bisection on speed. Fails when the
/// closest reachable value is off by more than `tolerance` (relative).
pub fn matched_coherent(spec: &SceneSpec, dims: Dims, target: f64, tolerance: f64) -> Result<GeneratedVideo> {
    let at = |speed: f64| {
        generate(
            &SceneSpec {
                corruption: Corruption::None,
                speed,
                ..*spec
            },
            dims,
        )
    };
    // Motion magnitude is not monotone in speed once blobs wrap around the
    // torus, so scan for the first bracketing interval before bisecting.
    let max_speed = dims.width.min(dims.height) as f64;
    let grid = 64;
    let mut lo = 0.0;
    let mut bracket = None;
    let mut best = at(0.0)?;
    for k in 1..=grid {
        let speed = max_speed * k as f64 / grid as f64;
        let candidate = at(speed)?;
        let reached = candidate.motion_magnitude >= target;
        if (candidate.motion_magnitude - target).abs() < (best.motion_magnitude - target).abs() {
            best = candidate;
        }
        if reached {
            bracket = Some(speed);
            break;
        }
        lo = speed;
    }
    let mut hi = bracket.unwrap_or(lo);
    if bracket.is_none() {
        lo = hi;
    }
    for _ in 0..60 {
        if hi - lo < 1e-12 || (best.motion_magnitude - target).abs() <= tolerance * target {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let candidate = at(mid)?;
        if candidate.motion_magnitude < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (candidate.motion_magnitude - target).abs() < (best.motion_magnitude - target).abs() {
            best = candidate;
        }
    }
    if (best.motion_magnitude - target).abs() <= tolerance * target {
        Ok(best)
    } else {
        Err(Error::Domain(format!(
            "could not match motion magnitude {target} (closest {})",
            best.motion_magnitude
        )))
    }
}

/// Corruption used for the `index`-th incoherent video of a corpus: cycles
/// through teleports, vanishing blobs and transient duplicates.
pub fn corpus_corruption(index: usize, seed: u64, frames: usize, teleport_probability: f64) -> Corruption {
    let mut rng = SeededRng::derived(seed, CORRUPTION_STREAM);
    match index % 3 {
        0 => Corruption::Teleport(teleport_probability),
        1 => {
            let lo = 1.min(frames - 1);
            let hi = frames.saturating_sub(1).max(lo + 1);
            Corruption::Pop(lo + rng.index(hi - lo))
        }
        _ => {
            let start = 1.min(frames - 1) + rng.index(frames.saturating_sub(2).max(1));
            let start = start.min(frames - 1);
            let len = 1 + rng.index(3);
            Corruption::Duplicate {
                start,
                end: (start + len).min(frames),
            }
        }
    }
}

/// Settings for [`build_corpus`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub per_class: usize,
    pub dims: Dims,
    pub scene: SceneSpec,
    pub teleport_probability: f64,
    pub seed: u64,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub label: CoherenceLabel,
    pub seed: u64,
    pub corruption: Corruption,
    pub motion_magnitude: f64,
    pub condition: u32,
    pub video: LatentVideo,
}

pub const MANIFEST_HEADER: &str = "path,label,seed,corruption,motion_magnitude";
const MATCH_TOLERANCE: f64 = 0.01;

/// Generates matched (incoherent, coherent) pairs in memory.
pub fn corpus_entries(spec: &CorpusSpec) -> Result<Vec<CorpusEntry>> {
    if spec.per_class == 0 {
        return Err(Error::Domain("corpus needs at least one video per class".into()));
    }
    if spec.dims.frames < 2 {
        return Err(Error::Domain("corpus videos need at least 2 frames".into()));
    }
    let mut entries = Vec::with_capacity(2 * spec.per_class);
    for i in 0..spec.per_class {
        let seed = mix(spec.seed, i as u64);
        let corruption = corpus_corruption(i, seed, spec.dims.frames, spec.teleport_probability);
        let scene = SceneSpec {
            seed,
            corruption,
            ..spec.scene
        };
        let bad = generate(&scene, spec.dims)?;
        let good = matched_coherent(&scene, spec.dims, bad.motion_magnitude, MATCH_TOLERANCE)?;
        for (tag, g, corruption) in [("coherent", good, Corruption::None), ("incoherent", bad, corruption)] {
            entries.push(CorpusEntry {
                path: PathBuf::from(format!("{tag}_{i:04}.fmt")),
                label: g.label,
                seed,
                corruption,
                motion_magnitude: g.motion_magnitude,
                condition: g.condition,
                video: g.video,
            });
        }
    }
    let class_mean = |label| {
        let v: Vec<f64> = entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.motion_magnitude)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (a, b) = (class_mean(CoherenceLabel::Coherent), class_mean(CoherenceLabel::Incoherent));
    if (a - b).abs() >= 0.1 * a.max(b) {
        return Err(Error::Numeric(format!(
            "class motion magnitudes {a} and {b} differ by 10% or more"
        )));
    }
    Ok(entries)
}

/// Writes `2 * per_class` tensor files plus `manifest.csv` into `out_dir`.
pub fn build_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let entries = corpus_entries(spec)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for e in &entries {
        tensor_write(&e.video, out_dir.join(&e.path))?;
        manifest.push_str(&format!(
            "{},{},{},{},{:.9}\n",
            e.path.display(),
            e.label,
            e.seed,
            e.corruption,
            e.motion_magnitude
        ));
    }
    let path = out_dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Manifest row as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: CoherenceLabel,
    pub seed: u64,
    pub corruption: String,
    pub motion_magnitude: f64,
}

/// Parses a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "manifest header {:?} is not {MANIFEST_HEADER:?}",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::Format(format!("manifest row {}: {what}", i + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            Ok(ManifestRow {
                path: base.join(cols[0]),
                label: cols[1].parse().map_err(|e: String| bad(&e))?,
                seed: cols[2].parse().map_err(|_| bad("bad seed"))?,
                corruption: cols[3].to_string(),
                motion_magnitude: cols[4].parse().map_err(|_| bad("bad motion magnitude"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::flowmo_loss;

    fn default_dims() -> Dims {
        Dims::new(8, 16, 16, 4).unwrap()
    }

    #[test]
    fn static_scene_has_zero_loss() {
        let spec = SceneSpec { speed: 0.0, seed: 3, ..SceneSpec::default() };
        let g = generate(&spec, default_dims()).unwrap();
        assert_eq!(g.label, CoherenceLabel::Coherent);
        for f in 1..8 {
            assert_eq!(g.video.frame(f), g.video.frame(0));
        }
        assert_eq!(g.motion_magnitude, 0.0);
        assert_eq!(flowmo_loss(&g.video).unwrap().loss, 0.0);
    }

    #[test]
    fn deterministic_and_in_range() {
        let spec = SceneSpec { seed: 42, corruption: Corruption::Teleport(0.5), ..SceneSpec::default() };
        let a = generate(&spec, default_dims()).unwrap();
        let b = generate(&spec, default_dims()).unwrap();
        assert_eq!(a.video, b.video);
        assert!(a.video.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.label, CoherenceLabel::Incoherent);
        assert!(a.condition < 4);
    }

    #[test]
    fn infeasible_specs() {
        let d = default_dims();
        let bad = [
            SceneSpec { radius: 8.0, ..SceneSpec::default() },
            SceneSpec { blobs: 0, ..SceneSpec::default() },
            SceneSpec { corruption: Corruption::Teleport(1.5), ..SceneSpec::default() },
            SceneSpec { corruption: Corruption::Duplicate { start: 5, end: 9 }, ..SceneSpec::default() },
            SceneSpec { corruption: Corruption::Pop(8), ..SceneSpec::default() },
        ];
        for spec in bad {
            assert!(matches!(generate(&spec, d), Err(Error::Domain(_))), "{spec:?}");
        }
    }

    #[test]
    fn teleporting_scores_above_its_clean_twin() {
        let d = default_dims();
        let mut wins = 0;
        for seed in 0..100 {
            let spec = SceneSpec { seed, corruption: Corruption::Teleport(1.0), ..SceneSpec::default() };
            let bad = generate(&spec, d).unwrap();
            let good = generate(&SceneSpec { corruption: Corruption::None, ..spec }, d).unwrap();
            assert_eq!(good.video.frame(0), bad.video.frame(0));
            if flowmo_loss(&bad.video).unwrap().loss > flowmo_loss(&good.video).unwrap().loss {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}/100");
    }

    #[test]
    fn matched_twin_hits_target_motion() {
        let d = default_dims();
        for seed in 0..10 {
            let spec = SceneSpec { seed, corruption: Corruption::Pop(3), ..SceneSpec::default() };
            let bad = generate(&spec, d).unwrap();
            let good = matched_coherent(&spec, d, bad.motion_magnitude, 0.01).unwrap();
            assert_eq!(good.label, CoherenceLabel::Coherent);
            assert!((good.motion_magnitude - bad.motion_magnitude).abs() <= 0.01 * bad.motion_magnitude);
        }
    }

    #[test]
    fn sinusoidal_trajectory_is_smooth() {
        let spec = SceneSpec {
            seed: 9,
            trajectory: Trajectory::Sinusoidal { amplitude: 1.5, period: 8.0 },
            ..SceneSpec::default()
        };
        let g = generate(&spec, default_dims()).unwrap();
        assert_eq!(g.label, CoherenceLabel::Coherent);
        assert!(g.motion_magnitude > 0.0);
    }

    #[test]
    fn corpus_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            per_class: 1,
            dims: Dims::new(6, 12, 12, 2).unwrap(),
            scene: SceneSpec::default(),
            teleport_probability: 0.3,
            seed: 5,
        };
        let manifest = build_corpus(&spec, dir.path()).unwrap();
        let rows = read_manifest(&manifest).unwrap();
        assert_eq!(rows.len(), 2);
        let tensors = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "fmt"))
            .count();
        assert_eq!(tensors, 2);
        let first = fs::read(&manifest).unwrap();
        build_corpus(&spec, dir.path()).unwrap();
        assert_eq!(fs::read(&manifest).unwrap(), first);
    }

    #[test]
    fn corpus_motion_is_matched_across_classes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            per_class: 6,
            dims: default_dims(),
            scene: SceneSpec::default(),
            teleport_probability: 0.3,
            seed: 11,
        };
        let manifest = build_corpus(&spec, dir.path()).unwrap();
        let rows = read_manifest(&manifest).unwrap();
        let mean_of = |label: CoherenceLabel| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.label == label)
                .map(|r| crate::tensor::tensor_read(&r.path).unwrap().motion_magnitude())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let a = mean_of(CoherenceLabel::Coherent);
        let b = mean_of(CoherenceLabel::Incoherent);
        assert!((a - b).abs() < 0.1 * a.max(b), "{a} vs {b}");
        for r in &rows {
            assert_eq!(r.label == CoherenceLabel::Coherent, r.corruption == "none");
        }
    }

    #[test]
    fn corruption_cycle_is_valid() {
        for i in 0..30 {
            let c = corpus_corruption(i, i as u64 * 7, 8, 0.3);
            let spec = SceneSpec { corruption: c, ..SceneSpec::default() };
            assert!(generate(&spec, default_dims()).is_ok(), "{c:?}");
        }
    }
}
