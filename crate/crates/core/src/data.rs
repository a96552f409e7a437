//! Motion capture ingestion, windowing, ID/OoD splits and a synthetic
//! sinusoid generator used when no real data is at hand.
//!
//! Text format: one frame per line, comma-separated decimal values. A dataset
//! lives under `<root>/<subject>/<action>_<trial>.txt`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dct::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Representation {
    #[default]
    ExpMap,
    Cartesian3d,
}

impl Representation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expmap" | "exp-map" | "angle" => Ok(Representation::ExpMap),
            "3d" | "cartesian" | "cartesian-3d" => Ok(Representation::Cartesian3d),
            other => Err(Error::invalid(format!("unknown representation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Representation::ExpMap => "expmap",
            Representation::Cartesian3d => "3d",
        }
    }
}

/// One recorded trial. `frames` is `L × K`, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub action: String,
    pub subject: String,
    pub trial: String,
    pub frames: Tensor,
    pub representation: Representation,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    /// `K × L` view used by the transforms.
    pub fn trajectory(&self) -> Tensor {
        self.frames.transpose2()
    }
}

/// Parses comma-separated frames. Errors carry the 1-based line number.
pub fn parse_motion_text(text: &str, path: &Path) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("non-numeric field {:?}", f.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(format!("expected {} fields, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), line: 0, msg: "file has no frames".into() });
    }
    Tensor::from_rows(&rows)
}

/// Loads one sequence; action and trial come from the `<action>_<trial>` stem,
/// subject from the parent directory.
pub fn load_motion_text(path: &Path, representation: Representation) -> Result<MotionSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let frames = parse_motion_text(&text, path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let (action, trial) = split_stem(stem);
    let subject = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    Ok(MotionSequence { action, subject, trial, frames, representation })
}

fn split_stem(stem: &str) -> (String, String) {
    match stem.rsplit_once('_') {
        Some((a, t)) if !a.is_empty() && t.chars().all(|c| c.is_ascii_digit()) && !t.is_empty() => {
            (a.to_string(), t.to_string())
        }
        _ => (stem.to_string(), "1".to_string()),
    }
}

/// Writes frames with shortest round-trip formatting, so reloading is exact.
pub fn save_motion_text(seq: &MotionSequence, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in 0..seq.frames.rows() {
        for c in 0..seq.frames.cols() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{:?}", seq.frames.at2(r, c)).expect("string write");
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A set of sequences sharing one channel count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<MotionSequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<MotionSequence>) -> Result<Self> {
        if let Some(first) = sequences.first() {
            let k = first.channels();
            if let Some(bad) = sequences.iter().find(|s| s.channels() != k) {
                return Err(Error::invalid(format!(
                    "{}/{}_{} has {} channels, expected {k}",
                    bad.subject,
                    bad.action,
                    bad.trial,
                    bad.channels()
                )));
            }
        }
        Ok(Dataset { sequences })
    }

    pub fn channels(&self) -> Option<usize> {
        self.sequences.first().map(MotionSequence::channels)
    }

    pub fn actions(&self) -> BTreeSet<&str> {
        self.sequences.iter().map(|s| s.action.as_str()).collect()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.sequences.iter().map(|s| s.subject.as_str()).collect()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for s in &self.sequences {
            save_motion_text(s, &root.join(&s.subject).join(format!("{}_{}.txt", s.action, s.trial)))?;
        }
        Ok(())
    }
}

/// Options for [`load_dataset`].
#[derive(Clone, Debug, Default)]
pub struct LoadConfig {
    pub representation: Representation,
    /// Drop the leading global translation/rotation channels (6 values).
    pub drop_global: bool,
    /// File extension to pick up.
    pub extension: Option<String>,
}

pub const GLOBAL_CHANNELS: usize = 6;

/// Reads every `<root>/<subject>/<action>_<trial>.<ext>` file, sorted by path.
pub fn load_dataset(root: &Path, cfg: &LoadConfig) -> Result<Dataset> {
    let ext = cfg.extension.as_deref().unwrap_or("txt");
    let read_dir = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
            .collect::<Result<Vec<_>>>()?;
        v.sort();
        Ok(v)
    };
    let mut sequences = Vec::new();
    for subject in read_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        for file in read_dir(&subject)? {
            if file.extension().and_then(|e| e.to_str()) != Some(ext) {
                continue;
            }
            let mut seq = load_motion_text(&file, cfg.representation)?;
            if cfg.drop_global {
                if seq.channels() <= GLOBAL_CHANNELS {
                    return Err(Error::invalid(format!(
                        "{} has only {} channels, cannot drop global ones",
                        file.display(),
                        seq.channels()
                    )));
                }
                seq.frames = crate::dct::columns(&seq.frames, GLOBAL_CHANNELS, seq.channels() - GLOBAL_CHANNELS);
            }
            sequences.push(seq);
        }
    }
    if sequences.is_empty() {
        return Err(Error::invalid(format!("no .{ext} files under {}", root.display())));
    }
    Dataset::new(sequences)
}

/// Windows of `N + T` frames starting at `0, stride, 2·stride, …`.
pub fn window_samples(seq: &MotionSequence, observed: usize, future: usize, stride: usize) -> Result<Vec<TrajectoryWindow>> {
    let span = observed + future;
    if stride == 0 || observed == 0 {
        return Err(Error::invalid("stride and observed length must be positive"));
    }
    if seq.len() < span {
        return Err(Error::invalid(format!(
            "{}/{}_{} has {} frames, needs at least N+T = {span}",
            seq.subject,
            seq.action,
            seq.trial,
            seq.len()
        )));
    }
    let traj = seq.trajectory();
    let count = (seq.len() - span) / stride + 1;
    (0..count)
        .map(|i| TrajectoryWindow::new(crate::dct::columns(&traj, i * stride, span), observed))
        .collect()
}

/// Windows of every sequence in order.
pub fn windows_of(seqs: &[MotionSequence], observed: usize, future: usize, stride: usize) -> Result<Vec<TrajectoryWindow>> {
    let mut out = Vec::new();
    for s in seqs {
        out.extend(window_samples(s, observed, future, stride)?);
    }
    Ok(out)
}

/// Which subjects and actions form each partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub id_action: String,
    pub train_subjects: Vec<String>,
    /// When absent, the last ID trial of the training subjects is held out.
    pub validation_subject: Option<String>,
    pub test_subject: String,
    pub ood_actions: Vec<String>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ood_actions.contains(&self.id_action) {
            return Err(Error::invalid(format!("ID action {} also listed as OoD", self.id_action)));
        }
        let mut seen = BTreeSet::new();
        let all = self
            .train_subjects
            .iter()
            .chain(self.validation_subject.iter())
            .chain(std::iter::once(&self.test_subject));
        for s in all {
            if !seen.insert(s) {
                return Err(Error::invalid(format!("subject {s} assigned to more than one partition")));
            }
        }
        if self.train_subjects.is_empty() {
            return Err(Error::invalid("no training subjects"));
        }
        Ok(())
    }

    /// Walking as ID, fourteen OoD actions, validation on S11, test on S5.
    pub fn h36m_walking() -> Self {
        let ood = [
            "directions", "discussion", "eating", "greeting", "phoning", "posing", "purchases",
            "sitting", "sittingdown", "smoking", "takingphoto", "waiting", "walkingdog", "walkingtogether",
        ];
        SplitSpec {
            id_action: "walking".into(),
            train_subjects: ["S1", "S6", "S7", "S8", "S9"].map(String::from).to_vec(),
            validation_subject: Some("S11".into()),
            test_subject: "S5".into(),
            ood_actions: ood.map(String::from).to_vec(),
        }
    }

    /// Basketball as ID with seven OoD actions. The usual CMU distribution
    /// ships `train/` and `test/` folders, used here as subjects.
    pub fn cmu_basketball() -> Self {
        let ood = [
            "basketball_signal", "directing_traffic", "jumping", "running", "soccer", "walking", "washwindow",
        ];
        SplitSpec {
            id_action: "basketball".into(),
            train_subjects: vec!["train".into()],
            validation_subject: None,
            test_subject: "test".into(),
            ood_actions: ood.map(String::from).to_vec(),
        }
    }

    /// Class 0 as ID on the subjects produced by [`synthetic_preset`].
    pub fn synthetic(classes: usize) -> Self {
        SplitSpec {
            id_action: synthetic_class_name(0),
            train_subjects: vec!["s1".into(), "s2".into(), "s3".into()],
            validation_subject: Some("s4".into()),
            test_subject: "s5".into(),
            ood_actions: (1..classes).map(synthetic_class_name).collect(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "h36m-walking" => Ok(Self::h36m_walking()),
            "cmu-basketball" => Ok(Self::cmu_basketball()),
            "synthetic" => Ok(Self::synthetic(SYNTHETIC_CLASSES)),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?} (expected h36m-walking, cmu-basketball or synthetic)"
            ))),
        }
    }
}

/// Sequences per partition; every input sequence lands in at most one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OodSplit {
    pub train: Vec<MotionSequence>,
    pub val: Vec<MotionSequence>,
    pub test_id: Vec<MotionSequence>,
    pub test_ood: BTreeMap<String, Vec<MotionSequence>>,
}

pub fn make_ood_split(dataset: &Dataset, spec: &SplitSpec) -> Result<OodSplit> {
    spec.validate()?;
    let actions = dataset.actions();
    let subjects = dataset.subjects();
    for a in std::iter::once(&spec.id_action).chain(&spec.ood_actions) {
        if !actions.contains(a.as_str()) {
            return Err(Error::invalid(format!("action {a} not present in dataset")));
        }
    }
    for s in spec.train_subjects.iter().chain(spec.validation_subject.iter()).chain([&spec.test_subject]) {
        if !subjects.contains(s.as_str()) {
            return Err(Error::invalid(format!("subject {s} not present in dataset")));
        }
    }
    let mut split = OodSplit::default();
    for s in &dataset.sequences {
        let is_id = s.action == spec.id_action;
        if is_id && spec.train_subjects.contains(&s.subject) {
            split.train.push(s.clone());
        } else if is_id && spec.validation_subject.as_ref() == Some(&s.subject) {
            split.val.push(s.clone());
        } else if s.subject == spec.test_subject {
            if is_id {
                split.test_id.push(s.clone());
            } else if spec.ood_actions.contains(&s.action) {
                split.test_ood.entry(s.action.clone()).or_default().push(s.clone());
            }
        }
    }
    if spec.validation_subject.is_none() {
        if split.train.len() < 2 {
            return Err(Error::invalid("need at least two ID training trials to hold one out for validation"));
        }
        split.val.push(split.train.pop().expect("checked length"));
    }
    if split.train.is_empty() || split.val.is_empty() || split.test_id.is_empty() {
        return Err(Error::invalid(format!("action {} missing from a train/val/test subject", spec.id_action)));
    }
    for a in &spec.ood_actions {
        if !split.test_ood.contains_key(a) {
            return Err(Error::invalid(format!("OoD action {a} has no sequence for test subject {}", spec.test_subject)));
        }
    }
    Ok(split)
}

/// One synthetic action class: `x_k(t) = a_k sin(2π f_k t + φ_k) + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClassSpec {
    pub name: String,
    /// Per-joint frequency in Hz.
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticClassSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.frequencies.len();
        if k == 0 || self.amplitudes.len() != k || self.phases.len() != k {
            return Err(Error::invalid(format!("class {}: per-joint vectors must share a non-zero length", self.name)));
        }
        if self.frequencies.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::invalid(format!("class {}: frequencies must be positive", self.name)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid(format!("class {}: noise must be non-negative", self.name)));
        }
        Ok(())
    }
}

/// Sequence `i` of each class belongs to subject `s{i+1}` and starts at a
/// random phase offset, so windows of one class are not all alike.
pub fn synthesize_dataset(
    specs: &[SyntheticClassSpec],
    sequences_per_class: usize,
    length: usize,
    fps: f64,
) -> Result<Dataset> {
    if specs.len() < 2 {
        return Err(Error::invalid("synthetic dataset needs at least two classes"));
    }
    if !(fps > 0.0) || length == 0 || sequences_per_class == 0 {
        return Err(Error::invalid("fps, length and sequences per class must be positive"));
    }
    let k = specs[0].frequencies.len();
    let mut sequences = Vec::new();
    for spec in specs {
        spec.validate()?;
        if spec.frequencies.len() != k {
            return Err(Error::invalid("all synthetic classes need the same joint count"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for i in 0..sequences_per_class {
            let offset = if sequences_per_class > 1 || spec.noise_std > 0.0 {
                rng.random_range(0.0..2.0 * PI)
            } else {
                0.0
            };
            let mut frames = Tensor::zeros(&[length, k]);
            for n in 0..length {
                let t = n as f64 / fps;
                for j in 0..k {
                    let clean = spec.amplitudes[j] * (2.0 * PI * spec.frequencies[j] * t + spec.phases[j] + offset).sin();
                    let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    frames.set2(n, j, clean + eps);
                }
            }
            sequences.push(MotionSequence {
                action: spec.name.clone(),
                subject: format!("s{}", i + 1),
                trial: "1".into(),
                frames,
                representation: Representation::ExpMap,
            });
        }
    }
    Dataset::new(sequences)
}

pub const SYNTHETIC_CLASSES: usize = 4;

pub fn synthetic_class_name(c: usize) -> String {
    format!("class{c}")
}

/// Classes in disjoint bands `[1 + 1.5c, 1.5 + 1.5c]` Hz with random per-joint
/// frequency, amplitude and phase inside each band.
pub fn synthetic_class_specs(classes: usize, joints: usize, noise_std: f64, seed: u64) -> Vec<SyntheticClassSpec> {
    (0..classes)
        .map(|c| {
            let class_seed = seed.wrapping_mul(1_000_003).wrapping_add(c as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
            let lo = 1.0 + 1.5 * c as f64;
            SyntheticClassSpec {
                name: synthetic_class_name(c),
                frequencies: (0..joints).map(|_| rng.random_range(lo..=lo + 0.5)).collect(),
                amplitudes: (0..joints).map(|_| rng.random_range(0.5..1.0)).collect(),
                phases: (0..joints).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
                noise_std,
                seed: class_seed,
            }
        })
        .collect()
}

/// Shape of the default synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticPreset {
    pub classes: usize,
    pub joints: usize,
    /// One sequence per subject `s1..s5`.
    pub sequences_per_class: usize,
    pub length: usize,
    pub fps: f64,
    pub noise_std: f64,
}

impl Default for SyntheticPreset {
    fn default() -> Self {
        SyntheticPreset { classes: SYNTHETIC_CLASSES, joints: 8, sequences_per_class: 5, length: 200, fps: 25.0, noise_std: 0.02 }
    }
}

pub fn synthetic_preset(p: &SyntheticPreset, seed: u64) -> Result<Dataset> {
    let specs = synthetic_class_specs(p.classes, p.joints, p.noise_std, seed);
    synthesize_dataset(&specs, p.sequences_per_class, p.length, p.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::{dct_forward, TrajectoryWindow};
    use proptest::prelude::*;

    fn seq(len: usize, k: usize) -> MotionSequence {
        MotionSequence {
            action: "walking".into(),
            subject: "S1".into(),
            trial: "1".into(),
            frames: Tensor::from_fn(&[len, k], |i| i as f64),
            representation: Representation::ExpMap,
        }
    }

    #[test]
    fn parses_three_frames() {
        let t = parse_motion_text("1,2\n3,4\n5,6\n", Path::new("x.txt")).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at2(2, 1), 6.0);
    }

    #[test]
    fn ragged_row_names_line() {
        let err = parse_motion_text("1,2\n3,4\n5\n", Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_motion_text("1,2\n3,abc\n", Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_motion_text("\n\n", Path::new("x.txt")).is_err());
    }

    #[test]
    fn stems_split_on_trailing_trial_number() {
        assert_eq!(split_stem("walking_1"), ("walking".into(), "1".into()));
        assert_eq!(split_stem("basketball_signal_12"), ("basketball_signal".into(), "12".into()));
        assert_eq!(split_stem("walking"), ("walking".into(), "1".into()));
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_samples(&seq(100, 2), 10, 10, 1).unwrap().len(), 81);
        assert_eq!(window_samples(&seq(20, 2), 10, 10, 1).unwrap().len(), 1);
        assert!(window_samples(&seq(19, 2), 10, 10, 1).is_err());
    }

    #[test]
    fn future_segment_matches_source() {
        let s = seq(50, 3);
        for (i, w) in window_samples(&s, 7, 5, 4).unwrap().iter().enumerate() {
            let fut = w.future_part();
            for k in 0..3 {
                for t in 0..5 {
                    assert_eq!(fut.at2(k, t), s.frames.at2(i * 4 + 7 + t, k));
                }
            }
        }
    }

    #[test]
    fn stride_span_windows_tile_the_sequence() {
        let s = seq(60, 2);
        let ws = window_samples(&s, 6, 4, 10).unwrap();
        let mut rebuilt = Vec::new();
        for w in &ws {
            for t in 0..10 {
                rebuilt.push(w.data().at2(1, t));
            }
        }
        let want: Vec<f64> = (0..60).map(|n| s.frames.at2(n, 1)).collect();
        assert_eq!(rebuilt, want);
    }

    #[test]
    fn pure_sinusoid_concentrates_dct_energy() {
        // frequency on DCT bin 4 of a 20-frame window at 25 fps: f = l·fps / 2L
        let (fps, len, bin) = (25.0, 20usize, 4.0);
        let f = bin * fps / (2.0 * len as f64);
        let spec = SyntheticClassSpec {
            name: "a".into(),
            frequencies: vec![f],
            amplitudes: vec![1.0],
            phases: vec![PI / 2.0 + PI * f / fps],
            noise_std: 0.0,
            seed: 0,
        };
        let mut other = spec.clone();
        other.name = "b".into();
        let ds = synthesize_dataset(&[spec, other], 1, len, fps).unwrap();
        let w = TrajectoryWindow::new(ds.sequences[0].trajectory(), 10).unwrap();
        let c = dct_forward(&w, len).unwrap().coeffs;
        let mut energy: Vec<f64> = c.data().iter().map(|v| v * v).collect();
        let total: f64 = energy.iter().sum();
        energy.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((energy[0] + energy[1]) / total > 0.999, "{energy:?}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = SyntheticPreset::default();
        assert_eq!(synthetic_preset(&p, 3).unwrap(), synthetic_preset(&p, 3).unwrap());
        assert_ne!(synthetic_preset(&p, 3).unwrap(), synthetic_preset(&p, 4).unwrap());
        assert!(synthesize_dataset(&synthetic_class_specs(1, 2, 0.0, 0), 1, 10, 25.0).is_err());
    }

    #[test]
    fn presets_have_documented_shape() {
        let h = SplitSpec::h36m_walking();
        assert_eq!(h.ood_actions.len(), 14);
        assert_eq!(h.test_subject, "S5");
        assert_eq!(h.validation_subject.as_deref(), Some("S11"));
        assert_eq!(SplitSpec::cmu_basketball().ood_actions.len(), 7);
        for p in [h, SplitSpec::cmu_basketball(), SplitSpec::synthetic(4)] {
            p.validate().unwrap();
        }
        assert!(SplitSpec::preset("nope").is_err());
    }

    #[test]
    fn synthetic_split_is_disjoint_and_exhaustive() {
        let ds = synthetic_preset(&SyntheticPreset::default(), 1).unwrap();
        let split = make_ood_split(&ds, &SplitSpec::synthetic(4)).unwrap();
        let key = |s: &MotionSequence| (s.subject.clone(), s.action.clone(), s.trial.clone());
        let mut seen = BTreeSet::new();
        let all = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test_id)
            .chain(split.test_ood.values().flatten());
        for s in all {
            assert!(seen.insert(key(s)), "duplicate {:?}", key(s));
        }
        // every ID sequence plus every test-subject sequence is placed
        let expected = ds.sequences.iter().filter(|s| s.action == "class0" || s.subject == "s5").count();
        assert_eq!(seen.len(), expected);
        assert_eq!(split.test_ood.len(), 3);
        assert!(split.train.iter().all(|s| s.action == "class0"));
    }

    #[test]
    fn split_errors() {
        let ds = synthetic_preset(&SyntheticPreset::default(), 1).unwrap();
        let mut spec = SplitSpec::synthetic(4);
        spec.ood_actions.push("class0".into());
        assert!(make_ood_split(&ds, &spec).is_err());
        let mut spec = SplitSpec::synthetic(4);
        spec.ood_actions.push("flying".into());
        assert!(make_ood_split(&ds, &spec).is_err());
        let mut spec = SplitSpec::synthetic(4);
        spec.test_subject = "s9".into();
        assert!(make_ood_split(&ds, &spec).is_err());
    }

    #[test]
    fn missing_validation_subject_holds_out_a_trial() {
        let mut seqs = Vec::new();
        for (subj, action, trial) in [("train", "a", "1"), ("train", "a", "2"), ("train", "b", "1"), ("test", "a", "1"), ("test", "b", "1")] {
            let mut s = seq(30, 2);
            s.subject = subj.into();
            s.action = action.into();
            s.trial = trial.into();
            seqs.push(s);
        }
        let ds = Dataset::new(seqs).unwrap();
        let spec = SplitSpec {
            id_action: "a".into(),
            train_subjects: vec!["train".into()],
            validation_subject: None,
            test_subject: "test".into(),
            ood_actions: vec!["b".into()],
        };
        let split = make_ood_split(&ds, &spec).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.val[0].trial, "2");
    }

    proptest! {
        #[test]
        fn window_count_formula(len in 2usize..120, n in 1usize..10, t in 1usize..10, stride in 1usize..12) {
            let s = seq(len, 2);
            match window_samples(&s, n, t, stride) {
                Ok(ws) => {
                    prop_assert!(len >= n + t);
                    prop_assert_eq!(ws.len(), (len - n - t) / stride + 1);
                    for (i, w) in ws.iter().enumerate() {
                        prop_assert_eq!(w.data().at2(0, 0), s.frames.at2(i * stride, 0));
                    }
                }
                Err(_) => prop_assert!(len < n + t),
            }
        }
    }
}
