//! Run configuration: `[section]` headers with `key = value` lines. Every
//! run writes its resolved configuration back in the same format.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use motion_ood::benchmark::{ModelVariant, LONG_HORIZONS_MS, SHORT_HORIZONS_MS};
use motion_ood::data::{Representation, SyntheticPreset};
use motion_ood::gradcheck::Stencil;
use motion_ood::losses::HorizonMetric;
use motion_ood::model::{GcnConfig, ModelConfig, VaeConfig};
use motion_ood::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// `None` only for the synthetic preset, which is generated in memory.
    pub root: Option<PathBuf>,
    pub preset: String,
    pub representation: Representation,
    pub drop_global: bool,
    pub observed: usize,
    pub future: usize,
    pub fps: f64,
    pub synthetic: SyntheticPreset,
    pub synthetic_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub dct: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub p_drop: f64,
    pub vae: bool,
    pub latent: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// 0 disables early stopping.
    pub patience: usize,
    /// 0 means no cap.
    pub max_steps: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSection {
    pub seeds: usize,
    pub horizons_ms: Vec<f64>,
    pub metric: HorizonMetric,
    /// 0 means `T`.
    pub test_stride: usize,
    pub variants: Vec<String>,
    pub gcn_p_drop: f64,
    pub hybrid_lambda: f64,
    pub hybrid_p_drop: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSection {
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentsSection {
    pub checkpoint: Option<PathBuf>,
    /// Empty selects every subject.
    pub subjects: Vec<String>,
    /// 0 means `T`.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSection {
    pub joints: usize,
    pub dct: usize,
    pub frames: usize,
    pub observed: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub latent: usize,
    pub batch: usize,
    pub p_drop: f64,
    pub step: f64,
    pub tolerance: f64,
    pub stencil: Stencil,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub benchmark: BenchmarkSection,
    pub classifier: ClassifierSection,
    pub latents: LatentsSection,
    pub gradcheck: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let v = VaeConfig::default();
        RunConfig {
            seed: 0,
            output: PathBuf::from("runs/latest"),
            data: DataSection {
                root: None,
                preset: "synthetic".into(),
                representation: Representation::ExpMap,
                drop_global: false,
                observed: 10,
                future: 10,
                fps: 25.0,
                synthetic: SyntheticPreset::default(),
                synthetic_seed: 0,
            },
            model: ModelSection {
                dct: 20,
                hidden: 256,
                blocks: 12,
                p_drop: 0.3,
                vae: true,
                latent: v.latent,
                encoder_blocks: v.encoder_blocks,
                decoder_blocks: v.decoder_blocks,
            },
            train: TrainSection {
                lambda: t.lambda,
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                clip_norm: t.clip_norm,
                patience: t.patience.unwrap_or(0),
                max_steps: 0,
                stride: 1,
            },
            benchmark: BenchmarkSection {
                seeds: 3,
                horizons_ms: SHORT_HORIZONS_MS.iter().chain(&LONG_HORIZONS_MS).copied().collect(),
                metric: HorizonMetric::MeanAbs,
                test_stride: 0,
                variants: vec!["gcn".into(), "hybrid".into()],
                gcn_p_drop: ModelVariant::plain().p_drop,
                hybrid_lambda: ModelVariant::hybrid().lambda,
                hybrid_p_drop: ModelVariant::hybrid().p_drop,
            },
            classifier: ClassifierSection { dropout: 0.5, batch_size: 2048, learning_rate: 1e-5, epochs: 10, stride: 1 },
            latents: LatentsSection { checkpoint: None, subjects: Vec::new(), stride: 0 },
            gradcheck: GradCheckSection {
                joints: 6,
                dct: 8,
                frames: 10,
                observed: 6,
                hidden: 16,
                blocks: 2,
                latent: 4,
                batch: 8,
                p_drop: 0.2,
                step: 1.5e-5,
                tolerance: 1e-4,
                stencil: Stencil::Central,
                lambdas: vec![0.0, 0.003, 1.0],
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets `section.key`; the top-level section is `run`.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        match (section, key) {
            ("run", "seed") => self.seed = parse(k, v)?,
            ("run", "output") => self.output = PathBuf::from(v),

            ("data", "root") => self.data.root = opt_path(v),
            ("data", "preset") => self.data.preset = v.to_string(),
            ("data", "representation") => self.data.representation = Representation::parse(v)?,
            ("data", "drop_global") => self.data.drop_global = parse_bool(k, v)?,
            ("data", "observed") => self.data.observed = parse(k, v)?,
            ("data", "future") => self.data.future = parse(k, v)?,
            ("data", "fps") => self.data.fps = parse(k, v)?,
            ("data", "synthetic_classes") => self.data.synthetic.classes = parse(k, v)?,
            ("data", "synthetic_joints") => self.data.synthetic.joints = parse(k, v)?,
            ("data", "synthetic_sequences") => self.data.synthetic.sequences_per_class = parse(k, v)?,
            ("data", "synthetic_length") => self.data.synthetic.length = parse(k, v)?,
            ("data", "synthetic_noise") => self.data.synthetic.noise_std = parse(k, v)?,
            ("data", "synthetic_seed") => self.data.synthetic_seed = parse(k, v)?,

            ("model", "dct") => self.model.dct = parse(k, v)?,
            ("model", "hidden") => self.model.hidden = parse(k, v)?,
            ("model", "blocks") => self.model.blocks = parse(k, v)?,
            ("model", "p_drop") => self.model.p_drop = parse(k, v)?,
            ("model", "vae") => self.model.vae = parse_bool(k, v)?,
            ("model", "latent") => self.model.latent = parse(k, v)?,
            ("model", "encoder_blocks") => self.model.encoder_blocks = parse(k, v)?,
            ("model", "decoder_blocks") => self.model.decoder_blocks = parse(k, v)?,

            ("train", "lambda") => self.train.lambda = parse(k, v)?,
            ("train", "learning_rate") => self.train.learning_rate = parse(k, v)?,
            ("train", "batch_size") => self.train.batch_size = parse(k, v)?,
            ("train", "epochs") => self.train.epochs = parse(k, v)?,
            ("train", "clip_norm") => self.train.clip_norm = parse(k, v)?,
            ("train", "patience") => self.train.patience = parse(k, v)?,
            ("train", "max_steps") => self.train.max_steps = parse(k, v)?,
            ("train", "stride") => self.train.stride = parse(k, v)?,

            ("benchmark", "seeds") => self.benchmark.seeds = parse(k, v)?,
            ("benchmark", "horizons_ms") => self.benchmark.horizons_ms = parse_list(k, v)?,
            ("benchmark", "metric") => self.benchmark.metric = HorizonMetric::parse(v)?,
            ("benchmark", "test_stride") => self.benchmark.test_stride = parse(k, v)?,
            ("benchmark", "variants") => self.benchmark.variants = parse_list(k, v)?,
            ("benchmark", "gcn_p_drop") => self.benchmark.gcn_p_drop = parse(k, v)?,
            ("benchmark", "hybrid_lambda") => self.benchmark.hybrid_lambda = parse(k, v)?,
            ("benchmark", "hybrid_p_drop") => self.benchmark.hybrid_p_drop = parse(k, v)?,

            ("classifier", "dropout") => self.classifier.dropout = parse(k, v)?,
            ("classifier", "batch_size") => self.classifier.batch_size = parse(k, v)?,
            ("classifier", "learning_rate") => self.classifier.learning_rate = parse(k, v)?,
            ("classifier", "epochs") => self.classifier.epochs = parse(k, v)?,
            ("classifier", "stride") => self.classifier.stride = parse(k, v)?,

            ("latents", "checkpoint") => self.latents.checkpoint = opt_path(v),
            ("latents", "subjects") => self.latents.subjects = parse_list(k, v)?,
            ("latents", "stride") => self.latents.stride = parse(k, v)?,

            ("gradcheck", "joints") => self.gradcheck.joints = parse(k, v)?,
            ("gradcheck", "dct") => self.gradcheck.dct = parse(k, v)?,
            ("gradcheck", "frames") => self.gradcheck.frames = parse(k, v)?,
            ("gradcheck", "observed") => self.gradcheck.observed = parse(k, v)?,
            ("gradcheck", "hidden") => self.gradcheck.hidden = parse(k, v)?,
            ("gradcheck", "blocks") => self.gradcheck.blocks = parse(k, v)?,
            ("gradcheck", "latent") => self.gradcheck.latent = parse(k, v)?,
            ("gradcheck", "batch") => self.gradcheck.batch = parse(k, v)?,
            ("gradcheck", "p_drop") => self.gradcheck.p_drop = parse(k, v)?,
            ("gradcheck", "step") => self.gradcheck.step = parse(k, v)?,
            ("gradcheck", "tolerance") => self.gradcheck.tolerance = parse(k, v)?,
            ("gradcheck", "stencil") => {
                self.gradcheck.stencil = match v {
                    "central" => Stencil::Central,
                    "five-point" => Stencil::FivePoint,
                    _ => bail!("{k}: expected central or five-point, got {v:?}"),
                }
            }
            ("gradcheck", "lambdas") => self.gradcheck.lambdas = parse_list(k, v)?,
            _ => bail!("unknown configuration key {name}"),
        }
        Ok(())
    }

    /// `section.key=value`, as given to `--set`.
    pub fn set_assignment(&mut self, s: &str) -> Result<()> {
        let (path, value) = s.split_once('=').ok_or_else(|| anyhow!("expected section.key=value, got {s:?}"))?;
        let (section, key) = path.trim().split_once('.').unwrap_or(("run", path.trim()));
        self.set(section, key, value.trim())
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut section = "run".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = || format!("{}:{}", origin.display(), i + 1);
            if let Some(rest) = line.strip_prefix('[') {
                section = rest.strip_suffix(']').with_context(|| format!("{}: unterminated section header", at()))?.trim().into();
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("{}: expected key = value", at()))?;
            self.set(&section, k.trim(), v.trim()).with_context(at)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        self.apply_text(&text, path)
    }

    pub fn to_ini(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let b = &self.benchmark;
        let c = &self.classifier;
        let l = &self.latents;
        let g = &self.gradcheck;
        let mut s = String::new();
        let mut w = |line: String| {
            s.push_str(&line);
            s.push('\n');
        };
        w("[run]".into());
        w(format!("seed = {}", self.seed));
        w(format!("output = {}", self.output.display()));
        w(String::new());
        w("[data]".into());
        w(format!("root = {}", path(&d.root)));
        w(format!("preset = {}", d.preset));
        w(format!("representation = {}", d.representation.name()));
        w(format!("drop_global = {}", d.drop_global));
        w(format!("observed = {}", d.observed));
        w(format!("future = {}", d.future));
        w(format!("fps = {:?}", d.fps));
        w(format!("synthetic_classes = {}", d.synthetic.classes));
        w(format!("synthetic_joints = {}", d.synthetic.joints));
        w(format!("synthetic_sequences = {}", d.synthetic.sequences_per_class));
        w(format!("synthetic_length = {}", d.synthetic.length));
        w(format!("synthetic_noise = {:?}", d.synthetic.noise_std));
        w(format!("synthetic_seed = {}", d.synthetic_seed));
        w(String::new());
        w("[model]".into());
        w(format!("dct = {}", m.dct));
        w(format!("hidden = {}", m.hidden));
        w(format!("blocks = {}", m.blocks));
        w(format!("p_drop = {:?}", m.p_drop));
        w(format!("vae = {}", m.vae));
        w(format!("latent = {}", m.latent));
        w(format!("encoder_blocks = {}", m.encoder_blocks));
        w(format!("decoder_blocks = {}", m.decoder_blocks));
        w(String::new());
        w("[train]".into());
        w(format!("lambda = {:?}", t.lambda));
        w(format!("learning_rate = {:?}", t.learning_rate));
        w(format!("batch_size = {}", t.batch_size));
        w(format!("epochs = {}", t.epochs));
        w(format!("clip_norm = {:?}", t.clip_norm));
        w(format!("patience = {}", t.patience));
        w(format!("max_steps = {}", t.max_steps));
        w(format!("stride = {}", t.stride));
        w(String::new());
        w("[benchmark]".into());
        w(format!("seeds = {}", b.seeds));
        w(format!("horizons_ms = {}", join(&b.horizons_ms)));
        w(format!("metric = {}", b.metric.name()));
        w(format!("test_stride = {}", b.test_stride));
        w(format!("variants = {}", join(&b.variants)));
        w(format!("gcn_p_drop = {:?}", b.gcn_p_drop));
        w(format!("hybrid_lambda = {:?}", b.hybrid_lambda));
        w(format!("hybrid_p_drop = {:?}", b.hybrid_p_drop));
        w(String::new());
        w("[classifier]".into());
        w(format!("dropout = {:?}", c.dropout));
        w(format!("batch_size = {}", c.batch_size));
        w(format!("learning_rate = {:?}", c.learning_rate));
        w(format!("epochs = {}", c.epochs));
        w(format!("stride = {}", c.stride));
        w(String::new());
        w("[latents]".into());
        w(format!("checkpoint = {}", path(&l.checkpoint)));
        w(format!("subjects = {}", join(&l.subjects)));
        w(format!("stride = {}", l.stride));
        w(String::new());
        w("[gradcheck]".into());
        w(format!("joints = {}", g.joints));
        w(format!("dct = {}", g.dct));
        w(format!("frames = {}", g.frames));
        w(format!("observed = {}", g.observed));
        w(format!("hidden = {}", g.hidden));
        w(format!("blocks = {}", g.blocks));
        w(format!("latent = {}", g.latent));
        w(format!("batch = {}", g.batch));
        w(format!("p_drop = {:?}", g.p_drop));
        w(format!("step = {:?}", g.step));
        w(format!("tolerance = {:?}", g.tolerance));
        w(format!("stencil = {}", if g.stencil == Stencil::Central { "central" } else { "five-point" }));
        w(format!("lambdas = {}", join(&g.lambdas.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>())));
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.ini");
        std::fs::write(&path, self.to_ini()).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            bail!("train.lambda must be finite and >= 0, got {}", t.lambda);
        }
        if !(self.benchmark.hybrid_lambda >= 0.0 && self.benchmark.hybrid_lambda.is_finite()) {
            bail!("benchmark.hybrid_lambda must be finite and >= 0, got {}", self.benchmark.hybrid_lambda);
        }
        for (name, p) in [
            ("model.p_drop", self.model.p_drop),
            ("benchmark.gcn_p_drop", self.benchmark.gcn_p_drop),
            ("benchmark.hybrid_p_drop", self.benchmark.hybrid_p_drop),
            ("classifier.dropout", self.classifier.dropout),
            ("gradcheck.p_drop", self.gradcheck.p_drop),
        ] {
            if !(0.0..1.0).contains(&p) {
                bail!("{name} must lie in [0, 1), got {p}");
            }
        }
        let d = &self.data;
        if d.observed < 2 || d.future == 0 {
            bail!("data.observed must be >= 2 and data.future >= 1");
        }
        if self.model.dct == 0 || self.model.dct > d.observed + d.future {
            bail!("model.dct must lie in 1..={} (observed + future), got {}", d.observed + d.future, self.model.dct);
        }
        if !(d.fps > 0.0) {
            bail!("data.fps must be positive");
        }
        if t.stride == 0 || self.classifier.stride == 0 {
            bail!("window strides must be positive");
        }
        if self.benchmark.seeds == 0 {
            bail!("benchmark.seeds must be at least 1");
        }
        if self.benchmark.horizons_ms.is_empty() || self.benchmark.horizons_ms.iter().any(|h| !(*h > 0.0)) {
            bail!("benchmark.horizons_ms must list positive horizons");
        }
        for v in &self.benchmark.variants {
            if v != "gcn" && v != "hybrid" {
                bail!("unknown benchmark variant {v:?} (expected gcn or hybrid)");
            }
        }
        if d.preset != "synthetic" && d.root.is_none() {
            bail!("preset {} needs a dataset root (--data)", d.preset);
        }
        if let Some(root) = &d.root {
            if !root.is_dir() {
                bail!("dataset root {} does not exist or is not a directory", root.display());
            }
        }
        self.train_config(self.seed).validate()?;
        self.model_config(0).validate()?;
        Ok(())
    }

    pub fn model_config(&self, joints: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            gcn: GcnConfig { joints: joints.max(1), dct_coeffs: m.dct, hidden: m.hidden, blocks: m.blocks, p_drop: m.p_drop },
            vae: m.vae.then_some(VaeConfig {
                latent: m.latent,
                encoder_blocks: m.encoder_blocks,
                decoder_blocks: m.decoder_blocks,
            }),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            clip_norm: t.clip_norm,
            lambda: t.lambda,
            seed,
            patience: (t.patience > 0).then_some(t.patience),
            max_steps: (t.max_steps > 0).then_some(t.max_steps),
            output_dir: None,
        }
    }

    pub fn variants(&self) -> Vec<ModelVariant> {
        let b = &self.benchmark;
        b.variants
            .iter()
            .map(|v| match v.as_str() {
                "gcn" => ModelVariant { p_drop: b.gcn_p_drop, ..ModelVariant::plain() },
                _ => ModelVariant { lambda: b.hybrid_lambda, p_drop: b.hybrid_p_drop, ..ModelVariant::hybrid() },
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        format!(
            "preset {} ({}), N={} T={} M={}, hidden {} x {} blocks, seed {}",
            self.data.preset,
            self.data.root.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "generated".into()),
            self.data.observed,
            self.data.future,
            self.model.dct,
            self.model.hidden,
            self.model.blocks,
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.data.root = Some("/tmp/data dir".into());
        c.train.learning_rate = 1.0 / 3.0;
        c.benchmark.horizons_ms = vec![80.0, 1000.0, 12.5];
        c.latents.subjects = vec!["S5".into(), "S11".into()];
        c.gradcheck.lambdas = vec![0.0, 0.1 + 0.2];
        let mut back = RunConfig::default();
        back.apply_text(&c.to_ini(), Path::new("x.ini")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_values_and_assignments_apply_in_order() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nseed = 4\n[train]\nlambda = 0.5\n\n[model]\nvae = false\n", Path::new("a.ini")).unwrap();
        assert_eq!((c.seed, c.train.lambda, c.model.vae), (4, 0.5, false));
        c.set_assignment("train.lambda=0.25").unwrap();
        c.set_assignment("seed = 9").unwrap();
        assert_eq!((c.seed, c.train.lambda), (9, 0.25));
    }

    #[test]
    fn errors_carry_location() {
        let mut c = RunConfig::default();
        let e = c.apply_text("[train]\nlambda = 0.1\nbogus = 1\n", Path::new("f.ini")).unwrap_err();
        assert!(format!("{e:#}").contains("f.ini:3"));
        assert!(c.apply_text("[model]\nhidden = many\n", Path::new("f.ini")).is_err());
        assert!(c.apply_text("[model\n", Path::new("f.ini")).is_err());
        assert!(c.set_assignment("train.lambda").is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let ok = RunConfig::default();
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.train.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.model.p_drop = 1.0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.data.preset = "h36m-walking".into();
        assert!(c.validate().unwrap_err().to_string().contains("--data"));
        let mut c = ok.clone();
        c.data.root = Some("/definitely/not/here".into());
        assert!(c.validate().unwrap_err().to_string().contains("/definitely/not/here"));
        let mut c = ok;
        c.model.dct = 21;
        assert!(c.validate().is_err());
    }
}
