//! Fully connected action classifier over DCT-encoded windows, used to check
//! whether the ID action is separable from the others.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{window_samples, Dataset};
use crate::dct::{pad_replicate, DctBasis};
use crate::error::{Error, Result};
use crate::model::{stream_rng, streams};
use crate::tensor::Tensor;
use crate::train::{adam_step, AdamState};

/// Hidden layer widths; fixed.
pub const HIDDEN: [usize; 3] = [1024, 512, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// `K · M`.
    pub input_dim: usize,
    pub classes: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    /// Reference settings: dropout 0.5, batch 2048, learning rate 1e-5, 10 epochs.
    pub fn new(input_dim: usize, classes: usize) -> Self {
        ClassifierConfig { input_dim, classes, dropout: 0.5, batch_size: 2048, learning_rate: 1e-5, epochs: 10, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("classifier input dimension must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid(format!("classifier needs at least two classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch size, epochs and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Flattened DCT inputs `[n, K·M]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Windows of the chosen subjects, padded from the observed frames and
    /// encoded to `retained` coefficients. Classes are the sorted action names.
    pub fn from_dataset(
        dataset: &Dataset,
        subjects: &[String],
        observed: usize,
        future: usize,
        stride: usize,
        retained: usize,
    ) -> Result<Self> {
        let class_names: Vec<String> = dataset.actions().into_iter().map(String::from).collect();
        let basis = DctBasis::new(retained, observed + future)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for seq in dataset.sequences.iter().filter(|s| subjects.contains(&s.subject)) {
            let label = class_names.iter().position(|c| *c == seq.action).expect("action listed");
            for w in window_samples(seq, observed, future, stride)? {
                let padded = pad_replicate(&w.observed_part(), future)?;
                rows.push(basis.encode(padded.data())?.into_data());
                labels.push(label);
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid(format!("no windows for subjects {subjects:?}")));
        }
        Ok(LabeledSet { inputs: Tensor::from_rows(&rows)?, labels, class_names })
    }

    fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.inputs.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], out).expect("row gather")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub class_names: Vec<String>,
    /// `(W [in, out], b [out])` per layer, hidden layers first.
    layers: Vec<(Tensor, Tensor)>,
}

fn forward(g: &mut Graph, layers: &[(Var, Var)], x: Var, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Var> {
    let mut a = x;
    let mut dropout = dropout;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let y = g.matmul(a, w)?;
        a = g.add_bias(y, b)?;
        if i + 1 < layers.len() {
            a = g.relu(a)?;
            if let Some((p, rng)) = dropout.as_mut() {
                let keep = 1.0 / (1.0 - *p);
                let mask = Tensor::from_fn(g.shape(a), |_| if rng.random::<f64>() < *p { 0.0 } else { keep });
                let m = g.constant(mask);
                a = g.mul(a, m)?;
            }
        }
    }
    Ok(a)
}

impl Classifier {
    /// Deterministic logits `[n, classes]` with dropout off.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        if inputs.rank() != 2 || inputs.cols() != self.config.input_dim {
            return Err(Error::shape("classifier", format!("input {:?}, expected [n, {}]", inputs.shape(), self.config.input_dim)));
        }
        let mut g = Graph::new();
        let layers: Vec<(Var, Var)> = self.layers.iter().map(|(w, b)| (g.constant(w.clone()), g.constant(b.clone()))).collect();
        let x = g.constant(inputs.clone());
        let out = forward(&mut g, &layers, x, None)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        let c = logits.cols();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
            .collect())
    }
}

/// Cross-entropy training with ReLU, dropout and Adam.
pub fn train_classifier(set: &LabeledSet, cfg: &ClassifierConfig) -> Result<Classifier> {
    cfg.validate()?;
    if set.inputs.cols() != cfg.input_dim || set.class_names.len() != cfg.classes {
        return Err(Error::invalid(format!(
            "set has {} features and {} classes, config says {} and {}",
            set.inputs.cols(),
            set.class_names.len(),
            cfg.input_dim,
            cfg.classes
        )));
    }
    let mut support = vec![0usize; cfg.classes];
    for &l in &set.labels {
        support[l] += 1;
    }
    if let Some(c) = support.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {} has no samples", set.class_names[c])));
    }

    let mut rng = stream_rng(cfg.seed, streams::CLASSIFIER);
    let mut dims = vec![cfg.input_dim];
    dims.extend(HIDDEN);
    dims.push(cfg.classes);
    let mut layers: Vec<(Tensor, Tensor)> = dims
        .windows(2)
        .map(|d| {
            let bound = 1.0 / (d[0] as f64).sqrt();
            (
                Tensor::from_fn(&[d[0], d[1]], |_| rng.random_range(-bound..=bound)),
                Tensor::from_fn(&[d[1]], |_| rng.random_range(-bound..=bound)),
            )
        })
        .collect();
    let shapes: Vec<Vec<usize>> = layers.iter().flat_map(|(w, b)| [w.shape().to_vec(), b.shape().to_vec()]).collect();
    let mut adam = AdamState::new(shapes.iter().map(Vec::as_slice));
    let mut order: Vec<usize> = (0..set.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vars: Vec<(Var, Var)> = layers.iter().map(|(w, b)| (g.param(w.clone()), g.param(b.clone()))).collect();
            let x = g.constant(set.rows(idx));
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
            let logits = forward(&mut g, &vars, x, dropout)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let mut grads = g.backward_scalar(loss)?;
            let grad_list: Vec<Tensor> = vars
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect();
            let mut params: Vec<&mut Tensor> = layers.iter_mut().flat_map(|(w, b)| [w, b]).collect();
            adam_step(&mut params, &grad_list, &mut adam, cfg.learning_rate)?;
        }
    }
    Ok(Classifier { config: cfg.clone(), class_names: set.class_names.clone(), layers })
}

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_names: Vec<String>) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("truth and prediction lengths differ"));
        }
        let c = class_names.len();
        let mut counts = vec![vec![0; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= c || p >= c {
                return Err(Error::invalid(format!("label {} outside {c} classes", t.max(p))));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { class_names, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for n in &self.class_names {
            write!(s, ",{n}").expect("string write");
        }
        s.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(n);
            for v in row {
                write!(s, ",{v}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn confusion_matrix(classifier: &Classifier, set: &LabeledSet) -> Result<ConfusionMatrix> {
    if set.class_names != classifier.class_names {
        return Err(Error::invalid("test set classes differ from the classifier's"));
    }
    let predicted = classifier.predict(&set.inputs)?;
    ConfusionMatrix::from_predictions(&set.labels, &predicted, set.class_names.clone())
}

/// `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(m: &ConfusionMatrix) -> Vec<ClassScores> {
    let c = m.counts.len();
    (0..c)
        .map(|k| {
            let tp = m.counts[k][k] as f64;
            let predicted: usize = (0..c).map(|i| m.counts[i][k]).sum();
            let actual: usize = m.counts[k].iter().sum();
            ClassScores {
                precision: (predicted > 0).then(|| tp / predicted as f64),
                recall: (actual > 0).then(|| tp / actual as f64),
            }
        })
        .collect()
}
