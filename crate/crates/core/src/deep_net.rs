//! Greedy layer-wise training and inference.
//!
//! Layer 1 learns `X ≈ D₁Z₁`. Every later layer takes the guarded inverse
//! activation of the previous codes as its data. The last layer is the joint
//! dictionary/classifier layer from [`crate::lcksvd`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::activation::{invert, ActivationKind, InversionGuard};
use crate::dict_layer::{code_least_squares, sparse_code_omp, train_layer, Coder, LayerSpec};
use crate::error::{Error, Result};
use crate::lcksvd::{
    argmax_columns, build_discriminative_code, build_targets, train_lcksvd1, train_lcksvd2,
    AtomAllocation, FinalLayerModel,
};
use crate::numerics::{Matrix, RngSeed};
use crate::supervised::{masked_codes_by_residual, train_class_discriminative, BlockLayout, ClassDictSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Unsupervised hidden layers, label-consistent final layer with classifier only.
    #[default]
    Ddnn1,
    /// Class-specific plus shared hidden layers, final layer with the discriminative code term.
    Ddnn2,
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddnn1" => Ok(Variant::Ddnn1),
            "ddnn2" => Ok(Variant::Ddnn2),
            other => Err(Error::InvalidSpec(format!("unknown variant '{other}'"))),
        }
    }
}

/// How codes are computed at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestCoder {
    /// Same coder and parameters each layer was trained with. Class-specific
    /// layers pick the best-reconstructing class block per sample.
    #[default]
    Mirror,
    RidgeLs { ridge: f64 },
    Omp { sparsity: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// One entry per layer; the last one is the final (classifier) layer.
    pub layers: Vec<LayerSpec>,
    pub activation: ActivationKind,
    pub guard: InversionGuard,
    pub final_mu: f64,
    /// Incoherence weight of class-specific layers.
    pub eta: f64,
    pub test_coder: TestCoder,
    pub seed: RngSeed,
}

impl NetworkSpec {
    /// Network with the given atom schedule and default hyperparameters,
    /// seeded from `seed` (see [`NetworkSpec::reseed`]).
    pub fn new(variant: Variant, atoms: &[usize], seed: RngSeed) -> Self {
        let mut spec = Self {
            variant,
            layers: atoms.iter().map(|&k| LayerSpec::new(k)).collect(),
            activation: ActivationKind::Tanh,
            guard: InversionGuard::default(),
            final_mu: 1.0,
            eta: 0.0,
            test_coder: TestCoder::Mirror,
            seed,
        };
        spec.reseed(seed);
        spec
    }

    /// Sets `seed` and derives every layer seed and the guard seed from it.
    pub fn reseed(&mut self, seed: RngSeed) {
        self.seed = seed;
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.seed = seed.derive(k as u64);
        }
        self.guard.seed = seed.derive(u64::MAX);
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidSpec("a network needs at least one layer".into()));
        };
        for (k, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| e.in_layer(k))?;
        }
        if last.atoms < classes {
            return Err(Error::InvalidSpec(format!(
                "final layer has {} atoms but there are {classes} classes",
                last.atoms
            )));
        }
        if self.variant == Variant::Ddnn2 {
            for (k, layer) in self.layers[..self.layers.len() - 1].iter().enumerate() {
                if layer.atoms < classes {
                    return Err(Error::InvalidSpec(format!(
                        "layer {k} has {} atoms; class-specific layers need at least one per class ({classes})",
                        layer.atoms
                    )));
                }
            }
        }
        if !(self.final_mu >= 0.0 && self.final_mu.is_finite()) {
            return Err(Error::InvalidSpec(format!("mu must be finite and >= 0, got {}", self.final_mu)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidSpec(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        match self.test_coder {
            TestCoder::RidgeLs { ridge } if !(ridge >= 0.0 && ridge.is_finite()) => {
                return Err(Error::InvalidSpec(format!("test ridge must be finite and >= 0, got {ridge}")));
            }
            TestCoder::Omp { sparsity: 0 } => {
                return Err(Error::InvalidSpec("test sparsity must be positive".into()));
            }
            _ => {}
        }
        self.guard.validate(self.activation)
    }
}

/// Block sizes of a class-specific layer with `atoms` atoms: one block per
/// class of `max(1, ⌊atoms / (C + 1)⌋)` atoms, the remainder shared.
pub fn class_block_layout(atoms: usize, classes: usize) -> BlockLayout {
    let per_class = (atoms / (classes + 1)).max(1);
    BlockLayout {
        classes,
        atoms_per_class: per_class,
        shared_atoms: atoms - classes * per_class,
    }
}

/// A trained hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayer {
    pub dictionary: Matrix,
    pub loss_trace: Vec<f64>,
    /// Present for class-specific layers.
    pub layout: Option<BlockLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNetwork {
    /// Hidden layers, input side first.
    pub layers: Vec<NetworkLayer>,
    pub final_layer: FinalLayerModel,
    pub final_loss_trace: Vec<f64>,
    pub activation: ActivationKind,
    pub guard: InversionGuard,
    /// Original label of each internal class index.
    pub class_labels: Vec<i64>,
    pub spec: NetworkSpec,
}

impl TrainedNetwork {
    pub fn input_dim(&self) -> usize {
        match self.layers.first() {
            Some(l) => l.dictionary.rows(),
            None => self.final_layer.dictionary.rows(),
        }
    }

    pub fn classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Last recorded objective of every layer, final layer included.
    pub fn layer_objectives(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| &l.loss_trace)
            .chain(core::iter::once(&self.final_loss_trace))
            .map(|t| t.last().copied().unwrap_or(0.0))
            .collect()
    }

    /// Sum of [`Self::layer_objectives`]. This is bookkeeping only; it is not
    /// a bound on any joint multi-layer objective.
    pub fn greedy_objective(&self) -> f64 {
        self.layer_objectives().iter().sum()
    }

    fn layer_coder(&self, k: usize) -> (Coder, usize, f64) {
        let l = &self.spec.layers[k];
        (l.coder, l.sparsity, l.ridge)
    }
}

/// A trained network together with the training-time codes of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DdnnFit {
    pub network: TrainedNetwork,
    /// Codes of each hidden layer, then of the final layer.
    pub codes: Vec<Matrix>,
}

/// Maps labels to `0..C` in order of first appearance.
pub fn remap_labels(labels: &[i64]) -> (Vec<usize>, Vec<i64>) {
    let mut classes: Vec<i64> = Vec::new();
    let mapped = labels
        .iter()
        .map(|l| match classes.iter().position(|c| c == l) {
            Some(i) => i,
            None => {
                classes.push(*l);
                classes.len() - 1
            }
        })
        .collect();
    (mapped, classes)
}

fn warn_on_schedule(spec: &NetworkSpec, input_dim: usize) {
    let atoms: Vec<usize> = spec.layers.iter().map(|l| l.atoms).collect();
    let halving = atoms.windows(2).all(|w| w[1] == w[0] / 2 || w[1] == w[0].div_ceil(2));
    if !halving {
        log::warn!("atom schedule {atoms:?} does not halve layer to layer (input dimension {input_dim})");
    }
}

/// Trains the whole network greedily on `x` (`d × n`) with one label per column.
pub fn train_ddnn(x: &Matrix, labels: &[i64], spec: &NetworkSpec) -> Result<DdnnFit> {
    if x.cols() == 0 {
        return Err(Error::InvalidSpec("training data has no samples".into()));
    }
    if x.cols() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "train_ddnn: samples vs labels",
            left: x.shape(),
            right: (1, labels.len()),
        });
    }
    let (y, class_labels) = remap_labels(labels);
    let classes = class_labels.len();
    spec.validate(classes)?;
    warn_on_schedule(spec, x.rows());

    let n_layers = spec.layers.len();
    let mut layers = Vec::with_capacity(n_layers - 1);
    let mut codes = Vec::with_capacity(n_layers);
    let mut v = x.clone();
    for (k, layer_spec) in spec.layers[..n_layers - 1].iter().enumerate() {
        let (layer, z) = match spec.variant {
            Variant::Ddnn1 => {
                let t = train_layer(&v, layer_spec).map_err(|e| e.in_layer(k))?;
                let layer = NetworkLayer {
                    dictionary: t.dictionary,
                    loss_trace: t.loss_trace,
                    layout: None,
                };
                (layer, t.codes)
            }
            Variant::Ddnn2 => {
                let layout = class_block_layout(layer_spec.atoms, classes);
                let cspec = ClassDictSpec {
                    classes,
                    atoms_per_class: layout.atoms_per_class,
                    shared_atoms: layout.shared_atoms,
                    eta: spec.eta,
                    ridge: layer_spec.ridge,
                    tol: layer_spec.tol,
                    max_iters: layer_spec.max_iters,
                    seed: layer_spec.seed,
                };
                let m = train_class_discriminative(&v, &y, &cspec).map_err(|e| e.in_layer(k))?;
                let layer = NetworkLayer {
                    dictionary: m.dictionary(),
                    loss_trace: m.loss_trace,
                    layout: Some(layout),
                };
                (layer, m.codes)
            }
        };
        let guard = spec.guard.with_seed(spec.guard.seed.derive(k as u64));
        v = invert(spec.activation, &z, &guard);
        layers.push(layer);
        codes.push(z);
    }

    let k = n_layers - 1;
    let final_spec = &spec.layers[k];
    let targets = build_targets(&y, classes)?;
    let fit = match spec.variant {
        Variant::Ddnn1 => train_lcksvd1(&v, &targets, spec.final_mu, final_spec),
        Variant::Ddnn2 => AtomAllocation::uniform(final_spec.atoms, classes).and_then(|alloc| {
            let h = build_discriminative_code(&y, &alloc)?;
            train_lcksvd2(&v, &targets, &h, &alloc, spec.final_mu, final_spec)
        }),
    }
    .map_err(|e| e.in_layer(k))?;
    codes.push(fit.codes);

    Ok(DdnnFit {
        network: TrainedNetwork {
            layers,
            final_layer: fit.model,
            final_loss_trace: fit.loss_trace,
            activation: spec.activation,
            guard: spec.guard,
            class_labels,
            spec: spec.clone(),
        },
        codes,
    })
}

fn test_code(net: &TrainedNetwork, k: usize, d: &Matrix, layout: Option<&BlockLayout>, v: &Matrix) -> Result<Matrix> {
    let (coder, sparsity, ridge) = net.layer_coder(k);
    match net.spec.test_coder {
        TestCoder::RidgeLs { ridge } => code_least_squares(d, v, ridge),
        TestCoder::Omp { sparsity } => sparse_code_omp(d, v, sparsity.min(d.cols())),
        TestCoder::Mirror => match (layout, coder) {
            (Some(layout), _) => Ok(masked_codes_by_residual(d, layout, v, ridge)?.1),
            (None, Coder::RidgeLs) => code_least_squares(d, v, ridge),
            (None, Coder::Omp) => sparse_code_omp(d, v, sparsity),
        },
    }
}

/// Codes of every layer (hidden layers first, final layer last) for `x`.
/// Inversion noise is never applied here.
pub fn encode_layers(net: &TrainedNetwork, x: &Matrix) -> Result<Vec<Matrix>> {
    if x.rows() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "encode: input rows vs first dictionary",
            left: x.shape(),
            right: (net.input_dim(), 0),
        });
    }
    let guard = net.guard.without_noise();
    let mut out = Vec::with_capacity(net.layers.len() + 1);
    let mut v = x.clone();
    for (k, layer) in net.layers.iter().enumerate() {
        let z = test_code(net, k, &layer.dictionary, layer.layout.as_ref(), &v).map_err(|e| e.in_layer(k))?;
        v = invert(net.activation, &z, &guard);
        out.push(z);
    }
    let k = net.layers.len();
    out.push(test_code(net, k, &net.final_layer.dictionary, None, &v).map_err(|e| e.in_layer(k))?);
    Ok(out)
}

/// Final-layer codes for `x`.
pub fn encode(net: &TrainedNetwork, x: &Matrix) -> Result<Matrix> {
    Ok(encode_layers(net, x)?.pop().expect("at least the final layer"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Predicted original label per sample.
    pub labels: Vec<i64>,
    /// `C × n` class scores, rows in `class_labels` order.
    pub scores: Matrix,
}

pub fn predict(net: &TrainedNetwork, x: &Matrix) -> Result<Prediction> {
    let z = encode(net, x)?;
    let scores = net.final_layer.classifier.matmul(&z);
    let labels = argmax_columns(&scores)
        .into_iter()
        .map(|c| net.class_labels[c])
        .collect();
    Ok(Prediction { labels, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub error_rate: f64,
    /// Accuracy per class in `class_labels` order; NaN for classes without samples.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub class_labels: Vec<i64>,
}

/// Scores predictions against the truth over the given class list.
pub fn metrics_from_predictions(class_labels: &[i64], truth: &[i64], predicted: &[i64]) -> Result<Metrics> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            context: "metrics: truth vs predictions",
            left: (1, truth.len()),
            right: (1, predicted.len()),
        });
    }
    let index = |v: i64| {
        class_labels
            .iter()
            .position(|c| *c == v)
            .ok_or(Error::UnknownLabel { value: v })
    };
    let c = class_labels.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[index(t)?][index(p)?] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                row[i] as f64 / total as f64
            }
        })
        .collect();
    Ok(Metrics {
        accuracy,
        error_rate: 1.0 - accuracy,
        per_class,
        confusion,
        class_labels: class_labels.to_vec(),
    })
}

/// Predicts `x` and scores the result against `labels`. Labels the network
/// was not trained on are rejected.
pub fn evaluate(net: &TrainedNetwork, x: &Matrix, labels: &[i64]) -> Result<Metrics> {
    if x.cols() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "evaluate: samples vs labels",
            left: x.shape(),
            right: (1, labels.len()),
        });
    }
    if let Some(l) = labels.iter().find(|l| !net.class_labels.contains(l)) {
        return Err(Error::UnknownLabel { value: *l });
    }
    let p = predict(net, x)?;
    metrics_from_predictions(&net.class_labels, labels, &p.labels)
}
