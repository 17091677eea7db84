//! Finite-sum training problems with exact per-sample gradients.
//!
//! Three problem kinds: least-squares regression (quadratic), logistic
//! regression, and a one-hidden-layer tanh MLP with squared-error loss and
//! hand-written backprop. All per-sample quantities are pure functions of
//! `(objective, w, index)`.

use std::io::{BufRead, Write};

use crate::error::CoreError;
use crate::rng::RngStream;
use crate::vector::ParamVector;

/// Problem family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Quadratic,
    Logistic,
    MlpTanh,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Quadratic => "quadratic",
            ObjectiveKind::Logistic => "logistic",
            ObjectiveKind::MlpTanh => "mlp_tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "quadratic" => Ok(ObjectiveKind::Quadratic),
            "logistic" => Ok(ObjectiveKind::Logistic),
            "mlp_tanh" => Ok(ObjectiveKind::MlpTanh),
            other => Err(CoreError::invalid(format!("unknown objective kind {other:?}"))),
        }
    }
}

/// Immutable synthetic dataset: `n` rows of `d` features plus a scalar target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: ObjectiveKind,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

/// Knobs for dataset synthesis. Nonzero noise keeps the gradient variance
/// away from zero so the norm test has something to measure.
#[derive(Debug, Clone, Copy)]
pub struct DatasetParams {
    /// Additive target noise scale (quadratic, mlp_tanh).
    pub noise: f64,
    /// Label flip probability (logistic).
    pub label_flip: f64,
    /// Hidden width of the teacher network (mlp_tanh).
    pub teacher_hidden: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { noise: 0.1, label_flip: 0.05, teacher_hidden: 8 }
    }
}

/// Synthesizes the training split: samples drawn from the `DATASET` stream.
pub fn make_dataset(
    kind: ObjectiveKind,
    n: usize,
    d: usize,
    seed: u64,
    params: &DatasetParams,
) -> Result<Dataset, CoreError> {
    make_dataset_on_stream(kind, n, d, seed, params, crate::rng::streams::DATASET)
}

/// Synthesizes a held-out split: the same ground-truth parameters as
/// [`make_dataset`] at this seed, but fresh samples from the `HOLDOUT`
/// stream, so validation measures generalization rather than a shifted task.
pub fn make_holdout_dataset(
    kind: ObjectiveKind,
    n: usize,
    d: usize,
    seed: u64,
    params: &DatasetParams,
) -> Result<Dataset, CoreError> {
    make_dataset_on_stream(kind, n, d, seed, params, crate::rng::streams::HOLDOUT)
}

/// Common synthesis path: ground truth always comes from the `TEACHER`
/// stream of `seed`; features and noise come from `sample_stream`.
fn make_dataset_on_stream(
    kind: ObjectiveKind,
    n: usize,
    d: usize,
    seed: u64,
    params: &DatasetParams,
    sample_stream: u64,
) -> Result<Dataset, CoreError> {
    if n < 2 || d < 1 {
        return Err(CoreError::invalid(format!("dataset needs n >= 2 and d >= 1, got n={n}, d={d}")));
    }
    let mut rng = RngStream::new(seed, sample_stream);
    let mut truth_rng = RngStream::new(seed, crate::rng::streams::TEACHER);
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
        .collect();
    let targets = match kind {
        ObjectiveKind::Quadratic => {
            let truth: Vec<f64> = (0..d).map(|_| truth_rng.standard_normal()).collect();
            features
                .iter()
                .map(|x| dot(x, &truth) + params.noise * rng.standard_normal())
                .collect()
        }
        ObjectiveKind::Logistic => {
            let truth: Vec<f64> = (0..d).map(|_| truth_rng.standard_normal()).collect();
            features
                .iter()
                .map(|x| {
                    let clean = if dot(x, &truth) >= 0.0 { 1.0 } else { 0.0 };
                    if rng.uniform() < params.label_flip { 1.0 - clean } else { clean }
                })
                .collect()
        }
        ObjectiveKind::MlpTanh => {
            let h = params.teacher_hidden.max(1);
            let teacher: Vec<f64> = (0..mlp_param_dim(d, h))
                .map(|_| truth_rng.standard_normal())
                .collect();
            features
                .iter()
                .map(|x| mlp_forward(&teacher, x, h).0 + params.noise * rng.standard_normal())
                .collect()
        }
    };
    Ok(Dataset { kind, n, d, seed, features, targets })
}

impl Dataset {
    /// Builds a dataset from explicit rows (handy for hand-constructed
    /// fixtures); all feature rows must share one length.
    pub fn from_parts(
        kind: ObjectiveKind,
        seed: u64,
        features: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self, CoreError> {
        let n = features.len();
        if n == 0 || targets.len() != n {
            return Err(CoreError::invalid(format!(
                "need matching nonempty rows: {} features vs {} targets",
                n,
                targets.len()
            )));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|x| x.len() != d) {
            return Err(CoreError::invalid("feature rows must share one positive length"));
        }
        Ok(Self { kind, n, d, seed, features, targets })
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    /// Writes the dataset as delimited text: a header line
    /// `kind,n,d,seed` followed by one `x1,...,xd,y` row per sample.
    pub fn export(&self, w: &mut impl Write) -> Result<(), CoreError> {
        writeln!(w, "{},{},{},{}", self.kind.name(), self.n, self.d, self.seed)?;
        for i in 0..self.n {
            let mut row: Vec<String> = self.features[i].iter().map(|x| format!("{x:?}")).collect();
            row.push(format!("{:?}", self.targets[i]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn import(r: &mut impl BufRead) -> Result<Dataset, CoreError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::invalid("empty dataset file"))??;
        let parts: Vec<&str> = header.trim().split(',').collect();
        if parts.len() != 4 {
            return Err(CoreError::invalid(format!("malformed dataset header {header:?}")));
        }
        let kind = ObjectiveKind::parse(parts[0])?;
        let n: usize = parts[1].parse().map_err(|_| CoreError::invalid("bad n in header"))?;
        let d: usize = parts[2].parse().map_err(|_| CoreError::invalid("bad d in header"))?;
        let seed: u64 = parts[3].parse().map_err(|_| CoreError::invalid("bad seed in header"))?;
        let mut features = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.trim().split(',').map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| CoreError::invalid(format!("bad row: {e}")))?;
            if vals.len() != d + 1 {
                return Err(CoreError::invalid(format!(
                    "row has {} fields, expected {}",
                    vals.len(),
                    d + 1
                )));
            }
            targets.push(vals[d]);
            features.push(vals[..d].to_vec());
        }
        if features.len() != n {
            return Err(CoreError::invalid(format!(
                "dataset has {} rows, header says {n}",
                features.len()
            )));
        }
        Ok(Dataset { kind, n, d, seed, features, targets })
    }
}

/// A finite-sum objective over a dataset.
#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub dataset: Dataset,
    /// Hidden width of the trained model (mlp_tanh only).
    pub hidden: usize,
}

/// Uniformly sampled batch of distinct sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndex {
    indices: Vec<usize>,
}

impl BatchIndex {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

pub fn mlp_param_dim(d: usize, hidden: usize) -> usize {
    hidden * d + hidden + hidden + 1
}

/// Forward pass of the one-hidden-layer tanh MLP; returns the prediction and
/// the hidden activations. Parameter layout: W1 (H x d, row-major), b1 (H),
/// w2 (H), b2 (1).
fn mlp_forward(w: &[f64], x: &[f64], hidden: usize) -> (f64, Vec<f64>) {
    let d = x.len();
    let (w1, rest) = w.split_at(hidden * d);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(hidden);
    let mut act = Vec::with_capacity(hidden);
    let mut y = b2[0];
    for h in 0..hidden {
        let a = dot(&w1[h * d..(h + 1) * d], x) + b1[h];
        let t = a.tanh();
        y += w2[h] * t;
        act.push(t);
    }
    (y, act)
}

impl Objective {
    pub fn new(dataset: Dataset, hidden: usize) -> Self {
        let kind = dataset.kind;
        Self { kind, dataset, hidden }
    }

    /// Dimension of the trainable parameter vector.
    pub fn param_dim(&self) -> usize {
        match self.kind {
            ObjectiveKind::Quadratic | ObjectiveKind::Logistic => self.dataset.d,
            ObjectiveKind::MlpTanh => mlp_param_dim(self.dataset.d, self.hidden),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.dataset.n
    }

    fn check_index(&self, i: usize) -> Result<(), CoreError> {
        if i >= self.dataset.n {
            return Err(CoreError::invalid(format!(
                "sample index {i} out of range for n={}",
                self.dataset.n
            )));
        }
        Ok(())
    }

    pub fn per_sample_loss(&self, w: &ParamVector, i: usize) -> Result<f64, CoreError> {
        self.check_index(i)?;
        let x = self.dataset.feature_row(i);
        let y = self.dataset.target(i);
        Ok(match self.kind {
            ObjectiveKind::Quadratic => {
                let r = dot(w.as_slice(), x) - y;
                0.5 * r * r
            }
            ObjectiveKind::Logistic => {
                // Numerically stable cross-entropy: log(1+e^t) - y t.
                let t = dot(w.as_slice(), x);
                let log1pexp = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
                log1pexp - y * t
            }
            ObjectiveKind::MlpTanh => {
                let (pred, _) = mlp_forward(w.as_slice(), x, self.hidden);
                let r = pred - y;
                0.5 * r * r
            }
        })
    }

    /// Exact analytic gradient of the i-th sample loss at `w`.
    pub fn per_sample_grad(&self, w: &ParamVector, i: usize) -> Result<ParamVector, CoreError> {
        self.check_index(i)?;
        let x = self.dataset.feature_row(i);
        let y = self.dataset.target(i);
        Ok(match self.kind {
            ObjectiveKind::Quadratic => {
                let r = dot(w.as_slice(), x) - y;
                ParamVector::new(x.iter().map(|&xi| r * xi).collect())
            }
            ObjectiveKind::Logistic => {
                let r = sigmoid(dot(w.as_slice(), x)) - y;
                ParamVector::new(x.iter().map(|&xi| r * xi).collect())
            }
            ObjectiveKind::MlpTanh => {
                let d = x.len();
                let hidden = self.hidden;
                let ws = w.as_slice();
                let (pred, act) = mlp_forward(ws, x, hidden);
                let r = pred - y;
                let w2 = &ws[hidden * d + hidden..hidden * d + 2 * hidden];
                let mut g = vec![0.0; ws.len()];
                for h in 0..hidden {
                    // d loss / d pre-activation of unit h
                    let da = r * w2[h] * (1.0 - act[h] * act[h]);
                    for (gi, &xi) in g[h * d..(h + 1) * d].iter_mut().zip(x) {
                        *gi = da * xi;
                    }
                    g[hidden * d + h] = da;
                    g[hidden * d + hidden + h] = r * act[h];
                }
                g[hidden * d + 2 * hidden] = r;
                ParamVector::new(g)
            }
        })
    }

    /// Mean of per-sample gradients over the batch.
    pub fn batch_grad(&self, w: &ParamVector, batch: &BatchIndex) -> Result<ParamVector, CoreError> {
        if batch.size() == 0 {
            return Err(CoreError::EmptyCollection { context: "batch_grad" });
        }
        let mut acc = ParamVector::zeros(self.param_dim());
        for &i in batch.indices() {
            acc.axpy(1.0, &self.per_sample_grad(w, i)?)?;
        }
        Ok(acc.scale(1.0 / batch.size() as f64))
    }

    pub fn batch_loss(&self, w: &ParamVector, batch: &BatchIndex) -> Result<f64, CoreError> {
        if batch.size() == 0 {
            return Err(CoreError::EmptyCollection { context: "batch_loss" });
        }
        let mut acc = 0.0;
        for &i in batch.indices() {
            acc += self.per_sample_loss(w, i)?;
        }
        Ok(acc / batch.size() as f64)
    }

    pub fn full_grad(&self, w: &ParamVector) -> Result<ParamVector, CoreError> {
        let all = BatchIndex::new((0..self.dataset.n).collect());
        self.batch_grad(w, &all)
    }

    pub fn full_loss(&self, w: &ParamVector) -> Result<f64, CoreError> {
        let all = BatchIndex::new((0..self.dataset.n).collect());
        self.batch_loss(w, &all)
    }

    /// Central-difference approximation of the full gradient, coordinate by
    /// coordinate. Verification oracle only.
    pub fn finite_diff_grad(&self, w: &ParamVector, h: f64) -> Result<ParamVector, CoreError> {
        if h <= 0.0 {
            return Err(CoreError::invalid("finite difference step must be positive"));
        }
        let mut g = Vec::with_capacity(w.dim());
        let mut probe = w.clone();
        for i in 0..w.dim() {
            let orig = probe[i];
            probe.as_mut_slice()[i] = orig + h;
            let plus = self.full_loss(&probe)?;
            probe.as_mut_slice()[i] = orig - h;
            let minus = self.full_loss(&probe)?;
            probe.as_mut_slice()[i] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        Ok(ParamVector::new(g))
    }

    /// Central-difference gradient of a single sample's loss.
    pub fn finite_diff_per_sample_grad(
        &self,
        w: &ParamVector,
        i: usize,
        h: f64,
    ) -> Result<ParamVector, CoreError> {
        let mut g = Vec::with_capacity(w.dim());
        let mut probe = w.clone();
        for c in 0..w.dim() {
            let orig = probe[c];
            probe.as_mut_slice()[c] = orig + h;
            let plus = self.per_sample_loss(&probe, i)?;
            probe.as_mut_slice()[c] = orig - h;
            let minus = self.per_sample_loss(&probe, i)?;
            probe.as_mut_slice()[c] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        Ok(ParamVector::new(g))
    }
}

/// Draws `b` distinct indices uniformly without replacement from `0..n`.
pub fn sample_batch(rng: &mut RngStream, n: usize, b: usize) -> Result<BatchIndex, CoreError> {
    if b == 0 || b > n {
        return Err(CoreError::invalid(format!("batch size {b} not in 1..={n}")));
    }
    let picked = rand::seq::index::sample(rng.rng_mut(), n, b).into_vec();
    Ok(BatchIndex::new(picked))
}
