//! Datasets, splits, Dirichlet non-IID partitioning and evaluation.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::functional::cross_entropy_rows;
use crate::autodiff::Tensor;
use crate::error::{KoalaError, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::seeds;

/// Feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<S> {
    inputs: Tensor<S>,
    labels: Vec<usize>,
    classes: usize,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn new(inputs: Tensor<S>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.ndim() != 2 || inputs.rows() != labels.len() {
            return Err(KoalaError::InvalidArgument(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(KoalaError::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Tensor<S> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `indices`, in that order. Empty index lists are rejected.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(KoalaError::InvalidArgument("empty subset".into()));
        }
        Ok(Self {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Drops the labels of `indices`, yielding an unlabeled proxy set.
    pub fn unlabeled(&self, indices: &[usize]) -> Result<ProxyDataset<S>> {
        if indices.is_empty() {
            return Err(KoalaError::InvalidArgument("empty proxy set".into()));
        }
        Ok(ProxyDataset {
            inputs: self.inputs.select_rows(indices),
            source_indices: indices.to_vec(),
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn cast<T: Scalar>(&self) -> LabeledDataset<T> {
        LabeledDataset {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Order-sensitive hash of inputs and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &x in self.inputs.data() {
            eat(x.as_f64().to_bits());
        }
        for &l in &self.labels {
            eat(l as u64);
        }
        h
    }
}

/// Unlabeled server-side inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ProxyDataset<S> {
    pub inputs: Tensor<S>,
    pub source_indices: Vec<usize>,
}

impl<S: Scalar> ProxyDataset<S> {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gaussian-cluster generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub per_class: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

/// Class means drawn from a standard normal, samples `mean + spread * N(0, I)`.
/// Rows are emitted class by class.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<LabeledDataset<S>> {
    if spec.classes < 2 || spec.per_class < 1 || spec.feature_dim < 1 {
        return Err(KoalaError::InvalidArgument(format!(
            "synthetic data needs classes >= 2, per_class >= 1, feature_dim >= 1; got {spec:?}"
        )));
    }
    if !(spec.cluster_spread >= 0.0 && spec.cluster_spread.is_finite()) {
        return Err(KoalaError::InvalidArgument(format!(
            "cluster_spread must be non-negative, got {}",
            spec.cluster_spread
        )));
    }
    let mut rng = seeds::stream(spec.seed, "synthetic", 0);
    let d = spec.feature_dim;
    let means: Vec<f64> = (0..spec.classes * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.per_class {
            for &m in &means[c * d..(c + 1) * d] {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(S::of(m + spec.cluster_spread * noise));
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::matrix(n, d, data)?, labels, spec.classes)
}

/// Reads rows of `features..., label`. A non-numeric first row is taken as a header.
pub fn load_csv<S: Scalar>(path: &Path) -> Result<LabeledDataset<S>> {
    let csv_err = |line: u64, message: String| KoalaError::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 1;
        let record = record.map_err(|e| csv_err(line, e.to_string()))?;
        if record.len() < 2 {
            return Err(csv_err(line, "need at least one feature and a label".into()));
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|c| c.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(csv_err(line, format!("non-numeric cell: {e}"))),
        };
        if *width.get_or_insert(values.len()) != values.len() {
            return Err(csv_err(
                line,
                format!("expected {} columns, found {}", width.unwrap(), values.len()),
            ));
        }
        let (label, features) = values.split_last().unwrap();
        if *label < 0.0 || label.fract() != 0.0 || !label.is_finite() {
            return Err(csv_err(line, format!("label {label} is not a class index")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(csv_err(line, "non-finite feature".into()));
        }
        data.extend(features.iter().map(|&x| S::of(x)));
        labels.push(*label as usize);
    }
    let Some(w) = width else {
        return Err(csv_err(0, "no data rows".into()));
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    LabeledDataset::new(Tensor::matrix(labels.len(), w - 1, data)?, labels, classes)
}

/// Writes `features..., label` rows without a header.
pub fn write_csv<S: Scalar>(dataset: &LabeledDataset<S>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KoalaError::Csv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    for (row, &label) in dataset.inputs.row_iter().zip(&dataset.labels) {
        let mut fields: Vec<String> = row.iter().map(|x| format!("{:?}", x.as_f64())).collect();
        fields.push(label.to_string());
        w.write_record(&fields).map_err(|e| KoalaError::Csv {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Index lists of every split, relative to the source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub client_shards: Vec<Vec<usize>>,
    pub proxy: Vec<usize>,
    pub pretrain: Vec<usize>,
    pub test: Vec<usize>,
    pub dirichlet_alpha: Option<f64>,
    pub seed: u64,
}

impl PartitionPlan {
    /// Indices available to clients.
    pub fn pool(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.client_shards.concat();
        p.sort_unstable();
        p
    }

    /// Checks pairwise disjointness, bounds and non-empty shards.
    pub fn validate(&self, source_len: usize) -> Result<()> {
        let mut seen = HashSet::new();
        let lists = self
            .client_shards
            .iter()
            .map(|s| ("client shard", s))
            .chain([
                ("proxy", &self.proxy),
                ("pretrain", &self.pretrain),
                ("test", &self.test),
            ]);
        for (name, list) in lists {
            if list.is_empty() {
                return Err(KoalaError::InvalidArgument(format!("empty {name}")));
            }
            for &i in list {
                if i >= source_len {
                    return Err(KoalaError::InvalidArgument(format!(
                        "{name} index {i} out of range {source_len}"
                    )));
                }
                if !seen.insert(i) {
                    return Err(KoalaError::InvalidArgument(format!(
                        "index {i} appears twice (last in {name})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Replaces the client pool with a Dirichlet partition of it.
    pub fn partition_clients(
        &mut self,
        labels: &[usize],
        classes: usize,
        clients: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<()> {
        let pool = self.pool();
        let pool_labels: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
        let shards = dirichlet_split(&pool_labels, classes, clients, alpha, seed)?;
        self.client_shards = shards
            .into_iter()
            .map(|s| s.into_iter().map(|k| pool[k]).collect())
            .collect();
        self.dirichlet_alpha = Some(alpha);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-class Dirichlet split of `labels` into `clients` shards of positions.
pub fn dirichlet_split(
    labels: &[usize],
    classes: usize,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(KoalaError::InvalidArgument(format!(
            "dirichlet alpha must be positive, got {alpha}"
        )));
    }
    if clients == 0 {
        return Err(KoalaError::EmptyClientSet);
    }
    if labels.len() < clients {
        return Err(KoalaError::InvalidArgument(format!(
            "{} examples cannot fill {clients} shards",
            labels.len()
        )));
    }
    let mut rng = seeds::stream(seed, "dirichlet", 0);
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| KoalaError::InvalidArgument(format!("gamma({alpha}): {e}")))?;
    let mut shards = vec![Vec::new(); clients];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = if total > 0.0 {
            draws.iter().map(|g| g / total).collect()
        } else {
            (0..clients).map(|k| (k == 0) as u8 as f64).collect()
        };
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == clients {
                n
            } else {
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            shards[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by_key(|&k| (shards[k].len(), std::cmp::Reverse(k)))
            .expect("clients > 0");
        let moved = shards[largest].pop().expect("largest shard has > 1 element");
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Dirichlet partition of every row of `dataset`.
pub fn dirichlet_partition<S: Scalar>(
    dataset: &LabeledDataset<S>,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    dirichlet_split(&dataset.labels, dataset.classes, clients, alpha, seed)
}

/// Fractions of the source dataset for each held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub proxy: f64,
    pub pretrain: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            proxy: 0.1,
            pretrain: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.proxy, self.pretrain, self.test];
        if all.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(KoalaError::InvalidArgument(format!(
                "split fractions must be positive: {self:?}"
            )));
        }
        if all.iter().sum::<f64>() >= 1.0 {
            return Err(KoalaError::InvalidArgument(format!(
                "split fractions must sum below 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle, then contiguous test / proxy / pretrain blocks; the rest is the client pool.
pub fn make_splits(n: usize, fractions: &SplitFractions, seed: u64) -> Result<PartitionPlan> {
    fractions.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::stream(seed, "splits", 0));
    let size = |f: f64| (f * n as f64).round() as usize;
    let (nt, np, nw) = (size(fractions.test), size(fractions.proxy), size(fractions.pretrain));
    if nt == 0 || np == 0 || nw == 0 || nt + np + nw >= n {
        return Err(KoalaError::InvalidArgument(format!(
            "{n} examples too few for split fractions {fractions:?}"
        )));
    }
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let plan = PartitionPlan {
        test: sorted(&order[..nt]),
        proxy: sorted(&order[nt..nt + np]),
        pretrain: sorted(&order[nt + np..nt + np + nw]),
        client_shards: vec![sorted(&order[nt + np + nw..])],
        dirichlet_alpha: None,
        seed,
    };
    plan.validate(n)?;
    Ok(plan)
}

/// Summed cross-entropy and top-1 accuracy over a labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss_sum: f64,
    pub accuracy: f64,
    pub examples: usize,
    pub fingerprint: u64,
}

const EVAL_CHUNK: usize = 512;

pub fn evaluate<S: Scalar>(model: &Model<S>, data: &LabeledDataset<S>) -> Result<Evaluation> {
    if data.feature_dim() != model.spec().input_dim() {
        return Err(KoalaError::ShapeMismatch {
            op: "evaluate",
            left: data.inputs.shape().to_vec(),
            right: vec![model.spec().input_dim()],
        });
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let n = data.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let x = data.inputs.slice_rows(start, end)?;
        let y = &data.labels[start..end];
        let logits = model.forward(&x)?;
        loss_sum += cross_entropy_rows(&logits, y)?
            .iter()
            .map(|l| l.as_f64())
            .sum::<f64>();
        correct += logits
            .argmax_rows()
            .iter()
            .zip(y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(Evaluation {
        loss_sum,
        accuracy: correct as f64 / n as f64,
        examples: n,
        fingerprint: data.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, Activation, Layer, LayerSpec, ModelSpec};

    fn synth(per_class: usize, spread: f64, seed: u64) -> LabeledDataset<f64> {
        generate_synthetic(&SyntheticSpec {
            classes: 2,
            feature_dim: 3,
            per_class,
            cluster_spread: spread,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = synth(50, 1.0, 9);
        assert_eq!(a.len(), 100);
        assert_eq!(a.class_histogram(), vec![50, 50]);
        let b = synth(50, 1.0, 9);
        let bits = |d: &LabeledDataset<f64>| {
            d.inputs().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&synth(50, 1.0, 10)));
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        let mut s = SyntheticSpec {
            classes: 1,
            feature_dim: 3,
            per_class: 5,
            cluster_spread: 1.0,
            seed: 0,
        };
        assert!(generate_synthetic::<f64>(&s).is_err());
        s.classes = 3;
        s.per_class = 0;
        assert!(generate_synthetic::<f64>(&s).is_err());
    }

    #[test]
    fn tight_clusters_are_nearest_centroid_separable() {
        let d: LabeledDataset<f64> = generate_synthetic(&SyntheticSpec {
            classes: 5,
            feature_dim: 8,
            per_class: 40,
            cluster_spread: 1e-6,
            seed: 3,
        })
        .unwrap();
        let dim = d.feature_dim();
        let mut centroids = vec![vec![0.0; dim]; 5];
        for (row, &l) in d.inputs().row_iter().zip(d.labels()) {
            for (c, &x) in centroids[l].iter_mut().zip(row) {
                *c += x / 40.0;
            }
        }
        for (row, &l) in d.inputs().row_iter().zip(d.labels()) {
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centroids[a]).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centroids[b]).map(|(x, c)| (x - c).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, l);
        }
    }

    #[test]
    fn dirichlet_single_client_gets_everything() {
        let d = synth(30, 1.0, 1);
        let shards = dirichlet_partition(&d, 1, 1.0, 5).unwrap();
        assert_eq!(shards, vec![(0..60).collect::<Vec<_>>()]);
    }

    #[test]
    fn dirichlet_covers_disjointly() {
        let d = synth(100, 1.0, 1);
        for alpha in [0.05, 1.0, 100.0] {
            let shards = dirichlet_partition(&d, 7, alpha, 11).unwrap();
            let mut all: Vec<usize> = shards.concat();
            all.sort_unstable();
            assert_eq!(all, (0..200).collect::<Vec<_>>());
            assert!(shards.iter().all(|s| !s.is_empty()));
        }
    }

    #[test]
    fn dirichlet_errors() {
        let d = synth(2, 1.0, 1);
        assert!(dirichlet_partition(&d, 5, 1.0, 0).is_err());
        assert!(dirichlet_partition(&d, 2, 0.0, 0).is_err());
        assert!(dirichlet_partition(&d, 0, 1.0, 0).is_err());
    }

    #[test]
    fn near_iid_histograms() {
        let d: LabeledDataset<f64> = generate_synthetic(&SyntheticSpec {
            classes: 4,
            feature_dim: 1,
            per_class: 2500,
            cluster_spread: 1.0,
            seed: 2,
        })
        .unwrap();
        let shards = dirichlet_partition(&d, 5, 1000.0, 7).unwrap();
        let global = d.class_histogram();
        let n = d.len() as f64;
        for s in &shards {
            let sub = d.subset(s).unwrap();
            let h = sub.class_histogram();
            for c in 0..4 {
                let local = h[c] as f64 / sub.len() as f64;
                let g = global[c] as f64 / n;
                assert!((local - g).abs() <= 0.2 * g, "class {c}: {local} vs {g}");
            }
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let f = SplitFractions {
            proxy: 0.1,
            pretrain: 0.2,
            test: 0.2,
        };
        let plan = make_splits(1000, &f, 4).unwrap();
        assert_eq!(plan.test.len(), 200);
        assert_eq!(plan.proxy.len(), 100);
        assert_eq!(plan.pretrain.len(), 200);
        assert_eq!(plan.pool().len(), 500);
        plan.validate(1000).unwrap();
        let bad = SplitFractions {
            proxy: 0.5,
            pretrain: 0.3,
            test: 0.2,
        };
        assert!(make_splits(1000, &bad, 4).is_err());
    }

    #[test]
    fn proxy_serialization_has_no_labels() {
        let d = synth(10, 1.0, 1);
        let proxy = d.unlabeled(&[0, 3, 5]).unwrap();
        let json = serde_json::to_value(&proxy).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, vec!["inputs", "source_indices"]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth(5, 1.0, 1);
        let p = dir.path().join("d.csv");
        write_csv(&d, &p).unwrap();
        assert_eq!(load_csv::<f64>(&p).unwrap(), d);

        let q = dir.path().join("h.csv");
        std::fs::write(&q, "a,b,c,d,label\n1,2,3,4,0\n5,6,7,8,1\n9,10,11,12,1\n").unwrap();
        let h = load_csv::<f64>(&q).unwrap();
        assert_eq!(h.inputs().shape(), &[3, 4]);
        assert_eq!(h.labels(), &[0, 1, 1]);

        let r = dir.path().join("bad.csv");
        std::fs::write(&r, "1,2,0\n3,x,1\n").unwrap();
        match load_csv::<f64>(&r) {
            Err(KoalaError::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected csv error, got {other:?}"),
        }
        let e = dir.path().join("empty.csv");
        std::fs::write(&e, "").unwrap();
        assert!(load_csv::<f64>(&e).is_err());
    }

    #[test]
    fn evaluate_uniform_model() {
        let d: LabeledDataset<f64> = generate_synthetic(&SyntheticSpec {
            classes: 4,
            feature_dim: 3,
            per_class: 25,
            cluster_spread: 1.0,
            seed: 8,
        })
        .unwrap();
        let mut m: Model<f64> = init_model(&ModelSpec::mlp(3, &[4], 4).unwrap(), 0).unwrap();
        for l in m.layers_mut() {
            l.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let e = evaluate(&m, &d).unwrap();
        assert!((e.loss_sum - 100.0 * 4f64.ln()).abs() < 1e-9);
        assert!((0.15..=0.35).contains(&e.accuracy));
        assert_eq!(evaluate(&m, &d).unwrap(), e);
    }

    #[test]
    fn evaluate_perfect_model() {
        // one-hot inputs through an identity classifier
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = LabeledDataset::new(x, vec![0, 1], 2).unwrap();
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::new(2, 2, Activation::None),
                LayerSpec::new(2, 2, Activation::None),
            ],
            adapter_start: 1,
            hidden_tap: 0,
        };
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let layer = || Layer {
            weight: eye.clone(),
            bias: Tensor::zeros(&[2]),
        };
        let m = Model::from_parts(spec, vec![layer(), layer()], vec![false; 2]).unwrap();
        assert_eq!(evaluate(&m, &d).unwrap().accuracy, 1.0);
        let wrong = LabeledDataset::new(Tensor::zeros(&[1, 3]), vec![0], 2).unwrap();
        assert!(evaluate(&m, &wrong).is_err());
    }
}
