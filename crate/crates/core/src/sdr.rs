//! Supervised dimensionality reduction with a Siamese MLP trained on triplets.
//!
//! One reducer is trained per stride. Hidden layers use ReLU, the output layer
//! is linear. Training minimises the hinge triplet loss
//! `max(0, |g(a) - g(p)|^2 - |g(a) - g(n)|^2 + margin)` with Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdrConfig {
    pub out_dim: usize,
    pub k_neighbors: usize,
    pub hidden_dims: Vec<usize>,
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SdrConfig {
    fn default() -> Self {
        Self {
            out_dim: 32,
            k_neighbors: 15,
            hidden_dims: vec![128, 128],
            margin: 1.0,
            batch_size: 128,
            epochs: 50,
            learning_rate: 1e-3,
            patience: 5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SdrConfig {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.out_dim == 0 || self.out_dim >= input_dim {
            return Err(Error::Config(format!(
                "sdr out_dim {} must be in 1..{input_dim}",
                self.out_dim
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("sdr k_neighbors must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("sdr batch_size and epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sdr learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("sdr validation_fraction must be in [0, 1)".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("sdr margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), &self.weights).expect("validated shape")
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reducer {
    pub layers: Vec<DenseLayer>,
}

impl Reducer {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Format("reducer has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Format(format!("reducer layer {i} has inconsistent sizes")));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::Format(format!("reducer layer {i} input does not chain")));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialised network with the given layer widths, input first.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config("reducer needs at least input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                DenseLayer {
                    in_dim: w[0],
                    out_dim: w[1],
                    weights: (0..w[0] * w[1]).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    pub fn transform(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.input_dim() {
            return Err(Error::Data(format!(
                "reducer expects {} inputs, got {}",
                self.input_dim(),
                f.len()
            )));
        }
        let x = ArrayView2::from_shape((1, f.len()), f).expect("row vector");
        Ok(self.forward(x).into_raw_vec_and_offset().0)
    }

    pub fn transform_many(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.activations(x).pop().expect("output layer")
    }

    /// Activations of every layer, the input included.
    fn activations(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.to_owned()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let b = ArrayView2::from_shape((1, l.out_dim), &l.bias).expect("bias row");
            let mut z = acts[i].dot(&l.w().t()) + &b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Flat parameter gradient given the gradient w.r.t. the outputs.
    fn backward(&self, acts: &[Array2<f64>], grad_out: Array2<f64>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut per_layer = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); self.layers.len()];
        let mut delta = grad_out;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                delta.zip_mut_with(&acts[i + 1], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let dw = delta.t().dot(&acts[i]);
            let db = delta.sum_axis(Axis(0));
            let next = if i > 0 { Some(delta.dot(&self.layers[i].w())) } else { None };
            per_layer[i] = (dw, db);
            if let Some(n) = next {
                delta = n;
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in per_layer {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Data("parameter vector has the wrong length".into()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Product of per-layer spectral norms, an upper bound on the Lipschitz
    /// constant of the network.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(|l| spectral_norm(l.w())).product()
    }
}

fn spectral_norm(w: ArrayView2<'_, f64>) -> f64 {
    let n = w.ncols();
    let mut v = Array1::from_iter((0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()));
    let mut sigma = 0.0;
    for _ in 0..1000 {
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let u = w.dot(&v);
        let next = w.t().dot(&u);
        let s = u.dot(&u).sqrt();
        let converged = (s - sigma).abs() <= 1e-15 * s.max(1.0);
        sigma = s;
        v = next;
        if converged {
            break;
        }
    }
    sigma
}

/// `(anchor, positive, negative)` sample indices.
pub type Triplet = (usize, usize, usize);

/// For each anchor, the `k` nearest candidates of the same label (L2, ties by
/// index, the anchor itself excluded).
pub fn nearest_same_class(
    features: &[Vec<f64>],
    labels: &[usize],
    anchors: &[usize],
    candidates: &[usize],
    k: usize,
) -> Vec<Vec<usize>> {
    anchors
        .par_iter()
        .map(|&a| {
            let mut d: Vec<(f64, usize)> = candidates
                .iter()
                .filter(|&&j| j != a && labels[j] == labels[a])
                .map(|&j| {
                    let s: f64 = features[a]
                        .iter()
                        .zip(&features[j])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    (s, j)
                })
                .collect();
            let take = k.min(d.len());
            if take > 0 && take < d.len() {
                d.select_nth_unstable_by(take - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                d.truncate(take);
            }
            d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

struct NegativePool {
    by_label: Vec<(usize, Vec<usize>)>,
    total: usize,
}

impl NegativePool {
    fn new(labels: &[usize], members: &[usize]) -> Self {
        let mut by_label: Vec<(usize, Vec<usize>)> = Vec::new();
        for &i in members {
            match by_label.iter_mut().find(|(l, _)| *l == labels[i]) {
                Some((_, v)) => v.push(i),
                None => by_label.push((labels[i], vec![i])),
            }
        }
        by_label.sort_by_key(|(l, _)| *l);
        Self {
            by_label,
            total: members.len(),
        }
    }

    fn sample(&self, label: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        let own = self.by_label.iter().find(|(l, _)| *l == label).map_or(0, |(_, v)| v.len());
        let others = self.total - own;
        if others == 0 {
            return None;
        }
        let mut r = rng.random_range(0..others);
        for (l, v) in &self.by_label {
            if *l == label {
                continue;
            }
            if r < v.len() {
                return Some(v[r]);
            }
            r -= v.len();
        }
        None
    }
}

fn draw_triplets(
    anchors: &[usize],
    neighbors: &[Vec<usize>],
    labels: &[usize],
    pool: &NegativePool,
    rng: &mut ChaCha8Rng,
) -> Vec<Triplet> {
    let mut out = Vec::with_capacity(anchors.len());
    for (&a, nb) in anchors.iter().zip(neighbors) {
        if nb.is_empty() {
            continue;
        }
        let p = nb[rng.random_range(0..nb.len())];
        if let Some(n) = pool.sample(labels[a], rng) {
            out.push((a, p, n));
        }
    }
    out
}

fn distinct_labels(labels: &[usize]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

/// One triplet per anchor whose class has at least two samples.
pub fn mine_triplets(features: &[Vec<f64>], labels: &[usize], k: usize, seed: u64) -> Result<Vec<Triplet>> {
    if features.len() != labels.len() {
        return Err(Error::Data("features and labels differ in length".into()));
    }
    if distinct_labels(labels) < 2 {
        return Err(Error::Triplet("triplet mining needs at least two classes".into()));
    }
    let all: Vec<usize> = (0..features.len()).collect();
    let neighbors = nearest_same_class(features, labels, &all, &all, k);
    let pool = NegativePool::new(labels, &all);
    let triplets = draw_triplets(&all, &neighbors, labels, &pool, &mut ChaCha8Rng::seed_from_u64(seed));
    if triplets.is_empty() {
        return Err(Error::Triplet("no class has two samples to form a positive pair".into()));
    }
    Ok(triplets)
}

fn gather(features: &[Vec<f64>], triplets: &[Triplet]) -> Array2<f64> {
    let d = features[0].len();
    let b = triplets.len();
    let mut x = Array2::zeros((3 * b, d));
    for (i, &(a, p, n)) in triplets.iter().enumerate() {
        for (slot, idx) in [(i, a), (b + i, p), (2 * b + i, n)] {
            x.row_mut(slot).iter_mut().zip(&features[idx]).for_each(|(o, v)| *o = *v);
        }
    }
    x
}

fn triplet_terms(emb: &Array2<f64>, b: usize, margin: f64) -> Vec<f64> {
    (0..b)
        .map(|i| {
            let (a, p, n) = (emb.row(i), emb.row(b + i), emb.row(2 * b + i));
            let dp: f64 = a.iter().zip(p.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            let dn: f64 = a.iter().zip(n.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            (dp - dn + margin).max(0.0)
        })
        .collect()
}

/// Mean hinge triplet loss.
pub fn triplet_loss(reducer: &Reducer, features: &[Vec<f64>], triplets: &[Triplet], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let emb = reducer.forward(gather(features, triplets).view());
    triplet_terms(&emb, triplets.len(), margin).iter().sum::<f64>() / triplets.len() as f64
}

/// Mean hinge triplet loss and its analytic gradient w.r.t. [`Reducer::params`].
pub fn triplet_loss_and_grad(
    reducer: &Reducer,
    features: &[Vec<f64>],
    triplets: &[Triplet],
    margin: f64,
) -> (f64, Vec<f64>) {
    let b = triplets.len();
    if b == 0 {
        return (0.0, vec![0.0; reducer.param_count()]);
    }
    let acts = reducer.activations(gather(features, triplets).view());
    let emb = acts.last().expect("output");
    let terms = triplet_terms(emb, b, margin);
    let scale = 2.0 / b as f64;
    let mut g = Array2::zeros(emb.raw_dim());
    for (i, &t) in terms.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        for j in 0..emb.ncols() {
            let (a, p, n) = (emb[[i, j]], emb[[b + i, j]], emb[[2 * b + i, j]]);
            g[[i, j]] = scale * (n - p);
            g[[b + i, j]] = -scale * (a - p);
            g[[2 * b + i, j]] = scale * (a - n);
        }
    }
    let loss = terms.iter().sum::<f64>() / b as f64;
    (loss, reducer.backward(&acts, g))
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
}

fn stratified_split(labels: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n_val = (idx.len() as f64 * fraction).floor() as usize;
        let n_val = n_val.min(idx.len().saturating_sub(2));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn train_reducer(features: &[Vec<f64>], labels: &[usize], cfg: &SdrConfig) -> Result<Reducer> {
    train_reducer_traced(features, labels, cfg).map(|(r, _)| r)
}

/// Trains a reducer, also returning per-epoch train and validation losses.
pub fn train_reducer_traced(
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &SdrConfig,
) -> Result<(Reducer, TrainReport)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Data("sdr needs matching, nonempty features and labels".into()));
    }
    let input_dim = features[0].len();
    if features.iter().any(|f| f.len() != input_dim) {
        return Err(Error::Data("features have inconsistent dimensionality".into()));
    }
    cfg.validate(input_dim)?;
    if distinct_labels(labels) < 2 {
        return Err(Error::Triplet("triplet mining needs at least two classes".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![input_dim];
    dims.extend(&cfg.hidden_dims);
    dims.push(cfg.out_dim);
    let mut reducer = Reducer::random(&dims, rng.random())?;

    let (train, val) = stratified_split(labels, cfg.validation_fraction, &mut rng);
    let all: Vec<usize> = (0..features.len()).collect();
    let train_nb = nearest_same_class(features, labels, &train, &train, cfg.k_neighbors);
    let train_pool = NegativePool::new(labels, &train);
    let val_triplets = if val.is_empty() {
        Vec::new()
    } else {
        let nb = nearest_same_class(features, labels, &val, &all, cfg.k_neighbors);
        draw_triplets(&val, &nb, labels, &NegativePool::new(labels, &all), &mut rng)
    };

    let mut params = reducer.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let mut triplets = draw_triplets(&train, &train_nb, labels, &train_pool, &mut rng);
        if triplets.is_empty() {
            return Err(Error::Triplet("no class has two samples to form a positive pair".into()));
        }
        triplets.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in triplets.chunks(cfg.batch_size) {
            let (loss, grad) = triplet_loss_and_grad(&reducer, features, batch, cfg.margin);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("non-finite loss in epoch {epoch}")));
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut params, &grad);
            reducer.set_params(&params)?;
        }
        report.train_losses.push(epoch_loss / triplets.len() as f64);
        let monitored = if val_triplets.is_empty() {
            triplet_loss(&reducer, features, &triplets, cfg.margin)
        } else {
            triplet_loss(&reducer, features, &val_triplets, cfg.margin)
        };
        if !monitored.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss in epoch {epoch}")));
        }
        report.val_losses.push(monitored);
        if monitored < best.0 {
            best = (monitored, params.clone());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    reducer.set_params(&best.1)?;
    Ok((reducer, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_blobs(n_per: usize, dim: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut f = Vec::new();
        let mut l = Vec::new();
        for c in 0..2 {
            for _ in 0..n_per {
                let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                v[0] += if c == 0 { -sep } else { sep };
                f.push(v);
                l.push(c);
            }
        }
        (f, l)
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let mut r = Reducer::random(&[6, 5, 3], 1).unwrap();
        let zeros = vec![0.0; r.param_count()];
        r.set_params(&zeros).unwrap();
        assert_eq!(r.transform(&[1.0, -2.0, 3.0, 0.5, 9.0, -1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_block_projects_coordinates() {
        let mut w = vec![0.0; 3 * 5];
        for i in 0..3 {
            w[i * 5 + i] = 1.0;
        }
        let r = Reducer::from_layers(vec![DenseLayer {
            in_dim: 5,
            out_dim: 3,
            weights: w,
            bias: vec![0.0; 3],
        }])
        .unwrap();
        assert_eq!(r.transform(&[4.0, -1.0, 2.5, 7.0, 8.0]).unwrap(), vec![4.0, -1.0, 2.5]);
    }

    #[test]
    fn transform_is_deterministic_and_checks_length() {
        let r = Reducer::random(&[4, 8, 2], 3).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(r.transform(&x).unwrap(), r.transform(&x).unwrap());
        assert!(matches!(r.transform(&[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn json_round_trip() {
        let r = Reducer::random(&[4, 8, 2], 3).unwrap();
        let back: Reducer = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn two_by_two_triplets_are_forced() {
        let f = vec![vec![0.0], vec![0.1], vec![5.0], vec![5.1]];
        let l = vec![0, 0, 1, 1];
        let t = mine_triplets(&f, &l, 15, 0).unwrap();
        assert_eq!(t.len(), 4);
        for (a, p, n) in t {
            assert_eq!(p, a ^ 1);
            assert_ne!(l[n], l[a]);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let f = vec![vec![0.0], vec![1.0]];
        assert!(matches!(mine_triplets(&f, &[3, 3], 2, 0), Err(Error::Triplet(_))));
    }

    #[test]
    fn neighbours_match_full_sort() {
        let (f, l) = toy_blobs(40, 3, 1.0, 5);
        let all: Vec<usize> = (0..f.len()).collect();
        let nb = nearest_same_class(&f, &l, &all, &all, 15);
        for a in 0..f.len() {
            let mut d: Vec<(f64, usize)> = (0..f.len())
                .filter(|&j| j != a && l[j] == l[a])
                .map(|j| ((0..3).map(|k| (f[a][k] - f[j][k]).powi(2)).sum(), j))
                .collect();
            d.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let expected: Vec<usize> = d.iter().take(15).map(|x| x.1).collect();
            assert_eq!(nb[a], expected);
        }
    }

    #[test]
    fn hinge_is_zero_when_satisfied() {
        let f = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0]];
        let mut r = Reducer::from_layers(vec![DenseLayer {
            in_dim: 2,
            out_dim: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0; 2],
        }])
        .unwrap();
        assert_eq!(triplet_loss(&r, &f, &[(0, 1, 2)], 0.0), 0.0);
        assert_eq!(triplet_loss(&r, &f, &[(0, 2, 1)], 0.0), 100.0);
        r.set_params(&[0.0; 6]).unwrap();
        assert_eq!(triplet_loss(&r, &f, &[(0, 2, 1)], 0.0), 0.0);
    }

    #[test]
    fn lipschitz_bound_of_diagonal() {
        let r = Reducer::from_layers(vec![
            DenseLayer {
                in_dim: 2,
                out_dim: 2,
                weights: vec![3.0, 0.0, 0.0, -0.5],
                bias: vec![0.0; 2],
            },
            DenseLayer {
                in_dim: 2,
                out_dim: 1,
                weights: vec![0.0, 2.0],
                bias: vec![0.0],
            },
        ])
        .unwrap();
        assert!((r.lipschitz_bound() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn training_separates_blobs() {
        let (f, l) = toy_blobs(150, 16, 3.0, 2);
        let cfg = SdrConfig {
            out_dim: 2,
            hidden_dims: vec![16],
            epochs: 20,
            seed: 4,
            ..SdrConfig::default()
        };
        let (r, report) = train_reducer_traced(&f, &l, &cfg).unwrap();
        assert!(report.train_losses.iter().all(|&v| v >= 0.0));
        assert!(report.val_losses[report.best_epoch] <= report.val_losses[0]);
        let again = train_reducer(&f, &l, &cfg).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut f, l) = toy_blobs(20, 4, 1.0, 2);
        f[0][0] = f64::NAN;
        let cfg = SdrConfig {
            out_dim: 2,
            hidden_dims: vec![4],
            epochs: 2,
            validation_fraction: 0.0,
            ..SdrConfig::default()
        };
        assert!(matches!(train_reducer(&f, &l, &cfg), Err(Error::Divergence(_))));
    }

    #[test]
    fn out_dim_must_shrink() {
        let (f, l) = toy_blobs(10, 4, 1.0, 2);
        let cfg = SdrConfig {
            out_dim: 4,
            ..SdrConfig::default()
        };
        assert!(matches!(train_reducer(&f, &l, &cfg), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn lipschitz_holds_on_differences(seed in 0u64..1000) {
            let r = Reducer::random(&[6, 10, 10, 3], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let (gx, gy) = (r.transform(&x).unwrap(), r.transform(&y).unwrap());
            let dout: f64 = gx.iter().zip(&gy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let din: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dout <= r.lipschitz_bound() * din * (1.0 + 1e-9));
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..1000, margin in 0.0f64..2.0) {
            let (f, l) = toy_blobs(6, 3, 0.0, seed);
            let r = Reducer::random(&[3, 4, 2], seed).unwrap();
            let t = mine_triplets(&f, &l, 3, seed).unwrap();
            prop_assert!(triplet_loss(&r, &f, &t, margin) >= 0.0);
            for &(a, p, n) in &t {
                prop_assert_eq!(l[a], l[p]);
                prop_assert_ne!(l[a], l[n]);
                prop_assert_ne!(a, p);
            }
        }
    }
}
