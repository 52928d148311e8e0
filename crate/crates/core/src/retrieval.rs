//! Global scan description and candidate retrieval.
//!
//! A scan's coarse features are pooled into a fixed-length vector by
//! soft-assignment residual aggregation (VLAD-style), compressed by a small
//! MLP, and re-weighted per channel with a sigmoid context gate. Descriptors
//! live in an exact-search database keyed by keyframe id.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{Binding, ComputeError, Graph, ParamStore, TensorId};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("database file error: {0}")]
    Database(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, serde::Serialize)]
pub struct RetrievalConfig {
    /// Number of soft-assignment clusters.
    pub clusters: usize,
    /// Global descriptor width G.
    pub out_dim: usize,
    /// Input feature width (coarse encoder level).
    pub feat_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            clusters: 32,
            out_dim: 256,
            feat_dim: 256,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect()
}

pub fn init_params(store: &mut ParamStore, cfg: &RetrievalConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d, g) = (cfg.clusters, cfg.feat_dim, cfg.out_dim);
    store.insert(
        "retrieval.vlad.w",
        vec![d, k],
        gaussian(&mut rng, d * k, (1.0 / d as f64).sqrt()),
    );
    store.insert("retrieval.vlad.b", vec![k], vec![0.0; k]);
    store.insert(
        "retrieval.vlad.c",
        vec![k, d],
        gaussian(&mut rng, k * d, 1.0),
    );
    store.insert(
        "retrieval.mlp1.w",
        vec![k * d, g],
        gaussian(&mut rng, k * d * g, (1.0 / (k * d) as f64).sqrt()),
    );
    store.insert("retrieval.mlp1.b", vec![g], vec![0.0; g]);
    store.insert(
        "retrieval.mlp2.w",
        vec![g, g],
        gaussian(&mut rng, g * g, (1.0 / g as f64).sqrt()),
    );
    store.insert("retrieval.mlp2.b", vec![g], vec![0.0; g]);
    store.insert(
        "retrieval.gate.w",
        vec![g, g],
        gaussian(&mut rng, g * g, (1.0 / g as f64).sqrt()),
    );
    store.insert("retrieval.gate.b", vec![g], vec![0.0; g]);
}

/// Names of the parameters trained during the retrieval linear probe.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("retrieval.")
}

/// Soft-assignment residual pooling: a = softmax(F w + b) row-wise;
/// FR_k = sum_i a_ik (F_i - c_k), returned as a [K x d] tensor.
pub fn vlad_residuals(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    feats: TensorId,
) -> Result<TensorId> {
    let w = binding.param(g, store, "retrieval.vlad.w")?;
    let b = binding.param(g, store, "retrieval.vlad.b")?;
    let c = binding.param(g, store, "retrieval.vlad.c")?;
    let n = g.shape(feats)[0];
    let logits = g.linear(feats, w, b)?;
    let a = g.softmax_rows(logits)?;
    let at = g.transpose(a)?;
    let atf = g.matmul(at, feats)?;
    // column sums of a = row sums of a^T
    let ones = g.constant(vec![1.0; n], &[1, n])?;
    let colsum = g.matmul(ones, a)?;
    let k = g.shape(colsum)[1];
    let colsum = g.reshape(colsum, &[k])?;
    let scaled_c = g.mul_col_vec(c, colsum)?;
    Ok(g.sub(atf, scaled_c)?)
}

/// Full description head: pooled residuals, MLP compression to a [1 x G]
/// row, and the sigmoid context gate.
pub fn describe(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    feats: TensorId,
) -> Result<TensorId> {
    let fr = vlad_residuals(g, store, binding, feats)?;
    let k = g.shape(fr)[0];
    let d = g.shape(fr)[1];
    let flat = g.reshape(fr, &[1, k * d])?;
    let w1 = binding.param(g, store, "retrieval.mlp1.w")?;
    let b1 = binding.param(g, store, "retrieval.mlp1.b")?;
    let w2 = binding.param(g, store, "retrieval.mlp2.w")?;
    let b2 = binding.param(g, store, "retrieval.mlp2.b")?;
    let h = g.linear(flat, w1, b1)?;
    let h = g.relu(h)?;
    let x = g.linear(h, w2, b2)?;
    context_gate(g, store, binding, x)
}

/// V = sigmoid(X W + b) elementwise-times X.
pub fn context_gate(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    x: TensorId,
) -> Result<TensorId> {
    let w = binding.param(g, store, "retrieval.gate.w")?;
    let b = binding.param(g, store, "retrieval.gate.b")?;
    let gate = g.linear(x, w, b)?;
    let gate = g.sigmoid(gate)?;
    Ok(g.mul(gate, x)?)
}

// ── descriptor database ─────────────────────────────────────────────────

/// Exact-search descriptor store; insertion order defines ranking tie-breaks.
#[derive(Debug, Clone, Default)]
pub struct DescriptorDb {
    dim: usize,
    records: Vec<(u64, Vec<f64>)>,
}

const DB_MAGIC: &[u8; 8] = b"LKDESCDB";
const DB_VERSION: u32 = 1;

impl DescriptorDb {
    pub fn new(dim: usize) -> Self {
        DescriptorDb {
            dim,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, id: u64, descriptor: Vec<f64>) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(RetrievalError::InvalidInput(format!(
                "descriptor width {} vs database width {}",
                descriptor.len(),
                self.dim
            )));
        }
        if let Some((last, _)) = self.records.last() {
            if id <= *last {
                return Err(RetrievalError::InvalidInput(format!(
                    "id {id} not increasing past {last}"
                )));
            }
        }
        self.records.push((id, descriptor));
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.records
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|i| self.records[i].1.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|(i, _)| *i)
    }

    /// Exact k-nearest records by Euclidean distance, ties broken toward
    /// the lower id. Records failing `include` are skipped. The boolean is
    /// true when fewer than k candidates existed.
    pub fn query(
        &self,
        q: &[f64],
        k: usize,
        include: impl Fn(u64) -> bool,
    ) -> Result<(Vec<(u64, f64)>, bool)> {
        if self.is_empty() {
            return Err(RetrievalError::InvalidInput(
                "query on empty database".into(),
            ));
        }
        if q.len() != self.dim || k == 0 {
            return Err(RetrievalError::InvalidInput(format!(
                "query width {} / k {}",
                q.len(),
                k
            )));
        }
        let mut scored: Vec<(u64, f64)> = self
            .records
            .iter()
            .filter(|(id, _)| include(*id))
            .map(|(id, v)| {
                let d2: f64 = v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (*id, d2.sqrt())
            })
            .collect();
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let truncated = scored.len() < k;
        scored.truncate(k);
        Ok((scored, truncated))
    }

    /// Serialized layout: magic, version u32, dim u32, count u64, then per
    /// record id u64 followed by dim little-endian f64 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.records.len() * (8 + self.dim * 8));
        buf.extend_from_slice(DB_MAGIC);
        buf.extend_from_slice(&DB_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (id, v) in &self.records {
            buf.extend_from_slice(&id.to_le_bytes());
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(RetrievalError::Database(format!(
                    "truncated at byte {}",
                    *pos
                )));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != DB_MAGIC {
            return Err(RetrievalError::Database("bad magic".into()));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != DB_VERSION {
            return Err(RetrievalError::Database(format!(
                "unsupported version {ver}"
            )));
        }
        let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut db = DescriptorDb::new(dim);
        for _ in 0..count {
            let id = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            db.insert(id, v)?;
        }
        Ok(db)
    }
}

// ── metrics ─────────────────────────────────────────────────────────────

/// Area under the ROC curve by trapezoidal integration over score
/// thresholds. Requires at least one positive and one negative.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    let pos = scored.iter().filter(|(_, t)| *t).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(RetrievalError::Undefined(format!(
            "AUC needs both classes ({pos} pos, {neg} neg)"
        )));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap());
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        // advance through score ties together so the curve is well-defined
        let s = scored[order[i]].0;
        while i < order.len() && scored[order[i]].0 == s {
            if scored[order[i]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Maximum F1 over all score thresholds (predict positive at score ≥ t).
pub fn f1_max(scored: &[(f64, bool)]) -> Result<f64> {
    let pos = scored.iter().filter(|(_, t)| *t).count();
    if pos == 0 {
        return Err(RetrievalError::Undefined(
            "F1 needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap());
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut best = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let s = scored[order[i]].0;
        while i < order.len() && scored[order[i]].0 == s {
            if scored[order[i]].1 {
                tp += 1;
            }
            predicted += 1;
            i += 1;
        }
        if tp > 0 {
            let precision = tp as f64 / predicted as f64;
            let recall = tp as f64 / pos as f64;
            best = best.max(2.0 * precision * recall / (precision + recall));
        }
    }
    Ok(best)
}

/// Fraction of queries whose single most similar candidate is a true match.
/// Each entry is the query's candidate truth labels in ranked order.
pub fn recall_at_1(ranked: &[Vec<bool>]) -> Result<f64> {
    if ranked.is_empty() {
        return Err(RetrievalError::Undefined("no queries".into()));
    }
    let hits = ranked
        .iter()
        .filter(|r| r.first().copied().unwrap_or(false))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Fraction of queries with a true match among the top 1% (at least one)
/// of `db_size` candidates.
pub fn recall_at_1pct(ranked: &[Vec<bool>], db_size: usize) -> Result<f64> {
    if ranked.is_empty() || db_size == 0 {
        return Err(RetrievalError::Undefined(
            "no queries or empty database".into(),
        ));
    }
    let k = (db_size as f64 * 0.01).ceil().max(1.0) as usize;
    let hits = ranked
        .iter()
        .filter(|r| r.iter().take(k).any(|&t| t))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cfg: &RetrievalConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut store, cfg, seed);
        store
    }

    fn toy_cfg() -> RetrievalConfig {
        RetrievalConfig {
            clusters: 3,
            out_dim: 5,
            feat_dim: 4,
        }
    }

    fn randvec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_cluster_residuals_sum_feature_offsets() {
        let cfg = RetrievalConfig {
            clusters: 1,
            out_dim: 4,
            feat_dim: 3,
        };
        let store = setup(&cfg, 1);
        let fv = randvec(2, 5 * 3);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let f = g.constant(fv.clone(), &[5, 3]).unwrap();
        let fr = vlad_residuals(&mut g, &store, &mut b, f).unwrap();
        let c = store.get("retrieval.vlad.c").unwrap().1;
        for col in 0..3 {
            let want: f64 = (0..5).map(|i| fv[i * 3 + col] - c[col]).sum();
            assert!((g.values(fr)[col] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn features_on_dominant_center_cancel() {
        let cfg = toy_cfg();
        let mut store = setup(&cfg, 3);
        // make cluster 0 dominate every soft assignment
        let mut w = vec![0.0; 4 * 3];
        for r in 0..4 {
            w[r * 3] = 0.0;
            w[r * 3 + 1] = -100.0;
            w[r * 3 + 2] = -100.0;
        }
        store.insert("retrieval.vlad.w", vec![4, 3], w);
        store.insert("retrieval.vlad.b", vec![3], vec![100.0, 0.0, 0.0]);
        let c = store.get("retrieval.vlad.c").unwrap().1.to_vec();
        let f0 = &c[0..4];
        let fv: Vec<f64> = f0.iter().copied().cycle().take(6 * 4).collect();
        let mut g = Graph::new();
        let mut b = Binding::new();
        let f = g.constant(fv, &[6, 4]).unwrap();
        let fr = vlad_residuals(&mut g, &store, &mut b, f).unwrap();
        for &v in &g.values(fr)[0..4] {
            assert!(v.abs() < 1e-9, "residual {v}");
        }
    }

    #[test]
    fn residuals_match_direct_formula() {
        let cfg = toy_cfg();
        let store = setup(&cfg, 4);
        let fv = randvec(5, 5 * 4);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let f = g.constant(fv.clone(), &[5, 4]).unwrap();
        let fr = vlad_residuals(&mut g, &store, &mut b, f).unwrap();
        // direct-formula oracle
        let w = store.get("retrieval.vlad.w").unwrap().1;
        let bias = store.get("retrieval.vlad.b").unwrap().1;
        let c = store.get("retrieval.vlad.c").unwrap().1;
        let mut want = vec![0.0; 3 * 4];
        for i in 0..5 {
            let mut logits = vec![0.0; 3];
            for k in 0..3 {
                logits[k] = bias[k] + (0..4).map(|a| fv[i * 4 + a] * w[a * 3 + k]).sum::<f64>();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for k in 0..3 {
                let a = (logits[k] - mx).exp() / den;
                for col in 0..4 {
                    want[k * 4 + col] += a * (fv[i * 4 + col] - c[k * 4 + col]);
                }
            }
        }
        for (got, want) in g.values(fr).iter().zip(&want) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn gate_at_zero_weights_halves_input() {
        let cfg = toy_cfg();
        let mut store = setup(&cfg, 6);
        store.insert("retrieval.gate.w", vec![5, 5], vec![0.0; 25]);
        store.insert("retrieval.gate.b", vec![5], vec![0.0; 5]);
        let xv = randvec(7, 5);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let x = g.constant(xv.clone(), &[1, 5]).unwrap();
        let v = context_gate(&mut g, &store, &mut b, x).unwrap();
        for (a, want) in g.values(v).iter().zip(&xv) {
            assert!((a - 0.5 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_passes_input_through() {
        let cfg = toy_cfg();
        let mut store = setup(&cfg, 8);
        store.insert("retrieval.gate.w", vec![5, 5], vec![0.0; 25]);
        store.insert("retrieval.gate.b", vec![5], vec![50.0; 5]);
        let xv = randvec(9, 5);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let x = g.constant(xv.clone(), &[1, 5]).unwrap();
        let v = context_gate(&mut g, &store, &mut b, x).unwrap();
        for (a, want) in g.values(v).iter().zip(&xv) {
            assert!((a - want).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_matches_direct_formula_and_bounds() {
        let cfg = toy_cfg();
        let store = setup(&cfg, 10);
        let xv = randvec(11, 5);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let x = g.constant(xv.clone(), &[1, 5]).unwrap();
        let v = context_gate(&mut g, &store, &mut b, x).unwrap();
        let w = store.get("retrieval.gate.w").unwrap().1;
        let bias = store.get("retrieval.gate.b").unwrap().1;
        for c in 0..5 {
            let z: f64 = bias[c] + (0..5).map(|a| xv[a] * w[a * 5 + c]).sum::<f64>();
            let want = xv[c] / (1.0 + (-z).exp());
            let got = g.values(v)[c];
            assert!((got - want).abs() < 1e-12);
            assert!(got.abs() <= xv[c].abs() + 1e-15);
        }
    }

    #[test]
    fn describe_emits_fixed_width_row() {
        let cfg = toy_cfg();
        let store = setup(&cfg, 12);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let f = g.constant(randvec(13, 7 * 4), &[7, 4]).unwrap();
        let v = describe(&mut g, &store, &mut b, f).unwrap();
        assert_eq!(g.shape(v), &[1, 5]);
    }

    #[test]
    fn db_exact_query_and_edge_cases() {
        let mut db = DescriptorDb::new(3);
        db.insert(0, vec![1.0, 0.0, 0.0]).unwrap();
        let (top, flagged) = db.query(&[1.0, 0.0, 0.0], 5, |_| true).unwrap();
        assert!(flagged);
        assert_eq!(top, vec![(0, 0.0)]);
        db.insert(7, vec![0.0, 1.0, 0.0]).unwrap();
        assert!(db.insert(7, vec![0.0; 3]).is_err());
        let (top, _) = db.query(&[0.0, 1.0, 0.0], 1, |_| true).unwrap();
        assert_eq!(top[0].0, 7);
        // exclusion predicate
        let (top, _) = db.query(&[0.0, 1.0, 0.0], 1, |id| id != 7).unwrap();
        assert_eq!(top[0].0, 0);
    }

    #[test]
    fn db_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut db = DescriptorDb::new(8);
        let mut raw = Vec::new();
        for id in 0..500u64 {
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            db.insert(id, v.clone()).unwrap();
            raw.push(v);
        }
        for _ in 0..20 {
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (got, _) = db.query(&q, 10, |_| true).unwrap();
            let mut want: Vec<(u64, f64)> = raw
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    (
                        i as u64,
                        v.iter()
                            .zip(&q)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt(),
                    )
                })
                .collect();
            want.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            want.truncate(10);
            assert_eq!(
                got.iter().map(|x| x.0).collect::<Vec<_>>(),
                want.iter().map(|x| x.0).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn db_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut db = DescriptorDb::new(4);
        for id in [2u64, 5, 9] {
            db.insert(id, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("descriptors.db");
        db.save(&path).unwrap();
        let loaded = DescriptorDb::load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for id in [2u64, 5, 9] {
            let a = db.get(id).unwrap();
            let b = loaded.get(id).unwrap();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn perfectly_separated_scores() {
        let scored = vec![(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(auc(&scored).unwrap(), 1.0);
        assert_eq!(f1_max(&scored).unwrap(), 1.0);
    }

    #[test]
    fn f1max_hand_case() {
        // threshold sweep over (.9 pos, .8 pos, .7 neg, .1 neg): best split
        // keeps both positives and no negative until .7, F1 = 1 at t=.8
        let scored = vec![(0.9, true), (0.8, true), (0.7, false), (0.1, false)];
        assert_eq!(f1_max(&scored).unwrap(), 1.0);
        // and a case where perfection is impossible
        let scored = vec![(0.9, true), (0.8, false), (0.7, true), (0.1, false)];
        // candidates: t=.9 -> P=1,R=.5,F1=2/3; t=.7 -> P=2/3,R=1,F1=.8
        assert!((f1_max(&scored).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn auc_random_scores_center_on_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut total = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let scored: Vec<(f64, bool)> = (0..100)
                .map(|i| (rng.gen_range(0.0..1.0), i % 2 == 0))
                .collect();
            total += auc(&scored).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean AUC {mean}");
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scored: Vec<(f64, bool)> = (0..60)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_bool(0.4)))
            .collect();
        let a1 = auc(&scored).unwrap();
        let transformed: Vec<(f64, bool)> =
            scored.iter().map(|&(s, t)| ((s * 3.0).exp(), t)).collect();
        let a2 = auc(&transformed).unwrap();
        assert!((a1 - a2).abs() < 1e-12);
    }

    #[test]
    fn auc_undefined_on_single_class() {
        assert!(auc(&[(0.5, true), (0.4, true)]).is_err());
    }

    #[test]
    fn recall_metrics() {
        let ranked = vec![vec![true, false], vec![false, true], vec![false, false]];
        assert!((recall_at_1(&ranked).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // db of 150 -> top 1% = 2 candidates
        assert!((recall_at_1pct(&ranked, 150).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // db of 50 -> at least 1 candidate
        assert!((recall_at_1pct(&ranked, 50).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn describe_gradient_reaches_inputs() {
        let cfg = toy_cfg();
        let store = setup(&cfg, 18);
        let f0 = randvec(19, 4 * 4);
        let err = crate::compute::finite_diff_check(
            |g, f| {
                let mut b = Binding::with_filter(|_| false);
                let v = describe(g, &store, &mut b, f)
                    .map_err(|e| ComputeError::Oracle(e.to_string()))?;
                let v2 = g.mul(v, v)?;
                g.sum(v2)
            },
            &f0,
            &[4, 4],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
