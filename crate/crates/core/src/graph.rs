//! k-NN graphs over keypoints and single-head graph attention with a gated
//! residual fusion.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::knn::knn_all;

/// Directed k-NN graph; `neighbors[i]` lists the nearest nodes of `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    neighbors: Vec<Vec<usize>>,
    positions: Vec<Vec<f64>>,
}

impl KnnGraph {
    /// Builds a graph from explicit neighbour lists, checking indices,
    /// self-loops and list lengths.
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>, positions: Vec<Vec<f64>>) -> Result<Self> {
        let n = neighbors.len();
        if positions.len() != n {
            return Err(Error::LengthMismatch(n, positions.len()));
        }
        for (i, list) in neighbors.iter().enumerate() {
            if list.is_empty() && n > 1 {
                return Err(Error::InvalidArgument(format!("node {i} has no neighbours")));
            }
            if let Some(&j) = list.iter().find(|&&j| j >= n || j == i) {
                return Err(Error::InvalidArgument(format!("node {i} has invalid neighbour {j}")));
            }
        }
        Ok(Self {
            neighbors,
            positions,
        })
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn positions(&self) -> &[Vec<f64>] {
        &self.positions
    }
}

/// Euclidean k-NN graph, self excluded, ties broken by smaller index.
pub fn build_knn_graph<const D: usize>(positions: &[[f64; D]], k: usize) -> Result<KnnGraph> {
    if positions.len() < 2 {
        return Err(Error::InvalidArgument("graph needs at least two nodes".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(KnnGraph {
        neighbors: knn_all(positions, k.min(positions.len() - 1)),
        positions: positions.iter().map(|p| p.to_vec()).collect(),
    })
}

/// Projection and gate weights for one attention layer on `C` channels.
///
/// The gate is a two-layer perceptron `2C -> C -> C` with a ReLU hidden layer
/// and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAttentionParams {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
    pub gate_hidden: DMatrix<f64>,
    pub gate_hidden_bias: DVector<f64>,
    pub gate_out: DMatrix<f64>,
    pub gate_out_bias: DVector<f64>,
    pub seed: u64,
}

/// Shape description written next to a serialized parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSidecar {
    pub channels: usize,
    pub seed: u64,
    pub dtype: String,
    pub tensors: Vec<TensorShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

const TENSOR_NAMES: [&str; 7] = [
    "query",
    "key",
    "value",
    "gate_hidden",
    "gate_hidden_bias",
    "gate_out",
    "gate_out_bias",
];

impl GraphAttentionParams {
    /// Uniform initialisation in `[-1/sqrt(C), 1/sqrt(C)]` from `seed`.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (channels as f64).sqrt();
        let mut draw = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.random_range(-bound..=bound))
        };
        let query = draw(channels, channels);
        let key = draw(channels, channels);
        let value = draw(channels, channels);
        let gate_hidden = draw(channels, 2 * channels);
        let gate_hidden_bias = draw(channels, 1).column(0).into_owned();
        let gate_out = draw(channels, channels);
        let gate_out_bias = draw(channels, 1).column(0).into_owned();
        Self {
            query,
            key,
            value,
            gate_hidden,
            gate_hidden_bias,
            gate_out,
            gate_out_bias,
            seed,
        }
    }

    /// Identity projections with a zero gate (sigmoid output 0.5 everywhere).
    pub fn identity(channels: usize) -> Self {
        Self {
            query: DMatrix::identity(channels, channels),
            key: DMatrix::identity(channels, channels),
            value: DMatrix::identity(channels, channels),
            gate_hidden: DMatrix::zeros(channels, 2 * channels),
            gate_hidden_bias: DVector::zeros(channels),
            gate_out: DMatrix::zeros(channels, channels),
            gate_out_bias: DVector::zeros(channels),
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.query.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let checks = [
            ("query", self.query.shape(), (c, c)),
            ("key", self.key.shape(), (c, c)),
            ("value", self.value.shape(), (c, c)),
            ("gate_hidden", self.gate_hidden.shape(), (c, 2 * c)),
            ("gate_hidden_bias", self.gate_hidden_bias.shape(), (c, 1)),
            ("gate_out", self.gate_out.shape(), (c, c)),
            ("gate_out_bias", self.gate_out_bias.shape(), (c, 1)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {want:?}, got {got:?}"
                )));
            }
        }
        let finite = self
            .row_major_tensors()
            .iter()
            .all(|(_, _, _, data)| data.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    /// `(name, rows, cols, row-major data)` for every tensor in blob order.
    fn row_major_tensors(&self) -> Vec<(&'static str, usize, usize, Vec<f64>)> {
        let mats: [&DMatrix<f64>; 5] = [
            &self.query,
            &self.key,
            &self.value,
            &self.gate_hidden,
            &self.gate_out,
        ];
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        vec![
            (TENSOR_NAMES[0], mats[0].nrows(), mats[0].ncols(), row_major(mats[0])),
            (TENSOR_NAMES[1], mats[1].nrows(), mats[1].ncols(), row_major(mats[1])),
            (TENSOR_NAMES[2], mats[2].nrows(), mats[2].ncols(), row_major(mats[2])),
            (TENSOR_NAMES[3], mats[3].nrows(), mats[3].ncols(), row_major(mats[3])),
            (
                TENSOR_NAMES[4],
                self.gate_hidden_bias.len(),
                1,
                self.gate_hidden_bias.as_slice().to_vec(),
            ),
            (TENSOR_NAMES[5], mats[4].nrows(), mats[4].ncols(), row_major(mats[4])),
            (
                TENSOR_NAMES[6],
                self.gate_out_bias.len(),
                1,
                self.gate_out_bias.as_slice().to_vec(),
            ),
        ]
    }

    /// Flat little-endian f32 blob plus its JSON-serialisable shape sidecar.
    pub fn to_blob(&self) -> (Vec<u8>, ParamsSidecar) {
        let tensors = self.row_major_tensors();
        let mut blob = Vec::new();
        let mut shapes = Vec::with_capacity(tensors.len());
        for (name, rows, cols, data) in tensors {
            for v in data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            shapes.push(TensorShape {
                name: name.to_string(),
                rows,
                cols,
            });
        }
        let sidecar = ParamsSidecar {
            channels: self.channels(),
            seed: self.seed,
            dtype: "f32le".into(),
            tensors: shapes,
        };
        (blob, sidecar)
    }

    pub fn from_blob(blob: &[u8], sidecar: &ParamsSidecar) -> Result<Self> {
        if sidecar.dtype != "f32le" {
            return Err(Error::Parse(format!("unsupported dtype {}", sidecar.dtype)));
        }
        let names: Vec<&str> = sidecar.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != TENSOR_NAMES {
            return Err(Error::Parse(format!("unexpected tensor layout {names:?}")));
        }
        let total: usize = sidecar.tensors.iter().map(|t| t.rows * t.cols).sum();
        if blob.len() != 4 * total {
            return Err(Error::LengthMismatch(4 * total, blob.len()));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let mut take = |t: &TensorShape| {
            DMatrix::from_row_iterator(t.rows, t.cols, values.by_ref().take(t.rows * t.cols))
        };
        let t = &sidecar.tensors;
        let params = Self {
            query: take(&t[0]),
            key: take(&t[1]),
            value: take(&t[2]),
            gate_hidden: take(&t[3]),
            gate_hidden_bias: take(&t[4]).column(0).into_owned(),
            gate_out: take(&t[5]),
            gate_out_bias: take(&t[6]).column(0).into_owned(),
            seed: sidecar.seed,
        };
        if params.channels() != sidecar.channels {
            return Err(Error::ShapeMismatch("channel count disagrees with tensors".into()));
        }
        params.validate()?;
        Ok(params)
    }
}

fn check_inputs(graph: &KnnGraph, features: &FeatureField, params: &GraphAttentionParams) -> Result<()> {
    params.validate()?;
    if features.rows() != graph.node_count() {
        return Err(Error::DimensionMismatch {
            expected: graph.node_count(),
            got: features.rows(),
        });
    }
    if features.channels() != params.channels() {
        return Err(Error::DimensionMismatch {
            expected: params.channels(),
            got: features.channels(),
        });
    }
    Ok(())
}

/// Softmax-normalised attention weights, aligned with each node's neighbour list.
pub fn attention_weights(
    graph: &KnnGraph,
    features: &FeatureField,
    params: &GraphAttentionParams,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(graph, features, params)?;
    let f = features.matrix();
    let q = f * params.query.transpose();
    let k = f * params.key.transpose();
    Ok(scores_to_weights(graph, &q, &k))
}

fn scores_to_weights(graph: &KnnGraph, q: &DMatrix<f64>, k: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    (0..graph.node_count())
        .map(|i| {
            let qi = q.row(i);
            let scores: Vec<f64> = graph
                .neighbors(i)
                .iter()
                .map(|&j| qi.dot(&k.row(j)) * scale)
                .collect();
            softmax(&scores)
        })
        .collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Single-head scaled dot-product attention restricted to graph neighbours:
/// `out_i = sum_j softmax_j((Q f_i).(K f_j) / sqrt(C)) V f_j`.
pub fn light_gat_forward(
    graph: &KnnGraph,
    features: &FeatureField,
    params: &GraphAttentionParams,
) -> Result<FeatureField> {
    check_inputs(graph, features, params)?;
    let f = features.matrix();
    let q = f * params.query.transpose();
    let k = f * params.key.transpose();
    let v = f * params.value.transpose();
    let weights = scores_to_weights(graph, &q, &k);
    let mut out = DMatrix::zeros(f.nrows(), f.ncols());
    for (i, w) in weights.iter().enumerate() {
        let mut row = out.row_mut(i);
        for (&j, &a) in graph.neighbors(i).iter().zip(w) {
            row += v.row(j) * a;
        }
    }
    FeatureField::new(out, features.carrier())
}

/// Channel-wise gate values `sigmoid(W2 relu(W1 [orig | refined] + b1) + b2)`.
pub fn fusion_gate(
    original: &FeatureField,
    refined: &FeatureField,
    params: &GraphAttentionParams,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    if original.matrix().shape() != refined.matrix().shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            original.matrix().shape(),
            refined.matrix().shape()
        )));
    }
    if original.channels() != params.channels() {
        return Err(Error::DimensionMismatch {
            expected: params.channels(),
            got: original.channels(),
        });
    }
    let (m, c) = original.matrix().shape();
    let mut gates = DMatrix::zeros(m, c);
    let mut joined = DVector::zeros(2 * c);
    for i in 0..m {
        joined.rows_mut(0, c).copy_from(&original.matrix().row(i).transpose());
        joined.rows_mut(c, c).copy_from(&refined.matrix().row(i).transpose());
        let hidden = (&params.gate_hidden * &joined + &params.gate_hidden_bias).map(|h| h.max(0.0));
        let logits = &params.gate_out * hidden + &params.gate_out_bias;
        for (ch, l) in logits.iter().enumerate() {
            gates[(i, ch)] = sigmoid(*l);
        }
    }
    Ok(gates)
}

/// `g * refined + (1 - g) * original` with `g` from [`fusion_gate`].
pub fn gated_fusion(
    original: &FeatureField,
    refined: &FeatureField,
    params: &GraphAttentionParams,
) -> Result<FeatureField> {
    let g = fusion_gate(original, refined, params)?;
    let o = original.matrix();
    let r = refined.matrix();
    let out = DMatrix::from_fn(o.nrows(), o.ncols(), |i, j| {
        g[(i, j)] * r[(i, j)] + (1.0 - g[(i, j)]) * o[(i, j)]
    });
    FeatureField::new(out, original.carrier())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
