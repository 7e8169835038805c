//! Weak-label-guided sample similarity graph and its Laplacian penalty.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

pub const DEFAULT_ETA: f64 = 100.0;

/// Symmetric similarity `T ∈ [0,1]^{b×b}` with Laplacian `L = D − T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    similarity: Matrix,
    laplacian: Matrix,
}

impl SimilarityGraph {
    pub fn from_similarity(t: Matrix) -> Result<Self> {
        let (r, c) = t.shape();
        if r != c {
            return Err(Error::dim("similarity graph", (r, c), (c, r)));
        }
        for i in 0..r {
            for j in 0..r {
                let v = t.get(i, j);
                if !(0.0..=1.0).contains(&v) || v != t.get(j, i) {
                    return Err(Error::Contract(format!(
                        "similarity must be symmetric in [0, 1]; bad entry ({i}, {j})"
                    )));
                }
            }
        }
        let mut laplacian = t.map(|v| -v);
        for i in 0..r {
            let degree: f64 = t.row(i).iter().sum();
            let d = laplacian.get(i, i) + degree;
            laplacian.set(i, i, d);
        }
        Ok(Self {
            similarity: t,
            laplacian,
        })
    }

    pub fn similarity(&self) -> &Matrix {
        &self.similarity
    }

    pub fn laplacian(&self) -> &Matrix {
        &self.laplacian
    }

    pub fn size(&self) -> usize {
        self.similarity.rows()
    }
}

/// `T[i,j] = C·s / (C·s + η)` with `C = G_i·G_j` the number of co-known
/// labels and `s` the number of shared known positives.
///
/// Labels are read through `G`, so an unknown entry never contributes even
/// if `Y` holds a stray 1 there.
pub fn build_graph(labels: &Matrix, label_index: &Matrix, eta: f64) -> Result<SimilarityGraph> {
    if labels.shape() != label_index.shape() {
        return Err(Error::dim("build_graph", labels.shape(), label_index.shape()));
    }
    if !(eta > 0.0) {
        return Err(Error::Contract(format!("eta must be positive, got {eta}")));
    }
    let known = labels.zip_map(label_index, |y, g| y * g)?;
    let co_known = label_index.matmul(&label_index.transpose())?;
    let shared = known.matmul(&known.transpose())?;
    let t = co_known.zip_map(&shared, |c, s| {
        let num = c * s;
        if num == 0.0 {
            0.0
        } else {
            num / (num + eta)
        }
    })?;
    SimilarityGraph::from_similarity(t)
}

/// `(1/b²)·Σ_{i,j} ‖Z_i − Z_j‖²·T_ij`, evaluated through the Laplacian as
/// `(2/b²)·Tr(Zᵀ L Z) = (2/b²)·Σ Z ⊙ (L Z)`.
pub fn graph_loss(tape: &mut Tape, z: Var, graph: &SimilarityGraph) -> Result<Var> {
    let b = graph.size();
    let (rows, _) = tape.shape(z);
    if rows != b {
        return Err(Error::dim("graph_loss", tape.shape(z), graph.laplacian.shape()));
    }
    if b == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let l = tape.constant(graph.laplacian.clone());
    let lz = tape.matmul(l, z)?;
    let prod = tape.mul(z, lz)?;
    let tr = tape.sum(prod);
    Ok(tape.scale(tr, 2.0 / (b * b) as f64))
}
