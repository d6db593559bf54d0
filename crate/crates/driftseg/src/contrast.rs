//! Global and local contrastive learning with a momentum negative queue.
//!
//! The local branch contrasts projection vectors across the spatial grid of
//! an image pair (original vs. stylized); the positive for each anchor
//! location is the most cosine-similar vector anywhere in the paired grid,
//! everything else in that grid is a negative. The global branch contrasts
//! whole-image vectors, drawing extra negatives from same-batch images,
//! cross-style features, and a FIFO queue of historical teacher features.

use crate::autodiff::{Tape, Var};
use ndarray::{Array1, Array2, Array3};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("queue entry has norm {0}, expected unit")]
    NonUnitVector(f64),
    #[error("empty anchor set")]
    EmptyAnchors,
}

/// Fixed-capacity FIFO of unit vectors serving as contrastive negatives.
/// Entries are plain arrays: nothing stored here ever receives gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    entries: VecDeque<Array1<f64>>,
    capacity: usize,
    /// Total number of vectors ever pushed.
    pub write_cursor: u64,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> NegativeQueue {
        NegativeQueue {
            entries: VecDeque::new(),
            capacity,
            write_cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.entries.iter()
    }

    /// Rebuilds a queue from stored entries (checkpoint restore).
    pub fn from_entries(
        capacity: usize,
        entries: Vec<Array1<f64>>,
        write_cursor: u64,
    ) -> NegativeQueue {
        NegativeQueue {
            entries: entries.into_iter().collect(),
            capacity,
            write_cursor,
        }
    }
}

/// Appends unit vectors, evicting the oldest entries beyond capacity.
pub fn queue_push(queue: &mut NegativeQueue, vectors: &[Array1<f64>]) -> Result<(), ContrastError> {
    for v in vectors {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(ContrastError::NonUnitVector(norm));
        }
    }
    for v in vectors {
        queue.entries.push_back(v.clone());
        if queue.entries.len() > queue.capacity {
            queue.entries.pop_front();
        }
        queue.write_cursor += 1;
    }
    Ok(())
}

/// Index of the most similar paired-grid vector for every anchor location;
/// similarity ties resolve to the lowest index.
pub fn local_positive_indices(anchor: &Array2<f64>, paired: &Array2<f64>) -> Vec<usize> {
    let m = anchor.ncols();
    (0..m)
        .map(|a| {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for p in 0..m {
                let sim: f64 = anchor
                    .column(a)
                    .iter()
                    .zip(paired.column(p))
                    .map(|(x, y)| x * y)
                    .sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = p;
                }
            }
            best
        })
        .collect()
}

/// InfoNCE over one `[K, S, S]` grid pair on the tape.
///
/// For each anchor location the positive is the argmax-similarity vector in
/// the paired grid and all other paired locations are negatives, so each
/// per-anchor term is `ln sum_n exp(s_n / tau) - s_pos / tau`, averaged over
/// the grid.
pub fn local_contrastive_loss_var(
    anchor: &Var,
    paired: &Var,
    tau: f64,
) -> Result<Var, ContrastError> {
    if tau <= 0.0 {
        return Err(ContrastError::BadTemperature(tau));
    }
    let a_shape = anchor.shape();
    if a_shape != paired.shape() || a_shape.len() != 3 {
        return Err(ContrastError::Shape(format!(
            "{a_shape:?} vs {:?}",
            paired.shape()
        )));
    }
    let (k, s2) = (a_shape[0], a_shape[1] * a_shape[2]);
    let tape = anchor.tape();
    let a_flat = anchor.reshape(&[k, s2]);
    let p_flat = paired.reshape(&[k, s2]);
    let sims = a_flat.transpose2().matmul(&p_flat); // [S^2, S^2]

    let sims_val = sims.value();
    let sims_mat = sims_val
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let positives = {
        let mut out = Vec::with_capacity(s2);
        for m in 0..s2 {
            let row = sims_mat.row(m);
            let mut best = 0usize;
            for n in 1..s2 {
                if row[n] > row[best] {
                    best = n;
                }
            }
            out.push(best);
        }
        out
    };
    let mut pos_mask = Array2::zeros((s2, s2));
    for (m, &p) in positives.iter().enumerate() {
        pos_mask[[m, p]] = 1.0;
    }

    // mean over rows of [ln sum_n exp(s_mn / tau) - s_m,pos / tau]
    let scaled = sims.mul_scalar(1.0 / tau);
    let ones = tape.constant(Array2::from_elem((s2, 1), 1.0).into_dyn());
    let row_logsum = scaled.exp().matmul(&ones).ln().sum();
    let pos_sum = scaled
        .mul(&tape.constant(pos_mask.into_dyn()))
        .sum();
    Ok(row_logsum.sub(&pos_sum).mul_scalar(1.0 / s2 as f64))
}

/// Plain-value local contrastive loss.
pub fn local_contrastive_loss(
    anchor: &Array3<f64>,
    paired: &Array3<f64>,
    tau: f64,
) -> Result<f64, ContrastError> {
    let tape = Tape::new();
    let a = tape.constant(anchor.clone().into_dyn());
    let p = tape.constant(paired.clone().into_dyn());
    Ok(local_contrastive_loss_var(&a, &p, tau)?.scalar_value())
}

/// Global InfoNCE on the tape. The denominator of anchor `i` collects the
/// positive term, every other same-batch anchor, every cross-style vector,
/// and every queue entry.
pub fn global_contrastive_loss_var(
    anchors: &[Var],
    positives: &[Var],
    cross_negatives: &[Var],
    queue: &NegativeQueue,
    tau: f64,
) -> Result<Var, ContrastError> {
    if tau <= 0.0 {
        return Err(ContrastError::BadTemperature(tau));
    }
    if anchors.is_empty() {
        return Err(ContrastError::EmptyAnchors);
    }
    if anchors.len() != positives.len() {
        return Err(ContrastError::Shape(format!(
            "{} anchors vs {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    let tape = anchors[0].tape();
    let queue_consts: Vec<Var> = queue
        .entries()
        .map(|q| tape.constant(q.clone().into_dyn()))
        .collect();

    let dot = |a: &Var, b: &Var| a.mul(b).sum().mul_scalar(1.0 / tau);
    let mut total = tape.scalar(0.0);
    for (i, anchor) in anchors.iter().enumerate() {
        let pos = dot(anchor, &positives[i]);
        let mut denom = pos.exp();
        for (j, other) in anchors.iter().enumerate() {
            if j != i {
                denom = denom.add(&dot(anchor, other).exp());
            }
        }
        for x in cross_negatives {
            denom = denom.add(&dot(anchor, x).exp());
        }
        for q in &queue_consts {
            denom = denom.add(&dot(anchor, q).exp());
        }
        total = total.add(&denom.ln().sub(&pos));
    }
    Ok(total.mul_scalar(1.0 / anchors.len() as f64))
}

/// Plain-value global contrastive loss.
pub fn global_contrastive_loss(
    anchors: &[Array1<f64>],
    positives: &[Array1<f64>],
    cross_negatives: &[Array1<f64>],
    queue: &NegativeQueue,
    tau: f64,
) -> Result<f64, ContrastError> {
    let tape = Tape::new();
    let wrap = |xs: &[Array1<f64>]| -> Vec<Var> {
        xs.iter()
            .map(|x| tape.constant(x.clone().into_dyn()))
            .collect()
    };
    Ok(global_contrastive_loss_var(
        &wrap(anchors),
        &wrap(positives),
        &wrap(cross_negatives),
        queue,
        tau,
    )?
    .scalar_value())
}

/// The four aligned views of one batch, projected. Index `i` of every list
/// refers to the same underlying image pair.
pub struct ContrastiveBatch {
    /// `[K, S, S]` local grids per image.
    pub local_source: Vec<Var>,
    pub local_source_stylized: Vec<Var>,
    pub local_target: Vec<Var>,
    pub local_target_stylized: Vec<Var>,
    /// `[G]` unit vectors per image.
    pub global_source: Vec<Var>,
    pub global_source_stylized: Vec<Var>,
    pub global_target: Vec<Var>,
    pub global_target_stylized: Vec<Var>,
    pub temperature: f64,
    /// Teacher-produced global vectors to enqueue after the loss is built.
    pub teacher_globals: Vec<Array1<f64>>,
}

/// Components of the combined contrastive objective.
pub struct GlclParts {
    pub total: Var,
    pub global: Var,
    pub local: Var,
}

/// Combined loss `lambda * global + (1 - lambda) * local`, averaging the
/// source and target directions of each branch; afterwards the batch's
/// teacher vectors are pushed into the queue.
pub fn glcl_loss(
    tape: &Tape,
    batch: &ContrastiveBatch,
    queue: &mut NegativeQueue,
    lambda_mix: f64,
) -> Result<GlclParts, ContrastError> {
    assert!((0.0..=1.0).contains(&lambda_mix), "lambda_mix out of [0, 1]");
    let tau = batch.temperature;

    let mean_local = |anchors: &[Var], paired: &[Var]| -> Result<Var, ContrastError> {
        if anchors.len() != paired.len() {
            return Err(ContrastError::Shape(format!(
                "{} anchors vs {} paired grids",
                anchors.len(),
                paired.len()
            )));
        }
        let mut acc = tape.scalar(0.0);
        for (a, p) in anchors.iter().zip(paired) {
            acc = acc.add(&local_contrastive_loss_var(a, p, tau)?);
        }
        Ok(acc.mul_scalar(1.0 / anchors.len().max(1) as f64))
    };
    let local_source = mean_local(&batch.local_source, &batch.local_target_stylized)?;
    let local_target = mean_local(&batch.local_target, &batch.local_source_stylized)?;
    let local = local_source.add(&local_target).mul_scalar(0.5);

    let global_source = global_contrastive_loss_var(
        &batch.global_source,
        &batch.global_source_stylized,
        &batch.global_target_stylized,
        queue,
        tau,
    )?;
    let global_target = global_contrastive_loss_var(
        &batch.global_target,
        &batch.global_target_stylized,
        &batch.global_source_stylized,
        queue,
        tau,
    )?;
    let global = global_source.add(&global_target).mul_scalar(0.5);

    let total = global
        .mul_scalar(lambda_mix)
        .add(&local.mul_scalar(1.0 - lambda_mix));
    queue_push(queue, &batch.teacher_globals)?;
    Ok(GlclParts {
        total,
        global,
        local,
    })
}
