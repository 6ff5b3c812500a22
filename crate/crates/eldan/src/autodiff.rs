//! Hand-derived exact gradients of the per-encounter NLL, a central
//! finite-difference oracle, and the checker that keeps them in agreement.
//!
//! The only subtle part of the chain is that each document representation is
//! consumed twice: as a pooled value (weighted by its attention) and as the
//! input to the attention head that produced those weights. Both paths must
//! contribute to its gradient, with the softmax Jacobian
//! `∂a_j/∂s_k = a_j(δ_jk − a_k)` sitting between the pooled loss and the
//! attention scores. Dropping the second path produces a model that still
//! trains — just subtly worse, which is exactly the kind of bug only a
//! finite-difference oracle catches.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thiserror::Error;

use crate::corpus::{Encounter, FeatureId, Label, SparseDocVector};
use crate::linalg::{self, Matrix};
use crate::model::{
    init_params, nll_loss, predict, touched_columns, Dims, ForwardTrace, Mode, ModelError,
    ModelParams, N_CLASSES,
};

/// Gradient of the attention head's tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub context: Vec<f64>,
}

/// ∂loss/∂θ for every parameter tensor. The embedding gradient is stored
/// sparsely — column by column — because an encounter only ever touches a
/// handful of the D columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Embedding columns with nonzero gradient: feature id → column vector.
    pub embed_cols: BTreeMap<u32, Vec<f64>>,
    pub enc1_w: Matrix,
    pub enc1_b: Vec<f64>,
    pub enc2_w: Matrix,
    pub enc2_b: Vec<f64>,
    pub attention: Option<AttentionGrads>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

impl Gradients {
    /// Zero gradients shaped like `params` (the embedding part starts empty).
    pub fn zeros_like(params: &ModelParams) -> Self {
        let d = &params.dims;
        Gradients {
            embed_cols: BTreeMap::new(),
            enc1_w: Matrix::zeros(d.enc1_dim, d.embed_dim),
            enc1_b: vec![0.0; d.enc1_dim],
            enc2_w: Matrix::zeros(d.enc2_dim, d.enc1_dim),
            enc2_b: vec![0.0; d.enc2_dim],
            attention: params.attention.as_ref().map(|_| AttentionGrads {
                w: Matrix::zeros(d.attn_dim, d.enc2_dim),
                b: vec![0.0; d.attn_dim],
                context: vec![0.0; d.attn_dim],
            }),
            out_w: Matrix::zeros(N_CLASSES, d.enc2_dim),
            out_b: vec![0.0; N_CLASSES],
        }
    }

    /// Accumulates `other` into `self` (minibatch summation).
    pub fn add_assign(&mut self, other: &Gradients) {
        for (col, vec) in &other.embed_cols {
            match self.embed_cols.get_mut(col) {
                Some(mine) => linalg::add_assign_vec(mine, vec),
                None => {
                    self.embed_cols.insert(*col, vec.clone());
                }
            }
        }
        self.enc1_w.add_assign(&other.enc1_w);
        linalg::add_assign_vec(&mut self.enc1_b, &other.enc1_b);
        self.enc2_w.add_assign(&other.enc2_w);
        linalg::add_assign_vec(&mut self.enc2_b, &other.enc2_b);
        match (&mut self.attention, &other.attention) {
            (Some(mine), Some(theirs)) => {
                mine.w.add_assign(&theirs.w);
                linalg::add_assign_vec(&mut mine.b, &theirs.b);
                linalg::add_assign_vec(&mut mine.context, &theirs.context);
            }
            (None, None) => {}
            _ => panic!("cannot accumulate gradients across pooling modes"),
        }
        self.out_w.add_assign(&other.out_w);
        linalg::add_assign_vec(&mut self.out_b, &other.out_b);
    }

    /// Scales every entry (minibatch averaging).
    pub fn scale(&mut self, s: f64) {
        for vec in self.embed_cols.values_mut() {
            linalg::scale_vec(vec, s);
        }
        self.enc1_w.scale(s);
        linalg::scale_vec(&mut self.enc1_b, s);
        self.enc2_w.scale(s);
        linalg::scale_vec(&mut self.enc2_b, s);
        if let Some(attn) = &mut self.attention {
            attn.w.scale(s);
            linalg::scale_vec(&mut attn.b, s);
            linalg::scale_vec(&mut attn.context, s);
        }
        self.out_w.scale(s);
        linalg::scale_vec(&mut self.out_b, s);
    }

    /// Name of the first tensor containing a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let bad = |s: &[f64]| s.iter().any(|v| !v.is_finite());
        if self.embed_cols.values().any(|v| bad(v)) {
            return Some("embedding");
        }
        for (name, slice) in [
            ("encoder1.weight", self.enc1_w.as_slice()),
            ("encoder1.bias", self.enc1_b.as_slice()),
            ("encoder2.weight", self.enc2_w.as_slice()),
            ("encoder2.bias", self.enc2_b.as_slice()),
            ("output.weight", self.out_w.as_slice()),
            ("output.bias", self.out_b.as_slice()),
        ] {
            if bad(slice) {
                return Some(name);
            }
        }
        if let Some(attn) = &self.attention {
            for (name, slice) in [
                ("attention.weight", attn.w.as_slice()),
                ("attention.bias", attn.b.as_slice()),
                ("attention.context", attn.context.as_slice()),
            ] {
                if bad(slice) {
                    return Some(name);
                }
            }
        }
        None
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("trace does not match the encounter/params it claims to come from: {reason}")]
    TraceMismatch { reason: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Exact ∂nll/∂θ for one encounter, from the activations recorded in `trace`.
pub fn backward(
    enc: &Encounter,
    y: Label,
    params: &ModelParams,
    trace: &ForwardTrace,
) -> Result<Gradients, AutodiffError> {
    if trace.docs.len() != enc.documents.len() {
        return Err(AutodiffError::TraceMismatch { reason: "document count differs" });
    }
    if trace.pooled.len() != params.dims.enc2_dim {
        return Err(AutodiffError::TraceMismatch { reason: "pooled width differs from enc2_dim" });
    }
    let attention_head = match (params.mode, &params.attention) {
        (Mode::Eldan, Some(attn)) => {
            if trace.docs.iter().any(|t| t.attn_hidden.is_none()) {
                return Err(AutodiffError::TraceMismatch {
                    reason: "attention activations missing from an eldan trace",
                });
            }
            Some(attn)
        }
        (Mode::Eldan, None) => return Err(ModelError::NoAttentionHead.into()),
        (Mode::Eldn, _) => None,
    };

    let m = trace.docs.len();
    let mut grads = Gradients::zeros_like(params);

    // Output layer: softmax-NLL collapses to probs − onehot.
    let mut delta_out = [trace.probs[0], trace.probs[1]];
    delta_out[y.class_index()] -= 1.0;
    grads.out_w.add_outer(&delta_out, &trace.pooled);
    linalg::add_assign_vec(&mut grads.out_b, &delta_out);

    // Gradient flowing into the pooled encounter vector.
    let g_pooled = params.out_w.matvec_t(&delta_out);

    // Per-document gradient on the representation via the pooling weights,
    // plus (in attention mode) via the scores the representation produced.
    let mut g_repr: Vec<Vec<f64>> = trace.attention.iter().map(|&a| {
        let mut g = g_pooled.clone();
        linalg::scale_vec(&mut g, a);
        g
    }).collect();

    if let Some(attn) = attention_head {
        // ∂loss/∂a_j is the pooled gradient dotted with each representation;
        // the softmax Jacobian turns that into score gradients.
        let g_a: Vec<f64> = trace.docs.iter().map(|t| linalg::dot(&g_pooled, &t.repr)).collect();
        let inner: f64 = g_a.iter().zip(&trace.attention).map(|(g, a)| g * a).sum();
        let g_score: Vec<f64> =
            trace.attention.iter().zip(&g_a).map(|(a, g)| a * (g - inner)).collect();

        let attn_grads = grads.attention.as_mut().expect("eldan gradients carry an attention block");
        for j in 0..m {
            let u = trace.docs[j].attn_hidden.as_ref().expect("checked above");
            linalg::axpy(&mut attn_grads.context, g_score[j], u);
            // Through tanh of the attention transform.
            let mut delta_u: Vec<f64> =
                attn.context.iter().zip(u).map(|(c, uv)| g_score[j] * c * (1.0 - uv * uv)).collect();
            attn_grads.w.add_outer(&delta_u, &trace.docs[j].repr);
            linalg::add_assign_vec(&mut attn_grads.b, &delta_u);
            // Second path into the representation.
            let back = attn.w.matvec_t(&delta_u);
            linalg::add_assign_vec(&mut g_repr[j], &back);
            delta_u.clear();
        }
    }

    // Encoder layers, document by document.
    for ((t, g_r), doc) in trace.docs.iter().zip(&g_repr).zip(&enc.documents) {
        let delta2: Vec<f64> =
            g_r.iter().zip(&t.repr).map(|(g, d)| g * (1.0 - d * d)).collect();
        grads.enc2_w.add_outer(&delta2, &t.hidden);
        linalg::add_assign_vec(&mut grads.enc2_b, &delta2);

        let g_hidden = params.enc2_w.matvec_t(&delta2);
        let delta1: Vec<f64> =
            g_hidden.iter().zip(&t.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
        grads.enc1_w.add_outer(&delta1, &t.embedding);
        linalg::add_assign_vec(&mut grads.enc1_b, &delta1);

        // Sparse embedding gradient: value × upstream, one column per feature.
        let g_embed = params.enc1_w.matvec_t(&delta1);
        for &(FeatureId(f), v) in &doc.entries {
            let col = grads
                .embed_cols
                .entry(f)
                .or_insert_with(|| vec![0.0; params.dims.embed_dim]);
            linalg::axpy(col, v, &g_embed);
        }
    }

    Ok(grads)
}

/// Applies `params += scale · grads` in place. The trainer owns its own
/// momentum-based update; this direct form exists for descent tests and for
/// callers doing plain gradient steps.
pub fn apply_scaled(params: &mut ModelParams, grads: &Gradients, scale: f64) {
    for (col, vec) in &grads.embed_cols {
        for (e, g) in vec.iter().enumerate() {
            let cur = params.w_embed.get(e, *col as usize);
            params.w_embed.set(e, *col as usize, cur + scale * g);
        }
    }
    let add = |dst: &mut [f64], src: &[f64]| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    };
    add(params.enc1_w.as_mut_slice(), grads.enc1_w.as_slice());
    add(&mut params.enc1_b, &grads.enc1_b);
    add(params.enc2_w.as_mut_slice(), grads.enc2_w.as_slice());
    add(&mut params.enc2_b, &grads.enc2_b);
    if let (Some(attn), Some(g)) = (params.attention.as_mut(), grads.attention.as_ref()) {
        add(attn.w.as_mut_slice(), g.w.as_slice());
        add(&mut attn.b, &g.b);
        add(&mut attn.context, &g.context);
    }
    add(params.out_w.as_mut_slice(), grads.out_w.as_slice());
    add(&mut params.out_b, &grads.out_b);
}

fn loss_at(enc: &Encounter, y: Label, params: &ModelParams) -> Result<f64, AutodiffError> {
    Ok(nll_loss(&predict(enc, params)?, y))
}

/// Central-difference gradient oracle: probes every parameter coordinate
/// (embedding restricted to the encounter's touched columns) with ±eps.
pub fn finite_diff_grad(
    enc: &Encounter,
    y: Label,
    params: &ModelParams,
    eps: f64,
) -> Result<Gradients, AutodiffError> {
    assert!(eps > 0.0, "finite differences need a positive eps");
    let mut p = params.clone();
    let mut grads = Gradients::zeros_like(params);

    // Dense tensors, addressed through fn pointers so the borrow of `p` stays
    // local to each probe.
    type Slot = fn(&mut ModelParams) -> &mut [f64];
    let mut slots: Vec<(Slot, Slot2)> = Vec::new();
    type Slot2 = fn(&mut Gradients) -> &mut [f64];
    slots.push(((|p| p.enc1_w.as_mut_slice()) as Slot, (|g| g.enc1_w.as_mut_slice()) as Slot2));
    slots.push((|p| &mut p.enc1_b, |g| &mut g.enc1_b));
    slots.push((|p| p.enc2_w.as_mut_slice(), |g| g.enc2_w.as_mut_slice()));
    slots.push((|p| &mut p.enc2_b, |g| &mut g.enc2_b));
    if params.attention.is_some() {
        slots.push((
            |p| p.attention.as_mut().expect("gated on mode").w.as_mut_slice(),
            |g| g.attention.as_mut().expect("gated on mode").w.as_mut_slice(),
        ));
        slots.push((
            |p| &mut p.attention.as_mut().expect("gated on mode").b,
            |g| &mut g.attention.as_mut().expect("gated on mode").b,
        ));
        slots.push((
            |p| &mut p.attention.as_mut().expect("gated on mode").context,
            |g| &mut g.attention.as_mut().expect("gated on mode").context,
        ));
    }
    slots.push((|p| p.out_w.as_mut_slice(), |g| g.out_w.as_mut_slice()));
    slots.push((|p| &mut p.out_b, |g| &mut g.out_b));

    for (param_slot, grad_slot) in slots {
        let n = param_slot(&mut p).len();
        for i in 0..n {
            let orig = param_slot(&mut p)[i];
            param_slot(&mut p)[i] = orig + eps;
            let up = loss_at(enc, y, &p)?;
            param_slot(&mut p)[i] = orig - eps;
            let down = loss_at(enc, y, &p)?;
            param_slot(&mut p)[i] = orig;
            grad_slot(&mut grads)[i] = (up - down) / (2.0 * eps);
        }
    }

    for col in touched_columns(enc) {
        let mut g_col = vec![0.0; params.dims.embed_dim];
        for (e, g) in g_col.iter_mut().enumerate() {
            let orig = p.w_embed.get(e, col as usize);
            p.w_embed.set(e, col as usize, orig + eps);
            let up = loss_at(enc, y, &p)?;
            p.w_embed.set(e, col as usize, orig - eps);
            let down = loss_at(enc, y, &p)?;
            p.w_embed.set(e, col as usize, orig);
            *g = (up - down) / (2.0 * eps);
        }
        grads.embed_cols.insert(col, g_col);
    }
    Ok(grads)
}

/// One tensor's verdict in a gradient-check report.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub tensor: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub mode: Mode,
    pub n_trials: usize,
    pub eps: f64,
    pub tol: f64,
    pub rows: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tensor\tmax_rel_err\tpass\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{:.3e}\t{}\n", r.tensor, r.max_rel_err, r.pass));
        }
        out
    }
}

/// Relative error with the denominator floored at 1e-8 so exact zeros on both
/// sides compare as zero instead of 0/0.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Draws random small models and encounters and reports the worst
/// analytic-vs-numeric disagreement per tensor. `max_dims` caps the random
/// sizes and is itself clamped to the checking envelope (feature_dim ≤ 64,
/// widths ≤ 8, 1–4 documents) where full finite differences stay cheap.
pub fn grad_check(
    max_dims: Dims,
    mode: Mode,
    seed: u64,
    n_trials: usize,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    assert!(tol > 0.0, "grad_check needs a positive tolerance");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = Dims {
        feature_dim: max_dims.feature_dim.clamp(2, 64),
        embed_dim: max_dims.embed_dim.clamp(2, 8),
        enc1_dim: max_dims.enc1_dim.clamp(2, 8),
        enc2_dim: max_dims.enc2_dim.clamp(2, 8),
        attn_dim: max_dims.attn_dim.clamp(2, 8),
    };

    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let slot = worst.entry(name).or_insert(0.0);
        if err > *slot {
            *slot = err;
        }
    };

    for _ in 0..n_trials {
        let dims = Dims {
            feature_dim: rng.gen_range(2..=cap.feature_dim),
            embed_dim: rng.gen_range(2..=cap.embed_dim),
            enc1_dim: rng.gen_range(2..=cap.enc1_dim),
            enc2_dim: rng.gen_range(2..=cap.enc2_dim),
            attn_dim: rng.gen_range(2..=cap.attn_dim),
        };
        let params = init_params(dims, mode, rng.gen::<u64>());
        let m = rng.gen_range(1..=4);
        let documents: Vec<SparseDocVector> = (0..m)
            .map(|j| {
                let nnz = rng.gen_range(1..=dims.feature_dim.min(6));
                let mut feats = std::collections::BTreeSet::new();
                while feats.len() < nnz {
                    feats.insert(rng.gen_range(0..dims.feature_dim as u32));
                }
                SparseDocVector {
                    doc_id: format!("d{j}"),
                    entries: feats
                        .into_iter()
                        .map(|f| (FeatureId(f), 3.0 * rng.gen::<f64>() - 1.5))
                        .collect(),
                }
            })
            .collect();
        let enc = Encounter {
            encounter_id: "gradcheck".into(),
            documents,
            codes: Default::default(),
            doc_codes: None,
        };
        let y = Label::from_bool(rng.gen::<f64>() < 0.5);

        let trace = predict(&enc, &params).expect("gradcheck inputs are in range by construction");
        let analytic = backward(&enc, y, &params, &trace).expect("trace matches by construction");
        let numeric = finite_diff_grad(&enc, y, &params, eps).expect("same inputs");

        debug_assert_eq!(
            analytic.embed_cols.keys().collect::<Vec<_>>(),
            numeric.embed_cols.keys().collect::<Vec<_>>(),
            "both sides must probe the same embedding columns"
        );
        for (col, a_col) in &analytic.embed_cols {
            for (a, n) in a_col.iter().zip(&numeric.embed_cols[col]) {
                note("embedding", rel_err(*a, *n));
            }
        }
        let mut pairs: Vec<(&'static str, &[f64], &[f64])> = vec![
            ("encoder1.weight", analytic.enc1_w.as_slice(), numeric.enc1_w.as_slice()),
            ("encoder1.bias", &analytic.enc1_b, &numeric.enc1_b),
            ("encoder2.weight", analytic.enc2_w.as_slice(), numeric.enc2_w.as_slice()),
            ("encoder2.bias", &analytic.enc2_b, &numeric.enc2_b),
            ("output.weight", analytic.out_w.as_slice(), numeric.out_w.as_slice()),
            ("output.bias", &analytic.out_b, &numeric.out_b),
        ];
        if let (Some(a), Some(n)) = (&analytic.attention, &numeric.attention) {
            pairs.push(("attention.weight", a.w.as_slice(), n.w.as_slice()));
            pairs.push(("attention.bias", &a.b, &n.b));
            pairs.push(("attention.context", &a.context, &n.context));
        }
        for (name, a_slice, n_slice) in pairs {
            for (a, n) in a_slice.iter().zip(n_slice) {
                note(name, rel_err(*a, *n));
            }
        }
    }

    // Fixed presentation order: the data path first, then the heads.
    let order: &[&'static str] = match mode {
        Mode::Eldan => &[
            "embedding",
            "encoder1.weight",
            "encoder1.bias",
            "encoder2.weight",
            "encoder2.bias",
            "attention.weight",
            "attention.bias",
            "attention.context",
            "output.weight",
            "output.bias",
        ],
        Mode::Eldn => &[
            "embedding",
            "encoder1.weight",
            "encoder1.bias",
            "encoder2.weight",
            "encoder2.bias",
            "output.weight",
            "output.bias",
        ],
    };
    let rows = order
        .iter()
        .map(|name| {
            let err = worst.get(name).copied().unwrap_or(0.0);
            TensorCheck { tensor: name, max_rel_err: err, pass: err <= tol }
        })
        .collect();
    GradCheckReport { mode, n_trials, eps, tol, rows }
}
