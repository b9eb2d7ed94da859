//! Transformer forward and manual backward passes in f64.
//!
//! Architecture: per-tile linear projection, learned class token prepended,
//! `n_layers` pre-norm blocks (multi-head self-attention, then a GELU MLP,
//! each with a residual connection and dropout) and a linear head on the
//! class-token output. No positional encoding, so logits are invariant under
//! tile permutation.
//!
//! Attention queries and keys are computed from the layer-normed stream, but
//! values are taken from the raw residual stream, and the head reads the raw
//! class token. A fully normalized readout is almost scale-invariant in each
//! tile input, which collapses gradient-times-input attribution; keeping the
//! value-to-head path free of layer norms leaves each tile's additive
//! contribution to the logits linear in its input, so the attribution
//! recovers that contribution.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StampError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim_input: usize,
    pub dim_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn new(dim_input: usize, n_classes: usize) -> Self {
        Self {
            dim_input,
            dim_model: 512,
            n_layers: 2,
            n_heads: 8,
            mlp_ratio: 2,
            dropout: 0.1,
            n_classes,
        }
    }

    fn validate(&self) {
        assert!(self.dim_model % self.n_heads == 0, "dim_model must divide by n_heads");
        assert!(self.n_classes >= 2);
        assert!(self.dim_input >= 1);
        assert!((0.0..1.0).contains(&self.dropout));
    }

    fn dim_mlp(&self) -> usize {
        self.dim_model * self.mlp_ratio
    }
}

/// Named parameter tensors packed into one flat vector; the flat form feeds
/// the optimizer, finite-difference checks and serialization.
#[derive(Debug, Clone)]
pub struct Layout {
    entries: Vec<(String, Vec<usize>)>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    fn of(cfg: &ModelConfig) -> Self {
        let (d, m, c) = (cfg.dim_model, cfg.dim_mlp(), cfg.n_classes);
        let mut entries: Vec<(String, Vec<usize>)> = vec![
            ("proj.w".into(), vec![cfg.dim_input, d]),
            ("proj.b".into(), vec![d]),
            ("cls".into(), vec![d]),
        ];
        for l in 0..cfg.n_layers {
            for (suffix, shape) in [
                ("ln1.g", vec![d]),
                ("ln1.b", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.g", vec![d]),
                ("ln2.b", vec![d]),
                ("mlp.w1", vec![d, m]),
                ("mlp.b1", vec![m]),
                ("mlp.w2", vec![m, d]),
                ("mlp.b2", vec![d]),
            ] {
                entries.push((format!("layer{l}.{suffix}"), shape));
            }
        }
        entries.push(("head.w".into(), vec![d, c]));
        entries.push(("head.b".into(), vec![c]));
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for (_, shape) in &entries {
            offsets.push(total);
            total += shape.iter().product::<usize>();
        }
        Self {
            entries,
            offsets,
            total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], usize)> {
        self.entries
            .iter()
            .zip(&self.offsets)
            .map(|((name, shape), &off)| (name.as_str(), shape.as_slice(), off))
    }

    fn span(&self, name: &str) -> (usize, &[usize]) {
        let i = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"));
        (self.offsets[i], &self.entries[i].1)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

fn mat<'a>(params: &'a [f64], layout: &Layout, name: &str) -> ArrayView2<'a, f64> {
    let (off, shape) = layout.span(name);
    assert_eq!(shape.len(), 2);
    ArrayView2::from_shape((shape[0], shape[1]), &params[off..off + shape[0] * shape[1]])
        .expect("layout shape")
}

fn vec1<'a>(params: &'a [f64], layout: &Layout, name: &str) -> ArrayView1<'a, f64> {
    let (off, shape) = layout.span(name);
    assert_eq!(shape.len(), 1);
    ArrayView1::from_shape(shape[0], &params[off..off + shape[0]]).expect("layout shape")
}

fn add_grad(grads: &mut [f64], layout: &Layout, name: &str, delta: &Array2<f64>) {
    let (off, shape) = layout.span(name);
    debug_assert_eq!(shape, delta.shape());
    for (g, d) in grads[off..].iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

fn add_grad1(grads: &mut [f64], layout: &Layout, name: &str, delta: &Array1<f64>) {
    let (off, shape) = layout.span(name);
    debug_assert_eq!(shape[0], delta.len());
    for (g, d) in grads[off..].iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

impl Model {
    /// Seeded initialization: uniform Xavier bounds for weight matrices,
    /// zeros for biases, ones for layer-norm gains, small normal class token.
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate();
        let layout = Layout::of(&cfg);
        let mut params = vec![0.0; layout.total()];
        for (name, shape, off) in layout.tensors() {
            let len: usize = shape.iter().product();
            let slot = &mut params[off..off + len];
            if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                for p in slot.iter_mut() {
                    *p = rng.gen_range(-bound..bound);
                }
            } else if name.ends_with(".g") {
                slot.fill(1.0);
            } else if name == "cls" {
                for p in slot.iter_mut() {
                    *p = 0.02 * (rng.gen::<f64>() * 2.0 - 1.0);
                }
            }
            // remaining vectors (biases) stay zero
        }
        Self {
            cfg,
            layout,
            params,
        }
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Self {
        cfg.validate();
        let layout = Layout::of(&cfg);
        assert_eq!(params.len(), layout.total());
        Self {
            cfg,
            layout,
            params,
        }
    }

    fn m(&self, name: &str) -> ArrayView2<'_, f64> {
        mat(&self.params, &self.layout, name)
    }

    fn v(&self, name: &str) -> ArrayView1<'_, f64> {
        vec1(&self.params, &self.layout, name)
    }

    /// Forward pass over one bag. `dropout_rng` enables training mode.
    pub fn forward(
        &self,
        bag: &Array2<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array1<f64>, Cache)> {
        if bag.ncols() != self.cfg.dim_input {
            return Err(StampError::DimensionMismatch {
                expected: self.cfg.dim_input,
                got: bag.ncols(),
            });
        }
        assert!(bag.nrows() >= 1, "bag must hold at least one tile");
        let d = self.cfg.dim_model;
        let n = bag.nrows() + 1;
        let mut cache = Cache::default();

        let projected = bag.dot(&self.m("proj.w")) + &self.v("proj.b");
        let mut h = Array2::zeros((n, d));
        h.row_mut(0).assign(&self.v("cls"));
        h.slice_mut(s![1.., ..]).assign(&projected);
        cache.input = bag.clone();

        for l in 0..self.cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let mut lc = LayerCache::default();
            lc.h_in = h.clone();
            let (y1, xhat1, istd1) = ln_forward(&h, &self.v(&p("ln1.g")), &self.v(&p("ln1.b")));
            lc.xhat1 = xhat1;
            lc.istd1 = istd1;

            let q = y1.dot(&self.m(&p("attn.wq"))) + &self.v(&p("attn.bq"));
            let k = y1.dot(&self.m(&p("attn.wk"))) + &self.v(&p("attn.bk"));
            let v = h.dot(&self.m(&p("attn.wv"))) + &self.v(&p("attn.bv"));
            let dh = d / self.cfg.n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut concat = Array2::zeros((n, d));
            for head in 0..self.cfg.n_heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let scores = qh.dot(&kh.t()) * scale;
                let probs = softmax_rows(&scores);
                concat.slice_mut(cols).assign(&probs.dot(&vh));
                lc.attn_probs.push(probs);
            }
            lc.y1 = y1;
            lc.q = q;
            lc.k = k;
            lc.v = v;
            lc.concat = concat.clone();
            let attn_out = concat.dot(&self.m(&p("attn.wo"))) + &self.v(&p("attn.bo"));
            let attn_out = self.apply_dropout(attn_out, &mut dropout_rng, &mut lc.drop1);
            let h2 = &h + &attn_out;

            let (y2, xhat2, istd2) = ln_forward(&h2, &self.v(&p("ln2.g")), &self.v(&p("ln2.b")));
            lc.xhat2 = xhat2;
            lc.istd2 = istd2;
            let u = y2.dot(&self.m(&p("mlp.w1"))) + &self.v(&p("mlp.b1"));
            let a = u.mapv(gelu);
            let z = a.dot(&self.m(&p("mlp.w2"))) + &self.v(&p("mlp.b2"));
            let z = self.apply_dropout(z, &mut dropout_rng, &mut lc.drop2);
            lc.y2 = y2;
            lc.u = u;
            lc.a = a;
            lc.h2 = h2.clone();
            h = h2 + z;
            cache.layers.push(lc);
        }

        let cls = h.row(0).to_owned();
        cache.h_final = h;
        let logits = cls.dot(&self.m("head.w")) + &self.v("head.b");
        cache.yf_cls = cls;
        Ok((logits, cache))
    }

    fn apply_dropout(
        &self,
        mut x: Array2<f64>,
        rng: &mut Option<&mut ChaCha8Rng>,
        mask_slot: &mut Option<Array2<f64>>,
    ) -> Array2<f64> {
        let p = self.cfg.dropout;
        if let Some(rng) = rng {
            if p > 0.0 {
                let keep = 1.0 - p;
                let mask = Array2::from_shape_simple_fn(x.dim(), || {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                x *= &mask;
                *mask_slot = Some(mask);
            }
        }
        x
    }

    /// Backward pass from `dlogits`. Returns (parameter gradients in layout
    /// order, gradient w.r.t. the input bag).
    pub fn backward(&self, cache: &Cache, dlogits: &Array1<f64>) -> (Vec<f64>, Array2<f64>) {
        let d = self.cfg.dim_model;
        let n = cache.h_final.nrows();
        let mut grads = vec![0.0; self.layout.total()];
        let lay = &self.layout;

        // head
        let dw_head = outer(&cache.yf_cls, dlogits);
        add_grad(&mut grads, lay, "head.w", &dw_head);
        add_grad1(&mut grads, lay, "head.b", dlogits);
        let dcls = self.m("head.w").dot(dlogits);
        let mut dh: Array2<f64> = Array2::zeros((n, d));
        dh.row_mut(0).assign(&dcls);

        for l in (0..self.cfg.n_layers).rev() {
            let p = |s: &str| format!("layer{l}.{s}");
            let lc = &cache.layers[l];

            // MLP block: h = h2 + drop(z)
            let dz = match &lc.drop2 {
                Some(mask) => &dh * mask,
                None => dh.clone(),
            };
            let dw2 = lc.a.t().dot(&dz);
            add_grad(&mut grads, lay, &p("mlp.w2"), &dw2);
            add_grad1(&mut grads, lay, &p("mlp.b2"), &dz.sum_axis(Axis(0)));
            let da = dz.dot(&self.m(&p("mlp.w2")).t());
            let du = &da * &lc.u.mapv(dgelu);
            let dw1 = lc.y2.t().dot(&du);
            add_grad(&mut grads, lay, &p("mlp.w1"), &dw1);
            add_grad1(&mut grads, lay, &p("mlp.b1"), &du.sum_axis(Axis(0)));
            let dy2 = du.dot(&self.m(&p("mlp.w1")).t());
            let (dh2_ln, dg2, db2) = ln_backward(&dy2, &lc.xhat2, &lc.istd2, &self.v(&p("ln2.g")));
            add_grad1(&mut grads, lay, &p("ln2.g"), &dg2);
            add_grad1(&mut grads, lay, &p("ln2.b"), &db2);
            let dh2 = &dh + &dh2_ln;

            // attention block: h2 = h_in + drop(attn_out)
            let dattn = match &lc.drop1 {
                Some(mask) => &dh2 * mask,
                None => dh2.clone(),
            };
            let dwo = lc.concat.t().dot(&dattn);
            add_grad(&mut grads, lay, &p("attn.wo"), &dwo);
            add_grad1(&mut grads, lay, &p("attn.bo"), &dattn.sum_axis(Axis(0)));
            let dconcat = dattn.dot(&self.m(&p("attn.wo")).t());

            let dh_heads = d / self.cfg.n_heads;
            let scale = 1.0 / (dh_heads as f64).sqrt();
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for head in 0..self.cfg.n_heads {
                let cols = s![.., head * dh_heads..(head + 1) * dh_heads];
                let probs = &lc.attn_probs[head];
                let do_h = dconcat.slice(cols);
                let vh = lc.v.slice(cols);
                let dprobs = do_h.dot(&vh.t());
                dv.slice_mut(cols)
                    .assign(&probs.t().dot(&do_h.to_owned()));
                // softmax rows backward
                let mut dscores = Array2::zeros((n, n));
                for i in 0..n {
                    let prow = probs.row(i);
                    let drow = dprobs.row(i);
                    let dot = prow.dot(&drow);
                    for j in 0..n {
                        dscores[[i, j]] = prow[j] * (drow[j] - dot);
                    }
                }
                dscores *= scale;
                let qh = lc.q.slice(cols);
                let kh = lc.k.slice(cols);
                dq.slice_mut(cols).assign(&dscores.dot(&kh.to_owned()));
                dk.slice_mut(cols).assign(&dscores.t().dot(&qh.to_owned()));
            }
            let mut dy1 = dq.dot(&self.m(&p("attn.wq")).t());
            dy1 += &dk.dot(&self.m(&p("attn.wk")).t());
            add_grad(&mut grads, lay, &p("attn.wq"), &lc.y1.t().dot(&dq));
            add_grad1(&mut grads, lay, &p("attn.bq"), &dq.sum_axis(Axis(0)));
            add_grad(&mut grads, lay, &p("attn.wk"), &lc.y1.t().dot(&dk));
            add_grad1(&mut grads, lay, &p("attn.bk"), &dk.sum_axis(Axis(0)));
            // values read the raw residual stream, so their gradient bypasses ln1
            add_grad(&mut grads, lay, &p("attn.wv"), &lc.h_in.t().dot(&dv));
            add_grad1(&mut grads, lay, &p("attn.bv"), &dv.sum_axis(Axis(0)));
            let (dh_ln, dg1, db1) = ln_backward(&dy1, &lc.xhat1, &lc.istd1, &self.v(&p("ln1.g")));
            add_grad1(&mut grads, lay, &p("ln1.g"), &dg1);
            add_grad1(&mut grads, lay, &p("ln1.b"), &db1);
            dh = dh2 + dh_ln + dv.dot(&self.m(&p("attn.wv")).t());
        }

        // unstack class token and projection
        add_grad1(&mut grads, lay, "cls", &dh.row(0).to_owned());
        let dproj = dh.slice(s![1.., ..]).to_owned();
        let dw_in = cache.input.t().dot(&dproj);
        add_grad(&mut grads, lay, "proj.w", &dw_in);
        add_grad1(&mut grads, lay, "proj.b", &dproj.sum_axis(Axis(0)));
        let dinput = dproj.dot(&self.m("proj.w").t());
        (grads, dinput)
    }
}

/// Forward intermediates needed by `backward`.
#[derive(Debug, Default, Clone)]
pub struct Cache {
    input: Array2<f64>,
    layers: Vec<LayerCache>,
    h_final: Array2<f64>,
    yf_cls: Array1<f64>,
}

#[derive(Debug, Default, Clone)]
struct LayerCache {
    h_in: Array2<f64>,
    xhat1: Array2<f64>,
    istd1: Array1<f64>,
    y1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn_probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    drop1: Option<Array2<f64>>,
    xhat2: Array2<f64>,
    istd2: Array1<f64>,
    y2: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
    h2: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

const LN_EPS: f64 = 1e-5;

fn ln_forward(
    x: &Array2<f64>,
    g: &ArrayView1<f64>,
    b: &ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("nonempty");
    let mut xhat = x.clone();
    for (mut row, &m) in xhat.rows_mut().into_iter().zip(&mean) {
        row -= m;
    }
    let istd = xhat
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / d + LN_EPS).sqrt())
        .collect::<Array1<f64>>();
    for (mut row, &s) in xhat.rows_mut().into_iter().zip(&istd) {
        row *= s;
    }
    let y = &xhat * g + b;
    (y, xhat, istd)
}

fn ln_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    istd: &Array1<f64>,
    g: &ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dg = (dy * xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = xhat.row(i);
        let sum_dxh = dxh.sum();
        let sum_dxh_xh = dxh.dot(&xh);
        for j in 0..dy.ncols() {
            dx[[i, j]] = istd[i] * (dxh[j] - sum_dxh / d - xh[j] * sum_dxh_xh / d);
        }
    }
    (dx, dg, db)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn dgelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x.powi(3));
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[[i, j]] = av * bv;
        }
    }
    out
}

/// Weighted cross-entropy of one bag; returns (loss numerator, weight,
/// dlogits of the numerator). The caller divides by the batch weight sum.
pub fn weighted_ce(logits: &Array1<f64>, label: usize, class_weights: &[f64]) -> (f64, f64, Array1<f64>) {
    let probs = softmax(logits);
    let w = class_weights[label];
    let loss = -probs[label].max(1e-300).ln() * w;
    let mut dlogits = probs;
    dlogits[label] -= 1.0;
    (loss, w, dlogits * w)
}

/// Maximum relative error between analytic and central finite-difference
/// gradients of the weighted cross-entropy at `model`'s parameters.
pub fn gradcheck(model: &Model, bag: &Array2<f64>, label: usize) -> f64 {
    let weights = vec![1.0; model.cfg.n_classes];
    let (logits, cache) = model.forward(bag, None).expect("dims fixed by caller");
    let (_, w, dlogits) = weighted_ce(&logits, label, &weights);
    let (grads, _) = model.backward(&cache, &(dlogits / w));

    let mut probe = model.clone();
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for i in 0..probe.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let (lp, _) = probe.forward(bag, None).unwrap();
        let plus = weighted_ce(&lp, label, &weights).0;
        probe.params[i] = orig - h;
        let (lm, _) = probe.forward(bag, None).unwrap();
        let minus = weighted_ce(&lm, label, &weights).0;
        probe.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[i];
        let rel = (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            dim_input: 6,
            dim_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
            n_classes: 2,
        }
    }

    fn random_bag(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn logits_have_one_entry_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = tiny_cfg();
        cfg.n_classes = 3;
        let model = Model::init(cfg, &mut rng);
        let bag = random_bag(5, 6, 2);
        let (logits, _) = model.forward(&bag, None).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tile_permutation_leaves_logits_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(tiny_cfg(), &mut rng);
        let bag = random_bag(7, 6, 4);
        let mut perm = bag.clone();
        // rotate rows by 3
        for i in 0..7 {
            perm.row_mut(i).assign(&bag.row((i + 3) % 7));
        }
        let (a, _) = model.forward(&bag, None).unwrap();
        let (b, _) = model.forward(&perm, None).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn wrong_input_dim_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::init(tiny_cfg(), &mut rng);
        let bag = random_bag(3, 5, 6);
        assert!(matches!(
            model.forward(&bag, None),
            Err(StampError::DimensionMismatch { expected: 6, got: 5 })
        ));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::init(tiny_cfg(), &mut rng);
        for seed in 0..20 {
            let bag = random_bag(4, 6, seed);
            let (logits, _) = model.forward(&bag, None).unwrap();
            let s = softmax(&logits).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = tiny_cfg();
        cfg.n_classes = 3;
        let mut model = Model::init(cfg, &mut rng);
        let (off, shape) = model.layout.span("head.w");
        let len: usize = shape.iter().product();
        model.params[off..off + len].fill(0.0);
        let (off, shape) = model.layout.span("head.b");
        model.params[off..off + shape[0]].fill(0.0);
        let bag = random_bag(4, 6, 10);
        let (logits, _) = model.forward(&bag, None).unwrap();
        let (loss, w, _) = weighted_ce(&logits, 1, &[1.0, 1.0, 1.0]);
        assert!((loss / w - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Model::init(tiny_cfg(), &mut rng);
        assert!(model.layout.total() <= 2000, "keep the probe model small");
        let bag = random_bag(4, 6, 12);
        let err = gradcheck(&model, &bag, 1);
        assert!(err < 1e-6, "max relative gradient error {err}");
    }

    #[test]
    fn off_label_head_gradients_are_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = Model::init(tiny_cfg(), &mut rng);
        let bag = random_bag(4, 6, 14);
        let (logits, cache) = model.forward(&bag, None).unwrap();
        let (_, _, dlogits) = weighted_ce(&logits, 0, &[1.0, 1.0]);
        let (grads, _) = model.backward(&cache, &dlogits);
        let (off, shape) = model.layout.span("head.w");
        // column 1 of head.w feeds only the non-target logit
        let mut any = false;
        for r in 0..shape[0] {
            if grads[off + r * shape[1] + 1].abs() > 1e-12 {
                any = true;
            }
        }
        assert!(any, "softmax couples the non-target class head");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = Model::init(tiny_cfg(), &mut rng);
        let mut bag = random_bag(3, 6, 16);
        let weights = [1.0, 1.0];
        let (logits, cache) = model.forward(&bag, None).unwrap();
        let (_, _, dlogits) = weighted_ce(&logits, 1, &weights);
        let (_, dinput) = model.backward(&cache, &dlogits);
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..6 {
                let orig = bag[[i, j]];
                bag[[i, j]] = orig + h;
                let (lp, _) = model.forward(&bag, None).unwrap();
                let plus = weighted_ce(&lp, 1, &weights).0;
                bag[[i, j]] = orig - h;
                let (lm, _) = model.forward(&bag, None).unwrap();
                let minus = weighted_ce(&lm, 1, &weights).0;
                bag[[i, j]] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = (dinput[[i, j]] - numeric).abs()
                    / 1.0f64.max(numeric.abs()).max(dinput[[i, j]].abs());
                assert!(rel < 1e-6, "input grad rel err {rel} at ({i},{j})");
            }
        }
    }

    #[test]
    fn dropout_training_mode_is_seeded_and_eval_mode_is_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.5;
        let model = Model::init(cfg, &mut rng);
        let bag = random_bag(4, 6, 18);
        let mut d1 = ChaCha8Rng::seed_from_u64(42);
        let mut d2 = ChaCha8Rng::seed_from_u64(42);
        let (a, _) = model.forward(&bag, Some(&mut d1)).unwrap();
        let (b, _) = model.forward(&bag, Some(&mut d2)).unwrap();
        assert_eq!(a, b);
        let (e1, _) = model.forward(&bag, None).unwrap();
        let (e2, _) = model.forward(&bag, None).unwrap();
        assert_eq!(e1, e2);
        assert_ne!(a, e1);
    }
}
