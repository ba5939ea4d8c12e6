//! Structured maps between Gram matrices and vectors.
//!
//! A dense layer acting on a symmetric `C x C` input can be written with
//! symmetric filters, and each filter diagonalizes into rank-one terms
//! `γ u uᵀ`. Keeping a shared bank of `D` projection vectors `u_i` gives the
//! low-rank Gram-to-vector map
//!
//! ```text
//! g2v(G) = W_out · [u_iᵀ G u_i]_{i=1..D}
//! ```
//!
//! and its generator-side counterpart
//!
//! ```text
//! v2g(v) = Σ_i c_i u_i u_iᵀ,   c = W_in · v
//! ```
//!
//! which is symmetric by construction. With `D = 8·C` this needs far fewer
//! parameters than a dense `C² -> d` layer. The dense layer is kept as the
//! `dense-fc` strategy for comparison.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{dims, Result};
use crate::feature::LayerSpec;
use crate::linalg::{sym_apply, symmetrize};
use crate::nn::{Init, ParamSet, ParamSpec};
use crate::registry::Registry;

/// Default number of projection vectors per input channel.
pub const DEFAULT_D_MULTIPLIER: usize = 8;

fn check_square(g: ArrayView2<f64>, c: usize) -> Result<()> {
    if g.dim() != (c, c) {
        return Err(dims(format!("gram is {:?}, expected {c}x{c}", g.dim())));
    }
    Ok(())
}

/// Rank-one responses `q_i = u_iᵀ G u_i` for every row `u_i` of `u`.
fn projections(g: ArrayView2<f64>, u: ArrayView2<f64>) -> Array1<f64> {
    (&u.dot(&g) * &u).sum_axis(Axis(1))
}

/// Gram2Vec: `v = W_out · [u_iᵀ G u_i]`. `u` is `(D, C)`, `w_out` is `(d, D)`.
pub fn g2v(g: ArrayView2<f64>, u: ArrayView2<f64>, w_out: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_square(g, u.ncols())?;
    if w_out.ncols() != u.nrows() {
        return Err(dims(format!(
            "W_out is {:?} but there are {} projections",
            w_out.dim(),
            u.nrows()
        )));
    }
    Ok(w_out.dot(&projections(g, u)))
}

#[derive(Debug, Clone)]
pub struct G2vGrads {
    pub d_gram: Array2<f64>,
    pub d_u: Array2<f64>,
    pub d_w_out: Array2<f64>,
}

pub fn g2v_backward(
    g: ArrayView2<f64>,
    u: ArrayView2<f64>,
    w_out: ArrayView2<f64>,
    dv: ArrayView1<f64>,
) -> G2vGrads {
    let q = projections(g, u);
    let dq = w_out.t().dot(&dv);
    let d_w_out = dv
        .insert_axis(Axis(1))
        .dot(&q.view().insert_axis(Axis(0)));
    let scaled = &u * &dq.view().insert_axis(Axis(1));
    let d_gram = u.t().dot(&scaled);
    let g_sym = &g + &g.t();
    let d_u = scaled.dot(&g_sym);
    G2vGrads {
        d_gram,
        d_u,
        d_w_out,
    }
}

/// Vec2Gram: `G = Σ_i c_i u_i u_iᵀ` with `c = W_in · v`. `w_in` is `(D, d)`,
/// `u` is `(D, C)`. The result is bit-exactly symmetric.
pub fn v2g(v: ArrayView1<f64>, w_in: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array2<f64>> {
    if w_in.ncols() != v.len() || w_in.nrows() != u.nrows() {
        return Err(dims(format!(
            "W_in {:?}, U {:?}, v of length {}",
            w_in.dim(),
            u.dim(),
            v.len()
        )));
    }
    let c = w_in.dot(&v);
    let scaled = &u * &c.view().insert_axis(Axis(1));
    Ok(symmetrize(&u.t().dot(&scaled)))
}

#[derive(Debug, Clone)]
pub struct V2gGrads {
    pub d_v: Array1<f64>,
    pub d_w_in: Array2<f64>,
    pub d_u: Array2<f64>,
}

pub fn v2g_backward(
    v: ArrayView1<f64>,
    w_in: ArrayView2<f64>,
    u: ArrayView2<f64>,
    d_gram: ArrayView2<f64>,
) -> V2gGrads {
    let c = w_in.dot(&v);
    let s = (&d_gram + &d_gram.t()) * 0.5;
    let us = u.dot(&s);
    let dc = (&us * &u).sum_axis(Axis(1));
    let d_u = us * &c.mapv(|x| 2.0 * x).view().insert_axis(Axis(1));
    let d_w_in = dc
        .view()
        .insert_axis(Axis(1))
        .dot(&v.insert_axis(Axis(0)));
    let d_v = w_in.t().dot(&dc);
    V2gGrads { d_v, d_w_in, d_u }
}

/// Encoder-side transform parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct G2VParams {
    pub layer_id: String,
    /// `(D, C)`: one projection vector per row.
    pub u: Array2<f64>,
    /// `(d, D)` mixing map.
    pub w_out: Array2<f64>,
}

/// Decoder-side transform parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct V2GParams {
    pub layer_id: String,
    /// `(D, d)` map producing the rank-one coefficients.
    pub w_in: Array2<f64>,
    /// `(D, C)`, independent of the encoder's projections.
    pub u: Array2<f64>,
}

impl G2VParams {
    pub fn init(layer_id: &str, channels: usize, dim: usize, multiplier: usize, rng: &mut impl Rng) -> Self {
        let specs = G2vTransform { multiplier }.encoder_specs("x", channels, dim);
        let p = ParamSet::init(&specs, rng);
        Self {
            layer_id: layer_id.into(),
            u: p.mat("g2v/x/U").to_owned(),
            w_out: p.mat("g2v/x/W_out").to_owned(),
        }
    }

    pub fn apply(&self, g: ArrayView2<f64>) -> Result<Array1<f64>> {
        g2v(g, self.u.view(), self.w_out.view())
    }
}

impl V2GParams {
    pub fn init(layer_id: &str, channels: usize, dim: usize, multiplier: usize, rng: &mut impl Rng) -> Self {
        let specs = G2vTransform { multiplier }.decoder_specs("x", channels, dim);
        let p = ParamSet::init(&specs, rng);
        Self {
            layer_id: layer_id.into(),
            w_in: p.mat("v2g/x/W_in").to_owned(),
            u: p.mat("v2g/x/U").to_owned(),
        }
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Result<Array2<f64>> {
        v2g(v, self.w_in.view(), self.u.view())
    }
}

/// Dense filters `W^(k) = Σ_j γ_j^(k) u_j^(k) u_j^(k)ᵀ`.
///
/// `eigvecs[k, :, j]` is `u_j^(k)`; `eigvals[k, j]` is `γ_j^(k)`. Returns the
/// `(d, C, C)` filter bank.
pub fn dense_fc_equivalent(eigvecs: ArrayView3<f64>, eigvals: ArrayView2<f64>) -> Result<Array3<f64>> {
    let (d, c, m) = eigvecs.dim();
    if eigvals.dim() != (d, m) {
        return Err(dims(format!(
            "eigenvalues {:?} for eigenvectors {:?}",
            eigvals.dim(),
            eigvecs.dim()
        )));
    }
    let mut w = Array3::zeros((d, c, c));
    for k in 0..d {
        let uk = eigvecs.index_axis(Axis(0), k);
        let scaled = &uk * &eigvals.row(k).insert_axis(Axis(0));
        w.index_axis_mut(Axis(0), k).assign(&scaled.dot(&uk.t()));
    }
    Ok(w)
}

/// `f_FC(G; W) = [⟨W^(k), G⟩]_k` for a `(d, C, C)` filter bank.
pub fn dense_fc_apply(w: ArrayView3<f64>, g: ArrayView2<f64>) -> Result<Array1<f64>> {
    let (d, c, _) = w.dim();
    check_square(g, c)?;
    Ok(Array1::from_shape_fn(d, |k| {
        (&w.index_axis(Axis(0), k) * &g).sum()
    }))
}

/// The same filters in factored form: all `D = C·d` eigenvectors stacked as
/// rows of `U`, and a block-diagonal `W_out` holding the eigenvalues, so that
/// `g2v(G, U, W_out)` equals [`dense_fc_apply`] on [`dense_fc_equivalent`].
pub fn factored_from_eigen(eigvecs: ArrayView3<f64>, eigvals: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (d, c, m) = eigvecs.dim();
    let mut u = Array2::zeros((d * m, c));
    let mut w_out = Array2::zeros((d, d * m));
    for k in 0..d {
        for j in 0..m {
            u.row_mut(k * m + j).assign(&eigvecs.slice(ndarray::s![k, .., j]));
            w_out[[k, k * m + j]] = eigvals[[k, j]];
        }
    }
    (u, w_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformVariant {
    G2v,
    DenseFc,
}

/// Transform parameters for one direction (encoder or decoder), summed over
/// the layers of `spec`: `D·C + D·d` per layer for `g2v` with `D = 8·C`, and
/// `C²·d` per layer for `dense-fc`.
pub fn count_transform_params(spec: &LayerSpec, dim: usize, variant: TransformVariant) -> usize {
    spec.layers
        .iter()
        .map(|l| {
            let c = l.channels;
            match variant {
                TransformVariant::G2v => {
                    let d_proj = DEFAULT_D_MULTIPLIER * c;
                    d_proj * c + d_proj * dim
                }
                TransformVariant::DenseFc => c * c * dim,
            }
        })
        .sum()
}

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues.
pub fn clip_to_psd(g: ArrayView2<f64>) -> Array2<f64> {
    sym_apply(g, |l| l.max(0.0))
}

/// A learnable map between one layer's Gram matrix and a vector, in both
/// directions. Parameters are read from a [`ParamSet`] by layer name.
pub trait GramTransform: Send + Sync {
    fn name(&self) -> &'static str;
    fn encoder_specs(&self, layer: &str, channels: usize, dim: usize) -> Vec<ParamSpec>;
    fn decoder_specs(&self, layer: &str, channels: usize, dim: usize) -> Vec<ParamSpec>;
    fn encode(&self, p: &ParamSet, layer: &str, g: ArrayView2<f64>) -> Result<Array1<f64>>;
    /// Accumulates parameter gradients; returns `dL/dG`.
    fn encode_backward(
        &self,
        p: &ParamSet,
        grads: &mut ParamSet,
        layer: &str,
        g: ArrayView2<f64>,
        dv: ArrayView1<f64>,
    ) -> Array2<f64>;
    fn decode(&self, p: &ParamSet, layer: &str, v: ArrayView1<f64>) -> Result<Array2<f64>>;
    /// Accumulates parameter gradients; returns `dL/dv`.
    fn decode_backward(
        &self,
        p: &ParamSet,
        grads: &mut ParamSet,
        layer: &str,
        v: ArrayView1<f64>,
        d_gram: ArrayView2<f64>,
    ) -> Array1<f64>;
}

/// Low-rank Gram2Vec / Vec2Gram with `D = multiplier · C` projections.
#[derive(Debug, Clone, Copy)]
pub struct G2vTransform {
    pub multiplier: usize,
}

impl GramTransform for G2vTransform {
    fn name(&self) -> &'static str {
        "g2v"
    }

    fn encoder_specs(&self, layer: &str, c: usize, d: usize) -> Vec<ParamSpec> {
        let n = self.multiplier * c;
        vec![
            ParamSpec::new(format!("g2v/{layer}/U"), &[n, c], Init::Normal { std: (1.0 / c.max(1) as f64).sqrt() }),
            ParamSpec::new(format!("g2v/{layer}/W_out"), &[d, n], Init::Normal { std: (1.0 / n.max(1) as f64).sqrt() }),
        ]
    }

    fn decoder_specs(&self, layer: &str, c: usize, d: usize) -> Vec<ParamSpec> {
        let n = self.multiplier * c;
        vec![
            ParamSpec::new(format!("v2g/{layer}/W_in"), &[n, d], Init::Normal { std: (1.0 / n.max(1) as f64).sqrt() }),
            ParamSpec::new(format!("v2g/{layer}/U"), &[n, c], Init::Normal { std: (1.0 / c.max(1) as f64).sqrt() }),
        ]
    }

    fn encode(&self, p: &ParamSet, layer: &str, g: ArrayView2<f64>) -> Result<Array1<f64>> {
        g2v(g, p.mat(&format!("g2v/{layer}/U")), p.mat(&format!("g2v/{layer}/W_out")))
    }

    fn encode_backward(
        &self,
        p: &ParamSet,
        grads: &mut ParamSet,
        layer: &str,
        g: ArrayView2<f64>,
        dv: ArrayView1<f64>,
    ) -> Array2<f64> {
        let (un, wn) = (format!("g2v/{layer}/U"), format!("g2v/{layer}/W_out"));
        let out = g2v_backward(g, p.mat(&un), p.mat(&wn), dv);
        grads.accumulate(&un, &out.d_u);
        grads.accumulate(&wn, &out.d_w_out);
        out.d_gram
    }

    fn decode(&self, p: &ParamSet, layer: &str, v: ArrayView1<f64>) -> Result<Array2<f64>> {
        v2g(v, p.mat(&format!("v2g/{layer}/W_in")), p.mat(&format!("v2g/{layer}/U")))
    }

    fn decode_backward(
        &self,
        p: &ParamSet,
        grads: &mut ParamSet,
        layer: &str,
        v: ArrayView1<f64>,
        d_gram: ArrayView2<f64>,
    ) -> Array1<f64> {
        let (wn, un) = (format!("v2g/{layer}/W_in"), format!("v2g/{layer}/U"));
        let out = v2g_backward(v, p.mat(&wn), p.mat(&un), d_gram);
        grads.accumulate(&wn, &out.d_w_in);
        grads.accumulate(&un, &out.d_u);
        out.d_v
    }
}

/// Unstructured dense layers `C² -> d` and `d -> C²` (the output is
/// symmetrized).
#[derive(Debug, Clone, Copy)]
pub struct DenseFcTransform;

impl GramTransform for DenseFcTransform {
    fn name(&self) -> &'static str {
        "dense-fc"
    }

    fn encoder_specs(&self, layer: &str, c: usize, d: usize) -> Vec<ParamSpec> {
        vec![ParamSpec::new(
            format!("fc_enc/{layer}/W"),
            &[d, c * c],
            Init::Normal { std: 1.0 / c.max(1) as f64 },
        )]
    }

    fn decoder_specs(&self, layer: &str, c: usize, d: usize) -> Vec<ParamSpec> {
        vec![ParamSpec::new(
            format!("fc_dec/{layer}/W"),
            &[c * c, d],
            Init::Normal { std: (1.0 / d.max(1) as f64).sqrt() },
        )]
    }

    fn encode(&self, p: &ParamSet, layer: &str, g: ArrayView2<f64>) -> Result<Array1<f64>> {
        let w = p.mat(&format!("fc_enc/{layer}/W"));
        let c = g.nrows();
        if g.ncols() != c || w.ncols() != c * c {
            return Err(dims(format!("gram {:?} for dense filter {:?}", g.dim(), w.dim())));
        }
        let flat = g.as_standard_layout().into_owned().into_shape_with_order(c * c).expect("flat");
        Ok(w.dot(&flat))
    }

    fn encode_backward(
        &self,
        p: &ParamSet,
        grads: &mut ParamSet,
        layer: &str,
        g: ArrayView2<f64>,
        dv: ArrayView1<f64>,
    ) -> Array2<f64> {
        let name = format!("fc_enc/{layer}/W");
        let w = p.mat(&name);
        let c = g.nrows();
        let flat = g.as_standard_layout().into_owned().into_shape_with_order(c * c).expect("flat");
        grads.accumulate(&name, &dv.insert_axis(Axis(1)).dot(&flat.view().insert_axis(Axis(0))));
        w.t().dot(&dv).into_shape_with_order((c, c)).expect("square")
    }

    fn decode(&self, p: &ParamSet, layer: &str, v: ArrayView1<f64>) -> Result<Array2<f64>> {
        let w = p.mat(&format!("fc_dec/{layer}/W"));
        if w.ncols() != v.len() {
            return Err(dims(format!("dense filter {:?} for vector of {}", w.dim(), v.len())));
        }
        let c = (w.nrows() as f64).sqrt().round() as usize;
        let g = w.dot(&v).into_shape_with_order((c, c)).expect("square");
        Ok(symmetrize(&g))
    }

    fn decode_backward(
        &self,
        p: &ParamSet,
        grads: &mut ParamSet,
        layer: &str,
        v: ArrayView1<f64>,
        d_gram: ArrayView2<f64>,
    ) -> Array1<f64> {
        let name = format!("fc_dec/{layer}/W");
        let w = p.mat(&name);
        let c = d_gram.nrows();
        let s = ((&d_gram + &d_gram.t()) * 0.5)
            .into_shape_with_order(c * c)
            .expect("flat");
        grads.accumulate(&name, &s.view().insert_axis(Axis(1)).dot(&v.insert_axis(Axis(0))));
        w.t().dot(&s)
    }
}

pub type TransformFactory = dyn Fn(usize) -> Box<dyn GramTransform> + Send + Sync;

/// Transform strategies by name; the factory receives the `D / C` multiplier.
pub fn transform_registry() -> Registry<TransformFactory> {
    let mut reg: Registry<TransformFactory> = Registry::new("gram transform");
    reg.register(
        "g2v",
        Box::new(|multiplier| Box::new(G2vTransform { multiplier }) as Box<dyn GramTransform>),
    );
    reg.register(
        "dense-fc",
        Box::new(|_| Box::new(DenseFcTransform) as Box<dyn GramTransform>),
    );
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    fn rand_sym(c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let a = randn((c, c), rng);
        symmetrize(&(&a + &a.t()))
    }

    #[test]
    fn zero_gram_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = G2VParams::init("l", 3, 4, 8, &mut rng);
        assert_eq!(p.apply(Array2::zeros((3, 3)).view()).unwrap(), Array1::<f64>::zeros(4));
        let q = V2GParams::init("l", 3, 4, 8, &mut rng);
        assert_eq!(q.apply(Array1::zeros(4).view()).unwrap(), Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn scalar_case() {
        let v = g2v(array![[5.0]].view(), array![[1.0]].view(), array![[1.0]].view()).unwrap();
        assert_eq!(v, array![5.0]);
    }

    #[test]
    fn single_rank_one_term() {
        // W_in = [[1]] and v = [1] force c = 1; u = e1.
        let g = v2g(array![1.0].view(), array![[1.0]].view(), array![[1.0, 0.0, 0.0]].view()).unwrap();
        let mut e = Array2::zeros((3, 3));
        e[[0, 0]] = 1.0;
        assert_eq!(g, e);
    }

    #[test]
    fn g2v_matches_outer_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, n, d) = (4, 3, 2);
        let g = rand_sym(c, &mut rng);
        let u = randn((n, c), &mut rng);
        let w = randn((d, n), &mut rng);
        // Oracle: materialize u_i u_iᵀ and take the Frobenius inner product.
        let mut q = Array1::zeros(n);
        for i in 0..n {
            let ui = u.row(i);
            let outer = Array2::from_shape_fn((c, c), |(a, b)| ui[a] * ui[b]);
            q[i] = (&outer * &g).sum();
        }
        let expect = w.dot(&q);
        let got = g2v(g.view(), u.view(), w.view()).unwrap();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn v2g_matches_explicit_sum_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, n, d) = (5, 7, 3);
        let v = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
        let w = randn((n, d), &mut rng);
        let u = randn((n, c), &mut rng);
        let coef = w.dot(&v);
        let mut expect = Array2::<f64>::zeros((c, c));
        for i in 0..n {
            for a in 0..c {
                for b in 0..c {
                    expect[[a, b]] += coef[i] * u[[i, a]] * u[[i, b]];
                }
            }
        }
        let got = v2g(v.view(), w.view(), u.view()).unwrap();
        assert_eq!(got, got.t());
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let u = Array2::<f64>::zeros((4, 3));
        let w = Array2::<f64>::zeros((2, 4));
        assert!(g2v(Array2::zeros((2, 2)).view(), u.view(), w.view()).is_err());
        assert!(g2v(Array2::zeros((3, 3)).view(), u.view(), Array2::zeros((2, 5)).view()).is_err());
        assert!(v2g(Array1::zeros(3).view(), Array2::zeros((4, 2)).view(), u.view()).is_err());
    }

    #[test]
    fn dense_equivalent_special_cases() {
        let eigvecs = Array3::from_shape_fn((1, 2, 1), |(_, i, _)| if i == 0 { 1.0 } else { 0.0 });
        let eigvals = array![[1.0]];
        let w = dense_fc_equivalent(eigvecs.view(), eigvals.view()).unwrap();
        assert_eq!(w.index_axis(Axis(0), 0), array![[1.0, 0.0], [0.0, 0.0]]);
        let g = array![[3.0, 1.0], [1.0, 2.0]];
        assert_eq!(dense_fc_apply(w.view(), g.view()).unwrap(), array![3.0]);

        let w0 = dense_fc_equivalent(eigvecs.view(), array![[0.0]].view()).unwrap();
        assert_eq!(dense_fc_apply(w0.view(), g.view()).unwrap(), array![0.0]);
    }

    #[test]
    fn counts() {
        let one = |c| LayerSpec::from_widths("x", &[c]);
        assert_eq!(count_transform_params(&one(512), 512, TransformVariant::G2v), 4_194_304);
        assert_eq!(count_transform_params(&one(512), 512, TransformVariant::DenseFc), 134_217_728);
        assert_eq!(count_transform_params(&one(0), 512, TransformVariant::G2v), 0);
        assert_eq!(count_transform_params(&one(0), 512, TransformVariant::DenseFc), 0);
    }

    #[test]
    fn psd_clip_removes_negative_directions() {
        let g = array![[1.0, 0.0], [0.0, -2.0]];
        let p = clip_to_psd(g.view());
        assert!((p[[0, 0]] - 1.0).abs() < 1e-12 && p[[1, 1]].abs() < 1e-12);
    }

    #[test]
    fn registry_names() {
        let reg = transform_registry();
        assert_eq!(reg.get("g2v").unwrap()(8).name(), "g2v");
        assert_eq!(reg.get("dense-fc").unwrap()(8).name(), "dense-fc");
        assert!(reg.get("pca").is_err());
    }
}
