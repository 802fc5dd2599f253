//! Dense helpers, stable elementary functions, the flat parameter store and
//! the central-difference gradient checker.
//!
//! Everything here runs in `f64`. Gradients of every objective are derived by
//! hand and accumulated into a [`ParamStore`]; [`fd_check`] certifies them
//! against central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::domain(format!("non-finite matrix entry at {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::domain(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self · otherᵀ`: the grid of row-by-row inner products.
    pub fn dot_rows(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::domain(format!(
                "inner dimension mismatch: {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = W x (+ bias)` for a row-major `rows × cols` weight.
pub fn affine(w: &[f64], bias: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = dot(&w[r * cols..(r + 1) * cols], x);
        if let Some(b) = bias {
            acc += b[r];
        }
        *o = acc;
    }
}

/// `out += Wᵀ g` for a row-major weight with `g.len()` rows.
pub fn affine_transpose_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), g.len() * cols);
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * wv;
        }
    }
}

/// `dw += g xᵀ`.
pub fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(dw.len(), g.len() * cols);
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += gr * xv;
        }
    }
}

/// Normalises `e` to unit length, returning the pre-normalisation norm.
pub fn normalize(e: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = l2_norm(e);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::domain(format!("cannot normalise vector of norm {n}")));
    }
    Ok((e.iter().map(|x| x / n).collect(), n))
}

/// Backward pass of `v = e / ‖e‖`: maps `dL/dv` to `dL/de`.
pub fn normalize_backward(v: &[f64], norm: f64, dv: &[f64]) -> Vec<f64> {
    let proj = dot(v, dv);
    v.iter().zip(dv).map(|(vi, di)| (di - vi * proj) / norm).collect()
}

fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} requires a finite input, got {x}")))
    }
}

/// Logistic sigmoid that never overflows.
///
/// The lower tail saturates at `f64::MIN_POSITIVE` instead of underflowing to
/// zero; use [`log_sigmoid`] wherever the logarithm is needed.
pub fn stable_sigmoid(x: f64) -> Result<f64> {
    check_finite(x, "sigmoid")?;
    Ok(sigmoid(x))
}

/// `log σ(x) = min(x, 0) − ln(1 + e^{−|x|})`.
pub fn log_sigmoid(x: f64) -> Result<f64> {
    check_finite(x, "log-sigmoid")?;
    Ok(log_sigmoid_unchecked(x))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.max(f64::MIN_POSITIVE)
}

pub(crate) fn log_sigmoid_unchecked(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Shift-invariant softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    for &x in v {
        check_finite(x, "softmax")?;
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Backward pass of softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// Lower clamp applied to the target probability before the logarithm.
pub const CE_FLOOR: f64 = 1e-12;

/// `−log p[y]`, with `p[y]` clamped below at [`CE_FLOOR`].
pub fn cross_entropy(p: &[f64], y: usize) -> Result<f64> {
    let py = *p.get(y).ok_or_else(|| {
        Error::domain(format!(
            "class index {y} out of range for {} classes",
            p.len()
        ))
    })?;
    Ok(-py.max(CE_FLOOR).ln())
}

/// SplitMix64 finaliser used to derive independent per-item seeds.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named segment inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentId(usize);

/// Flat parameter vector split into named segments, with a gradient buffer of
/// identical shape.
///
/// Mutation is single-writer. Callers that compute per-item gradients in
/// parallel must add them into the buffer in item order so results stay
/// bitwise reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    segments: Vec<Segment>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<SegmentId> {
        if self.segments.iter().any(|s| s.name == name) {
            return Err(Error::domain(format!("duplicate segment name {name:?}")));
        }
        if values.len() != rows * cols {
            return Err(Error::domain(format!(
                "segment {name:?}: {} values for shape {rows}x{cols}",
                values.len()
            )));
        }
        let offset = self.values.len();
        self.values.extend_from_slice(&values);
        self.grads.resize(self.values.len(), 0.0);
        self.segments.push(Segment {
            name: name.to_owned(),
            rows,
            cols,
            offset,
        });
        Ok(SegmentId(self.segments.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<SegmentId> {
        self.segments
            .iter()
            .position(|s| s.name == name)
            .map(SegmentId)
            .ok_or_else(|| Error::domain(format!("no parameter segment named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.segments.iter().any(|s| s.name == name)
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn value(&self, id: SegmentId) -> &[f64] {
        let s = &self.segments[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn value_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let s = &self.segments[id.0];
        &mut self.values[s.offset..s.offset + s.len()]
    }

    pub fn grad(&self, id: SegmentId) -> &[f64] {
        let s = &self.segments[id.0];
        &self.grads[s.offset..s.offset + s.len()]
    }

    pub fn grad_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let s = &self.segments[id.0];
        &mut self.grads[s.offset..s.offset + s.len()]
    }

    pub fn scalar(&self, id: SegmentId) -> f64 {
        self.value(id)[0]
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        l2_norm(&self.grads)
    }

    /// Maps a flat coordinate back to `(segment name, index within segment)`.
    pub fn locate(&self, flat: usize) -> Option<(&str, usize)> {
        self.segments
            .iter()
            .find(|s| flat >= s.offset && flat < s.offset + s.len())
            .map(|s| (s.name.as_str(), flat - s.offset))
    }

    /// Copies values of every segment present in `other` under the same name
    /// and shape.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for seg in &self.segments {
            if let Some(src) = other.segments.iter().find(|s| s.name == seg.name) {
                if src.rows == seg.rows && src.cols == seg.cols {
                    self.values[seg.offset..seg.offset + seg.len()]
                        .copy_from_slice(&other.values[src.offset..src.offset + src.len()]);
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// A differentiable scalar function of a [`ParamStore`].
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;

    /// Returns the loss and adds its gradient into the store's gradient buffer.
    fn loss_and_grad(&self, params: &mut ParamStore) -> Result<f64>;
}

/// Objective assembled from two closures; handy for tests and ad-hoc checks.
pub struct FnObjective<L, G> {
    loss: L,
    grad: G,
}

impl<L, G> FnObjective<L, G>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64], &mut [f64]),
{
    pub fn new(loss: L, grad: G) -> Self {
        FnObjective { loss, grad }
    }
}

impl<L, G> Objective for FnObjective<L, G>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64], &mut [f64]),
{
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        Ok((self.loss)(params.values()))
    }

    fn loss_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        let values = params.values().to_vec();
        (self.grad)(&values, params.grads_mut());
        Ok((self.loss)(&values))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    /// Check only this many coordinates, drawn without replacement.
    pub max_coords: Option<usize>,
    pub sample_seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-4,
            tol: 1e-4,
            max_coords: None,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub segment: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub step: f64,
    pub tol: f64,
    pub total_coords: usize,
    /// Seed of the coordinate sample when only a subset was checked.
    pub sample_seed: Option<u64>,
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
    /// Indices into `entries` whose relative error exceeds `tol`.
    pub flagged: Vec<usize>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// `|a − n| / max(1e−8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `objective` at `params` with central
/// differences `(f(θ+h) − f(θ−h)) / 2h`.
pub fn fd_check<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamStore,
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(opts.step > 0.0) {
        return Err(Error::domain(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let mut work = params.clone();
    work.zero_grads();
    let at_grad = objective.loss_and_grad(&mut work)?;
    let analytic = work.grads().to_vec();
    work.zero_grads();

    let first = objective.loss(&work)?;
    let second = objective.loss(&work)?;
    if first.to_bits() != second.to_bits() || first.to_bits() != at_grad.to_bits() {
        return Err(Error::Check(format!(
            "objective is not deterministic: evaluations gave {first:e}, {second:e} and {at_grad:e}"
        )));
    }

    let n = work.len();
    let (coords, sample_seed) = match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = rng_from(opts.sample_seed);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            (idx, Some(opts.sample_seed))
        }
        _ => ((0..n).collect(), None),
    };

    let mut entries = Vec::with_capacity(coords.len());
    for &c in &coords {
        let orig = work.values()[c];
        work.values_mut()[c] = orig + opts.step;
        let plus = objective.loss(&work)?;
        work.values_mut()[c] = orig - opts.step;
        let minus = objective.loss(&work)?;
        work.values_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let (segment, index) = work.locate(c).expect("coordinate inside store");
        entries.push(FdEntry {
            segment: segment.to_owned(),
            index,
            analytic: analytic[c],
            numeric,
            rel_error: relative_error(analytic[c], numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let flagged = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.rel_error > opts.tol)
        .map(|(i, _)| i)
        .collect();
    Ok(FdReport {
        step: opts.step,
        tol: opts.tol,
        total_coords: n,
        sample_seed,
        entries,
        max_rel_error,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cell::Cell;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(stable_sigmoid(0.0).unwrap(), 0.5);
        let s = stable_sigmoid(-800.0).unwrap();
        assert!(s > 0.0);
        assert!((log_sigmoid(-800.0).unwrap() + 800.0).abs() < 1e-9);
        for x in [0.3, 2.0, 17.5, 40.0, 999.0] {
            let sum = stable_sigmoid(x).unwrap() + stable_sigmoid(-x).unwrap();
            assert!((sum - 1.0).abs() < 1e-15, "x={x}");
        }
        assert!(stable_sigmoid(1e3).unwrap().is_finite());
        assert!(log_sigmoid(-1e3).unwrap().is_finite());
        assert!(stable_sigmoid(f64::NAN).is_err());
        assert!(log_sigmoid(f64::INFINITY).is_err());
    }

    #[test]
    fn log_sigmoid_identity() {
        let mut x = -30.0;
        while x <= 30.0 {
            let lhs = log_sigmoid_unchecked(x) + log_sigmoid_unchecked(-x);
            let rhs = (sigmoid(x) * sigmoid(-x)).ln();
            assert!((lhs - rhs).abs() < 1e-10, "x={x}: {lhs} vs {rhs}");
            x += 0.25;
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax(&[10.0, 0.0, 0.0]).unwrap();
        let b = softmax(&[110.0, 100.0, 100.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (x, y) in c.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        let u = [1.0 / 3.0; 3];
        for y in 0..3 {
            assert!((cross_entropy(&u, y).unwrap() - 3f64.ln()).abs() < 1e-12);
        }
        assert!((cross_entropy(&[0.5, 0.25, 0.25], 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[1.0, 0.0, 0.0], 1).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(cross_entropy(&u, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn softmax_on_simplex(v in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert("theta", n, 1, values).unwrap();
        s
    }

    #[test]
    fn fd_quadratic_is_exact() {
        let obj = FnObjective::new(|p: &[f64]| p[0] * p[0], |p: &[f64], g: &mut [f64]| g[0] += 2.0 * p[0]);
        let report = fd_check(&obj, &store_with(vec![3.0]), &FdOptions::default()).unwrap();
        let e = &report.entries[0];
        assert_eq!(e.analytic, 6.0);
        assert!((e.numeric - 6.0).abs() < 1e-8);
        assert!(report.passed());
    }

    #[test]
    fn fd_constant_loss() {
        let obj = FnObjective::new(|_: &[f64]| 4.2, |_: &[f64], _: &mut [f64]| {});
        let report = fd_check(&obj, &store_with(vec![1.0, -2.0, 0.5]), &FdOptions::default()).unwrap();
        for e in &report.entries {
            assert!(e.analytic.abs() < 1e-10 && e.numeric.abs() < 1e-10);
        }
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn fd_flags_wrong_gradient() {
        let obj = FnObjective::new(
            |p: &[f64]| p[0] * p[0] + p[1],
            |p: &[f64], g: &mut [f64]| {
                g[0] += 2.0 * p[0];
                g[1] += 2.0;
            },
        );
        let report = fd_check(&obj, &store_with(vec![1.0, 1.0]), &FdOptions::default()).unwrap();
        assert_eq!(report.flagged, vec![1]);
        assert!(!report.passed());
    }

    #[test]
    fn fd_detects_nondeterminism() {
        struct Drifting(Cell<f64>);
        impl Objective for Drifting {
            fn loss(&self, _: &ParamStore) -> Result<f64> {
                self.0.set(self.0.get() + 1.0);
                Ok(self.0.get())
            }
            fn loss_and_grad(&self, p: &mut ParamStore) -> Result<f64> {
                self.loss(p)
            }
        }
        let err = fd_check(&Drifting(Cell::new(0.0)), &store_with(vec![0.0]), &FdOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Check(_)));
    }

    #[test]
    fn fd_sampling_is_documented() {
        let obj = FnObjective::new(
            |p: &[f64]| p.iter().map(|x| x * x).sum(),
            |p: &[f64], g: &mut [f64]| g.iter_mut().zip(p).for_each(|(g, x)| *g += 2.0 * x),
        );
        let opts = FdOptions {
            max_coords: Some(4),
            sample_seed: 9,
            ..FdOptions::default()
        };
        let report = fd_check(&obj, &store_with((0..20).map(f64::from).collect()), &opts).unwrap();
        assert_eq!(report.entries.len(), 4);
        assert_eq!(report.sample_seed, Some(9));
        assert_eq!(report.total_coords, 20);
    }

    #[test]
    fn param_store_basics() {
        let mut s = ParamStore::new();
        let a = s.insert("a", 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = s.insert("b", 1, 1, vec![5.0]).unwrap();
        assert!(s.insert("a", 1, 1, vec![0.0]).is_err());
        assert!(s.insert("c", 1, 2, vec![0.0]).is_err());
        assert_eq!(s.value(a), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.scalar(b), 5.0);
        assert_eq!(s.grads().len(), s.values().len());
        assert_eq!(s.locate(4), Some(("b", 0)));
        assert_eq!(s.id("b").unwrap(), b);
        assert!(s.id("zzz").is_err());
    }

    #[test]
    fn matrix_checks() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::INFINITY]).is_err());
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let g = m.dot_rows(&m).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let e = vec![0.3, -1.2, 0.7];
        let w = [0.5, 0.1, -0.4];
        let f = |e: &[f64]| {
            let (v, _) = normalize(e).unwrap();
            dot(&v, &w)
        };
        let (v, n) = normalize(&e).unwrap();
        let de = normalize_backward(&v, n, &w);
        for k in 0..3 {
            let mut p = e.clone();
            p[k] += 1e-6;
            let mut m = e.clone();
            m[k] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - de[k]).abs() < 1e-8);
        }
    }
}
