//! Dense f32 kernels and the seeded generator every other module builds on.
//!
//! Everything here is a pure function of its inputs. Reductions use a fixed
//! 8-lane accumulation order so results are reproducible bit-for-bit on any
//! IEEE-754 target (no fused multiply-add is ever emitted by rustc implicitly).

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Fill with `N(0, std^2)`-distributed values drawn from `rng` in row-major order.
    pub fn random(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        Self {
            rows,
            cols,
            data: rng.normal_vec(rows * cols, std),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out)?;
        Ok(out)
    }

    pub fn matvec_into(&self, x: &[f32], out: &mut [f32]) -> Result<()> {
        if x.len() != self.cols || out.len() != self.rows {
            return Err(Error::shape(format!(
                "matvec {}x{} with input {} into output {}",
                self.rows,
                self.cols,
                x.len(),
                out.len()
            )));
        }
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, x);
        }
        if self.cols == 0 {
            out.fill(0.0);
        }
        Ok(())
    }
}

/// Inner product with a fixed 8-lane summation order.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out += alpha * x`
pub fn axpy(alpha: f32, x: &[f32], out: &mut [f32]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn add(a: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("add {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

/// Numerically stabilized softmax (max-subtraction).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Indices and values of the `k` largest entries, ordered by descending value.
/// Ties go to the lower index.
pub fn top_k(v: &[f32], k: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    if k == 0 || k > v.len() {
        return Err(Error::Config(format!(
            "top_k requires 1 <= k <= {}, got k={k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = Vec::with_capacity(k);
    // Partial insertion sort; k is small relative to the expert count.
    for (i, &x) in v.iter().enumerate() {
        if idx.len() == k && x <= v[idx[k - 1]] {
            continue;
        }
        let pos = idx.iter().position(|&j| x > v[j]).unwrap_or(idx.len());
        if idx.len() == k {
            idx.pop();
        }
        idx.insert(pos, i);
    }
    let vals = idx.iter().map(|&i| v[i]).collect();
    Ok((idx, vals))
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `v / sqrt(mean(v^2) + eps) * gamma`
pub fn rms_norm(v: &[f32], gamma: &[f32], eps: f32) -> Result<Vec<f32>> {
    if v.len() != gamma.len() {
        return Err(Error::shape(format!(
            "rms_norm input {} vs gain {}",
            v.len(),
            gamma.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::Empty("rms_norm input"));
    }
    let mean_sq = dot(v, v) / v.len() as f32;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    Ok(v.iter().zip(gamma).map(|(x, g)| x * inv * g).collect())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine {} vs {}", a.len(), b.len())));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` with `0 ln 0 = 0`, accumulated in f64.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("kl {} vs {}", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut kl = 0.0f64;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Distribution(format!(
                "support violation at {i}: q=0 where p={pi}"
            )));
        }
        kl += pi as f64 * (pi as f64 / qi as f64).ln();
    }
    Ok(kl.max(0.0))
}

fn check_distribution(p: &[f32], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Distribution(format!("{name} has negative or non-finite mass")));
    }
    let sum: f64 = p.iter().map(|&x| x as f64).sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Distribution(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// `W x (+ b)`.
pub fn linear(w: &Matrix, x: &[f32], b: Option<&[f32]>) -> Result<Vec<f32>> {
    let mut out = w.matvec(x)?;
    if let Some(b) = b {
        if b.len() != out.len() {
            return Err(Error::shape(format!("bias {} vs output {}", b.len(), out.len())));
        }
        for (o, bi) in out.iter_mut().zip(b) {
            *o += bi;
        }
    }
    Ok(out)
}

/// splitmix64 stream.
///
/// Normal deviates use the Irwin-Hall construction (sum of twelve uniforms
/// minus six), which needs only IEEE add/mul and therefore reproduces
/// bit-identically across platforms, unlike transcendental-based samplers.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let mut s = 0.0f64;
        for _ in 0..12 {
            s += self.next_f64();
        }
        s - 6.0
    }

    pub fn normal_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        let std = std as f64;
        (0..n).map(|_| (self.normal() * std) as f32).collect()
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for a named stage. Adding new labels never perturbs existing ones.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the root seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(seed ^ mix64(h))
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn softmax_f64(v: &[f64]) -> Vec<f64> {
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    fn sort_oracle(v: &[f32], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        // stable sort keeps lower index first among equal values
        idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
        idx.truncate(k);
        idx
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let p = softmax(&[2.0, 1.0, 0.0]).unwrap();
        let r = softmax_f64(&[2.0, 1.0, 0.0]);
        for (a, b) in p.iter().zip(&r) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn top_k_basic_and_ties() {
        assert_eq!(top_k(&[5.0, 1.0, 9.0], 1).unwrap(), (vec![2], vec![9.0]));
        assert_eq!(top_k(&[3.0, 3.0, 3.0], 2).unwrap(), (vec![0, 1], vec![3.0, 3.0]));
        assert!(top_k(&[1.0], 0).is_err());
        assert!(top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn top_k_random_128_matches_sort() {
        let mut rng = Rng::new(11);
        let v = rng.normal_vec(128, 1.0);
        let (idx, vals) = top_k(&v, 8).unwrap();
        assert_eq!(idx, sort_oracle(&v, 8));
        for (i, x) in idx.iter().zip(&vals) {
            assert_eq!(v[*i], *x);
        }
    }

    #[test]
    fn rms_norm_cases() {
        let out = rms_norm(&[1.0; 4], &[1.0; 4], 1e-12).unwrap();
        for x in out {
            assert!((x - 1.0).abs() < 1e-6);
        }
        assert_eq!(rms_norm(&[0.0; 3], &[2.0, -1.0, 5.0], 1e-6).unwrap(), vec![0.0; 3]);
        let out = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        let d = 12.5f64.sqrt();
        assert!((out[0] as f64 - 3.0 / d).abs() < 1e-6);
        assert!((out[1] as f64 - 4.0 / d).abs() < 1e-6);
        assert!(rms_norm(&[1.0, 2.0], &[1.0], 1e-6).is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(30.0) - 30.0).abs() < 1e-6);
        let oracle = 1.0f64 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0) as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-6);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c as f64 - 1.0 / 2f64.sqrt()).abs() < 1e-6);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn kl_cases() {
        let p = [0.1, 0.2, 0.7];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-7);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_random_16_matches_f64_oracle() {
        let mut rng = Rng::new(5);
        let a = softmax(&rng.normal_vec(16, 1.5)).unwrap();
        let b = softmax(&rng.normal_vec(16, 1.5)).unwrap();
        let oracle: f64 = a
            .iter()
            .zip(&b)
            .map(|(&p, &q)| p as f64 * (p as f64).ln() - p as f64 * (q as f64).ln())
            .sum();
        assert!((kl_divergence(&a, &b).unwrap() - oracle).abs() < 1e-5);
    }

    #[test]
    fn linear_cases() {
        let x = [1.0, -2.0, 3.0];
        assert_eq!(linear(&Matrix::identity(3), &x, None).unwrap(), x.to_vec());
        let b = [0.5, 0.25];
        assert_eq!(linear(&Matrix::zeros(2, 3), &x, Some(&b)).unwrap(), b.to_vec());
        assert!(linear(&Matrix::zeros(2, 2), &x, None).is_err());

        let mut rng = Rng::new(3);
        let w = Matrix::random(8, 4, 1.0, &mut rng);
        let x = rng.normal_vec(4, 1.0);
        let got = linear(&w, &x, None).unwrap();
        for i in 0..8 {
            let mut acc = 0.0f64;
            for j in 0..4 {
                acc += w.row(i)[j] as f64 * x[j] as f64;
            }
            assert!((got[i] as f64 - acc).abs() < 1e-5);
        }
    }

    #[test]
    fn seeded_streams_are_reproducible() {
        let a = Rng::new(42).normal_vec(1000, 0.05);
        let b = Rng::new(42).normal_vec(1000, 0.05);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(derive_seed(42, "weights"), derive_seed(42, "tokens"));
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(9);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e4f32..1e4, 1..64)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn top_k_matches_sort(v in prop::collection::vec(-4i32..4, 1..48), k_frac in 0.0f64..1.0) {
            // small integer range forces plenty of ties
            let v: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
            let k = 1 + ((v.len() - 1) as f64 * k_frac) as usize;
            let (idx, _) = top_k(&v, k).unwrap();
            prop_assert_eq!(idx, sort_oracle(&v, k));
        }

        #[test]
        fn kl_non_negative(a in prop::collection::vec(-3f32..3.0, 2..24), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let b = rng.normal_vec(a.len(), 2.0);
            let p = softmax(&a).unwrap();
            let q = softmax(&b).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            let max_diff = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            if max_diff >= 1e-7 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
