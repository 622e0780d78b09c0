//! Synthetic sequence-to-sequence data: unit-norm token matrices and bounded,
//! noisy targets produced by a frozen teacher transformer.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{forward_single, init_model, ModelConfig, ModelState};
use crate::rng::{seeded, LabRng};

const NORM_FLOOR: f64 = 1e-12;

/// An `L x d` token matrix whose rows all have unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(DMatrix<f64>);

impl TokenMatrix {
    pub fn seq_len(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Wraps a matrix without renormalizing. Used by snapshot loading and by
    /// tests that need to build deliberately broken inputs.
    pub fn from_matrix_unchecked(m: DMatrix<f64>) -> Self {
        Self(m)
    }
}

/// Rescales every row to unit norm.
pub fn rms_normalize(mut x: DMatrix<f64>) -> Result<TokenMatrix> {
    for (row, mut r) in x.row_iter_mut().enumerate() {
        let norm = r.norm();
        if !(norm >= NORM_FLOOR) {
            return Err(Error::ZeroRow { row, norm });
        }
        r /= norm;
    }
    Ok(TokenMatrix(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    TruncatedGaussian,
    Uniform,
}

/// Zero-mean additive target noise with variance `xi^2`.
///
/// The truncated Gaussian is cut at `4 xi`; the uniform law lives on
/// `[-sqrt(3) xi, sqrt(3) xi]`. Both are symmetric, so the mean is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    pub xi: f64,
    pub kind: NoiseKind,
    pub bound: f64,
}

impl NoiseModel {
    pub fn truncated_gaussian(xi: f64) -> Self {
        Self { xi, kind: NoiseKind::TruncatedGaussian, bound: 4.0 * xi }
    }

    pub fn uniform(xi: f64) -> Self {
        Self { xi, kind: NoiseKind::Uniform, bound: 3f64.sqrt() * xi }
    }

    pub fn new(xi: f64, kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::TruncatedGaussian => Self::truncated_gaussian(xi),
            NoiseKind::Uniform => Self::uniform(xi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(Error::Config(format!("noise scale must be >= 0, got {}", self.xi)));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut LabRng) -> f64 {
        if self.xi == 0.0 {
            return 0.0;
        }
        match self.kind {
            NoiseKind::TruncatedGaussian => loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 4.0 {
                    return self.xi * z;
                }
            },
            NoiseKind::Uniform => rng.random_range(-self.bound..=self.bound),
        }
    }
}

/// The frozen teacher `F*`: a transformer of the same family with its own seed,
/// plus the clamp interval for targets.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TeacherSpec {
    pub architecture: ModelConfig,
    pub seed: u64,
    pub c_lower: f64,
    pub c_upper: f64,
}

impl TeacherSpec {
    pub fn new(architecture: ModelConfig, seed: u64) -> Self {
        Self { architecture, seed, c_lower: -10.0, c_upper: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if !(self.c_lower < self.c_upper) {
            return Err(Error::Config(format!(
                "teacher bounds must satisfy lower < upper, got [{}, {}]",
                self.c_lower, self.c_upper
            )));
        }
        Ok(())
    }

    pub fn instantiate(&self) -> ModelState {
        init_model(&self.architecture.clone().with_seed(self.seed))
    }
}

/// The dataset `{(X_i, Y_i)}` together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    inputs: Vec<TokenMatrix>,
    targets: Vec<DMatrix<f64>>,
    pub teacher: TeacherSpec,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl SampleSet {
    pub fn from_parts(
        inputs: Vec<TokenMatrix>,
        targets: Vec<DMatrix<f64>>,
        teacher: TeacherSpec,
        noise: NoiseModel,
        seed: u64,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::DimMismatch("a sample set needs at least one pair".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let (l, d) = (inputs[0].seq_len(), inputs[0].dim());
        for (x, y) in inputs.iter().zip(&targets) {
            if x.seq_len() != l || x.dim() != d || y.nrows() != l || y.ncols() != d {
                return Err(Error::DimMismatch(format!("every pair must be {l}x{d}")));
            }
        }
        Ok(Self { inputs, targets, teacher, noise, seed })
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs[0].seq_len()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].dim()
    }

    pub fn inputs(&self) -> &[TokenMatrix] {
        &self.inputs
    }

    pub fn targets(&self) -> &[DMatrix<f64>] {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &TokenMatrix {
        &self.inputs[i]
    }

    pub fn target(&self, i: usize) -> &DMatrix<f64> {
        &self.targets[i]
    }

    /// The flat `nL x d` target matrix.
    pub fn stacked_targets(&self) -> DMatrix<f64> {
        let (l, d) = (self.seq_len(), self.dim());
        let mut out = DMatrix::zeros(self.n() * l, d);
        for (i, y) in self.targets.iter().enumerate() {
            out.rows_mut(i * l, l).copy_from(y);
        }
        out
    }

    /// A new set holding the pairs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            teacher: self.teacher.clone(),
            noise: self.noise,
            seed: self.seed,
        }
    }

    /// The same inputs with replacement targets.
    pub fn with_targets(&self, targets: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::from_parts(self.inputs.clone(), targets, self.teacher.clone(), self.noise, self.seed)
    }
}

/// Draws `n` sequences, labels them with the teacher, adds noise, and clamps.
///
/// Sample `i` consumes the generator in a fixed order (its `L*d` token draws,
/// then its `L*d` noise draws), so the first `k` pairs of a size-`n` set equal
/// the size-`k` set drawn from the same seed.
pub fn generate_dataset(
    teacher: &TeacherSpec,
    noise: &NoiseModel,
    n: usize,
    l: usize,
    d: usize,
    seed: u64,
) -> Result<SampleSet> {
    teacher.validate()?;
    noise.validate()?;
    if n == 0 {
        return Err(Error::DimMismatch("dataset size must be >= 1".into()));
    }
    let arch = &teacher.architecture;
    if arch.seq_len != l || arch.dim != d {
        return Err(Error::DimMismatch(format!(
            "teacher expects {}x{} inputs, asked for {l}x{d}",
            arch.seq_len, arch.dim
        )));
    }
    let f_star = teacher.instantiate();
    let mut rng = seeded(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = DMatrix::from_fn(l, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        inputs.push(rms_normalize(raw)?);
        noises.push(DMatrix::from_fn(l, d, |_, _| noise.sample(&mut rng)));
    }
    let mut targets = Vec::with_capacity(n);
    for (x, xi) in inputs.iter().zip(noises) {
        let clean = forward_single(&f_star, x.as_matrix())?;
        let y = (clean + xi).map(|v| v.clamp(teacher.c_lower, teacher.c_upper));
        targets.push(y);
    }
    SampleSet::from_parts(inputs, targets, teacher.clone(), *noise, seed)
}

/// The flat `(i, l)` view over a sample set: `nL` entries in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct RearrangedView<'a> {
    ds: &'a SampleSet,
}

/// One rearranged entry: the visible prefix `X_{i, <= l}` and the target row.
#[derive(Debug)]
pub struct RearrangedEntry<'a> {
    pub sample: usize,
    pub position: usize,
    pub prefix: DMatrixView<'a, f64>,
    pub target: DMatrixView<'a, f64>,
}

pub fn rearrange(ds: &SampleSet) -> RearrangedView<'_> {
    RearrangedView { ds }
}

impl<'a> RearrangedView<'a> {
    pub fn len(&self) -> usize {
        self.ds.n() * self.ds.seq_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One-based flat index `p` to one-based `(i, l)`.
    pub fn locate(&self, p: usize) -> (usize, usize) {
        let l = self.ds.seq_len();
        assert!(p >= 1 && p <= self.len(), "flat index {p} out of range");
        (p.div_ceil(l), (p - 1) % l + 1)
    }

    /// Inverse of [`locate`](Self::locate).
    pub fn flat_index(&self, i: usize, pos: usize) -> usize {
        (i - 1) * self.ds.seq_len() + pos
    }

    pub fn entry(&self, p: usize) -> RearrangedEntry<'a> {
        let (i, pos) = self.locate(p);
        RearrangedEntry {
            sample: i,
            position: pos,
            prefix: self.ds.inputs[i - 1].0.rows(0, pos),
            target: self.ds.targets[i - 1].rows(pos - 1, 1),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = RearrangedEntry<'a>> + '_ {
        (1..=self.len()).map(move |p| self.entry(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn tiny_teacher(l: usize, d: usize) -> TeacherSpec {
        let cfg = ModelConfig::new(1, 16, d, l).with_omega(0.5).with_epsilon(1.0);
        TeacherSpec::new(cfg, 99)
    }

    #[test]
    fn normalize_scales_three_four_row() {
        let x = rms_normalize(DMatrix::from_row_slice(1, 2, &[3.0, 4.0])).unwrap();
        assert!((x.as_matrix()[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((x.as_matrix()[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_keeps_unit_rows() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(rms_normalize(x.clone()).unwrap().into_inner(), x);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(rms_normalize(x), Err(Error::ZeroRow { row: 1, .. })));
    }

    #[test]
    fn random_matrix_rows_are_unit() {
        let mut rng = seeded(3);
        let raw = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = rms_normalize(raw).unwrap();
        for r in x.as_matrix().row_iter() {
            assert!((r.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn noiseless_targets_equal_teacher() {
        let t = tiny_teacher(3, 2);
        let ds = generate_dataset(&t, &NoiseModel::truncated_gaussian(0.0), 4, 3, 2, 5).unwrap();
        let f = t.instantiate();
        for (x, y) in ds.inputs().iter().zip(ds.targets()) {
            assert_eq!(&forward_single(&f, x.as_matrix()).unwrap(), y);
        }
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let t = tiny_teacher(3, 2);
        let noise = NoiseModel::truncated_gaussian(0.1);
        let a = generate_dataset(&t, &noise, 6, 3, 2, 11).unwrap();
        let b = generate_dataset(&t, &noise, 6, 3, 2, 11).unwrap();
        assert_eq!(a, b);
        let small = generate_dataset(&t, &noise, 3, 3, 2, 11).unwrap();
        assert_eq!(small.targets(), &a.targets()[..3]);
    }

    #[test]
    fn noise_mean_within_standard_error() {
        let (l, d, n, xi) = (4, 3, 16, 0.1);
        let t = tiny_teacher(l, d);
        let ds = generate_dataset(&t, &NoiseModel::truncated_gaussian(xi), n, l, d, 21).unwrap();
        let f = t.instantiate();
        let mut sum = 0.0;
        for (x, y) in ds.inputs().iter().zip(ds.targets()) {
            sum += (y - forward_single(&f, x.as_matrix()).unwrap()).sum();
        }
        let count = (n * l * d) as f64;
        assert!((sum / count).abs() <= 3.0 * xi / count.sqrt());
    }

    #[test]
    fn noise_moments_and_support() {
        for noise in [NoiseModel::truncated_gaussian(0.3), NoiseModel::uniform(0.3)] {
            let mut rng = seeded(8);
            let count = 1_000_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let v = noise.sample(&mut rng);
                assert!(v.abs() <= noise.bound);
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / count as f64;
            let var = s2 / count as f64 - mean * mean;
            assert!(mean.abs() <= 4.0 * noise.xi / (count as f64).sqrt(), "{noise:?} mean {mean}");
            assert!((var / (noise.xi * noise.xi) - 1.0).abs() < 0.02, "{noise:?} var {var}");
        }
    }

    #[test]
    fn targets_respect_clamp() {
        let mut t = tiny_teacher(3, 2);
        t.c_lower = -0.2;
        t.c_upper = 0.2;
        let ds = generate_dataset(&t, &NoiseModel::truncated_gaussian(0.5), 5, 3, 2, 2).unwrap();
        assert!(ds.targets().iter().flat_map(|y| y.iter()).all(|v| (-0.2..=0.2).contains(v)));
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let t = tiny_teacher(3, 2);
        let err = generate_dataset(&t, &NoiseModel::truncated_gaussian(0.0), 2, 4, 2, 0);
        assert!(matches!(err, Err(Error::DimMismatch(_))));
    }

    #[test]
    fn rearranged_index_map() {
        let t = tiny_teacher(1, 2);
        let one = generate_dataset(&t, &NoiseModel::truncated_gaussian(0.0), 1, 1, 2, 0).unwrap();
        let v = rearrange(&one);
        assert_eq!(v.len(), 1);
        let e = v.entry(1);
        assert_eq!((e.sample, e.position, e.prefix.nrows()), (1, 1, 1));

        let t3 = tiny_teacher(3, 2);
        let ds = generate_dataset(&t3, &NoiseModel::truncated_gaussian(0.0), 2, 3, 2, 0).unwrap();
        assert_eq!(rearrange(&ds).locate(5), (2, 2));

        let t8 = tiny_teacher(8, 2);
        let ds = generate_dataset(&t8, &NoiseModel::truncated_gaussian(0.0), 4, 8, 2, 0).unwrap();
        assert_eq!(rearrange(&ds).len(), 32);
    }

    proptest! {
        #[test]
        fn flat_index_round_trips(n in 1usize..6, l in 1usize..6) {
            let t = tiny_teacher(l, 2);
            let ds = generate_dataset(&t, &NoiseModel::truncated_gaussian(0.0), n, l, 2, 1).unwrap();
            let v = rearrange(&ds);
            let mut seen = std::collections::HashSet::new();
            for p in 1..=v.len() {
                let (i, pos) = v.locate(p);
                prop_assert!(i >= 1 && i <= n && pos >= 1 && pos <= l);
                prop_assert_eq!(v.flat_index(i, pos), p);
                prop_assert!(seen.insert((i, pos)));
                let e = v.entry(p);
                prop_assert_eq!(e.target, ds.target(i - 1).rows(pos - 1, 1));
            }
            prop_assert_eq!(seen.len(), n * l);
        }

        #[test]
        fn generated_rows_are_unit(seed in 0u64..1000) {
            let t = tiny_teacher(3, 4);
            let ds = generate_dataset(&t, &NoiseModel::uniform(0.05), 3, 3, 4, seed).unwrap();
            for x in ds.inputs() {
                for r in x.as_matrix().row_iter() {
                    prop_assert!((r.norm() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
