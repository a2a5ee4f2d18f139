//! Numerical check that a noise-free response can be recovered by linearly
//! combining kernel responses, and then by a single fused kernel.
//!
//! An input window is `x = x_clean + beta * w_k + sum_j alpha_j * y_j`, where
//! the `y_j` form an orthonormal basis of the noise space and `x_clean` is
//! orthogonal to `w_k` and to every `y_j`. The responses `<x, w_k>` and
//! `<x, y_j>` satisfy `A (beta, alpha) = b` with `A` having ones on the
//! diagonal, `gamma_j = <w_k, y_j>` along its first row and column, and zeros
//! elsewhere, so `det A = gamma_perp^2`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Least-squares residual above which the noise basis is deemed outside
/// the kernel span.
pub const SUBSPACE_THRESHOLD: f64 = 1e-6;

/// Smallest orthogonal share of `w_k` accepted by [`make_noise_instance`].
pub const MIN_GAMMA_PERP: f64 = 0.1;

const ORTHO_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInstance {
    pub n: usize,
    pub shift: usize,
    /// Orthonormal noise basis `y_0..y_{d-1}`.
    pub basis: Vec<DVector<f64>>,
    /// Unit kernel whose noise-free response is sought.
    pub kernel: DVector<f64>,
    /// `gamma_j = <w_k, y_j>`.
    pub gamma: Vec<f64>,
    /// Norm of the part of `w_k` orthogonal to the noise space.
    pub gamma_perp: f64,
    pub clean: DVector<f64>,
    pub beta: f64,
    pub alpha: Vec<f64>,
    /// Full input; its circular shift by `shift` is the assembled window.
    pub input: DVector<f64>,
}

impl NoiseInstance {
    pub fn d(&self) -> usize {
        self.basis.len()
    }

    /// Assemble an instance from its parts, checking unit norms and
    /// orthogonality. `gamma_perp` may be arbitrarily small here.
    pub fn assemble(
        basis: Vec<DVector<f64>>,
        kernel: DVector<f64>,
        clean: DVector<f64>,
        beta: f64,
        alpha: Vec<f64>,
        shift: usize,
    ) -> Result<Self> {
        let n = kernel.len();
        if basis.is_empty() || alpha.len() != basis.len() || clean.len() != n {
            return Err(Error::invalid("basis, alpha and vector lengths disagree"));
        }
        for (i, y) in basis.iter().enumerate() {
            if y.len() != n || (y.norm() - 1.0).abs() > ORTHO_TOL {
                return Err(Error::invalid(format!("noise basis vector {i} is not unit length")));
            }
            for (j, z) in basis.iter().enumerate().skip(i + 1) {
                if y.dot(z).abs() > ORTHO_TOL {
                    return Err(Error::invalid(format!("noise basis vectors {i} and {j} are not orthogonal")));
                }
            }
            if clean.dot(y).abs() > ORTHO_TOL {
                return Err(Error::invalid(format!("clean component is not orthogonal to y_{i}")));
            }
        }
        if (kernel.norm() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid("kernel w_k is not unit length"));
        }
        if clean.dot(&kernel).abs() > ORTHO_TOL {
            return Err(Error::invalid("clean component is not orthogonal to w_k"));
        }
        let gamma: Vec<f64> = basis.iter().map(|y| kernel.dot(y)).collect();
        let mut perp = kernel.clone();
        for (y, g) in basis.iter().zip(&gamma) {
            perp.axpy(-g, y, 1.0);
        }
        let mut window = &clean + &kernel * beta;
        for (y, a) in basis.iter().zip(&alpha) {
            window.axpy(*a, y, 1.0);
        }
        let shift = shift % n;
        let input = DVector::from_fn(n, |m, _| window[(m + n - shift) % n]);
        Ok(Self {
            n,
            shift,
            basis,
            kernel,
            gamma,
            gamma_perp: perp.norm(),
            clean,
            beta,
            alpha,
            input,
        })
    }

    /// `x_(i)`: the input circularly shifted by `shift`.
    pub fn window(&self) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |m, _| self.input[(m + self.shift) % n])
    }

    /// Response of kernel `w` at the instance's shift.
    pub fn response(&self, w: &DVector<f64>) -> f64 {
        self.window().dot(w)
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Remove the components along the orthonormal `basis`, twice for accuracy.
fn project_out(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = v.dot(b);
            v.axpy(-c, b, 1.0);
        }
    }
}

/// Random orthonormal vector orthogonal to `basis`.
fn fresh_direction(n: usize, basis: &[DVector<f64>], rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let mut v = gaussian(n, rng);
        project_out(&mut v, basis);
        let norm = v.norm();
        if norm > 1e-3 {
            return v / norm;
        }
    }
}

pub fn make_noise_instance(n: usize, d: usize, seed: u64) -> Result<NoiseInstance> {
    make_noise_instance_shifted(n, d, 0, seed)
}

/// Random instance with an orthonormal noise basis of dimension `d` in
/// `R^n`, a unit kernel with `gamma_perp >= 0.1`, and `beta`, `alpha_j`
/// uniform in `[-2, 2]`.
pub fn make_noise_instance_shifted(n: usize, d: usize, shift: usize, seed: u64) -> Result<NoiseInstance> {
    if d == 0 || n < d + 2 {
        return Err(Error::invalid(format!(
            "n={n} cannot hold a {d}-dimensional noise space, a kernel and an orthogonal clean part (need 1 <= d <= n-2)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = Vec::with_capacity(d);
    for _ in 0..d {
        let y = fresh_direction(n, &basis, &mut rng);
        basis.push(y);
    }
    let kernel = loop {
        let w = gaussian(n, &mut rng);
        let w = &w / w.norm();
        let mut perp = w.clone();
        project_out(&mut perp, &basis);
        if perp.norm() >= MIN_GAMMA_PERP {
            break w;
        }
    };
    let mut span = basis.clone();
    let mut kperp = kernel.clone();
    project_out(&mut kperp, &span);
    span.push(&kperp / kperp.norm());
    let clean = fresh_direction(n, &span, &mut rng) * rng.random_range(0.5..2.0);
    let beta = rng.random_range(-2.0..=2.0);
    let alpha = (0..d).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let shift = if n > 0 { shift % n } else { 0 };
    NoiseInstance::assemble(basis, kernel, clean, beta, alpha, shift)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// `(beta_hat, alpha_hat_0, ..)`.
    pub solution: DVector<f64>,
    pub determinant: f64,
    /// First row of the inverse, `a_00 .. a_0d`.
    pub inverse_row: Vec<f64>,
}

impl SolveResult {
    pub fn beta_hat(&self) -> f64 {
        self.solution[0]
    }
}

/// Gram-style system over `{w_k} ∪ Y` and its solution from the observed
/// responses.
pub fn solve_white_response(inst: &NoiseInstance) -> Result<SolveResult> {
    let d = inst.d();
    let mut vectors = Vec::with_capacity(d + 1);
    vectors.push(&inst.kernel);
    vectors.extend(inst.basis.iter());
    let matrix = DMatrix::from_fn(d + 1, d + 1, |r, c| vectors[c].dot(vectors[r]));
    let window = inst.window();
    let rhs = DVector::from_fn(d + 1, |r, _| window.dot(vectors[r]));
    let determinant = matrix.determinant();
    let singular = || {
        Error::Singular(format!(
            "det(A) = {determinant:.3e}: w_k lies (numerically) inside the noise space, gamma_perp = {:.3e}",
            inst.gamma_perp
        ))
    };
    if determinant.abs() < 1e-12 {
        return Err(singular());
    }
    let lu = matrix.clone().lu();
    let solution = lu.solve(&rhs).ok_or_else(singular)?;
    let inverse = lu.try_inverse().ok_or_else(singular)?;
    Ok(SolveResult {
        inverse_row: inverse.row(0).iter().copied().collect(),
        matrix,
        rhs,
        solution,
        determinant,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// Index of `w_k` within the kernel set.
    pub k: usize,
    pub a00: f64,
    /// Coefficients `beta_t`, one per kernel of the set.
    pub coefficients: Vec<f64>,
    /// Norm of `sum_j a_0(j+1) y_j - sum_t beta_t w_t`.
    pub residual: f64,
    /// `(a_00 + beta_k) <w_k, x> + sum_{t != k} beta_t <w_t, x>`.
    pub white_response: f64,
    /// Number of inner products that evaluation needed.
    pub products: usize,
}

/// Express the noise-cancelling combination through the kernel set and
/// evaluate the white response as a sum of kernel responses.
pub fn reconstruct_eq6(inst: &NoiseInstance, kernels: &[DVector<f64>], k: usize) -> Result<Reconstruction> {
    if k >= kernels.len() {
        return Err(Error::invalid(format!("w_k index {k} outside a set of {}", kernels.len())));
    }
    if kernels.iter().any(|w| w.len() != inst.n) {
        return Err(Error::shape("kernel length differs from the instance dimension"));
    }
    if (&kernels[k] - &inst.kernel).norm() > ORTHO_TOL {
        return Err(Error::invalid("kernel set entry k is not the instance's w_k"));
    }
    let solved = solve_white_response(inst)?;
    let a = &solved.inverse_row;
    let mut target = DVector::zeros(inst.n);
    for (y, coef) in inst.basis.iter().zip(&a[1..]) {
        target.axpy(*coef, y, 1.0);
    }
    let m = DMatrix::from_columns(kernels);
    let svd = m.clone().svd(true, true);
    let coeffs = svd
        .solve(&target, 1e-12)
        .map_err(|e| Error::Singular(format!("least squares failed: {e}")))?;
    let residual = (&m * &coeffs - &target).norm();
    if residual > SUBSPACE_THRESHOLD {
        return Err(Error::Subspace {
            residual,
            threshold: SUBSPACE_THRESHOLD,
        });
    }
    let window = inst.window();
    let mut white = 0.0;
    let mut products = 0;
    for (t, w) in kernels.iter().enumerate() {
        let c = if t == k { a[0] + coeffs[t] } else { coeffs[t] };
        if c != 0.0 {
            white += c * w.dot(&window);
            products += 1;
        }
    }
    Ok(Reconstruction {
        k,
        a00: a[0],
        coefficients: coeffs.iter().copied().collect(),
        residual,
        white_response: white,
        products,
    })
}

/// The single kernel `(a_00 + beta_k) w_k + sum_{t != k} beta_t w_t`.
pub fn fused_kernel_eq7(kernels: &[DVector<f64>], rec: &Reconstruction) -> Result<DVector<f64>> {
    if kernels.len() != rec.coefficients.len() || kernels.is_empty() {
        return Err(Error::invalid("reconstruction does not match the kernel set"));
    }
    let mut fused = DVector::zeros(kernels[0].len());
    for (t, (w, &c)) in kernels.iter().zip(&rec.coefficients).enumerate() {
        let c = if t == rec.k { rec.a00 + c } else { c };
        fused.axpy(c, w, 1.0);
    }
    Ok(fused)
}

/// `{w_k}` followed by an invertible random recombination of the noise
/// basis and `extra` unrelated random kernels.
pub fn random_kernel_set(inst: &NoiseInstance, extra: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = inst.d();
    let mix = loop {
        let m: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        if m.determinant().abs() > 0.1 {
            break m;
        }
    };
    let mut set = vec![inst.kernel.clone()];
    for r in 0..d {
        let mut v = DVector::zeros(inst.n);
        for (c, y) in inst.basis.iter().enumerate() {
            v.axpy(mix[(r, c)], y, 1.0);
        }
        set.push(v);
    }
    for _ in 0..extra {
        set.push(gaussian(inst.n, &mut rng));
    }
    set
}

/// Maximum errors over a batch of seeded instances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleSummary {
    pub trials: usize,
    pub max_det_error: f64,
    pub max_beta_error: f64,
    pub max_alpha_error: f64,
    pub max_residual: f64,
    pub max_reconstruction_error: f64,
    pub max_fused_error: f64,
}

impl OracleSummary {
    pub fn passes(&self, tol: f64) -> bool {
        [
            self.max_det_error,
            self.max_beta_error,
            self.max_alpha_error,
            self.max_residual,
            self.max_reconstruction_error,
            self.max_fused_error,
        ]
        .iter()
        .all(|&e| e < tol)
    }
}

/// Run `trials` instances with `n <= 32`, `d <= 8` drawn from `seed`.
pub fn run_oracle(seed: u64, trials: usize) -> Result<OracleSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleSummary {
        trials,
        ..OracleSummary::default()
    };
    for _ in 0..trials {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(d + 2..=32);
        let shift = rng.random_range(0..n);
        let inst = make_noise_instance_shifted(n, d, shift, rng.random())?;
        let solved = solve_white_response(&inst)?;
        s.max_det_error = s.max_det_error.max((solved.determinant - inst.gamma_perp.powi(2)).abs());
        s.max_beta_error = s.max_beta_error.max((solved.beta_hat() - inst.beta).abs());
        for (a_hat, a) in solved.solution.iter().skip(1).zip(&inst.alpha) {
            s.max_alpha_error = s.max_alpha_error.max((a_hat - a).abs());
        }
        let extra = rng.random_range(0..=n - d - 1);
        let kernels = random_kernel_set(&inst, extra, rng.random());
        let rec = reconstruct_eq6(&inst, &kernels, 0)?;
        s.max_residual = s.max_residual.max(rec.residual);
        s.max_reconstruction_error = s
            .max_reconstruction_error
            .max((rec.white_response - inst.beta).abs());
        let fused = fused_kernel_eq7(&kernels, &rec)?;
        s.max_fused_error = s.max_fused_error.max((inst.response(&fused) - inst.beta).abs());
    }
    Ok(s)
}
