use nalgebra::{DMatrix, SymmetricEigen};

use crate::dsp::{mel_cosine, mel_spectrogram, DspConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const SYM_TOL: f64 = 1e-9;
const NEG_TOL: f64 = 1e-9;
pub const KL_FLOOR: f64 = 1e-12;

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::Contract(format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.rows(), t.cols(), t.data()))
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let data = (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect();
    Tensor::new(vec![r, c], data).expect("matrix shape")
}

/// Eigenvalues clamped at zero, after checking symmetry and that no
/// eigenvalue falls below `−NEG_TOL·max(1, ‖A‖∞)`.
fn psd_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Numeric(format!("matrix sqrt needs a square matrix, got {}x{}", n, a.ncols())));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > SYM_TOL * scale {
        return Err(Error::Numeric(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    let sym = (a + a.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -NEG_TOL * scale {
            return Err(Error::Numeric(format!("matrix is indefinite (eigenvalue {min:e})")));
        }
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(eig)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn matrix_sqrt_psd(a: &Tensor) -> Result<Tensor> {
    let m = to_matrix(a)?;
    let eig = psd_eigen(&m)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok(from_matrix(&s))
}

/// Row mean and unbiased covariance of `[n, d]` samples.
pub fn mean_and_covariance(x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::Contract(format!(
            "covariance needs at least two rows, got shape {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mean, Tensor::new(vec![d, d], cov)?))
}

/// Fréchet distance between Gaussians with the given moments, using
/// `Tr((Σ₁Σ₂)^{1/2}) = Tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn frechet_from_moments(mu1: &[f64], s1: &Tensor, mu2: &[f64], s2: &Tensor) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.shape() != [mu1.len(), mu1.len()] {
        return Err(Error::Contract("Fréchet moments have mismatched dimensions".into()));
    }
    let diff: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let a = to_matrix(s1)?;
    let b = to_matrix(s2)?;
    let root = to_matrix(&matrix_sqrt_psd(s1)?)?;
    let inner = &root * b.clone() * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    // eigenvalues indistinguishable from rounding noise contribute nothing
    let floor = top * f64::EPSILON * (mu1.len() as f64) * 16.0;
    let cross: f64 = eig.eigenvalues.iter().map(|&v| if v > floor { v.sqrt() } else { 0.0 }).sum();
    let fd = diff + a.trace() + b.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Fréchet distance between two `[n, d]` embedding sets.
pub fn frechet_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(Error::Contract(format!(
            "embedding sets must share a width, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (m1, s1) = mean_and_covariance(x)?;
    let (m2, s2) = mean_and_covariance(y)?;
    frechet_from_moments(&m1, &s1, &m2, &s2)
}

/// Mean over pairs of `Σ p·ln(p / max(q, 1e-12))`.
pub fn kl_pairs(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "KL needs equal, non-empty lists, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if pi.len() != qi.len() {
            return Err(Error::Contract("KL pair has mismatched lengths".into()));
        }
        total += pi
            .iter()
            .zip(qi)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| a * (a / b.max(KL_FLOOR)).ln())
            .sum::<f64>();
    }
    Ok(total / p.len() as f64)
}

/// Best mel cosine of `reference` against reference-length windows of
/// `generated` taken every `hop_s` seconds. Silent windows score 0.
pub fn mel_sim_max(generated: &[f64], reference: &[f64], cfg: &DspConfig, hop_s: f64) -> Result<f64> {
    if generated.len() < reference.len() {
        return Err(Error::Input(format!(
            "generated audio ({} samples) is shorter than the reference ({})",
            generated.len(),
            reference.len()
        )));
    }
    let hop = (hop_s * SAMPLE_RATE as f64).round() as usize;
    if hop == 0 {
        return Err(Error::Config(format!("mel-sim hop must be positive, got {hop_s} s")));
    }
    let ref_mel = mel_spectrogram(reference, cfg)?;
    if ref_mel.data.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedSimilarity("reference clip has zero energy".into()));
    }
    let mut best = 0.0f64;
    let mut start = 0;
    while start + reference.len() <= generated.len() {
        let w = mel_spectrogram(&generated[start..start + reference.len()], cfg)?;
        let sim = match mel_cosine(&w, &ref_mel) {
            Ok(s) => s,
            Err(Error::UndefinedSimilarity(_)) => 0.0,
            Err(e) => return Err(e),
        };
        best = best.max(sim);
        start += hop;
    }
    Ok(best)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn embedding_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("embedding widths {} and {} differ", a.len(), b.len())));
    }
    cosine(a, b)
}

/// Pairwise cosine similarity of the rows of `x` and `y`.
pub fn embedding_cosine_matrix(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(Error::Contract(format!(
            "embedding sets must share a width, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.rows() * y.rows());
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            out.push(cosine(x.row(i), y.row(j))?);
        }
    }
    Tensor::new(vec![x.rows(), y.rows()], out)
}

/// Softmax of an embedding, used as the probability vector for KL.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
