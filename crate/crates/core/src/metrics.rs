//! Fréchet Speaker Distance between two sets of speaker embeddings.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{resample, Waveform};
use crate::error::{Error, Result};

/// Eigenvalues above `-PSD_TOLERANCE` count as numerically non-negative.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// A waveform together with the identity used in error messages.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub waveform: Waveform,
}

/// Maps a waveform to a fixed-width speaker embedding.
pub trait SpeakerEmbedder: Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, utterance: &Utterance) -> Result<Vec<f64>>;
}

/// Deterministic embedder from averaged log band energies and their spread
/// over short frames.
#[derive(Clone, Debug)]
pub struct SpectralEmbedder {
    pub sample_rate: u32,
    pub frame: usize,
    pub hop: usize,
    pub bands: usize,
}

impl Default for SpectralEmbedder {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame: 512,
            hop: 256,
            bands: 24,
        }
    }
}

impl SpectralEmbedder {
    /// Log-spaced band edges over FFT bins `1..frame/2`.
    fn band_edges(&self) -> Vec<usize> {
        let top = (self.frame / 2) as f64;
        let mut edges: Vec<usize> = (0..=self.bands)
            .map(|b| top.powf(b as f64 / self.bands as f64).round() as usize)
            .collect();
        for i in 1..edges.len() {
            edges[i] = edges[i].max(edges[i - 1] + 1);
        }
        edges
    }
}

impl SpeakerEmbedder for SpectralEmbedder {
    fn name(&self) -> String {
        format!(
            "spectral-{}hz-{}x{}",
            self.sample_rate, self.bands, self.frame
        )
    }

    fn dim(&self) -> usize {
        2 * self.bands
    }

    fn embed(&self, utterance: &Utterance) -> Result<Vec<f64>> {
        let x = resample(
            &utterance.waveform.samples,
            utterance.waveform.sample_rate,
            self.sample_rate,
        );
        if x.len() < self.frame {
            return Err(Error::Input(format!(
                "{}: {} samples is shorter than one {}-sample analysis frame",
                utterance.id,
                x.len(),
                self.frame
            )));
        }
        let fft = FftPlanner::<f64>::new().plan_fft_forward(self.frame);
        let window: Vec<f64> = (0..self.frame)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / self.frame as f64).cos())
            .collect();
        let edges = self.band_edges();
        let mut frames = Vec::new();
        let mut buf = vec![Complex::new(0.0, 0.0); self.frame];
        for start in (0..=x.len() - self.frame).step_by(self.hop) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            let power: Vec<f64> = buf[..self.frame / 2 + 1]
                .iter()
                .map(|c| c.norm_sqr())
                .collect();
            let energies: Vec<f64> = edges
                .windows(2)
                .map(|w| (power[w[0]..w[1].min(power.len())].iter().sum::<f64>() + 1e-10).ln())
                .collect();
            frames.push(energies);
        }
        let n = frames.len() as f64;
        let mut out = vec![0.0; 2 * self.bands];
        for b in 0..self.bands {
            let mean = frames.iter().map(|f| f[b]).sum::<f64>() / n;
            let var = frames.iter().map(|f| (f[b] - mean).powi(2)).sum::<f64>() / n;
            out[b] = mean;
            out[self.bands + b] = var.sqrt();
        }
        Ok(out)
    }
}

/// Embeddings computed elsewhere, read from JSON lines of
/// `{"audio_path": ..., "embedding": [...]}` and looked up by path.
#[derive(Clone, Debug)]
pub struct PrecomputedEmbedder {
    source: PathBuf,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct PrecomputedLine {
    audio_path: PathBuf,
    embedding: Vec<f64>,
}

impl PrecomputedEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: PrecomputedLine = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if *dim.get_or_insert(rec.embedding.len()) != rec.embedding.len() {
                return Err(Error::Input(format!(
                    "{}:{}: embedding width differs",
                    path.display(),
                    i + 1
                )));
            }
            let key = base.join(&rec.audio_path).display().to_string();
            table.insert(key, rec.embedding);
        }
        Ok(Self {
            source: path.to_path_buf(),
            dim: dim
                .ok_or_else(|| Error::Input(format!("{} holds no embeddings", path.display())))?,
            table,
        })
    }
}

impl SpeakerEmbedder for PrecomputedEmbedder {
    fn name(&self) -> String {
        format!("precomputed:{}", self.source.display())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, utterance: &Utterance) -> Result<Vec<f64>> {
        self.table
            .get(&utterance.id)
            .cloned()
            .ok_or_else(|| Error::Input(format!("{}: no precomputed embedding", utterance.id)))
    }
}

/// Embeds every utterance and scales each row to unit length.
pub fn embed_set(utterances: &[Utterance], embedder: &dyn SpeakerEmbedder) -> Result<Array2<f64>> {
    if utterances.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 utterances for speaker statistics, got {}",
            utterances.len()
        )));
    }
    let d = embedder.dim();
    let mut out = Array2::zeros((utterances.len(), d));
    for (i, u) in utterances.iter().enumerate() {
        let e = embedder.embed(u)?;
        if e.len() != d {
            return Err(Error::Shape(format!(
                "{}: embedder returned {} values, expected {d}",
                u.id,
                e.len()
            )));
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Domain(format!(
                "{}: embedding has no usable direction",
                u.id
            )));
        }
        out.row_mut(i)
            .assign(&Array1::from_iter(e.iter().map(|v| v / norm)));
    }
    Ok(out)
}

/// Gaussian fit of an embedding set.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerStats {
    pub mu: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_stats(embeddings: &Array2<f64>) -> Result<SpeakerStats> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::Input(format!(
            "covariance needs at least 2 embeddings, got {n}"
        )));
    }
    let mu = embeddings.mean_axis(Axis(0)).expect("non-empty");
    let centred = embeddings - &mu;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    Ok(SpeakerStats { mu, cov, count: n })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn symmetric_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -PSD_TOLERANCE * scale {
            return Err(Error::Domain(format!(
                "{what} is not positive semi-definite (eigenvalue {min:e})"
            )));
        }
    }
    Ok(eig)
}

/// `‖μ_A − μ_B‖² + Tr(C_A + C_B − 2 (C_A C_B)^{1/2})`, with the product
/// root evaluated as `Tr((√C_A C_B √C_A)^{1/2})`. Clamped at zero.
pub fn fsd(a: &SpeakerStats, b: &SpeakerStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.cov.dim() != (d, d) || b.cov.dim() != (d, d) {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.mu.len(),
            b.mu.len()
        )));
    }
    let ca = to_dmatrix(&a.cov);
    let cb = to_dmatrix(&b.cov);
    let eig_a = symmetric_eigen(ca.clone(), "covariance A")?;
    symmetric_eigen(cb.clone(), "covariance B")?;
    let roots = DVector::from_iterator(d, eig_a.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    let sqrt_a =
        &eig_a.eigenvectors * DMatrix::from_diagonal(&roots) * eig_a.eigenvectors.transpose();
    let inner = &sqrt_a * &cb * &sqrt_a;
    let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let mean_term: f64 = (&a.mu - &b.mu).iter().map(|v| v * v).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Machine-readable result of one FSD comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsdReport {
    pub embedder: String,
    pub dimension: usize,
    pub count_a: usize,
    pub count_b: usize,
    pub fsd: f64,
}

/// Embeds both sets with one backend and compares them.
pub fn fsd_between(
    a: &[Utterance],
    b: &[Utterance],
    embedder: &dyn SpeakerEmbedder,
) -> Result<FsdReport> {
    let sa = gaussian_stats(&embed_set(a, embedder)?)?;
    let sb = gaussian_stats(&embed_set(b, embedder)?)?;
    Ok(FsdReport {
        embedder: embedder.name(),
        dimension: embedder.dim(),
        count_a: sa.count,
        count_b: sb.count,
        fsd: fsd(&sa, &sb)?,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn stats(mu: &[f64], cov: Array2<f64>) -> SpeakerStats {
        SpeakerStats {
            mu: Array1::from(mu.to_vec()),
            cov,
            count: 10,
        }
    }

    #[test]
    fn hand_computed_stats() {
        let s = gaussian_stats(&array![[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(s.mu, array![1.0, 0.0]);
        assert_eq!(s.cov, array![[2.0, 0.0], [0.0, 0.0]]);
        let same = gaussian_stats(&array![[0.5, 0.25], [0.5, 0.25], [0.5, 0.25]]).unwrap();
        assert!(same.cov.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn permuted_rows_give_same_stats() {
        let a = array![[0.1, 0.9], [0.5, -0.2], [0.3, 0.3]];
        let b = array![[0.3, 0.3], [0.1, 0.9], [0.5, -0.2]];
        let (sa, sb) = (gaussian_stats(&a).unwrap(), gaussian_stats(&b).unwrap());
        assert!((&sa.mu - &sb.mu).iter().all(|v| v.abs() < 1e-15));
        assert!((&sa.cov - &sb.cov).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn scalar_case() {
        // 1 + (1 + 4 - 2*sqrt(4)) = 2
        let v = fsd(&stats(&[0.0], array![[1.0]]), &stats(&[1.0], array![[4.0]])).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn equal_covariances_leave_mean_distance() {
        let c = array![[2.0, 0.3], [0.3, 1.0]];
        let v = fsd(
            &stats(&[0.0, 0.0], c.clone()),
            &stats(&[3.0, 4.0], c.clone()),
        )
        .unwrap();
        assert!((v - 25.0).abs() < 1e-9, "{v}");
        assert!(fsd(&stats(&[1.0, 1.0], c.clone()), &stats(&[1.0, 1.0], c)).unwrap() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_and_non_psd_rejected() {
        let a = stats(&[0.0], array![[1.0]]);
        let b = stats(&[0.0, 0.0], Array2::eye(2));
        assert!(matches!(fsd(&a, &b), Err(Error::Shape(_))));
        let bad = stats(&[0.0, 0.0], array![[1.0, 0.0], [0.0, -0.5]]);
        assert!(matches!(fsd(&b, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn commuting_covariances_closed_form() {
        // Diagonal covariances: trace term is sum (sqrt a - sqrt b)^2.
        let a = stats(&[0.0, 0.0, 0.0], Array2::from_diag(&array![1.0, 4.0, 9.0]));
        let b = stats(&[0.0, 1.0, 0.0], Array2::from_diag(&array![4.0, 1.0, 0.25]));
        let expect = 1.0 + 1.0 + 1.0 + 6.25;
        assert!((fsd(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    struct Fixed;

    impl SpeakerEmbedder for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn dim(&self) -> usize {
            3
        }
        fn embed(&self, u: &Utterance) -> Result<Vec<f64>> {
            let s = u.waveform.samples.iter().sum::<f64>();
            Ok(vec![s, 1.0, 2.0 * s])
        }
    }

    fn utt(id: &str, samples: Vec<f64>) -> Utterance {
        Utterance {
            id: id.into(),
            waveform: Waveform {
                samples,
                sample_rate: 8000,
            },
        }
    }

    #[test]
    fn embed_set_normalises_and_duplicates() {
        let set = vec![
            utt("a", vec![0.5; 10]),
            utt("b", vec![-0.1; 10]),
            utt("a2", vec![0.5; 10]),
        ];
        let e = embed_set(&set, &Fixed).unwrap();
        for row in e.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(e.row(0), e.row(2));
        assert!(matches!(embed_set(&set[..1], &Fixed), Err(Error::Input(_))));
    }

    #[test]
    fn spectral_embedder_distinguishes_timbre() {
        let tone = |f: f64, h2: f64| {
            (0..16000)
                .map(|i| {
                    let t = i as f64 / 16000.0;
                    (2.0 * std::f64::consts::PI * f * t).sin()
                        + h2 * (4.0 * std::f64::consts::PI * f * t).sin()
                })
                .collect::<Vec<_>>()
        };
        let emb = SpectralEmbedder::default();
        let set = vec![
            utt("a", tone(150.0, 0.2)),
            utt("b", tone(152.0, 0.2)),
            utt("c", tone(400.0, 0.9)),
        ];
        let e = embed_set(&set, &emb).unwrap();
        assert_eq!(e.ncols(), emb.dim());
        let dist = |i: usize, j: usize| (&e.row(i) - &e.row(j)).mapv(|v| v * v).sum();
        assert!(dist(0, 1) < dist(0, 2));
        let short = utt("short", vec![0.0; 100]);
        match emb.embed(&short) {
            Err(Error::Input(msg)) => assert!(msg.contains("short")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precomputed_embeddings_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        std::fs::write(
            &path,
            "{\"audio_path\": \"x.wav\", \"embedding\": [1, 0]}\n",
        )
        .unwrap();
        let emb = PrecomputedEmbedder::load(&path).unwrap();
        assert_eq!(emb.dim(), 2);
        let id = dir.path().join("x.wav").display().to_string();
        assert_eq!(emb.embed(&utt(&id, vec![])).unwrap(), vec![1.0, 0.0]);
        assert!(emb.embed(&utt("y.wav", vec![])).is_err());
    }

    fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let g = Array2::from_shape_simple_fn((d, d + 1), || StandardNormal.sample(rng));
        g.dot(&g.t()) / d as f64
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(seed in 0u64..1000, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu_a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mu_b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = stats(&mu_a, random_psd(d, &mut rng));
            let b = stats(&mu_b, random_psd(d, &mut rng));
            let ab = fsd(&a, &b).unwrap();
            let ba = fsd(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
            prop_assert!(fsd(&a, &a).unwrap() <= 1e-6);
        }
    }
}
