use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{write_dataset, DatasetManifest};
use super::LabelMap;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Content of one image quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuadrantState {
    Empty = 0,
    Square = 1,
    Plus = 2,
    Dot = 3,
}

impl QuadrantState {
    pub const ALL: [QuadrantState; 4] =
        [QuadrantState::Empty, QuadrantState::Square, QuadrantState::Plus, QuadrantState::Dot];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Row-stochastic and column-stochastic 4×4 matrix, `T[i][j] = P(next = j | current = i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    entries: [[f64; 4]; 4],
}

impl TransitionMatrix {
    pub fn new(entries: [[f64; 4]; 4]) -> Result<Self> {
        for (i, row) in entries.iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("transition row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("transition row {i} sums to {s}")));
            }
        }
        for j in 0..4 {
            let s: f64 = (0..4).map(|i| entries[i][j]).sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("transition column {j} sums to {s}; not doubly stochastic")));
            }
        }
        Ok(TransitionMatrix { entries })
    }

    /// The MarkovShapes benchmark chain: an empty quadrant is followed by any
    /// state uniformly; a shape rarely repeats itself.
    pub fn markov_shapes() -> Self {
        let (a, b, c) = (0.25, 3.0 / 40.0, 27.0 / 80.0);
        TransitionMatrix::new([[a, a, a, a], [a, b, c, c], [a, c, b, c], [a, c, c, b]]).expect("valid chain")
    }

    pub fn identity() -> Self {
        let mut e = [[0.0; 4]; 4];
        for (i, row) in e.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        TransitionMatrix { entries: e }
    }

    pub fn entries(&self) -> &[[f64; 4]; 4] {
        &self.entries
    }

    pub fn prob(&self, from: QuadrantState, to: QuadrantState) -> f64 {
        self.entries[from.index()][to.index()]
    }
}

/// Distribution of the first (top-left) quadrant state.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialDistribution([f64; 4]);

impl InitialDistribution {
    pub fn new(p: [f64; 4]) -> Result<Self> {
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid("initial distribution entries must lie in [0, 1]"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("initial distribution sums to {s}, not 1")));
        }
        Ok(InitialDistribution(p))
    }

    pub fn uniform() -> Self {
        InitialDistribution([0.25; 4])
    }

    pub fn probs(&self) -> &[f64; 4] {
        &self.0
    }
}

/// Per-quadrant binary templates for the three shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeAtlas {
    quadrant_size: usize,
    templates: [Vec<bool>; 3],
}

impl ShapeAtlas {
    /// Default templates: a filled square inset by one pixel (no inset below
    /// q = 6), a plus made of two centred bars, and a centred dot. Bars and
    /// dot are two pixels wide for even q and one pixel wide for odd q.
    pub fn new(quadrant_size: usize) -> Result<Self> {
        let q = quadrant_size;
        if q < 4 {
            return Err(Error::invalid(format!("quadrant size {q} < 4")));
        }
        let margin = usize::from(q >= 6);
        let bar = if q % 2 == 0 { 2 } else { 1 };
        let lo = (q - bar) / 2;
        let in_bar = |i: usize| (lo..lo + bar).contains(&i);
        let in_body = |i: usize| (margin..q - margin).contains(&i);
        let square = (0..q * q).map(|p| in_body(p / q) && in_body(p % q)).collect();
        let plus = (0..q * q)
            .map(|p| {
                let (r, c) = (p / q, p % q);
                (in_bar(r) && in_body(c)) || (in_bar(c) && in_body(r))
            })
            .collect();
        let dot = (0..q * q).map(|p| in_bar(p / q) && in_bar(p % q)).collect();
        ShapeAtlas::from_templates(q, [square, plus, dot])
    }

    /// Custom templates; they must be affinely independent together with the
    /// empty quadrant.
    pub fn from_templates(quadrant_size: usize, templates: [Vec<bool>; 3]) -> Result<Self> {
        let q2 = quadrant_size * quadrant_size;
        if templates.iter().any(|t| t.len() != q2) {
            return Err(Error::invalid("template size does not match quadrant"));
        }
        let data: Vec<f64> = templates.iter().flat_map(|t| t.iter().map(|&b| b as u8 as f64)).collect();
        let sv = Matrix::new(3, q2, data).singular_values();
        if sv[2] <= 1e-9 * sv[0] {
            return Err(Error::invalid("shape templates are not affinely independent"));
        }
        Ok(ShapeAtlas { quadrant_size, templates })
    }

    pub fn quadrant_size(&self) -> usize {
        self.quadrant_size
    }

    pub fn image_side(&self) -> usize {
        2 * self.quadrant_size
    }

    /// Quadrant pixels of `state`, row-major `q × q`.
    pub fn pixels(&self, state: QuadrantState) -> Vec<bool> {
        match state {
            QuadrantState::Empty => vec![false; self.quadrant_size * self.quadrant_size],
            s => self.templates[s.index() - 1].clone(),
        }
    }

    /// Foreground mask of a full image with the given quadrant states in
    /// row-major order (TL, TR, BL, BR).
    pub fn render(&self, states: &[QuadrantState; 4]) -> Vec<bool> {
        let q = self.quadrant_size;
        let side = 2 * q;
        let mut img = vec![false; side * side];
        for (qi, &s) in states.iter().enumerate() {
            let (r0, c0) = ((qi / 2) * q, (qi % 2) * q);
            let px = self.pixels(s);
            for r in 0..q {
                for c in 0..q {
                    img[(r0 + r) * side + c0 + c] = px[r * q + c];
                }
            }
        }
        img
    }

    /// Extracts quadrant `qi` (row-major order) of a full image mask.
    pub fn quadrant(&self, image: &[bool], qi: usize) -> Vec<bool> {
        let q = self.quadrant_size;
        let side = 2 * q;
        let (r0, c0) = ((qi / 2) * q, (qi % 2) * q);
        (0..q * q).map(|p| image[(r0 + p / q) * side + c0 + p % q]).collect()
    }
}

/// Smallest Hamming distance between a quadrant and any of the four states.
pub fn nearest_template_distance(quadrant: &[bool], atlas: &ShapeAtlas) -> usize {
    QuadrantState::ALL
        .iter()
        .map(|&s| atlas.pixels(s).iter().zip(quadrant).filter(|(a, b)| a != b).count())
        .min()
        .unwrap_or(usize::MAX)
}

fn draw_state<R: Rng + ?Sized>(rng: &mut R, probs: &[f64; 4]) -> QuadrantState {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return QuadrantState::ALL[i];
        }
    }
    // u landed in the rounding slack above the cumulative sum
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(3);
    QuadrantState::ALL[last]
}

/// Runs the quadrant chain in row-major order.
pub fn markovshapes_sample_states<R: Rng + ?Sized>(
    rng: &mut R,
    trans: &TransitionMatrix,
    init: &InitialDistribution,
) -> [QuadrantState; 4] {
    let mut states = [QuadrantState::Empty; 4];
    states[0] = draw_state(rng, init.probs());
    for i in 1..4 {
        states[i] = draw_state(rng, &trans.entries[states[i - 1].index()]);
    }
    states
}

/// Draws one binary (k = 2) MarkovShapes label map.
pub fn markovshapes_sample<R: Rng + ?Sized>(
    rng: &mut R,
    trans: &TransitionMatrix,
    atlas: &ShapeAtlas,
    init: &InitialDistribution,
) -> LabelMap {
    let states = markovshapes_sample_states(rng, trans, init);
    let side = atlas.image_side();
    LabelMap::from_mask(side, side, &atlas.render(&states))
}

/// All 256 quadrant configurations with their probabilities.
pub fn markovshapes_enumerate(trans: &TransitionMatrix, init: &InitialDistribution) -> Vec<([QuadrantState; 4], f64)> {
    let mut out = Vec::with_capacity(256);
    for code in 0..256usize {
        let states: [QuadrantState; 4] = std::array::from_fn(|i| QuadrantState::ALL[(code >> (2 * (3 - i))) & 3]);
        let mut p = init.probs()[states[0].index()];
        for i in 1..4 {
            p *= trans.prob(states[i - 1], states[i]);
        }
        out.push((states, p));
    }
    out
}

/// Exact mean and covariance of the foreground pixel channel.
pub fn markovshapes_exact_covariance(
    trans: &TransitionMatrix,
    init: &InitialDistribution,
    atlas: &ShapeAtlas,
) -> (Vec<f64>, Matrix) {
    let side = atlas.image_side();
    let d = side * side;
    let configs = markovshapes_enumerate(trans, init);
    let rendered: Vec<(Vec<f64>, f64)> = configs
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(s, p)| (atlas.render(s).iter().map(|&b| b as u8 as f64).collect(), *p))
        .collect();
    let mut mean = vec![0.0; d];
    for (x, p) in &rendered {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += p * v;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for (x, p) in &rendered {
        let c: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            let row = &mut cov.data[i * d..(i + 1) * d];
            for (r, cj) in row.iter_mut().zip(&c) {
                *r += p * c[i] * cj;
            }
        }
    }
    (mean, cov)
}

/// Writes a MarkovShapes dataset: the foreground mask doubles as the
/// (unused) single-channel image, with one annotation per image.
pub fn markovshapes_generate(dir: &Path, seed: u64, count: usize, quadrant_size: usize) -> Result<DatasetManifest> {
    let atlas = ShapeAtlas::new(quadrant_size)?;
    let trans = TransitionMatrix::markov_shapes();
    let init = InitialDistribution::uniform();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = atlas.image_side();
    let mut images = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count * 2 * side * side);
    for _ in 0..count {
        let y = markovshapes_sample(&mut rng, &trans, &atlas, &init);
        images.extend(y.foreground().iter().map(|&b| b as u8 as f32));
        labels.extend_from_slice(y.values());
    }
    let generator = serde_json::json!({
        "generator": "markovshapes",
        "quadrant_size": quadrant_size,
        "transition": trans.entries(),
        "initial": init.probs(),
        "quadrant_order": "row-major",
    });
    write_dataset(dir, "markovshapes", seed, [1, side, side], [2, side, side], 1, &images, &labels, generator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank_analysis::numerical_rank;

    #[test]
    fn benchmark_matrix_is_doubly_stochastic() {
        let t = TransitionMatrix::markov_shapes();
        assert_eq!(t.entries()[1][2], 27.0 / 80.0);
        let mut bad = *t.entries();
        bad[1][1] += 0.01;
        bad[1][2] -= 0.01;
        bad[2][1] -= 0.01;
        bad[2][2] += 0.01;
        // still doubly stochastic after a balanced perturbation
        assert!(TransitionMatrix::new(bad).is_ok());
        bad[0][0] += 0.01;
        bad[0][1] -= 0.01;
        assert!(TransitionMatrix::new(bad).is_err());
        let row_only = [[0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0], [0.25; 4]];
        assert!(TransitionMatrix::new(row_only).is_err());
    }

    #[test]
    fn initial_distribution_must_sum_to_one() {
        assert!(InitialDistribution::new([0.25, 0.25, 0.25, 0.25 + 1e-10]).is_ok());
        assert!(InitialDistribution::new([0.3, 0.25, 0.25, 0.25]).is_err());
    }

    #[test]
    fn default_templates_match_documented_shapes() {
        let atlas = ShapeAtlas::new(8).unwrap();
        let count = |s| atlas.pixels(s).iter().filter(|&&b| b).count();
        assert_eq!(count(QuadrantState::Square), 36);
        assert_eq!(count(QuadrantState::Plus), 20);
        assert_eq!(count(QuadrantState::Dot), 4);
        for q in 4..=12 {
            assert!(ShapeAtlas::new(q).is_ok(), "q = {q}");
        }
        let t = vec![true; 16];
        assert!(ShapeAtlas::from_templates(4, [t.clone(), t.clone(), t]).is_err());
    }

    #[test]
    fn enumeration_sums_to_one() {
        let t = TransitionMatrix::markov_shapes();
        let e = markovshapes_enumerate(&t, &InitialDistribution::uniform());
        assert_eq!(e.len(), 256);
        let total: f64 = e.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let empty = e.iter().find(|(s, _)| s.iter().all(|&q| q == QuadrantState::Empty)).unwrap();
        assert!((empty.1 - 1.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_chain_enumerates_single_configuration() {
        let e = markovshapes_enumerate(&TransitionMatrix::identity(), &InitialDistribution::new([1.0, 0.0, 0.0, 0.0]).unwrap());
        let support: Vec<_> = e.iter().filter(|(_, p)| *p > 0.0).collect();
        assert_eq!(support.len(), 1);
        assert_eq!(support[0].0, [QuadrantState::Empty; 4]);
        assert_eq!(support[0].1, 1.0);
    }

    #[test]
    fn exact_covariance_has_rank_twelve_and_bernoulli_diagonal() {
        let atlas = ShapeAtlas::new(8).unwrap();
        let (mean, cov) =
            markovshapes_exact_covariance(&TransitionMatrix::markov_shapes(), &InitialDistribution::uniform(), &atlas);
        assert!(cov.max_asymmetry() < 1e-12);
        assert_eq!(numerical_rank(&cov, 1e-8), 12);
        for (i, p) in mean.iter().enumerate() {
            assert!((cov.get(i, i) - p * (1.0 - p)).abs() < 1e-12);
        }
        let min_eig = nalgebra::SymmetricEigen::new(cov.to_nalgebra()).eigenvalues.min();
        assert!(min_eig > -1e-10);
    }

    #[test]
    fn rank_twelve_for_other_quadrant_sizes() {
        for q in [4, 5, 6, 7] {
            let atlas = ShapeAtlas::new(q).unwrap();
            let (_, cov) =
                markovshapes_exact_covariance(&TransitionMatrix::markov_shapes(), &InitialDistribution::uniform(), &atlas);
            assert_eq!(numerical_rank(&cov, 1e-8), 12, "q = {q}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let atlas = ShapeAtlas::new(8).unwrap();
        let t = TransitionMatrix::markov_shapes();
        let init = InitialDistribution::uniform();
        let a = markovshapes_sample(&mut ChaCha8Rng::seed_from_u64(3), &t, &atlas, &init);
        let b = markovshapes_sample(&mut ChaCha8Rng::seed_from_u64(3), &t, &atlas, &init);
        assert_eq!(a, b);
        assert_eq!(a.k(), 2);
        assert_eq!(a.values().len(), 2 * 256);
    }

    #[test]
    fn uniform_init_gives_uniform_quadrant_marginals() {
        let t = TransitionMatrix::markov_shapes();
        let init = InitialDistribution::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut hist = [[0usize; 4]; 4];
        for _ in 0..n {
            let s = markovshapes_sample_states(&mut rng, &t, &init);
            for (qi, st) in s.iter().enumerate() {
                hist[qi][st.index()] += 1;
            }
        }
        let se = (n as f64 * 0.25 * 0.75).sqrt();
        for row in hist {
            for c in row {
                assert!((c as f64 - n as f64 / 4.0).abs() < 4.0 * se, "{row:?}");
            }
        }
    }

    #[test]
    fn identity_chain_covariance_matches_monte_carlo() {
        let atlas = ShapeAtlas::new(4).unwrap();
        let t = TransitionMatrix::identity();
        let init = InitialDistribution::uniform();
        let (_, exact) = markovshapes_exact_covariance(&t, &init, &atlas);
        let d = 64;
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // only four distinct images exist; count them and form the covariance
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[markovshapes_sample_states(&mut rng, &t, &init)[0].index()] += 1;
        }
        let imgs: Vec<Vec<f64>> = QuadrantState::ALL
            .iter()
            .map(|&s| atlas.render(&[s; 4]).iter().map(|&b| b as u8 as f64).collect())
            .collect();
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let emp_mean: Vec<f64> = (0..d).map(|j| (0..4).map(|s| w[s] * imgs[s][j]).sum()).collect();
        let true_mean: Vec<f64> = (0..d).map(|j| (0..4).map(|s| 0.25 * imgs[s][j]).sum()).collect();
        for i in 0..d {
            for j in 0..d {
                let emp: f64 = (0..4).map(|s| w[s] * (imgs[s][i] - emp_mean[i]) * (imgs[s][j] - emp_mean[j])).sum();
                let z: Vec<f64> = (0..4).map(|s| (imgs[s][i] - true_mean[i]) * (imgs[s][j] - true_mean[j])).collect();
                let ez = z.iter().sum::<f64>() / 4.0;
                let var = z.iter().map(|v| (v - ez).powi(2)).sum::<f64>() / 4.0;
                let se = (var / n as f64).sqrt();
                // second-order term from the estimated means, each within 3 SE
                let mean_term = 9.0 * (exact.get(i, i) * exact.get(j, j)).sqrt() / n as f64;
                assert!((emp - exact.get(i, j)).abs() <= 3.0 * se + mean_term + 1e-12, "({i},{j})");
            }
        }
    }

    /// Empirical covariance from configuration counts; identical to the
    /// per-image sample covariance since only 256 images exist.
    fn empirical_covariance(counts: &[usize], atlas: &ShapeAtlas) -> Matrix {
        let n: usize = counts.iter().sum();
        let configs = markovshapes_enumerate(&TransitionMatrix::identity(), &InitialDistribution::uniform());
        let d = atlas.image_side().pow(2);
        let mut mean = vec![0.0; d];
        let imgs: Vec<Vec<f64>> =
            configs.iter().map(|(s, _)| atlas.render(s).iter().map(|&b| b as u8 as f64).collect()).collect();
        for (img, &c) in imgs.iter().zip(counts) {
            for (m, v) in mean.iter_mut().zip(img) {
                *m += c as f64 * v / n as f64;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for (img, &c) in imgs.iter().zip(counts) {
            if c == 0 {
                continue;
            }
            let w = c as f64 / n as f64;
            for i in 0..d {
                let ci = img[i] - mean[i];
                for j in 0..d {
                    cov.data[i * d + j] += w * ci * (img[j] - mean[j]);
                }
            }
        }
        cov
    }

    #[test]
    fn empirical_covariance_error_shrinks_at_monte_carlo_rate() {
        let atlas = ShapeAtlas::new(8).unwrap();
        let t = TransitionMatrix::markov_shapes();
        let init = InitialDistribution::uniform();
        let (_, exact) = markovshapes_exact_covariance(&t, &init, &atlas);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut counts = vec![0usize; 256];
        let mut err_at = Vec::new();
        for target in [250_000usize, 1_000_000] {
            while counts.iter().sum::<usize>() < target {
                let s = markovshapes_sample_states(&mut rng, &t, &init);
                let code = s.iter().fold(0, |acc, q| acc * 4 + q.index());
                counts[code] += 1;
            }
            err_at.push(empirical_covariance(&counts, &atlas).sub(&exact).frobenius());
        }
        let ratio = err_at[0] / err_at[1];
        assert!((1.5..=2.7).contains(&ratio), "error ratio {ratio} ({err_at:?})");
    }

    #[test]
    fn nearest_template_distance_is_zero_for_templates() {
        let atlas = ShapeAtlas::new(8).unwrap();
        for s in QuadrantState::ALL {
            assert_eq!(nearest_template_distance(&atlas.pixels(s), &atlas), 0);
        }
        let mut px = atlas.pixels(QuadrantState::Dot);
        px[0] = true;
        px[7] = true;
        px[63] = true;
        assert_eq!(nearest_template_distance(&px, &atlas), 3);
    }
}
