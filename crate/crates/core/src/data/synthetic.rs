//! The structured synthetic distribution: one class-discriminative patch per
//! input, `l* - 1` confusable patches that lean towards one discriminative
//! pattern, and the remainder drawn from small class-independent pattern sets.

use serde::{Deserialize, Serialize};

use super::{label_of, Dataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::linalg::{axpy, distance, dot, gram_schmidt, norm, normalize, project_out, scale, sub};
use crate::rng::Rng;

const MAX_ATTEMPTS: usize = 10_000;
const PROJECTION_FALLBACK_AFTER: usize = 1_000;

/// How irrelevant patches choose their pattern set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Uniform,
    /// Unnormalized per-set weights.
    Weighted(Vec<f64>),
}

impl Placement {
    fn choose(&self, p: usize, rng: &mut Rng) -> usize {
        match self {
            Placement::Uniform => rng.below(p),
            Placement::Weighted(w) => {
                let total: f64 = w.iter().sum();
                let mut u = rng.uniform() * total;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        return i;
                    }
                    u -= wi;
                }
                w.len() - 1
            }
        }
    }
}

/// Parameters of the synthetic distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub d: usize,
    pub n: usize,
    #[serde(default = "default_classes")]
    pub c: usize,
    pub p: usize,
    pub delta_d: f64,
    pub delta_r: f64,
    pub l_star: usize,
    #[serde(default)]
    pub placement: Placement,
}

fn default_classes() -> usize {
    2
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < self.l_star || self.l_star == 0 {
            return Err(Error::invalid(format!(
                "need n >= l_star >= 1 (n={}, l_star={})",
                self.n, self.l_star
            )));
        }
        if self.p == 0 {
            return Err(Error::invalid("p must be >= 1"));
        }
        if !(self.delta_r > 0.0 && self.delta_r < 1.0) {
            return Err(Error::invalid(format!("delta_r must lie in (0,1), got {}", self.delta_r)));
        }
        if let Placement::Weighted(w) = &self.placement {
            if w.len() != self.p || w.iter().any(|x| x.is_nan() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("placement weights must be p nonnegative values with positive sum"));
            }
        }
        Ok(())
    }

    /// Builds the pattern library from the `patterns` stream of `rng`.
    pub fn library(&self, rng: &Rng) -> Result<PatternLibrary> {
        self.validate()?;
        let mut stream = rng.fork("patterns");
        let disc = make_discriminative_patterns(self.d, self.delta_d, self.c, &mut stream)?;
        let mut lib = PatternLibrary {
            dim: self.d,
            num_classes: self.c,
            discriminative: disc,
            set_centers: Vec::new(),
            set_diameter: 0.0,
            delta_d: self.delta_d,
            delta_r: self.delta_r,
            delta: compute_delta(self.delta_d, self.delta_r)?,
            l_star: self.l_star,
            delta_prime: delta_prime(self.delta_d),
            placement: self.placement.clone(),
        };
        make_pattern_sets(&mut lib, self.p, self.delta_r, &mut stream)?;
        Ok(lib)
    }

    /// Draws `count` samples with class counts balanced to within one.
    pub fn dataset(&self, lib: &PatternLibrary, count: usize, rng: &mut Rng) -> Result<Dataset> {
        let mut classes: Vec<usize> = (0..count).map(|i| i % self.c).collect();
        rng.shuffle(&mut classes);
        let samples = classes
            .into_iter()
            .map(|cls| sample_input_with_class(lib, self.n, self.l_star, cls, rng))
            .collect::<Result<Vec<_>>>()?;
        let provenance = Provenance {
            source: "synthetic".into(),
            seed: Some(rng.seed()),
            params: serde_json::to_value(self)?,
        };
        Dataset::new(samples, self.n, self.d, self.c, provenance)
    }
}

/// Generative ground truth of the synthetic distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternLibrary {
    pub dim: usize,
    pub num_classes: usize,
    pub discriminative: Vec<Vec<f64>>,
    pub set_centers: Vec<Vec<f64>>,
    /// Diameter bound of each irrelevant pattern set.
    pub set_diameter: f64,
    pub delta_d: f64,
    pub delta_r: f64,
    pub delta: f64,
    pub l_star: usize,
    pub delta_prime: f64,
    #[serde(default)]
    pub placement: Placement,
}

impl PatternLibrary {
    pub fn num_sets(&self) -> usize {
        self.set_centers.len()
    }

    fn class_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let c = self.num_classes;
        (0..c).flat_map(move |a| (a + 1..c).map(move |b| (a, b)))
    }
}

/// Confusability threshold: half the gap `1 - delta_d`.
pub fn delta_prime(delta_d: f64) -> f64 {
    (1.0 - delta_d) / 2.0
}

/// Diameter of each irrelevant pattern set: `0.5 * sqrt((1 - delta_r^2) / (d p^2))`.
pub fn set_diameter(d: usize, p: usize, delta_r: f64) -> f64 {
    0.5 * ((1.0 - delta_r * delta_r) / (d as f64 * (p * p) as f64)).sqrt()
}

/// `1 / (1 - max(delta_d^2, delta_r^2))`.
pub fn compute_delta(delta_d: f64, delta_r: f64) -> Result<f64> {
    let m = (delta_d * delta_d).max(delta_r * delta_r);
    if m.is_nan() || m >= 1.0 {
        return Err(Error::invalid(format!(
            "max(delta_d^2, delta_r^2) = {m} must be < 1"
        )));
    }
    Ok(1.0 / (1.0 - m))
}

/// `c` unit vectors in R^d with every pairwise inner product equal to `delta_d`.
///
/// For two classes `o2 = delta_d o1 + sqrt(1 - delta_d^2) u` with `u` a unit
/// vector orthogonal to `o1`. For more classes the vectors are a scaled
/// simplex over a random orthonormal frame, which needs `delta_d >= -1/(c-1)`.
pub fn make_discriminative_patterns(d: usize, delta_d: f64, c: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if d < 2 {
        return Err(Error::invalid(format!("d must be >= 2, got {d}")));
    }
    if c < 2 {
        return Err(Error::invalid(format!("class count must be >= 2, got {c}")));
    }
    if c > d {
        return Err(Error::InfeasibleGeometry(format!(
            "cannot embed {c} discriminative patterns in dimension {d}"
        )));
    }
    if delta_d.is_nan() || delta_d.abs() >= 1.0 {
        return Err(Error::invalid(format!("|delta_d| must be < 1, got {delta_d}")));
    }
    let frame = random_orthonormal(d, c, rng);
    if c == 2 {
        let o1 = frame[0].clone();
        let mut o2 = frame[1].clone();
        scale(&mut o2, (1.0 - delta_d * delta_d).sqrt());
        axpy(delta_d, &o1, &mut o2);
        return Ok(vec![o1, o2]);
    }
    let lower = -1.0 / (c as f64 - 1.0);
    if delta_d < lower {
        return Err(Error::InfeasibleGeometry(format!(
            "{c} vectors cannot have pairwise inner product {delta_d} < {lower}"
        )));
    }
    // o_i = a e_i + b s, s = (1/sqrt c) sum_j e_j
    let cf = c as f64;
    let a = (1.0 - delta_d).sqrt();
    let b = -a / cf.sqrt() + (a * a / cf + delta_d).max(0.0).sqrt();
    let mut s = vec![0.0; d];
    for e in &frame {
        axpy(1.0 / cf.sqrt(), e, &mut s);
    }
    Ok(frame
        .iter()
        .map(|e| {
            let mut o = s.clone();
            scale(&mut o, b);
            axpy(a, e, &mut o);
            // absorb rounding so the norm is exactly representable as 1
            normalize(&mut o);
            o
        })
        .collect())
}

fn random_orthonormal(d: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    loop {
        let mut vs: Vec<Vec<f64>> = (0..count).map(|_| rng.normal_vec(d, 1.0)).collect();
        if gram_schmidt(&mut vs) {
            return vs;
        }
    }
}

/// Adds `p` irrelevant pattern-set centers to `lib` and fixes the set
/// diameter. Centers keep `|<o_i, c>| <= delta_r`, stay far enough from every
/// discriminative difference `o_a - o_b` that no set member is
/// `delta'`-closer to either side, and are separated by more than twice the
/// diameter so the sets are disjoint.
pub fn make_pattern_sets(lib: &mut PatternLibrary, p: usize, delta_r: f64, rng: &mut Rng) -> Result<()> {
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    if !(delta_r > 0.0 && delta_r < 1.0) {
        return Err(Error::invalid(format!("delta_r must lie in (0,1), got {delta_r}")));
    }
    let d = lib.dim;
    let zeta = set_diameter(d, p, delta_r);
    let dprime = lib.delta_prime;
    let diffs: Vec<Vec<f64>> = lib
        .class_pairs()
        .map(|(a, b)| sub(&lib.discriminative[a], &lib.discriminative[b]))
        .collect();
    let mut span = lib.discriminative.clone();
    let span_ok = gram_schmidt(&mut span);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(p);
    for j in 0..p {
        let mut last_violation = String::new();
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut cand = rng.unit_vector(d);
            if attempt >= PROJECTION_FALLBACK_AFTER && span_ok && d > span.len() {
                project_out(&mut cand, &span);
                if normalize(&mut cand) < 1e-10 {
                    continue;
                }
            }
            if let Some(i) = lib
                .discriminative
                .iter()
                .position(|o| dot(o, &cand).abs() > delta_r)
            {
                last_violation = format!("|<o_{}, center_{j}>| <= delta_r = {delta_r}", i + 1);
                continue;
            }
            if diffs.iter().any(|df| dot(df, &cand).abs() > dprime - zeta / 2.0) {
                last_violation = format!(
                    "|<o_a - o_b, center_{j}>| <= delta' - zeta/2 = {}",
                    dprime - zeta / 2.0
                );
                continue;
            }
            if centers.iter().any(|c| distance(c, &cand) <= 2.0 * zeta) {
                last_violation = format!("center separation > 2 zeta = {}", 2.0 * zeta);
                continue;
            }
            accepted = Some(cand);
            break;
        }
        match accepted {
            Some(c) => centers.push(c),
            None => {
                return Err(Error::InfeasibleGeometry(format!(
                    "no center {j} after {MAX_ATTEMPTS} attempts; violated: {last_violation}"
                )))
            }
        }
    }
    lib.set_centers = centers;
    lib.set_diameter = zeta;
    Ok(())
}

/// A member of irrelevant set `j`: the center pushed by a tangent perturbation
/// of norm at most `zeta / 2`, projected back onto the sphere.
pub fn sample_irrelevant_pattern(lib: &PatternLibrary, j: usize, rng: &mut Rng) -> Vec<f64> {
    let center = &lib.set_centers[j];
    let zeta = lib.set_diameter;
    if zeta == 0.0 || lib.dim < 2 {
        return center.clone();
    }
    let d = lib.dim;
    let mut dir = rng.normal_vec(d, 1.0);
    let c = dot(&dir, center);
    axpy(-c, center, &mut dir);
    if normalize(&mut dir) < 1e-12 {
        return center.clone();
    }
    // uniform radius within the (d-1)-ball
    let radius = 0.5 * zeta * rng.uniform().powf(1.0 / (d - 1) as f64);
    let mut q = center.clone();
    axpy(radius, &dir, &mut q);
    normalize(&mut q);
    q
}

/// A confusable patch: a unit vector `q` with `<o_a - o_b, q> > delta'` for a
/// uniformly chosen ordered class pair `(a, b)`. Its remaining mass lies in a
/// fresh random direction orthogonal to every discriminative pattern.
pub fn sample_confusable_pattern(lib: &PatternLibrary, rng: &mut Rng) -> Result<Vec<f64>> {
    let c = lib.num_classes;
    let a = rng.below(c);
    let mut b = rng.below(c - 1);
    if b >= a {
        b += 1;
    }
    let diff = sub(&lib.discriminative[a], &lib.discriminative[b]);
    let diff_norm = norm(&diff);
    let dprime = lib.delta_prime;
    if diff_norm.is_nan() || diff_norm <= dprime {
        return Err(Error::InfeasibleGeometry(format!(
            "||o_a - o_b|| = {diff_norm} does not exceed delta' = {dprime}"
        )));
    }
    if lib.dim <= c {
        return Err(Error::InfeasibleGeometry(format!(
            "confusable patches need d > c (d={}, c={c}, delta_d={}, l_star={})",
            lib.dim, lib.delta_d, lib.l_star
        )));
    }
    let mut t = rng.uniform_range(dprime, diff_norm);
    while t <= dprime {
        t = rng.uniform_range(dprime, diff_norm);
    }
    let mut basis = lib.discriminative.clone();
    gram_schmidt(&mut basis);
    let mut u = rng.normal_vec(lib.dim, 1.0);
    project_out(&mut u, &basis);
    project_out(&mut u, &basis);
    normalize(&mut u);
    let along = t / (diff_norm * diff_norm);
    let rest = (1.0 - (t / diff_norm).powi(2)).max(0.0).sqrt();
    let mut q = u;
    scale(&mut q, rest);
    axpy(along, &diff, &mut q);
    normalize(&mut q);
    Ok(q)
}

/// One input of class `class`: the discriminative pattern at a uniformly
/// random slot, `l_star - 1` confusable patches at further random slots, and
/// irrelevant patches everywhere else.
pub fn sample_input_with_class(lib: &PatternLibrary, n: usize, l_star: usize, class: usize, rng: &mut Rng) -> Result<Sample> {
    if l_star == 0 || n < l_star {
        return Err(Error::invalid(format!("need n >= l_star >= 1 (n={n}, l_star={l_star})")));
    }
    if class >= lib.num_classes {
        return Err(Error::invalid(format!("class {class} out of range")));
    }
    let d = lib.dim;
    let mut slots: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut slots);
    let disc_index = slots[0];
    let mut patches = vec![0.0; n * d];
    patches[disc_index * d..(disc_index + 1) * d].copy_from_slice(&lib.discriminative[class]);
    for (rank, &slot) in slots.iter().enumerate().skip(1) {
        let q = if rank < l_star {
            sample_confusable_pattern(lib, rng)?
        } else {
            let j = lib.placement.choose(lib.num_sets(), rng);
            sample_irrelevant_pattern(lib, j, rng)
        };
        patches[slot * d..(slot + 1) * d].copy_from_slice(&q);
    }
    Ok(Sample {
        patches,
        dim: d,
        label: label_of(class, lib.num_classes),
        disc_index,
    })
}

/// [`sample_input_with_class`] with the class drawn uniformly.
pub fn sample_input(lib: &PatternLibrary, n: usize, l_star: usize, rng: &mut Rng) -> Result<Sample> {
    let class = rng.below(lib.num_classes);
    sample_input_with_class(lib, n, l_star, class, rng)
}

/// One more than the largest per-sample count of non-discriminative patches
/// `q` with `|<o1 - o2, q>| > delta_prime`.
pub fn measure_l_star(dataset: &Dataset, o1: &[f64], o2: &[f64], delta_prime: f64) -> usize {
    let diff = sub(o1, o2);
    1 + dataset
        .samples
        .iter()
        .map(|s| {
            s.patches()
                .enumerate()
                .filter(|&(j, q)| j != s.disc_index && dot(&diff, q).abs() > delta_prime)
                .count()
        })
        .max()
        .unwrap_or(0)
}
