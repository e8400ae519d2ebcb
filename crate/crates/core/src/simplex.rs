//! The vocabulary-simplex representation and its primitive transforms.

use ndarray::{Array2, ArrayView1, Axis};

use crate::rng::RngStream;
use crate::{Error, Result, Scalar, TokenId};

/// A block of per-position vocabulary-sized logit rows at simplex scale `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexLogits<S> {
    pub values: Array2<S>,
    pub k: S,
}

impl<S: Scalar> SimplexLogits<S> {
    pub fn new(values: Array2<S>, k: S) -> Self {
        SimplexLogits { values, k }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn vocab(&self) -> usize {
        self.values.ncols()
    }

    /// Per-row argmax; ties resolve to the lowest index.
    pub fn argmax(&self) -> Vec<TokenId> {
        self.values
            .rows()
            .into_iter()
            .map(|row| argmax_row(row) as TokenId)
            .collect()
    }

    /// True when every row has exactly one `+K` and all other entries `-K`.
    pub fn is_base(&self) -> bool {
        self.values.rows().into_iter().all(|row| {
            let plus = row.iter().filter(|&&v| v == self.k).count();
            let minus = row.iter().filter(|&&v| v == -self.k).count();
            plus == 1 && minus + 1 == row.len()
        })
    }
}

pub(crate) fn argmax_row<S: Scalar>(row: ArrayView1<'_, S>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Almost-one-hot base representation: `+K` at the token, `-K` elsewhere.
pub fn logits_initialization<S: Scalar>(
    tokens: &[TokenId],
    vocab: usize,
    k: S,
) -> Result<SimplexLogits<S>> {
    if !(k > S::zero()) {
        return Err(Error::Config(format!("simplex scale K must be positive, got {k}")));
    }
    let mut values = Array2::from_elem((tokens.len(), vocab), -k);
    for (i, &id) in tokens.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::Domain(format!(
                "token id {id} at position {i} is outside the vocabulary of size {vocab}"
            )));
        }
        values[[i, id as usize]] = k;
    }
    Ok(SimplexLogits::new(values, k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

/// `alpha_bar[t]` for `t = 0..=T` plus the noise scale `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    alpha_bar: Vec<S>,
    k: S,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl<S: Scalar> NoiseSchedule<S> {
    pub fn new(steps: usize, kind: ScheduleKind, k: S) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one diffusion step".into()));
        }
        if !(k > S::zero()) {
            return Err(Error::Config(format!("simplex scale K must be positive, got {k}")));
        }
        let total = steps as f64;
        let alpha_bar: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0.0);
                (0..=steps).map(|t| f(t as f64) / f0).collect()
            }
            ScheduleKind::Linear => {
                // 1e-4..0.02 over 1000 steps, rescaled to T steps.
                let scale = 1000.0 / total;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                let mut acc = 1.0;
                let mut out = vec![1.0];
                for s in 1..=steps {
                    let frac = if steps == 1 {
                        1.0
                    } else {
                        (s - 1) as f64 / (total - 1.0)
                    };
                    let beta = (lo + (hi - lo) * frac).min(MAX_BETA);
                    acc *= 1.0 - beta;
                    out.push(acc);
                }
                out
            }
        };
        Ok(NoiseSchedule {
            alpha_bar: alpha_bar.into_iter().map(S::of).collect(),
            k,
        })
    }

    pub fn from_alpha_bar(alpha_bar: Vec<S>, k: S) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config("schedule needs at least one diffusion step".into()));
        }
        if alpha_bar.iter().any(|&a| !(a >= S::zero() && a <= S::one())) {
            return Err(Error::Config("alpha_bar entries must lie in [0, 1]".into()));
        }
        Ok(NoiseSchedule { alpha_bar, k })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn k(&self) -> S {
        self.k
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    /// Combine a signal with `N(0, K^2)` noise at level `t`.
    fn mix(&self, signal: &Array2<S>, t: usize, rng: &mut RngStream) -> Result<Array2<S>> {
        if t > self.steps() {
            return Err(Error::Domain(format!(
                "timestep {t} outside [0, {}]",
                self.steps()
            )));
        }
        let a = self.alpha_bar[t];
        let signal_coef = a.sqrt();
        let noise_coef = (S::one() - a).max(S::zero()).sqrt();
        let k = self.k;
        let mut out = signal.clone();
        out.mapv_inplace(|v| {
            let eps = k * rng.standard_normal::<S>();
            signal_coef * v + noise_coef * eps
        });
        Ok(out)
    }
}

/// Forward noising: `sqrt(a_t) * w0 + sqrt(1 - a_t) * eps`, `eps ~ N(0, K^2 I)`.
pub fn add_noise<S: Scalar>(
    w0: &SimplexLogits<S>,
    t: usize,
    schedule: &NoiseSchedule<S>,
    rng: &mut RngStream,
) -> Result<SimplexLogits<S>> {
    let values = schedule.mix(&w0.values, t, rng)?;
    Ok(SimplexLogits::new(values, w0.k))
}

/// Pure noise `N(0, K^2 I)` of the given shape.
pub fn sample_noise<S: Scalar>(rows: usize, vocab: usize, k: S, rng: &mut RngStream) -> SimplexLogits<S> {
    let values = Array2::from_shape_simple_fn((rows, vocab), || k * rng.standard_normal::<S>());
    SimplexLogits::new(values, k)
}

/// How predicted logits are snapped back to the base representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Argmax,
    Sample { temperature: f64 },
    TopP { p: f64, temperature: f64 },
}

impl Projection {
    pub fn validate(&self) -> Result<()> {
        let check_temp = |temperature: f64| {
            if temperature > 0.0 && temperature.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("temperature must be positive, got {temperature}")))
            }
        };
        match *self {
            Projection::Argmax => Ok(()),
            Projection::Sample { temperature } => check_temp(temperature),
            Projection::TopP { p, temperature } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::Config(format!("top-p mass must be in (0, 1], got {p}")));
                }
                check_temp(temperature)
            }
        }
    }

    /// Choose one token per row.
    pub fn choose<S: Scalar>(&self, logits: &Array2<S>, rng: &mut RngStream) -> Result<Vec<TokenId>> {
        self.validate()?;
        let mut out = Vec::with_capacity(logits.nrows());
        for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == S::infinity()) {
                return Err(Error::Domain(format!("row {i} contains non-finite logits")));
            }
            if row.iter().all(|v| *v == S::neg_infinity()) {
                return Err(Error::Domain(format!("row {i} has no finite logit")));
            }
            let id = match *self {
                Projection::Argmax => argmax_row(row),
                Projection::Sample { temperature } => {
                    let probs = softmax_f64(row, temperature);
                    sample_index(&probs, rng.unit())
                }
                Projection::TopP { p, temperature } => {
                    let probs = softmax_f64(row, temperature);
                    let mut order: Vec<usize> = (0..probs.len()).collect();
                    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
                    let mut kept = Vec::new();
                    let mut mass = 0.0;
                    for &idx in &order {
                        kept.push(idx);
                        mass += probs[idx];
                        if mass >= p {
                            break;
                        }
                    }
                    let nucleus: Vec<f64> = kept.iter().map(|&idx| probs[idx]).collect();
                    kept[sample_index(&nucleus, rng.unit())]
                }
            };
            out.push(id as TokenId);
        }
        Ok(out)
    }
}

fn softmax_f64<S: Scalar>(row: ArrayView1<'_, S>, temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Inverse-CDF draw from unnormalized weights.
fn sample_index(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut dart = u * total;
    for (i, &w) in weights.iter().enumerate() {
        if dart < w {
            return i;
        }
        dart -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Project logits to the base `±K` representation.
pub fn logits_projection<S: Scalar>(
    logits: &Array2<S>,
    mode: &Projection,
    k: S,
    rng: &mut RngStream,
) -> Result<SimplexLogits<S>> {
    let ids = mode.choose(logits, rng)?;
    logits_initialization(&ids, logits.ncols(), k)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;
    use crate::rng::{RngStream, NOISE, PROJECTION};

    #[test]
    fn initialization_places_plus_k_at_token() {
        let w = logits_initialization::<f64>(&[2], 4, 5.0).unwrap();
        assert_eq!(w.values, array![[-5.0, -5.0, 5.0, -5.0]]);
        let empty = logits_initialization::<f64>(&[], 4, 5.0).unwrap();
        assert_eq!(empty.values.dim(), (0, 4));
        let w = logits_initialization::<f32>(&[0, 3], 4, 5.0).unwrap();
        assert_eq!(w.argmax(), vec![0, 3]);
    }

    #[test]
    fn initialization_rejects_out_of_range_ids() {
        let err = logits_initialization::<f32>(&[4], 4, 5.0).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn add_noise_at_zero_is_identity() {
        let schedule = NoiseSchedule::<f64>::new(50, ScheduleKind::Cosine, 5.0).unwrap();
        let w0 = logits_initialization(&[1, 0, 2], 3, 5.0).unwrap();
        let mut rng = RngStream::named(1, NOISE);
        let out = add_noise(&w0, 0, &schedule, &mut rng).unwrap();
        assert_eq!(out, w0);
    }

    #[test]
    fn add_noise_with_zero_signal_is_pure_scaled_noise() {
        let schedule = NoiseSchedule::<f64>::from_alpha_bar(vec![1.0, 0.0], 3.0).unwrap();
        let a = logits_initialization(&[1, 0], 3, 3.0).unwrap();
        let b = logits_initialization(&[2, 2], 3, 3.0).unwrap();
        let na = add_noise(&a, 1, &schedule, &mut RngStream::named(4, NOISE)).unwrap();
        let nb = add_noise(&b, 1, &schedule, &mut RngStream::named(4, NOISE)).unwrap();
        assert_eq!(na.values, nb.values);
        let mut rng = RngStream::named(4, NOISE);
        let expected = Array2::from_shape_simple_fn((2, 3), || 3.0 * rng.standard_normal::<f64>());
        assert_eq!(na.values, expected);
    }

    #[test]
    fn add_noise_is_reproducible_under_a_seed() {
        let schedule = NoiseSchedule::<f32>::new(100, ScheduleKind::Cosine, 5.0).unwrap();
        let w0 = logits_initialization(&[3, 1, 4, 1], 6, 5.0).unwrap();
        let a = add_noise(&w0, 50, &schedule, &mut RngStream::named(9, NOISE)).unwrap();
        let b = add_noise(&w0, 50, &schedule, &mut RngStream::named(9, NOISE)).unwrap();
        let bits = |x: &SimplexLogits<f32>| x.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn add_noise_rejects_out_of_range_timestep() {
        let schedule = NoiseSchedule::<f32>::new(10, ScheduleKind::Cosine, 5.0).unwrap();
        let w0 = logits_initialization(&[0], 2, 5.0).unwrap();
        let err = add_noise(&w0, 11, &schedule, &mut RngStream::named(0, NOISE)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn argmax_projection() {
        let logits = array![[0.1, 2.0, -1.0]];
        let mut rng = RngStream::named(0, PROJECTION);
        let w = logits_projection(&logits, &Projection::Argmax, 5.0, &mut rng).unwrap();
        assert_eq!(w.values, array![[-5.0, 5.0, -5.0]]);
    }

    #[test]
    fn projection_errors() {
        let mut rng = RngStream::named(0, PROJECTION);
        let bad = Projection::TopP { p: 0.0, temperature: 1.0 };
        let err = logits_projection(&array![[0.0f32, 1.0]], &bad, 5.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let dead = array![[f64::NEG_INFINITY, f64::NEG_INFINITY]];
        let err = logits_projection(&dead, &Projection::Argmax, 5.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn sampled_projection_matches_softmax_frequency() {
        let logits = array![[1.0f64.ln(), 3.0f64.ln()]];
        let mode = Projection::Sample { temperature: 1.0 };
        let mut rng = RngStream::named(2024, PROJECTION);
        let hits = (0..10_000)
            .filter(|_| mode.choose(&logits, &mut rng).unwrap()[0] == 1)
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((0.72..=0.78).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn schedule_endpoints() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::<f64>::new(1, kind, 5.0).unwrap();
            assert_eq!(s.alpha_bars().len(), 2);
            assert!((s.alpha_bar(0) - 1.0).abs() < 1e-9);
            assert!(s.alpha_bar(1) <= 0.01);
        }
        assert!(matches!(
            NoiseSchedule::<f64>::new(0, ScheduleKind::Cosine, 5.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cosine_schedule_values() {
        // Closed form cos^2(((t/T + s)/(1 + s)) * pi/2), normalized, s = 0.008.
        let s = NoiseSchedule::<f64>::new(4, ScheduleKind::Cosine, 5.0).unwrap();
        let expected = [1.0, 0.8470121613269047, 0.49384359044063775, 0.1442721023857358];
        for (t, e) in expected.iter().enumerate() {
            assert!((s.alpha_bar(t) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_schedule_midpoint() {
        // Product of (1 - beta_s), beta linear 0.01..2.0 clamped at 0.999, s = 1..5.
        let s = NoiseSchedule::<f64>::new(10, ScheduleKind::Linear, 5.0).unwrap();
        assert!((s.alpha_bar(5) - 0.014377689695473256).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn initialization_roundtrips_through_argmax(
            vocab in 1usize..40,
            raw in proptest::collection::vec(0u32..1000, 0..20),
            k in 0.1f64..20.0,
        ) {
            let ids: Vec<TokenId> = raw.iter().map(|r| r % vocab as u32).collect();
            let w = logits_initialization(&ids, vocab, k).unwrap();
            prop_assert!(w.is_base() || vocab == 1);
            prop_assert_eq!(w.argmax(), ids);
        }

        #[test]
        fn projection_always_yields_base_rows(
            rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 5), 1..6),
            seed in 0u64..1000,
            mode_ix in 0usize..3,
        ) {
            let logits = Array2::from_shape_vec((rows.len(), 5), rows.concat()).unwrap();
            let mode = [
                Projection::Argmax,
                Projection::Sample { temperature: 0.7 },
                Projection::TopP { p: 0.9, temperature: 1.0 },
            ][mode_ix];
            let mut rng = RngStream::named(seed, PROJECTION);
            let w = logits_projection(&logits, &mode, 5.0, &mut rng).unwrap();
            prop_assert!(w.is_base());
        }

        #[test]
        fn tiny_nucleus_equals_argmax(
            row in proptest::collection::vec(-10.0f64..10.0, 2..12),
            seed in 0u64..1000,
        ) {
            let logits = Array2::from_shape_vec((1, row.len()), row).unwrap();
            let mut rng = RngStream::named(seed, PROJECTION);
            let nucleus = Projection::TopP { p: 1e-9, temperature: 1.0 }.choose(&logits, &mut rng).unwrap();
            let greedy = Projection::Argmax.choose(&logits, &mut rng).unwrap();
            prop_assert_eq!(nucleus, greedy);
        }

        #[test]
        fn schedules_are_monotone(steps in 1usize..1500, linear in any::<bool>()) {
            let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::Cosine };
            let s = NoiseSchedule::<f64>::new(steps, kind, 5.0).unwrap();
            let a = s.alpha_bars();
            prop_assert!((a[0] - 1.0).abs() < 1e-9);
            prop_assert!(a[steps] >= 0.0 && a[steps] <= 0.01);
            for w in a.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
