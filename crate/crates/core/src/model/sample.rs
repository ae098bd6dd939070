use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{argmax, Float};

/// Probabilities of `softmax(logits / temperature)` in f64. `temperature` must be positive.
pub fn tempered_probs<T: Float>(logits: &[T], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x.as_f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index drawn from an unnormalized non-negative weight vector.
pub fn sample_weights(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding left `u` past the last bucket; return the last non-zero weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Greedy argmax at temperature 0 (lowest index wins ties), otherwise a draw
/// from `softmax(logits / temperature)`.
pub fn sample<T: Float>(logits: &[T], temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(temperature >= 0.0) {
        return Err(Error::NegativeTemperature(temperature));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    Ok(sample_weights(&tempered_probs(logits, temperature), rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_argmax_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample(&[0.0f32, 5.0, 0.0], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(sample(&[2.0f32; 4], 0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn negative_temperature_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample(&[0.0f32, 1.0], -0.1, &mut rng),
            Err(Error::NegativeTemperature(_))
        ));
    }

    #[test]
    fn categorical_frequency_matches_softmax() {
        // softmax([0, ln 3]) = [0.25, 0.75]
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let logits = [0.0f32, 3f32.ln()];
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample(&logits, 1.0, &mut rng).unwrap() == 1)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.75).abs() <= 0.01, "{freq}");
    }
}
