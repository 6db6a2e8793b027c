//! Actively-odd-parity pairing of the raw key strings.
//!
//! Bob, the active side, randomly pairs each of his 0-bits with one of
//! his 1-bits; surplus bits of the majority value are discarded. A pair
//! survives when Alice's two bits also have odd parity, and each survived
//! pair contributes one bit per side, taken at the pair's first (lower)
//! raw-key index. Error pairs require both constituent events to be
//! errors, which is what suppresses the bit error rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AoppError {
    #[error("key is all-{0}; no odd-parity pairs can be formed")]
    DegenerateKey(u8),
    #[error("pairing index {0} out of range or reused")]
    PairingMismatch(usize),
}

/// Index pairs over Bob's raw key, each pairing a 0-bit with a 1-bit.
pub type Pairing = Vec<(usize, usize)>;

/// Result of applying the pairing to both raw keys.
#[derive(Debug, Clone)]
pub struct AoppResult {
    pub pairing: Pairing,
    pub survived_indices: Vec<usize>,
    pub key_a: Vec<bool>,
    pub key_b: Vec<bool>,
    pub pairs_formed: usize,
    pub pairs_survived: usize,
    pub qber_after: f64,
}

/// Randomly match Bob's 0-bits with his 1-bits; `pairs_formed =
/// min(#0, #1)` and the surplus is left unmatched. Deterministic under
/// the seed. Pairs are normalized to (lower index, higher index) and
/// listed in raw-key order of their first element.
pub fn pair_odd_parity(key_b: &[bool], seed: u64) -> Result<Pairing, AoppError> {
    let mut zeros: Vec<usize> = Vec::new();
    let mut ones: Vec<usize> = Vec::new();
    for (i, &bit) in key_b.iter().enumerate() {
        if bit {
            ones.push(i);
        } else {
            zeros.push(i);
        }
    }
    if zeros.is_empty() {
        return Err(AoppError::DegenerateKey(1));
    }
    if ones.is_empty() {
        return Err(AoppError::DegenerateKey(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    zeros.shuffle(&mut rng);
    ones.shuffle(&mut rng);
    let mut pairing: Pairing = zeros
        .iter()
        .zip(ones.iter())
        .map(|(&i, &j)| (i.min(j), i.max(j)))
        .collect();
    pairing.sort_unstable();
    Ok(pairing)
}

/// Keep the pairs whose parity is odd on Alice's side as well, and emit
/// one survived bit per pair from each key.
pub fn apply_aopp(
    key_a: &[bool],
    key_b: &[bool],
    pairing: &Pairing,
) -> Result<AoppResult, AoppError> {
    assert_eq!(key_a.len(), key_b.len(), "raw keys must be aligned");
    let mut used = vec![false; key_b.len()];
    for &(i, j) in pairing {
        for idx in [i, j] {
            if idx >= key_b.len() || used[idx] {
                return Err(AoppError::PairingMismatch(idx));
            }
            used[idx] = true;
        }
        if key_b[i] == key_b[j] {
            return Err(AoppError::PairingMismatch(j));
        }
    }

    let mut survived_indices = Vec::new();
    let mut out_a = Vec::new();
    let mut out_b = Vec::new();
    let mut errors = 0usize;
    for &(i, j) in pairing {
        if key_a[i] == key_a[j] {
            continue; // even parity on Alice's side
        }
        survived_indices.push(i);
        out_a.push(key_a[i]);
        out_b.push(key_b[i]);
        if key_a[i] != key_b[i] {
            errors += 1;
        }
    }
    let pairs_survived = survived_indices.len();
    Ok(AoppResult {
        pairing: pairing.clone(),
        survived_indices,
        qber_after: if pairs_survived > 0 {
            errors as f64 / pairs_survived as f64
        } else {
            0.0
        },
        key_a: out_a,
        key_b: out_b,
        pairs_formed: pairing.len(),
        pairs_survived,
    })
}

/// Convenience wrapper: pair on Bob's key, then filter on Alice's parity.
pub fn run_aopp(key_a: &[bool], key_b: &[bool], seed: u64) -> Result<AoppResult, AoppError> {
    let pairing = pair_odd_parity(key_b, seed)?;
    apply_aopp(key_a, key_b, &pairing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn two_bit_key_forms_one_pair() {
        let pairing = pair_odd_parity(&[false, true], 1).unwrap();
        assert_eq!(pairing, vec![(0, 1)]);
    }

    #[test]
    fn all_zero_key_degenerate() {
        let err = pair_odd_parity(&[false, false, false, false], 1).unwrap_err();
        assert_eq!(err, AoppError::DegenerateKey(0));
        let err = pair_odd_parity(&[true, true], 1).unwrap_err();
        assert_eq!(err, AoppError::DegenerateKey(1));
    }

    #[test]
    fn surplus_bits_left_unmatched() {
        let mut key = vec![false; 300];
        key.extend(vec![true; 200]);
        let pairing = pair_odd_parity(&key, 5).unwrap();
        assert_eq!(pairing.len(), 200);
        let mut used = vec![false; key.len()];
        let mut unmatched_zeros = 300i64;
        for (i, j) in pairing {
            assert_ne!(key[i], key[j], "pairs mix a 0-bit and a 1-bit");
            assert!(!used[i] && !used[j]);
            used[i] = true;
            used[j] = true;
            unmatched_zeros -= 1;
        }
        assert_eq!(unmatched_zeros, 100);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let key_b: Vec<bool> = (0..1000).map(|_| rng.gen::<bool>()).collect();
        let key_a: Vec<bool> = key_b.iter().map(|&b| !b).collect();
        let r1 = run_aopp(&key_a, &key_b, 77).unwrap();
        let r2 = run_aopp(&key_a, &key_b, 77).unwrap();
        assert_eq!(r1.pairing, r2.pairing);
        assert_eq!(r1.key_a, r2.key_a);
        assert_eq!(r1.key_b, r2.key_b);
    }

    #[test]
    fn error_free_keys_survive_iff_alice_parity_odd_and_stay_error_free() {
        // Correct events agree, so an error-free raw key has a == b and
        // every Bob pair has odd Alice parity: everything survives.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let key_b: Vec<bool> = (0..500).map(|_| rng.gen::<bool>()).collect();
        let key_a = key_b.clone();
        let result = run_aopp(&key_a, &key_b, 9).unwrap();
        assert_eq!(result.pairs_survived, result.pairs_formed);
        assert_eq!(result.qber_after, 0.0);
    }

    #[test]
    fn parity_invariants_on_random_keys() {
        // Both-side odd parity on every survived pair, exhaustively.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..10_000 {
            let n = 2 + (rng.gen::<usize>() % 40);
            let key_b: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            let key_a: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            let Ok(pairing) = pair_odd_parity(&key_b, trial) else {
                continue;
            };
            let result = apply_aopp(&key_a, &key_b, &pairing).unwrap();
            assert!(result.pairs_survived <= result.pairs_formed);
            let n0 = key_b.iter().filter(|&&b| !b).count();
            assert_eq!(result.pairs_formed, n0.min(n - n0));
            let survived: std::collections::HashSet<usize> =
                result.survived_indices.iter().copied().collect();
            for &(i, j) in &result.pairing {
                assert_ne!(key_b[i], key_b[j]);
                if survived.contains(&i.min(j)) {
                    assert_ne!(key_a[i], key_a[j], "survived pair must be odd on Alice");
                }
            }
        }
    }

    #[test]
    fn pairing_mismatch_detected() {
        let key_a = vec![false, true, false, true];
        let key_b = vec![false, true, false, true];
        assert_eq!(
            apply_aopp(&key_a, &key_b, &vec![(0, 9)]).unwrap_err(),
            AoppError::PairingMismatch(9)
        );
        assert_eq!(
            apply_aopp(&key_a, &key_b, &vec![(0, 1), (1, 2)]).unwrap_err(),
            AoppError::PairingMismatch(1)
        );
    }

    #[test]
    fn suppresses_errors_on_anticorrelated_noise() {
        // Plant a small symmetric error rate and check the survived
        // error rate collapses quadratically.
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let n = 200_000;
        let flip = 0.02;
        let key_b: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
        let key_a: Vec<bool> = key_b
            .iter()
            .map(|&b| if rng.gen::<f64>() < flip { !b } else { b })
            .collect();
        let result = run_aopp(&key_a, &key_b, 31).unwrap();
        let before = flip;
        assert!(
            result.qber_after < before / 10.0,
            "qber after pairing = {}",
            result.qber_after
        );
    }
}
