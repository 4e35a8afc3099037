//! Exact counting and uniform sampling of the small combinatorial objects the
//! tree laws are built from: binomial coefficients, compositions of an
//! integer into nonnegative parts, and interleaving words.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

/// Exact binomial coefficient C(n, k).
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// `binomial` narrowed to u128; panics on overflow (callers stay far below).
pub fn binomial_u128(n: u64, k: u64) -> u128 {
    binomial(n, k).to_u128().expect("binomial exceeds u128")
}

/// Number of admissible label-increment vectors around a type-3 node with
/// `k` type-1 and `kp` type-2 children: compositions of k+1 into k+kp+1
/// nonnegative parts, i.e. C(2k+kp+1, k+1).
pub fn type3_vector_count(k: u64, kp: u64) -> BigUint {
    binomial(2 * k + kp + 1, k + 1)
}

/// Same for a type-4 node: compositions of k into k+kp+1 parts,
/// i.e. C(2k+kp, k).
pub fn type4_vector_count(k: u64, kp: u64) -> BigUint {
    binomial(2 * k + kp, k)
}

/// All compositions of `total` into `parts` nonnegative integers, in
/// lexicographic order. Intended for oracle-scale inputs only.
pub fn enumerate_compositions(total: u32, parts: u32) -> Vec<Vec<u32>> {
    assert!(parts >= 1);
    let mut out = Vec::new();
    let mut cur = vec![0u32; parts as usize];
    fn rec(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, idx: usize, left: u32) {
        if idx + 1 == cur.len() {
            cur[idx] = left;
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[idx] = v;
            rec(out, cur, idx + 1, left - v);
        }
    }
    rec(&mut out, &mut cur, 0, total);
    out
}

/// Draws a uniform composition of `total` into `parts` nonnegative integers,
/// appending the parts to `out`.
///
/// Stars-and-bars: a uniform (parts-1)-subset of {1, ..., total+parts-1}
/// marks the bar positions. The subset is drawn by Floyd's algorithm so the
/// cost is O(parts log parts) regardless of `total`.
pub fn sample_composition<R: Rng + ?Sized>(total: u32, parts: u32, rng: &mut R, out: &mut Vec<u32>) {
    debug_assert!(parts >= 1);
    if parts == 1 {
        out.push(total);
        return;
    }
    let n = (total + parts - 1) as u64;
    let k = (parts - 1) as u64;
    // Floyd's uniform k-subset of 1..=n.
    let mut bars: Vec<u64> = Vec::with_capacity(k as usize);
    for j in (n - k + 1)..=n {
        let t = rng.gen_range(1..=j);
        if bars.contains(&t) {
            bars.push(j);
        } else {
            bars.push(t);
        }
    }
    bars.sort_unstable();
    // parts are the gaps: before the first bar, between bars, after the last
    let mut prev = 0u64;
    for &b in &bars {
        out.push((b - prev - 1) as u32);
        prev = b;
    }
    out.push((n - prev) as u32);
}

/// Draws a uniform interleaving word with `k` ones and `kp` twos, appending
/// letters (1 or 2) to `out`. Sequential urn draw: each prefix position takes
/// a 1 with probability (remaining ones)/(remaining letters).
pub fn sample_interleaving<R: Rng + ?Sized>(k: u32, kp: u32, rng: &mut R, out: &mut Vec<u8>) {
    let mut ones = k;
    let mut twos = kp;
    while ones + twos > 0 {
        if ones > 0 && (twos == 0 || rng.gen_range(0..(ones + twos)) < ones) {
            out.push(1);
            ones -= 1;
        } else {
            out.push(2);
            twos -= 1;
        }
    }
}

/// All interleavings of `k` ones and `kp` twos, lexicographic.
pub fn enumerate_interleavings(k: u32, kp: u32) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, ones: u32, twos: u32) {
        if ones == 0 && twos == 0 {
            out.push(cur.clone());
            return;
        }
        if ones > 0 {
            cur.push(1);
            rec(out, cur, ones - 1, twos);
            cur.pop();
        }
        if twos > 0 {
            cur.push(2);
            rec(out, cur, ones, twos - 1);
            cur.pop();
        }
    }
    rec(&mut out, &mut cur, k, kp);
    out
}
