use std::collections::BTreeSet;

use super::{Constant, Dimension};

fn prime_factors(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// All symbolic divisors of `d`.
///
/// Named constants are treated as mutually coprime primes and integer
/// literals are factored numerically. The only extra divisibility fact is
/// that `G` divides `C`, so `C` contributes the divisors `{1, G, C/G, C}`.
/// A divisor `f` is reported when both `f` and `d / f` are whole numbers
/// under those conventions; for a dimension whose denominator is empty this
/// includes every sub-multiset of the numerator.
pub fn enumerate_factors(d: &Dimension) -> BTreeSet<Dimension> {
    // (unit, multiplicity)
    let mut units: Vec<(Dimension, u32)> = Vec::new();
    let push = |units: &mut Vec<(Dimension, u32)>, unit: Dimension| match units
        .iter_mut()
        .find(|(u, _)| *u == unit)
    {
        Some(slot) => slot.1 += 1,
        None => units.push((unit, 1)),
    };
    let (num, _) = d.literal_part();
    for p in prime_factors(num) {
        push(&mut units, Dimension::literal(p));
    }
    for c in Constant::ALL {
        for _ in 0..d.exponent(c).max(0) {
            push(&mut units, Dimension::constant(c));
        }
    }
    for (v, e) in d.vars() {
        for _ in 0..e.max(0) {
            push(&mut units, Dimension::var(v));
        }
    }

    let c_count = d.exponent(Constant::C).max(0);
    let g_den = (-d.exponent(Constant::G)).max(0);
    let g = Dimension::constant(Constant::G);
    let g_shifts: Vec<Dimension> = (-(c_count + g_den)..=c_count)
        .filter_map(|e| g.raw_pow(e).ok())
        .collect();

    let mut out = BTreeSet::new();
    let mut counts = vec![0u32; units.len()];
    loop {
        let mut sub = Dimension::one();
        let mut ok = true;
        for ((unit, _), &k) in units.iter().zip(&counts) {
            for _ in 0..k {
                match sub.raw_mul(unit) {
                    Ok(next) => sub = next,
                    Err(_) => ok = false,
                }
            }
        }
        if ok {
            for shift in &g_shifts {
                let Ok(f) = sub.raw_mul(shift) else { continue };
                let Ok(rest) = d.raw_div(&f) else { continue };
                if f.is_integral() && f.is_legal() && rest.is_integral() {
                    out.insert(f);
                }
            }
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == units.len() {
                return out;
            }
            if counts[i] < units[i].1 {
                counts[i] += 1;
                break;
            }
            counts[i] = 0;
            i += 1;
        }
    }
}
