//! Unbiased pass@k from `n` samples with `c` correct.

use crate::error::{OpdError, Result};

/// `C(n, k)` as `u128`; `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiplication
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// `1 - C(n - c, k) / C(n, k)` as an exact fraction `(numerator, denominator)`.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<(u128, u128)> {
    if k == 0 || k > n {
        return Err(OpdError::PassAtK {
            k: k as usize,
            n: n as usize,
        });
    }
    if c > n {
        return Err(OpdError::InvalidConfig(format!("{c} correct out of {n} samples")));
    }
    let overflow = || OpdError::InvalidConfig(format!("C({n}, {k}) overflows"));
    let total = binomial(n, k).ok_or_else(overflow)?;
    let failing = binomial(n - c, k).ok_or_else(overflow)?;
    Ok((total - failing, total))
}

pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if k == 0 || k > n {
        return Err(OpdError::PassAtK {
            k: k as usize,
            n: n as usize,
        });
    }
    if c > n {
        return Err(OpdError::InvalidConfig(format!("{c} correct out of {n} samples")));
    }
    match pass_at_k_exact(n, c, k) {
        Ok((num, den)) => Ok(num as f64 / den as f64),
        // product form stays finite for any n
        Err(_) => {
            if n - c < k {
                return Ok(1.0);
            }
            let fail: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
            Ok(1.0 - fail)
        }
    }
}

/// Mean pass@k over per-prompt correct counts, each from `n` samples.
pub fn mean_pass_at_k(n: u64, correct_counts: &[u64], k: u64) -> Result<f64> {
    if correct_counts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in correct_counts {
        total += pass_at_k(n, c, k)?;
    }
    Ok(total / correct_counts.len() as f64)
}
