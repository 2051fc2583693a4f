//! Small statistical helpers shared by the samplers' tests and the
//! synthetic generator.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson goodness-of-fit p-value of `observed` counts against the
/// category probabilities `expected` (normalized internally). Categories
/// with zero expected mass are ignored; a count on one of them yields 0.
pub fn chi_square_p_value(observed: &[usize], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len(), "category count mismatch");
    let total: usize = observed.iter().sum();
    let mass: f64 = expected.iter().sum();
    if total == 0 || mass <= 0.0 {
        return 1.0;
    }
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (&o, &e) in observed.iter().zip(expected) {
        let e = e / mass * total as f64;
        if e <= 0.0 {
            if o > 0 {
                return 0.0;
            }
            continue;
        }
        stat += (o as f64 - e).powi(2) / e;
        dof += 1;
    }
    if dof <= 1 {
        return 1.0;
    }
    let dist = ChiSquared::new((dof - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// Cramér's V association between two label vectors.
pub fn cramers_v(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0.0; ka * kb];
    let mut ra = vec![0.0; ka];
    let mut rb = vec![0.0; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1.0;
        ra[x] += 1.0;
        rb[y] += 1.0;
    }
    let nf = n as f64;
    let mut chi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let e = ra[i] * rb[j] / nf;
            if e > 0.0 {
                chi += (table[i * kb + j] - e).powi(2) / e;
            }
        }
    }
    let used_a = ra.iter().filter(|&&c| c > 0.0).count();
    let used_b = rb.iter().filter(|&&c| c > 0.0).count();
    let m = used_a.min(used_b);
    if m <= 1 {
        return 0.0;
    }
    (chi / (nf * (m - 1) as f64)).sqrt()
}
