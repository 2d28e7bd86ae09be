use crate::error::{Error, Result};
use crate::rng::CountingRng;

/// Walker/Vose alias table for O(1) draws proportional to integer weights.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    pub fn new(weights: &[u64]) -> Result<Self> {
        let n = weights.len();
        let total: u128 = weights.iter().map(|&w| w as u128).sum();
        if n == 0 || total == 0 {
            return Err(Error::Config("frequency table is empty or all zero".into()));
        }
        let scale = n as f64 / total as f64;
        let mut prob: Vec<f64> = weights.iter().map(|&w| w as f64 * scale).collect();
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| prob[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l as u32;
            prob[l] -= 1.0 - prob[s];
            if prob[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
        }
        Ok(Self { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    /// One draw: the integer part of `u·n` picks the column and the fractional
    /// part decides between the column and its alias.
    #[inline]
    pub fn sample(&self, rng: &mut CountingRng) -> usize {
        let u = rng.unit() * self.prob.len() as f64;
        let i = (u as usize).min(self.prob.len() - 1);
        if u - (i as f64) < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }

    /// Probability mass the table assigns to each index (for testing).
    pub fn distribution(&self) -> Vec<f64> {
        let n = self.prob.len() as f64;
        let mut p = vec![0.0; self.prob.len()];
        for (i, (&pr, &a)) in self.prob.iter().zip(&self.alias).enumerate() {
            p[i] += pr / n;
            p[a as usize] += (1.0 - pr) / n;
        }
        p
    }
}
