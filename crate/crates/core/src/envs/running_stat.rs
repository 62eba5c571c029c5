//! Streaming mean/variance accumulator (Welford) for observation
//! normalization.

/// One-pass mean and M2 (sum of squared deviations) per observation
/// coordinate. Sample variance is `m2 / (count - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStat {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningStat {
    pub fn new(dim: usize) -> Self {
        RunningStat {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, obs: &[f64]) {
        debug_assert_eq!(obs.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for i in 0..self.mean.len() {
            let delta = obs[i] - self.mean[i];
            self.mean[i] += delta / n;
            let delta2 = obs[i] - self.mean[i];
            self.m2[i] += delta * delta2;
        }
    }

    /// Sample variance per coordinate; zero until two samples are seen.
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        let denom = (self.count - 1) as f64;
        self.m2.iter().map(|&v| v / denom).collect()
    }

    /// `(obs - mean) / sqrt(var + 1e-8)`; identity while fewer than two
    /// samples have been observed.
    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        if self.count < 2 {
            return obs.to_vec();
        }
        let denom = (self.count - 1) as f64;
        obs.iter()
            .enumerate()
            .map(|(i, &x)| (x - self.mean[i]) / (self.m2[i] / denom + 1e-8).sqrt())
            .collect()
    }
}
