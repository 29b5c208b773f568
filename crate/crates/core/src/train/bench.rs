use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::analysis::count_flops;
use crate::arch::ExecutableNet;
use crate::tensor::{Shape4, Tensor4};
use crate::Scalar;

/// Wall-clock forward latency in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub input: (usize, usize),
    pub repetitions: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
    pub macs: u64,
    pub macs_per_second: f64,
    pub samples: Vec<f64>,
}

impl BenchStats {
    pub fn from_samples(input: (usize, usize), macs: u64, samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        Self {
            input,
            repetitions: samples.len(),
            mean,
            median,
            stddev: var.sqrt(),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            macs,
            macs_per_second: if mean > 0.0 { macs as f64 / mean } else { 0.0 },
            samples,
        }
    }
}

/// Times `repetitions` single-image eval forwards after one warm-up pass.
pub fn bench_forward<T: Scalar>(
    net: &mut ExecutableNet<T>,
    input: (usize, usize),
    repetitions: usize,
) -> Result<BenchStats, TrainError> {
    if repetitions == 0 {
        return Err(TrainError::Config("repetitions must be at least 1".into()));
    }
    let (h, w) = input;
    let macs = count_flops(net.graph(), h, w)?.total_macs;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor4::<T>::uniform(Shape4::new(1, 3, h, w), 0.0, 1.0, &mut rng);
    let cache = net.cache_outputs;
    net.cache_outputs = false;
    let result = (|| {
        net.predict(&x)?;
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            net.predict(&x)?;
            samples.push(t.elapsed().as_secs_f64());
        }
        Ok(samples)
    })();
    net.cache_outputs = cache;
    Ok(BenchStats::from_samples(input, macs, result.map_err(TrainError::Arch)?))
}
