//! Architecture logits and their Gumbel-softmax relaxation.
//!
//! Logits are stored unconstrained; they play the role of `log α` inside the
//! relaxed sample `softmax((log α + G) / λ)`.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::{softmax_rows, Tensor};

/// One `p x q` logit matrix per cell; each block is an independent leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    cells: Vec<Tensor>,
}

impl ArchParams {
    pub fn from_cells(cells: Vec<Tensor>) -> Result<Self> {
        let Some(first) = cells.first() else {
            return Err(invalid("architecture needs at least one cell"));
        };
        let shape = first.shape().to_vec();
        if shape.len() != 2 || cells.iter().any(|c| c.shape() != shape.as_slice()) {
            return Err(invalid("every cell block must share one p x q shape"));
        }
        Ok(Self { cells })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_edges(&self) -> usize {
        self.cells[0].rows()
    }

    pub fn num_ops(&self) -> usize {
        self.cells[0].cols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_cells(), self.num_edges(), self.num_ops())
    }

    pub fn num_params(&self) -> usize {
        self.cells.iter().map(Tensor::numel).sum()
    }

    pub fn cell(&self, k: usize) -> &Tensor {
        &self.cells[k]
    }

    pub fn cell_mut(&mut self, k: usize) -> &mut Tensor {
        &mut self.cells[k]
    }

    pub fn cells(&self) -> &[Tensor] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<Tensor> {
        self.cells
    }

    pub fn is_finite(&self) -> bool {
        self.cells.iter().all(Tensor::is_finite)
    }
}

/// Zero-mean normal logits with standard deviation `scale`.
pub fn init_arch_params(k: usize, p: usize, q: usize, scale: f64, seed: u64) -> Result<ArchParams> {
    if k == 0 || p == 0 || q == 0 {
        return Err(invalid(format!("dimensions must be positive, got ({k}, {p}, {q})")));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(invalid(format!("init scale must be finite and >= 0, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = (0..k)
        .map(|_| {
            if scale == 0.0 {
                Tensor::zeros(&[p, q])
            } else {
                Tensor::randn(&[p, q], scale, &mut rng)
            }
        })
        .collect();
    ArchParams::from_cells(cells)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Linear,
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub minimum: f64,
    pub total_steps: usize,
    pub shape: ScheduleShape,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            minimum: 0.03,
            total_steps: 1000,
            shape: ScheduleShape::Linear,
        }
    }
}

impl TemperatureSchedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.minimum > 0.0) {
            v.push(format!("temperature.minimum must be > 0, got {}", self.minimum));
        }
        if !(self.initial >= self.minimum) || !self.initial.is_finite() {
            v.push(format!(
                "temperature.initial ({}) must be finite and >= minimum ({})",
                self.initial, self.minimum
            ));
        }
        if self.total_steps == 0 {
            v.push("temperature.total_steps must be >= 1".into());
        }
        v
    }
}

/// Temperature at `step`, monotone from `initial` down to `minimum`.
pub fn temperature(step: usize, schedule: &TemperatureSchedule) -> Result<f64> {
    let t = schedule.total_steps;
    if step > t {
        return Err(invalid(format!("step {step} beyond schedule length {t}")));
    }
    if step == 0 {
        return Ok(schedule.initial);
    }
    if step == t {
        return Ok(schedule.minimum);
    }
    let frac = step as f64 / t as f64;
    let (a, b) = (schedule.initial, schedule.minimum);
    let value = match schedule.shape {
        ScheduleShape::Linear => a + (b - a) * frac,
        ScheduleShape::Exponential => a * (b / a).powf(frac),
    };
    Ok(value.max(b))
}

/// A relaxed one-hot sample for every edge of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub z: Tensor,
    pub noise: Tensor,
    pub temperature: f64,
}

/// Standard Gumbel noise `-log(-log U)` with `U` uniform on (0, 1).
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(&[rows, cols], data)
}

fn check_sample_args(logits: &[usize], temperature: f64, noise: &Tensor) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if noise.shape() != logits {
        return Err(invalid(format!(
            "noise shape {:?} does not match logits {:?}",
            noise.shape(),
            logits
        )));
    }
    if noise.data().iter().any(|v| v.is_nan()) {
        return Err(invalid("noise contains NaN"));
    }
    Ok(())
}

/// Differentiable relaxed sample on the tape: rows of
/// `softmax((logits + noise) / temperature)`.
pub fn gumbel_softmax(
    g: &mut Graph,
    logits: Var,
    noise: &Tensor,
    temperature: f64,
) -> Result<Var> {
    check_sample_args(g.shape(logits), temperature, noise)?;
    let perturbed = g.add_const(logits, noise);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    Ok(g.softmax_rows(scaled))
}

/// Value-level relaxed sample with explicit noise.
pub fn gumbel_sample(logits: &Tensor, temperature: f64, noise: &Tensor) -> Result<GumbelSample> {
    check_sample_args(logits.shape(), temperature, noise)?;
    let inv = 1.0 / temperature;
    let scaled: Vec<f64> = logits
        .data()
        .iter()
        .zip(noise.data())
        .map(|(l, n)| (l + n) * inv)
        .collect();
    let z = Tensor::new(logits.shape(), softmax_rows(&scaled, logits.cols()));
    Ok(GumbelSample {
        z,
        noise: noise.clone(),
        temperature,
    })
}

/// Independent noise for every edge of every cell, reproducible from `seed`.
pub fn sample_all(arch: &ArchParams, temperature: f64, seed: u64) -> Result<Vec<GumbelSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    arch.cells()
        .iter()
        .map(|a| {
            let noise = gumbel_noise(a.rows(), a.cols(), &mut rng);
            gumbel_sample(a, temperature, &noise)
        })
        .collect()
}

/// Softmax probabilities of each row, i.e. the Gumbel-max selection
/// probabilities of each operation.
pub fn op_probabilities(logits: &Tensor) -> Tensor {
    Tensor::new(logits.shape(), softmax_rows(logits.data(), logits.cols()))
}

/// Mean over edges of the entropy (nats) of the per-edge op distribution.
pub fn mean_entropy(cells: &[Tensor]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0;
    for a in cells {
        let p = op_probabilities(a);
        for r in 0..p.rows() {
            total -= p
                .row(r)
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|v| v * v.ln())
                .sum::<f64>();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(shape: ScheduleShape) -> TemperatureSchedule {
        TemperatureSchedule {
            initial: 1.0,
            minimum: 0.03,
            total_steps: 100,
            shape,
        }
    }

    #[test]
    fn zero_scale_gives_uniform_distributions() {
        let a = init_arch_params(3, 5, 8, 0.0, 1).unwrap();
        for c in a.cells() {
            let p = op_probabilities(c);
            assert!(p.data().iter().all(|v| (v - 0.125).abs() < 1e-15));
        }
    }

    #[test]
    fn default_search_space_has_560_logits() {
        let a = init_arch_params(14, 5, 8, 1e-3, 0).unwrap();
        assert_eq!(a.num_params(), 560);
        assert_eq!(a.shape(), (14, 5, 8));
    }

    #[test]
    fn init_is_seeded() {
        let a = init_arch_params(2, 5, 8, 0.1, 42).unwrap();
        let b = init_arch_params(2, 5, 8, 0.1, 42).unwrap();
        let c = init_arch_params(2, 5, 8, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(init_arch_params(0, 5, 8, 0.1, 0).is_err());
        assert!(init_arch_params(1, 5, 8, -1.0, 0).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let lin = sched(ScheduleShape::Linear);
        assert_eq!(temperature(0, &lin).unwrap(), 1.0);
        assert_eq!(temperature(100, &lin).unwrap(), 0.03);
        assert!((temperature(50, &lin).unwrap() - 0.515).abs() < 1e-12);
        assert!(temperature(101, &lin).is_err());
        let exp = sched(ScheduleShape::Exponential);
        assert_eq!(temperature(0, &exp).unwrap(), 1.0);
        assert_eq!(temperature(100, &exp).unwrap(), 0.03);
        assert!((temperature(50, &exp).unwrap() - 0.03f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn schedules_are_monotone_and_bounded() {
        for shape in [ScheduleShape::Linear, ScheduleShape::Exponential] {
            let s = sched(shape);
            let mut prev = f64::INFINITY;
            for t in 0..=100 {
                let l = temperature(t, &s).unwrap();
                assert!(l <= prev && l >= 0.03);
                prev = l;
            }
        }
    }

    #[test]
    fn closed_form_samples() {
        let logits = Tensor::from_rows(&[vec![2f64.ln(), 0.0]]);
        let s = gumbel_sample(&logits, 1.0, &Tensor::zeros(&[1, 2])).unwrap();
        assert!((s.z.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.z.data()[1] - 1.0 / 3.0).abs() < 1e-12);

        let noise = Tensor::from_rows(&[vec![0.3, -0.1, 0.7]]);
        let s = gumbel_sample(&Tensor::zeros(&[1, 3]), 1.0, &noise).unwrap();
        // softmax(0.3, -0.1, 0.7) evaluated independently
        let e: Vec<f64> = [0.3f64, -0.1, 0.7].iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        for (z, e) in s.z.data().iter().zip(&e) {
            assert!((z - e / total).abs() < 1e-12);
        }
        assert!((s.z.data()[0] - 0.3162).abs() < 5e-4);
        assert!((s.z.data()[1] - 0.2120).abs() < 5e-4);
        assert!((s.z.data()[2] - 0.4718).abs() < 5e-4);
    }

    #[test]
    fn low_temperature_approaches_argmax() {
        let logits = Tensor::from_rows(&[vec![0.5, 1.0, -0.2]]);
        let s = gumbel_sample(&logits, 1e-3, &Tensor::zeros(&[1, 3])).unwrap();
        assert!((s.z.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        let l = Tensor::zeros(&[2, 3]);
        assert!(gumbel_sample(&l, 0.0, &Tensor::zeros(&[2, 3])).is_err());
        assert!(gumbel_sample(&l, -1.0, &Tensor::zeros(&[2, 3])).is_err());
        assert!(gumbel_sample(&l, 1.0, &Tensor::full(&[2, 3], f64::NAN)).is_err());
        assert!(gumbel_sample(&l, 1.0, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn graph_and_value_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let noise = gumbel_noise(5, 8, &mut rng);
        let mut g = Graph::new();
        let v = g.leaf(logits.clone(), true);
        let z = gumbel_softmax(&mut g, v, &noise, 0.37).unwrap();
        let direct = gumbel_sample(&logits, 0.37, &noise).unwrap();
        assert!(g.value(z).max_abs_diff(&direct.z) < 1e-15);
    }

    #[test]
    fn sample_all_is_seeded_and_shaped() {
        let a = init_arch_params(2, 5, 8, 0.5, 3).unwrap();
        let s1 = sample_all(&a, 0.7, 11).unwrap();
        let s2 = sample_all(&a, 0.7, 11).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 2);
        assert!(s1.iter().all(|s| s.z.shape() == [5, 8]));
        assert_ne!(s1[0].noise, s1[1].noise);
    }

    #[test]
    fn entropy_bounds() {
        let uniform = vec![Tensor::zeros(&[5, 8])];
        assert!((mean_entropy(&uniform) - 8f64.ln()).abs() < 1e-12);
        let peaked = vec![Tensor::from_rows(&[vec![100.0, 0.0, 0.0]])];
        assert!(mean_entropy(&peaked) < 1e-30);
    }
}
