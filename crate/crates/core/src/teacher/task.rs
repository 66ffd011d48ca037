//! Conditional 2-D mixture tasks.
//!
//! Each condition admits a coarse region (a set of modes) and designates one
//! target mode inside it. The teacher only learns the coarse region; the
//! reward asks for the target, which leaves room for reinforcement.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::NoiseStream;
use crate::numerics::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Eight modes on a circle in four close pairs; one pair per condition.
    Ring8,
    /// Two arcs of four modes each; one arc per condition.
    TwoMoons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Ring radius (ring8) or arc radius (two_moons).
    pub radius: f64,
    pub mode_std: f64,
    /// Distance between the two modes of a ring8 pair.
    pub pair_gap: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Ring8,
            radius: 2.0,
            mode_std: 0.05,
            pair_gap: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    mode_centers: Vec<[f64; 2]>,
    mode_std: f64,
    regions: Vec<Vec<usize>>,
    targets: Vec<usize>,
}

impl ToyTask {
    pub fn from_config(cfg: &TaskConfig) -> Result<Self> {
        if !(cfg.radius > 0.0) {
            return Err(Error::Config(format!(
                "task radius must be positive, got {}",
                cfg.radius
            )));
        }
        match cfg.kind {
            TaskKind::Ring8 => Self::ring8(cfg.radius, cfg.mode_std, cfg.pair_gap),
            TaskKind::TwoMoons => Self::two_moons(cfg.radius, cfg.mode_std),
        }
    }

    /// Pairs centred at angles `π/4 + c·π/2`; the pair's modes sit
    /// `pair_gap` apart along the circle. Condition `c` owns modes
    /// `{2c, 2c+1}` and targets `2c`.
    pub fn ring8(radius: f64, mode_std: f64, pair_gap: f64) -> Result<Self> {
        if !(pair_gap > 0.0 && pair_gap < 2.0 * radius * (PI / 4.0).sin()) {
            return Err(Error::Config(format!(
                "pair_gap {pair_gap} must be in (0, {})",
                2.0 * radius * (PI / 4.0).sin()
            )));
        }
        let half = (pair_gap / (2.0 * radius)).asin();
        let mut centers = Vec::with_capacity(8);
        for c in 0..4 {
            let mid = PI / 4.0 + c as f64 * PI / 2.0;
            for a in [mid - half, mid + half] {
                centers.push([radius * a.cos(), radius * a.sin()]);
            }
        }
        let regions = (0..4).map(|c| vec![2 * c, 2 * c + 1]).collect();
        let targets = (0..4).map(|c| 2 * c).collect();
        Self::custom(centers, mode_std, regions, targets)
    }

    /// Upper arc `(cos θ, sin θ)` and lower arc `(1 − cos θ, ½ − sin θ)`,
    /// scaled by `radius`, four modes each. Each arc targets its first mode.
    pub fn two_moons(radius: f64, mode_std: f64) -> Result<Self> {
        let mut centers = Vec::with_capacity(8);
        for i in 0..4 {
            let th = PI * (i as f64 + 0.5) / 4.0;
            centers.push([radius * th.cos(), radius * th.sin()]);
        }
        for i in 0..4 {
            let th = PI * (i as f64 + 0.5) / 4.0;
            centers.push([radius * (1.0 - th.cos()), radius * (0.5 - th.sin())]);
        }
        Self::custom(
            centers,
            mode_std,
            vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
            vec![0, 4],
        )
    }

    /// Arbitrary task. Every mode must belong to exactly one region and each
    /// target must lie in its own region.
    pub fn custom(
        mode_centers: Vec<[f64; 2]>,
        mode_std: f64,
        regions: Vec<Vec<usize>>,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if !(mode_std > 0.0 && mode_std.is_finite()) {
            return Err(Error::Config(format!(
                "mode_std must be positive, got {mode_std}"
            )));
        }
        if regions.is_empty() || regions.len() != targets.len() {
            return Err(Error::Config(
                "need one target per nonempty region list".into(),
            ));
        }
        let mut owner = vec![None; mode_centers.len()];
        for (c, region) in regions.iter().enumerate() {
            if region.is_empty() {
                return Err(Error::Config(format!("condition {c} has no modes")));
            }
            for &m in region {
                match owner.get_mut(m) {
                    Some(slot @ None) => *slot = Some(c),
                    Some(Some(_)) => {
                        return Err(Error::Config(format!("mode {m} belongs to two regions")))
                    }
                    None => return Err(Error::Config(format!("mode {m} does not exist"))),
                }
            }
            if !region.contains(&targets[c]) {
                return Err(Error::Config(format!(
                    "target of condition {c} outside its region"
                )));
            }
        }
        if owner.iter().any(Option::is_none) {
            return Err(Error::Config("every mode must belong to a region".into()));
        }
        Ok(ToyTask {
            mode_centers,
            mode_std,
            regions,
            targets,
        })
    }

    pub fn num_conditions(&self) -> usize {
        self.regions.len()
    }

    pub fn mode_centers(&self) -> &[[f64; 2]] {
        &self.mode_centers
    }

    pub fn mode_std(&self) -> f64 {
        self.mode_std
    }

    pub fn region(&self, c: usize) -> &[usize] {
        &self.regions[c]
    }

    pub fn target_mode(&self, c: usize) -> usize {
        self.targets[c]
    }

    pub fn target_center(&self, c: usize) -> [f64; 2] {
        self.mode_centers[self.targets[c]]
    }

    fn check_condition(&self, c: usize) -> Result<()> {
        if c >= self.regions.len() {
            return Err(Error::invalid(format!(
                "unknown condition {c} ({} conditions)",
                self.regions.len()
            )));
        }
        Ok(())
    }

    /// Root-mean-square coordinate of the data under uniform conditions.
    pub fn sigma_data(&self) -> f64 {
        let mut acc = 0.0;
        for region in &self.regions {
            let r: f64 = region
                .iter()
                .map(|&m| {
                    let [a, b] = self.mode_centers[m];
                    (a * a + b * b) / 2.0
                })
                .sum::<f64>()
                / region.len() as f64;
            acc += r + self.mode_std * self.mode_std;
        }
        (acc / self.regions.len() as f64).sqrt()
    }

    /// `n` draws for condition `c`, modes of the region equally weighted.
    pub fn sample(&self, c: usize, n: usize, noise: &mut NoiseStream) -> Result<Matrix> {
        let mut out = Matrix::zeros(n, 2);
        self.fill_rows(&mut out, &vec![c; n], noise)?;
        Ok(out)
    }

    /// One draw per entry of `conditions`.
    pub fn sample_conditions(
        &self,
        conditions: &[usize],
        noise: &mut NoiseStream,
    ) -> Result<Matrix> {
        let mut out = Matrix::zeros(conditions.len(), 2);
        self.fill_rows(&mut out, conditions, noise)?;
        Ok(out)
    }

    fn fill_rows(
        &self,
        out: &mut Matrix,
        conditions: &[usize],
        noise: &mut NoiseStream,
    ) -> Result<()> {
        for (r, &c) in conditions.iter().enumerate() {
            self.check_condition(c)?;
            let region = &self.regions[c];
            let m = region[noise.index(region.len())];
            let [cx, cy] = self.mode_centers[m];
            let row = out.row_mut(r);
            row[0] = cx + self.mode_std * noise.normal();
            row[1] = cy + self.mode_std * noise.normal();
        }
        Ok(())
    }

    /// Index of the nearest mode centre.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, [a, b]) in self.mode_centers.iter().enumerate() {
            let d = (x[0] - a).powi(2) + (x[1] - b).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Closed-ball membership: `‖x − centre(mode)‖ ≤ 3·mode_std`.
    pub fn within_mode(&self, x: &[f64], mode: usize) -> bool {
        let [a, b] = self.mode_centers[mode];
        let r = 3.0 * self.mode_std;
        (x[0] - a).powi(2) + (x[1] - b).powi(2) <= r * r
    }

    /// Whether `x` lies within 3·mode_std of some mode of `c`'s region.
    pub fn in_region(&self, x: &[f64], c: usize) -> bool {
        self.regions[c].iter().any(|&m| self.within_mode(x, m))
    }
}
