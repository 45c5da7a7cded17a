//! Packet volumes, surrogate accuracy curves and the two offloading
//! subproblems (residual quantisation and model-update size).

use serde::{Deserialize, Serialize};

use crate::constellation::NodeId;
use crate::error::{Constraint, Error, Result};

/// One remote sensing satellite's sensing workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingTask {
    pub source: NodeId,
    pub frames: f64,
    pub pixels_per_frame: f64,
    pub bits_per_pixel: f64,
    /// F_p, average feature volume per frame in bits.
    pub feature_bits_per_frame: f64,
    /// V, cycles per image bit for feature extraction.
    pub cycles_per_bit: f64,
    /// Small-model operations per frame.
    pub small_ops: f64,
    /// Large-model operations per frame.
    pub large_ops: f64,
}

impl SensingTask {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("frames", self.frames),
            ("pixels_per_frame", self.pixels_per_frame),
            ("bits_per_pixel", self.bits_per_pixel),
            ("feature_bits_per_frame", self.feature_bits_per_frame),
            ("cycles_per_bit", self.cycles_per_bit),
            ("small_ops", self.small_ops),
            ("large_ops", self.large_ops),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("task {}: {name} must be positive", self.source)));
            }
        }
        if self.large_ops <= self.small_ops {
            return Err(Error::config(format!(
                "task {}: large_ops must exceed small_ops",
                self.source
            )));
        }
        Ok(())
    }
}

/// Offloading decision for one task. `beta` always equals `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadPlan {
    pub alpha: f64,
    pub beta: f64,
    /// Uniform residual quantisation, bits per pixel.
    pub q_bar: f64,
    /// Model-update packet size in bits.
    pub model_bits: f64,
}

impl OffloadPlan {
    pub fn new(alpha: f64, q_bar: f64, model_bits: f64) -> Self {
        OffloadPlan { alpha, beta: alpha, q_bar, model_bits }
    }
}

/// Saturating-exponential stand-ins for the fitted accuracy curves g and h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSurrogate {
    pub large_max: f64,
    pub kappa_beta: f64,
    pub kappa_q: f64,
    pub small_base: f64,
    pub small_max: f64,
    pub kappa_m: f64,
    pub map_min: f64,
    pub model_bits_min: f64,
    pub model_bits_max: f64,
    /// Admissible residual quantisation levels, sorted ascending.
    pub omega: Vec<f64>,
}

impl Default for MapSurrogate {
    fn default() -> Self {
        // placeholder coefficients; override in the [workload] section
        Self {
            large_max: 0.9,
            kappa_beta: 5.0,
            kappa_q: 5.0,
            small_base: 0.6,
            small_max: 0.85,
            kappa_m: 3.0,
            map_min: 0.8,
            model_bits_min: 1e6,
            model_bits_max: 1e8,
            omega: vec![0.25, 0.40, 0.55, 0.70, 1.0],
        }
    }
}

fn saturate(kappa: f64, x: f64) -> f64 {
    if kappa == 0.0 {
        x
    } else {
        -(-kappa * x).exp_m1()
    }
}

impl MapSurrogate {
    pub fn validate(&self) -> Result<()> {
        if self.omega.is_empty() {
            return Err(Error::config("workload.omega must not be empty"));
        }
        if self.omega.windows(2).any(|w| w[0] >= w[1]) || self.omega[0] < 0.0 {
            return Err(Error::config("workload.omega must be non-negative and strictly ascending"));
        }
        if !(self.model_bits_min < self.model_bits_max) || self.model_bits_min < 0.0 {
            return Err(Error::config("workload.model_bits_min must be below model_bits_max"));
        }
        if !(self.kappa_beta > 0.0 && self.kappa_q > 0.0 && self.kappa_m > 0.0) {
            return Err(Error::config("surrogate rate coefficients must be positive"));
        }
        for (name, v) in [
            ("large_max", self.large_max),
            ("small_base", self.small_base),
            ("small_max", self.small_max),
            ("map_min", self.map_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("workload.{name} must lie in [0, 1]")));
            }
        }
        if self.small_base > self.small_max {
            return Err(Error::config("workload.small_base must not exceed small_max"));
        }
        Ok(())
    }

    pub fn q_max(&self) -> f64 {
        *self.omega.last().expect("omega validated non-empty")
    }

    /// g(β, q̄): large-model mAP on offloaded frames.
    pub fn map_large(&self, beta: f64, q_bar: f64) -> f64 {
        let b = saturate(self.kappa_beta, beta) / saturate(self.kappa_beta, 1.0);
        let q = saturate(self.kappa_q, q_bar) / saturate(self.kappa_q, self.q_max());
        (self.large_max * b * q).clamp(0.0, 1.0)
    }

    /// h(D_m): small-model mAP after receiving a `model_bits` update.
    pub fn map_small(&self, model_bits: f64) -> Result<f64> {
        let (lo, hi) = (self.model_bits_min, self.model_bits_max);
        if !(lo..=hi).contains(&model_bits) {
            return Err(Error::Domain { value: model_bits, lo, hi });
        }
        let x = (model_bits - lo) / (hi - lo);
        let frac = saturate(self.kappa_m, x) / saturate(self.kappa_m, 1.0);
        Ok(self.small_base + (self.small_max - self.small_base) * frac)
    }
}

/// D_img = b·f·p.
pub fn image_volume(task: &SensingTask) -> f64 {
    task.bits_per_pixel * task.frames * task.pixels_per_frame
}

/// D_f = α·f·F_p.
pub fn feature_volume(task: &SensingTask, plan: &OffloadPlan) -> f64 {
    plan.alpha * task.frames * task.feature_bits_per_frame
}

/// D_res = β·f·p·q̄ (uniform quantisation over the residual frames).
pub fn residual_volume(task: &SensingTask, plan: &OffloadPlan) -> f64 {
    plan.beta * task.frames * task.pixels_per_frame * plan.q_bar
}

/// D_d = D_f + D_res.
pub fn data_packet_size(task: &SensingTask, plan: &OffloadPlan) -> f64 {
    feature_volume(task, plan) + residual_volume(task, plan)
}

/// Residual quantisation and data-packet size for a given allocation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPacketDesign {
    pub q_bar: f64,
    pub data_bits: f64,
}

/// Smallest q̄ in Ω meeting the large-model accuracy floor at β = α. D_d is
/// increasing in q̄, so this also minimises the data packet.
pub fn solve_data_packet(task: &SensingTask, alpha: f64, surrogate: &MapSurrogate) -> Result<DataPacketDesign> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain { value: alpha, lo: 0.0, hi: 1.0 });
    }
    let q_bar = surrogate
        .omega
        .iter()
        .copied()
        .find(|&q| surrogate.map_large(alpha, q) >= surrogate.map_min)
        .ok_or_else(|| Error::Infeasible {
            constraint: Constraint::LargeModelAccuracy,
            detail: format!(
                "g({alpha:.4}, {}) = {:.4} < mAP_min {:.4}",
                surrogate.q_max(),
                surrogate.map_large(alpha, surrogate.q_max()),
                surrogate.map_min
            ),
        })?;
    let plan = OffloadPlan::new(alpha, q_bar, surrogate.model_bits_min);
    Ok(DataPacketDesign { q_bar, data_bits: data_packet_size(task, &plan) })
}

/// Smallest model-update size meeting the small-model accuracy floor, by
/// closed-form inversion of h rounded up to a whole bit.
pub fn solve_model_packet(surrogate: &MapSurrogate) -> Result<f64> {
    let (lo, hi) = (surrogate.model_bits_min, surrogate.model_bits_max);
    let target = surrogate.map_min;
    if target <= surrogate.small_base {
        return Ok(lo);
    }
    if surrogate.map_small(hi)? < target {
        return Err(Error::Infeasible {
            constraint: Constraint::SmallModelAccuracy,
            detail: format!("h(D_max) = {:.4} < mAP_min {target:.4}", surrogate.small_max),
        });
    }
    let frac = (target - surrogate.small_base) / (surrogate.small_max - surrogate.small_base);
    let k = surrogate.kappa_m;
    // invert frac = (1 - e^{-kx}) / (1 - e^{-k})
    let x = -(-(frac * saturate(k, 1.0))).ln_1p() / k;
    let mut bits = (lo + x * (hi - lo)).ceil().clamp(lo, hi);
    while surrogate.map_small(bits)? < target && bits < hi {
        bits = (bits + 1.0).min(hi);
    }
    // whole-bit steps can overshoot; walk back while the floor still holds
    while bits - 1.0 >= lo && surrogate.map_small(bits - 1.0)? >= target {
        bits -= 1.0;
    }
    Ok(bits)
}

/// Solves both subproblems for `alpha`. A zero allocation offloads nothing,
/// so the large-model accuracy constraint is vacuous and D_d = 0.
pub fn plan_for(task: &SensingTask, alpha: f64, surrogate: &MapSurrogate) -> Result<(OffloadPlan, f64)> {
    let model_bits = solve_model_packet(surrogate)?;
    if alpha == 0.0 {
        return Ok((OffloadPlan::new(0.0, surrogate.omega[0], model_bits), 0.0));
    }
    let design = solve_data_packet(task, alpha, surrogate)?;
    Ok((OffloadPlan::new(alpha, design.q_bar, model_bits), design.data_bits))
}

/// Per-task parameters shared by every remote sensing satellite unless a
/// `[[tasks]]` entry overrides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskTemplate {
    pub frames: f64,
    pub pixels_per_frame: f64,
    pub bits_per_pixel: f64,
    pub feature_bits_per_frame: f64,
    pub cycles_per_bit: f64,
    pub small_model_params: f64,
    pub large_model_params: f64,
    /// Operations per model parameter per frame. The default puts full
    /// onboard inference of a task at about a minute, the same order as
    /// shipping its raw frames over a few hops.
    pub ops_per_param_per_frame: f64,
}

impl Default for TaskTemplate {
    fn default() -> Self {
        Self {
            frames: 100.0,
            pixels_per_frame: 1e6,
            bits_per_pixel: 8.0,
            feature_bits_per_frame: 4e5,
            cycles_per_bit: 100.0,
            small_model_params: 11.7e6,
            large_model_params: 45e6,
            ops_per_param_per_frame: 5e4,
        }
    }
}

impl TaskTemplate {
    pub fn instantiate(&self, source: NodeId) -> SensingTask {
        SensingTask {
            source,
            frames: self.frames,
            pixels_per_frame: self.pixels_per_frame,
            bits_per_pixel: self.bits_per_pixel,
            feature_bits_per_frame: self.feature_bits_per_frame,
            cycles_per_bit: self.cycles_per_bit,
            small_ops: self.small_model_params * self.ops_per_param_per_frame,
            large_ops: self.large_model_params * self.ops_per_param_per_frame,
        }
    }
}
