//! Browser bindings over the accountant: every entry point takes and returns JSON strings.

use dp_pretrain::accountant::{
    account_schedule, calibrate_sigma, compose_schedule, default_orders, rdp_to_dp,
    ScheduleSegment,
};
use dp_pretrain::schedule::BatchSchedule;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T, String> {
    serde_json::from_str(json).map_err(fail)
}

fn render<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(fail)
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct CurveQuery {
    steps: u64,
    sampling_rate: f64,
    noise_multiplier: f64,
    delta: f64,
    /// Number of trajectory samples (defaults to 120).
    #[serde(default)]
    points: Option<u64>,
}

#[derive(Serialize)]
struct CurvePoint {
    step: u64,
    epsilon: f64,
    optimal_order: u64,
}

/// Privacy spend over the course of a homogeneous schedule:
/// `{steps, sampling_rate, noise_multiplier, delta, points?}` to a list of
/// `{step, epsilon, optimal_order}` samples.
#[wasm_bindgen]
pub fn epsilon_curve(query: &str) -> Result<String, JsError> {
    epsilon_curve_impl(query).map_err(|m| JsError::new(&m))
}

fn epsilon_curve_impl(query: &str) -> Result<String, String> {
    let q: CurveQuery = parse(query)?;
    let orders = default_orders();
    let points = q.points.unwrap_or(120).clamp(2, 2000).min(q.steps);
    let mut out = Vec::with_capacity(points as usize);
    for i in 1..=points {
        let step = (i * q.steps).div_ceil(points);
        let curve = compose_schedule(
            &[ScheduleSegment {
                steps: step,
                sampling_rate: q.sampling_rate,
                noise_multiplier: q.noise_multiplier,
            }],
            &orders,
        )
        .map_err(fail)?;
        let (epsilon, optimal_order) = rdp_to_dp(&curve, q.delta).map_err(fail)?;
        out.push(CurvePoint { step, epsilon, optimal_order });
    }
    render(&out)
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct CalibrateQuery {
    steps: u64,
    sampling_rate: f64,
    delta: f64,
    target_epsilon: f64,
}

#[derive(Serialize)]
struct CalibrateAnswer {
    noise_multiplier: f64,
    epsilon: f64,
    optimal_order: u64,
}

/// Noise multiplier spending exactly the target:
/// `{steps, sampling_rate, delta, target_epsilon}` to
/// `{noise_multiplier, epsilon, optimal_order}`.
#[wasm_bindgen]
pub fn calibrate(query: &str) -> Result<String, JsError> {
    calibrate_impl(query).map_err(|m| JsError::new(&m))
}

fn calibrate_impl(query: &str) -> Result<String, String> {
    let q: CalibrateQuery = parse(query)?;
    let orders = default_orders();
    let sigma = calibrate_sigma(&[(q.steps, q.sampling_rate)], q.target_epsilon, q.delta, &orders)
        .map_err(fail)?;
    let report = account_schedule(
        &[ScheduleSegment {
            steps: q.steps,
            sampling_rate: q.sampling_rate,
            noise_multiplier: sigma,
        }],
        q.delta,
        &orders,
        true,
    )
    .map_err(fail)?;
    render(&CalibrateAnswer {
        noise_multiplier: sigma,
        epsilon: report.epsilon,
        optimal_order: report.optimal_order,
    })
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ScheduleQuery {
    start: u64,
    end: u64,
    ramp_steps: u64,
    stages: u64,
    total_steps: u64,
    population: u64,
    noise_multiplier: f64,
    delta: f64,
}

#[derive(Serialize)]
struct ScheduleAnswer {
    /// Batch size at every step, for plotting.
    sizes: Vec<u64>,
    total_examples: u64,
    /// Examples a fixed schedule at the final size would consume instead.
    fixed_examples: u64,
    epsilon: f64,
    optimal_order: u64,
    segments: usize,
}

/// Growth plan for the batch size and what it costs in privacy:
/// `{start, end, ramp_steps, stages, total_steps, population,
/// noise_multiplier, delta}` to sizes, example counts, and the composed spend.
#[wasm_bindgen]
pub fn explore_schedule(query: &str) -> Result<String, JsError> {
    explore_schedule_impl(query).map_err(|m| JsError::new(&m))
}

fn explore_schedule_impl(query: &str) -> Result<String, String> {
    let q: ScheduleQuery = parse(query)?;
    if q.total_steps > 200_000 {
        return Err("total_steps capped at 200000 for the demo".into());
    }
    let batch = BatchSchedule::Increasing {
        start: q.start,
        end: q.end,
        ramp_steps: q.ramp_steps,
        stages: q.stages,
    };
    batch.validate().map_err(fail)?;
    let segments = batch.segments(q.total_steps, q.population, q.noise_multiplier).map_err(fail)?;
    let orders = default_orders();
    let report = account_schedule(&segments, q.delta, &orders, true).map_err(fail)?;
    let sizes: Vec<u64> = (1..=q.total_steps).map(|t| batch.batch_size(t)).collect();
    render(&ScheduleAnswer {
        total_examples: batch.total_examples(q.total_steps),
        fixed_examples: BatchSchedule::Fixed { size: q.end }.total_examples(q.total_steps),
        sizes,
        epsilon: report.epsilon,
        optimal_order: report.optimal_order,
        segments: segments.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_curve_ends_at_the_full_spend() {
        let out = epsilon_curve_impl(
            r#"{"steps":2000,"sampling_rate":0.00018941019441180736,
                "noise_multiplier":0.46404498611057077,"delta":2.95953428768449e-6}"#,
        )
        .unwrap();
        let points: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
        let last = points.last().unwrap();
        assert_eq!(last["step"], 2000);
        let eps = last["epsilon"].as_f64().unwrap();
        assert!((eps - 5.36).abs() < 1e-6, "{eps}");
    }

    #[test]
    fn calibrate_round_trips_the_target() {
        let out = calibrate_impl(
            r#"{"steps":20000,"sampling_rate":1.894e-4,"delta":2.89e-9,"target_epsilon":5.36}"#,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!((v["epsilon"].as_f64().unwrap() - 5.36).abs() < 1e-6);
    }

    #[test]
    fn schedule_explorer_reports_savings_and_spend() {
        let out = explore_schedule_impl(
            r#"{"start":256,"end":1024,"ramp_steps":600,"stages":4,"total_steps":750,
                "population":337891,"noise_multiplier":0.5,"delta":2.96e-6}"#,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["sizes"].as_array().unwrap().len(), 750);
        assert!(v["total_examples"].as_u64().unwrap() < v["fixed_examples"].as_u64().unwrap());
        assert!(v["epsilon"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn malformed_queries_are_rejected() {
        assert!(epsilon_curve_impl("not json").is_err());
        assert!(calibrate_impl(r#"{"steps":0,"sampling_rate":0.1,"delta":1e-6,"target_epsilon":1}"#)
            .is_err());
    }
}
