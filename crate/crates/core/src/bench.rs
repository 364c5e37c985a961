//! Inference latency harness.
//!
//! Times the generator forward pass alone on a monotonic clock: tensor
//! setup, tape construction, parameter binding, warmup iterations, and all
//! I/O sit outside the timed span. Each timed iteration is checked against
//! the global forward-pass counter to hold the single-pass claim: exactly
//! one generator forward per inference, no iterative refinement loop.

use crate::error::{Error, Result};
use crate::generator::{self, Generator};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::time::Instant;

/// Seed for the synthetic input frame; fixed so runs are comparable.
const INPUT_SEED: u64 = 0xBE;

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Latency measurements for one configuration. Per-iteration seconds are
/// rounded to microseconds; the derived statistics are computed from the
/// rounded samples, so two emissions of one report are byte-identical.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatencyReport {
    /// Raw frame side length; the packed network input is half this.
    pub resolution: usize,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub forward_passes_per_iter: u64,
    pub seconds: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl LatencyReport {
    pub fn from_samples(resolution: usize, warmup: usize, threads: usize, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("latency report requires at least one timed iteration"));
        }
        let seconds: Vec<f64> = samples.iter().map(|&s| round6(s)).collect();
        let mut sorted = seconds.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let p95 = sorted[((0.95 * n as f64).ceil() as usize).max(1) - 1];
        Ok(LatencyReport {
            resolution,
            warmup,
            iters: n,
            threads,
            forward_passes_per_iter: 1,
            seconds,
            mean,
            median,
            p95,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "resolution: {0}x{0} raw frame (packed input {1}x{1})", self.resolution, self.resolution / 2);
        let _ = writeln!(s, "threads: {}", self.threads);
        let _ = writeln!(s, "warmup iterations (excluded): {}", self.warmup);
        let _ = writeln!(s, "timed iterations: {}", self.iters);
        let _ = writeln!(s, "forward passes per inference: {}", self.forward_passes_per_iter);
        let _ = writeln!(s, "mean:   {:.6} s", self.mean);
        let _ = writeln!(s, "median: {:.6} s", self.median);
        let _ = writeln!(s, "p95:    {:.6} s", self.p95);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,seconds\n");
        for (i, sec) in self.seconds.iter().enumerate() {
            let _ = writeln!(s, "{i},{sec:.6}");
        }
        s
    }

    /// One JSON object per line: the report header, then one line per
    /// timed iteration.
    pub fn to_jsonl(&self) -> String {
        #[derive(serde::Serialize)]
        struct Row {
            iter: usize,
            seconds: f64,
        }
        let header = serde_json::json!({
            "resolution": self.resolution,
            "warmup": self.warmup,
            "iters": self.iters,
            "threads": self.threads,
            "forward_passes_per_iter": self.forward_passes_per_iter,
            "mean": self.mean,
            "median": self.median,
            "p95": self.p95,
        });
        let mut s = header.to_string();
        s.push('\n');
        for (i, &sec) in self.seconds.iter().enumerate() {
            s.push_str(&serde_json::to_string(&Row { iter: i, seconds: sec }).unwrap());
            s.push('\n');
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<LatencyReport> {
        let bad = |detail: String| Error::config(format!("latency jsonl: {detail}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| bad("empty input".into()))?)
            .map_err(|e| bad(format!("header: {e}")))?;
        let field = |name: &str| {
            header
                .get(name)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| bad(format!("header field {name} missing or not a number")))
        };
        let mut seconds = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: serde_json::Value =
                serde_json::from_str(line).map_err(|e| bad(format!("row {i}: {e}")))?;
            let sec = row
                .get("seconds")
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| bad(format!("row {i}: seconds missing")))?;
            seconds.push(sec);
        }
        let report = LatencyReport {
            resolution: field("resolution")? as usize,
            warmup: field("warmup")? as usize,
            iters: field("iters")? as usize,
            threads: field("threads")? as usize,
            forward_passes_per_iter: field("forward_passes_per_iter")? as u64,
            seconds,
            mean: field("mean")?,
            median: field("median")?,
            p95: field("p95")?,
        };
        if report.iters != report.seconds.len() {
            return Err(bad(format!(
                "header declares {} iterations, found {} rows",
                report.iters,
                report.seconds.len()
            )));
        }
        Ok(report)
    }
}

/// Times `iters` generator inferences on a random `resolution`-sized raw
/// frame after `warmup` untimed runs. `threads` is recorded for the report
/// only; callers set the thread budget through the conv module.
pub fn time_inference(
    gen: &Generator,
    resolution: usize,
    warmup: usize,
    iters: usize,
    threads: usize,
) -> Result<LatencyReport> {
    if iters < 1 {
        return Err(Error::config("bench requires iters >= 1"));
    }
    let multiple = gen.config.spatial_multiple() * 2;
    if resolution == 0 || resolution % multiple != 0 {
        return Err(Error::config(format!(
            "resolution {resolution} is not a multiple of {multiple} (model stride requirement); pad or choose e.g. {}",
            resolution.div_ceil(multiple.max(1)).max(1) * multiple
        )));
    }
    let half = resolution / 2;
    let mut rng = Rng::new(INPUT_SEED);
    let input = Tensor::rand_uniform(vec![1, 4, half, half], &mut rng);

    let run_once = |timed: bool| -> Result<f64> {
        // Setup outside the timed span: fresh tape, parameter binding, input
        // registration.
        let mut tape = crate::tape::Tape::new();
        let bound = gen.params.bind(&mut tape, false);
        let x = tape.leaf(&input);
        let before = generator::forward_pass_count();
        let start = Instant::now();
        let (_y, _gates) = gen.forward(&mut tape, &bound, x)?;
        let elapsed = start.elapsed().as_secs_f64();
        let passes = generator::forward_pass_count() - before;
        if passes != 1 {
            return Err(Error::config(format!(
                "single-pass invariant violated: {passes} forward passes in one inference"
            )));
        }
        Ok(if timed { elapsed } else { 0.0 })
    };

    for _ in 0..warmup {
        run_once(false)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        samples.push(run_once(true)?);
    }
    LatencyReport::from_samples(resolution, warmup, threads, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn tiny_gen() -> Generator {
        let cfg = GeneratorConfig { levels: 2, base_channels: 2, leaky_slope: 0.2, use_attention: true };
        Generator::build(cfg, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn report_stats_from_known_samples() {
        let r = LatencyReport::from_samples(64, 1, 1, &[0.003, 0.001, 0.002, 0.010, 0.004]).unwrap();
        assert_eq!(r.iters, 5);
        assert_eq!(r.median, 0.003);
        assert_eq!(r.p95, 0.010);
        assert!((r.mean - 0.004).abs() < 1e-12);
        let even = LatencyReport::from_samples(64, 0, 1, &[0.004, 0.002]).unwrap();
        assert_eq!(even.median, 0.003);
    }

    #[test]
    fn empty_report_rejected() {
        assert!(LatencyReport::from_samples(64, 0, 1, &[]).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let r = LatencyReport::from_samples(64, 0, 1, &[0.0015, 0.0025]).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("iter,seconds"));
        assert_eq!(lines.next(), Some("0,0.001500"));
        assert_eq!(lines.next(), Some("1,0.002500"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn jsonl_round_trips_exactly() {
        let r = LatencyReport::from_samples(128, 2, 1, &[0.0031419, 0.0027177, 0.0041234]).unwrap();
        let parsed = LatencyReport::parse_jsonl(&r.to_jsonl()).unwrap();
        assert_eq!(parsed, r);
        // Emission is deterministic.
        assert_eq!(r.to_jsonl(), parsed.to_jsonl());
        assert_eq!(r.to_text(), parsed.to_text());
    }

    #[test]
    fn timing_counts_exactly_one_pass_per_iter() {
        let gen = tiny_gen();
        let before = generator::forward_pass_count();
        let r = time_inference(&gen, 16, 1, 3, 1).unwrap();
        let after = generator::forward_pass_count();
        assert_eq!(after - before, 4, "1 warmup + 3 timed");
        assert_eq!(r.forward_passes_per_iter, 1);
        assert_eq!(r.seconds.len(), 3);
        assert!(r.seconds.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn incompatible_resolution_rejected_with_advice() {
        let gen = tiny_gen();
        let err = time_inference(&gen, 18, 0, 1, 1).unwrap_err().to_string();
        assert!(err.contains("multiple of 4"), "{err}");
        assert!(time_inference(&gen, 16, 0, 0, 1).is_err(), "iters 0 must be rejected");
    }
}
