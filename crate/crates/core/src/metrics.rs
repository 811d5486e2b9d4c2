//! Latency and throughput metrics over per-sequence token timing.
//!
//! Five metrics are computed from sequence and batch windows: TTFT and ITL
//! per sequence; ITPS, OTPS, and EOTPS per batch. Batch windows use
//! batch-extremal timestamps: `t_start` and `t_first` are the earliest over
//! members, `t_end` the latest. Reports carry both float seconds and integer
//! microseconds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Timing record of one completed sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SequenceRecord<S: Scalar> {
    pub user_id: u64,
    /// Prompt tokens.
    pub n_in: u64,
    /// Generated tokens.
    pub n_out: u64,
    /// When prompt prefill began.
    pub t_start: S,
    /// When the first output token was obtained.
    pub t_first: S,
    /// When generation completed.
    pub t_end: S,
    /// One timestamp per generated token; first equals `t_first`, last
    /// equals `t_end`.
    pub token_times: Vec<S>,
}

impl<S: Scalar> SequenceRecord<S> {
    pub fn validate(&self) -> Result<()> {
        if self.t_start > self.t_first || self.t_first > self.t_end {
            return Err(Error::invalid(
                "sequence record",
                "t_start <= t_first <= t_end violated",
            ));
        }
        if self.token_times.len() as u64 != self.n_out {
            return Err(Error::invalid(
                "sequence record",
                "token_times length must equal n_out",
            ));
        }
        if let (Some(first), Some(last)) = (self.token_times.first(), self.token_times.last()) {
            if *first != self.t_first || *last != self.t_end {
                return Err(Error::invalid(
                    "sequence record",
                    "token_times must start at t_first and end at t_end",
                ));
            }
        }
        if self.token_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "sequence record",
                "token_times must be strictly increasing",
            ));
        }
        Ok(())
    }
}

/// Time to first token: `t_first - t_start`.
pub fn ttft<S: Scalar>(s: &SequenceRecord<S>) -> S {
    s.t_first - s.t_start
}

/// Average gap between generated tokens, `(t_end - t_first) / (n_out - 1)`.
/// Defined only for sequences with at least two output tokens.
pub fn itl<S: Scalar>(s: &SequenceRecord<S>) -> Result<S> {
    if s.n_out < 2 {
        return Err(Error::UndefinedMetric(format!(
            "ITL requires n_out >= 2, got {}",
            s.n_out
        )));
    }
    Ok((s.t_end - s.t_first) / S::from_count(s.n_out - 1))
}

/// A batch of sequences with extremal timestamps and summed token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchRecord<S: Scalar> {
    pub n_in: u64,
    pub n_out: u64,
    pub t_start: S,
    pub t_first: S,
    pub t_end: S,
}

impl<S: Scalar> BatchRecord<S> {
    pub fn from_records(records: &[SequenceRecord<S>]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyReport);
        }
        let mut b = BatchRecord {
            n_in: 0,
            n_out: 0,
            t_start: S::infinity(),
            t_first: S::infinity(),
            t_end: S::neg_infinity(),
        };
        for r in records {
            b.n_in += r.n_in;
            b.n_out += r.n_out;
            b.t_start = b.t_start.min(r.t_start);
            b.t_first = b.t_first.min(r.t_first);
            b.t_end = b.t_end.max(r.t_end);
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchThroughputs<S: Scalar> {
    /// Input tokens per second during batch prefill: `N_in / TTFT_B`.
    pub itps: S,
    /// Output tokens per second excluding prefill:
    /// `N_out / (t_end - t_first)`.
    pub otps: S,
    /// Output tokens per second including prefill:
    /// `N_out / (t_end - t_start)`.
    pub eotps: S,
}

/// The three batch throughputs. Errors on zero-duration windows.
pub fn batch_throughputs<S: Scalar>(b: &BatchRecord<S>) -> Result<BatchThroughputs<S>> {
    let ttft_b = b.t_first - b.t_start;
    let decode_window = b.t_end - b.t_first;
    let full_window = b.t_end - b.t_start;
    if ttft_b <= S::zero() || decode_window <= S::zero() || full_window <= S::zero() {
        return Err(Error::UndefinedMetric(
            "batch windows must have positive duration".into(),
        ));
    }
    Ok(BatchThroughputs {
        itps: S::from_count(b.n_in) / ttft_b,
        otps: S::from_count(b.n_out) / decode_window,
        eotps: S::from_count(b.n_out) / full_window,
    })
}

/// Batch throughputs projected to a longer per-user decode length.
///
/// A desk-scale run truncates decode to keep runtime small; this rebuilds
/// the batch window as if each sequence had generated `decode_len` tokens at
/// its measured per-token rate, leaving prefill timing untouched.
pub fn projected_throughputs<S: Scalar>(
    records: &[SequenceRecord<S>],
    decode_len: u64,
) -> Result<BatchThroughputs<S>> {
    if records.is_empty() {
        return Err(Error::EmptyReport);
    }
    if decode_len < 2 {
        return Err(Error::UndefinedMetric(
            "projection needs decode_len >= 2".into(),
        ));
    }
    let mut b = BatchRecord {
        n_in: 0,
        n_out: 0,
        t_start: S::infinity(),
        t_first: S::infinity(),
        t_end: S::neg_infinity(),
    };
    for r in records {
        let per_token = itl(r)?;
        let t_end = r.t_first + per_token * S::from_count(decode_len - 1);
        b.n_in += r.n_in;
        b.n_out += decode_len;
        b.t_start = b.t_start.min(r.t_start);
        b.t_first = b.t_first.min(r.t_first);
        b.t_end = b.t_end.max(t_end);
    }
    batch_throughputs(&b)
}

/// Mean / median / p99 of a latency distribution, in seconds and integer
/// microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LatencyStats<S: Scalar> {
    pub mean_seconds: S,
    pub median_seconds: S,
    pub p99_seconds: S,
    pub mean_micros: u64,
    pub median_micros: u64,
    pub p99_micros: u64,
}

impl<S: Scalar> LatencyStats<S> {
    fn from_values(mut values: Vec<S>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
        let n = values.len();
        let sum = values.iter().fold(S::zero(), |acc, v| acc + *v);
        let mean = sum / S::from_count(n as u64);
        // nearest-rank percentiles
        let rank = |p: f64| -> S { values[((p * n as f64).ceil() as usize).clamp(1, n) - 1] };
        let median = rank(0.50);
        let p99 = rank(0.99);
        let micros = |v: S| (v.as_f64() * 1e6).round().max(0.0) as u64;
        Some(Self {
            mean_seconds: mean,
            median_seconds: median,
            p99_seconds: p99,
            mean_micros: micros(mean),
            median_micros: micros(median),
            p99_micros: micros(p99),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Totals<S: Scalar> {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub duration_seconds: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ProjectedThroughputs<S: Scalar> {
    pub decode_len: u64,
    pub throughputs: BatchThroughputs<S>,
}

/// Metrics report over one run. `schema_version` gates downstream parsers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Report<S: Scalar> {
    pub schema_version: u32,
    pub scenario: Option<String>,
    pub plan_hash: Option<String>,
    pub seed: Option<u64>,
    pub sequences: usize,
    pub ttft: LatencyStats<S>,
    /// Absent when no sequence generated two or more tokens.
    pub itl: Option<LatencyStats<S>>,
    pub batch: BatchThroughputs<S>,
    pub projected: Option<ProjectedThroughputs<S>>,
    /// Measured pipeline idle fraction, when the producing run tracked it.
    pub idle_fraction: Option<S>,
    pub totals: Totals<S>,
}

/// Run identification carried into a report.
#[derive(Debug, Clone, Default)]
pub struct ReportContext<S: Scalar> {
    pub scenario: Option<String>,
    pub plan_hash: Option<String>,
    pub seed: Option<u64>,
    pub idle_fraction: Option<S>,
    /// Project batch throughputs to this per-user decode length.
    pub project_to_decode_len: Option<u64>,
}

/// Aggregates completed sequence records into a [`Report`].
pub fn aggregate<S: Scalar>(
    records: &[SequenceRecord<S>],
    ctx: &ReportContext<S>,
) -> Result<Report<S>> {
    if records.is_empty() {
        return Err(Error::EmptyReport);
    }
    for r in records {
        r.validate()?;
    }
    let batch = BatchRecord::from_records(records)?;
    let ttft_stats =
        LatencyStats::from_values(records.iter().map(ttft).collect()).expect("non-empty");
    let itl_values: Vec<S> = records.iter().filter_map(|r| itl(r).ok()).collect();
    let projected = match ctx.project_to_decode_len {
        Some(len) => Some(ProjectedThroughputs {
            decode_len: len,
            throughputs: projected_throughputs(records, len)?,
        }),
        None => None,
    };
    Ok(Report {
        schema_version: 1,
        scenario: ctx.scenario.clone(),
        plan_hash: ctx.plan_hash.clone(),
        seed: ctx.seed,
        sequences: records.len(),
        ttft: ttft_stats,
        itl: LatencyStats::from_values(itl_values),
        batch: batch_throughputs(&batch)?,
        projected,
        idle_fraction: ctx.idle_fraction,
        totals: Totals {
            input_tokens: batch.n_in,
            output_tokens: batch.n_out,
            duration_seconds: batch.t_end - batch.t_start,
        },
    })
}

/// Writes per-sequence rows as CSV.
pub fn write_csv<S: Scalar, W: Write>(records: &[SequenceRecord<S>], mut w: W) -> Result<()> {
    writeln!(w, "user_id,n_in,n_out,t_start,t_first,t_end,ttft,itl")?;
    for r in records {
        let itl_cell = itl(r).map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.user_id,
            r.n_in,
            r.n_out,
            r.t_start,
            r.t_first,
            r.t_end,
            ttft(r),
            itl_cell
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(
        user: u64,
        n_in: u64,
        t_start: f64,
        token_times: Vec<f64>,
    ) -> SequenceRecord<f64> {
        SequenceRecord {
            user_id: user,
            n_in,
            n_out: token_times.len() as u64,
            t_start,
            t_first: token_times[0],
            t_end: *token_times.last().unwrap(),
            token_times,
        }
    }

    #[test]
    fn ttft_examples() {
        let r = record(0, 4, 0.0, vec![0.010, 0.012]);
        assert_eq!(ttft(&r), 0.010);
        let r = record(0, 4, 0.010, vec![0.010, 0.012]);
        assert_eq!(ttft(&r), 0.0);
    }

    #[test]
    fn itl_examples() {
        let r = record(0, 4, 0.0, vec![0.010, 0.012, 0.014, 0.016]);
        assert!((itl(&r).unwrap() - 0.002).abs() < 1e-12);

        let r = record(0, 4, 0.0, vec![0.010, 0.015]);
        assert!((itl(&r).unwrap() - 0.005).abs() < 1e-12);

        let r = record(0, 4, 0.0, vec![0.010]);
        assert!(matches!(itl(&r), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn batch_throughput_example() {
        let r = record(0, 4, 0.0, vec![0.010, 0.012, 0.014, 0.016]);
        let b = BatchRecord::from_records(&[r]).unwrap();
        let t = batch_throughputs(&b).unwrap();
        assert!((t.itps - 400.0).abs() < 1e-9);
        assert!((t.otps - 4.0 / 0.006).abs() < 1e-9);
        assert!((t.eotps - 250.0).abs() < 1e-9);
        assert!(t.eotps <= t.otps);
    }

    #[test]
    fn zero_duration_window_is_an_error() {
        let r = SequenceRecord::<f64> {
            user_id: 0,
            n_in: 4,
            n_out: 2,
            t_start: 0.010,
            t_first: 0.010,
            t_end: 0.012,
            token_times: vec![0.010, 0.012],
        };
        let b = BatchRecord::from_records(&[r]).unwrap();
        assert!(matches!(
            batch_throughputs(&b),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn aggregate_degenerate_distribution() {
        let records: Vec<_> = (0..1400)
            .map(|u| record(u, 8, 0.0, vec![0.010, 0.012, 0.014]))
            .collect();
        let rep = aggregate(&records, &ReportContext::default()).unwrap();
        assert_eq!(rep.sequences, 1400);
        assert!((rep.ttft.mean_seconds - 0.010).abs() < 1e-12);
        assert_eq!(rep.ttft.median_seconds, 0.010);
        assert_eq!(rep.ttft.p99_seconds, 0.010);
        assert_eq!(rep.ttft.mean_micros, 10_000);
        let itl = rep.itl.unwrap();
        assert!((itl.mean_seconds - 0.002).abs() < 1e-12);
        assert_eq!(itl.median_micros, 2_000);
    }

    #[test]
    fn aggregate_two_point_mean() {
        let a = record(0, 8, 0.0, vec![0.010, 0.020]);
        let b = record(1, 8, 0.0, vec![0.020, 0.030]);
        let rep = aggregate(&[a, b], &ReportContext::default()).unwrap();
        assert!((rep.ttft.mean_seconds - 0.015).abs() < 1e-12);
    }

    #[test]
    fn aggregate_empty_is_error() {
        let none: Vec<SequenceRecord<f64>> = vec![];
        assert!(matches!(
            aggregate(&none, &ReportContext::default()),
            Err(Error::EmptyReport)
        ));
    }

    #[test]
    fn projection_extends_decode_window() {
        // 2 tokens at 2 ms apart, projected to 101 tokens: decode window
        // becomes 100 gaps of 2 ms.
        let r = record(0, 8, 0.0, vec![0.010, 0.012]);
        let t = projected_throughputs(&[r], 101).unwrap();
        assert!((t.otps - 101.0 / 0.200).abs() < 1e-9);
        assert!((t.eotps - 101.0 / 0.210).abs() < 1e-9);
    }

    // 2..6 tokens with positive gaps
    fn arb_record() -> impl Strategy<Value = SequenceRecord<f64>> {
        (
            1u64..100,
            0.0f64..0.5,
            0.001f64..0.1,
            proptest::collection::vec(0.0001f64..0.05, 1..5),
        )
            .prop_map(|(n_in, t_start, first_gap, gaps)| {
                let t_first = t_start + first_gap;
                let mut times = vec![t_first];
                for g in gaps {
                    times.push(times.last().unwrap() + g);
                }
                record(0, n_in, t_start, times)
            })
    }

    proptest! {
        #[test]
        fn metrics_are_translation_invariant(r in arb_record(), shift in -10.0f64..10.0) {
            let shifted = SequenceRecord {
                t_start: r.t_start + shift,
                t_first: r.t_first + shift,
                t_end: r.t_end + shift,
                token_times: r.token_times.iter().map(|t| t + shift).collect(),
                ..r.clone()
            };
            prop_assert!((ttft(&shifted) - ttft(&r)).abs() < 1e-9);
            prop_assert!((itl(&shifted).unwrap() - itl(&r).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn metrics_scale_covariantly(r in arb_record(), c in 0.1f64..10.0) {
            let scaled = SequenceRecord {
                t_start: r.t_start * c,
                t_first: r.t_first * c,
                t_end: r.t_end * c,
                token_times: r.token_times.iter().map(|t| t * c).collect(),
                ..r.clone()
            };
            prop_assert!((ttft(&scaled) - ttft(&r) * c).abs() < 1e-9);
            let b = BatchRecord::from_records(&[r]).unwrap();
            let bs = BatchRecord::from_records(&[scaled]).unwrap();
            if let (Ok(t), Ok(ts)) = (batch_throughputs(&b), batch_throughputs(&bs)) {
                prop_assert!((ts.otps - t.otps / c).abs() < 1e-6 * t.otps.abs());
                prop_assert!((ts.eotps - t.eotps / c).abs() < 1e-6 * t.eotps.abs());
                prop_assert!(ts.eotps <= ts.otps + 1e-12);
            }
        }
    }
}
