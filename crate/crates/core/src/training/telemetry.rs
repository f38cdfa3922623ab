//! Plain-text per-step telemetry and its post-hoc analysis.
//!
//! One header line, then one line per step with space-separated decimals.
//! Values print in shortest round-trip form, so parsing a file recovers the
//! exact f32 bits and determinism checks can compare lines as strings.
//!
//! The analysis side summarizes the attention weights per epoch and flags
//! steps whose |mean_beta| jumps far above its own running median; a spike
//! there means the discriminator suddenly leaned on the batch-statistics
//! branch, the signature of the generator drifting toward collapse.

pub const TELEMETRY_HEADER: &str = "step d_loss g_loss mean_alpha mean_beta d2_real d2_fake";

#[derive(Debug, Clone, PartialEq)]
pub struct StepTelemetry {
    pub step: u64,
    pub d_loss: f32,
    pub g_loss: f32,
    pub mean_alpha: f32,
    pub mean_beta: f32,
    pub d2_real: f32,
    pub d2_fake: f32,
}

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("missing header: file is empty")]
    Empty,
    #[error("line 1: expected header `{expected}`, found `{found}`")]
    Header {
        expected: &'static str,
        found: String,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub fn telemetry_line(t: &StepTelemetry) -> String {
    format!(
        "{} {} {} {} {} {} {}",
        t.step, t.d_loss, t.g_loss, t.mean_alpha, t.mean_beta, t.d2_real, t.d2_fake
    )
}

pub fn parse_telemetry(text: &str) -> Result<Vec<StepTelemetry>, TelemetryError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(TelemetryError::Empty)?;
    if header != TELEMETRY_HEADER {
        return Err(TelemetryError::Header {
            expected: TELEMETRY_HEADER,
            found: header.to_string(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let bad = |msg: String| TelemetryError::Parse { line: line_no, msg };
        let tokens: Vec<&str> = line.split(' ').collect();
        if tokens.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", tokens.len())));
        }
        let step = tokens[0]
            .parse::<u64>()
            .map_err(|e| bad(format!("bad step `{}`: {e}", tokens[0])))?;
        let mut values = [0.0f32; 6];
        for (slot, token) in values.iter_mut().zip(&tokens[1..]) {
            *slot = token
                .parse::<f32>()
                .map_err(|e| bad(format!("bad value `{token}`: {e}")))?;
            if !slot.is_finite() {
                return Err(bad(format!("non-finite value `{token}`")));
            }
        }
        out.push(StepTelemetry {
            step,
            d_loss: values[0],
            g_loss: values[1],
            mean_alpha: values[2],
            mean_beta: values[3],
            d2_real: values[4],
            d2_fake: values[5],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

impl SeriesStats {
    fn over(values: impl Iterator<Item = f32> + Clone) -> Self {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
            n += 1;
        }
        Self {
            min,
            max,
            mean: (sum / n as f64) as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub alpha: SeriesStats,
    pub beta: SeriesStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetrySummary {
    pub epochs: Vec<EpochStats>,
    /// Steps where |mean_beta| exceeded the spike multiple times the running
    /// median of all strictly earlier steps.
    pub flagged_steps: Vec<u64>,
}

fn median(sorted: &[f32]) -> f32 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn analyze_telemetry(
    records: &[StepTelemetry],
    steps_per_epoch: usize,
    spike_multiple: f32,
) -> TelemetrySummary {
    assert!(steps_per_epoch > 0, "steps_per_epoch must be positive");
    assert!(spike_multiple > 0.0, "spike_multiple must be positive");

    let mut epochs = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let epoch = records[i].step / steps_per_epoch as u64;
        let mut j = i;
        while j < records.len() && records[j].step / steps_per_epoch as u64 == epoch {
            j += 1;
        }
        let chunk = &records[i..j];
        epochs.push(EpochStats {
            epoch,
            alpha: SeriesStats::over(chunk.iter().map(|r| r.mean_alpha)),
            beta: SeriesStats::over(chunk.iter().map(|r| r.mean_beta)),
        });
        i = j;
    }

    let mut flagged_steps = Vec::new();
    let mut sorted: Vec<f32> = Vec::new();
    for r in records {
        let magnitude = r.mean_beta.abs();
        if !sorted.is_empty() && magnitude > spike_multiple * median(&sorted) {
            flagged_steps.push(r.step);
        }
        let at = sorted.partition_point(|&x| x < magnitude);
        sorted.insert(at, magnitude);
    }

    TelemetrySummary {
        epochs,
        flagged_steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(step: u64, beta: f32) -> StepTelemetry {
        StepTelemetry {
            step,
            d_loss: 1.0,
            g_loss: 0.7,
            mean_alpha: 1.5,
            mean_beta: beta,
            d2_real: 0.1,
            d2_fake: -0.1,
        }
    }

    #[test]
    fn line_format_round_trips() {
        let t = StepTelemetry {
            step: 41,
            d_loss: 1.3862944,
            g_loss: 0.6931472,
            mean_alpha: 1.25,
            mean_beta: -0.03125,
            d2_real: 2.5e-8,
            d2_fake: -17.0,
        };
        let text = format!("{TELEMETRY_HEADER}\n{}\n", telemetry_line(&t));
        let parsed = parse_telemetry(&text).unwrap();
        assert_eq!(parsed, vec![t]);
    }

    #[test]
    fn header_only_is_an_empty_log() {
        let parsed = parse_telemetry(&format!("{TELEMETRY_HEADER}\n")).unwrap();
        assert!(parsed.is_empty());
        let summary = analyze_telemetry(&parsed, 10, 5.0);
        assert!(summary.epochs.is_empty());
        assert!(summary.flagged_steps.is_empty());
    }

    #[test]
    fn malformed_lines_name_their_line_number() {
        let text = format!("{TELEMETRY_HEADER}\n0 1 1 1 0 0 0\n1 x 1 1 0 0 0\n");
        match parse_telemetry(&text).unwrap_err() {
            TelemetryError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
        assert!(matches!(
            parse_telemetry("nonsense\n").unwrap_err(),
            TelemetryError::Header { .. }
        ));
        assert!(matches!(
            parse_telemetry("").unwrap_err(),
            TelemetryError::Empty
        ));
        let nan = format!("{TELEMETRY_HEADER}\n0 NaN 1 1 0 0 0\n");
        assert!(matches!(
            parse_telemetry(&nan).unwrap_err(),
            TelemetryError::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn constant_beta_flags_nothing() {
        let records: Vec<_> = (0..40).map(|s| record(s, 0.25)).collect();
        let summary = analyze_telemetry(&records, 10, 5.0);
        assert!(summary.flagged_steps.is_empty());
        assert_eq!(summary.epochs.len(), 4);
        assert_eq!(summary.epochs[2].epoch, 2);
        assert_eq!(summary.epochs[2].beta.min, 0.25);
        assert_eq!(summary.epochs[2].beta.max, 0.25);
    }

    #[test]
    fn single_spike_is_flagged_exactly_once() {
        let mut records: Vec<_> = (0..40).map(|s| record(s, 0.2)).collect();
        records[23].mean_beta = 2.0;
        let summary = analyze_telemetry(&records, 10, 5.0);
        assert_eq!(summary.flagged_steps, vec![23]);
    }

    #[test]
    fn negative_spikes_count_by_magnitude() {
        let mut records: Vec<_> = (0..20).map(|s| record(s, -0.1)).collect();
        records[10].mean_beta = -1.0;
        let summary = analyze_telemetry(&records, 20, 5.0);
        assert_eq!(summary.flagged_steps, vec![10]);
    }

    #[test]
    fn epoch_stats_cover_alpha_and_beta() {
        let records = vec![
            record(0, 0.1),
            record(1, 0.3),
            record(2, -0.5),
            record(3, 0.0),
        ];
        let summary = analyze_telemetry(&records, 2, 5.0);
        assert_eq!(summary.epochs.len(), 2);
        assert_eq!(summary.epochs[0].beta.min, 0.1);
        assert_eq!(summary.epochs[0].beta.max, 0.3);
        assert!((summary.epochs[0].beta.mean - 0.2).abs() < 1e-6);
        assert_eq!(summary.epochs[1].beta.min, -0.5);
        assert_eq!(summary.epochs[1].alpha.mean, 1.5);
    }

    proptest! {
        #[test]
        fn any_finite_record_round_trips(
            step in 0u64..1_000_000,
            vals in proptest::array::uniform6(-1e6f32..1e6),
        ) {
            let t = StepTelemetry {
                step,
                d_loss: vals[0],
                g_loss: vals[1],
                mean_alpha: vals[2],
                mean_beta: vals[3],
                d2_real: vals[4],
                d2_fake: vals[5],
            };
            let text = format!("{TELEMETRY_HEADER}\n{}\n", telemetry_line(&t));
            prop_assert_eq!(parse_telemetry(&text).unwrap(), vec![t]);
        }
    }
}
