//! Scoring for flag tuning and disassembly.

mod bleu;

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::toolchain::{Backend, Emit, ToolchainError};

pub use bleu::{bleu, bleu_text, tokenize, EPSILON, MAX_ORDER};

/// Candidate and `-Oz` sizes (text + data) for one program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizePair {
    pub program_id: String,
    pub candidate: u64,
    pub oz: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagTuningScore {
    pub n_programs: usize,
    pub n_improved: usize,
    pub n_regressed: usize,
    pub n_excluded: usize,
    /// `1 - geomean(candidate / oz)`.
    pub zero_shot_improvement: f64,
    /// Same, with each program taking the smaller of candidate and `-Oz`.
    pub oz_backup_improvement: f64,
    /// Aggregate over summed bytes instead of per-program ratios.
    pub total_bytes_improvement: f64,
    pub total_bytes_backup_improvement: f64,
    pub ratios: Vec<f64>,
    pub warnings: Vec<String>,
}

fn geomean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 1.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// Scores candidate sizes against `-Oz`. Programs that could not be
/// evaluated count as ratio 1, as do any with a zero `-Oz` size.
pub fn score_flag_tuning(results: &[SizePair], excluded_count: usize) -> FlagTuningScore {
    let mut ratios = Vec::with_capacity(results.len() + excluded_count);
    let mut backup = Vec::with_capacity(ratios.capacity());
    let mut warnings = Vec::new();
    let mut n_excluded = excluded_count;
    let (mut cand_bytes, mut oz_bytes, mut backup_bytes) = (0u64, 0u64, 0u64);
    for r in results {
        if r.oz == 0 {
            warnings.push(format!("{}: -Oz size is 0, scored as unchanged", r.program_id));
            n_excluded += 1;
            ratios.push(1.0);
            backup.push(1.0);
            continue;
        }
        let ratio = r.candidate as f64 / r.oz as f64;
        ratios.push(ratio);
        backup.push(ratio.min(1.0));
        cand_bytes += r.candidate;
        oz_bytes += r.oz;
        backup_bytes += r.candidate.min(r.oz);
    }
    ratios.extend(std::iter::repeat_n(1.0, excluded_count));
    backup.extend(std::iter::repeat_n(1.0, excluded_count));
    let bytes_improvement = |b: u64| if oz_bytes == 0 { 0.0 } else { 1.0 - b as f64 / oz_bytes as f64 };
    FlagTuningScore {
        n_programs: ratios.len(),
        n_improved: ratios.iter().filter(|&&r| r < 1.0).count(),
        n_regressed: ratios.iter().filter(|&&r| r > 1.0).count(),
        n_excluded,
        zero_shot_improvement: 1.0 - geomean(&ratios),
        oz_backup_improvement: 1.0 - geomean(&backup),
        total_bytes_improvement: bytes_improvement(cand_bytes),
        total_bytes_backup_improvement: bytes_improvement(backup_bytes),
        ratios,
        warnings,
    }
}

impl FlagTuningScore {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |x: f64| format!("{:.2}%", x * 100.0);
        let _ = writeln!(s, "{:<28}{:>12}{:>12}", "", "zero-shot", "-Oz backup");
        let _ = writeln!(
            s,
            "{:<28}{:>12}{:>12}",
            "improvement over -Oz",
            pct(self.zero_shot_improvement),
            pct(self.oz_backup_improvement)
        );
        let _ = writeln!(
            s,
            "{:<28}{:>12}{:>12}",
            "total-bytes improvement",
            pct(self.total_bytes_improvement),
            pct(self.total_bytes_backup_improvement)
        );
        let _ = writeln!(
            s,
            "programs {}  improved {}  regressed {}  excluded {}",
            self.n_programs, self.n_improved, self.n_regressed, self.n_excluded
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mape {
    /// `None` when no pair had a positive actual size.
    pub value: Option<f64>,
    pub pairs: usize,
    pub excluded: usize,
}

/// Mean of `|predicted - actual| / actual`; pairs with `actual == 0` are
/// skipped and counted.
pub fn size_prediction_mape(pairs: &[(u64, u64)]) -> Mape {
    let used: Vec<f64> = pairs
        .iter()
        .filter(|(_, a)| *a > 0)
        .map(|&(p, a)| (p as f64 - a as f64).abs() / a as f64)
        .collect();
    Mape {
        value: (!used.is_empty()).then(|| used.iter().sum::<f64>() / used.len() as f64),
        pairs: used.len(),
        excluded: pairs.len() - used.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTripResult {
    pub sample_id: String,
    pub round_trip_ok: bool,
    pub bleu: f64,
    pub exact_match: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub diagnostics: String,
}

/// Lowers `candidate_ir` back to assembly and compares it to the original.
pub fn round_trip<B: Backend + ?Sized>(
    sample_id: &str,
    original_asm: &str,
    candidate_ir: &str,
    backend: &B,
    timeout: Duration,
) -> Result<RoundTripResult, ToolchainError> {
    let out = backend.lower(candidate_ir, Emit::Assembly, timeout)?;
    Ok(match out.text().filter(|_| out.is_ok()) {
        Some(asm) => RoundTripResult {
            sample_id: sample_id.to_string(),
            round_trip_ok: true,
            bleu: bleu_text(original_asm, asm),
            exact_match: asm == original_asm,
            diagnostics: String::new(),
        },
        None => RoundTripResult {
            sample_id: sample_id.to_string(),
            round_trip_ok: false,
            bleu: 0.0,
            exact_match: false,
            diagnostics: out.diagnostics,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisassemblyScore {
    pub n_samples: usize,
    pub n_round_trips: usize,
    pub n_exact: usize,
    /// Failed round trips count as BLEU 0.
    pub mean_bleu: f64,
    /// Mean over successful round trips only.
    pub mean_bleu_round_trips: f64,
}

pub fn score_disassembly(results: &[RoundTripResult]) -> DisassemblyScore {
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let all: Vec<f64> = results.iter().map(|r| r.bleu).collect();
    let ok: Vec<f64> = results.iter().filter(|r| r.round_trip_ok).map(|r| r.bleu).collect();
    DisassemblyScore {
        n_samples: results.len(),
        n_round_trips: ok.len(),
        n_exact: results.iter().filter(|r| r.exact_match).count(),
        mean_bleu: mean(&all),
        mean_bleu_round_trips: mean(&ok),
    }
}

impl DisassemblyScore {
    pub fn to_table(&self) -> String {
        let n = self.n_samples.max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(s, "{:<28}{:>10}", "samples", self.n_samples);
        let _ = writeln!(
            s,
            "{:<28}{:>10}  ({:.2}%)",
            "round trips",
            self.n_round_trips,
            100.0 * self.n_round_trips as f64 / n
        );
        let _ = writeln!(s, "{:<28}{:>10.4}", "round trip BLEU", self.mean_bleu);
        let _ = writeln!(s, "{:<28}{:>10.4}", "BLEU (round trips only)", self.mean_bleu_round_trips);
        let _ = writeln!(
            s,
            "{:<28}{:>10}  ({:.2}%)",
            "round trip exact match",
            self.n_exact,
            100.0 * self.n_exact as f64 / n
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolchain::{MockBackend, MockModule};

    fn pair(c: u64, oz: u64) -> SizePair {
        SizePair {
            program_id: format!("p{c}"),
            candidate: c,
            oz,
        }
    }

    #[test]
    fn equal_sizes_score_zero() {
        let s = score_flag_tuning(&[pair(53, 53)], 0);
        assert_eq!((s.zero_shot_improvement, s.n_improved, s.n_regressed), (0.0, 0, 0));
    }

    #[test]
    fn zero_oz_is_excluded_with_a_warning() {
        let s = score_flag_tuning(&[pair(5, 0), pair(9, 10)], 1);
        assert_eq!(s.n_programs, 3);
        assert_eq!(s.n_excluded, 2);
        assert_eq!(s.warnings.len(), 1);
        assert_eq!(s.ratios, vec![1.0, 0.9, 1.0]);
    }

    #[test]
    fn mape_skips_zero_actuals() {
        let m = size_prediction_mape(&[(5, 0), (53, 53)]);
        assert_eq!(m.value, Some(0.0));
        assert_eq!((m.pairs, m.excluded), (1, 1));
        assert_eq!(size_prediction_mape(&[]).value, None);
    }

    #[test]
    fn mock_round_trip() {
        let ir = "define @f: a b\n";
        let asm = MockModule::parse(ir).unwrap().to_assembly();
        let t = Duration::from_secs(1);
        let r = round_trip("s", &asm, ir, &MockBackend, t).unwrap();
        assert!(r.round_trip_ok && r.exact_match && r.bleu == 1.0);
        let r = round_trip("s", &asm, "garbage", &MockBackend, t).unwrap();
        assert!(!r.round_trip_ok && !r.exact_match && r.bleu == 0.0);
        let r = round_trip("s", &asm, "define @f: a c\n", &MockBackend, t).unwrap();
        assert!(r.round_trip_ok && !r.exact_match && r.bleu < 1.0 && r.bleu > 0.0);
    }

    #[test]
    fn disassembly_means_report_both_populations() {
        let r = |ok, bleu| RoundTripResult {
            sample_id: String::new(),
            round_trip_ok: ok,
            bleu,
            exact_match: bleu == 1.0,
            diagnostics: String::new(),
        };
        let s = score_disassembly(&[r(true, 1.0), r(true, 0.5), r(false, 0.0), r(false, 0.0)]);
        assert_eq!(s.mean_bleu, 0.375);
        assert_eq!(s.mean_bleu_round_trips, 0.75);
        assert_eq!((s.n_round_trips, s.n_exact), (2, 1));
    }
}
