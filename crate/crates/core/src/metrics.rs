//! Objective evaluation: mel-cepstral distortion, edit-distance error
//! rates over phoneme tokens, and embedding spread.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::adapt::{utterance_mcds, Checkpoint};
use crate::data::{oracle_transcribe, SyntheticSpec, Utterance};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::synth::{synthesize_expert_phonemes, synthesize_phonemes};

/// Cepstral order used unless a caller asks otherwise.
pub const DEFAULT_CEPSTRAL_ORDER: usize = 12;

/// Orthonormal DCT-II of one frame.
pub fn dct2(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let s: f64 = frame
                .iter()
                .enumerate()
                .map(|(i, &x)| x * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / nf).cos())
                .sum();
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            s * scale
        })
        .collect()
}

/// Frame-averaged mel-cepstral distortion in dB, coefficients `1..=order`.
/// Frames are taken as log-mel values.
pub fn mcd(y_ref: &Tensor<f64>, y_syn: &Tensor<f64>, order: usize) -> Result<f64> {
    Ok(mcd_frames(y_ref, y_syn, order)?.iter().sum::<f64>() / y_ref.rows() as f64)
}

/// Per-frame distortions.
pub fn mcd_frames(y_ref: &Tensor<f64>, y_syn: &Tensor<f64>, order: usize) -> Result<Vec<f64>> {
    if y_ref.shape() != y_syn.shape() || y_ref.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mcd",
            lhs: y_ref.shape().to_vec(),
            rhs: y_syn.shape().to_vec(),
        });
    }
    let (t, m) = y_ref.dims2()?;
    if t == 0 {
        return Err(Error::Validation("mcd needs at least one frame".into()));
    }
    if order == 0 || order >= m {
        return Err(Error::Validation(format!(
            "cepstral order {order} must lie in 1..{m}"
        )));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    Ok((0..t)
        .map(|r| {
            let a = dct2(y_ref.row_slice(r));
            let b = dct2(y_syn.row_slice(r));
            let d2: f64 = (1..=order).map(|i| (a[i] - b[i]).powi(2)).sum();
            k * (2.0 * d2).sqrt()
        })
        .collect())
}

/// Substitution, deletion, insertion and match counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub matches: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn ref_len(&self) -> usize {
        self.substitutions + self.deletions + self.matches
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.matches += o.matches;
    }

    /// `(S + D + I) / (S + D + C)`.
    pub fn wer(&self) -> Result<f64> {
        if self.ref_len() == 0 {
            return Err(Error::Validation("WER is undefined for an empty reference".into()));
        }
        Ok(self.errors() as f64 / self.ref_len() as f64)
    }

    /// `(S + D + I) / (S + D + I + C)`.
    pub fn mer(&self) -> Result<f64> {
        let denom = self.errors() + self.matches;
        if denom == 0 {
            return Err(Error::Validation("MER is undefined when both sequences are empty".into()));
        }
        Ok(self.errors() as f64 / denom as f64)
    }
}

/// Minimum-edit alignment counts. Among alignments with the fewest edits,
/// the one with the most substitutions is chosen, which fixes every count.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // cost is (edits, -substitutions), compared lexicographically
    let mut cost = vec![(0usize, 0isize); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = (usize::MAX, 0isize);
            if i > 0 && j > 0 {
                let (e, s) = cost[at(i - 1, j - 1)];
                let c = if reference[i - 1] == hyp[j - 1] { (e, s) } else { (e + 1, s - 1) };
                best = best.min(c);
            }
            if i > 0 {
                let (e, s) = cost[at(i - 1, j)];
                best = best.min((e + 1, s));
            }
            if j > 0 {
                let (e, s) = cost[at(i, j - 1)];
                best = best.min((e + 1, s));
            }
            cost[at(i, j)] = best;
        }
    }
    let (e, neg_s) = cost[at(n, m)];
    let s = (-neg_s) as usize;
    // D - I = n - m and D + I = e - s
    let d = ((e - s) as isize + n as isize - m as isize) / 2;
    let d = d as usize;
    let ins = e - s - d;
    EditCounts {
        substitutions: s,
        deletions: d,
        insertions: ins,
        matches: n - s - d,
    }
}

pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Validation("WER is undefined for an empty reference".into()));
    }
    edit_counts(reference, hyp).wer()
}

pub fn mer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    edit_counts(reference, hyp).mer()
}

/// Mean pairwise Euclidean distance among the given rows of a table.
pub fn embedding_spread(table: &Tensor<f32>, rows: &[usize]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Validation(format!(
            "embedding spread needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    for &r in rows {
        if r >= table.rows() {
            return Err(Error::InvalidPhoneme {
                index: r,
                capacity: table.rows(),
            });
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let d: f64 = table
                .row_slice(i)
                .iter()
                .zip(table.row_slice(j))
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Scores for one language within a report row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub language_id: String,
    pub mcd_db: f64,
    pub per_utterance_mcd: Vec<f64>,
    pub counts: EditCounts,
    pub wer: f64,
    pub mer: f64,
    pub n_utts: usize,
}

impl LanguageScore {
    pub fn new(language_id: &str, per_utterance_mcd: Vec<f64>, counts: EditCounts) -> Result<Self> {
        let n = per_utterance_mcd.len();
        if n == 0 {
            return Err(Error::Validation(format!("no probe utterances for {language_id}")));
        }
        Ok(LanguageScore {
            language_id: language_id.to_string(),
            mcd_db: per_utterance_mcd.iter().sum::<f64>() / n as f64,
            per_utterance_mcd,
            wer: counts.wer()?,
            mer: counts.mer()?,
            counts,
            n_utts: n,
        })
    }
}

/// One table row: a scenario label and one score per language. Multi-language
/// rows render as slash-separated cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub iters: u64,
    pub cepstral_order: usize,
    pub languages: Vec<LanguageScore>,
}

pub const REPORT_HEADER: &str = "scenario,iters,mcd_db,wer,mer,n_utts";

fn cell<F: Fn(&LanguageScore) -> String>(scores: &[LanguageScore], f: F) -> String {
    scores.iter().map(f).collect::<Vec<_>>().join("/")
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let l = &self.languages;
        format!(
            "{},{},{},{},{},{}",
            self.scenario,
            self.iters,
            cell(l, |s| format!("{:.4}", s.mcd_db)),
            cell(l, |s| format!("{:.4}", s.wer)),
            cell(l, |s| format!("{:.4}", s.mer)),
            cell(l, |s| s.n_utts.to_string()),
        )
    }

    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {} ({} iterations)", self.scenario, self.iters);
        let _ = writeln!(
            s,
            "mcd: teacher-forced, frame-aligned, orthonormal DCT-II, order {}",
            self.cepstral_order
        );
        let _ = writeln!(s, "wer/mer: phoneme tokens from the oracle transcriber");
        for l in &self.languages {
            let c = &l.counts;
            let _ = writeln!(
                s,
                "  {}: mcd {:.4} dB, wer {:.4}, mer {:.4}, n_utts {} (S={} D={} I={} C={})",
                l.language_id, l.mcd_db, l.wer, l.mer, l.n_utts, c.substitutions, c.deletions, c.insertions, c.matches
            );
        }
        s
    }
}

/// How probe utterances are synthesized for scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeOptions {
    /// Frame budget per input phoneme.
    pub frames_per_phoneme: usize,
    /// Synthesize with this speaker instead of the probe's own.
    pub speaker: Option<usize>,
    /// Use two-pass expert alignment with this speaker.
    pub expert: Option<usize>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            frames_per_phoneme: 16,
            speaker: None,
            expert: None,
        }
    }
}

/// Oracle transcription of one synthesized probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub counts: EditCounts,
    pub stopped: bool,
}

/// Synthesizes every probe and transcribes it with the oracle for the
/// synthesizing speaker's voice.
pub fn transcribe_probes(
    ckpt: &Checkpoint,
    probes: &[Utterance],
    spec: &SyntheticSpec,
    opts: ProbeOptions,
) -> Result<Vec<ProbeResult>> {
    probes
        .par_iter()
        .map(|u| {
            let speaker = opts.speaker.unwrap_or(u.speaker_id);
            let max_frames = opts.frames_per_phoneme * u.phonemes.len();
            let syn = match opts.expert {
                Some(e) => synthesize_expert_phonemes(ckpt, &u.phonemes, speaker, e, max_frames)?.1,
                None => synthesize_phonemes(ckpt, &u.phonemes, speaker, max_frames)?,
            };
            let hypothesis = oracle_transcribe(&syn.mel, spec, speaker)?;
            Ok(ProbeResult {
                counts: edit_counts(&u.phonemes, &hypothesis),
                reference: u.phonemes.clone(),
                hypothesis,
                stopped: syn.stopped,
            })
        })
        .collect()
}

/// Phoneme-level WER/MER of synthesized probes plus teacher-forced MCD of
/// the probes under their own speakers.
pub fn score_probes(
    ckpt: &Checkpoint,
    probes: &[Utterance],
    spec: &SyntheticSpec,
    language_id: &str,
    opts: ProbeOptions,
) -> Result<LanguageScore> {
    let results = transcribe_probes(ckpt, probes, spec, opts)?;
    let mut counts = EditCounts::default();
    for r in &results {
        counts.add(&r.counts);
    }
    LanguageScore::new(language_id, utterance_mcds(ckpt, probes)?, counts)
}

/// One report row; probes are grouped by their speaker's language, in the
/// checkpoint's language order. Probes of speakers the checkpoint does not
/// know are skipped.
pub fn evaluate_scenario(ckpt: &Checkpoint, probes: &[Utterance], spec: &SyntheticSpec) -> Result<EvalReport> {
    let mut languages = Vec::new();
    for lang in &ckpt.languages {
        let subset: Vec<Utterance> = probes
            .iter()
            .filter(|u| ckpt.registry.contains(u.speaker_id))
            .filter(|u| spec.voice(u.speaker_id).is_ok_and(|v| v.language_id == lang.language_id))
            .cloned()
            .collect();
        if !subset.is_empty() {
            languages.push(score_probes(ckpt, &subset, spec, &lang.language_id, ProbeOptions::default())?);
        }
    }
    for u in probes {
        spec.voice(u.speaker_id)?;
    }
    if languages.is_empty() {
        return Err(Error::Validation("no probes for any checkpoint language".into()));
    }
    Ok(EvalReport {
        scenario: ckpt.scenario_label(),
        iters: ckpt.total_steps(),
        cepstral_order: DEFAULT_CEPSTRAL_ORDER.min(ckpt.config.mel_channels - 1),
        languages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln_frame(c: &[f64]) -> Vec<f64> {
        // inverse orthonormal DCT-II
        let n = c.len() as f64;
        (0..c.len())
            .map(|i| {
                c.iter()
                    .enumerate()
                    .map(|(k, &ck)| {
                        let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                        s * ck * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n).cos()
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn dct_roundtrip() {
        let c = [0.3, -1.0, 2.0, 0.5, 0.0, 0.25];
        let back = dct2(&ln_frame(&c));
        for (a, b) in c.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_frame_is_coefficient_zero() {
        let c = dct2(&[2.0; 8]);
        assert!((c[0] - 2.0 * 8f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mcd_hand_examples() {
        let mut a = vec![0.0; 16];
        a[0] = 1.0;
        a[2] = 0.5;
        let mut b = a.clone();
        b[3] += 1.0;
        let ya = Tensor::from_rows(&[ln_frame(&a), ln_frame(&a)]).unwrap();
        let yb = Tensor::from_rows(&[ln_frame(&b), ln_frame(&b)]).unwrap();
        let v = mcd(&ya, &yb, 12).unwrap();
        assert!((v - 10.0 / std::f64::consts::LN_10 * 2f64.sqrt()).abs() < 1e-9);
        assert!((v - 6.1418).abs() < 1e-4);
        assert_eq!(mcd(&ya, &ya, 12).unwrap(), 0.0);
    }

    #[test]
    fn mcd_rejects_bad_input() {
        let a = Tensor::<f64>::zeros(&[2, 4]);
        assert!(mcd(&a, &Tensor::zeros(&[3, 4]), 2).is_err());
        assert!(mcd(&a, &a, 4).is_err());
        assert!(mcd(&a, &a, 0).is_err());
    }

    #[test]
    fn edit_examples() {
        let c = edit_counts(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!((c.substitutions, c.matches), (1, 2));
        assert_eq!(wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap(), 1.0 / 3.0);
        assert_eq!(mer(&["a", "b", "c"], &["a", "x", "c"]).unwrap(), 1.0 / 3.0);
        let c = edit_counts(&["a", "b"], &["a", "x", "b"]);
        assert_eq!((c.insertions, c.matches), (1, 2));
        assert_eq!(wer(&["a", "b"], &["a", "x", "b"]).unwrap(), 0.5);
        assert_eq!(mer(&["a", "b"], &["a", "x", "b"]).unwrap(), 1.0 / 3.0);
        assert_eq!(wer(&[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(mer(&[1, 2], &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn empty_sequences() {
        let e: [u8; 0] = [];
        assert!(wer(&e, &[1]).is_err());
        assert_eq!(mer(&e, &[1, 2]).unwrap(), 1.0);
        assert!(mer(&e, &e).is_err());
        assert_eq!(wer(&[1, 2], &e).unwrap(), 1.0);
        assert_eq!(wer(&[1], &[2, 3, 4]).unwrap(), 3.0);
    }

    #[test]
    fn spread_examples() {
        let t = Tensor::new(vec![3, 2], vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((embedding_spread(&t, &[0, 1]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(embedding_spread(&t, &[0, 2]).unwrap(), 0.0);
        assert!(embedding_spread(&t, &[0]).is_err());
        assert!(embedding_spread(&t, &[0, 5]).is_err());
    }

    #[test]
    fn report_cells_are_slash_separated() {
        let one = LanguageScore::new(
            "de",
            vec![1.0, 3.0],
            EditCounts { substitutions: 1, matches: 9, ..Default::default() },
        )
        .unwrap();
        let two = LanguageScore::new(
            "ko",
            vec![4.0],
            EditCounts { deletions: 2, matches: 8, ..Default::default() },
        )
        .unwrap();
        let r = EvalReport {
            scenario: "ENES2DE2KO".into(),
            iters: 500,
            cepstral_order: 12,
            languages: vec![one, two],
        };
        assert_eq!(r.csv_row(), "ENES2DE2KO,500,2.0000/4.0000,0.1000/0.2000,0.1000/0.2000,2/1");
        assert!(EvalReport::to_csv(std::slice::from_ref(&r)).starts_with(REPORT_HEADER));
        assert!(r.summary().contains("S=1 D=0 I=0 C=9"));
    }
}
