//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Set CADENZA_UPDATE_GOLDEN=1 to rewrite the golden files.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};
use tower::ServiceExt;

use cadenza_core::agent::{Agent, Attachment, IntentKind, MemoryKind, Module, Session, SteppingClock, StubBackend};
use cadenza_core::align::{
    align_audio, align_symbolic, fit_gmm, viterbi, AudioAlignConfig, AudioObservation, EmConfig, SymbolicAlignConfig,
};
use cadenza_core::dsp::{baseline_transcribe, compute_cqt, AudioBuffer, CqtConfig};
use cadenza_core::eval::{evaluate_performance, EvalConfig, MeasureEvaluation};
use cadenza_core::formats::{
    export_midi, parse_musicxml, render_score, score_to_reference, PerfNote, PerformanceNotes,
};
use cadenza_core::metrics::{lcs_len, levenshtein};
use cadenza_core::pipeline::default_bank;
use cadenza_core::retrieval::{index_library, match_implicit, search_explicit, Probe};
use cadenza_core::score::{concat_measures, parse_abc, serialize_abc, split_measures, Score};
use cadenza_service::{build_agent, router, state_with_agent, Config};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const LIBRARY_SEED: u64 = 2024;
const LIBRARY_SIZE: usize = 50;
const MEASURE_37: &str = r#"{"measure_id":37,"eva_all":0.9252619743347168,"eva_note":1.0,"eva_speed":1.0,"eva_stability":0.7282252907752991,"eva_tempo_sync":1.0,"extra_count":0,"matched_count":2,"missing_count":0}"#;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("viterbi matches exhaustive enumeration", c01_viterbi),
        ("levenshtein and lcs match recursive oracles", c02_edit_oracles),
        ("em log-likelihood monotone, two clusters recovered", c03_em),
        ("cqt bin-centre sweep", c04_cqt),
        ("abc serialize and split/concat round trips", c05_round_trips),
        ("symbolic self-alignment", c06_self_alignment),
        ("deletions and wrong notes detected", c07_perturbations),
        ("end-to-end audio alignment", c08_audio),
        ("evaluation record schema", c09_eval_schema),
        ("library retrieval", c10_retrieval),
        ("agent golden dialogue", c11_agent),
        ("service contract", c12_service),
    ];
    let only: Option<Vec<usize>> = std::env::var("CADENZA_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name} ({detail}; {secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name} ({detail}; {secs:.2}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn c01_viterbi() -> Outcome {
    const TOL: f64 = 1e-9;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..500 {
        let t_len = rng.random_range(1..=6);
        let s = rng.random_range(1..=5);
        // Every other instance uses small integers so exact ties are common.
        let integer = case % 2 == 0;
        let draw =
            |rng: &mut ChaCha8Rng| if integer { -(rng.random_range(0..4) as f64) } else { -rng.random::<f64>() * 5.0 };
        let init: Vec<f64> = (0..s).map(|_| draw(&mut rng)).collect();
        let trans: Vec<Vec<f64>> = (0..s).map(|_| (0..s).map(|_| draw(&mut rng)).collect()).collect();
        let obs: Vec<Vec<f64>> = (0..t_len).map(|_| (0..s).map(|_| draw(&mut rng)).collect()).collect();

        let (best, expected) = brute_force(&obs, &init, &trans, TOL);
        let decoded = viterbi(&obs, &init, &trans).map_err(|e| format!("case {case}: {e}"))?;
        ensure!((decoded.log_prob - best).abs() <= TOL, "case {case}: log prob {} vs oracle {best}", decoded.log_prob);
        ensure!(decoded.path == expected, "case {case}: path {:?} vs oracle {:?}", decoded.path, expected);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok("500 instances".into())
}

/// Best score over all S^T paths and, among the optimal paths, the one that
/// is smallest when compared from the last frame backwards.
fn brute_force(obs: &[Vec<f64>], init: &[f64], trans: &[Vec<f64>], tol: f64) -> (f64, Vec<usize>) {
    let t_len = obs.len();
    let s = init.len();
    let mut all = Vec::new();
    let mut path = vec![0usize; t_len];
    loop {
        let mut score = init[path[0]] + obs[0][path[0]];
        for t in 1..t_len {
            score += trans[path[t - 1]][path[t]] + obs[t][path[t]];
        }
        all.push((score, path.clone()));
        let mut k = 0;
        while k < t_len && path[k] == s - 1 {
            path[k] = 0;
            k += 1;
        }
        if k == t_len {
            break;
        }
        path[k] += 1;
    }
    let best = all.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let chosen = all
        .into_iter()
        .filter(|(v, _)| *v >= best - tol)
        .map(|(_, p)| p)
        .min_by(|a, b| a.iter().rev().cmp(b.iter().rev()))
        .expect("at least one path");
    (best, chosen)
}

// ---------------------------------------------------------------- 2

fn c02_edit_oracles() -> Outcome {
    let mut strings = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..6 {
        frontier = frontier.iter().flat_map(|s| ['a', 'b', 'c'].map(|c| format!("{s}{c}"))).collect();
        strings.extend(frontier.iter().cloned());
    }
    let mut pairs = 0usize;
    for a in &strings {
        let a_chars: Vec<char> = a.chars().collect();
        for b in &strings {
            let b_chars: Vec<char> = b.chars().collect();
            let want = lev_recursive(&a_chars, &b_chars);
            let got = levenshtein(a, b);
            ensure!(got == want, "levenshtein({a:?}, {b:?}) = {got}, oracle {want}");
            pairs += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let word = |rng: &mut ChaCha8Rng| -> Vec<char> {
            let n = rng.random_range(0..=10);
            (0..n).map(|_| ['a', 'b', 'c', 'd'][rng.random_range(0..4)]).collect()
        };
        let a = word(&mut rng);
        let b = word(&mut rng);
        let want = lcs_recursive(&a, &b);
        ensure!(lcs_len(&a, &b) == want, "lcs({a:?}, {b:?}) = {}, oracle {want}", lcs_len(&a, &b));
    }
    Ok(format!("{pairs} levenshtein pairs, 200 lcs pairs"))
}

fn lev_recursive(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
        let v = sub.min(go(a, b, i - 1, j, memo) + 1).min(go(a, b, i, j - 1, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(a, b, a.len(), b.len(), &mut HashMap::new())
}

fn lcs_recursive(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        let key = (a.len(), b.len());
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let v =
            if a[0] == b[0] { 1 + go(&a[1..], &b[1..], memo) } else { go(&a[1..], b, memo).max(go(a, &b[1..], memo)) };
        memo.insert(key, v);
        v
    }
    go(a, b, &mut HashMap::new())
}

// ---------------------------------------------------------------- 3

fn c03_em() -> Outcome {
    const MONOTONE_TOL: f64 = 1e-9;
    const MEAN_TOL: f64 = 0.1;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(4.0..8.0);
        let b = [a[0] + dist * angle.cos(), a[1] + dist * angle.sin()];
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut data = Vec::new();
        for centre in [a, b] {
            for _ in 0..600 {
                data.push(vec![centre[0] + noise.sample(&mut rng), centre[1] + noise.sample(&mut rng)]);
            }
        }
        data.shuffle(&mut rng);
        let fit = fit_gmm(&data, &EmConfig { components: 2, seed, ..EmConfig::default() })
            .map_err(|e| format!("seed {seed}: {e}"))?;
        for w in fit.log_likelihood.windows(2) {
            ensure!(w[1] >= w[0] - MONOTONE_TOL, "seed {seed}: log-likelihood fell from {} to {}", w[0], w[1]);
        }
        let m = &fit.params.means;
        let err = |p: &[f64], q: &[f64; 2]| (p[0] - q[0]).abs().max((p[1] - q[1]).abs());
        let straight = err(&m[0], &a).max(err(&m[1], &b));
        let swapped = err(&m[0], &b).max(err(&m[1], &a));
        let e = straight.min(swapped);
        ensure!(e <= MEAN_TOL, "seed {seed}: mean error {e:.4}");
        worst = worst.max(e);
    }
    Ok(format!("20 datasets, worst mean error {worst:.4}"))
}

// ---------------------------------------------------------------- 4

fn c04_cqt() -> Outcome {
    let config = CqtConfig::default();
    let sr = config.sample_rate;
    let mut hits = 0;
    let mut misses = Vec::new();
    let mut bin_440 = None;
    for k in 0..config.bins {
        let f = config.center_frequency(k);
        let audio = sine(f, sr, sr as usize);
        let spec = compute_cqt(&audio, &config).map_err(|e| e.to_string())?;
        let mid = spec.frames() / 2;
        let ok = (mid - 2..=mid + 2).all(|t| argmax(spec.row(t)) == k);
        if ok {
            hits += 1;
        } else {
            misses.push(k);
        }
        if (f - 440.0).abs() < 1e-9 {
            bin_440 = Some(k);
        }
    }
    let spec = compute_cqt(&sine(440.0, sr, sr as usize), &config).map_err(|e| e.to_string())?;
    let mid = spec.frames() / 2;
    ensure!(argmax(spec.row(mid)) == 48, "440 Hz peaks in bin {}", argmax(spec.row(mid)));
    ensure!(bin_440 == Some(48), "bin centred on 440 Hz is {bin_440:?}");
    ensure!(hits * 100 >= 95 * config.bins, "{hits}/{} bins, misses {misses:?}", config.bins);
    Ok(format!("{hits}/{} bins", config.bins))
}

fn sine(freq: f64, sr: u32, len: usize) -> AudioBuffer {
    let samples = (0..len).map(|i| 0.5 * (std::f64::consts::TAU * freq * i as f64 / f64::from(sr)).sin()).collect();
    AudioBuffer::new(samples, sr).unwrap()
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

// ---------------------------------------------------------------- 5

fn c05_round_trips() -> Outcome {
    let corpus = common::corpus();
    ensure!(corpus.len() == 20, "corpus has {} pieces", corpus.len());
    for (name, _, score) in &corpus {
        let text = serialize_abc(score).map_err(|e| format!("{name}: {e}"))?;
        let back = parse_abc(&text).map_err(|e| format!("{name}: reparse: {e}"))?;
        ensure!(score.event_equivalent(&back), "{name}: serialize/parse changed the events");
        let parts = split_measures(score).map_err(|e| format!("{name}: {e}"))?;
        let joined = concat_measures(&parts).map_err(|e| format!("{name}: {e}"))?;
        ensure!(score.event_equivalent(&joined), "{name}: split/concat changed the events");
    }
    Ok("20 pieces".into())
}

// ---------------------------------------------------------------- 6

fn c06_self_alignment() -> Outcome {
    let mut events = 0;
    for (name, _, score) in common::corpus() {
        let reference = score_to_reference(&score, 120.0);
        let notes = render_score(&score, 120.0);
        let a =
            align_symbolic(&notes, &reference, &SymbolicAlignConfig::default()).map_err(|e| format!("{name}: {e}"))?;
        ensure!(
            a.matched_events() == reference.len(),
            "{name}: {} of {} events matched",
            a.matched_events(),
            reference.len()
        );
        ensure!(a.missing.is_empty() && a.extra.is_empty(), "{name}: missing {:?} extra {:?}", a.missing, a.extra);
        let report = evaluate_performance(&name, &reference, &notes, &a, &EvalConfig::default());
        if let Some(m) = report.measures.iter().find(|m| m.eva_note != 1.0) {
            return Err(format!("{name}: measure {} eva_note {}", m.measure_id, m.eva_note));
        }
        events += reference.len();
    }
    Ok(format!("{events} events across 20 pieces"))
}

// ---------------------------------------------------------------- 7

fn c07_perturbations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pieces = 0;
    let mut deleted_total = 0;
    for (name, _, score) in common::corpus() {
        if !common::is_monophonic(&score) {
            continue;
        }
        pieces += 1;
        let reference = score_to_reference(&score, 120.0);
        let notes = render_score(&score, 120.0);
        ensure!(
            notes.len() == reference.len(),
            "{name}: monophonic rendering has {} notes for {} events",
            notes.len(),
            reference.len()
        );
        let cfg = SymbolicAlignConfig::default();

        // Deletions: 10% of the notes, rounded, at least one.
        let k = ((notes.len() as f64 * 0.1).round() as usize).max(1);
        let mut idx: Vec<usize> = (0..notes.len()).collect();
        idx.shuffle(&mut rng);
        let mut gone: Vec<usize> = idx[..k].to_vec();
        gone.sort_unstable();
        let kept = PerformanceNotes::new(
            notes.notes.iter().enumerate().filter(|(i, _)| gone.binary_search(i).is_err()).map(|(_, n)| *n).collect(),
        );
        let a = align_symbolic(&kept, &reference, &cfg).map_err(|e| format!("{name}: {e}"))?;
        ensure!(a.missing.len() == k, "{name}: deleted {k}, aligner reports {} missing", a.missing.len());
        ensure!(a.extra.is_empty(), "{name}: deletions produced extra notes {:?}", a.extra);
        deleted_total += k;

        // One wrong note: a tritone away, at a position whose neighbours do
        // not share the new pitch.
        let pitches: Vec<u8> = notes.notes.iter().map(|n| n.pitch).collect();
        let candidates: Vec<usize> = (0..pitches.len())
            .filter(|&i| {
                let shifted = pitches[i] + 6;
                (i.saturating_sub(2)..(i + 3).min(pitches.len())).all(|j| pitches[j] != shifted)
            })
            .collect();
        ensure!(!candidates.is_empty(), "{name}: no position for a wrong note");
        let pos = candidates[rng.random_range(0..candidates.len())];
        let mut wrong = notes.clone();
        wrong.notes[pos].pitch += 6;
        let a = align_symbolic(&wrong, &reference, &cfg).map_err(|e| format!("{name}: {e}"))?;
        ensure!(a.extra == vec![pos], "{name}: wrong note {pos}, extra {:?}", a.extra);
        ensure!(a.missing == vec![pos], "{name}: wrong note {pos}, missing {:?}", a.missing);
    }
    ensure!(pieces >= 5, "only {pieces} monophonic pieces");
    Ok(format!("{pieces} monophonic pieces, {deleted_total} deletions"))
}

// ---------------------------------------------------------------- 8

fn c08_audio() -> Outcome {
    const LEAD: f64 = 0.5;
    const MIN_MATCHED: f64 = 0.9;
    const MAX_MEAN_ERROR: f64 = 0.05;
    let start = Instant::now();
    let (name, _, score) =
        common::corpus().into_iter().find(|(n, _, _)| n.starts_with("20_")).ok_or("piece 20 missing")?;
    ensure!(score.measures.len() == 16 && common::is_monophonic(&score), "{name} is not a 16-measure monophonic piece");
    let reference = score_to_reference(&score, 100.0);
    let notes = render_score(&score, 100.0);
    let audio = common::render_audio(&notes, LEAD);
    let bank = default_bank().map_err(|e| e.to_string())?;
    let tr = baseline_transcribe(&audio).map_err(|e| e.to_string())?;
    let obs = AudioObservation::from_transcription(&tr, &bank.pca).map_err(|e| e.to_string())?;
    let a = align_audio(&obs, &reference, &bank, &AudioAlignConfig::default()).map_err(|e| e.to_string())?;
    let matched = a.matched_events();
    let errors: Vec<f64> = a
        .matched
        .iter()
        .filter_map(|&(_, s)| a.onsets_sec.get(&s).map(|t| (t - (reference.events[s].onset_sec + LEAD)).abs()))
        .collect();
    ensure!(!errors.is_empty(), "no aligned onsets");
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let elapsed = start.elapsed();
    let detail = format!("{matched}/{} matched, mean onset error {:.1} ms", reference.len(), mean * 1000.0);
    ensure!(matched as f64 >= MIN_MATCHED * reference.len() as f64, "{detail}");
    ensure!(mean < MAX_MEAN_ERROR, "{detail}");
    ensure!(elapsed < Duration::from_secs(60), "{detail}, took {elapsed:?}");
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn c09_eval_schema() -> Outcome {
    let m: MeasureEvaluation = serde_json::from_str(MEASURE_37).map_err(|e| e.to_string())?;
    let out = serde_json::to_string(&m).map_err(|e| e.to_string())?;
    ensure!(out == MEASURE_37, "re-serialized as {out}");
    let keys: Vec<String> = match serde_json::to_value(&m).unwrap() {
        Value::Object(map) => map.keys().cloned().collect(),
        _ => unreachable!(),
    };
    let want = [
        "measure_id",
        "eva_all",
        "eva_note",
        "eva_speed",
        "eva_stability",
        "eva_tempo_sync",
        "extra_count",
        "matched_count",
        "missing_count",
    ];
    let mut sorted_want: Vec<&str> = want.to_vec();
    sorted_want.sort_unstable();
    ensure!(keys == sorted_want, "fields {keys:?}");
    ensure!(out.find("eva_stability").unwrap() < out.find("eva_tempo_sync").unwrap(), "field order changed");
    Ok("measure 37 byte-identical".into())
}

// ---------------------------------------------------------------- 10

fn probe(line: &[i32]) -> Probe {
    Probe::Notes(PerformanceNotes::new(
        line.iter()
            .enumerate()
            .map(|(i, &p)| PerfNote {
                pitch: p as u8,
                onset_sec: i as f64 * 0.25,
                offset_sec: i as f64 * 0.25 + 0.2,
                velocity: 80,
            })
            .collect(),
    ))
}

fn c10_retrieval() -> Outcome {
    const MIN_WRONG_NOTE_TOP1: usize = 45;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pieces = common::write_library(dir.path(), LIBRARY_SIZE, LIBRARY_SEED);
    let index = index_library(dir.path()).map_err(|e| e.to_string())?;
    ensure!(
        index.entries.len() == LIBRARY_SIZE,
        "indexed {} entries, skipped {:?}",
        index.entries.len(),
        index.skipped
    );

    for p in &pieces {
        let hits = search_explicit(&index, &p.title);
        let top = hits.first().ok_or_else(|| format!("no hit for {:?}", p.title))?;
        ensure!(top.entry_id == p.id && top.score == 1.0, "{:?}: top hit {} ({})", p.title, top.entry_id, top.score);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut top1 = 0;
    for p in &pieces {
        let line = &p.line[..8];
        let up: Vec<i32> = line.iter().map(|x| x + 2).collect();
        let base = match_implicit(&index, &probe(line)).map_err(|e| e.to_string())?;
        let moved = match_implicit(&index, &probe(&up)).map_err(|e| e.to_string())?;
        ensure!(base == moved, "{}: transposed probe changed the ranking", p.id);

        let mut wrong = line.to_vec();
        let pos = rng.random_range(0..wrong.len());
        let delta = rng.random_range(1..=3) * if rng.random_bool(0.5) { 1 } else { -1 };
        wrong[pos] += delta;
        let hits = match_implicit(&index, &probe(&wrong)).map_err(|e| e.to_string())?;
        if hits.first().is_some_and(|h| h.entry_id == p.id) {
            top1 += 1;
        }
    }
    ensure!(top1 >= MIN_WRONG_NOTE_TOP1, "wrong-note probes top-1 for {top1}/{LIBRARY_SIZE}");
    Ok(format!("50/50 explicit, transposition invariant, wrong-note top-1 {top1}/{LIBRARY_SIZE}"))
}

// ---------------------------------------------------------------- 11

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn update_golden() -> bool {
    std::env::var_os("CADENZA_UPDATE_GOLDEN").is_some()
}

/// Compares `actual` with the golden file, or rewrites it on request.
fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if update_golden() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == actual {
        return Ok(());
    }
    let line = want
        .lines()
        .zip(actual.lines())
        .position(|(a, b)| a != b)
        .unwrap_or(want.lines().count().min(actual.lines().count()));
    Err(format!("{name} differs from golden at line {}", line + 1))
}

fn etude() -> (Vec<u8>, Score) {
    let xml = std::fs::read(common::data_dir().join("agent/scale_etude.musicxml")).unwrap();
    let score = parse_musicxml(std::str::from_utf8(&xml).unwrap()).unwrap();
    (xml, score)
}

fn etude_wav(tempo: f64) -> Vec<u8> {
    let (_, score) = etude();
    common::render_audio(&render_score(&score, tempo), 0.5).to_wav_bytes()
}

fn c11_agent() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    common::write_library(dir.path(), LIBRARY_SIZE, LIBRARY_SEED);
    let index = index_library(dir.path()).map_err(|e| e.to_string())?;
    let agent = Agent::new(Arc::new(StubBackend))
        .with_clock(Arc::new(SteppingClock::new(1_700_000_000_000, 1_000)))
        .with_library(index, Some(dir.path().to_path_buf()));
    let mut session = Session::in_memory("golden");
    let (xml, _) = etude();
    let script: Vec<(&str, Vec<Attachment>)> = vec![
        ("What interval results from inverting a diminished fifth?", vec![]),
        ("Give me a song of Kikujiro's Summer", vec![]),
        (
            "How is my tempo stability at 100 bpm?",
            vec![
                Attachment::from_file("performance.wav", etude_wav(100.0)).map_err(|e| e.to_string())?,
                Attachment::from_file("scale_etude.musicxml", xml).map_err(|e| e.to_string())?,
            ],
        ),
    ];
    let expected = [
        (IntentKind::Theory, vec![]),
        (IntentKind::RetrievalExplicit, vec![Module::Retrieval]),
        (
            IntentKind::PerformanceAnalysis,
            vec![Module::SymbolicCore, Module::AudioDsp, Module::HmmAlign, Module::PerfEval],
        ),
    ];
    let mut turns = Vec::new();
    for (k, ((message, attachments), (kind, modules))) in script.into_iter().zip(expected).enumerate() {
        let before = session.len();
        let out = agent.run_turn(&mut session, message, &attachments).map_err(|e| format!("turn {}: {e}", k + 1))?;
        ensure!(out.intent.kind == kind, "turn {}: routed to {:?}", k + 1, out.intent.kind);
        let mut required = out.intent.required_modules.clone();
        let mut modules = modules;
        required.sort();
        modules.sort();
        ensure!(required == modules, "turn {}: modules {:?}", k + 1, out.intent.required_modules);
        for step in &out.trace {
            ensure!(
                out.intent.required_modules.iter().any(|m| m.name() == step.module),
                "turn {}: {} ran outside the routed set",
                k + 1,
                step.module
            );
        }
        ensure!(session.len() == before + 3, "turn {}: memory grew by {}", k + 1, session.len() - before);
        turns.push(json!({
            "message": message,
            "attachments": attachments.iter().map(|a| json!({"kind": a.kind, "name": a.name})).collect::<Vec<_>>(),
            "turn": out.turn,
            "intent": out.intent,
            "trace": out.trace,
            "response": out.response,
            "memory_delta": out.memory_delta,
        }));
    }
    ensure!(session.len() == 9, "memory holds {} entries", session.len());
    let retrieved = session.query(Some(MemoryKind::RetrievedFile), 10);
    ensure!(
        retrieved.len() == 1 && retrieved[0].turn == 2,
        "retrieved_file entries {:?}",
        retrieved.iter().map(|e| e.turn).collect::<Vec<_>>()
    );
    let golden = serde_json::to_string_pretty(&json!({"turns": turns, "memory_len": session.len()})).unwrap() + "\n";
    check_golden("agent_dialogue.json", &golden)?;
    Ok("3 turns, 9 memory entries, golden identical".into())
}

// ---------------------------------------------------------------- 12

struct Multipart {
    boundary: &'static str,
    body: Vec<u8>,
}

impl Multipart {
    fn new() -> Self {
        Multipart { boundary: "cadenza-acceptance-boundary", body: Vec::new() }
    }

    fn file(mut self, field: &str, name: &str, data: &[u8]) -> Self {
        let head = format!(
            "--{}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"{name}\"\r\nContent-Type: application/octet-stream\r\n\r\n",
            self.boundary
        );
        self.body.extend_from_slice(head.as_bytes());
        self.body.extend_from_slice(data);
        self.body.extend_from_slice(b"\r\n");
        self
    }

    fn text(mut self, field: &str, value: &str) -> Self {
        let part =
            format!("--{}\r\nContent-Disposition: form-data; name=\"{field}\"\r\n\r\n{value}\r\n", self.boundary);
        self.body.extend_from_slice(part.as_bytes());
        self
    }

    fn request(mut self, uri: &str) -> Request<Body> {
        self.body.extend_from_slice(format!("--{}--\r\n", self.boundary).as_bytes());
        Request::post(uri)
            .header("content-type", format!("multipart/form-data; boundary={}", self.boundary))
            .body(Body::from(self.body))
            .unwrap()
    }
}

fn json_request(method: &str, uri: &str, body: &Value) -> Request<Body> {
    Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

struct Contract {
    app: axum::Router,
    schemas: BTreeMap<String, jsonschema::Validator>,
    /// Golden pairs in request order: name, request summary, status, body.
    pairs: Vec<Value>,
    session: Option<String>,
}

impl Contract {
    async fn call(&mut self, name: &str, summary: Value, req: Request<Body>, schema: &str) -> Result<Value, String> {
        let resp = self.app.clone().oneshot(req).await.map_err(|e| e.to_string())?;
        let status = resp.status();
        let bytes = resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes();
        let body: Value = serde_json::from_slice(&bytes).map_err(|e| format!("{name}: body is not JSON: {e}"))?;
        let schema = if status.is_success() { schema } else { "api_error" };
        let validator = self.schemas.get(schema).ok_or_else(|| format!("no schema {schema}"))?;
        if let Some(err) = validator.iter_errors(&body).next() {
            return Err(format!("{name}: {status} response violates {schema}: {err} at {}", err.instance_path()));
        }
        let mut recorded = body.clone();
        if let Some(id) = &self.session {
            recorded = serde_json::from_str(&recorded.to_string().replace(id.as_str(), "<session>")).unwrap();
        }
        self.pairs.push(json!({"name": name, "request": summary, "status": status.as_u16(), "schema": schema, "response": recorded}));
        Ok(body)
    }
}

fn load_schemas() -> Result<BTreeMap<String, jsonschema::Validator>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(cadenza_service::schema_dir()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".schema.json")) else {
            continue;
        };
        let doc: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).map_err(|e| format!("{name}: {e}"))?;
        let v = jsonschema::validator_for(&doc).map_err(|e| format!("{name}: {e}"))?;
        out.insert(name.to_string(), v);
    }
    Ok(out)
}

fn c12_service() -> Outcome {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap().block_on(service_contract())
}

async fn service_contract() -> Outcome {
    let library = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sessions = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pieces = common::write_library(library.path(), LIBRARY_SIZE, LIBRARY_SEED);
    let config = Config {
        library_path: Some(library.path().to_path_buf()),
        sessions_path: sessions.path().to_path_buf(),
        ..Config::default()
    };
    let clock = Arc::new(SteppingClock::new(1_700_000_000_000, 1_000));
    let agent = build_agent(&config, Arc::new(StubBackend), clock).map_err(|e| e.to_string())?;
    let state = state_with_agent(config.clone(), agent);
    let mut c = Contract { app: router(state), schemas: load_schemas()?, pairs: Vec::new(), session: None };

    let (_, tune, score) =
        common::corpus().into_iter().find(|(n, _, _)| n.starts_with("01_")).ok_or("piece 01 missing")?;
    let midi = export_midi(&render_score(&score, 120.0), 480, 120.0);
    let short = parse_abc("X:1\nT:Short\nM:4/4\nL:1/4\nK:C\nC E G c|\n").unwrap();
    let wav = common::render_audio(&render_score(&short, 120.0), 0.25).to_wav_bytes();

    c.call("health", json!({"method": "GET", "uri": "/health"}), get("/health"), "health").await?;
    let notes = c
        .call(
            "transcribe",
            json!({"method": "POST", "uri": "/transcribe", "multipart": {"audio": "short.wav"}}),
            Multipart::new().file("audio", "short.wav", &wav).request("/transcribe"),
            "performance_notes",
        )
        .await?;
    let pitches: Vec<u64> = notes["notes"].as_array().unwrap().iter().map(|n| n["pitch"].as_u64().unwrap()).collect();
    ensure!(pitches == vec![60, 64, 67, 72], "transcribed pitches {pitches:?}");

    let align_form = || {
        Multipart::new()
            .file("score", "01_plain_reel.abc", tune.as_bytes())
            .file("performance", "self.mid", &midi)
            .text("tempo", "120")
    };
    let aligned = c
        .call(
            "align",
            json!({"method": "POST", "uri": "/align", "multipart": {"score": "01_plain_reel.abc", "performance": "self.mid", "tempo": "120"}}),
            align_form().request("/align"),
            "alignment_result",
        )
        .await?;
    ensure!(aligned["missing"].as_array().unwrap().is_empty(), "self-alignment reports missing events");
    let report = c
        .call(
            "evaluate",
            json!({"method": "POST", "uri": "/evaluate", "multipart": {"score": "01_plain_reel.abc", "performance": "self.mid", "tempo": "120"}}),
            align_form().request("/evaluate"),
            "evaluation_report",
        )
        .await?;
    let measures = report["measures"].as_array().unwrap();
    ensure!(!measures.is_empty(), "report has no measures");
    ensure!(measures.iter().all(|m| m["eva_note"] == json!(1.0)), "eva_note below 1.0 on the self-rendered fixture");
    let again = c.app.clone().oneshot(align_form().request("/evaluate")).await.map_err(|e| e.to_string())?;
    let again: Value = serde_json::from_slice(&again.into_body().collect().await.unwrap().to_bytes()).unwrap();
    ensure!(again == report, "/evaluate is not idempotent");

    let hits = c
        .call(
            "library_search",
            json!({"method": "GET", "uri": "/library/search?q=Kikujiro%27s%20Summer"}),
            get("/library/search?q=Kikujiro%27s%20Summer"),
            "hit_list",
        )
        .await?;
    ensure!(hits["hits"][0]["entry_id"] == json!(pieces[0].id), "search top hit {}", hits["hits"][0]);
    let probe_notes = match probe(&pieces[3].line[..8]) {
        Probe::Notes(n) => n,
        Probe::Score(_) => unreachable!(),
    };
    let body = serde_json::to_value(&probe_notes).unwrap();
    let hits = c
        .call(
            "library_match",
            json!({"method": "POST", "uri": "/library/match", "json": body}),
            json_request("POST", "/library/match", &body),
            "hit_list",
        )
        .await?;
    ensure!(hits["hits"][0]["entry_id"] == json!(pieces[3].id), "match top hit {}", hits["hits"][0]);

    let created = c
        .call(
            "agent_session",
            json!({"method": "POST", "uri": "/agent/session"}),
            Request::post("/agent/session").body(Body::empty()).unwrap(),
            "session",
        )
        .await?;
    let sid = created["session_id"].as_str().unwrap().to_string();
    c.session = Some(sid.clone());
    if let Some(last) = c.pairs.last_mut() {
        last["response"]["session_id"] = json!("<session>");
    }
    let text = json!({"session_id": sid, "text": "What interval results from inverting a diminished fifth?"});
    let reply = c
        .call(
            "agent_message_text",
            json!({"method": "POST", "uri": "/agent/message", "json": {"session_id": "<session>", "text": text["text"]}}),
            json_request("POST", "/agent/message", &text),
            "message_reply",
        )
        .await?;
    ensure!(reply["intent"]["kind"] == json!("theory"), "routed to {}", reply["intent"]["kind"]);
    let reply = c
        .call(
            "agent_message_files",
            json!({"method": "POST", "uri": "/agent/message", "multipart": {"session_id": "<session>", "text": "How accurate was my performance?", "score": "01_plain_reel.abc", "performance": "self.mid"}}),
            Multipart::new()
                .text("session_id", &sid)
                .text("text", "How accurate was my performance?")
                .file("score", "01_plain_reel.abc", tune.as_bytes())
                .file("performance", "self.mid", &midi)
                .request("/agent/message"),
            "message_reply",
        )
        .await?;
    ensure!(reply["intent"]["kind"] == json!("performance_analysis"), "routed to {}", reply["intent"]["kind"]);
    let uri = format!("/agent/memory?session_id={sid}&kind=module_output&limit=1");
    let memory = c
        .call(
            "agent_memory",
            json!({"method": "GET", "uri": "/agent/memory?session_id=<session>&kind=module_output&limit=1"}),
            get(&uri),
            "memory_reply",
        )
        .await?;
    ensure!(memory["entries"].as_array().unwrap().len() == 1, "memory limit not applied");
    ensure!(memory["entries"][0]["turn"] == json!(2), "memory is not most-recent first");

    let errors: [(&str, Value, Request<Body>, StatusCode); 4] = [
        (
            "agent_message_unknown_session",
            json!({"method": "POST", "uri": "/agent/message", "json": {"session_id": "nosuchsession", "text": "hello"}}),
            json_request("POST", "/agent/message", &json!({"session_id": "nosuchsession", "text": "hello"})),
            StatusCode::NOT_FOUND,
        ),
        (
            "evaluate_missing_performance",
            json!({"method": "POST", "uri": "/evaluate", "multipart": {"score": "01_plain_reel.abc"}}),
            Multipart::new().file("score", "01_plain_reel.abc", tune.as_bytes()).request("/evaluate"),
            StatusCode::BAD_REQUEST,
        ),
        (
            "library_match_malformed",
            json!({"method": "POST", "uri": "/library/match", "body": "not json"}),
            Request::post("/library/match")
                .header("content-type", "application/json")
                .body(Body::from("not json"))
                .unwrap(),
            StatusCode::BAD_REQUEST,
        ),
        ("unknown_route", json!({"method": "GET", "uri": "/nope"}), get("/nope"), StatusCode::NOT_FOUND),
    ];
    for (name, summary, req, want) in errors {
        c.call(name, summary, req, "api_error").await?;
        let got = c.pairs.last().unwrap()["status"].as_u64().unwrap();
        ensure!(got == u64::from(want.as_u16()), "{name}: status {got}, expected {want}");
    }

    // A small body cap turns an oversized upload into 413.
    let small = Config { max_body_bytes: 1024, ..config };
    let clock = Arc::new(SteppingClock::new(0, 1));
    let agent = build_agent(&small, Arc::new(StubBackend), clock).map_err(|e| e.to_string())?;
    let app = router(state_with_agent(small, agent));
    let big = json!({"notes": vec![json!({"pitch": 60, "onset_sec": 0.0, "offset_sec": 0.5, "velocity": 80}); 100]});
    let saved = std::mem::replace(&mut c.app, app);
    c.call(
        "library_match_too_large",
        json!({"method": "POST", "uri": "/library/match", "json": "100 notes, cap 1024 bytes"}),
        json_request("POST", "/library/match", &big),
        "hit_list",
    )
    .await?;
    c.app = saved;
    let got = c.pairs.last().unwrap()["status"].as_u64().unwrap();
    ensure!(got == 413, "oversized body answered {got}");

    let golden = serde_json::to_string_pretty(&Value::Array(c.pairs.clone())).unwrap() + "\n";
    check_golden("service_contract.json", &golden)?;
    Ok(format!("{} request/response pairs valid and golden", c.pairs.len()))
}
