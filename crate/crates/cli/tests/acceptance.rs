//! One line per acceptance criterion. Exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::Array2;
use viewbridge::checkpoint::load_params;
use viewbridge::domain::{ViewId, ViewRole};
use viewbridge::encoder::FreezeMask;
use viewbridge::eval::{read_results_jsonl, top1_of};
use viewbridge::gradcheck::run_suite;
use viewbridge::objectives::{cross_entropy, ib_loss, supcon_loss};
use viewbridge::oracle::{ce_error, ib_error, supcon_error, topk_error};
use viewbridge::reference::{brute_force_sync_groups, random_manifest};
use viewbridge::rng::{substream, StreamRng};
use viewbridge::sync::{build_sync_groups, split_violations, stratified_split, DEFAULT_FRACTIONS};
use viewbridge::trainer::BaselineKind;
use viewbridge::TrainConfig;

const ORACLE_INSTANCES: usize = 100;
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_SECONDS: f64 = 10.0;

const FD_STEP: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const LOSS_GRAD_TOL: f64 = 1e-4;
const COMPOSITION_GRAD_TOL: f64 = 1e-3;
const GRAD_SECONDS: f64 = 60.0;

const CE_CLOSED_TOL: f64 = 1e-12;
const SUPCON_SAME_TOL: f64 = 1e-9;
const SUPCON_PAIR_TOL: f64 = 1e-12;
const IB_CLOSED_TOL: f64 = 1e-9;

const BASELINE_SEED: &str = "7";
const TARGET_MARGIN: f64 = 10.0;
const VIEW_MARGIN: f64 = 10.0;
const BASELINE_SECONDS: f64 = 15.0 * 60.0;

const SYNC_MANIFESTS: usize = 50;
const SYNC_MAX_RECORDS: usize = 200;
const SPLIT_TOL: f64 = 0.05;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, criterion: &str, passed: bool, detail: String) {
        if !passed {
            self.failed += 1;
        }
        println!("[{}] {criterion}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
}

fn max_over(n: usize, name: &str, f: fn(&mut StreamRng) -> viewbridge::Result<f64>) -> f64 {
    (0..n)
        .map(|i| f(&mut substream(2024, name, i as u64)).expect("oracle instance"))
        .fold(0.0, f64::max)
}

fn oracle_equivalence(r: &mut Report) {
    let start = Instant::now();
    let ce = max_over(ORACLE_INSTANCES, "acc.ce", ce_error);
    let sc = max_over(ORACLE_INSTANCES, "acc.supcon", supcon_error);
    let ib = max_over(ORACLE_INSTANCES, "acc.ib", ib_error);
    let topk_mismatches = max_over(ORACLE_INSTANCES, "acc.topk", topk_error);
    let secs = start.elapsed().as_secs_f64();
    let passed = ce <= ORACLE_TOL && sc <= ORACLE_TOL && ib <= ORACLE_TOL && topk_mismatches == 0.0 && secs < ORACLE_SECONDS;
    r.line(
        "1 oracle equivalence",
        passed,
        format!(
            "{ORACLE_INSTANCES} each; max |err| ce {ce:.2e} supcon {sc:.2e} ib {ib:.2e} (tol {ORACLE_TOL:.0e}); topk exact: {}; {secs:.2} s (< {ORACLE_SECONDS} s)",
            topk_mismatches == 0.0
        ),
    );
}

fn gradcheck(r: &mut Report) {
    let start = Instant::now();
    let report = run_suite(2024, GRAD_INSTANCES).expect("gradcheck suite");
    let secs = start.elapsed().as_secs_f64();
    let worst = |n: &str| report.worst(n);
    let (ce, sc, ib, comp) = (worst("cross_entropy"), worst("supcon"), worst("ib"), worst("composition"));
    let counts_ok = ["cross_entropy", "supcon", "ib", "composition"]
        .iter()
        .all(|n| report.results.iter().filter(|x| x.check == *n).count() == GRAD_INSTANCES);
    let passed = report.fd_step == FD_STEP
        && counts_ok
        && ce < LOSS_GRAD_TOL
        && sc < LOSS_GRAD_TOL
        && ib < LOSS_GRAD_TOL
        && comp < COMPOSITION_GRAD_TOL
        && secs < GRAD_SECONDS;
    r.line(
        "2 finite-difference gradients",
        passed,
        format!(
            "step {:.0e}, {GRAD_INSTANCES} each; max rel err ce {ce:.2e} supcon {sc:.2e} ib {ib:.2e} (tol {LOSS_GRAD_TOL:.0e}), encoder-classify-ce {comp:.2e} (tol {COMPOSITION_GRAD_TOL:.0e}); {secs:.1} s (< {GRAD_SECONDS} s)",
            report.fd_step
        ),
    );
}

fn closed_forms(r: &mut Report) {
    let k = 6;
    let b = 5;
    let uniform = Array2::<f64>::zeros((b, k));
    let ce = cross_entropy(&uniform.view(), &[0, 1, 2, 3, 4]).unwrap().loss.value;
    let ce_err = (ce - (k as f64).ln()).abs();

    let mut same = Array2::<f64>::zeros((2 * b, 4));
    same.column_mut(0).fill(1.0);
    let sc_same = supcon_loss(&same.view(), &vec![2; 2 * b], 0.1).unwrap().loss.value;
    let same_err = (sc_same - ((2 * b - 1) as f64).ln()).abs();

    let pair = ndarray::array![[0.6, 0.8], [-0.8, 0.6]];
    let sc_pair = supcon_loss(&pair.view(), &[1, 1], 0.3).unwrap().loss.value;

    // Walsh columns over 16 rows: S with itself gives C = I, S against
    // pairwise products of its columns gives C = 0.
    let d = 4;
    let walsh = |i: usize, j: usize| if (i >> j) & 1 == 1 { 1.0 } else { -1.0 };
    let s = Array2::from_shape_fn((16, d), |(i, j)| walsh(i, j));
    let t = Array2::from_shape_fn((16, d), |(i, j)| walsh(i, j) * walsh(i, (j + 1) % d));
    let ib_identity = ib_loss(&s.view(), &s.view(), 5e-3).unwrap().loss.value;
    let ib_zero = ib_loss(&s.view(), &t.view(), 5e-3).unwrap().loss.value;

    let passed = ce_err <= CE_CLOSED_TOL
        && same_err <= SUPCON_SAME_TOL
        && sc_pair.abs() <= SUPCON_PAIR_TOL
        && ib_identity.abs() <= IB_CLOSED_TOL
        && (ib_zero - d as f64).abs() <= IB_CLOSED_TOL;
    r.line(
        "3 closed forms",
        passed,
        format!(
            "ce-ln K {ce_err:.1e} (tol {CE_CLOSED_TOL:.0e}); supcon-ln(2B-1) {same_err:.1e} (tol {SUPCON_SAME_TOL:.0e}); single pair {:.1e} (tol {SUPCON_PAIR_TOL:.0e}); ib(C=I) {:.1e}, ib(C=0)-d {:.1e} (tol {IB_CLOSED_TOL:.0e})",
            sc_pair.abs(),
            ib_identity.abs(),
            (ib_zero - d as f64).abs()
        ),
    );
}

fn frozen_bit_identical(r: &mut Report, run: &Path) {
    let dir = run.join(BaselineKind::FullMethod.name());
    let (before, _) = load_params(&dir.join("phase1.ckpt")).expect("phase-1 checkpoint");
    let (after, _) = load_params(&dir.join("model.ckpt")).expect("final checkpoint");
    let cfg = TrainConfig::load(&run.join("config.toml")).expect("run config");
    let mask = FreezeMask::from_fraction(before.dims.n_blocks, cfg.freeze_fraction).unwrap();
    let mut frozen = 0;
    let mut moved = Vec::new();
    let mut trainable_changed = 0;
    for ((info, a), (_, b)) in before.tensors().into_iter().zip(after.tensors()) {
        let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if mask.is_frozen(info.layer) {
            frozen += 1;
            if !same {
                moved.push(info.name.clone());
            }
        } else if !same {
            trainable_changed += 1;
        }
    }
    r.line(
        "4 frozen layers untouched",
        frozen > 0 && moved.is_empty() && trainable_changed > 0,
        format!("{frozen} frozen tensors, {} changed {moved:?}; {trainable_changed} trainable tensors updated", moved.len()),
    );
}

fn run_baseline(out: &Path) -> (bool, f64, String) {
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_viewbridge"))
        .args(["baseline", "--kind", "all", "--seed", BASELINE_SEED, "--out"])
        .arg(out)
        .output()
        .expect("spawn viewbridge");
    let secs = start.elapsed().as_secs_f64();
    (o.status.success(), secs, String::from_utf8_lossy(&o.stderr).into_owned())
}

fn artifacts(run: &Path) -> Vec<PathBuf> {
    let mut files = vec![run.join("results.jsonl"), run.join("table.csv")];
    for kind in BaselineKind::ALL {
        let d = run.join(kind.name());
        for f in ["metrics.jsonl", "phase1.ckpt", "model.ckpt", "optimizer.ckpt"] {
            files.push(d.join(f));
        }
    }
    files
}

fn determinism(r: &mut Report, a: &Path, b: &Path) {
    let mut differing = Vec::new();
    let files = artifacts(a);
    for f in &files {
        let rel = f.strip_prefix(a).unwrap();
        let x = std::fs::read(f);
        let y = std::fs::read(b.join(rel));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => differing.push(rel.display().to_string()),
        }
    }
    r.line(
        "5 determinism",
        differing.is_empty(),
        format!("{} artifacts compared byte for byte, differing: {differing:?}", files.len()),
    );
}

fn qualitative(r: &mut Report, run: &Path, secs: f64) {
    let cells = read_results_jsonl(&run.join("results.jsonl")).expect("results");
    let get = |kind: BaselineKind, col: &str| 100.0 * top1_of(&cells, kind.name(), col).unwrap_or(f64::NAN);
    use BaselineKind::*;
    let target = "V1 modB";
    let held_out = "V4 modA";
    let foreign = "foreign V1 modA";
    let (full_t, fc_t, uda_t) = (get(FullMethod, target), get(FinetuneContrastive, target), get(UdaOnly, target));
    let (fc_v4, fo_v4) = (get(FinetuneContrastive, held_out), get(FinetuneOnly, held_out));
    let (full_f, uda_f, fo_f) = (get(FullMethod, foreign), get(UdaOnly, foreign), get(FinetuneOnly, foreign));
    let a = full_t >= fc_t + TARGET_MARGIN;
    let b = full_t >= uda_t;
    let c = fc_v4 >= fo_v4 + VIEW_MARGIN;
    let d = full_f > uda_f && uda_f > fo_f;
    let t = secs < BASELINE_SECONDS;
    r.line(
        "6a target: full >= fc + 10",
        a,
        format!("full {full_t:.2} vs fc {fc_t:.2} (+{TARGET_MARGIN})"),
    );
    r.line("6b target: full >= uda_only", b, format!("full {full_t:.2} vs uda {uda_t:.2}"));
    r.line(
        "6c held-out view: fc >= fo + 10",
        c,
        format!("fc {fc_v4:.2} vs fo {fo_v4:.2} (+{VIEW_MARGIN})"),
    );
    r.line(
        "6d foreign: full > uda > fo",
        d,
        format!("full {full_f:.2}, uda {uda_f:.2}, fo {fo_f:.2}"),
    );
    r.line(
        "6e baseline runtime",
        t,
        format!("{secs:.0} s (< {BASELINE_SECONDS} s)"),
    );
}

fn sync_oracle(r: &mut Report) {
    let anchor = ViewId::new(1, ViewRole::Anchor);
    let positives = [ViewId::new(2, ViewRole::Positive), ViewId::new(3, ViewRole::Positive)];
    let mut mismatches = 0;
    let mut violations = Vec::new();
    let mut largest = 0;
    for i in 0..SYNC_MANIFESTS {
        let m = random_manifest(&mut substream(2024, "acc.manifest", i as u64), 3, 10, 20, SYNC_MAX_RECORDS);
        largest = largest.max(m.records.len());
        let fast = build_sync_groups(&m, anchor, &positives, 1).expect("groups");
        if fast != brute_force_sync_groups(&m, anchor, &positives, 1) {
            mismatches += 1;
        }
        let split = stratified_split(&fast, DEFAULT_FRACTIONS, i as u64).expect("split");
        violations.extend(split_violations(&fast, &split, SPLIT_TOL));
    }
    r.line(
        "7 sync oracle and split invariants",
        mismatches == 0 && violations.is_empty() && largest <= SYNC_MAX_RECORDS,
        format!(
            "{SYNC_MANIFESTS} manifests, largest {largest} records (max {SYNC_MAX_RECORDS}); grouping mismatches {mismatches}; split violations {} (tol ±{:.0} pp) {violations:?}",
            violations.len(),
            SPLIT_TOL * 100.0
        ),
    );
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored.
    let mut r = Report { failed: 0 };
    oracle_equivalence(&mut r);
    gradcheck(&mut r);
    closed_forms(&mut r);
    sync_oracle(&mut r);

    let tmp = tempfile::tempdir().expect("tempdir");
    let (a, b) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    let (ok_a, secs_a, err_a) = run_baseline(&a);
    let (ok_b, _, err_b) = run_baseline(&b);
    if ok_a && ok_b {
        frozen_bit_identical(&mut r, &a);
        determinism(&mut r, &a, &b);
        qualitative(&mut r, &a, secs_a);
    } else {
        r.line("4-6 baseline runs", false, format!("baseline failed: {err_a} {err_b}"));
    }

    if r.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criterion line(s) failed", r.failed);
        ExitCode::FAILURE
    }
}
