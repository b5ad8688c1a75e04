use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use layoutforge::exchange::ExchangeTensor;
use layoutforge::layout::total_pairwise_overlap;
use layoutforge::{loss_phase1, BinaryGrid, LossWeights, SubjectSet};
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutforge"))
        .args(args)
        .env_remove("LAYOUTFORGE_LOG")
        .output()
        .expect("binary runs")
}

fn run_cmd(cmd: &str, manifest: &str, out: &Path, extra: &[&str]) -> Output {
    let m = fixture(manifest);
    let mut args = vec![cmd, "--manifest", m.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
        .unwrap_or_else(|| panic!("no {key} in report:\n{report}"))
}

fn read_mask(path: &Path) -> BinaryGrid {
    ExchangeTensor::read_file(path).unwrap().to_mask().unwrap()
}

#[test]
fn golden_reports_are_byte_identical() {
    for cmd in ["loss1", "masks", "rearrange", "loss3"] {
        let dir = TempDir::new().unwrap();
        let out = run_cmd(cmd, "golden.toml", dir.path(), &[]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let golden = fs::read(fixture(&format!("golden/{cmd}.txt"))).unwrap();
        assert_eq!(out.stdout, golden, "{cmd} report drifted:\n{}", stdout(&out));
    }
}

#[test]
fn single_subject_excite_loss() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("loss1", "single.toml", dir.path(), &[]);
    assert!(out.status.success());
    let r = stdout(&out);
    let be: f64 = field(&r, "loss_be").parse().unwrap();
    // the fixture peak is 0.8 stored as f32
    assert!((be - 0.2).abs() < 1e-6, "{be}");
    assert_eq!(field(&r, "loss_ol_total"), "0.0");
}

#[test]
fn zero_weights_give_zero_total() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("loss1", "zero_weights.toml", dir.path(), &[]);
    assert!(out.status.success());
    assert_eq!(field(&stdout(&out), "loss_total"), "0.0");
}

#[test]
fn emitted_gradient_matches_library() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("loss1", "golden.toml", dir.path(), &["--emit-grad"]);
    assert!(out.status.success());
    assert_eq!(field(&stdout(&out), "grad"), "grad_loss1.xamt");
    let grad = ExchangeTensor::read_file(&dir.path().join("grad_loss1.xamt")).unwrap();
    assert_eq!(grad.dims(), &[16, 16, 4]);

    let maps = ExchangeTensor::read_file(&fixture("overlap.xamt"))
        .unwrap()
        .to_attention()
        .unwrap();
    let subjects = SubjectSet::new(vec![1, 2, 3], Some(0)).unwrap();
    let (_, expected) = loss_phase1(&maps, &subjects, &LossWeights::default()).unwrap();
    for (cell, chunk) in grad.data().chunks(4).enumerate() {
        for (token, &v) in chunk.iter().enumerate() {
            assert_eq!(v, expected[token].as_slice()[cell] as f32);
        }
    }

    let out = run_cmd("loss3", "golden.toml", dir.path(), &["--emit-grad"]);
    assert!(out.status.success());
    let grad = ExchangeTensor::read_file(&dir.path().join("grad_loss3.xamt")).unwrap();
    assert_eq!(grad.dims(), &[16, 16, 4]);
    // background token carries no mask-following gradient
    assert!(grad.data().chunks(4).all(|c| c[0] == 0.0));
}

#[test]
fn disjoint_layout_leaves_latent_untouched() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("rearrange", "disjoint.toml", dir.path(), &[]);
    assert!(out.status.success());
    let r = stdout(&out);
    assert_eq!(field(&r, "overlap_before"), "0");
    assert_eq!(field(&r, "overlap_after"), "0");
    for i in 0..3 {
        let a = read_mask(&dir.path().join(format!("mask_initial_{i}.xamt")));
        let b = read_mask(&dir.path().join(format!("mask_final_{i}.xamt")));
        assert_eq!(a, b);
    }
    assert_eq!(
        fs::read(dir.path().join("latent_migrated.xamt")).unwrap(),
        fs::read(fixture("latent.xamt")).unwrap()
    );
}

/// Smallest overlap `mask` can reach by moving down or sideways without
/// leaving the grid, with `others` fixed.
fn brute_force_best(mask: &BinaryGrid, others: &[BinaryGrid]) -> usize {
    let p = mask.side() as isize;
    let cells: Vec<(usize, usize)> = mask.iter_set().collect();
    let mut best = usize::MAX;
    for dy in 0..p {
        for dx in -(p - 1)..p {
            let moved: Option<Vec<(usize, usize)>> = cells
                .iter()
                .map(|&(r, c)| {
                    let (r, c) = (r as isize + dy, c as isize + dx);
                    (r >= 0 && r < p && c >= 0 && c < p).then_some((r as usize, c as usize))
                })
                .collect();
            let Some(moved) = moved else { continue };
            let cost: usize = others
                .iter()
                .map(|o| moved.iter().filter(|&&(r, c)| o.get(r, c)).count())
                .sum();
            best = best.min(cost);
        }
    }
    best
}

#[test]
fn overlapping_layout_improves_to_oracle_optimum() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("rearrange", "golden.toml", dir.path(), &[]);
    assert!(out.status.success());
    let r = stdout(&out);
    let before: usize = field(&r, "overlap_before").parse().unwrap();
    let after: usize = field(&r, "overlap_after").parse().unwrap();
    assert!(after < before, "{before} -> {after}");

    let load = |prefix: &str| -> Vec<BinaryGrid> {
        (0..3)
            .map(|i| read_mask(&dir.path().join(format!("{prefix}_{i}.xamt"))))
            .collect()
    };
    let initial = load("mask_initial");
    let fin = load("mask_final");
    assert_eq!(total_pairwise_overlap(&initial), before);
    assert_eq!(total_pairwise_overlap(&fin), after);

    // replay the movers one by one; each must reach the brute-force optimum
    let subjects = [1usize, 2, 3];
    let movers: usize = field(&r, "movers").parse().unwrap();
    let mut current = initial.clone();
    for k in 0..movers {
        let token: usize = field(&r, &format!("mover_{k}_token")).parse().unwrap();
        let dy: isize = field(&r, &format!("mover_{k}_dy")).parse().unwrap();
        let dx: isize = field(&r, &format!("mover_{k}_dx")).parse().unwrap();
        assert!(dy >= 0);
        let s = subjects.iter().position(|&t| t == token).unwrap();
        let others: Vec<BinaryGrid> = (0..3).filter(|&j| j != s).map(|j| current[j].clone()).collect();
        let moved = current[s].translate(dy, dx).expect("shift keeps the mask inside");
        let achieved: usize = others.iter().map(|o| moved.intersection_area(o)).sum();
        assert_eq!(achieved, brute_force_best(&current[s], &others), "mover {k}");
        current[s] = moved;
    }
    assert_eq!(current, fin);
}

#[test]
fn rearranged_latent_is_deterministic_and_seeded() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    assert!(run_cmd("rearrange", "random_normal.toml", a.path(), &[]).status.success());
    assert!(run_cmd("rearrange", "random_normal.toml", b.path(), &[]).status.success());
    assert!(run_cmd("rearrange", "random_normal.toml", c.path(), &["--seed", "99"]).status.success());
    let read = |d: &TempDir| fs::read(d.path().join("latent_migrated.xamt")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let z = ExchangeTensor::read_file(&a.path().join("latent_migrated.xamt")).unwrap();
    assert_eq!(z.dims(), &[4, 64, 64]);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(run_cmd("loss1", "corrupt.toml", dir.path(), &[])), 2);
    assert_eq!(code(run_cmd("loss1", "truncated.toml", dir.path(), &[])), 2);
    assert_eq!(code(run_cmd("rearrange", "mismatch.toml", dir.path(), &[])), 2);
    assert_eq!(code(run_cmd("rearrange", "missing_latent.toml", dir.path(), &[])), 1);
    assert_eq!(code(run_cmd("rearrange", "no_latent.toml", dir.path(), &[])), 1);
    assert_eq!(code(run_cmd("loss3", "no_latent.toml", dir.path(), &[])), 1);
    assert_eq!(code(run_cmd("loss1", "no_such_manifest.toml", dir.path(), &[])), 1);
    assert_eq!(code(run(&["loss1"])), 1);
    assert_eq!(code(run(&["frobnicate"])), 1);
    assert_eq!(code(run(&[])), 1);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[subjects]\ntokens = [1]\nmystery = true\n").unwrap();
    let out = run(&["loss1", "--manifest", bad.to_str().unwrap()]);
    assert_eq!(code(out), 1);

    let corrupt = run_cmd("loss1", "corrupt.toml", dir.path(), &[]);
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("bad magic"));
}

#[test]
fn version_probe() {
    let out = run(&["--version"]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("layoutforge "));
}

#[test]
fn guide_is_deterministic_and_rearranges_at_35() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ra = run_cmd("guide", "guide.toml", a.path(), &[]);
    let rb = run_cmd("guide", "guide.toml", b.path(), &[]);
    assert!(ra.status.success());
    assert_eq!(ra.stdout, rb.stdout);
    for f in ["trace.jsonl", "latent_final.xamt", "mask_final_0.xamt", "mask_final_1.xamt", "mask_final_2.xamt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let r = stdout(&ra);
    assert_eq!(field(&r, "steps"), "50");
    assert_eq!(field(&r, "rearrange_step"), "35");

    let trace = fs::read_to_string(a.path().join("trace.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 50);
    let rearranged: Vec<u64> = records
        .iter()
        .filter(|r| r["phase"] == "rearrange")
        .map(|r| r["t"].as_u64().unwrap())
        .collect();
    assert_eq!(rearranged, vec![35]);
    let t: Vec<u64> = records.iter().map(|r| r["t"].as_u64().unwrap()).collect();
    assert_eq!(t, (1..=50).rev().collect::<Vec<_>>());
}

#[test]
fn guide_with_everything_off_returns_input_latent() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("guide", "guide_off.toml", dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(dir.path().join("latent_final.xamt")).unwrap(),
        fs::read(fixture("latent.xamt")).unwrap()
    );
    assert_eq!(field(&stdout(&out), "loss3_final"), "0.0");
}

#[test]
fn gradcheck_passes_on_default_shapes() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("gradcheck", "gradcheck.toml", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert_eq!(field(&stdout(&out), "pass"), "true");
}

#[test]
fn gradcheck_micro_case_is_fast() {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    let out = run_cmd("gradcheck", "gradcheck_micro.toml", dir.path(), &[]);
    let elapsed = start.elapsed();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");
}

#[test]
fn corrupted_gradient_fails_gradcheck() {
    let dir = TempDir::new().unwrap();
    let out = run_cmd("gradcheck", "gradcheck_corrupt.toml", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(field(&stdout(&out), "pass"), "false");
}

#[test]
fn log_level_comes_from_environment() {
    let dir = TempDir::new().unwrap();
    let m = fixture("golden.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_layoutforge"))
        .args(["masks", "--manifest", m.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .env("LAYOUTFORGE_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask_initial_0.xamt"));
    let quiet = run_cmd("masks", "golden.toml", dir.path(), &[]);
    assert!(quiet.stderr.is_empty());
}
