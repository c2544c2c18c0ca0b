use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riscore::cocoio::{aggregate_ci, parse_annotations, AnnotationSet};
use riscore::embedding::{load_embeddings, SimilarityParams};
use riscore::fmt::g17;
use riscore::rescore::{rescore_detections, ClassMap, FusionParams};
use riscore::results::{detections, read_results, write_results, ResultRecord};
use riscore::types::Detection;
use tempfile::tempdir;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

fn fixture(name: &str) -> String {
    format!("{FIXTURES}/synth/{name}")
}

fn riscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riscore"))
        .args(args)
        .env_remove("RISCORE_THREADS")
        .output()
        .expect("run riscore")
}

fn ok(args: &[&str]) -> String {
    let out = riscore(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = riscore(args);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn embedding_args(sub: &str) -> Vec<String> {
    std::iter::once(sub.to_string())
        .chain(
            [
                ("--annotations", "annotations.json"),
                ("--results", "results.json"),
                ("--det-embs", "detections.remb"),
                ("--text-embs", "classes.remb"),
            ]
            .iter()
            .flat_map(|(flag, file)| [flag.to_string(), fixture(file)]),
        )
        .collect()
}

fn with(base: &[String], extra: &[&str]) -> Vec<String> {
    base.iter()
        .cloned()
        .chain(extra.iter().map(|e| e.to_string()))
        .collect()
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn scores(path: &Path) -> Vec<(String, f64)> {
    read_results(path)
        .unwrap()
        .into_iter()
        .map(|r| (r.detection.det_id, r.detection.score))
        .collect()
}

#[test]
fn rescore_at_one_keeps_detector_scores() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("nested/out.json");
    ok(&refs(&with(
        &embedding_args("rescore"),
        &["--c", "1", "--out", s(&out)],
    )));
    assert_eq!(scores(&out), scores(Path::new(&fixture("results.json"))));
}

#[test]
fn rescore_matches_the_library() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out.json");
    let stdout = ok(&refs(&with(&embedding_args("rescore"), &["--out", s(&out)])));
    assert!(stdout.starts_with("rescored "));

    let gt = parse_annotations(fixture("annotations.json")).unwrap();
    let dets = detections(&read_results(fixture("results.json")).unwrap());
    let class_map = ClassMap::new(gt.categories.iter().map(|c| (c.id, c.name.clone())).collect()).unwrap();
    let expected = rescore_detections(
        &dets,
        &load_embeddings(fixture("detections.remb")).unwrap(),
        &load_embeddings(fixture("classes.remb")).unwrap(),
        &class_map,
        &SimilarityParams::default(),
        &FusionParams::default(),
    )
    .unwrap();
    let got = read_results(&out).unwrap();
    assert_eq!(got.len(), expected.detections.len());
    for (g, e) in got.iter().zip(&expected.detections) {
        assert_eq!(g.detection, e.detection);
        assert_eq!(g.score_raw, Some(e.score_raw));
    }
}

#[test]
fn skip_base_leaves_base_scores_alone() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out.json");
    ok(&refs(&with(
        &embedding_args("rescore"),
        &["--skip-base", "--c", "0", "--out", s(&out)],
    )));
    let gt = parse_annotations(fixture("annotations.json")).unwrap();
    let base = gt.partition().unwrap().base;
    let before = read_results(fixture("results.json")).unwrap();
    let after = read_results(&out).unwrap();
    let mut changed = 0;
    for (b, a) in before.iter().zip(&after) {
        if base.contains(&b.detection.class_id) {
            assert_eq!(a.detection.score.to_bits(), b.detection.score.to_bits());
        } else if a.detection.score != b.detection.score {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn bad_embedding_file_is_a_data_error() {
    let dir = tempdir().unwrap();
    let args = embedding_args("rescore");
    let mut bad = args.clone();
    bad[6] = fixture("annotations.json");
    let (c, err) = code(&refs(&with(&bad, &["--out", s(&dir.path().join("o.json"))])));
    assert_eq!(c, 2);
    assert!(err.contains("bad magic"), "{err}");

    let mut gone = args;
    gone[8] = s(&dir.path().join("absent.remb")).to_string();
    let (c, err) = code(&refs(&with(&gone, &["--out", s(&dir.path().join("o.json"))])));
    assert_eq!(c, 2);
    assert!(err.contains("absent.remb"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&["rescore"]).0, 1);
    assert_eq!(code(&["no-such-command"]).0, 1);
    assert_eq!(code(&["eval", "--max-dets", "many"]).0, 1);
    let dir = tempdir().unwrap();
    let (c, err) = code(&refs(&with(
        &embedding_args("rescore"),
        &["--c", "1.5", "--out", s(&dir.path().join("o.json"))],
    )));
    assert_eq!(c, 1, "{err}");
    assert_eq!(
        code(&["loss-check", "--config", s(&dir.path().join("absent.toml"))]).0,
        1
    );
    assert!(riscore(&["--help"]).status.success());
}

#[test]
fn missing_ground_truth_is_a_data_error() {
    let dir = tempdir().unwrap();
    let absent = dir.path().join("absent.json");
    let (c, _) = code(&[
        "eval",
        "--annotations",
        s(&absent),
        "--results",
        &fixture("results.json"),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(c, 2);
    let (c, _) = code(&[
        "kshot",
        "--annotations",
        s(&absent),
        "--k",
        "1",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(c, 2);
}

fn perfect_results(gt: &AnnotationSet, path: &Path) {
    let records: Vec<ResultRecord> = gt
        .annotations
        .iter()
        .filter(|a| !a.iscrowd)
        .map(|a| {
            ResultRecord::new(Detection {
                image_id: a.image_id.clone(),
                det_id: format!("p{}", a.id),
                class_id: a.category_id,
                bbox: a.bbox,
                score: 1.0,
                score_vector: None,
            })
        })
        .collect();
    write_results(&records, path).unwrap();
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempdir().unwrap();
    let gt = parse_annotations(fixture("annotations.json")).unwrap();
    let perfect = dir.path().join("perfect.json");
    perfect_results(&gt, &perfect);
    let stdout = ok(&[
        "eval",
        "--annotations",
        &fixture("annotations.json"),
        "--results",
        s(&perfect),
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(stdout.starts_with("a AP 1 AP50 1 AP75 1\n"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("ap_report.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1,1")), "{csv}");
}

#[test]
fn comparing_a_file_with_itself_gives_zero_deltas() {
    let dir = tempdir().unwrap();
    let r = fixture("results.json");
    ok(&[
        "eval",
        "--annotations",
        &fixture("annotations.json"),
        "--results",
        &r,
        "--compare",
        &r,
        "--out-dir",
        s(dir.path()),
    ]);
    let delta = fs::read_to_string(dir.path().join("ap_delta.csv")).unwrap();
    let rows: Vec<&str> = delta.lines().skip(1).collect();
    assert!(rows.len() > 3);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[3], f[6]), ("0", "0"), "{row}");
    }
    assert_eq!(
        fs::read(dir.path().join("ap_report.json")).unwrap(),
        fs::read(dir.path().join("ap_report_compare.json")).unwrap()
    );
}

fn csv_column(text: &str, col: usize) -> Vec<f64> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn deltas_equal_separate_evaluations_subtracted() {
    let dir = tempdir().unwrap();
    let fused = dir.path().join("fused.json");
    ok(&refs(&with(&embedding_args("rescore"), &["--out", s(&fused)])));
    let ann = fixture("annotations.json");
    let raw = fixture("results.json");
    ok(&[
        "eval",
        "--annotations",
        &ann,
        "--results",
        &raw,
        "--compare",
        s(&fused),
        "--out-dir",
        s(&dir.path().join("cmp")),
    ]);
    ok(&[
        "eval",
        "--annotations",
        &ann,
        "--results",
        &raw,
        "--out-dir",
        s(&dir.path().join("a")),
    ]);
    ok(&[
        "eval",
        "--annotations",
        &ann,
        "--results",
        s(&fused),
        "--out-dir",
        s(&dir.path().join("b")),
    ]);

    let read = |p: &str| fs::read_to_string(dir.path().join(p)).unwrap();
    let delta = read("cmp/ap_delta.csv");
    let (a, b) = (read("a/ap_report.csv"), read("b/ap_report.csv"));
    let n = a.lines().count() - 1;
    let (ap_a, ap_b) = (csv_column(&a, 1), csv_column(&b, 1));
    let (ap50_a, ap50_b) = (csv_column(&a, 2), csv_column(&b, 2));
    let d_ap = csv_column(&delta, 3);
    let d_ap50 = csv_column(&delta, 6);
    for i in 0..n {
        assert_eq!(d_ap[i], ap_b[i] - ap_a[i]);
        assert_eq!(d_ap50[i], ap50_b[i] - ap50_a[i]);
    }
}

#[test]
fn sweep_endpoints_and_grid_size() {
    let dir = tempdir().unwrap();
    let one = dir.path().join("one.csv");
    ok(&refs(&with(
        &embedding_args("sweep-c"),
        &["--grid", "1.0", "--out", s(&one)],
    )));
    let eval = ok(&[
        "eval",
        "--annotations",
        &fixture("annotations.json"),
        "--results",
        &fixture("results.json"),
        "--out-dir",
        s(dir.path()),
    ]);
    let novel: Vec<&str> = eval
        .lines()
        .find(|l| l.starts_with("a novel "))
        .unwrap()
        .split(' ')
        .collect();
    let sweep = fs::read_to_string(&one).unwrap();
    assert_eq!(sweep.lines().nth(1).unwrap(), format!("1,{},{}", novel[3], novel[5]));

    let ends = dir.path().join("ends.csv");
    ok(&refs(&with(
        &embedding_args("sweep-c"),
        &["--grid", "0,1", "--out", s(&ends)],
    )));
    let fused = dir.path().join("clip_only.json");
    ok(&refs(&with(
        &embedding_args("rescore"),
        &["--c", "0", "--out", s(&fused)],
    )));
    let eval0 = ok(&[
        "eval",
        "--annotations",
        &fixture("annotations.json"),
        "--results",
        s(&fused),
        "--out-dir",
        s(dir.path()),
    ]);
    let novel0: Vec<&str> = eval0
        .lines()
        .find(|l| l.starts_with("a novel "))
        .unwrap()
        .split(' ')
        .collect();
    let ends = fs::read_to_string(&ends).unwrap();
    assert_eq!(ends.lines().nth(1).unwrap(), format!("0,{},{}", novel0[3], novel0[5]));
    assert_eq!(ends.lines().nth(2), sweep.lines().nth(1));

    let eleven = dir.path().join("eleven.csv");
    let plot = dir.path().join("sweep.svg");
    ok(&refs(&with(
        &embedding_args("sweep-c"),
        &["--out", s(&eleven), "--plot", s(&plot)],
    )));
    let text = fs::read_to_string(&eleven).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert_eq!(text.lines().last(), sweep.lines().nth(1));
    assert!(fs::read_to_string(&plot).unwrap().starts_with("<svg"));
}

#[test]
fn monotonicity_modes() {
    let out = ok(&["monotonicity", "--noise", "0,0,0", "--points", "5"]);
    assert!(out.contains("PASS"), "{out}");
    let out = ok(&["monotonicity", "--noise", "0.3,-0.1,-0.2"]);
    assert!(out.starts_with("points 50 "), "{out}");
    let out = ok(&["monotonicity", "--trials", "50"]);
    assert_eq!(out, "trials 50 failures 0 PASS\n");
    let (c, err) = code(&["monotonicity", "--noise", "0.3,-0.1,-0.2", "--alphas", "0,100"]);
    assert_eq!(c, 2, "{err}");
    let (c, _) = code(&["monotonicity", "--noise", "0.3,-0.1"]);
    assert_ne!(c, 0);
}

fn kshot_files(dir: &Path, seeds: &str) -> Vec<PathBuf> {
    ok(&[
        "kshot",
        "--annotations",
        &fixture("annotations.json"),
        "--k",
        "3",
        "--seeds",
        seeds,
        "--out-dir",
        s(dir),
    ]);
    seeds
        .split(',')
        .map(|seed| dir.join(format!("3shot_seed{seed}.json")))
        .collect()
}

#[test]
fn missing_is_zero_for_the_full_set() {
    let dir = tempdir().unwrap();
    let ann = fixture("annotations.json");
    ok(&[
        "missing",
        "--annotations",
        &ann,
        "--subsets",
        &ann,
        "--out-dir",
        s(dir.path()),
    ]);
    let csv = fs::read_to_string(dir.path().join("missing_seed0.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")), "{csv}");
    assert!(!dir.path().join("missing_aggregate.csv").exists());
}

#[test]
fn missing_aggregate_matches_the_interval() {
    let dir = tempdir().unwrap();
    let seeds = "0,1,2,3,4,5,6,7,8,9";
    let files = kshot_files(&dir.path().join("seeds"), seeds);
    let list = files.iter().map(|p| s(p).to_string()).collect::<Vec<_>>().join(",");
    let plot = dir.path().join("missing.svg");
    ok(&[
        "missing",
        "--annotations",
        &fixture("annotations.json"),
        "--subsets",
        &list,
        "--out-dir",
        s(dir.path()),
        "--plot",
        s(&plot),
    ]);

    let per_seed: Vec<String> = (0..10)
        .map(|i| fs::read_to_string(dir.path().join(format!("missing_seed{i}.csv"))).unwrap())
        .collect();
    let aggregate = fs::read_to_string(dir.path().join("missing_aggregate.csv")).unwrap();
    for (row, line) in aggregate.lines().skip(1).enumerate() {
        let values: Vec<f64> = per_seed.iter().map(|t| csv_column(t, 2)[row]).collect();
        let ci = aggregate_ci(&values).unwrap();
        let class_id = per_seed[0].lines().nth(row + 1).unwrap().split(',').next().unwrap();
        assert_eq!(
            line,
            format!("{class_id},{},{},{}", g17(ci.mean), g17(ci.ci_low), g17(ci.ci_high))
        );
    }
    assert!(plot.exists());
}

#[test]
fn loss_check_passes_with_defaults() {
    let out = ok(&["loss-check", "--trials", "200"]);
    assert_eq!(out.lines().count(), 5);
    assert_eq!(out.matches("PASS").count(), 4, "{out}");
    assert_eq!(code(&["loss-check", "--gamma", "-1"]).0, 1);
}

#[test]
fn config_values_yield_to_flags() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("riscore.toml");
    fs::write(&cfg, "seed = 5\n[monotonicity]\ntrials = 7\n[loss-check]\ntrials = 3\n").unwrap();
    assert_eq!(ok(&["monotonicity", "--config", s(&cfg)]), "trials 7 failures 0 PASS\n");
    assert_eq!(
        ok(&["monotonicity", "--config", s(&cfg), "--trials", "4"]),
        "trials 4 failures 0 PASS\n"
    );
    assert!(ok(&["--config", s(&cfg), "loss-check"]).starts_with("trials 3\n"));

    let paths = dir.path().join("paths.toml");
    let out = dir.path().join("from_config.json");
    fs::write(
        &paths,
        format!(
            "annotations = {:?}\nresults = {:?}\ndet-embs = {:?}\ntext-embs = {:?}\n[rescore]\nc = 1.0\nout = {:?}\n",
            fixture("annotations.json"),
            fixture("results.json"),
            fixture("detections.remb"),
            fixture("classes.remb"),
            s(&out)
        ),
    )
    .unwrap();
    ok(&["rescore", "--config", s(&paths)]);
    assert_eq!(scores(&out), scores(Path::new(&fixture("results.json"))));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let csv = dir.path().join(format!("sweep{threads}.csv"));
        let args = with(&embedding_args("sweep-c"), &["--points", "5", "--out", s(&csv)]);
        let out = Command::new(env!("CARGO_BIN_EXE_riscore"))
            .args(&args)
            .env("RISCORE_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(fs::read(&csv).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let bad = Command::new(env!("CARGO_BIN_EXE_riscore"))
        .args(["loss-check", "--trials", "1"])
        .env("RISCORE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
