//! End-to-end tests driving the `lwdet` binary through temp directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lwdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lwdet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_ppm(path: &Path, w: u32, h: u32, shift: u8) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.push(((x * 3 + y * 5) as u8).wrapping_add(shift));
            bytes.push((y % 256) as u8);
            bytes.push((x % 256) as u8);
        }
    }
    fs::write(path, bytes).unwrap();
}

fn voc_xml(name: &str, class: &str) -> String {
    format!(
        "<annotation><filename>{name}.jpg</filename>\
         <size><width>64</width><height>48</height><depth>3</depth></size>\
         <object><name>{class}</name><bndbox>\
         <xmin>10</xmin><ymin>10</ymin><xmax>30</xmax><ymax>30</ymax>\
         </bndbox></object></annotation>"
    )
}

#[test]
fn convert_writes_labels_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let voc = dir.path().join("voc");
    fs::create_dir(&voc).unwrap();
    for (i, class) in ["Dead Knot", "Live Knot", "Crack"].iter().enumerate() {
        fs::write(voc.join(format!("im{i}.xml")), voc_xml(&format!("im{i}"), class)).unwrap();
    }
    let out = dir.path().join("labels");
    let res = lwdet(
        &["convert", "--voc-dir", "voc", "--out", "labels"],
        dir.path(),
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for i in 0..3 {
        assert!(out.join(format!("im{i}.txt")).exists());
    }
    let text = stdout(&res);
    assert!(text.contains("converted 3 of 3"));
    assert!(text.contains("Dead Knot: 1"));
    assert!(text.contains("total objects: 3"));
    // empty class line still listed
    assert!(text.contains("Knot with crack: 0"));
}

#[test]
fn convert_partial_failure_exits_nonzero_but_writes_good_files() {
    let dir = tempfile::tempdir().unwrap();
    let voc = dir.path().join("voc");
    fs::create_dir(&voc).unwrap();
    fs::write(voc.join("good.xml"), voc_xml("good", "Crack")).unwrap();
    fs::write(voc.join("bad.xml"), "<annotation><garbage").unwrap();
    let res = lwdet(
        &["convert", "--voc-dir", "voc", "--out", "labels"],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));
    assert!(dir.path().join("labels/good.txt").exists());
    assert!(!dir.path().join("labels/bad.txt").exists());
    assert!(String::from_utf8_lossy(&res.stderr).contains("bad.xml"));
}

#[test]
fn convert_empty_dir_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("voc")).unwrap();
    let res = lwdet(
        &["convert", "--voc-dir", "voc", "--out", "labels"],
        dir.path(),
    );
    assert!(res.status.success());
    assert!(stdout(&res).contains("converted 0 of 0"));
}

fn seed_corpus(dir: &Path, n: usize) {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&labels).unwrap();
    for i in 0..n {
        write_ppm(&images.join(format!("im{i}.ppm")), 32, 24, (i * 17) as u8);
        fs::write(
            labels.join(format!("im{i}.txt")),
            format!("{} 0.500000 0.500000 0.250000 0.250000\n", i % 4),
        )
        .unwrap();
    }
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn augment_expands_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    seed_corpus(dir.path(), 10);
    let args = [
        "augment",
        "--images",
        "images",
        "--labels",
        "labels",
        "--out",
        "aug",
        "--seed",
        "3",
        "--target-total",
        "24",
    ];
    let res = lwdet(&args, dir.path());
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(stdout(&res).contains("expanded 10 -> 24"));
    assert_eq!(fs::read_dir(dir.path().join("aug/images")).unwrap().count(), 24);
    assert_eq!(fs::read_dir(dir.path().join("aug/labels")).unwrap().count(), 24);

    let first = dir_snapshot(&dir.path().join("aug"));
    fs::remove_dir_all(dir.path().join("aug")).unwrap();
    assert!(lwdet(&args, dir.path()).status.success());
    assert_eq!(first, dir_snapshot(&dir.path().join("aug")));
}

#[test]
fn augment_target_below_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    seed_corpus(dir.path(), 5);
    let res = lwdet(
        &[
            "augment",
            "--images",
            "images",
            "--labels",
            "labels",
            "--out",
            "aug",
            "--target-total",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn split_writes_partition_manifests() {
    let dir = tempfile::tempdir().unwrap();
    seed_corpus(dir.path(), 20);
    let res = lwdet(
        &["split", "--dir", ".", "--ratio", "0.9", "--seed", "1"],
        dir.path(),
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let train: Vec<String> = fs::read_to_string(dir.path().join("train.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let test: Vec<String> = fs::read_to_string(dir.path().join("test.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(train.len(), 18);
    assert_eq!(test.len(), 2);
    let mut all: Vec<String> = train.iter().chain(test.iter()).cloned().collect();
    all.sort();
    let expected: Vec<String> = {
        let mut v: Vec<String> = (0..20).map(|i| format!("im{i}")).collect();
        v.sort();
        v
    };
    assert_eq!(all, expected);
}

#[test]
fn split_rejects_bad_ratio() {
    let dir = tempfile::tempdir().unwrap();
    seed_corpus(dir.path(), 4);
    let res = lwdet(
        &["split", "--dir", ".", "--ratio", "1.5"],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn init_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    seed_corpus(dir.path(), 1);
    let res = lwdet(&["init", "--seed", "7", "--out", "w.bin"], dir.path());
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("w.bin").exists());

    // conf out of range is a validation failure before any heavy work
    let res = lwdet(
        &[
            "infer", "--weights", "w.bin", "--image", "images/im0.ppm", "--conf", "1.1",
        ],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));

    let res = lwdet(
        &[
            "infer",
            "--weights",
            "w.bin",
            "--image",
            "images/im0.ppm",
            "--conf",
            "0.9",
            "--out",
            "dets.txt",
        ],
        dir.path(),
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    // dump is parseable: 6 space-separated fields per line
    let dump = fs::read_to_string(dir.path().join("dets.txt")).unwrap();
    for line in dump.lines() {
        assert_eq!(line.split_whitespace().count(), 6, "line `{line}`");
    }

    // missing weight file is a validation failure
    let res = lwdet(
        &["infer", "--weights", "nope.bin", "--image", "images/im0.ppm"],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn eval_on_ground_truth_detections_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    seed_corpus(dir.path(), 4);
    // detections identical to the ground truths, in source-image pixels
    let dets = dir.path().join("dets");
    fs::create_dir(&dets).unwrap();
    for i in 0..4 {
        let (w, h) = (32.0, 24.0);
        fs::write(
            dets.join(format!("im{i}.txt")),
            format!(
                "{} 0.900000 {:.6} {:.6} {:.6} {:.6}\n",
                i % 4,
                0.375 * w,
                0.375 * h,
                0.625 * w,
                0.625 * h
            ),
        )
        .unwrap();
    }
    let res = lwdet(
        &[
            "eval",
            "--detections",
            "dets",
            "--images",
            "images",
            "--labels",
            "labels",
            "--pr-out",
            "pr",
        ],
        dir.path(),
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = stdout(&res);
    assert!(text.contains("mAP: 100.0%"), "{text}");
    let pr = fs::read_to_string(dir.path().join("pr/Crack.txt")).unwrap();
    assert!(pr.starts_with("# class Crack\n"));
    assert!(pr.contains("1.000000 1.000000"));
}

#[test]
fn eval_requires_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    seed_corpus(dir.path(), 1);
    let res = lwdet(
        &["eval", "--images", "images", "--labels", "labels"],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn count_prints_both_measured_and_reference() {
    let dir = tempfile::tempdir().unwrap();
    let res = lwdet(&["count"], dir.path());
    assert!(res.status.success());
    let text = stdout(&res);
    assert!(text.contains("params:"));
    assert!(text.contains("bn running stats:"));
    assert!(text.contains("flops @ 640:"));
    assert!(text.contains("5.07M params, 9.4 GFLOPs"));
}
