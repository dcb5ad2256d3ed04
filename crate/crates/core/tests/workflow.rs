use flowgest::ingest::{ClipStatus, FRAME_HEIGHT, FRAME_WIDTH};
use flowgest::raster::{Frame, Plane};
use flowgest::workflow::{clip_frames_dir, list_frames, manifest_path, run_preprocess, WorkflowError};

fn write_trial(root: &std::path::Path, name: &str, frames: u32) {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    for i in 1..=frames {
        // frame index encoded in the pixel value so re-timing is observable
        let f = Frame::gray(Plane::filled(64, 48, i as u8));
        f.save_png(&dir.join(format!("frame_{i:06}.png"))).unwrap();
    }
}

#[test]
fn preprocess_applies_timing_and_exclusion_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, transcripts, out) = (tmp.path().join("frames"), tmp.path().join("tx"), tmp.path().join("out"));
    write_trial(&frames, "Suturing_B001", 100);
    std::fs::create_dir_all(&transcripts).unwrap();
    std::fs::write(transcripts.join("Suturing_B001.txt"), "1 24 G1\n25 33 G2\n34 70 G3\n").unwrap();

    let metas = run_preprocess(&frames, &transcripts, &out).unwrap();
    let summary: Vec<(u32, u32, ClipStatus)> = metas.iter().map(|m| (m.sample_rate_hz, m.frame_count, m.status)).collect();
    assert_eq!(
        summary,
        vec![(40, 32, ClipStatus::Kept), (40, 12, ClipStatus::Excluded), (30, 37, ClipStatus::Kept)]
    );
    assert!(manifest_path(&out).is_file());

    let first = list_frames(&clip_frames_dir(&out, &metas[0].clip_id())).unwrap();
    assert_eq!(first.len(), 32);
    let values: Vec<u8> = first.iter().map(|p| Frame::load(p).unwrap().data[0]).collect();
    // output frame k shows source frame 1 + floor(3k/4)
    let expect: Vec<u8> = (0..32).map(|k| (1 + 3 * k / 4) as u8).collect();
    assert_eq!(values, expect);
    let f = Frame::load(&first[0]).unwrap();
    assert_eq!((f.width, f.height), (FRAME_WIDTH, FRAME_HEIGHT));

    assert!(!clip_frames_dir(&out, &metas[1].clip_id()).exists());
    assert_eq!(list_frames(&clip_frames_dir(&out, &metas[2].clip_id())).unwrap().len(), 37);
}

#[test]
fn preprocess_reports_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_preprocess(&tmp.path().join("nope"), tmp.path(), &tmp.path().join("o")).unwrap_err();
    assert!(matches!(err, WorkflowError::Missing(ref m) if m.contains("nope")), "{err}");

    let (frames, tx) = (tmp.path().join("frames"), tmp.path().join("tx"));
    std::fs::create_dir_all(&tx).unwrap();
    write_trial(&frames, "Suturing_C002", 10);
    std::fs::write(tx.join("Suturing_C002.txt"), "1 40 G1\n").unwrap();
    // annotation runs past the last extracted frame
    assert!(run_preprocess(&frames, &tx, &tmp.path().join("o")).is_err());
}
