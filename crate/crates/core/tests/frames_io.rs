//! Loading clips from frame directories through a manifest.

use std::fs;

use twinmae_core::video::{generate_clip, load_frames_dir, write_clip, Frame, SceneSpec};
use twinmae_core::Error;

#[test]
fn written_clips_load_back_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SceneSpec { clip_length: 5, ..SceneSpec::default() };
    let clips: Vec<_> = (0..2).map(|s| generate_clip(&spec, s).unwrap()).collect();
    for (i, clip) in clips.iter().enumerate() {
        write_clip(clip, &tmp.path().join(format!("clip{i}"))).unwrap();
    }
    let manifest = tmp.path().join("manifest.txt");
    fs::write(&manifest, "# two clips\nclip0\n\nclip1\n").unwrap();
    let loaded = load_frames_dir(&manifest).unwrap();
    assert_eq!(loaded.len(), 2);
    for (orig, back) in clips.iter().zip(&loaded) {
        assert_eq!(back.frames.len(), 5);
        for (a, b) in orig.frames.iter().zip(&back.frames) {
            assert_eq!((a.width, a.height), (b.width, b.height));
            // 8-bit PNG quantization.
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }
}

#[test]
fn mismatched_frame_sizes_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("clip");
    fs::create_dir(&dir).unwrap();
    Frame::filled(8, 8, 0.2).save_png(&dir.join("frame_0000.png")).unwrap();
    Frame::filled(16, 8, 0.2).save_png(&dir.join("frame_0001.png")).unwrap();
    let manifest = tmp.path().join("m.txt");
    fs::write(&manifest, "clip\n").unwrap();
    assert!(matches!(load_frames_dir(&manifest), Err(Error::Ingestion { .. })));
}

#[test]
fn missing_clip_directory_is_an_ingestion_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.txt");
    fs::write(&manifest, "does-not-exist\n").unwrap();
    assert!(load_frames_dir(&manifest).is_err());
}
