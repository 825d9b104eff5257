use std::path::PathBuf;

use mvnad::camera::{
    apply_homography, distort, parse_calibration, project_point, serialize_calibration, undistort,
};
use mvnad::Error;

fn fixture(i: usize) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/data/camera{i}.yml"));
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn all_fixtures_parse() {
    for i in 1..=4 {
        let c = parse_calibration(&fixture(i)).unwrap_or_else(|e| panic!("camera{i}: {e}"));
        assert_eq!((c.image_width, c.image_height), (4096, 3000));
        assert_eq!(c.distortion[5..], [0.0; 7]);
        c.validate().unwrap();
    }
}

#[test]
fn camera1_values_are_exact() {
    let c = parse_calibration(&fixture(1)).unwrap();
    assert_eq!(c.intrinsics[0][0], 1.9426147574516781e4);
    assert_eq!(c.h_matrix[0][2], 82.109891582446537);
    assert_eq!(c.distortion[0], -7.0994615634284253e-1);
    assert_eq!(c.board_dx, 2.0);
    assert_eq!(apply_homography(&c.h_matrix, (0.0, 0.0)).unwrap(), (82.109891582446537, 1085.9333933073324));
}

#[test]
fn unknown_keys_survive_round_trip() {
    for i in 1..=4 {
        let c = parse_calibration(&fixture(i)).unwrap();
        assert!(c.extra.iter().any(|(k, _)| k == "calibration_ver"));
        let text = serialize_calibration(&c);
        let back = parse_calibration(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(serialize_calibration(&back), text);
        // same key order as the source file
        let keys = |s: &str| -> Vec<String> {
            s.lines()
                .filter(|l| !l.starts_with(' ') && !l.is_empty())
                .map(|l| l.split(':').next().unwrap().trim().to_string())
                .collect()
        };
        assert_eq!(keys(&text), keys(&fixture(i)));
    }
}

#[test]
fn undistort_inverts_distort_on_grid() {
    for i in 1..=4 {
        let c = parse_calibration(&fixture(i)).unwrap();
        let mut worst = 0.0f64;
        for a in 0..=40 {
            for b in 0..=40 {
                let p = (-0.2 + 0.01 * a as f64, -0.2 + 0.01 * b as f64);
                let q = undistort(distort(p, &c.distortion).unwrap(), &c.distortion).unwrap();
                worst = worst.max((q.0 - p.0).abs()).max((q.1 - p.1).abs());
            }
        }
        assert!(worst < 1e-10, "camera{i}: {worst}");
    }
}

#[test]
fn eleven_distortion_entries_rejected() {
    let text = fixture(2);
    let start = text.find("distortion_matrix").unwrap();
    let patched = text[..start].to_string()
        + &text[start..].replacen("rows : 12", "rows : 11", 1).replacen(
            "    - 0.0000000000000000e+000\n",
            "",
            1,
        );
    let err = parse_calibration(&patched).unwrap_err();
    assert!(matches!(err, Error::Calibration { .. }));
    assert!(err.to_string().contains("distortion_matrix"), "{err}");
}

#[test]
fn points_in_front_project_inside_a_plausible_range() {
    let c = parse_calibration(&fixture(1)).unwrap();
    let t = c.translation();
    let r = c.rotation();
    // The board origin in camera coordinates is t; it must lie in front.
    assert!(t[2] > 0.0);
    let (u, v) = project_point(&c, [0.0, 0.0, 0.0]).unwrap();
    assert!(u.is_finite() && v.is_finite());
    // A point behind the camera: move far along the negative optical axis.
    let behind = [
        -(r[2][0] * (t[2] + 10.0)),
        -(r[2][1] * (t[2] + 10.0)),
        -(r[2][2] * (t[2] + 10.0)),
    ];
    assert!(matches!(project_point(&c, behind), Err(Error::BehindCamera { .. })));
}
