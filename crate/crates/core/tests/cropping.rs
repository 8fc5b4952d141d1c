use chickface::cropping::{crop_full_face, crop_middle_face, eye_extremes};
use chickface::geometry::{align_face, BoundingBox, KeypointName, Point2};
use chickface::synth::{render_view, FaceParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_face(rng: &mut ChaCha8Rng) -> FaceParams {
    let a = rng.random_range(30.0..40.0);
    FaceParams {
        center: Point2::new(rng.random_range(70.0..90.0), rng.random_range(90.0..100.0)),
        axes: (a, a * rng.random_range(0.8..1.0)),
        roll_deg: rng.random_range(-20.0..20.0),
        comb_ratio: rng.random_range(0.15..0.45),
        beak_ratio: rng.random_range(0.14..0.3),
        head_rgb: [rng.random_range(215..250), rng.random_range(180..215), rng.random_range(40..80)],
    }
}

#[test]
fn middle_crops_of_random_faces_hold_containment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let params = random_face(&mut rng);
        let view = render_view(&params, 160, 170, 8, &mut rng).unwrap();
        let aligned = align_face(&view.image, &view.bbox, &view.keypoints).unwrap();
        assert!(!aligned.alignment.flagged, "case {case}");
        let full = crop_full_face(&aligned.image, aligned.aligned_box(), aligned.keypoints()).unwrap();
        let frame = BoundingBox::new(0.0, 0.0, 160.0, 170.0).unwrap();
        assert!(frame.contains_box(&full.source_box, 0.0));

        // eye extremes sit on the rendered eye discs
        let ext = eye_extremes(&full, 0.25).unwrap();
        assert!(!ext.fallback, "case {case}");
        let eye_r = 0.11 * params.axes.0;
        let r_eye = full.keypoints.point(KeypointName::RightEye).x;
        let l_eye = full.keypoints.point(KeypointName::LeftEye).x;
        assert!((ext.left_x as f64 - (r_eye - eye_r)).abs() <= 1.5, "case {case}: {} vs {}", ext.left_x, r_eye - eye_r);
        assert!((ext.right_x as f64 - (l_eye + eye_r)).abs() <= 1.5, "case {case}: {} vs {}", ext.right_x, l_eye + eye_r);

        let margin = rng.random_range(0.0..2.0);
        let mid = crop_middle_face(&full, margin, 0.25).unwrap();
        let b = mid.middle_box.bbox;
        let (w, h) = (full.width() as f64, full.height() as f64);
        assert!(b.area() <= w * h);
        assert!(BoundingBox::new(0.0, 0.0, w, h).unwrap().contains_box(&b, 0.0));
        for name in [KeypointName::UpperNose, KeypointName::MiddleNose, KeypointName::MiddleBeak] {
            assert!(b.contains(&full.keypoints.point(name)), "case {case}: {name}");
            assert!(mid.crop.keypoints.is_visible(name));
        }
        // symmetric margin unless clamped
        let left = ext.left_x as f64 - b.x;
        let right = b.right() - ext.right_x as f64;
        if b.x > 0.0 && b.right() < w {
            assert!((left - right).abs() < 1e-9);
            assert!((left - mid.middle_box.margin).abs() < 1e-9);
        }
        // a wider margin never shrinks the box
        let wider = crop_middle_face(&full, margin + 0.5, 0.25).unwrap().middle_box.bbox;
        assert!(wider.contains_box(&b, 1e-9));
        // the middle crop's pixels come from the full crop
        let (ox, oy) = ((mid.crop.source_box.x - full.source_box.x) as u32, (mid.crop.source_box.y - full.source_box.y) as u32);
        assert_eq!(mid.crop.image.get_pixel(0, 0), full.image.get_pixel(ox, oy));
    }
}

#[test]
fn zero_margin_spans_eye_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let view = render_view(&random_face(&mut rng), 160, 170, 0, &mut rng).unwrap();
    let aligned = align_face(&view.image, &view.bbox, &view.keypoints).unwrap();
    let full = crop_full_face(&aligned.image, aligned.aligned_box(), aligned.keypoints()).unwrap();
    let mid = crop_middle_face(&full, 0.0, 0.25).unwrap();
    assert_eq!(mid.middle_box.bbox.x, mid.extremes.left_x as f64);
    assert_eq!(mid.middle_box.bbox.right(), mid.extremes.right_x as f64);
}
