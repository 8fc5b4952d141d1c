use chickface::geometry::{KeypointSet, Point2};
use chickface::keypoints::{decode, render_targets, KeypointModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn heatmap_round_trip_within_two_pixels() {
    let cfg = KeypointModelConfig { input_size: (256, 256), stride: 4, sigma: 2.0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // per-axis error everywhere; Euclidean error away from the border cells,
    // where the quarter-cell offset always applies
    let mut worst = 0.0f64;
    let mut worst_interior = 0.0f64;
    let mut n = 0;
    while n < 1000 {
        let pts: [Point2; 7] = std::array::from_fn(|_| Point2::new(rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)));
        let kps = KeypointSet::all_visible(pts);
        let hm = render_targets(&kps, &cfg).unwrap();
        let back = decode(&hm, (256.0, 256.0), cfg.visibility_floor);
        for ((_, a), (_, b)) in kps.iter().zip(back.iter()) {
            assert!(b.visible);
            let (dx, dy) = ((a.point.x - b.point.x).abs(), (a.point.y - b.point.y).abs());
            worst = worst.max(dx.max(dy));
            let inner = |v: f64| (4.0..252.0).contains(&v);
            if inner(a.point.x) && inner(a.point.y) {
                worst_interior = worst_interior.max(a.point.distance(&b.point));
            }
        }
        n += 7;
    }
    assert!(worst <= 2.0, "worst per-axis round-trip error {worst}");
    assert!(worst_interior <= 2f64.sqrt() + 1e-9, "worst interior error {worst_interior}");
}

#[test]
fn round_trip_through_resized_input() {
    let cfg = KeypointModelConfig { input_size: (128, 96), stride: 4, sigma: 2.0, ..Default::default() };
    let kps = KeypointSet::all_visible([Point2::new(40.0, 100.0); 7]);
    let hm = render_targets(&kps, &cfg).unwrap();
    // decoded in a frame twice as large
    let back = decode(&hm, (192.0, 256.0), 0.1);
    let p = back.iter().next().unwrap().1.point;
    assert!((p.x - 80.0).abs() <= 4.0 && (p.y - 200.0).abs() <= 4.0, "{p:?}");
}
