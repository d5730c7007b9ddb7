use hnetrack_core::assignment::{assign_labels, GridSpec};
use hnetrack_core::geometry::{decode_box, encode_targets, iou, nms, BBox};
use proptest::prelude::*;

fn raster(b: &BBox<f64>, n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for y in b.y0 as usize..b.y1 as usize {
        for x in b.x0 as usize..b.x1 as usize {
            m[y * n + x] = true;
        }
    }
    m
}

fn int_box() -> impl Strategy<Value = BBox<f64>> {
    (0u8..12, 0u8..12, 1u8..8, 1u8..8).prop_map(|(x, y, w, h)| {
        BBox::from_corners(x as f64, y as f64, (x + w).min(16) as f64, (y + h).min(16) as f64)
    })
}

fn greedy_reference(boxes: &[BBox<f64>], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= thr) {
            keep.push(i);
        }
    }
    keep
}

proptest! {
    #[test]
    fn iou_matches_pixel_count(a in int_box(), b in int_box()) {
        let (ma, mb) = (raster(&a, 16), raster(&b, 16));
        let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count() as f64;
        let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count() as f64;
        prop_assert!((iou(&a, &b) - inter / union).abs() < 1e-12);
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn nms_matches_greedy(boxes in prop::collection::vec(int_box(), 0..10), seed in 0u64..1000, thr in 0.05f64..0.95) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((seed + 7 * i as u64) % 5) as f64).collect();
        prop_assert_eq!(nms(&boxes, &scores, thr).unwrap(), greedy_reference(&boxes, &scores, thr));
    }

    #[test]
    fn assignment_matches_point_test(x0 in 0.0f64..120.0, y0 in 0.0f64..120.0, w in 1.0f64..127.0, h in 1.0f64..127.0) {
        let spec = GridSpec::centered(8, 9, 9, 127).unwrap();
        let gt = BBox::from_corners(x0, y0, (x0 + w).min(127.0), (y0 + h).min(127.0));
        let expected: Vec<(usize, usize)> = (0..9)
            .flat_map(|y| (0..9).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let p = spec.grid_to_image::<f64>(x, y);
                p.x > gt.x0 && p.x < gt.x1 && p.y > gt.y0 && p.y < gt.y1
            })
            .collect();
        match assign_labels(&gt, &spec) {
            Ok(maps) => {
                prop_assert_eq!(maps.num_positives(), expected.len());
                for &(x, y) in &expected {
                    prop_assert!(maps.is_positive(x, y));
                    let p = spec.grid_to_image::<f64>(x, y);
                    let back = decode_box(p, &maps.regression_at(x, y)).unwrap();
                    prop_assert!((back.x0 - gt.x0).abs() < 1e-9 && (back.y1 - gt.y1).abs() < 1e-9);
                }
            }
            Err(_) => prop_assert!(expected.is_empty()),
        }
    }
}

#[test]
fn encode_rejects_boundary_points() {
    let gt = BBox::from_corners(0.0, 0.0, 10.0, 10.0);
    assert!(encode_targets(hnetrack_core::geometry::Point::new(0.0, 5.0), &gt).is_err());
    assert!(encode_targets(hnetrack_core::geometry::Point::new(5.0, 5.0), &gt).is_ok());
}
