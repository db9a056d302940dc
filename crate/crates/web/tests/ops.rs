use roictrl_core::roi::RoiBox;
use roictrl_web::*;

#[test]
fn full_box_round_trip_reproduces_source() {
    let src = source_image(5, 16, 16);
    let back = roi_round_trip(5, 16, 16, 0.0, 0.0, 1.0, 1.0, 16).unwrap();
    assert_eq!(src, back);
    assert_eq!(roi_grid(5, 16, 16, 0.0, 0.0, 1.0, 1.0, 16).unwrap(), src);
}

#[test]
fn round_trip_dims_outside_the_box() {
    let back = roi_round_trip(1, 16, 16, 0.25, 0.25, 0.5, 0.5, 3).unwrap();
    assert_eq!(back[3], 64);
    let inside = 4 * (5 * 16 + 5);
    assert_eq!(back[inside + 3], 255);
}

#[test]
fn offset_edges_move_the_mask_edge() {
    let bx = RoiBox::new(2.4 / 8.0, 0.0, 6.4 / 8.0, 1.0).unwrap();
    let c = footprint_classes(8, 8, &bx);
    assert_eq!(&c[..8], &[0, 0, 1, 1, 1, 1, 0, 0]);
    let gaps = edge_gaps(8, 8, bx.x1, bx.y1, bx.x2, bx.y2).unwrap();
    assert!((gaps[0] + 0.4).abs() < 1e-9 && (gaps[1] + 0.4).abs() < 1e-9);
}

#[test]
fn rounding_ties_split_the_classes() {
    let bx = RoiBox::new(2.5 / 8.0, 0.0, 5.5 / 8.0, 1.0).unwrap();
    assert_eq!(&footprint_classes(8, 8, &bx)[..8], &[0, 0, 3, 1, 1, 2, 0, 0]);
}

#[test]
fn flop_curve_ratio() {
    let f = attention_flops(vec![128], 25, 25, 64, 4);
    assert_eq!(f[1] / f[0], 625.0 / 16384.0);
}
