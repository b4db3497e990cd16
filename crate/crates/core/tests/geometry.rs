mod common;

use common::{checks, to_model, Poly};
use mappohr::collision::{covered_cells, polygons_collide, PolygonModel};
use mappohr::geometry::{ConvexPolygon, Point};
use mappohr::grid::{Cell, GridMap};
use proptest::prelude::*;

#[test]
fn distances_match_minkowski_oracle() {
    checks::distance_equivalence(300, 21).unwrap();
}

#[test]
fn covered_cells_match_rasterization() {
    checks::rasterization_equivalence(60, 22).unwrap();
}

#[test]
fn reference_footprints() {
    assert_eq!(PolygonModel::unit_square().covered_offsets().len(), 1);
    assert_eq!(PolygonModel::rectangle(3.0, 3.0).covered_offsets().len(), 9);
    assert_eq!(PolygonModel::aircraft().covered_offsets().len(), 23);
    let map = GridMap::empty(10, 10);
    let cells = covered_cells(&PolygonModel::aircraft(), Cell::new(5, 5), &map).unwrap();
    assert_eq!(cells.len(), 23);
    assert!(covered_cells(&PolygonModel::aircraft(), Cell::new(1, 5), &map).is_err());
}

fn polygon() -> impl Strategy<Value = Poly> {
    (any::<u64>(), 0.6f64..3.0).prop_map(|(seed, half)| {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        common::random_convex(&mut rng, half)
    })
}

fn place(p: &Poly, x: f64, y: f64) -> ConvexPolygon {
    ConvexPolygon::from_ccw(p.iter().map(|&(a, b)| Point::new(a + x, b + y)).collect())
}

proptest! {
    #[test]
    fn collision_is_symmetric(a in polygon(), b in polygon(), x in -6.0f64..6.0, y in -6.0f64..6.0, d in 0.0f64..2.0) {
        let (pa, pb) = (place(&a, 0.0, 0.0), place(&b, x, y));
        prop_assert_eq!(polygons_collide(&pa, &pb, d), polygons_collide(&pb, &pa, d));
        prop_assert!((pa.distance(&pb) - pb.distance(&pa)).abs() < 1e-12);
    }

    #[test]
    fn collision_is_monotone_in_d(a in polygon(), b in polygon(), x in -6.0f64..6.0, y in -6.0f64..6.0, d in 0.0f64..2.0, extra in 0.0f64..1.0) {
        let (pa, pb) = (place(&a, 0.0, 0.0), place(&b, x, y));
        if polygons_collide(&pa, &pb, d) {
            prop_assert!(polygons_collide(&pa, &pb, d + extra));
        }
    }

    #[test]
    fn covered_cells_are_translation_invariant(p in polygon(), dr in -5i32..5, dc in -5i32..5) {
        let model = to_model(&p);
        let base: Vec<(i32, i32)> = model.covered_offsets();
        let moved = place(&p, f64::from(dc), f64::from(dr));
        let moved_model = PolygonModel::new(moved.vertices().to_vec()).unwrap();
        let mut shifted: Vec<(i32, i32)> = moved_model.covered_offsets();
        shifted.iter_mut().for_each(|o| { o.0 -= dr; o.1 -= dc; });
        let mut base = base;
        base.sort();
        shifted.sort();
        prop_assert_eq!(base, shifted);
    }
}
