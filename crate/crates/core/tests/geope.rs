use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poigen::anchors::{geope_rotate, AnchorSet};
use poigen::embed::{embed_text, Embedding};
use poigen::geocode::GeoPoint;

fn anchors() -> AnchorSet {
    AnchorSet::new(vec![
        GeoPoint::new(40.0, -74.0).unwrap(),
        GeoPoint::new(41.0, -73.0).unwrap(),
        GeoPoint::new(39.5, -72.0).unwrap(),
        GeoPoint::new(40.5, -75.5).unwrap(),
    ])
    .unwrap()
}

fn point(rng: &mut ChaCha8Rng) -> GeoPoint {
    GeoPoint::new(rng.gen_range(38.0..43.0), rng.gen_range(-77.0..-70.0)).unwrap()
}

#[test]
fn rotation_preserves_norm_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = anchors();
    for _ in 0..10_000 {
        let x = Embedding((0..64).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let y = geope_rotate(&x, point(&mut rng), &a).unwrap();
        assert!((x.norm() - y.norm()).abs() < 1e-9);
    }
}

#[test]
fn rotation_preserves_norm_of_text_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = anchors();
    let x = embed_text("golden cafe 12", "cafe", 64, 0).unwrap();
    for _ in 0..1000 {
        let y = geope_rotate(&x, point(&mut rng), &a).unwrap();
        assert!((y.norm() - 1.0).abs() < 1e-9);
    }
}

/// Distinct locations get distinct bearing tuples from non-collinear anchors.
#[test]
fn angle_tuples_are_injective_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = anchors();
    let mut collisions = 0;
    for _ in 0..10_000 {
        let p = point(&mut rng);
        let q = point(&mut rng);
        if p == q {
            continue;
        }
        let (ap, aq) = (a.angles(p), a.angles(q));
        if ap.iter().zip(&aq).all(|(x, y)| (x - y).abs() < 1e-12) {
            collisions += 1;
        }
    }
    assert_eq!(collisions, 0);
}

#[test]
fn nearby_points_rotate_less_than_distant_ones() {
    let a = anchors();
    let x = embed_text("lucky bank 3", "bank", 64, 0).unwrap();
    let base = GeoPoint::new(40.2, -73.5).unwrap();
    let near = GeoPoint::new(40.2005, -73.5005).unwrap();
    let far = GeoPoint::new(42.5, -71.0).unwrap();
    let r = |p| geope_rotate(&x, p, &a).unwrap();
    assert!(r(base).cosine(&r(near)) > r(base).cosine(&r(far)));
}
