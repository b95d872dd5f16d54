use proptest::prelude::*;
use scenectx::context::{AxisSet, LabeledPoint, LabeledPointCloud, SceneHypergraph, ScenePortrait};
use scenectx::ergonomics::{contact_loss, Pose};
use scenectx::geometry::{nearest_linear, umeyama_align, SimilarityTransform};
use scenectx::layout::{align_instance, IcpParams};
use scenectx::navigation::{plan_path, OccupancyGrid};
use scenectx::projection::{render_pointmap, Camera, Lens};
use scenectx::protocol::{parse_hypergraph, serialize_hypergraph};
use scenectx::{HyperEdge, MeshInstance, Relation, RelationParams, SpatialContext, SpatialIndex, Vec3};
use std::collections::{BinaryHeap, BTreeMap};
use std::cmp::Reverse;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = nalgebra::Rotation3<f64>> {
    (vec3(1.0), 0.0..3.1).prop_map(|(axis, angle)| {
        let axis = if axis.norm() < 1e-3 { Vec3::y() } else { axis };
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
    })
}

fn labeled_cloud(max_label: u32) -> impl Strategy<Value = LabeledPointCloud> {
    prop::collection::vec((vec3(5.0), 0..=max_label), 1..200).prop_map(|pts| {
        LabeledPointCloud::new(pts.into_iter().map(|(p, l)| LabeledPoint::new(p, [0.5; 3], l)).collect())
    })
}

fn context_of(cloud: LabeledPointCloud, max_label: u32) -> SpatialContext {
    let mut g = SceneHypergraph::default();
    for id in 1..=max_label {
        g.add_node(id, format!("obj{id}"));
    }
    SpatialContext::new(ScenePortrait::from_text("scene"), cloud, g)
}

fn sorted_positions(cloud: &LabeledPointCloud) -> Vec<[u64; 3]> {
    let mut v: Vec<[u64; 3]> = cloud.points.iter().map(|p| [p.position.x.to_bits(), p.position.y.to_bits(), p.position.z.to_bits()]).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kd_tree_matches_linear_scan(points in prop::collection::vec(vec3(10.0), 1..300), queries in prop::collection::vec(vec3(12.0), 1..30)) {
        let index = SpatialIndex::build(&points).unwrap();
        for q in &queries {
            let (i, d) = index.nearest(q);
            let (_, d_lin) = nearest_linear(&points, q).unwrap();
            prop_assert_eq!(d, d_lin);
            prop_assert_eq!((points[i] - q).norm(), d);
        }
    }

    #[test]
    fn umeyama_recovers_exact_similarity(pts in prop::collection::vec(vec3(2.0), 6..60), rot in rotation(), t in vec3(5.0), s in 0.5..2.0f64) {
        let truth = SimilarityTransform::new(s, rot, t).unwrap();
        let dst: Vec<Vec3> = pts.iter().map(|p| truth.apply(p)).collect();
        // Skip near-degenerate samples.
        prop_assume!(scenectx::geometry::pca_obb(&pts).map(|o| o.half_extents.min() > 0.05).unwrap_or(false));
        let got = umeyama_align(&pts, &dst, true).unwrap();
        prop_assert!((got.scale() - s).abs() < 1e-8);
        prop_assert!(got.rotation_angle_to(&truth) < 1e-7);
        prop_assert!((got.translation() - t).norm() < 1e-7);
    }

    #[test]
    fn partition_counts_and_extract_replace(cloud in labeled_cloud(4)) {
        let ctx = context_of(cloud, 4);
        let counts = ctx.cloud.label_counts();
        prop_assert_eq!(counts.values().sum::<usize>(), ctx.cloud.len());
        let mut total = counts.get(&0).copied().unwrap_or(0);
        for id in 1..=4 {
            match ctx.extract_instance(id) {
                Ok(seg) => {
                    prop_assert!(seg.points.iter().all(|p| p.label == id));
                    total += seg.len();
                    let back = ctx.replace_instance(id, &seg).unwrap();
                    prop_assert_eq!(back.cloud.label_counts(), counts.clone());
                    prop_assert_eq!(sorted_positions(&back.cloud), sorted_positions(&ctx.cloud));
                    prop_assert_eq!(back.extract_instance(id).unwrap(), seg);
                }
                Err(_) => prop_assert!(!counts.contains_key(&id)),
            }
        }
        prop_assert_eq!(total, ctx.cloud.len());
    }

    #[test]
    fn transform_then_inverse_restores(cloud in labeled_cloud(3), rot in rotation(), t in vec3(3.0), s in 0.5..2.0f64) {
        let ctx = context_of(cloud, 3);
        let tr = SimilarityTransform::new(s, rot, t).unwrap();
        let moved = ctx.transform_instance(2, &tr).unwrap();
        let back = moved.transform_instance(2, &tr.inverse()).unwrap();
        for (a, b) in ctx.cloud.points.iter().zip(&back.cloud.points) {
            prop_assert_eq!(a.label, b.label);
            if a.label == 2 {
                prop_assert!((a.position - b.position).norm() < 1e-9);
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn contact_loss_matches_all_pairs(a in prop::collection::vec(vec3(1.0), 1..80), b in prop::collection::vec(vec3(1.0), 1..80), t in vec3(3.0), eps in 1e-3..0.5f64) {
        let pi = Pose::identity();
        let pj = Pose::rigid(nalgebra::UnitQuaternion::identity(), t);
        let mut best = f64::INFINITY;
        for p in &a {
            for q in &b {
                best = best.min((p - (q + t)).norm());
            }
        }
        let expect = (best - eps).max(0.0).powi(2);
        prop_assert!((contact_loss(&a, &b, &pi, &pj, eps).unwrap() - expect).abs() <= 1e-9);
    }
}

fn random_edge(relation: usize, members: Vec<u32>, weight: f64, param: f64) -> HyperEdge {
    let r = Relation::ALL[relation];
    let mut p = RelationParams::default();
    match r {
        Relation::Contact => p.epsilon = Some(param),
        Relation::Clearance => p.clearance_radius = Some(param),
        Relation::Alignment | Relation::Symmetry => p.axes = AxisSet::from_bits((param * 7.0) as u8 % 7 + 1),
        Relation::Equidistance => p.axis = Some(Vec3::new(param, 1.0, -0.5).normalize()),
    }
    HyperEdge::new(r, members[..r.arity()].to_vec()).with_weight(weight).with_params(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hypergraph_text_round_trips(
        names in prop::collection::vec(("[a-zA-Z _\"\\\\é]{0,10}", any::<bool>()), 1..6),
        edges in prop::collection::vec((0..5usize, 0.0..10.0f64, 1e-3..1.0f64), 0..8),
    ) {
        let mut g = SceneHypergraph::default();
        for (k, (name, planned)) in names.iter().enumerate() {
            g.nodes.insert(k as u32 + 1, scenectx::Node { id: k as u32 + 1, name: name.clone(), planned: *planned });
        }
        let n = names.len() as u32;
        for (k, (r, w, param)) in edges.into_iter().enumerate() {
            let members = (0..3).map(|m| (k as u32 + m) % n + 1).collect::<Vec<_>>();
            if Relation::ALL[r].arity() > names.len() {
                continue;
            }
            g.edges.push(random_edge(r, members, w, param));
        }
        let text = serialize_hypergraph(&g);
        prop_assert_eq!(parse_hypergraph(&text).unwrap(), g);
    }
}

/// Plain Dijkstra with the planner's move rules, in cell units.
fn dijkstra(grid: &OccupancyGrid, s: (usize, usize), t: (usize, usize)) -> Option<f64> {
    let (w, h) = (grid.width as isize, grid.height as isize);
    let occ = |i: isize, j: isize| grid.cells[(j * w + i) as usize];
    let mut dist: BTreeMap<(isize, isize), f64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    let start = (s.0 as isize, s.1 as isize);
    dist.insert(start, 0.0);
    heap.push(Reverse((ordered(0.0), start)));
    while let Some(Reverse((d, c))) = heap.pop() {
        let d = f64::from_bits(d);
        if d > dist[&c] {
            continue;
        }
        if c == (t.0 as isize, t.1 as isize) {
            return Some(d);
        }
        for di in -1..=1 {
            for dj in -1..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (i, j) = (c.0 + di, c.1 + dj);
                if i < 0 || j < 0 || i >= w || j >= h || occ(i, j) {
                    continue;
                }
                if di != 0 && dj != 0 && occ(c.0 + di, c.1) && occ(c.0, c.1 + dj) {
                    continue;
                }
                let nd = d + if di != 0 && dj != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                if dist.get(&(i, j)).is_none_or(|&old| nd < old) {
                    dist.insert((i, j), nd);
                    heap.push(Reverse((ordered(nd), (i, j))));
                }
            }
        }
    }
    None
}

/// Non-negative floats order like their bit patterns.
fn ordered(x: f64) -> u64 {
    x.to_bits()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn path_length_matches_dijkstra(w in 2usize..40, h in 2usize..40, density in 0.0..0.45f64, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut grid = OccupancyGrid::new([0.0, 0.0], 0.5, w, h).unwrap();
        for c in grid.cells.iter_mut() {
            *c = rng.random_bool(density);
        }
        let s = (0, 0);
        let t = (w - 1, h - 1);
        grid.cells[0] = false;
        grid.cells[t.1 * w + t.0] = false;
        let oracle = dijkstra(&grid, s, t);
        let planned = plan_path(&grid, grid.cell_center(s.0, s.1), grid.cell_center(t.0, t.1));
        match (oracle, planned) {
            (Some(d), Ok(p)) => {
                prop_assert!((p.length - d * 0.5).abs() < 1e-9, "planner {} oracle {}", p.length, d * 0.5);
                for wp in &p.waypoints {
                    let (i, j) = grid.cell_of(wp[0], wp[1]).unwrap();
                    prop_assert!(!grid.occupied(i, j));
                }
                // Inflating obstacles never shortens the optimal path.
                let fat = grid.dilate(1);
                if let Some(d2) = (!fat.occupied(0, 0) && !fat.occupied(t.0, t.1)).then(|| dijkstra(&fat, s, t)).flatten() {
                    prop_assert!(d2 >= d - 1e-12);
                }
            }
            (None, Err(e)) => prop_assert_eq!(e, scenectx::navigation::NavigationError::NoPath),
            (o, p) => prop_assert!(false, "oracle {:?} planner {:?}", o, p),
        }
    }

    #[test]
    fn z_buffer_keeps_nearest_point(cloud in labeled_cloud(5)) {
        let cam = Camera::new(
            nalgebra::Rotation3::identity(),
            Vec3::new(0.0, 0.0, 20.0),
            Lens::Orthographic { half_height: 6.0 },
            16,
            16,
        )
        .unwrap();
        let map = render_pointmap(&cloud, &cam, 0).unwrap();
        let mut best: BTreeMap<(usize, usize), (f64, u32)> = BTreeMap::new();
        for p in &cloud.points {
            if let Some((u, v, d)) = cam.project(&p.position) {
                let key = (u as usize, v as usize);
                if best.get(&key).is_none_or(|(bd, _)| d < *bd) {
                    best.insert(key, (d, p.label));
                }
            }
        }
        for row in 0..16 {
            for col in 0..16 {
                match best.get(&(col, row)) {
                    Some((d, l)) => {
                        prop_assert_eq!(map.depth_at(col, row), *d);
                        prop_assert_eq!(map.instance_at(col, row), *l);
                    }
                    None => prop_assert!(map.depth_at(col, row).is_infinite()),
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn icp_history_never_increases(seed in any::<u64>(), yaw in 0.0..6.28f64, s in 0.5..2.0f64, t in vec3(1.0)) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let verts: Vec<Vec3> = (0..300).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(0.0..0.5), rng.random_range(-0.3..0.3))).collect();
        let mesh = MeshInstance::new(verts.clone(), vec![], 1).unwrap();
        let truth = SimilarityTransform::new(s, nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), yaw), t).unwrap();
        let target = LabeledPointCloud::new(
            verts.iter().map(|v| LabeledPoint::new(truth.apply(v) + Vec3::new(rng.random_range(-0.01..0.01), 0.0, 0.0), [0.5; 3], 1)).collect(),
        );
        let r = align_instance(&mesh, &target, &IcpParams { subsample_mesh: 200, subsample_target: 250, seed, ..IcpParams::default() }).unwrap();
        prop_assert!(r.history.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.history);
        prop_assert_eq!(*r.history.last().unwrap(), r.objective);
    }
}
